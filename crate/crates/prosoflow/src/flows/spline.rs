//! Monotonic rational-quadratic splines.
//!
//! Each spline is a strictly increasing map on [-B, B] built from K
//! rational-quadratic segments, with identity (slope-1 linear) tails outside
//! the interval. The derivative is analytic and the inverse solves one
//! quadratic per point, so both directions are exact.

/// Hyperparameters of one spline family.
#[derive(Clone, Copy, Debug)]
pub struct SplineConfig {
    /// Number of bins K.
    pub bins: usize,
    /// Half-width of the transformed interval.
    pub bound: f64,
    /// Minimum normalized bin fraction before scaling by 2B.
    pub min_bin: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        SplineConfig {
            bins: 10,
            bound: 5.0,
            min_bin: 1e-3,
        }
    }
}

impl SplineConfig {
    /// Raw parameter count per transformed element: K widths, K heights,
    /// K-1 interior derivatives.
    pub fn param_count(&self) -> usize {
        3 * self.bins - 1
    }
}

/// Offset added to raw derivative parameters so that a zero raw value maps to
/// a derivative of exactly 1 (softplus(SOFTPLUS_UNIT) = 1).
pub const SOFTPLUS_UNIT: f64 = 0.541_324_854_612_918_1;

/// One element's constrained spline: knot positions and derivatives.
#[derive(Clone, Debug)]
pub struct ConstrainedSpline {
    /// K+1 x-knots from -B to B.
    pub knots_x: Vec<f64>,
    /// K+1 y-knots from -B to B.
    pub knots_y: Vec<f64>,
    /// K+1 derivatives; the boundary entries are fixed at 1.
    pub derivs: Vec<f64>,
    pub bound: f64,
}

fn softmax_into(raw: &[f64], out: &mut [f64]) {
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &r) in out.iter_mut().zip(raw) {
        *o = (r - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl ConstrainedSpline {
    /// Maps one element's raw parameters (K widths, K heights, K-1 derivatives)
    /// to a valid monotone spline. Zero raw values give the identity map.
    pub fn from_raw(raw: &[f64], cfg: &SplineConfig) -> ConstrainedSpline {
        let k = cfg.bins;
        assert_eq!(raw.len(), cfg.param_count(), "raw spline parameter count");
        assert!(
            raw.iter().all(|v| v.is_finite()),
            "non-finite raw spline parameters"
        );
        let two_b = 2.0 * cfg.bound;
        let mut frac = vec![0.0; k];

        softmax_into(&raw[0..k], &mut frac);
        let mut knots_x = Vec::with_capacity(k + 1);
        knots_x.push(-cfg.bound);
        let mut acc = -cfg.bound;
        for f in &frac {
            let w = (cfg.min_bin + (1.0 - cfg.min_bin * k as f64) * f) * two_b;
            acc += w;
            knots_x.push(acc);
        }
        // pin the last knot to B exactly so tails join without rounding slack
        knots_x[k] = cfg.bound;

        softmax_into(&raw[k..2 * k], &mut frac);
        let mut knots_y = Vec::with_capacity(k + 1);
        knots_y.push(-cfg.bound);
        let mut acc = -cfg.bound;
        for f in &frac {
            let h = (cfg.min_bin + (1.0 - cfg.min_bin * k as f64) * f) * two_b;
            acc += h;
            knots_y.push(acc);
        }
        knots_y[k] = cfg.bound;

        let mut derivs = Vec::with_capacity(k + 1);
        derivs.push(1.0);
        for &r in &raw[2 * k..] {
            derivs.push(softplus(r + SOFTPLUS_UNIT));
        }
        derivs.push(1.0);

        ConstrainedSpline {
            knots_x,
            knots_y,
            derivs,
            bound: cfg.bound,
        }
    }

    /// Bin index whose [knot, next knot) interval contains `v` (by x knots).
    fn bin_of_x(&self, v: f64) -> usize {
        bisect(&self.knots_x, v)
    }

    fn bin_of_y(&self, v: f64) -> usize {
        bisect(&self.knots_y, v)
    }

    /// Forward map: y and log dy/dx at `x`. Identity with zero log-det
    /// outside [-B, B].
    pub fn forward(&self, x: f64) -> (f64, f64) {
        if x <= -self.bound || x >= self.bound {
            return (x, 0.0);
        }
        let k = self.bin_of_x(x);
        let (xk, xk1) = (self.knots_x[k], self.knots_x[k + 1]);
        let (yk, yk1) = (self.knots_y[k], self.knots_y[k + 1]);
        let (d0, d1) = (self.derivs[k], self.derivs[k + 1]);
        let w = xk1 - xk;
        let h = yk1 - yk;
        let s = h / w;
        let t = (x - xk) / w;
        let omt = 1.0 - t;
        let denom = s + (d1 + d0 - 2.0 * s) * t * omt;
        let y = yk + h * (s * t * t + d0 * t * omt) / denom;
        let deriv_num = s * s * (d1 * t * t + 2.0 * s * t * omt + d0 * omt * omt);
        let logdet = deriv_num.ln() - 2.0 * denom.ln();
        (y, logdet)
    }

    /// Inverse map: x and log dx/dy at `y`; the log-det is the negative of the
    /// forward log-det at the recovered x.
    pub fn inverse(&self, y: f64) -> (f64, f64) {
        if y <= -self.bound || y >= self.bound {
            return (y, 0.0);
        }
        let k = self.bin_of_y(y);
        let (xk, xk1) = (self.knots_x[k], self.knots_x[k + 1]);
        let (yk, yk1) = (self.knots_y[k], self.knots_y[k + 1]);
        let (d0, d1) = (self.derivs[k], self.derivs[k + 1]);
        let w = xk1 - xk;
        let h = yk1 - yk;
        let s = h / w;
        let yr = y - yk;
        let dsum = d1 + d0 - 2.0 * s;
        // quadratic a t^2 + b t + c = 0 in the numerically stable root form
        let a = h * (s - d0) + yr * dsum;
        let b = h * d0 - yr * dsum;
        let c = -s * yr;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let t = 2.0 * c / (-b - disc.sqrt());
        let t = t.clamp(0.0, 1.0);
        let x = xk + t * w;
        let omt = 1.0 - t;
        let denom = s + dsum * t * omt;
        let deriv_num = s * s * (d1 * t * t + 2.0 * s * t * omt + d0 * omt * omt);
        let logdet_fwd = deriv_num.ln() - 2.0 * denom.ln();
        (x, -logdet_fwd)
    }
}

/// Index of the rightmost knot not exceeding v, clamped to a valid bin.
fn bisect(knots: &[f64], v: f64) -> usize {
    let n = knots.len();
    let mut lo = 0usize;
    let mut hi = n - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if knots[mid] <= v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo.min(n - 2)
}

/// Forward transform over a slice with per-element raw parameters
/// (`raw` is elements x (3K-1), row-major).
pub fn spline_forward(x: &[f64], raw: &[f64], cfg: &SplineConfig) -> (Vec<f64>, Vec<f64>) {
    let p = cfg.param_count();
    assert_eq!(raw.len(), x.len() * p);
    let mut y = Vec::with_capacity(x.len());
    let mut ld = Vec::with_capacity(x.len());
    for (i, &xi) in x.iter().enumerate() {
        let sp = ConstrainedSpline::from_raw(&raw[i * p..(i + 1) * p], cfg);
        let (yi, li) = sp.forward(xi);
        y.push(yi);
        ld.push(li);
    }
    (y, ld)
}

/// Inverse transform over a slice with per-element raw parameters.
pub fn spline_inverse(y: &[f64], raw: &[f64], cfg: &SplineConfig) -> (Vec<f64>, Vec<f64>) {
    let p = cfg.param_count();
    assert_eq!(raw.len(), y.len() * p);
    let mut x = Vec::with_capacity(y.len());
    let mut ld = Vec::with_capacity(y.len());
    for (i, &yi) in y.iter().enumerate() {
        let sp = ConstrainedSpline::from_raw(&raw[i * p..(i + 1) * p], cfg);
        let (xi, li) = sp.inverse(yi);
        x.push(xi);
        ld.push(li);
    }
    (x, ld)
}

//! Dense row-major f64 tensors.
//!
//! Everything in the training path runs in 64-bit floats: the finite-difference
//! oracles and the spline root solving need the headroom.

use rand::Rng;
use rand_distr::StandardNormal;

/// A dense tensor of `f64` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Normal(0, std) entries drawn from `rng`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a 0-d or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major 2-D matrix product: `a` is m x k, `b` is k x n.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// Shape produced by broadcasting `a` against `b`, aligned from the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {:?} and {:?} are not broadcast-compatible",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Expand `data` of shape `from` to the broadcast shape `to`.
pub fn broadcast_to(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return data.to_vec();
    }
    let nd = to.len();
    let mut padded = vec![1usize; nd];
    padded[nd - from.len()..].copy_from_slice(from);

    let numel: usize = to.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; nd];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..nd).rev() {
            coords[d] = rem % to[d];
            rem /= to[d];
        }
        let mut src = 0usize;
        let mut stride = 1usize;
        for d in (0..nd).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            src += c * stride;
            stride *= padded[d];
        }
        *slot = data[src];
    }
    out
}

/// Sum `grad` of shape `from` down to `to` (the reverse of a broadcast).
pub fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let nd = from.len();
    let mut padded = vec![1usize; nd];
    padded[nd - to.len()..].copy_from_slice(to);

    let mut out = vec![0.0; to.iter().product::<usize>().max(1)];
    let mut coords = vec![0usize; nd];
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..nd).rev() {
            coords[d] = rem % from[d];
            rem /= from[d];
        }
        let mut dst = 0usize;
        let mut stride = 1usize;
        for d in (0..nd).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            dst += c * stride;
            stride *= padded[d];
        }
        out[dst] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn broadcast_row_vector() {
        let out = broadcast_to(&[1.0, 2.0], &[1, 2], &[3, 2]);
        assert_eq!(out, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let back = reduce_to_shape(&out, &[3, 2], &[1, 2]);
        assert_eq!(back, vec![3.0, 6.0]);
    }

    #[test]
    fn broadcast_scalar() {
        assert_eq!(broadcast_shape(&[4, 3], &[1]), vec![4, 3]);
        let out = broadcast_to(&[2.0], &[1], &[2, 2]);
        assert_eq!(out, vec![2.0; 4]);
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_panics() {
        Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]);
    }
}

//! Dense row-major `f64` tensors and the broadcasting kernels shared by the
//! graph ops.

use std::fmt;

/// A dense, contiguous, row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel(shape);
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Materialize a permutation of the axes.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.rank(), "permutation rank mismatch");
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        if out_shape.is_empty() {
            return self.clone();
        }
        let last = out_shape.len() - 1;
        let inner = out_shape[last];
        let inner_stride = src_strides[last];
        for_each_outer(&out_shape[..last], |idx| {
            let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            for j in 0..inner {
                out.push(self.data[base + j * inner_stride]);
            }
        });
        Tensor { shape: out_shape, data: out }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides(shape);
    let offset = rank - shape.len();
    (0..rank)
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f` with every multi-index of `shape`, in row-major order.
fn for_each_outer(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.iter().any(|&d| d == 0) {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    loop {
        f(&idx);
        let mut k = shape.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor { shape: a.shape.clone(), data };
    }
    if b.data.len() == 1 && b.rank() <= a.rank() {
        let y = b.data[0];
        return Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x, y)).collect() };
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape, b.shape));
    if out_shape.is_empty() {
        return Tensor { shape: out_shape, data: vec![f(a.data[0], b.data[0])] };
    }
    let (dims, strides) = coalesce(
        &out_shape,
        [broadcast_strides(&a.shape, &out_shape), broadcast_strides(&b.shape, &out_shape)],
    );
    let [sa, sb] = strides;
    let mut data = Vec::with_capacity(numel(&out_shape));
    let last = dims.len() - 1;
    let inner = dims[last];
    let (ia, ib) = (sa[last], sb[last]);
    for_each_outer(&dims[..last], |idx| {
        let ba: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let bb: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        match (ia, ib) {
            (1, 1) => data.extend(a.data[ba..ba + inner].iter().zip(&b.data[bb..bb + inner]).map(|(&x, &y)| f(x, y))),
            (1, 0) => {
                let y = b.data[bb];
                data.extend(a.data[ba..ba + inner].iter().map(|&x| f(x, y)));
            }
            (0, 1) => {
                let x = a.data[ba];
                data.extend(b.data[bb..bb + inner].iter().map(|&y| f(x, y)));
            }
            _ => data.extend((0..inner).map(|j| f(a.data[ba + j * ia], b.data[bb + j * ib]))),
        }
    });
    Tensor { shape: out_shape, data }
}

/// Merges adjacent dims that every operand walks contiguously (or
/// broadcasts over together), so inner loops run as long as possible.
fn coalesce<const N: usize>(shape: &[usize], strides: [Vec<usize>; N]) -> (Vec<usize>, [Vec<usize>; N]) {
    let mut dims = vec![shape[0]];
    let mut out: [Vec<usize>; N] = std::array::from_fn(|k| vec![strides[k][0]]);
    for i in 1..shape.len() {
        let last = dims.len() - 1;
        let mergeable = (0..N).all(|k| out[k][last] == strides[k][i] * shape[i]);
        if mergeable {
            dims[last] *= shape[i];
            for k in 0..N {
                out[k][last] = strides[k][i];
            }
        } else {
            dims.push(shape[i]);
            for k in 0..N {
                out[k].push(strides[k][i]);
            }
        }
    }
    (dims, out)
}

/// Sums `t` down to `shape`, the adjoint of broadcasting `shape` up to `t.shape()`.
pub fn reduce_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let mut out = Tensor::zeros(shape);
    if numel(shape) == 1 {
        out.data[0] = t.sum();
        return out;
    }
    let (dims, [so]) = coalesce(&t.shape, [broadcast_strides(shape, &t.shape)]);
    let last = dims.len() - 1;
    let inner = dims[last];
    let io = so[last];
    let mut src = 0;
    for_each_outer(&dims[..last], |idx| {
        let bo: usize = idx.iter().zip(&so).map(|(i, s)| i * s).sum();
        let block = &t.data[src..src + inner];
        match io {
            0 => out.data[bo] += block.iter().sum::<f64>(),
            1 => {
                for (o, v) in out.data[bo..bo + inner].iter_mut().zip(block) {
                    *o += *v;
                }
            }
            _ => {
                for (j, v) in block.iter().enumerate() {
                    out.data[bo + j * io] += *v;
                }
            }
        }
        src += inner;
    });
    out
}

/// Broadcast `t` up to `shape`.
pub fn expand_to(t: &Tensor, shape: &[usize]) -> Tensor {
    let zeros = Tensor::zeros(shape);
    let out = broadcast_binary(&zeros, t, |_, y| y);
    assert_eq!(out.shape, shape, "cannot expand {:?} to {shape:?}", t.shape);
    out
}

/// `(outer, dim, inner)` decomposition of `shape` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn reduce_is_adjoint_of_expand() {
        let t = Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]);
        let e = expand_to(&t, &[2, 3, 4]);
        assert_eq!(e.shape(), &[2, 3, 4]);
        let r = reduce_to(&e, &[3, 1]);
        assert_eq!(r.data(), &[8.0, 16.0, 24.0]);
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::new(&[2, 3], vec![0., 1., 2., 3., 4., 5.]);
        let p = t.permute(&[1, 0]);
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0., 3., 1., 4., 2., 5.]);
    }
}

//! Dense f64 tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major value; [`Graph`] records operations on
//! tensors define-by-run style and replays them in reverse for gradients.
//! Everything is 64-bit: the point of this crate is verification against
//! finite differences and analytic oracles, not throughput.

mod conv;
mod gemm;
pub mod gradcheck;
mod graph;

pub use graph::{Graph, Var};

use crate::{Error, Result};
use rand::Rng;

/// Dense N-dimensional array of f64, row-major, with an optional gradient
/// buffer filled in by [`Graph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and backing data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], grad: None, requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], grad: None, requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    /// Gaussian init with the given standard deviation (Box-Muller on the
    /// supplied RNG, so results are reproducible from the seed alone).
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
            data.push(r * c * std);
            if data.len() < n {
                data.push(r * s * std);
            }
        }
        Self { shape: shape.to_vec(), data, grad: None, requires_grad: false }
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape: shape.to_vec(), data, grad: None, requires_grad: false }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Marks the tensor as a differentiation root for graph leaves.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Same data viewed under a new shape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        Ok(Self { shape, data: self.data.clone(), grad: None, requires_grad: false })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Min-max projection of all entries into [0, 1]. When the range collapses
/// (max - min < 1e-12) the result is all zeros rather than a division blowup.
pub fn minmax_project(t: &Tensor) -> Tensor {
    let (lo, hi) = t.min_max();
    let range = hi - lo;
    let mut out = t.clone();
    out.grad = None;
    out.requires_grad = false;
    if range < 1e-12 {
        out.data.iter_mut().for_each(|v| *v = 0.0);
    } else {
        out.data.iter_mut().for_each(|v| *v = (*v - lo) / range);
    }
    out
}

/// Bilinear resize of the trailing two axes; leading axes are carried along.
pub fn resize_bilinear(t: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    if t.ndim() < 2 {
        return Err(Error::Dimension("resize needs at least 2 axes".into()));
    }
    let h = t.shape[t.ndim() - 2];
    let w = t.shape[t.ndim() - 1];
    if h == 0 || w == 0 || new_h == 0 || new_w == 0 {
        return Err(Error::Input("resize with empty spatial extent".into()));
    }
    let planes: usize = t.shape[..t.ndim() - 2].iter().product();
    let mut shape = t.shape.clone();
    let nd = shape.len();
    shape[nd - 2] = new_h;
    shape[nd - 1] = new_w;
    let mut out = vec![0.0; planes * new_h * new_w];
    // Align pixel centers: src = (dst + 0.5) * scale - 0.5, clamped.
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for p in 0..planes {
        let src = &t.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * new_h * new_w..(p + 1) * new_h * new_w];
        for oy in 0..new_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for ox in 0..new_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                let v00 = src[y0 * w + x0];
                let v01 = src[y0 * w + x1];
                let v10 = src[y1 * w + x0];
                let v11 = src[y1 * w + x1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                dst[oy * new_w + ox] = top + (bot - top) * ty;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// Area-average downsample of the trailing two axes by an integer factor.
pub fn area_downsample(t: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Input("downsample factor must be >= 1".into()));
    }
    let h = t.shape[t.ndim() - 2];
    let w = t.shape[t.ndim() - 1];
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "spatial extents {}x{} not divisible by factor {}",
            h, w, factor
        )));
    }
    let (nh, nw) = (h / factor, w / factor);
    let planes: usize = t.shape[..t.ndim() - 2].iter().product();
    let mut shape = t.shape.clone();
    let nd = shape.len();
    shape[nd - 2] = nh;
    shape[nd - 1] = nw;
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; planes * nh * nw];
    for p in 0..planes {
        let src = &t.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * nh * nw..(p + 1) * nh * nw];
        for oy in 0..nh {
            for ox in 0..nw {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                dst[oy * nw + ox] = acc * norm;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// Stacks same-shape tensors along a fresh leading axis.
pub fn stack_leading(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Input("stack of nothing".into()))?;
    let mut data = Vec::with_capacity(first.len() * parts.len());
    for p in parts {
        if p.shape != first.shape {
            return Err(Error::Dimension("stack of mismatched shapes".into()));
        }
        data.extend_from_slice(&p.data);
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&first.shape);
    Tensor::from_vec(shape, data)
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of the logistic sigmoid.
pub fn logit_scalar(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_shape() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn minmax_guard_maps_constant_to_zero() {
        let t = Tensor::full(&[4, 4], 2.5);
        let p = minmax_project(&t);
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_preserves_constants() {
        let t = Tensor::full(&[2, 8, 8], 0.75);
        let r = resize_bilinear(&t, 3, 5).unwrap();
        assert_eq!(r.shape, vec![2, 3, 5]);
        for &v in &r.data {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn area_downsample_averages() {
        let t = Tensor::from_vec(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let d = area_downsample(&t, 2).unwrap();
        assert_eq!(d.shape, vec![1, 1, 1]);
        assert!((d.data[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_logit_roundtrip() {
        for &p in &[0.1, 0.5, 0.7, 0.99] {
            assert!((sigmoid_scalar(logit_scalar(p)) - p).abs() < 1e-12);
        }
    }
}

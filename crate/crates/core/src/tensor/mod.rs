//! Dense tensors, a reverse-mode tape, SGD and finite-difference checks.

mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;
mod params;

pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_many, GradCheckOptions, GradCheckReport};
pub use graph::{sigmoid, smooth_l1_value, ClassLabel, Graph, Var};
pub use optim::{Sgd, SgdConfig};
pub use params::{Bound, ParamGroup, ParamId, ParamStore};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
///
/// `product(shape) == data.len()` always holds; the empty shape is a scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Element at a multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for dim {d}");
            acc * d + i
        })
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dim(op, format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(op, format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        kernels::transpose(&self.data, &mut out, m, n);
        Tensor::new(vec![n, m], out)
    }

    /// Row-wise softmax of a matrix, stabilised by subtracting each row maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        let mut out = vec![0.0; m * n];
        kernels::softmax_rows(&self.data, &mut out, n);
        Tensor::new(vec![m, n], out)
    }

    /// `x · w (+ b)` applied to every row of `x`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let (_, c) = self.dims2("linear")?;
        let (ci, co) = w.dims2("linear")?;
        if c != ci {
            return Err(Error::shape("linear", &self.shape, &w.shape));
        }
        let mut out = self.matmul(w)?;
        if let Some(b) = b {
            if b.shape != [co] {
                return Err(Error::shape("linear bias", &b.shape, &[co]));
            }
            for row in out.data.chunks_mut(co) {
                row.iter_mut().zip(&b.data).for_each(|(o, bv)| *o += bv);
            }
        }
        Ok(out)
    }

    /// 2-D cross-correlation (no kernel flip) of a `C_in×H×W` input with a
    /// `C_out×C_in×kh×kw` kernel.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        let geom = kernels::ConvGeom::new(self.shape(), kernel.shape(), stride, padding)?;
        if let Some(b) = bias {
            if b.shape != [geom.co] {
                return Err(Error::shape("conv2d bias", &b.shape, &[geom.co]));
            }
        }
        let mut out = vec![0.0; geom.out_len()];
        kernels::conv2d_forward(&geom, &self.data, &kernel.data, bias.map(|b| b.data()), &mut out);
        Tensor::new(vec![geom.co, geom.oh, geom.ow], out)
    }

    /// Per-channel correlation of `self` (the search map) with `template`.
    pub fn depthwise_xcorr(template: &Tensor, search: &Tensor) -> Result<Tensor> {
        let g = kernels::XcorrGeom::new(template.shape(), search.shape())?;
        let mut out = vec![0.0; g.out_len()];
        kernels::xcorr_forward(&g, &template.data, &search.data, &mut out);
        Tensor::new(vec![g.c, g.oh, g.ow], out)
    }

    /// `C×h×w` map viewed as `h·w` tokens of dimension `C`.
    pub fn to_tokens(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3("to_tokens")?;
        let mut out = vec![0.0; c * h * w];
        kernels::transpose(&self.data, &mut out, c, h * w);
        Tensor::new(vec![h * w, c], out)
    }

    pub fn from_tokens(&self, h: usize, w: usize) -> Result<Tensor> {
        let (t, c) = self.dims2("from_tokens")?;
        if t != h * w {
            return Err(Error::dim("from_tokens", format!("{t} tokens cannot fill {h}x{w}")));
        }
        let mut out = vec![0.0; t * c];
        kernels::transpose(&self.data, &mut out, t, c);
        Tensor::new(vec![c, h, w], out)
    }
}

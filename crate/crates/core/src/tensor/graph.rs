//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep.

use super::kernels::{self, ConvGeom, XcorrGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target for two-class softmax cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Xcorr {
        z: Var,
        x: Var,
        geom: XcorrGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Reshape(Var),
    Sum(Var),
    /// Mean two-class cross-entropy. Logits are `2A×h×w`: channel `a` holds
    /// the negative logit and channel `A + a` the positive logit of anchor `a`.
    SoftmaxCe {
        logits: Var,
        labels: Vec<ClassLabel>,
        count: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        normalizer: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded evaluation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = self.value(x).linear(self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(k).shape(), stride, padding)?;
        let out = self.value(x).conv2d(self.value(k), b.map(|b| self.value(b)), stride, padding)?;
        let rg = self.rg(&[x, k]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv2d { x, k, b, geom }, rg))
    }

    /// Depthwise correlation of search features `x` with template `z`.
    pub fn xcorr(&mut self, z: Var, x: Var) -> Result<Var> {
        let geom = XcorrGeom::new(self.value(z).shape(), self.value(x).shape())?;
        let out = Tensor::depthwise_xcorr(self.value(z), self.value(x))?;
        let rg = self.rg(&[z, x]);
        Ok(self.push(out, Op::Xcorr { z, x, geom }, rg))
    }

    pub fn maxpool(&mut self, x: Var, size: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("maxpool")?;
        if size == 0 || h < size || w < size {
            return Err(Error::dim("maxpool", format!("window {size} does not fit {h}x{w}")));
        }
        let (oh, ow) = (h / size, w / size);
        let mut out = vec![0.0; c * oh * ow];
        let argmax = kernels::maxpool_forward(self.value(x).data(), c, h, w, size, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::MaxPool { x, argmax }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// `C×h×w` → `(h·w)×C`.
    pub fn to_tokens(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3("to_tokens")?;
        let flat = self.reshape(a, &[c, h * w])?;
        self.transpose(flat)
    }

    /// `(h·w)×C` → `C×h×w`.
    pub fn from_tokens(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (t, c) = self.value(a).dims2("from_tokens")?;
        if t != h * w {
            return Err(Error::dim("from_tokens", format!("{t} tokens cannot fill {h}x{w}")));
        }
        let tr = self.transpose(a)?;
        self.reshape(tr, &[c, h, w])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean two-class softmax cross-entropy over non-ignored anchors.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[ClassLabel]) -> Result<Var> {
        let lv = self.value(logits);
        let (c2, h, w) = lv.dims3("softmax_ce")?;
        if c2 % 2 != 0 || labels.len() != c2 / 2 * h * w {
            return Err(Error::dim(
                "softmax_ce",
                format!("{} labels do not match logits {:?}", labels.len(), lv.shape()),
            ));
        }
        let half = labels.len();
        let d = lv.data();
        let mut total = 0.0;
        let mut count = 0;
        for (i, lab) in labels.iter().enumerate() {
            let (neg, pos) = (d[i], d[half + i]);
            let mx = neg.max(pos);
            let lse = mx + ((neg - mx).exp() + (pos - mx).exp()).ln();
            match lab {
                ClassLabel::Positive => total += lse - pos,
                ClassLabel::Negative => total += lse - neg,
                ClassLabel::Ignore => continue,
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract("softmax_ce: every anchor is ignored".into()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy on logits over the entries where `mask` is set.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], mask: &[bool]) -> Result<Var> {
        let d = self.value(logits).data();
        if targets.len() != d.len() || mask.len() != d.len() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("{} logits vs {} targets / {} mask", d.len(), targets.len(), mask.len()),
            ));
        }
        let mut total = 0.0;
        let mut count = 0;
        for ((&z, &t), &m) in d.iter().zip(targets).zip(mask) {
            if m {
                // max(z,0) - z t + ln(1 + e^{-|z|})
                total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Contract("bce_with_logits: empty mask".into()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// `Σ_masked smoothL1(pred − target) / normalizer`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], mask: &[bool], normalizer: f64) -> Result<Var> {
        let d = self.value(pred).data();
        if target.len() != d.len() || mask.len() != d.len() {
            return Err(Error::dim(
                "smooth_l1",
                format!("{} predictions vs {} targets / {} mask", d.len(), target.len(), mask.len()),
            ));
        }
        if normalizer <= 0.0 {
            return Err(Error::Contract("smooth_l1: normalizer must be positive".into()));
        }
        let total: f64 = d
            .iter()
            .zip(target)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&p, &t), _)| smooth_l1_value(p - t))
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(total / normalizer),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                normalizer,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`, replacing any earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(g.data_mut());
    }

    fn propagate(&mut self, id: usize, g: &Tensor) {
        let gd = g.data();
        // Values are cloned out of `self.nodes` only where the borrow checker needs it.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2("matmul").unwrap();
                let n = self.value(b).shape()[1];
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                self.accumulate(a, |ga| kernels::matmul_nt_acc(gd, &bv, ga, m, n, k));
                self.accumulate(b, |gb| kernels::matmul_tn_acc(&av, gd, gb, m, k, n));
            }
            &Op::Transpose(a) => {
                let (m, n) = self.value(a).dims2("transpose").unwrap();
                self.accumulate(a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gd[j * m + i];
                        }
                    }
                });
            }
            &Op::SoftmaxRows(a) => {
                let y = self.nodes[id].value.data().to_vec();
                let n = self.nodes[id].value.shape()[1];
                self.accumulate(a, |ga| kernels::softmax_rows_backward(&y, gd, ga, n));
            }
            &Op::Linear { x, w, b } => {
                let (t, c) = self.value(x).dims2("linear").unwrap();
                let co = self.value(w).shape()[1];
                let xv = self.value(x).data().to_vec();
                let wv = self.value(w).data().to_vec();
                self.accumulate(x, |gx| kernels::matmul_nt_acc(gd, &wv, gx, t, co, c));
                self.accumulate(w, |gw| kernels::matmul_tn_acc(&xv, gd, gw, t, c, co));
                if let Some(b) = b {
                    self.accumulate(b, |gb| {
                        for row in gd.chunks(co) {
                            gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                    });
                }
            }
            &Op::Conv2d { x, k, b, geom } => {
                if self.requires_grad(x) {
                    let kv = self.value(k).data().to_vec();
                    self.accumulate(x, |gx| kernels::conv2d_backward_input(&geom, gd, &kv, gx));
                }
                if self.requires_grad(k) {
                    let xv = self.value(x).data().to_vec();
                    self.accumulate(k, |gk| kernels::conv2d_backward_kernel(&geom, gd, &xv, gk));
                }
                if let Some(b) = b {
                    let plane = geom.oh * geom.ow;
                    self.accumulate(b, |gb| {
                        for (o, ch) in gb.iter_mut().zip(gd.chunks(plane)) {
                            *o += ch.iter().sum::<f64>();
                        }
                    });
                }
            }
            &Op::Xcorr { z, x, geom } => {
                let zv = self.value(z).data().to_vec();
                let xv = self.value(x).data().to_vec();
                self.accumulate(z, |gz| kernels::xcorr_backward(&geom, gd, &zv, &xv, Some(gz), None));
                self.accumulate(x, |gx| kernels::xcorr_backward(&geom, gd, &zv, &xv, None, Some(gx)));
            }
            Op::MaxPool { x, argmax } => {
                let (x, argmax) = (*x, argmax.clone());
                self.accumulate(x, |gx| {
                    for (&src, &gv) in argmax.iter().zip(gd) {
                        gx[src] += gv;
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(gd).for_each(|(o, v)| *o += v));
                self.accumulate(b, |gb| gb.iter_mut().zip(gd).for_each(|(o, v)| *o += v));
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                self.accumulate(a, |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(gd).zip(&bv) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(b, |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(gd).zip(&av) {
                        *o += gv * av;
                    }
                });
            }
            &Op::Relu(a) => {
                let av = self.value(a).data().to_vec();
                self.accumulate(a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(gd).zip(&av) {
                        if *x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            &Op::Scale(a, s) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(gd).for_each(|(o, v)| *o += s * v));
            }
            &Op::Reshape(a) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(gd).for_each(|(o, v)| *o += v));
            }
            &Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::SoftmaxCe { logits, labels, count } => {
                let (logits, count) = (*logits, *count);
                let labels = labels.clone();
                let d = self.value(logits).data().to_vec();
                let scale = gd[0] / count as f64;
                let half = labels.len();
                self.accumulate(logits, |gl| {
                    for (i, lab) in labels.iter().enumerate() {
                        let (neg, pos) = (d[i], d[half + i]);
                        let p_pos = 1.0 / (1.0 + (neg - pos).exp());
                        let p_neg = 1.0 - p_pos;
                        let (t_neg, t_pos) = match lab {
                            ClassLabel::Positive => (0.0, 1.0),
                            ClassLabel::Negative => (1.0, 0.0),
                            ClassLabel::Ignore => continue,
                        };
                        gl[i] += scale * (p_neg - t_neg);
                        gl[half + i] += scale * (p_pos - t_pos);
                    }
                });
            }
            Op::BceLogits {
                logits,
                targets,
                mask,
                count,
            } => {
                let (logits, count) = (*logits, *count);
                let (targets, mask) = (targets.clone(), mask.clone());
                let d = self.value(logits).data().to_vec();
                let scale = gd[0] / count as f64;
                self.accumulate(logits, |gl| {
                    for i in 0..d.len() {
                        if mask[i] {
                            gl[i] += scale * (sigmoid(d[i]) - targets[i]);
                        }
                    }
                });
            }
            Op::SmoothL1 {
                pred,
                target,
                mask,
                normalizer,
            } => {
                let (pred, normalizer) = (*pred, *normalizer);
                let (target, mask) = (target.clone(), mask.clone());
                let d = self.value(pred).data().to_vec();
                let scale = gd[0] / normalizer;
                self.accumulate(pred, |gp| {
                    for i in 0..d.len() {
                        if mask[i] {
                            let x = d[i] - target[i];
                            gp[i] += scale * if x.abs() < 1.0 { x } else { x.signum() };
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `0.5x²` for `|x| < 1`, `|x| − 0.5` otherwise.
pub fn smooth_l1_value(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let mut g = Graph::new();
        let xt = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let x = g.leaf(xt.clone(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &xt.scale(2.0));
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3], 2.0), true);
        let a = g.scale(x, 3.0);
        let b = g.scale(x, 5.0);
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0), true);
        let c = g.constant(Tensor::full(&[2], 3.0));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn all_ignored_ce_errors() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(&[2, 1, 1]), true);
        assert!(g.softmax_ce(l, &[ClassLabel::Ignore]).is_err());
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(&[4, 1, 2]), true);
        let labels = [ClassLabel::Positive, ClassLabel::Negative, ClassLabel::Positive, ClassLabel::Negative];
        let ce = g.softmax_ce(l, &labels).unwrap();
        assert!((g.value(ce).item().unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn smooth_l1_piecewise() {
        assert_eq!(smooth_l1_value(0.5), 0.125);
        assert_eq!(smooth_l1_value(2.0), 1.5);
        assert_eq!(smooth_l1_value(-2.0), 1.5);
        assert_eq!(smooth_l1_value(0.0), 0.0);
    }
}

//! Single-head scaled dot-product attention over channel tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Query/key/value projections, each a `C×C` matrix with optional bias.
#[derive(Clone, Debug)]
pub struct Projections {
    pub channels: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub bias: Option<[ParamId; 3]>,
}

impl Projections {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        channels: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / channels as f64).sqrt();
        let mut mat = |name: &str| {
            store.add(
                format!("{prefix}.{name}"),
                group,
                Tensor::randn(&[channels, channels], std, rng),
            )
        };
        let (w_q, w_k, w_v) = (mat("w_q"), mat("w_k"), mat("w_v"));
        let bias = bias.then(|| {
            ["b_q", "b_k", "b_v"].map(|n| store.add(format!("{prefix}.{n}"), group, Tensor::zeros(&[channels])))
        });
        Projections {
            channels,
            w_q,
            w_k,
            w_v,
            bias,
        }
    }
}

/// Output tokens and the row-stochastic attention matrix that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub tokens: Var,
    pub attn: Var,
}

/// `softmax(Q Kᵀ / √C) V` with `Q = query·w_q`, `K = key·w_k`, `V = value·w_v`.
pub fn attend(g: &mut Graph, p: &Bound, proj: &Projections, query: Var, key: Var, value: Var) -> Result<Attended> {
    for (name, v) in [("query", query), ("key", key), ("value", value)] {
        let (_, c) = g.value(v).dims2("attention")?;
        if c != proj.channels {
            return Err(Error::dim(
                "attention",
                format!("{name} tokens have {c} channels, weights expect {}", proj.channels),
            ));
        }
    }
    let b = |i: usize| proj.bias.map(|ids| p[ids[i]]);
    let q = g.linear(query, p[proj.w_q], b(0))?;
    let k = g.linear(key, p[proj.w_k], b(1))?;
    let v = g.linear(value, p[proj.w_v], b(2))?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (proj.channels as f64).sqrt());
    let attn = g.softmax_rows(logits)?;
    let tokens = g.matmul(attn, v)?;
    Ok(Attended { tokens, attn })
}

//! Discriminative augmentation of search features.
//!
//! The decoder runs self-attention over the search tokens, then cross-attention
//! whose queries are the self-attended search tokens and whose keys/values are
//! the fused template tokens. The result (the mask) has the geometry of `f_s`;
//! it is filtered by `Φ_DA` and added back: `f*_s = Φ_DA(mask) + f_s`.

use rand::Rng;

use crate::attention::{attend, Projections};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct DaModule {
    pub self_attn: Projections,
    pub cross_attn: Projections,
    /// One or two 3×3 convs; ReLU between consecutive ones.
    pub filters: Vec<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub mask: Var,
    pub self_attn: Var,
    pub cross_attn: Var,
}

impl DaModule {
    /// `depth` is the number of filter convs (1 or 2). With `zero_filter` the
    /// last conv starts at zero, making the module the identity on `f_s`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        channels: usize,
        fc_bias: bool,
        depth: usize,
        zero_filter: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=2).contains(&depth) {
            return Err(Error::Config(format!("DA filter depth must be 1 or 2, got {depth}")));
        }
        let group = ParamGroup::Augmentation;
        let self_attn = Projections::new(store, "da.self_attn", group, channels, fc_bias, rng);
        let cross_attn = Projections::new(store, "da.cross_attn", group, channels, fc_bias, rng);
        let std = (1.0 / (9 * channels) as f64).sqrt();
        let filters = (0..depth)
            .map(|i| {
                let last = i + 1 == depth;
                let t = if last && zero_filter {
                    Tensor::zeros(&[channels, channels, 3, 3])
                } else {
                    Tensor::randn(&[channels, channels, 3, 3], std * if last { 1.0 } else { 2f64.sqrt() }, rng)
                };
                store.add(format!("da.filter{}", i + 1), group, t)
            })
            .collect();
        Ok(DaModule {
            self_attn,
            cross_attn,
            filters,
        })
    }

    pub fn decode(&self, g: &mut Graph, p: &Bound, template: Var, search: Var) -> Result<Decoded> {
        let (cz, _, _) = g.value(template).dims3("da_decode")?;
        let (cs, hs, ws) = g.value(search).dims3("da_decode")?;
        if cz != cs {
            return Err(Error::shape("da_decode", g.value(template).shape(), g.value(search).shape()));
        }
        let ts = g.to_tokens(search)?;
        let tz = g.to_tokens(template)?;
        let sa = attend(g, p, &self.self_attn, ts, ts, ts)?;
        let ca = attend(g, p, &self.cross_attn, sa.tokens, tz, tz)?;
        let mask = g.from_tokens(ca.tokens, hs, ws)?;
        Ok(Decoded {
            mask,
            self_attn: sa.attn,
            cross_attn: ca.attn,
        })
    }

    pub fn augment(&self, g: &mut Graph, p: &Bound, template: Var, search: Var) -> Result<Var> {
        let dec = self.decode(g, p, template, search)?;
        let mut x = dec.mask;
        for (i, &f) in self.filters.iter().enumerate() {
            if i > 0 {
                x = g.relu(x);
            }
            x = g.conv2d(x, p[f], None, 1, 1)?;
        }
        g.add(x, search)
    }

    pub fn augment_tensors(&self, store: &ParamStore, template: &Tensor, search: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let z = g.constant(template.clone());
        let s = g.constant(search.clone());
        let out = self.augment(&mut g, &p, z, s)?;
        Ok(g.value(out).clone())
    }
}

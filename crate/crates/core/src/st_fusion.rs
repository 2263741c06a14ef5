//! Spatio-temporal template fusion.
//!
//! `f*_z = Φ_MF(Encoder(f_a, f_c)) + f_i`, where the encoder is cross-attention
//! with queries and values from the current template `f_c` and keys from the
//! accumulated template `f_a`, and `Φ_MF` is a 3×3 same-padding convolution.

use rand::Rng;

use crate::attention::{attend, Attended, Projections};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Graph handles of the three template feature maps.
#[derive(Clone, Copy, Debug)]
pub struct TemplateTriple {
    pub initial: Var,
    pub accumulated: Var,
    pub current: Var,
}

#[derive(Clone, Debug)]
pub struct StFusion {
    pub attn: Projections,
    pub filter: ParamId,
}

/// Encoder output as a `C×h×w` map, plus the attention matrix.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub map: Var,
    pub attn: Var,
}

impl StFusion {
    /// With `zero_filter`, `Φ_MF` starts at zero so the module is the identity on `f_i`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, fc_bias: bool, zero_filter: bool, rng: &mut R) -> Self {
        let attn = Projections::new(store, "st.attn", ParamGroup::SpatioTemporal, channels, fc_bias, rng);
        let filter = if zero_filter {
            Tensor::zeros(&[channels, channels, 3, 3])
        } else {
            Tensor::randn(&[channels, channels, 3, 3], (1.0 / (9 * channels) as f64).sqrt(), rng)
        };
        let filter = store.add("st.filter", ParamGroup::SpatioTemporal, filter);
        StFusion { attn, filter }
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, accumulated: Var, current: Var) -> Result<Encoded> {
        let sa = g.value(accumulated).shape().to_vec();
        let sc = g.value(current).shape().to_vec();
        if sa != sc {
            return Err(Error::shape("st_encode", &sa, &sc));
        }
        let (_, h, w) = g.value(current).dims3("st_encode")?;
        let ta = g.to_tokens(accumulated)?;
        let tc = g.to_tokens(current)?;
        let Attended { tokens, attn } = attend(g, p, &self.attn, tc, ta, tc)?;
        let map = g.from_tokens(tokens, h, w)?;
        Ok(Encoded { map, attn })
    }

    pub fn fuse(&self, g: &mut Graph, p: &Bound, t: TemplateTriple) -> Result<Var> {
        let si = g.value(t.initial).shape().to_vec();
        let sc = g.value(t.current).shape().to_vec();
        if si != sc {
            return Err(Error::shape("st_fuse", &si, &sc));
        }
        let enc = self.encode(g, p, t.accumulated, t.current)?;
        let filtered = g.conv2d(enc.map, p[self.filter], None, 1, 1)?;
        g.add(filtered, t.initial)
    }

    /// Gradient-free fusion of concrete feature maps.
    pub fn fuse_tensors(&self, store: &ParamStore, initial: &Tensor, accumulated: &Tensor, current: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let t = TemplateTriple {
            initial: g.constant(initial.clone()),
            accumulated: g.constant(accumulated.clone()),
            current: g.constant(current.clone()),
        };
        let out = self.fuse(&mut g, &p, t)?;
        Ok(g.value(out).clone())
    }
}

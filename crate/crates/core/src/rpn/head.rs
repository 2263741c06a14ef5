use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Shared 3×3 conv + ReLU, then 1×1 convs for the three branches.
#[derive(Clone, Debug)]
pub struct RpnHead {
    pub channels: usize,
    pub num_anchors: usize,
    shared_w: ParamId,
    shared_b: ParamId,
    cls1_w: ParamId,
    cls1_b: ParamId,
    cls2_w: ParamId,
    cls2_b: ParamId,
    reg_w: ParamId,
    reg_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `2A×h×w`: channel `a` is the negative logit, `A + a` the positive one.
    pub cls1: Var,
    /// `A×h×w` logits of the BCE branch.
    pub cls2: Var,
    /// `4A×h×w`, channel `4a + k` for offset `k` of anchor `a`.
    pub reg: Var,
}

impl RpnHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, num_anchors: usize, rng: &mut R) -> Self {
        let c = channels;
        let a = num_anchors;
        let mut conv = |name: &str, co: usize, ci: usize, k: usize, std: f64| {
            let w = store.add(
                format!("head.{name}.weight"),
                ParamGroup::Head,
                Tensor::randn(&[co, ci, k, k], std, rng),
            );
            let b = store.add(format!("head.{name}.bias"), ParamGroup::Head, Tensor::zeros(&[co]));
            (w, b)
        };
        let (shared_w, shared_b) = conv("shared", c, c, 3, (2.0 / (9 * c) as f64).sqrt());
        let (cls1_w, cls1_b) = conv("cls1", 2 * a, c, 1, 0.01);
        let (cls2_w, cls2_b) = conv("cls2", a, c, 1, 0.01);
        let (reg_w, reg_b) = conv("reg", 4 * a, c, 1, 0.01);
        RpnHead {
            channels,
            num_anchors,
            shared_w,
            shared_b,
            cls1_w,
            cls1_b,
            cls2_w,
            cls2_b,
            reg_w,
            reg_b,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, response: Var) -> Result<HeadOutput> {
        let (c, _, _) = g.value(response).dims3("head_forward")?;
        if c != self.channels {
            return Err(Error::dim(
                "head_forward",
                format!("response has {c} channels, head expects {}", self.channels),
            ));
        }
        let h = g.conv2d(response, p[self.shared_w], Some(p[self.shared_b]), 1, 1)?;
        let h = g.relu(h);
        Ok(HeadOutput {
            cls1: g.conv2d(h, p[self.cls1_w], Some(p[self.cls1_b]), 1, 0)?,
            cls2: g.conv2d(h, p[self.cls2_w], Some(p[self.cls2_b]), 1, 0)?,
            reg: g.conv2d(h, p[self.reg_w], Some(p[self.reg_b]), 1, 0)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_zero_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = RpnHead::new(&mut store, 4, 3, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| true);
        let r = g.constant(Tensor::zeros(&[4, 5, 6]));
        let out = head.forward(&mut g, &p, r).unwrap();
        assert_eq!(g.value(out.cls1).shape(), &[6, 5, 6]);
        assert_eq!(g.value(out.cls2).shape(), &[3, 5, 6]);
        assert_eq!(g.value(out.reg).shape(), &[12, 5, 6]);
        for v in [out.cls1, out.cls2, out.reg] {
            assert!(g.value(v).data().iter().all(|x| *x == 0.0));
        }
        let bad = g.constant(Tensor::zeros(&[5, 5, 6]));
        assert!(head.forward(&mut g, &p, bad).is_err());
    }
}

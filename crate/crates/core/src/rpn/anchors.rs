use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

/// Offsets beyond this magnitude are clamped before `exp` when decoding sizes.
pub const MAX_LOG_SCALE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// Height/width ratios.
    pub ratios: Vec<f64>,
    /// Anchor side (for ratio 1) in units of the stride.
    pub scale: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            ratios: vec![0.33, 0.5, 1.0, 2.0, 3.0],
            scale: 8.0,
        }
    }
}

impl AnchorConfig {
    pub fn count(&self) -> usize {
        self.ratios.len()
    }
}

/// Anchor boxes on the response lattice, stored as `A×h×w×4` `(cx, cy, w, h)`
/// in search-crop pixels. Location `(i, j)` is centred at
/// `(ori + j·stride, ori + i·stride)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub feat_h: usize,
    pub feat_w: usize,
    pub stride: f64,
    pub ori: f64,
    pub ratios: Vec<f64>,
    pub scale: f64,
    pub boxes: Tensor,
}

impl AnchorGrid {
    pub fn num_anchors(&self) -> usize {
        self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.ratios.len() * self.feat_h * self.feat_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of anchor `a` at `(i, j)`.
    pub fn index(&self, a: usize, i: usize, j: usize) -> usize {
        (a * self.feat_h + i) * self.feat_w + j
    }

    /// `(a, i, j)` of a flat index.
    pub fn unravel(&self, k: usize) -> (usize, usize, usize) {
        let plane = self.feat_h * self.feat_w;
        (k / plane, (k % plane) / self.feat_w, k % self.feat_w)
    }

    /// `(cx, cy, w, h)` of flat anchor `k`.
    pub fn anchor(&self, k: usize) -> [f64; 4] {
        let d = &self.boxes.data()[4 * k..4 * k + 4];
        [d[0], d[1], d[2], d[3]]
    }

    pub fn anchor_rect(&self, k: usize) -> Rect {
        let [cx, cy, w, h] = self.anchor(k);
        Rect::from_center(cx, cy, w, h)
    }
}

pub fn generate_anchors(feat_h: usize, feat_w: usize, stride: f64, ori: f64, cfg: &AnchorConfig) -> Result<AnchorGrid> {
    if feat_h == 0 || feat_w == 0 {
        return Err(Error::Config("anchor grid must be at least 1x1".into()));
    }
    if cfg.ratios.is_empty() || cfg.ratios.iter().any(|r| !(*r > 0.0)) || !(cfg.scale > 0.0) {
        return Err(Error::Config("anchor ratios and scale must be positive".into()));
    }
    let size = stride * cfg.scale;
    let mut data = Vec::with_capacity(cfg.ratios.len() * feat_h * feat_w * 4);
    for &r in &cfg.ratios {
        let w = size / r.sqrt();
        let h = size * r.sqrt();
        for i in 0..feat_h {
            for j in 0..feat_w {
                data.extend_from_slice(&[ori + j as f64 * stride, ori + i as f64 * stride, w, h]);
            }
        }
    }
    Ok(AnchorGrid {
        feat_h,
        feat_w,
        stride,
        ori,
        ratios: cfg.ratios.clone(),
        scale: cfg.scale,
        boxes: Tensor::new(vec![cfg.ratios.len(), feat_h, feat_w, 4], data)?,
    })
}

/// Normalised offsets `(dx, dy, dw, dh)` taking `anchor` to `gt`.
pub fn encode_box(gt: &Rect, anchor: [f64; 4]) -> [f64; 4] {
    let [ax, ay, aw, ah] = anchor;
    [
        (gt.cx() - ax) / aw,
        (gt.cy() - ay) / ah,
        (gt.w / aw).ln(),
        (gt.h / ah).ln(),
    ]
}

pub fn decode_one(anchor: [f64; 4], d: [f64; 4]) -> Rect {
    let [ax, ay, aw, ah] = anchor;
    let dw = d[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let dh = d[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    Rect::from_center(ax + d[0] * aw, ay + d[1] * ah, aw * dw.exp(), ah * dh.exp())
}

/// Decodes a `4A×h×w` regression map (channel `4a + k` is offset `k` of
/// anchor `a`) into one box per anchor, in flat anchor order.
pub fn decode_boxes(reg: &Tensor, grid: &AnchorGrid) -> Result<Vec<Rect>> {
    let expect = [4 * grid.num_anchors(), grid.feat_h, grid.feat_w];
    if reg.shape() != expect {
        return Err(Error::shape("decode_boxes", reg.shape(), &expect));
    }
    let plane = grid.feat_h * grid.feat_w;
    let d = reg.data();
    Ok((0..grid.len())
        .map(|k| {
            let (a, i, j) = grid.unravel(k);
            let off = |c: usize| d[(4 * a + c) * plane + i * grid.feat_w + j];
            decode_one(grid.anchor(k), [off(0), off(1), off(2), off(3)])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_anchor() {
        let cfg = AnchorConfig {
            ratios: vec![1.0],
            scale: 8.0,
        };
        let g = generate_anchors(1, 1, 8.0, 31.5, &cfg).unwrap();
        assert_eq!(g.anchor(0), [31.5, 31.5, 64.0, 64.0]);
    }

    #[test]
    fn count_and_area() {
        let cfg = AnchorConfig::default();
        let g = generate_anchors(17, 17, 8.0, 0.0, &cfg).unwrap();
        assert_eq!(g.len(), 5 * 17 * 17);
        assert_eq!(g.boxes.shape(), &[5, 17, 17, 4]);
        for k in (0..g.len()).step_by(17 * 17) {
            let [_, _, w, h] = g.anchor(k);
            assert!((w * h - 64.0 * 64.0).abs() < 1e-9);
        }
        // lattice
        let k = g.index(2, 3, 5);
        assert_eq!(&g.anchor(k)[..2], &[40.0, 24.0]);
    }

    #[test]
    fn decode_examples() {
        let a = [10.0, 10.0, 8.0, 8.0];
        assert_eq!(decode_one(a, [0.0; 4]), Rect::from_center(10.0, 10.0, 8.0, 8.0));
        let r = decode_one(a, [0.5, 0.0, 2f64.ln(), 0.0]);
        assert!((r.cx() - 14.0).abs() < 1e-12 && (r.cy() - 10.0).abs() < 1e-12);
        assert!((r.w - 16.0).abs() < 1e-12 && (r.h - 8.0).abs() < 1e-12);
        // clamp keeps exp finite
        let r = decode_one(a, [0.0, 0.0, 1e6, -1e6]);
        assert!(r.is_valid());
    }

    #[test]
    fn decode_map_layout() {
        let cfg = AnchorConfig {
            ratios: vec![1.0, 2.0],
            scale: 2.0,
        };
        let g = generate_anchors(2, 3, 8.0, 4.0, &cfg).unwrap();
        let mut reg = Tensor::zeros(&[8, 2, 3]);
        // anchor a=1 at (1,2): dx = 0.5
        reg.set(&[4, 1, 2], 0.5);
        let boxes = decode_boxes(&reg, &g).unwrap();
        let k = g.index(1, 1, 2);
        let [cx, _, w, _] = g.anchor(k);
        assert!((boxes[k].cx() - (cx + 0.5 * w)).abs() < 1e-12);
        assert_eq!(boxes[0], g.anchor_rect(0));
    }

    proptest! {
        #[test]
        fn encode_decode_inverse(
            cx in 0.0f64..200.0, cy in 0.0f64..200.0,
            w in 1.0f64..100.0, h in 1.0f64..100.0,
            ax in 0.0f64..200.0, ay in 0.0f64..200.0,
            aw in 4.0f64..80.0, ah in 4.0f64..80.0,
        ) {
            let gt = Rect::from_center(cx, cy, w, h);
            let anchor = [ax, ay, aw, ah];
            let d = encode_box(&gt, anchor);
            prop_assume!(d[2].abs() <= MAX_LOG_SCALE && d[3].abs() <= MAX_LOG_SCALE);
            let back = decode_one(anchor, d);
            prop_assert!((back.cx() - gt.cx()).abs() < 1e-9);
            prop_assert!((back.cy() - gt.cy()).abs() < 1e-9);
            prop_assert!((back.w - gt.w).abs() < 1e-9);
            prop_assert!((back.h - gt.h).abs() < 1e-9);
        }
    }
}

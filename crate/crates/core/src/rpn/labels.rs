//! Anchor label assignment: IoU thresholds or centre distance on the lattice.

use serde::{Deserialize, Serialize};

use super::anchors::{encode_box, AnchorGrid};
use crate::error::{Error, Result};
use crate::geometry::{compute_iou, Rect};
use crate::tensor::ClassLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignScheme {
    Iou,
    CenterDistance,
}

impl std::str::FromStr for AssignScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou" => Ok(AssignScheme::Iou),
            "center_distance" | "center-distance" => Ok(AssignScheme::CenterDistance),
            _ => Err(Error::Config(format!(
                "unknown assignment scheme {s:?} (expected iou or center_distance)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignConfig {
    /// Scheme for the cross-entropy branch; the BCE branch always uses centre distance.
    pub scheme: AssignScheme,
    pub iou_pos: f64,
    pub iou_neg: f64,
    /// Squared feature-cell distance below which an anchor is positive.
    pub center_threshold: f64,
    /// Normalise corner sums by the map height/width instead of halving them.
    pub extent_normalized_center: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            scheme: AssignScheme::CenterDistance,
            iou_pos: 0.6,
            iou_neg: 0.3,
            center_threshold: 4.0,
            extent_normalized_center: false,
        }
    }
}

/// IoU > `thr_pos` → positive, IoU < `thr_neg` → negative, otherwise ignored.
pub fn assign_labels_iou(grid: &AnchorGrid, gt: &Rect, thr_pos: f64, thr_neg: f64) -> Vec<ClassLabel> {
    (0..grid.len())
        .map(|k| {
            let iou = compute_iou(&grid.anchor_rect(k), gt);
            if iou > thr_pos {
                ClassLabel::Positive
            } else if iou < thr_neg {
                ClassLabel::Negative
            } else {
                ClassLabel::Ignore
            }
        })
        .collect()
}

/// Ground-truth centre in lattice coordinates `(row, col)`.
///
/// Corners are mapped by `φ(c) = (c − ori) / stride`; the centre is their
/// midpoint, or with `literal` the corner sum divided by the map extent.
pub fn lattice_center(grid: &AnchorGrid, gt: &Rect, literal: bool) -> (f64, f64) {
    let phi = |c: f64| (c - grid.ori) / grid.stride;
    let (ys, xs) = (phi(gt.y) + phi(gt.y2()), phi(gt.x) + phi(gt.x2()));
    if literal {
        (ys / grid.feat_h as f64, xs / grid.feat_w as f64)
    } else {
        (ys / 2.0, xs / 2.0)
    }
}

/// Squared lattice distance < `thr` → positive, otherwise negative. Every
/// anchor at a location shares that location's label.
pub fn assign_labels_center_distance(grid: &AnchorGrid, gt: &Rect, thr: f64, literal: bool) -> Vec<ClassLabel> {
    let (cy, cx) = lattice_center(grid, gt, literal);
    (0..grid.len())
        .map(|k| {
            let (_, i, j) = grid.unravel(k);
            let d2 = (cy - i as f64).powi(2) + (cx - j as f64).powi(2);
            if d2 < thr {
                ClassLabel::Positive
            } else {
                ClassLabel::Negative
            }
        })
        .collect()
}

/// Training targets for every anchor of one search crop.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTargets {
    pub cls1: Vec<ClassLabel>,
    /// Binary targets for the BCE branch, one per anchor.
    pub cls2: Vec<f64>,
    /// Offsets in `4A×h×w` layout; meaningful only where `reg_mask` is set.
    pub reg: Vec<f64>,
    pub reg_mask: Vec<bool>,
    pub num_pos: usize,
}

impl LabelTargets {
    pub fn build(grid: &AnchorGrid, gt: &Rect, cfg: &AssignConfig) -> Result<Self> {
        if !gt.is_valid() {
            return Err(Error::Data(format!("degenerate ground-truth box {gt:?}")));
        }
        if cfg.iou_neg > cfg.iou_pos {
            return Err(Error::Config("iou_neg must not exceed iou_pos".into()));
        }
        if !(cfg.center_threshold >= 0.0) {
            return Err(Error::Config("center_threshold must be non-negative".into()));
        }
        let center = assign_labels_center_distance(grid, gt, cfg.center_threshold, cfg.extent_normalized_center);
        let cls1 = match cfg.scheme {
            AssignScheme::Iou => assign_labels_iou(grid, gt, cfg.iou_pos, cfg.iou_neg),
            AssignScheme::CenterDistance => center.clone(),
        };
        let cls2 = center
            .iter()
            .map(|l| if *l == ClassLabel::Positive { 1.0 } else { 0.0 })
            .collect();
        let plane = grid.feat_h * grid.feat_w;
        let mut reg = vec![0.0; 4 * grid.len()];
        let mut reg_mask = vec![false; 4 * grid.len()];
        let mut num_pos = 0;
        for (k, lab) in cls1.iter().enumerate() {
            if *lab != ClassLabel::Positive {
                continue;
            }
            num_pos += 1;
            let (a, i, j) = grid.unravel(k);
            let d = encode_box(gt, grid.anchor(k));
            for (c, v) in d.iter().enumerate() {
                let o = (4 * a + c) * plane + i * grid.feat_w + j;
                reg[o] = *v;
                reg_mask[o] = true;
            }
        }
        Ok(LabelTargets {
            cls1,
            cls2,
            reg,
            reg_mask,
            num_pos,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpn::{generate_anchors, AnchorConfig};

    fn grid(n: usize) -> AnchorGrid {
        generate_anchors(n, n, 8.0, 4.0, &AnchorConfig { ratios: vec![0.5, 1.0, 2.0], scale: 2.0 }).unwrap()
    }

    #[test]
    fn center_on_lattice_point_is_positive() {
        let g = grid(7);
        // centre at lattice (2, 3): (ori + 3*8, ori + 2*8) = (28, 20)
        let gt = Rect::from_center(28.0, 20.0, 10.0, 6.0);
        let labels = assign_labels_center_distance(&g, &gt, 0.5, false);
        for a in 0..3 {
            assert_eq!(labels[g.index(a, 2, 3)], ClassLabel::Positive);
        }
        assert_eq!(labels.iter().filter(|l| **l == ClassLabel::Positive).count(), 3);
        let none = assign_labels_center_distance(&g, &gt, 0.0, false);
        assert!(none.iter().all(|l| *l == ClassLabel::Negative));
    }

    #[test]
    fn exact_anchor_is_positive_under_iou() {
        let g = grid(5);
        let k = g.index(1, 2, 2);
        let labels = assign_labels_iou(&g, &g.anchor_rect(k), 0.99, 0.3);
        assert_eq!(labels[k], ClassLabel::Positive);
        let far = Rect::new(500.0, 500.0, 4.0, 4.0);
        assert!(assign_labels_iou(&g, &far, 0.6, 0.3).iter().all(|l| *l == ClassLabel::Negative));
    }

    #[test]
    fn regression_targets_only_on_positives() {
        let g = grid(5);
        let gt = Rect::from_center(20.0, 20.0, 16.0, 16.0);
        let t = LabelTargets::build(&g, &gt, &AssignConfig::default()).unwrap();
        let pos = t.cls1.iter().filter(|l| **l == ClassLabel::Positive).count();
        assert_eq!(pos, t.num_pos);
        assert_eq!(t.reg_mask.iter().filter(|m| **m).count(), 4 * pos);
        assert!(t.reg.iter().zip(&t.reg_mask).all(|(v, m)| *m || *v == 0.0));
    }
}

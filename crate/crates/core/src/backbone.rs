//! Small convolutional feature extractor (total stride 8) and depthwise
//! cross-correlation.
//!
//! Layout: conv3×3/s2 → ReLU → conv3×3/s2 → ReLU → maxpool2 → conv3×3/p1 → ReLU
//! → conv3×3/p1. All convs are unpadded except the last two, so an input of
//! side `8k + 7` yields a `k×k` feature map whose cells sit on an 8-pixel
//! lattice.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub const TOTAL_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Hidden channels of the first three conv stages.
    pub channels: [usize; 3],
    /// Output feature channels `C`.
    pub out_channels: usize,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [32, 64, 96],
            out_channels: 64,
            template_size: 127,
            search_size: 287,
        }
    }
}

impl BackboneConfig {
    /// Geometry used for CPU-scale experiments.
    pub fn desk() -> Self {
        BackboneConfig {
            channels: [8, 16, 32],
            out_channels: 32,
            template_size: 47,
            search_size: 111,
        }
    }

    pub fn total_stride(&self) -> usize {
        TOTAL_STRIDE
    }

    /// Spatial side of the feature map for a square input of `size` pixels.
    pub fn feature_extent(size: usize) -> Option<usize> {
        let s1 = size.checked_sub(3)? / 2 + 1;
        let s2 = s1.checked_sub(3)? / 2 + 1;
        let s3 = s2 / 2;
        (s3 >= 1).then_some(s3)
    }

    pub fn template_extent(&self) -> usize {
        Self::feature_extent(self.template_size).unwrap_or(0)
    }

    pub fn search_extent(&self) -> usize {
        Self::feature_extent(self.search_size).unwrap_or(0)
    }

    /// Side of the correlation response map.
    pub fn response_extent(&self) -> usize {
        self.search_extent() + 1 - self.template_extent()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.out_channels == 0 {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        let (tz, tx) = match (
            Self::feature_extent(self.template_size),
            Self::feature_extent(self.search_size),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Config("template/search size too small for the backbone".into())),
        };
        if tz % 2 == 0 || tx % 2 == 0 {
            return Err(Error::Config(format!(
                "template {} and search {} must give odd feature extents (got {tz} and {tx}); use sizes 8k+7 with k odd",
                self.template_size, self.search_size
            )));
        }
        if tz >= tx {
            return Err(Error::Config(format!(
                "template feature extent {tz} must be smaller than search extent {tx}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    relu: bool,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    layers: Vec<ConvLayer>,
    pool_after: usize,
    in_channels: usize,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let [c1, c2, c3] = cfg.channels;
        let specs = [
            (3, c1, 2, 0, true),
            (c1, c2, 2, 0, true),
            (c2, c3, 1, 1, true),
            (c3, cfg.out_channels, 1, 1, false),
        ];
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, stride, pad, relu))| {
                let fan_in = (ci * 9) as f64;
                let gain = if relu { 2.0 } else { 1.0 };
                let w = Tensor::randn(&[co, ci, 3, 3], (gain / fan_in).sqrt(), rng);
                ConvLayer {
                    w: store.add(format!("backbone.conv{}.weight", i + 1), ParamGroup::Backbone, w),
                    b: store.add(
                        format!("backbone.conv{}.bias", i + 1),
                        ParamGroup::Backbone,
                        Tensor::zeros(&[co]),
                    ),
                    stride,
                    pad,
                    relu,
                }
            })
            .collect();
        Backbone {
            layers,
            pool_after: 2,
            in_channels: 3,
        }
    }

    /// Feature map of a `3×H×W` image already placed on the graph.
    pub fn extract_features(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let (c, _, _) = g.value(image).dims3("extract_features")?;
        if c != self.in_channels {
            return Err(Error::dim(
                "extract_features",
                format!("expected {} input channels, got {c}", self.in_channels),
            ));
        }
        if !g.value(image).is_finite() {
            return Err(Error::NonFinite("input image".into()));
        }
        let mut x = image;
        for (i, l) in self.layers.iter().enumerate() {
            if i == self.pool_after {
                x = g.maxpool(x, 2)?;
            }
            x = g.conv2d(x, p[l.w], Some(p[l.b]), l.stride, l.pad)?;
            if l.relu {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Gradient-free convenience wrapper.
    pub fn extract(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let x = g.constant(image.clone());
        let f = self.extract_features(&mut g, &p, x)?;
        Ok(g.value(f).clone())
    }
}

/// Depthwise correlation: channel `c` of the output is `search[c]` correlated
/// with `template[c]` at stride 1 without padding.
pub fn cross_correlate(template: &Tensor, search: &Tensor) -> Result<Tensor> {
    Tensor::depthwise_xcorr(template, search)
}

//! Full network: backbone, optional ST fusion and DA augmentation,
//! correlation and RPN head, plus checkpoint IO.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::da_module::DaModule;
use crate::error::{Error, Result};
use crate::rpn::{generate_anchors, AnchorConfig, AnchorGrid, HeadOutput, RpnHead};
use crate::st_fusion::{StFusion, TemplateTriple};
use crate::tensor::{Bound, Checkpoint, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub use_st: bool,
    pub use_da: bool,
    /// Bias terms on the attention Q/K/V projections.
    pub fc_bias: bool,
    /// Start the last ST/DA filter at zero so both modules are identities.
    pub zero_init_filters: bool,
    pub da_filter_depth: usize,
    pub anchors: AnchorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk(),
            use_st: true,
            use_da: true,
            fc_bias: false,
            zero_init_filters: true,
            da_filter_depth: 1,
            anchors: AnchorConfig {
                ratios: vec![0.33, 0.5, 1.0, 2.0, 3.0],
                scale: 3.0,
            },
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            anchors: AnchorConfig::default(),
            ..ModelConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.anchors.ratios.is_empty() || self.anchors.ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Config("anchor ratios must be positive".into()));
        }
        if !(self.anchors.scale > 0.0) {
            return Err(Error::Config("anchor scale must be positive".into()));
        }
        if !(1..=2).contains(&self.da_filter_depth) {
            return Err(Error::Config(format!(
                "da_filter_depth must be 1 or 2, got {}",
                self.da_filter_depth
            )));
        }
        Ok(())
    }

    /// Pixel position of response cell 0 in the search crop.
    pub fn anchor_origin(&self) -> f64 {
        let r = self.backbone.response_extent() as f64;
        (self.backbone.search_size as f64 - (r - 1.0) * self.backbone.total_stride() as f64) / 2.0
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        let r = self.backbone.response_extent();
        generate_anchors(r, r, self.backbone.total_stride() as f64, self.anchor_origin(), &self.anchors)
    }
}

/// Which fusion modules run in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modules {
    pub st: bool,
    pub da: bool,
}

impl Modules {
    pub const NONE: Modules = Modules { st: false, da: false };
    pub const ALL: Modules = Modules { st: true, da: true };
}

impl std::str::FromStr for Modules {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Modules::NONE),
            "all" | "st,da" | "da,st" => Ok(Modules::ALL),
            "st" => Ok(Modules { st: true, da: false }),
            "da" => Ok(Modules { st: false, da: true }),
            _ => Err(Error::Config(format!(
                "unknown module set {s:?} (expected none, st, da or all)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub st: StFusion,
    pub da: DaModule,
    pub head: RpnHead,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Fused template `f*_z`, also the correlation kernel.
    pub template: Var,
    /// Augmented search features `f*_s`.
    pub search: Var,
    pub response: Var,
    pub head: HeadOutput,
}

/// Subtracts the mid-grey level; the backbone sees zero-centred input.
pub fn normalize(img: &Tensor) -> Tensor {
    img.map(|v| v - 0.5)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.backbone.out_channels;
        let backbone = Backbone::new(&config.backbone, &mut params, &mut rng);
        let st = StFusion::new(&mut params, c, config.fc_bias, config.zero_init_filters, &mut rng);
        let da = DaModule::new(
            &mut params,
            c,
            config.fc_bias,
            config.da_filter_depth,
            config.zero_init_filters,
            &mut rng,
        )?;
        let head = RpnHead::new(&mut params, c, config.anchors.count(), &mut rng);
        Ok(Model {
            config,
            params,
            backbone,
            st,
            da,
            head,
        })
    }

    pub fn modules(&self) -> Modules {
        Modules {
            st: self.config.use_st,
            da: self.config.use_da,
        }
    }

    /// Backbone features of a `[0, 1]` image crop.
    pub fn embed(&self, g: &mut Graph, p: &Bound, crop: &Tensor) -> Result<Var> {
        let x = g.constant(normalize(crop));
        self.backbone.extract_features(g, p, x)
    }

    pub fn embed_tensor(&self, crop: &Tensor) -> Result<Tensor> {
        self.backbone.extract(&self.params, &normalize(crop))
    }

    pub fn fuse_template(&self, g: &mut Graph, p: &Bound, t: TemplateTriple, m: Modules) -> Result<Var> {
        if m.st {
            self.st.fuse(g, p, t)
        } else {
            Ok(t.initial)
        }
    }

    /// Template fusion, search augmentation, correlation and head.
    pub fn forward(&self, g: &mut Graph, p: &Bound, t: TemplateTriple, search: Var, m: Modules) -> Result<Forward> {
        let template = self.fuse_template(g, p, t, m)?;
        let search = if m.da {
            self.da.augment(g, p, template, search)?
        } else {
            search
        };
        let response = g.xcorr(template, search)?;
        let head = self.head.forward(g, p, response)?;
        Ok(Forward {
            template,
            search,
            response,
            head,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.params);
        ck.meta = serde_json::json!({ "model": self.config });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck
            .meta
            .get("model")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no model config".into()))?;
        let config: ModelConfig =
            serde_json::from_value(cfg.clone()).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut model = Model::new(config, 0)?;
        ck.apply_to(&mut model.params)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }
}

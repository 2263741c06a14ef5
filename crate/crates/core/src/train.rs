//! Offline training: triplet sampling, loss assembly, SGD with a backbone
//! freeze window, per-epoch checkpoints and resumable state.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_training_triplet, SequenceRecord, TrainingTriplet, TripletConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rpn::{classification_losses, regression_loss, total_loss, AnchorGrid, AssignConfig, LabelTargets, LossWeights};
use crate::st_fusion::TemplateTriple;
use crate::tensor::{Checkpoint, Graph, ParamGroup, Sgd, SgdConfig, StoredTensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Leading epochs during which backbone parameters are not updated.
    pub freeze_backbone_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub loss: LossWeights,
    pub assign: AssignConfig,
    pub triplet: TripletConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            freeze_backbone_epochs: 1,
            steps_per_epoch: 200,
            batch_size: 4,
            lr_start: 0.005,
            lr_end: 0.0005,
            momentum: 0.9,
            loss: LossWeights::default(),
            assign: AssignConfig::default(),
            triplet: TripletConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 50 epochs, 10 frozen, batch 12.
    pub fn full() -> Self {
        TrainConfig {
            epochs: 50,
            freeze_backbone_epochs: 10,
            batch_size: 12,
            ..TrainConfig::default()
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            momentum: self.momentum,
            total_epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, steps_per_epoch and batch_size must be positive".into()));
        }
        if self.freeze_backbone_epochs > self.epochs {
            return Err(Error::Config(format!(
                "freeze_backbone_epochs ({}) exceeds epochs ({})",
                self.freeze_backbone_epochs, self.epochs
            )));
        }
        self.sgd().validate()?;
        self.loss.validate()?;
        self.triplet.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_cls1: f64,
    pub l_cls2: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,epoch,L_cls1,L_cls2,L_reg,L_total,lr\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step, r.epoch, r.l_cls1, r.l_cls2, r.l_reg, r.l_total, r.lr
        );
    }
    s
}

/// Loss components of one triplet.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleLoss {
    pub l_cls1: f64,
    pub l_cls2: f64,
    pub l_reg: f64,
    pub l_total: f64,
    /// No positive anchors, so the regression term is zero.
    pub empty_reg: bool,
}

/// Forward pass and loss for one triplet; with `trainable`, also the
/// gradients of every parameter whose group it accepts.
pub fn sample_loss(
    model: &Model,
    grid: &AnchorGrid,
    t: &TrainingTriplet,
    assign: &AssignConfig,
    weights: &LossWeights,
    trainable: Option<&dyn Fn(ParamGroup) -> bool>,
) -> Result<(SampleLoss, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let p = match trainable {
        Some(f) => model.params.bind(&mut g, f),
        None => model.params.bind(&mut g, |_| false),
    };
    let triple = TemplateTriple {
        initial: model.embed(&mut g, &p, &t.initial.image)?,
        accumulated: model.embed(&mut g, &p, &t.accumulated.image)?,
        current: model.embed(&mut g, &p, &t.current.image)?,
    };
    let search = model.embed(&mut g, &p, &t.search.image)?;
    let out = model.forward(&mut g, &p, triple, search, model.modules())?;
    let targets = LabelTargets::build(grid, &t.search.gt, assign)?;
    let (l1, l2) = classification_losses(&mut g, out.head.cls1, out.head.cls2, &targets)?;
    let (lr, empty_reg) = regression_loss(&mut g, out.head.reg, &targets)?;
    let total = total_loss(&mut g, l1, l2, lr, weights)?;
    let loss = SampleLoss {
        l_cls1: g.value(l1).item()?,
        l_cls2: g.value(l2).item()?,
        l_reg: g.value(lr).item()?,
        l_total: g.value(total).item()?,
        empty_reg,
    };
    let grads = if trainable.is_some() && loss.l_total.is_finite() {
        g.backward(total)?;
        p.gradients(&mut g)
    } else {
        Vec::new()
    };
    Ok((loss, grads))
}

/// Seed for sample `i` of step `step` in `epoch`; independent of thread count.
pub fn sample_seed(seed: u64, epoch: usize, step: usize, i: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch as u64, step as u64, i as u64] {
        h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(29) ^ 0x94d0_49bb_1331_11eb;
    }
    h
}

pub fn sample_triplet<R: Rng + ?Sized>(
    model: &Model,
    data: &[SequenceRecord],
    cfg: &TripletConfig,
    rng: &mut R,
) -> Result<TrainingTriplet> {
    let k = rng.random_range(0..data.len());
    let b = &model.config.backbone;
    sample_training_triplet(&data[k], k, cfg, b.template_size, b.search_size, rng)
}

/// Mean total loss over `n` triplets drawn from a fixed seed.
pub fn validation_loss(model: &Model, data: &[SequenceRecord], cfg: &TrainConfig, n: usize, seed: u64) -> Result<f64> {
    if data.is_empty() || n == 0 {
        return Err(Error::Data("validation needs data and at least one sample".into()));
    }
    let grid = model.config.anchor_grid()?;
    let losses = crate::par::map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, usize::MAX, 0, i));
        let t = sample_triplet(model, data, &cfg.triplet, &mut rng)?;
        sample_loss(model, &grid, &t, &cfg.assign, &cfg.loss, None).map(|(l, _)| l.l_total)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints and the loss CSV go here after every epoch.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Called after every optimizer step.
    pub on_step: Option<fn(&LossRecord)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<LossRecord>,
    pub epochs_completed: usize,
    pub skipped_batches: usize,
}

const MAX_CONSECUTIVE_NONFINITE: usize = 3;

#[derive(Serialize, Deserialize)]
struct ResumeMeta {
    config: TrainConfig,
    epochs_completed: usize,
    history: Vec<LossRecord>,
    skipped_batches: usize,
}

pub fn training_checkpoint(model: &Model, sgd: &Sgd, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<Checkpoint> {
    let mut ck = model.to_checkpoint();
    for (id, v) in model.params.ids().zip(sgd.velocity()) {
        ck.state.insert(format!("velocity.{}", model.params.name(id)), StoredTensor::from_tensor(v));
    }
    let meta = ResumeMeta {
        config: cfg.clone(),
        epochs_completed: outcome.epochs_completed,
        history: outcome.history.clone(),
        skipped_batches: outcome.skipped_batches,
    };
    ck.meta["train"] = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(ck)
}

fn restore(model: &mut Model, sgd: &mut Sgd, ck: &Checkpoint) -> Result<TrainOutcome> {
    let meta: ResumeMeta = serde_json::from_value(
        ck.meta
            .get("train")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("training state: {e}")))?;
    ck.apply_to(&mut model.params)?;
    let velocity = model
        .params
        .ids()
        .map(|id| {
            let key = format!("velocity.{}", model.params.name(id));
            ck.state
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?
                .to_tensor()
        })
        .collect::<Result<Vec<_>>>()?;
    sgd.set_velocity(velocity)?;
    Ok(TrainOutcome {
        history: meta.history,
        epochs_completed: meta.epochs_completed,
        skipped_batches: meta.skipped_batches,
    })
}

fn save_epoch(dir: &Path, ck: &Checkpoint, epoch: usize, history: &[LossRecord]) -> Result<()> {
    ck.save(&dir.join(format!("epoch_{:03}.json", epoch + 1)))?;
    ck.save(&dir.join("latest.json"))?;
    let p = dir.join("loss.csv");
    std::fs::write(&p, history_csv(history)).map_err(|e| Error::io(&p, e))
}

pub fn train(model: &mut Model, cfg: &TrainConfig, data: &[SequenceRecord], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for s in data {
        s.validate()?;
        if s.len() < cfg.triplet.window {
            return Err(Error::Data(format!(
                "sequence {} has {} frames, fewer than the {}-frame window",
                s.name,
                s.len(),
                cfg.triplet.window
            )));
        }
    }
    let grid = model.config.anchor_grid()?;
    let mut sgd = Sgd::new(cfg.sgd(), &model.params);
    let mut outcome = match &opts.resume {
        Some(ck) => restore(model, &mut sgd, ck)?,
        None => TrainOutcome {
            history: Vec::new(),
            epochs_completed: 0,
            skipped_batches: 0,
        },
    };
    let mut consecutive_bad = 0;
    for epoch in outcome.epochs_completed..cfg.epochs {
        let frozen = epoch < cfg.freeze_backbone_epochs;
        let trainable = move |g: ParamGroup| !(frozen && g == ParamGroup::Backbone);
        let lr = sgd.config.lr(epoch);
        for step in 0..cfg.steps_per_epoch {
            let m: &Model = model;
            let results = crate::par::map_range(cfg.batch_size, |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, step, i));
                let t = sample_triplet(m, data, &cfg.triplet, &mut rng)?;
                sample_loss(m, &grid, &t, &cfg.assign, &cfg.loss, Some(&trainable))
            });
            let mut sum: Vec<Option<Tensor>> = vec![None; model.params.len()];
            let mut acc = SampleLoss::default();
            let mut count = 0usize;
            let mut bad = false;
            for r in results {
                let (loss, grads) = match r {
                    Ok(v) => v,
                    Err(e) if e.is_numeric() => {
                        bad = true;
                        continue;
                    }
                    Err(Error::Contract(msg)) => {
                        log::warn!("epoch {epoch} step {step}: sample skipped: {msg}");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                if !loss.l_total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                    bad = true;
                    continue;
                }
                for (s, g) in sum.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        *s = Some(match s.take() {
                            Some(prev) => prev.add(&g)?,
                            None => g,
                        });
                    }
                }
                acc.l_cls1 += loss.l_cls1;
                acc.l_cls2 += loss.l_cls2;
                acc.l_reg += loss.l_reg;
                acc.l_total += loss.l_total;
                count += 1;
            }
            if bad || count == 0 {
                outcome.skipped_batches += 1;
                consecutive_bad += 1;
                log::warn!("epoch {epoch} step {step}: batch skipped (non-finite loss or gradient)");
                if consecutive_bad >= MAX_CONSECUTIVE_NONFINITE {
                    return Err(Error::NonFinite(format!(
                        "{MAX_CONSECUTIVE_NONFINITE} consecutive non-finite batches at epoch {epoch} step {step}"
                    )));
                }
                continue;
            }
            consecutive_bad = 0;
            let inv = 1.0 / count as f64;
            let grads: Vec<Option<Tensor>> = sum.into_iter().map(|g| g.map(|g| g.scale(inv))).collect();
            sgd.step(&mut model.params, &grads, epoch)?;
            let rec = LossRecord {
                step: epoch * cfg.steps_per_epoch + step,
                epoch,
                l_cls1: acc.l_cls1 * inv,
                l_cls2: acc.l_cls2 * inv,
                l_reg: acc.l_reg * inv,
                l_total: acc.l_total * inv,
                lr,
            };
            if let Some(f) = opts.on_step {
                f(&rec);
            }
            outcome.history.push(rec);
        }
        outcome.epochs_completed = epoch + 1;
        if let Some(dir) = &opts.out_dir {
            let ck = training_checkpoint(model, &sgd, cfg, &outcome)?;
            save_epoch(dir, &ck, epoch, &outcome.history)?;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ() {
        let a = sample_seed(1, 0, 0, 0);
        assert_ne!(a, sample_seed(1, 0, 0, 1));
        assert_ne!(a, sample_seed(1, 0, 1, 0));
        assert_ne!(a, sample_seed(1, 1, 0, 0));
        assert_ne!(a, sample_seed(2, 0, 0, 0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            freeze_backbone_epochs: 9,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::full().sgd().lr(49), 0.0005);
    }
}

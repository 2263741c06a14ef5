//! Inference loop: search-region cropping, scoring, box decoding and the
//! confidence-gated template update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::imaging::{context_side, crop_resize, CropWindow};
use crate::model::{Model, Modules};
use crate::rpn::{decode_boxes, AnchorGrid};
use crate::st_fusion::TemplateTriple;
use crate::tensor::{sigmoid, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateScore {
    /// Weighted branch sum after the scale/ratio penalty.
    Penalized,
    /// Weighted branch sum as produced by the head.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub update_threshold: f64,
    /// `false` behaves like an infinite threshold.
    pub update_enabled: bool,
    /// Weights of the softmax and sigmoid branch scores.
    pub branch_weights: [f64; 2],
    pub window_influence: f64,
    pub penalty_k: f64,
    pub size_lr: f64,
    pub gate: GateScore,
    /// Overrides the model's own module switches.
    pub modules: Option<Modules>,
    /// Smallest box side in frame pixels.
    pub min_size: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            update_threshold: 1.18,
            update_enabled: true,
            branch_weights: [1.0, 1.0],
            window_influence: 0.4,
            penalty_k: 0.05,
            size_lr: 0.3,
            gate: GateScore::Penalized,
            modules: None,
            min_size: 4.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let [w1, w2] = self.branch_weights;
        if !(w1 >= 0.0 && w2 >= 0.0 && w1 + w2 > 0.0) || !(w1 + w2).is_finite() {
            return Err(Error::Config("branch weights must be >= 0 with a positive sum".into()));
        }
        if !(0.0..=1.0).contains(&self.window_influence) || !(0.0..=1.0).contains(&self.size_lr) {
            return Err(Error::Config("window_influence and size_lr must lie in [0, 1]".into()));
        }
        if !(self.penalty_k >= 0.0) || self.update_threshold.is_nan() || !(self.min_size > 0.0) {
            return Err(Error::Config("penalty_k must be >= 0, min_size > 0 and the threshold a number".into()));
        }
        Ok(())
    }

    pub fn no_update(mut self) -> Self {
        self.update_enabled = false;
        self
    }
}

/// Per-sequence tracking state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub rect: Rect,
    pub f_i: Tensor,
    pub f_a: Tensor,
    pub f_c: Tensor,
    pub frame_w: usize,
    pub frame_h: usize,
}

#[derive(Clone, Debug)]
pub struct FrameResult {
    pub rect: Rect,
    pub confidence: f64,
    /// Scores were non-finite; the previous box was kept.
    pub rejected: bool,
    /// Fused template `f*_z` computed for this frame.
    pub fused: Tensor,
    /// Per-anchor weighted confidence before penalties.
    pub scores: Vec<f64>,
    pub best: usize,
}

pub struct Tracker<'m> {
    pub model: &'m Model,
    pub cfg: TrackerConfig,
    pub grid: AnchorGrid,
    window: Vec<f64>,
    modules: Modules,
}

fn hanning(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn change(r: f64) -> f64 {
    r.max(1.0 / r)
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = model.config.anchor_grid()?;
        let (wy, wx) = (hanning(grid.feat_h), hanning(grid.feat_w));
        let window = wy.iter().flat_map(|a| wx.iter().map(move |b| a * b)).collect();
        let modules = cfg.modules.unwrap_or_else(|| model.modules());
        Ok(Tracker {
            model,
            cfg,
            grid,
            window,
            modules,
        })
    }

    fn sizes(&self) -> (usize, usize) {
        let b = &self.model.config.backbone;
        (b.template_size, b.search_size)
    }

    pub fn template_window(&self, r: &Rect) -> CropWindow {
        CropWindow {
            cx: r.cx(),
            cy: r.cy(),
            side: context_side(r.w, r.h),
            out: self.sizes().0,
        }
    }

    pub fn search_window(&self, r: &Rect) -> CropWindow {
        let (t, s) = self.sizes();
        CropWindow {
            cx: r.cx(),
            cy: r.cy(),
            side: context_side(r.w, r.h) * s as f64 / t as f64,
            out: s,
        }
    }

    pub fn template_features(&self, frame: &Tensor, r: &Rect) -> Result<Tensor> {
        let (crop, _) = crop_resize(frame, &self.template_window(r))?;
        self.model.embed_tensor(&crop)
    }

    /// Search crop around the previous box, mean-padded where it leaves the frame.
    pub fn crop_search_region(&self, frame: &Tensor, state: &TrackState) -> Result<(Tensor, bool)> {
        crop_resize(frame, &self.search_window(&state.rect))
    }

    pub fn init(&self, frame: &Tensor, gt: &Rect) -> Result<TrackState> {
        let (_, h, w) = frame.dims3("tracker init")?;
        if !gt.is_valid() || !(gt.w > 0.0 && gt.h > 0.0) {
            return Err(Error::Data(format!("degenerate initial box {gt:?}")));
        }
        let frame_rect = Rect::new(0.0, 0.0, w as f64, h as f64);
        if gt.intersection(&frame_rect) <= 0.0 {
            return Err(Error::Data(format!("initial box {gt:?} lies outside the {w}x{h} frame")));
        }
        let f = self.template_features(frame, gt)?;
        Ok(TrackState {
            rect: *gt,
            f_i: f.clone(),
            f_a: f.clone(),
            f_c: f,
            frame_w: w,
            frame_h: h,
        })
    }

    /// Scores one frame without changing `state`.
    pub fn track_frame(&self, frame: &Tensor, state: &TrackState) -> Result<FrameResult> {
        let win = self.search_window(&state.rect);
        let (crop, _) = crop_resize(frame, &win)?;
        let model = self.model;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, |_| false);
        let search = model.embed(&mut g, &p, &crop)?;
        let t = TemplateTriple {
            initial: g.constant(state.f_i.clone()),
            accumulated: g.constant(state.f_a.clone()),
            current: g.constant(state.f_c.clone()),
        };
        let out = model.forward(&mut g, &p, t, search, self.modules)?;
        let fused = g.value(out.template).clone();

        let n = self.grid.len();
        let cls1 = g.value(out.head.cls1).data();
        let cls2 = g.value(out.head.cls2).data();
        let [w1, w2] = self.cfg.branch_weights;
        let scores: Vec<f64> = (0..n)
            .map(|k| w1 * sigmoid(cls1[n + k] - cls1[k]) + w2 * sigmoid(cls2[k]))
            .collect();
        let boxes = decode_boxes(g.value(out.head.reg), &self.grid)?;

        let s = win.scale();
        let (tw, th) = (state.rect.w * s, state.rect.h * s);
        let target_sz = context_side(tw, th);
        let plane = self.grid.feat_h * self.grid.feat_w;
        let wi = self.cfg.window_influence;
        let mut best = None::<(usize, f64)>;
        let mut penalized = vec![0.0; n];
        let mut finite = true;
        for k in 0..n {
            let b = &boxes[k];
            let sc = change(context_side(b.w, b.h) / target_sz);
            let rc = change((tw / th) / (b.w / b.h));
            let penalty = (-(rc * sc - 1.0) * self.cfg.penalty_k).exp();
            penalized[k] = penalty * scores[k];
            let total = penalized[k] * (1.0 - wi) + self.window[k % plane] * wi * (w1 + w2);
            if !total.is_finite() || !b.cx().is_finite() || !b.w.is_finite() {
                finite = false;
                break;
            }
            if best.is_none_or(|(_, v)| total > v) {
                best = Some((k, total));
            }
        }
        let Some((best, _)) = best.filter(|_| finite) else {
            return Ok(FrameResult {
                rect: state.rect,
                confidence: 0.0,
                rejected: true,
                fused,
                scores,
                best: 0,
            });
        };

        let pred = win.to_frame(&boxes[best]);
        let lr = penalized[best] / (w1 + w2) * self.cfg.size_lr;
        let w = state.rect.w * (1.0 - lr) + pred.w * lr;
        let h = state.rect.h * (1.0 - lr) + pred.h * lr;
        let (fw, fh) = (state.frame_w as f64, state.frame_h as f64);
        let w = w.clamp(self.cfg.min_size, fw.max(self.cfg.min_size));
        let h = h.clamp(self.cfg.min_size, fh.max(self.cfg.min_size));
        let rect = Rect::from_center(pred.cx().clamp(0.0, fw), pred.cy().clamp(0.0, fh), w, h);
        let confidence = match self.cfg.gate {
            GateScore::Penalized => penalized[best],
            GateScore::Raw => scores[best],
        };
        Ok(FrameResult {
            rect,
            confidence,
            rejected: false,
            fused,
            scores,
            best,
        })
    }

    /// If `confidence` exceeds the threshold, `f_c` becomes the template
    /// features at `rect` and `f_a` the fused template of this frame.
    pub fn maybe_update_template(
        &self,
        frame: &Tensor,
        rect: &Rect,
        confidence: f64,
        fused: &Tensor,
        state: &mut TrackState,
    ) -> Result<bool> {
        if !self.cfg.update_enabled || !(confidence > self.cfg.update_threshold) {
            return Ok(false);
        }
        if fused.shape() != state.f_a.shape() {
            return Err(Error::shape("template update", fused.shape(), state.f_a.shape()));
        }
        state.f_c = self.template_features(frame, rect)?;
        state.f_a = fused.clone();
        Ok(true)
    }

    /// `track_frame` followed by the box update and the gated template update.
    pub fn step(&self, frame: &Tensor, state: &mut TrackState) -> Result<Step> {
        let r = self.track_frame(frame, state)?;
        let updated = if r.rejected {
            false
        } else {
            state.rect = r.rect;
            self.maybe_update_template(frame, &r.rect, r.confidence, &r.fused, state)?
        };
        Ok(Step {
            rect: r.rect,
            confidence: r.confidence,
            rejected: r.rejected,
            updated,
        })
    }

    pub fn run(&self, frames: &[Tensor], init: &Rect) -> Result<TrackRun> {
        let first = frames.first().ok_or_else(|| Error::Data("empty sequence".into()))?;
        let mut state = self.init(first, init)?;
        let mut run = TrackRun {
            boxes: vec![*init],
            confidences: Vec::with_capacity(frames.len()),
            updates: Vec::new(),
            rejected: Vec::new(),
        };
        for (i, f) in frames.iter().enumerate().skip(1) {
            let s = self.step(f, &mut state)?;
            debug_assert!(state.rect.w > 0.0 && state.rect.h > 0.0);
            run.boxes.push(s.rect);
            run.confidences.push((i, s.confidence));
            if s.updated {
                run.updates.push(i);
            }
            if s.rejected {
                run.rejected.push(i);
            }
        }
        Ok(run)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub rect: Rect,
    pub confidence: f64,
    pub rejected: bool,
    pub updated: bool,
}

/// Boxes for every frame (the first is the initial box) and per-frame diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRun {
    pub boxes: Vec<Rect>,
    /// `(frame_index, confidence)` for frames after the first.
    pub confidences: Vec<(usize, f64)>,
    pub updates: Vec<usize>,
    pub rejected: Vec<usize>,
}

impl TrackRun {
    /// One `x,y,w,h` line per frame.
    pub fn results_text(&self) -> String {
        self.boxes.iter().map(|r| crate::data::format_box(r) + "\n").collect()
    }

    /// One `frame_index,confidence` line per tracked frame.
    pub fn confidence_text(&self) -> String {
        self.confidences.iter().map(|(i, c)| format!("{i},{c}\n")).collect()
    }
}

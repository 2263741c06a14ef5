use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SequenceRecord;
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::imaging::{context_side, crop_resize, CropWindow};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    /// Frames from which all three templates are drawn.
    pub window: usize,
    pub noise_prob: f64,
    /// Standard deviation of the additive noise, as a fraction of `[0, 1]`.
    pub noise_sigma: f64,
    /// Take the search crop from the frame after `T_c` (else from `T_c`'s frame).
    pub search_from_successor: bool,
    /// Maximum offset of the search-crop centre from the target, in crop pixels.
    pub max_shift: f64,
    /// Relative jitter of the search-crop side.
    pub scale_jitter: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            window: 50,
            noise_prob: 0.3,
            noise_sigma: 0.05,
            search_from_successor: true,
            max_shift: 24.0,
            scale_jitter: 0.05,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config("triplet window must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_prob must lie in [0, 1] and noise_sigma be >= 0".into()));
        }
        if !(self.max_shift >= 0.0) || !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::Config("max_shift must be >= 0 and scale_jitter in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletIndices {
    pub window_start: usize,
    pub initial: usize,
    pub accumulated: usize,
    pub current: usize,
    pub search: usize,
}

/// Crop plus the ground-truth box in crop pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSample {
    pub image: Tensor,
    pub gt: Rect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriplet {
    pub sequence: usize,
    pub indices: TripletIndices,
    pub initial: CropSample,
    pub accumulated: CropSample,
    pub current: CropSample,
    pub search: CropSample,
}

/// Window start uniform over valid positions; `T_i` uniform in the window;
/// `(T_a, T_c)` a uniformly chosen consecutive pair inside it.
pub fn sample_indices<R: Rng + ?Sized>(len: usize, cfg: &TripletConfig, rng: &mut R) -> Result<TripletIndices> {
    cfg.validate()?;
    if len < cfg.window {
        return Err(Error::Data(format!(
            "sequence of {len} frames is shorter than the {}-frame sampling window",
            cfg.window
        )));
    }
    let start = rng.random_range(0..=len - cfg.window);
    let initial = start + rng.random_range(0..cfg.window);
    let accumulated = start + rng.random_range(0..cfg.window - 1);
    let current = accumulated + 1;
    let search = if cfg.search_from_successor && current + 1 < len {
        current + 1
    } else {
        current
    };
    Ok(TripletIndices {
        window_start: start,
        initial,
        accumulated,
        current,
        search,
    })
}

fn template_crop(frame: &Tensor, gt: &Rect, size: usize) -> Result<CropSample> {
    let win = CropWindow {
        cx: gt.cx(),
        cy: gt.cy(),
        side: context_side(gt.w, gt.h),
        out: size,
    };
    let (image, _) = crop_resize(frame, &win)?;
    Ok(CropSample {
        image,
        gt: win.to_crop(gt),
    })
}

fn add_noise<R: Rng + ?Sized>(img: &mut Tensor, cfg: &TripletConfig, rng: &mut R) {
    if cfg.noise_sigma > 0.0 && rng.random_bool(cfg.noise_prob) {
        let n = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for v in img.data_mut() {
            *v += n.sample(rng);
        }
    }
}

pub fn sample_training_triplet<R: Rng + ?Sized>(
    seq: &SequenceRecord,
    sequence: usize,
    cfg: &TripletConfig,
    template_size: usize,
    search_size: usize,
    rng: &mut R,
) -> Result<TrainingTriplet> {
    seq.validate()?;
    let idx = sample_indices(seq.len(), cfg, rng)?;
    let initial = template_crop(&seq.frames[idx.initial], &seq.gt[idx.initial], template_size)?;
    let mut accumulated = template_crop(&seq.frames[idx.accumulated], &seq.gt[idx.accumulated], template_size)?;
    let mut current = template_crop(&seq.frames[idx.current], &seq.gt[idx.current], template_size)?;
    add_noise(&mut accumulated.image, cfg, rng);
    add_noise(&mut current.image, cfg, rng);

    // Search window sized from the previous (T_c) box, as at inference time.
    let prev = seq.gt[idx.current];
    let gt = seq.gt[idx.search];
    let jitter = 1.0 + rng.random_range(-cfg.scale_jitter..=cfg.scale_jitter);
    let side = context_side(prev.w, prev.h) * search_size as f64 / template_size as f64 * jitter;
    let px = side / search_size as f64;
    let dx = rng.random_range(-cfg.max_shift..=cfg.max_shift) * px;
    let dy = rng.random_range(-cfg.max_shift..=cfg.max_shift) * px;
    let win = CropWindow {
        cx: gt.cx() + dx,
        cy: gt.cy() + dy,
        side,
        out: search_size,
    };
    let (image, _) = crop_resize(&seq.frames[idx.search], &win)?;
    Ok(TrainingTriplet {
        sequence,
        indices: idx,
        initial,
        accumulated,
        current,
        search: CropSample {
            image,
            gt: win.to_crop(&gt),
        },
    })
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Attribute, SequenceRecord};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub length: usize,
    pub width: usize,
    pub height: usize,
    pub attributes: Vec<Attribute>,
    pub seed: u64,
    /// Pixels per frame; drawn from `[0.5, 2.5]` when unset.
    pub speed: Option<f64>,
    /// Initial `(w, h)`; drawn from `[16, 28]` when unset.
    pub target_size: Option<(usize, usize)>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            length: 100,
            width: 128,
            height: 128,
            attributes: Vec::new(),
            seed: 0,
            speed: None,
            target_size: None,
        }
    }
}

impl SynthSpec {
    pub fn has(&self, a: Attribute) -> bool {
        self.attributes.contains(&a)
    }

    pub fn name(&self) -> String {
        let mut n = format!("synth_{:04}", self.seed);
        for a in &self.attributes {
            n.push('_');
            n.push_str(a.name());
        }
        n
    }
}

/// Geometry that the frames were rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    /// Bounding box of the pixels painted by the target (before occlusion).
    pub mask_boxes: Vec<Rect>,
    pub occluders: Vec<Option<Rect>>,
}

/// Integer-aligned rectangle in pixel units.
#[derive(Clone, Copy, Debug)]
struct IRect {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

impl IRect {
    fn rect(&self) -> Rect {
        Rect::new(self.x as f64, self.y as f64, self.w as f64, self.h as f64)
    }
}

struct Texture {
    w: usize,
    h: usize,
    rgb: Vec<[f64; 3]>,
}

impl Texture {
    /// Block pattern of saturated colours with fine grain.
    fn random(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        let bx = rng.random_range(2..=4usize);
        let by = rng.random_range(2..=4usize);
        let palette: Vec<[f64; 3]> = (0..bx * by)
            .map(|_| {
                let mut c = [0.0; 3];
                for v in &mut c {
                    *v = if rng.random_bool(0.5) {
                        rng.random_range(0.75..1.0)
                    } else {
                        rng.random_range(0.0..0.25)
                    };
                }
                c
            })
            .collect();
        let grain = Normal::new(0.0, 0.04).expect("valid sigma");
        let rgb = (0..w * h)
            .map(|k| {
                let (y, x) = (k / w, k % w);
                let b = palette[(y * by / h) * bx + x * bx / w];
                let n = grain.sample(rng);
                [b[0] + n, b[1] + n, b[2] + n]
            })
            .collect();
        Texture { w, h, rgb }
    }

    /// Nearest-neighbour sample at relative position `(u, v)` in `[0, 1)`.
    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let x = ((u * self.w as f64) as usize).min(self.w - 1);
        let y = ((v * self.h as f64) as usize).min(self.h - 1);
        self.rgb[y * self.w + x]
    }
}

struct Canvas {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Canvas {
    /// Paints `tex` stretched over `r`; returns the box of pixels written.
    fn paint(&mut self, r: &IRect, tex: &Texture) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for y in r.y.max(0)..(r.y + r.h).min(self.h as i64) {
            for x in r.x.max(0)..(r.x + r.w).min(self.w as i64) {
                let u = (x - r.x) as f64 / r.w as f64;
                let v = (y - r.y) as f64 / r.h as f64;
                let c = tex.at(u, v);
                let p = y as usize * self.w + x as usize;
                for (ch, val) in c.iter().enumerate() {
                    self.data[ch * self.w * self.h + p] = *val;
                }
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
            }
        }
        (x1 >= x0).then(|| Rect::from_corners(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
    }

    /// Horizontal or vertical box blur of odd length `k`.
    fn blur(&mut self, k: usize, horizontal: bool) {
        let half = (k / 2) as i64;
        let src = self.data.clone();
        let (w, h) = (self.w as i64, self.h as i64);
        let plane = self.w * self.h;
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for d in -half..=half {
                        let (sx, sy) = if horizontal {
                            ((x + d).clamp(0, w - 1), y)
                        } else {
                            (x, (y + d).clamp(0, h - 1))
                        };
                        acc += src[ch * plane + (sy * w + sx) as usize];
                    }
                    self.data[ch * plane + (y * w + x) as usize] = acc / k as f64;
                }
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let data = self.data.into_iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Tensor::new(vec![3, self.h, self.w], data).expect("canvas size")
    }
}

fn background(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base: [f64; 3] = [
        rng.random_range(0.35..0.65),
        rng.random_range(0.35..0.65),
        rng.random_range(0.35..0.65),
    ];
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(8.0..30.0),
                [
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                ],
            )
        })
        .collect();
    let grain = Normal::new(0.0, 0.02).expect("valid sigma");
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let n = grain.sample(rng);
            for ch in 0..3 {
                let mut v = base[ch] + n;
                for (bx, by, r, amp) in &blobs {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    v += amp[ch] * (-d2 / (2.0 * r * r)).exp();
                }
                data[ch * plane + y * w + x] = v;
            }
        }
    }
    data
}

pub fn generate_sequence(spec: &SynthSpec) -> Result<SequenceRecord> {
    generate_with_truth(spec).map(|(s, _)| s)
}

/// Renders a sequence and returns the geometry it was drawn from.
pub fn generate_with_truth(spec: &SynthSpec) -> Result<(SequenceRecord, SynthTruth)> {
    if spec.length < 2 {
        return Err(Error::Config(format!("sequence length must be >= 2, got {}", spec.length)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let (w0, h0) = match spec.target_size {
        Some(s) => s,
        None => (rng.random_range(16..=28usize), rng.random_range(16..=28usize)),
    };
    let max_scale = if spec.has(Attribute::ScaleVariation) { 1.6 } else { 1.0 };
    let max_deform = if spec.has(Attribute::Deformation) { 1.3 } else { 1.0 };
    let extent = max_scale * max_deform * w0.max(h0) as f64;
    if w0 == 0 || h0 == 0 || extent + 2.0 > fw.min(fh) {
        return Err(Error::Config(format!(
            "target {w0}x{h0} (up to {extent:.0} px with the requested attributes) does not fit a {}x{} frame",
            spec.width, spec.height
        )));
    }

    let speed = spec.speed.unwrap_or_else(|| rng.random_range(0.5..2.5));
    if !(speed >= 0.0) || !speed.is_finite() {
        return Err(Error::Config(format!("speed must be finite and >= 0, got {speed}")));
    }
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
    let mut cx = rng.random_range(0.3 * fw..0.7 * fw);
    let mut cy = rng.random_range(0.3 * fh..0.7 * fh);
    let shrink = rng.random_bool(0.5);
    let deform_period = rng.random_range(20.0..40.0);

    let bg = background(spec.width, spec.height, &mut rng);
    let texture = Texture::random(w0.max(8), h0.max(8), &mut rng);
    let distractors: Vec<(IRect, Texture)> = if spec.has(Attribute::BackgroundClutter) {
        (0..3)
            .map(|_| {
                let w = rng.random_range(12..=24i64);
                let h = rng.random_range(12..=24i64);
                let r = IRect {
                    x: rng.random_range(0..spec.width as i64 - w),
                    y: rng.random_range(0..spec.height as i64 - h),
                    w,
                    h,
                };
                (r, Texture::random(w as usize, h as usize, &mut rng))
            })
            .collect()
    } else {
        Vec::new()
    };
    let occluder_tex = Texture::random(8, 8, &mut rng);
    let n = spec.length;
    let blur_range = (n / 3)..(2 * n / 3);
    let blur_horizontal = vx.abs() >= vy.abs();

    // Target geometry per frame.
    let mut boxes = Vec::with_capacity(n);
    for t in 0..n {
        let progress = t as f64 / (n - 1) as f64;
        let scale = if spec.has(Attribute::ScaleVariation) {
            if shrink {
                1.0 - 0.4 * progress
            } else {
                1.0 + 0.6 * progress
            }
        } else {
            1.0
        };
        let aspect = if spec.has(Attribute::Deformation) {
            1.0 + 0.3 * (std::f64::consts::TAU * t as f64 / deform_period).sin()
        } else {
            1.0
        };
        let w = ((w0 as f64 * scale * aspect).round() as i64).max(4);
        let h = ((h0 as f64 * scale / aspect).round() as i64).max(4);
        let half_w = w as f64 / 2.0;
        let half_h = h as f64 / 2.0;
        if cx - half_w < 0.0 || cx + half_w > fw {
            vx = -vx;
        }
        if cy - half_h < 0.0 || cy + half_h > fh {
            vy = -vy;
        }
        cx = cx.clamp(half_w, fw - half_w);
        cy = cy.clamp(half_h, fh - half_h);
        let x = ((cx - half_w).round() as i64).clamp(0, spec.width as i64 - w);
        let y = ((cy - half_h).round() as i64).clamp(0, spec.height as i64 - h);
        boxes.push(IRect { x, y, w, h });
        cx += vx;
        cy += vy;
    }

    // Occluder: covers the middle frame's target, 0.8 of its width.
    let occluder = spec.has(Attribute::Occlusion).then(|| {
        let m = boxes[n / 2];
        let ow = ((m.w as f64 * 0.8).round() as i64).max(1);
        IRect {
            x: m.x + (m.w - ow) / 2,
            y: m.y - 2,
            w: ow,
            h: m.h + 4,
        }
    });
    let occ_frames = (n / 2).saturating_sub(n / 10)..(n / 2 + n / 10 + 1);

    let mut frames = Vec::with_capacity(n);
    let mut occluders = Vec::with_capacity(n);
    let mut mask_boxes = Vec::with_capacity(n);
    for (t, b) in boxes.iter().enumerate() {
        let mut canvas = Canvas {
            w: spec.width,
            h: spec.height,
            data: bg.clone(),
        };
        for (r, tex) in &distractors {
            canvas.paint(r, tex);
        }
        mask_boxes.push(canvas.paint(b, &texture).unwrap_or(Rect::new(0.0, 0.0, 0.0, 0.0)));
        let occ = occluder.filter(|_| occ_frames.contains(&t));
        if let Some(o) = &occ {
            canvas.paint(o, &occluder_tex);
        }
        if spec.has(Attribute::MotionBlur) && blur_range.contains(&t) {
            canvas.blur(5, blur_horizontal);
        }
        frames.push(canvas.into_tensor());
        occluders.push(occ.map(|o| o.rect()));
    }
    let gt: Vec<Rect> = boxes.iter().map(IRect::rect).collect();
    let mut attributes = spec.attributes.clone();
    attributes.sort();
    attributes.dedup();
    Ok((
        SequenceRecord {
            name: spec.name(),
            frames,
            gt,
            attributes,
        },
        SynthTruth {
            mask_boxes,
            occluders,
        },
    ))
}

/// A fixed mix of attribute combinations, one spec per sequence.
pub fn benchmark_specs(count: usize, length: usize, seed: u64) -> Vec<SynthSpec> {
    let mixes: [&[Attribute]; 6] = [
        &[],
        &[Attribute::Deformation],
        &[Attribute::ScaleVariation],
        &[Attribute::BackgroundClutter],
        &[Attribute::Occlusion],
        &[Attribute::MotionBlur, Attribute::Deformation],
    ];
    (0..count)
        .map(|i| SynthSpec {
            length,
            attributes: mixes[i % mixes.len()].to_vec(),
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            ..SynthSpec::default()
        })
        .collect()
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use siamtrack_core::data::{generate_sequence, SynthSpec};
use siamtrack_core::geometry::Rect;
use siamtrack_core::imaging::{channel_means, crop_resize, CropWindow};
use siamtrack_core::model::{Model, ModelConfig, Modules};
use siamtrack_core::tracker::{Tracker, TrackerConfig};
use siamtrack_core::Tensor;

const STRIDE: f64 = 8.0;

fn model(seed: u64) -> Model {
    Model::new(ModelConfig::desk(), seed).unwrap()
}

/// Head whose positive score is the summed rectified response and whose
/// regression is zero, so the best anchor sits on the correlation peak.
fn peak_model(seed: u64) -> Model {
    let mut m = model(seed);
    let c = m.config.backbone.out_channels;
    let a = m.config.anchors.count();
    let eps = 1e-6;
    let set = |m: &mut Model, name: &str, t: Tensor| {
        let id = m.params.find(name).unwrap();
        *m.params.get_mut(id) = t;
    };
    set(&mut m, "head.shared.weight", Tensor::from_fn(&[c, c, 3, 3], |i| {
        let (o, ci, tap) = (i / (9 * c), (i / 9) % c, i % 9);
        (o == ci && tap == 4) as u8 as f64
    }));
    set(&mut m, "head.cls1.weight", Tensor::from_fn(&[2 * a, c, 1, 1], |i| if i / c >= a { eps } else { 0.0 }));
    set(&mut m, "head.cls2.weight", Tensor::full(&[a, c, 1, 1], eps));
    set(&mut m, "head.reg.weight", Tensor::zeros(&[4 * a, c, 1, 1]));
    m
}

/// Mid-grey frame (zero after normalisation) with one textured patch.
fn patch_frame(w: usize, h: usize, r: &Rect, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut f = Tensor::full(&[3, h, w], 0.5);
    for c in 0..3 {
        for y in r.y as usize..r.y2() as usize {
            for x in r.x as usize..r.x2() as usize {
                let (ty, tx) = ((y - r.y as usize) / 4, (x - r.x as usize) / 4);
                f.set(&[c, y, x], tex[c * 4096 + ty * 64 + tx]);
            }
        }
    }
    f
}

fn quiet() -> TrackerConfig {
    TrackerConfig { window_influence: 0.0, penalty_k: 0.0, size_lr: 0.0, ..TrackerConfig::default() }
}

#[test]
fn init_sets_all_templates_equal_and_is_deterministic() {
    let m = model(1);
    let t = Tracker::new(&m, TrackerConfig::default()).unwrap();
    let seq = generate_sequence(&SynthSpec { length: 3, seed: 2, ..SynthSpec::default() }).unwrap();
    let s = t.init(&seq.frames[0], &seq.gt[0]).unwrap();
    assert_eq!(s.f_i, s.f_a);
    assert_eq!(s.f_i, s.f_c);
    assert_eq!(s.f_i.shape(), &[32, 5, 5]);
    assert_eq!(t.init(&seq.frames[0], &seq.gt[0]).unwrap(), s);
}

#[test]
fn init_rejects_bad_boxes() {
    let m = model(1);
    let t = Tracker::new(&m, TrackerConfig::default()).unwrap();
    let f = Tensor::full(&[3, 64, 64], 0.5);
    assert!(t.init(&f, &Rect::new(10.0, 10.0, 0.0, 5.0)).is_err());
    assert!(t.init(&f, &Rect::new(100.0, 100.0, 10.0, 10.0)).is_err());
    assert!(t.init(&f, &Rect::new(f64::NAN, 1.0, 10.0, 10.0)).is_err());
}

#[test]
fn partially_outside_init_pads_with_channel_means() {
    let m = model(3);
    let t = Tracker::new(&m, TrackerConfig::default()).unwrap();
    let frame = Tensor::from_fn(&[3, 60, 80], |i| ((i * 7) % 11) as f64 / 10.0);
    let gt = Rect::new(-8.0, 40.0, 20.0, 30.0);
    let s = t.init(&frame, &gt).unwrap();
    assert!(s.f_i.is_finite());
    let (crop, padded) = crop_resize(&frame, &t.template_window(&gt)).unwrap();
    assert!(padded);
    let means = channel_means(&frame).unwrap();
    // the left column samples only outside the frame
    for (c, mean) in means.iter().enumerate() {
        assert!((crop.at(&[c, 46, 0]) - mean).abs() < 1e-12);
    }
}

#[test]
fn search_crop_padding() {
    let m = model(4);
    let t = Tracker::new(&m, TrackerConfig::default()).unwrap();
    let frame = Tensor::from_fn(&[3, 200, 200], |i| ((i * 13) % 17) as f64 / 16.0);
    let mut s = t.init(&frame, &Rect::from_center(100.0, 100.0, 20.0, 20.0)).unwrap();
    let (_, padded) = t.crop_search_region(&frame, &s).unwrap();
    assert!(!padded);
    s.rect = Rect::new(0.0, 0.0, 20.0, 20.0);
    let (crop, padded) = t.crop_search_region(&frame, &s).unwrap();
    assert!(padded);
    let means = channel_means(&frame).unwrap();
    for (c, mean) in means.iter().enumerate() {
        assert!((crop.at(&[c, 0, 0]) - mean).abs() < 1e-12);
    }
}

fn bilinear_oracle(img: &Tensor, win: &CropWindow) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let means = channel_means(img).unwrap();
    let n = win.out;
    let px = |c: usize, y: i64, x: i64| {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            means[c]
        } else {
            img.at(&[c, y as usize, x as usize])
        }
    };
    Tensor::from_fn(&[3, n, n], |i| {
        let (c, v, u) = (i / (n * n), (i / n) % n, i % n);
        // centre of output pixel u in frame coordinates, shifted to pixel-centre indexing
        let sx = win.cx + (u as f64 + 0.5 - n as f64 / 2.0) * win.side / n as f64 - 0.5;
        let sy = win.cy + (v as f64 + 0.5 - n as f64 / 2.0) * win.side / n as f64 - 0.5;
        let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
        let (ax, ay) = (sx - sx.floor(), sy - sy.floor());
        let top = px(c, y0, x0) * (1.0 - ax) + px(c, y0, x0 + 1) * ax;
        let bot = px(c, y0 + 1, x0) * (1.0 - ax) + px(c, y0 + 1, x0 + 1) * ax;
        top * (1.0 - ay) + bot * ay
    })
}

#[test]
fn checkerboard_resize_matches_bilinear_oracle() {
    let img = Tensor::from_fn(&[3, 40, 48], |i| {
        let (c, y, x) = (i / (40 * 48), (i / 48) % 40, i % 48);
        if (y / 4 + x / 4 + c) % 2 == 0 { 1.0 } else { 0.0 }
    });
    for win in [
        CropWindow { cx: 24.0, cy: 20.0, side: 30.0, out: 47 },
        CropWindow { cx: 10.3, cy: 33.7, side: 52.5, out: 23 },
        CropWindow { cx: 0.0, cy: 0.0, side: 9.0, out: 31 },
    ] {
        let (crop, _) = crop_resize(&img, &win).unwrap();
        assert!(crop.max_abs_diff(&bilinear_oracle(&img, &win)) < 1e-6);
    }
}

#[test]
fn delta_target_is_found_within_one_stride() {
    let m = peak_model(5);
    let t = Tracker::new(&m, quiet()).unwrap();
    let start = Rect::new(50.0, 52.0, 24.0, 24.0);
    let state = t.init(&patch_frame(160, 160, &start, 9), &start).unwrap();
    for (dx, dy) in [(0.0, 0.0), (6.0, -4.0), (-10.0, 3.0), (12.0, 12.0), (-7.0, -11.0)] {
        let moved = Rect::new(start.x + dx, start.y + dy, 24.0, 24.0);
        let r = t.track_frame(&patch_frame(160, 160, &moved, 9), &state).unwrap();
        let scale = t.search_window(&state.rect).scale();
        let err = (r.rect.cx() - moved.cx()).hypot(r.rect.cy() - moved.cy()) * scale;
        assert!(err <= STRIDE, "shift ({dx}, {dy}): error {err:.2} crop px");
    }
}

#[test]
fn static_target_stays_within_one_stride() {
    let m = peak_model(6);
    let t = Tracker::new(&m, quiet()).unwrap();
    let gt = Rect::new(60.0, 44.0, 24.0, 24.0);
    let frame = patch_frame(160, 160, &gt, 10);
    let frames = vec![frame; 50];
    let run = t.run(&frames, &gt).unwrap();
    let scale = t.search_window(&gt).scale();
    for b in &run.boxes {
        assert!((b.cx() - gt.cx()).hypot(b.cy() - gt.cy()) * scale <= STRIDE);
    }
}

#[test]
fn identical_frames_give_identical_outputs() {
    let m = model(7);
    let t = Tracker::new(&m, TrackerConfig::default()).unwrap();
    let seq = generate_sequence(&SynthSpec { length: 3, seed: 5, ..SynthSpec::default() }).unwrap();
    let s = t.init(&seq.frames[0], &seq.gt[0]).unwrap();
    let a = t.track_frame(&seq.frames[1], &s).unwrap();
    let b = t.track_frame(&seq.frames[1], &s).unwrap();
    assert_eq!((a.rect, a.confidence, a.best), (b.rect, b.confidence, b.best));
    assert_eq!(a.scores, b.scores);
}

#[test]
fn confidence_is_bounded_by_branch_weights() {
    let seq = generate_sequence(&SynthSpec { length: 25, seed: 6, ..SynthSpec::default() }).unwrap();
    for (seed, w) in [(8, [1.0, 1.0]), (9, [0.7, 0.2]), (10, [0.0, 2.0])] {
        let cfg = ModelConfig { zero_init_filters: false, ..ModelConfig::desk() };
        let m = Model::new(cfg, seed).unwrap();
        let t = Tracker::new(&m, TrackerConfig { branch_weights: w, ..TrackerConfig::default() }).unwrap();
        let run = t.run(&seq.frames, &seq.gt[0]).unwrap();
        for (_, c) in &run.confidences {
            assert!((0.0..=w[0] + w[1]).contains(c), "{c}");
        }
        assert_eq!(run.boxes.len(), seq.len());
    }
}

#[test]
fn disabled_updates_match_fixed_template_reference() {
    let cfg = ModelConfig { zero_init_filters: false, ..ModelConfig::desk() };
    let m = Model::new(cfg, 11).unwrap();
    let seq = generate_sequence(&SynthSpec { length: 20, seed: 7, ..SynthSpec::default() }).unwrap();
    // threshold low enough that the gate would otherwise open
    let tcfg = TrackerConfig { update_threshold: -1.0, ..TrackerConfig::default() };
    let t = Tracker::new(&m, tcfg.clone().no_update()).unwrap();
    let run = t.run(&seq.frames, &seq.gt[0]).unwrap();
    assert!(run.updates.is_empty());

    let reference = Tracker::new(&m, tcfg.clone()).unwrap();
    let init = reference.init(&seq.frames[0], &seq.gt[0]).unwrap();
    let mut state = init.clone();
    for (i, f) in seq.frames.iter().enumerate().skip(1) {
        let r = reference.track_frame(f, &state).unwrap();
        state.rect = r.rect;
        assert_eq!(run.boxes[i], r.rect);
    }

    let open = Tracker::new(&m, tcfg).unwrap();
    let mut s = open.init(&seq.frames[0], &seq.gt[0]).unwrap();
    let f_i = s.f_i.clone();
    let mut updates = 0;
    for f in &seq.frames[1..] {
        updates += open.step(f, &mut s).unwrap().updated as usize;
        assert_eq!(s.f_i, f_i);
    }
    assert_eq!(updates, seq.len() - 1);
}

#[test]
fn gate_examples_and_identity_update() {
    let m = model(12);
    let t = Tracker::new(&m, TrackerConfig::default()).unwrap();
    let seq = generate_sequence(&SynthSpec { length: 3, seed: 8, speed: Some(2.5), ..SynthSpec::default() }).unwrap();
    let s0 = t.init(&seq.frames[0], &seq.gt[0]).unwrap();
    let r = t.track_frame(&seq.frames[1], &s0).unwrap();

    let mut s = s0.clone();
    assert!(!t.maybe_update_template(&seq.frames[1], &r.rect, 1.00, &r.fused, &mut s).unwrap());
    assert_eq!(s, s0);
    assert!(t.maybe_update_template(&seq.frames[1], &r.rect, 1.20, &r.fused, &mut s).unwrap());
    assert_eq!(s.f_c, t.template_features(&seq.frames[1], &r.rect).unwrap());
    // zero-initialised fusion returns f_i, so the accumulated template stays at f_i
    assert_eq!(s.f_a, s.f_i);
}

#[test]
fn module_override_changes_the_forward_pass() {
    let cfg = ModelConfig { zero_init_filters: false, ..ModelConfig::desk() };
    let m = Model::new(cfg, 13).unwrap();
    let seq = generate_sequence(&SynthSpec { length: 2, seed: 9, ..SynthSpec::default() }).unwrap();
    let full = Tracker::new(&m, TrackerConfig::default()).unwrap();
    let none = Tracker::new(&m, TrackerConfig { modules: Some(Modules::NONE), ..TrackerConfig::default() }).unwrap();
    let s = full.init(&seq.frames[0], &seq.gt[0]).unwrap();
    let a = full.track_frame(&seq.frames[1], &s).unwrap();
    let b = none.track_frame(&seq.frames[1], &s).unwrap();
    assert_ne!(a.scores, b.scores);
    assert_eq!(b.fused, s.f_i);
}

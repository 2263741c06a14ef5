use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use siamtrack_core::attention::{attend, Projections};
use siamtrack_core::da_module::DaModule;
use siamtrack_core::st_fusion::StFusion;
use siamtrack_core::tensor::{ParamGroup, ParamStore};
use siamtrack_core::{Graph, Tensor};

type Mat = Vec<Vec<f64>>;

fn tokens(f: &Tensor) -> Mat {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    (0..h * w).map(|t| (0..c).map(|ch| f.data()[ch * h * w + t]).collect()).collect()
}

fn untokens(t: &Mat, h: usize, w: usize) -> Tensor {
    let c = t[0].len();
    Tensor::from_fn(&[c, h, w], |i| t[i % (h * w)][i / (h * w)])
}

fn project(x: &Mat, w: &Tensor, b: Option<&Tensor>) -> Mat {
    let co = w.shape()[1];
    x.iter()
        .map(|row| {
            (0..co)
                .map(|o| {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for (i, v) in row.iter().enumerate() {
                        s += v * w.at(&[i, o]);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Returns `(output tokens, attention matrix)`.
fn attend_loop(store: &ParamStore, p: &Projections, q: &Mat, k: &Mat, v: &Mat) -> (Mat, Mat) {
    let b = |i: usize| p.bias.map(|ids| store.get(ids[i]));
    let q = project(q, store.get(p.w_q), b(0));
    let k = project(k, store.get(p.w_k), b(1));
    let v = project(v, store.get(p.w_v), b(2));
    let scale = (p.channels as f64).sqrt();
    let mut attn = Vec::new();
    let mut out = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / scale).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let row: Vec<f64> = e.iter().map(|x| x / z).collect();
        let o = (0..p.channels).map(|c| row.iter().zip(&v).map(|(a, vj)| a * vj[c]).sum()).collect();
        attn.push(row);
        out.push(o);
    }
    (out, attn)
}

fn conv_same(x: &Tensor, k: &Tensor) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = k.shape()[0];
    let mut out = Tensor::zeros(&[co, h, w]);
    for o in 0..co {
        for y in 0..h as i64 {
            for xx in 0..w as i64 {
                let mut s = 0.0;
                for c in 0..ci {
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let (iy, ix) = (y + dy, xx + dx);
                            if iy >= 0 && ix >= 0 && iy < h as i64 && ix < w as i64 {
                                s += x.at(&[c, iy as usize, ix as usize]) * k.at(&[o, c, (dy + 1) as usize, (dx + 1) as usize]);
                            }
                        }
                    }
                }
                out.set(&[o, y as usize, xx as usize], s);
            }
        }
    }
    out
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn run_attend(store: &ParamStore, p: &Projections, q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| false);
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let a = attend(&mut g, &b, p, q, k, v).unwrap();
    (g.value(a.tokens).clone(), g.value(a.attn).clone())
}

#[test]
fn identical_keys_give_uniform_attention() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let p = Projections::new(&mut store, "t", ParamGroup::SpatioTemporal, 3, false, &mut r);
    let q = Tensor::randn(&[4, 3], 1.0, &mut r);
    let k = Tensor::from_fn(&[5, 3], |i| [0.3, -1.0, 2.0][i % 3]);
    let v = Tensor::randn(&[5, 3], 1.0, &mut r);
    let (out, attn) = run_attend(&store, &p, &q, &k, &v);
    assert!(attn.data().iter().all(|a| (a - 0.2).abs() < 1e-15));
    let vp = v.matmul(store.get(p.w_v)).unwrap();
    for t in 0..4 {
        for c in 0..3 {
            let mean = (0..5).map(|j| vp.at(&[j, c])).sum::<f64>() / 5.0;
            assert!((out.at(&[t, c]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_query_weights_give_uniform_attention() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let p = Projections::new(&mut store, "t", ParamGroup::SpatioTemporal, 4, false, &mut r);
    *store.get_mut(p.w_q) = Tensor::zeros(&[4, 4]);
    let x = Tensor::randn(&[6, 4], 1.0, &mut r);
    let (_, attn) = run_attend(&store, &p, &x, &x, &x);
    assert!(attn.data().iter().all(|a| (a - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn two_token_hand_case() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let p = Projections::new(&mut store, "t", ParamGroup::SpatioTemporal, 2, false, &mut r);
    for id in [p.w_q, p.w_k, p.w_v] {
        *store.get_mut(id) = Tensor::eye(2);
    }
    let q = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let k = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
    let v = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (out, attn) = run_attend(&store, &p, &q, &k, &v);
    // logits / sqrt 2: row 0 = [1, 0]/√2, row 1 = [2, 2]/√2
    let s = 2f64.sqrt();
    let a0 = 1.0 / (1.0 + (-1.0 / s).exp());
    let want_attn = [a0, 1.0 - a0, 0.5, 0.5];
    let want_out = [a0 * 1.0 + (1.0 - a0) * 3.0, a0 * 2.0 + (1.0 - a0) * 4.0, 2.0, 3.0];
    for i in 0..4 {
        assert!((attn.data()[i] - want_attn[i]).abs() < 1e-12);
        assert!((out.data()[i] - want_out[i]).abs() < 1e-12);
    }
}

fn st_oracle(store: &ParamStore, st: &StFusion, fi: &Tensor, fa: &Tensor, fc: &Tensor) -> Tensor {
    let (h, w) = (fi.shape()[1], fi.shape()[2]);
    let tc = tokens(fc);
    let (enc, _) = attend_loop(store, &st.attn, &tc, &tokens(fa), &tc);
    conv_same(&untokens(&enc, h, w), store.get(st.filter)).add(fi).unwrap()
}

#[test]
fn st_fuse_matches_composition_oracle() {
    for (seed, bias) in [(4, false), (5, true)] {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let st = StFusion::new(&mut store, 2, bias, false, &mut r);
        if let Some(ids) = st.attn.bias {
            for id in ids {
                *store.get_mut(id) = Tensor::randn(&[2], 0.5, &mut r);
            }
        }
        let f: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 3, 3], 1.0, &mut r)).collect();
        let got = st.fuse_tensors(&store, &f[0], &f[1], &f[2]).unwrap();
        let want = st_oracle(&store, &st, &f[0], &f[1], &f[2]);
        assert!(got.max_abs_diff(&want) < 1e-10, "{}", got.max_abs_diff(&want));
    }
}

fn da_oracle(store: &ParamStore, da: &DaModule, fz: &Tensor, fs: &Tensor) -> Tensor {
    let (h, w) = (fs.shape()[1], fs.shape()[2]);
    let ts = tokens(fs);
    let (sa, _) = attend_loop(store, &da.self_attn, &ts, &ts, &ts);
    let tz = tokens(fz);
    let (ca, _) = attend_loop(store, &da.cross_attn, &sa, &tz, &tz);
    let mut x = untokens(&ca, h, w);
    for (i, &f) in da.filters.iter().enumerate() {
        if i > 0 {
            x = x.relu();
        }
        x = conv_same(&x, store.get(f));
    }
    x.add(fs).unwrap()
}

#[test]
fn da_augment_matches_composition_oracle() {
    for (seed, depth) in [(6, 1), (7, 2)] {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let da = DaModule::new(&mut store, 2, seed == 7, depth, false, &mut r).unwrap();
        let fz = Tensor::randn(&[2, 1, 2], 1.0, &mut r);
        let fs = Tensor::randn(&[2, 2, 2], 1.0, &mut r);
        let got = da.augment_tensors(&store, &fz, &fs).unwrap();
        let want = da_oracle(&store, &da, &fz, &fs);
        assert!(got.max_abs_diff(&want) < 1e-10);
    }
}

fn decode_mask(store: &ParamStore, da: &DaModule, fz: &Tensor, fs: &Tensor) -> (Tensor, Tensor, Tensor) {
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let (z, s) = (g.constant(fz.clone()), g.constant(fs.clone()));
    let d = da.decode(&mut g, &p, z, s).unwrap();
    (g.value(d.mask).clone(), g.value(d.self_attn).clone(), g.value(d.cross_attn).clone())
}

#[test]
fn identical_template_rows_give_constant_mask() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let da = DaModule::new(&mut store, 3, false, 1, false, &mut r).unwrap();
    let fz = Tensor::from_fn(&[3, 2, 2], |i| [0.5, -1.0, 0.25][i / 4]);
    let fs = Tensor::randn(&[3, 3, 3], 1.0, &mut r);
    let (mask, _, cross) = decode_mask(&store, &da, &fz, &fs);
    let vp = project(&vec![vec![0.5, -1.0, 0.25]], store.get(da.cross_attn.w_v), None);
    for c in 0..3 {
        for t in 0..9 {
            assert!((mask.data()[c * 9 + t] - vp[0][c]).abs() < 1e-12);
        }
    }
    assert!(cross.data().iter().all(|a| (a - 0.25).abs() < 1e-12));
}

#[test]
fn zero_query_weights_give_mean_pooled_mask() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let da = DaModule::new(&mut store, 2, false, 1, false, &mut r).unwrap();
    *store.get_mut(da.self_attn.w_q) = Tensor::zeros(&[2, 2]);
    *store.get_mut(da.cross_attn.w_q) = Tensor::zeros(&[2, 2]);
    let fz = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
    let fs = Tensor::randn(&[2, 3, 2], 1.0, &mut r);
    let (mask, sa, ca) = decode_mask(&store, &da, &fz, &fs);
    assert!(sa.data().iter().all(|a| (a - 1.0 / 6.0).abs() < 1e-15));
    assert!(ca.data().iter().all(|a| (a - 1.0 / 6.0).abs() < 1e-15));
    let vp = project(&tokens(&fz), store.get(da.cross_attn.w_v), None);
    for c in 0..2 {
        let mean = vp.iter().map(|row| row[c]).sum::<f64>() / 6.0;
        for t in 0..6 {
            assert!((mask.data()[c * 6 + t] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn modules_reject_mismatched_channels() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let st = StFusion::new(&mut store, 2, false, true, &mut r);
    let da = DaModule::new(&mut store, 2, false, 1, true, &mut r).unwrap();
    let a = Tensor::zeros(&[2, 3, 3]);
    let b = Tensor::zeros(&[3, 3, 3]);
    assert!(st.fuse_tensors(&store, &a, &a, &b).is_err());
    assert!(st.fuse_tensors(&store, &a, &Tensor::zeros(&[2, 2, 3]), &a).is_err());
    assert!(da.augment_tensors(&store, &b, &a).is_err());
    assert!(DaModule::new(&mut store, 2, false, 3, true, &mut r).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shapes_are_preserved(seed in 0u64..10_000, c in 1usize..5, h in 1usize..5, w in 1usize..5, hs in 1usize..7, ws in 1usize..7) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let st = StFusion::new(&mut store, c, r.random_bool(0.5), false, &mut r);
        let da = DaModule::new(&mut store, c, r.random_bool(0.5), 1 + r.random_range(0..2), false, &mut r).unwrap();
        let f: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[c, h, w], 1.0, &mut r)).collect();
        let fused = st.fuse_tensors(&store, &f[0], &f[1], &f[2]).unwrap();
        prop_assert_eq!(fused.shape(), &[c, h, w]);
        let fs = Tensor::randn(&[c, hs, ws], 1.0, &mut r);
        let aug = da.augment_tensors(&store, &fused, &fs).unwrap();
        prop_assert_eq!(aug.shape(), &[c, hs, ws]);
        prop_assert!(aug.is_finite());
    }

    #[test]
    fn zero_filters_are_identity(seed in 0u64..10_000, c in 1usize..5, h in 1usize..5, w in 1usize..5) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let st = StFusion::new(&mut store, c, true, true, &mut r);
        let da = DaModule::new(&mut store, c, true, 2, true, &mut r).unwrap();
        let f: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[c, h, w], 1.0, &mut r)).collect();
        let fused = st.fuse_tensors(&store, &f[0], &f[1], &f[2]).unwrap();
        prop_assert_eq!(&fused, &f[0]);
        let fs = Tensor::randn(&[c, h + 2, w + 1], 1.0, &mut r);
        prop_assert_eq!(da.augment_tensors(&store, &fused, &fs).unwrap(), fs);
    }
}

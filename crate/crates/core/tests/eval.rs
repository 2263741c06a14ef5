use proptest::prelude::*;

use siamtrack_core::data::{generate_sequence, Attribute, SynthSpec};
use siamtrack_core::eval::{
    ablation_report, ao_sr, evaluate, mean_curves, precision_at, success_auc, AblationEntry, MetricReport, Metrics,
    RunResult,
};
use siamtrack_core::geometry::Rect;
use siamtrack_core::model::{Model, ModelConfig};
use siamtrack_core::tracker::TrackerConfig;

fn count_auc(ious: &[f64]) -> f64 {
    let mut total = 0usize;
    for i in 0..=20 {
        let t = i as f64 / 20.0;
        total += ious.iter().filter(|&&x| x > t).count();
    }
    total as f64 / (21 * ious.len()) as f64
}

fn ious() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![0.0..=1.0f64, (0..=20u32).prop_map(|k| k as f64 / 20.0)], 1..60)
}

proptest! {
    #[test]
    fn auc_matches_counting(v in ious()) {
        prop_assert!((success_auc(&v).unwrap() - count_auc(&v)).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant(v in ious(), seed in any::<u64>()) {
        let mut w = v.clone();
        let n = w.len();
        for i in (1..n).rev() {
            w.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        prop_assert!((success_auc(&v).unwrap() - success_auc(&w).unwrap()).abs() < 1e-12);
        let (a, b) = (ao_sr(&v).unwrap(), ao_sr(&w).unwrap());
        prop_assert!((a.ao - b.ao).abs() < 1e-12);
        prop_assert_eq!((a.sr50, a.sr75), (b.sr50, b.sr75));
    }

    #[test]
    fn precision_is_monotone_in_tau(e in prop::collection::vec(0.0..100.0f64, 1..50), t1 in 0.0..60.0f64, dt in 0.0..40.0f64) {
        prop_assert!(precision_at(&e, t1).unwrap() <= precision_at(&e, t1 + dt).unwrap());
        let count = e.iter().filter(|&&x| x <= t1).count() as f64 / e.len() as f64;
        prop_assert_eq!(precision_at(&e, t1).unwrap(), count);
    }

    #[test]
    fn ao_and_success_rates_match_counting(v in ious()) {
        let a = ao_sr(&v).unwrap();
        let n = v.len() as f64;
        prop_assert!((a.ao - v.iter().sum::<f64>() / n).abs() < 1e-12);
        prop_assert_eq!(a.sr50, v.iter().filter(|&&x| x > 0.5).count() as f64 / n);
        prop_assert_eq!(a.sr75, v.iter().filter(|&&x| x > 0.75).count() as f64 / n);
    }
}

#[test]
fn worked_examples() {
    assert_eq!(success_auc(&[1.0; 10]).unwrap(), 20.0 / 21.0);
    assert_eq!(success_auc(&[0.5]).unwrap(), 10.0 / 21.0);
    assert_eq!(precision_at(&[20.0, 20.000001], 20.0).unwrap(), 0.5);
    let half = vec![Rect::new(0.0, 0.0, 10.0, 10.0), Rect::new(0.0, 0.0, 10.0, 10.0)];
    let pred = vec![Rect::new(0.0, 0.0, 10.0, 10.0), Rect::new(100.0, 100.0, 10.0, 10.0)];
    let m = RunResult::new("s", pred, half, vec![]).unwrap().metrics().unwrap();
    assert_eq!(m.ao, 0.5);
    assert_eq!(m.precision, 0.5);
    assert_eq!(m.auc, 10.0 / 21.0);
}

#[test]
fn length_mismatch_names_both_counts() {
    let r = [Rect::new(0.0, 0.0, 1.0, 1.0)];
    let err = RunResult::new("seq", r.repeat(3), r.repeat(4), vec![]).unwrap_err().to_string();
    assert!(err.contains('3') && err.contains('4'), "{err}");
    assert!(RunResult::new("seq", vec![], vec![], vec![]).is_err());
    assert!(Metrics::mean(&[]).is_err());
}

#[test]
fn report_rows_and_attribute_slices() {
    let gt = vec![Rect::new(0.0, 0.0, 10.0, 10.0); 4];
    let off = vec![Rect::new(5.0, 0.0, 10.0, 10.0); 4];
    let runs = vec![
        RunResult::new("a", gt.clone(), gt.clone(), vec![Attribute::Occlusion]).unwrap(),
        RunResult::new("b", off, gt, vec![Attribute::Occlusion, Attribute::MotionBlur]).unwrap(),
    ];
    let mut rep = MetricReport::default();
    rep.add_config("cfg", &runs).unwrap();
    // 2 sequences + ALL + 2 attribute rows
    assert_eq!(rep.rows.len(), 5);
    let all = rep.aggregate("cfg").unwrap();
    assert!((all.ao - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(all.frames, 8);
    let blur = rep.rows.iter().find(|r| r.sequence == "attr:motion_blur").unwrap();
    assert!((blur.metrics.ao - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(rep.to_csv().lines().count(), 6);
    let (succ, prec) = mean_curves(&runs).unwrap();
    assert_eq!((succ.len(), prec.len()), (21, 51));
    assert_eq!(prec[5].1, 1.0);
    assert_eq!(prec[4].1, 0.5);
}

fn sequences() -> Vec<siamtrack_core::data::SequenceRecord> {
    (0..2)
        .map(|s| generate_sequence(&SynthSpec { length: 8, width: 96, height: 96, seed: s, ..SynthSpec::default() }).unwrap())
        .collect()
}

#[test]
fn evaluate_is_deterministic() {
    let m = Model::new(ModelConfig::desk(), 3).unwrap();
    let seqs = sequences();
    let a = evaluate(&m, &TrackerConfig::default(), &seqs).unwrap();
    let b = evaluate(&m, &TrackerConfig::default(), &seqs).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert_eq!(a[0].pred[0], seqs[0].gt[0]);
}

#[test]
fn identical_configs_give_identical_rows() {
    let m = Model::new(ModelConfig::desk(), 4).unwrap();
    let seqs = sequences();
    let entries = vec![
        AblationEntry { name: "x".into(), model: Ok(&m), tracker: TrackerConfig::default() },
        AblationEntry { name: "y".into(), model: Ok(&m), tracker: TrackerConfig::default() },
        AblationEntry { name: "z".into(), model: Ok(&m), tracker: TrackerConfig::default() },
    ];
    let t = ablation_report(&entries, &seqs).unwrap();
    assert_eq!(t.rows.len(), 3);
    assert_eq!(t.rows[0].metrics, t.rows[1].metrics);
    assert_eq!(t.deltas.len(), 3);
    assert!(t.deltas.iter().all(|d| d.auc == 0.0 && d.ao == 0.0 && d.precision == 0.0));
}

#[test]
fn failing_config_yields_failed_row() {
    let m = Model::new(ModelConfig::desk(), 4).unwrap();
    let seqs = sequences();
    let entries = vec![
        AblationEntry { name: "ok".into(), model: Ok(&m), tracker: TrackerConfig::default() },
        AblationEntry { name: "broken".into(), model: Err("checkpoint not found".into()), tracker: TrackerConfig::default() },
    ];
    let t = ablation_report(&entries, &seqs).unwrap();
    assert!(t.rows[0].metrics.is_some());
    assert!(t.rows[1].metrics.is_none());
    assert!(t.rows[1].error.as_deref().unwrap().contains("checkpoint not found"));
    assert!(t.deltas.is_empty());
    assert!(t.to_csv().contains("broken,failed"));
    assert!(ablation_report(&entries[..1], &seqs).is_err());
}

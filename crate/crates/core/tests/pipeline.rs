mod common;

use cindi_core::metrics::evaluate;
use cindi_core::pipeline::{run_cindi, run_downstream, DataSource, PipelineConfig};
use cindi_core::series::{synth_generate, AnomalyKind, AnomalySpec};

fn dataset(cfg: &PipelineConfig) -> (cindi_core::series::MultiSeries, cindi_core::series::SplitSpec) {
    cfg.dataset().unwrap()
}

#[test]
fn one_iteration_cap_gives_one_record() {
    let cfg = PipelineConfig {
        max_iterations: 1,
        ..common::small_config()
    };
    let (s, split) = dataset(&cfg);
    let out = run_cindi(&s, &split, &cfg).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.flagging.len(), 1);
}

#[test]
fn no_flags_means_one_iteration_and_untouched_data() {
    // No labelled training steps, and smoothing wide enough that no
    // smoothed score can clear mean + 2 std.
    let mut spec = common::small_synth();
    spec.anomalies.retain(|a| a.start >= 700);
    let cfg = PipelineConfig {
        data: DataSource::Synth(spec),
        smoothing: 401,
        ..common::small_config()
    };
    let (s, split) = dataset(&cfg);
    let out = run_cindi(&s, &split, &cfg).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].flagged, 0);
    assert!(out.converged);
    assert_eq!(out.improved, s);
}

#[test]
fn improved_values_trace_to_the_ledger() {
    let cfg = common::small_config();
    let (s, split) = dataset(&cfg);
    let out = run_cindi(&s, &split, &cfg).unwrap();
    assert!(out.records.len() <= cfg.max_iterations);
    let mut latest: Vec<Option<Vec<f64>>> = vec![None; s.len()];
    for rec in &out.records {
        let ranges: Vec<_> = rec.changed.iter().map(|c| c.range()).collect();
        for (i, a) in ranges.iter().enumerate() {
            assert!(ranges[i + 1..].iter().all(|b| !a.overlaps(b)), "overlapping ledger sections");
            assert!(split.train.covers(a));
        }
        assert_eq!(rec.flagged, rec.flagged_sections.iter().map(|r| r.len()).sum::<usize>());
        for c in &rec.changed {
            for (i, t) in c.range().iter().enumerate() {
                latest[t] = Some(c.new.row(i).to_vec());
            }
        }
    }
    for t in 0..s.len() {
        match &latest[t] {
            Some(v) => assert_eq!(out.improved.row(t), v.as_slice()),
            None => assert_eq!(out.improved.row(t), s.row(t)),
        }
    }
}

#[test]
fn loop_is_deterministic() {
    let cfg = common::small_config();
    let (s, split) = dataset(&cfg);
    let a = run_cindi(&s, &split, &cfg).unwrap();
    let b = run_cindi(&s, &split, &cfg).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.improved, b.improved);
    let da = run_downstream(&a.improved, &vec![false; s.len()], &split, &cfg).unwrap();
    let db = run_downstream(&b.improved, &vec![false; s.len()], &split, &cfg).unwrap();
    assert_eq!(da.report, db.report);
    assert_eq!(da.test_scores, db.test_scores);
}

#[test]
fn oracle_scores_give_perfect_metrics() {
    let mut spec = common::small_synth();
    spec.anomalies.push(AnomalySpec {
        kind: AnomalyKind::Spike,
        start: 1150,
        length: 3,
        channel: Some(1),
        magnitude: 1.0,
    });
    let s = synth_generate(&spec).unwrap();
    let test = common::small_split().test.unwrap();
    let labels = &s.labels()[test.start..test.end];
    let oracle: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let r = evaluate(&oracle, labels, 16).unwrap();
    assert_eq!((r.auc, r.vus, r.f1), (1.0, 1.0, 1.0));
}

#[test]
fn downstream_each_iteration_fills_records() {
    let cfg = PipelineConfig {
        max_iterations: 2,
        downstream_each_iteration: true,
        ..common::small_config()
    };
    let (s, split) = dataset(&cfg);
    let out = run_cindi(&s, &split, &cfg).unwrap();
    assert!(out.records.iter().all(|r| r.downstream.is_some()));
}

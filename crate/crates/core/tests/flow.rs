mod common;

use cindi_core::flow::{load_checkpoint, save_checkpoint, EncoderKind, FlowModel, ZChoice};
use cindi_core::ndcore::Matrix;
use cindi_core::series::WindowedSeries;
use cindi_core::train::{fit, TrainConfig};
use cindi_core::Exec;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn encoder() -> impl Strategy<Value = EncoderKind> {
    prop_oneof![Just(EncoderKind::Base), Just(EncoderKind::Mlp), Just(EncoderKind::Cnn)]
}

fn draws(seed: u64, n: usize) -> Vec<f64> {
    let mut r = common::rng(seed);
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_undoes_forward(dim in 2usize..5, k in 3usize..6, layers in 1usize..5, enc in encoder(), seed in any::<u64>()) {
        let m = common::perturbed(dim, k, layers, enc, seed, 0.3);
        let w = Matrix::from_vec(k, dim, draws(seed ^ 1, k * dim)).unwrap();
        let x = draws(seed ^ 2, dim);
        let (z, _) = m.forward(&x, &w).unwrap();
        let back = m.inverse(&z, &w).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn log_likelihood_is_base_density_plus_log_det(dim in 2usize..5, layers in 1usize..4, enc in encoder(), seed in any::<u64>()) {
        let m = common::perturbed(dim, 3, layers, enc, seed, 0.3);
        let w = Matrix::from_vec(3, dim, draws(seed ^ 3, 3 * dim)).unwrap();
        let x = draws(seed ^ 4, dim);
        let (z, ld) = m.forward(&x, &w).unwrap();
        let base: f64 = z.iter().map(|v| -0.5 * v * v - 0.5 * cindi_core::flow::LN_2PI).sum();
        let ll = m.log_likelihood(&x, &w).unwrap();
        prop_assert!((ll - (base + ld)).abs() < 1e-10);
    }
}

#[test]
fn identity_flow_samples_are_standard_normal() {
    let m = FlowModel::new(cindi_core::flow::FlowConfig::new(2, 4, 3, EncoderKind::Base), 0).unwrap();
    let w = Matrix::from_vec(4, 2, draws(5, 8)).unwrap();
    let xs: Vec<Vec<f64>> = (0..4000).map(|s| m.sample(&w, ZChoice::Random(s)).unwrap()).collect();
    for c in 0..2 {
        let mean = xs.iter().map(|x| x[c]).sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x[c] - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!(mean.abs() < 0.06, "mean {mean}");
        assert!((var - 1.0).abs() < 0.08, "var {var}");
    }
    assert_eq!(m.sample(&w, ZChoice::Mean).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn random_samples_concentrate_where_the_flow_puts_mass() {
    // Samples score higher under their own model than under a shifted one.
    let m = common::perturbed(3, 4, 3, EncoderKind::Mlp, 9, 0.4);
    let w = Matrix::from_vec(4, 3, draws(6, 12)).unwrap();
    let (mut own, mut shifted) = (0.0, 0.0);
    for s in 0..500 {
        let x = m.sample(&w, ZChoice::Random(s)).unwrap();
        own += m.log_likelihood(&x, &w).unwrap();
        let y: Vec<f64> = x.iter().map(|v| v + 1.5).collect();
        shifted += m.log_likelihood(&y, &w).unwrap();
    }
    assert!(own > shifted, "own {own} shifted {shifted}");
}

#[test]
fn training_is_identical_in_both_exec_modes() {
    let n = 400;
    let vals: Vec<f64> = (0..n * 2).map(|i| ((i / 2) as f64 * 0.3 + (i % 2) as f64).sin()).collect();
    let windows = WindowedSeries::full(Matrix::from_vec(n, 2, vals).unwrap(), 6).unwrap();
    let train = windows.filter(|t| t < 300);
    let val = windows.filter(|t| t >= 300);
    let run = |exec| {
        let m = common::perturbed(2, 6, 2, EncoderKind::Base, 1, 0.05);
        let cfg = TrainConfig {
            epochs_max: 3,
            patience: 3,
            batch_size: 150,
            exec,
            ..TrainConfig::default()
        };
        fit(m, &train, &val, &cfg).unwrap()
    };
    let (a, ra) = run(Exec::Sequential);
    let (b, rb) = run(Exec::Parallel);
    assert_eq!(a.params().values(), b.params().values());
    assert_eq!(ra, rb);
    assert!(ra.best_validation < ra.initial_validation());
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let m = common::perturbed(3, 5, 3, EncoderKind::Cnn, 4, 0.3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.json");
    save_checkpoint(&p, &m, None).unwrap();
    let (back, norm) = load_checkpoint(&p).unwrap();
    assert!(norm.is_none());
    let w = Matrix::from_vec(5, 3, draws(8, 15)).unwrap();
    let x = draws(9, 3);
    assert_eq!(m.forward(&x, &w).unwrap(), back.forward(&x, &w).unwrap());
}

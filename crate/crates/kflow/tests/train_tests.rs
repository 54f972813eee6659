use approx::assert_abs_diff_eq;
use kflow::dynamics::{simulate, MapSystem, System};
use kflow::embedding::delay_embed;
use kflow::kernels::{KernelSpec, Mode, Primitive, PrimitiveKind};
use kflow::metrics::rho;
use kflow::train::{
    history_to_csv, kernel_flow, numerical_gradient, HistoryEntry, Metric, ThetaClamps,
    TrainConfig,
};
use kflow::KflowError;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian(theta: &[f64]) -> KernelSpec {
    KernelSpec::new(
        Mode::Raw,
        vec![Primitive::new(PrimitiveKind::Gaussian)],
        theta.to_vec(),
    )
    .unwrap()
}

fn logistic_dataset(n: usize) -> kflow::embedding::DelayDataset {
    let t = simulate(&System::Map(MapSystem::Logistic), &[0.1], n).unwrap();
    delay_embed(&t, 1, &[0]).unwrap()
}

#[test]
fn gradient_of_quadratic_matches_analytic() {
    let (g, flags) = numerical_gradient(
        |th: &[f64]| Ok(th[0] * th[0] + 3.0 * th[1]),
        &[2.0, 4.0],
        1e-4,
    )
    .unwrap();
    assert_abs_diff_eq!(g[0], 4.0, epsilon = 1e-6);
    assert_abs_diff_eq!(g[1], 3.0, epsilon = 1e-6);
    assert!(flags.iter().all(|f| !f));
}

#[test]
fn gradient_of_constant_is_zero() {
    let (g, _) = numerical_gradient(|_| Ok(42.0), &[1.0, -2.0, 0.5], 1e-3).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn gradient_of_sine_at_origin() {
    let (g, _) = numerical_gradient(|th: &[f64]| Ok(th[0].sin()), &[0.0], 1e-4).unwrap();
    assert_abs_diff_eq!(g[0], 1.0, epsilon = 1e-8);
}

#[test]
fn failed_probe_slots_are_flagged() {
    // Slot 1 fails whenever it moves off its base value; slot 0 is clean.
    let base1 = 5.0;
    let loss = |th: &[f64]| {
        if (th[1] - base1).abs() > 1e-12 {
            Err(KflowError::NonFinite("slot 1 probe".into()))
        } else {
            Ok(th[0] * th[0])
        }
    };
    let (g, flags) = numerical_gradient(loss, &[3.0, base1], 1e-4).unwrap();
    assert_abs_diff_eq!(g[0], 6.0, epsilon = 1e-5);
    assert_eq!(g[1], 0.0);
    assert_eq!(flags, vec![false, true]);
}

#[test]
fn all_probes_failing_is_an_error() {
    let r = numerical_gradient(|_: &[f64]| Err::<f64, _>(KflowError::NonFinite("x".into())), &[1.0], 1e-4);
    assert!(matches!(r.unwrap_err(), KflowError::AllProbesFailed));
}

#[test]
fn gradient_rejects_bad_fd_step() {
    let r = numerical_gradient(|_: &[f64]| Ok(0.0), &[1.0], 0.0);
    assert!(r.is_err());
    let r2 = numerical_gradient(|_: &[f64]| Ok(0.0), &[1.0], 0.5);
    assert!(r2.is_err());
}

#[test]
fn finite_differences_agree_with_richardson_extrapolation() {
    // Gradient of rho in the kernel parameters on random nested instances.
    let spec = gaussian(&[1.0, 1.0]);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(6..=14);
        let xb = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-2.0..2.0));
        let yb = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
        let idx: Vec<usize> = (0..n / 2).collect();
        let xc = xb.select_rows(idx.iter());
        let yc = yb.select_rows(idx.iter());
        let theta = vec![rng.gen_range(0.5..1.5), rng.gen_range(0.7..1.6)];
        let loss = |th: &[f64]| rho(&spec, th, &xb, &yb, &xc, &yc, None);
        let (g1, _) = numerical_gradient(loss, &theta, 1e-3).unwrap();
        let (g2, _) = numerical_gradient(loss, &theta, 5e-4).unwrap();
        let (g, _) = numerical_gradient(loss, &theta, 1e-4).unwrap();
        for j in 0..2 {
            let richardson = (4.0 * g2[j] - g1[j]) / 3.0;
            let scale = richardson.abs().max(1.0);
            assert!(
                (g[j] - richardson).abs() <= 1e-4 * scale,
                "seed {seed} slot {j}: fd {} vs extrapolated {richardson}",
                g[j]
            );
        }
    }
}

#[test]
fn zero_iterations_returns_initial_kernels() {
    let d = logistic_dataset(60);
    let k = gaussian(&[1.0, 1.0]);
    let out = kernel_flow(&d, &[k.clone()], &TrainConfig {
        iterations: 0,
        ..TrainConfig::default()
    })
    .unwrap();
    assert_eq!(out.kernels[0].theta, k.theta);
    assert!(out.history.is_empty());
    assert_eq!(out.skipped, 0);
    assert!(out.last_batch.is_none());
}

#[test]
fn training_is_bit_reproducible() {
    let d = logistic_dataset(80);
    let cfg = TrainConfig {
        iterations: 8,
        step_size: 0.05,
        batch_size: Some(40),
        seed: 12,
        ..TrainConfig::default()
    };
    let a = kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &cfg).unwrap();
    let b = kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &cfg).unwrap();
    for (ta, tb) in a.kernels[0].theta.iter().zip(&b.kernels[0].theta) {
        assert_eq!(ta.to_bits(), tb.to_bits());
    }
    let la: Vec<Option<f64>> = a.history.iter().map(|h| h.loss).collect();
    let lb: Vec<Option<f64>> = b.history.iter().map(|h| h.loss).collect();
    assert_eq!(la, lb);
    assert_eq!(a.last_batch, b.last_batch);
}

#[test]
fn different_seeds_draw_different_batches() {
    let d = logistic_dataset(80);
    let mk = |seed| TrainConfig {
        iterations: 2,
        batch_size: Some(30),
        seed,
        ..TrainConfig::default()
    };
    let a = kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &mk(1)).unwrap();
    let b = kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &mk(2)).unwrap();
    assert_ne!(a.last_batch, b.last_batch);
}

#[test]
fn training_reduces_rho_on_logistic_data() {
    let d = logistic_dataset(120);
    let cfg = TrainConfig {
        iterations: 40,
        step_size: 0.1,
        seed: 0,
        ..TrainConfig::default()
    };
    let out = kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &cfg).unwrap();
    let first = out.history.iter().find_map(|h| h.loss).unwrap();
    let last = out.history.iter().rev().find_map(|h| h.loss).unwrap();
    assert!(
        last <= first,
        "full-batch rho did not improve: {first} -> {last}"
    );
}

#[test]
fn clamps_bound_every_slot() {
    let d = logistic_dataset(80);
    let clamps = ThetaClamps {
        lo: vec![0.5, 0.8],
        hi: vec![1.5, 1.2],
    };
    let cfg = TrainConfig {
        iterations: 15,
        step_size: 0.5,
        clamps: Some(clamps.clone()),
        ..TrainConfig::default()
    };
    let out = kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &cfg).unwrap();
    for (j, v) in out.kernels[0].theta.iter().enumerate() {
        assert!(
            (clamps.lo[j]..=clamps.hi[j]).contains(v),
            "slot {j} escaped clamps: {v}"
        );
    }
}

#[test]
fn clamp_length_must_match_arity() {
    let d = logistic_dataset(40);
    let cfg = TrainConfig {
        iterations: 1,
        clamps: Some(ThetaClamps {
            lo: vec![0.0],
            hi: vec![1.0],
        }),
        ..TrainConfig::default()
    };
    assert!(kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &cfg).is_err());
}

#[test]
fn renorm_projects_amplitudes_to_unit_norm() {
    let d = logistic_dataset(80);
    let spec = KernelSpec::new(
        Mode::SquaredAmplitudes,
        vec![
            Primitive::new(PrimitiveKind::Gaussian),
            Primitive::new(PrimitiveKind::Laplace),
        ],
        vec![0.8, 1.0, 0.6, 1.0],
    )
    .unwrap();
    let cfg = TrainConfig {
        iterations: 5,
        step_size: 0.05,
        renorm_amplitudes: true,
        ..TrainConfig::default()
    };
    let out = kernel_flow(&d, &[spec], &cfg).unwrap();
    let th = &out.kernels[0].theta;
    let amp2 = th[0] * th[0] + th[2] * th[2];
    assert_abs_diff_eq!(amp2, 1.0, epsilon = 1e-12);
}

#[test]
fn mmd_training_runs_and_records_history() {
    let d = logistic_dataset(60);
    let cfg = TrainConfig {
        metric: Metric::RhoMmd,
        iterations: 4,
        step_size: 0.05,
        mmd_sample_size: 10,
        ..TrainConfig::default()
    };
    let out = kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &cfg).unwrap();
    assert_eq!(out.history.len(), 4);
    for h in &out.history {
        let l = h.loss.expect("mmd iteration should not skip");
        assert!(l.is_finite() && l >= -1e-12);
    }
}

#[test]
fn mmd_sample_size_is_validated() {
    let d = logistic_dataset(30);
    let cfg = TrainConfig {
        metric: Metric::RhoMmd,
        iterations: 1,
        mmd_sample_size: 20,
        ..TrainConfig::default()
    };
    assert!(matches!(
        kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &cfg).unwrap_err(),
        KflowError::SampleTooLarge { .. }
    ));
}

#[test]
fn rho_l_training_smoke() {
    let d = logistic_dataset(60);
    let lyap = kflow::metrics::LyapunovConfig {
        rollout_len: 200,
        transient_skip: 40,
        ..kflow::metrics::LyapunovConfig::default()
    };
    let cfg = TrainConfig {
        metric: Metric::RhoL,
        iterations: 2,
        step_size: 0.05,
        lyap,
        ..TrainConfig::default()
    };
    let out = kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &cfg).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.history.iter().any(|h| h.loss.is_some()));
}

#[test]
fn stalled_training_is_reported() {
    // Duplicate rows make r = 0 pairs; a negative-exponent power kernel is
    // then non-evaluable, so every loss and probe fails.
    let s = kflow::dynamics::TrajectoryRecord::new(
        vec![vec![0.3], vec![0.3], vec![0.3], vec![0.3], vec![0.3]],
        1.0,
        "const",
    );
    let d = delay_embed(&s, 1, &[0]).unwrap();
    let spec = KernelSpec::new(
        Mode::Raw,
        vec![Primitive::new(PrimitiveKind::PowerRational)],
        vec![0.0, 1.0, -1.0, 1.0],
    )
    .unwrap();
    let cfg = TrainConfig {
        iterations: 6,
        ..TrainConfig::default()
    };
    let err = kernel_flow(&d, &[spec], &cfg).unwrap_err();
    assert!(
        matches!(err, KflowError::TrainingStalled(_)),
        "got {err:?}"
    );
}

#[test]
fn fd_step_bounds_are_enforced() {
    let d = logistic_dataset(40);
    for bad in [0.0, -1e-4, 2e-2] {
        let cfg = TrainConfig {
            iterations: 1,
            fd_step: bad,
            ..TrainConfig::default()
        };
        assert!(kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &cfg).is_err());
    }
}

#[test]
fn snapshots_record_theta_at_requested_cadence() {
    let d = logistic_dataset(60);
    let cfg = TrainConfig {
        iterations: 6,
        snapshot_every: 2,
        ..TrainConfig::default()
    };
    let out = kernel_flow(&d, &[gaussian(&[1.0, 1.0])], &cfg).unwrap();
    for h in &out.history {
        let has = h.theta_snapshot.is_some();
        assert_eq!(has, (h.iteration + 1) % 2 == 0, "iteration {}", h.iteration);
        if let Some(snap) = &h.theta_snapshot {
            assert_eq!(snap.len(), 1);
            assert_eq!(snap[0].len(), 2);
        }
    }
}

#[test]
fn history_csv_blanks_skipped_iterations() {
    let hist = vec![
        HistoryEntry {
            iteration: 0,
            loss: Some(0.5),
            batch_seed: 1,
            theta_snapshot: None,
        },
        HistoryEntry {
            iteration: 1,
            loss: None,
            batch_seed: 2,
            theta_snapshot: None,
        },
    ];
    let text = history_to_csv(&hist);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iter,loss");
    assert_eq!(lines[1], "0,0.5");
    assert_eq!(lines[2], "1,");
}

#[test]
fn kernel_count_must_match_targets() {
    let d = logistic_dataset(40);
    let cfg = TrainConfig {
        iterations: 1,
        ..TrainConfig::default()
    };
    let err = kernel_flow(&d, &[gaussian(&[1.0, 1.0]), gaussian(&[1.0, 1.0])], &cfg).unwrap_err();
    assert!(matches!(err, KflowError::ParameterArity { .. }));
}

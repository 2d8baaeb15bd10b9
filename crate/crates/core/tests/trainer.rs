use std::sync::OnceLock;

use adatok_core::model::{Model, TOKENS};
use adatok_core::source::{sample_signal, sample_signal_with_segments, ToySignal};
use adatok_core::trainer::*;
use adatok_core::{Error, FsqConfig, TokenMask};

fn quick(mode: RouterMode, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seed,
        router_mode: mode,
        ..Default::default()
    }
}

struct Trained {
    out: TrainOutput,
    model: Model,
    held: Vec<ToySignal>,
}

fn elbo_model() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let out = train_synthetic(&quick(RouterMode::FixedBeta, 4000, 7)).unwrap();
        let model = Model::new(out.params.clone(), FsqConfig::default_video()).unwrap();
        Trained {
            out,
            model,
            held: held_out_set(400, 0.01),
        }
    })
}

#[test]
fn fixed_seed_gives_identical_logs() {
    let cfg = quick(RouterMode::FixedBeta, 120, 3);
    let a = train_synthetic(&cfg).unwrap();
    let b = train_synthetic(&cfg).unwrap();
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.params.to_flat(), b.params.to_flat());
    let c = train_synthetic(&quick(RouterMode::FixedBeta, 120, 4)).unwrap();
    assert_ne!(a.logs, c.logs);
}

#[test]
fn uniform_baseline_samples_every_length_evenly() {
    let cfg = TrainConfig {
        batch: 1,
        ..quick(RouterMode::UniformBaseline, 8000, 1)
    };
    let out = train_synthetic(&cfg).unwrap();
    let mut counts = [0usize; TOKENS + 1];
    for row in &out.logs[cfg.phase1_steps()..] {
        assert_eq!(row.n_x.fract(), 0.0);
        counts[row.n_x as usize] += 1;
    }
    assert_eq!(counts[0], 0);
    let total: usize = counts.iter().sum();
    let expected = total as f64 / TOKENS as f64;
    // Chi-square with 15 degrees of freedom; 37.7 is the 0.999 quantile.
    let chi2: f64 = counts[1..]
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    assert!(chi2 < 37.7, "{counts:?}");
}

#[test]
fn full_length_training_lowers_smoothed_error() {
    let out = train_synthetic(&quick(RouterMode::FullLength, 3000, 2)).unwrap();
    assert!(out.logs.iter().all(|r| r.n_x == TOKENS as f64));
    // Losses are measured on fresh samples before each update.
    let means: Vec<f64> = out
        .logs
        .chunks(100)
        .map(|w| w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64)
        .collect();
    let firsts: Vec<f64> = means.iter().step_by(5).copied().collect();
    assert!(firsts.windows(2).all(|w| w[1] < w[0]), "{firsts:?}");
}

#[test]
fn phase_one_keeps_the_full_mask_identity() {
    let cfg = TrainConfig {
        phase1_fraction: 1.0,
        ..quick(RouterMode::FixedBeta, 300, 5)
    };
    let out = train_synthetic(&cfg).unwrap();
    assert!(out.logs.iter().all(|r| r.n_x == TOKENS as f64));
    let model = Model::new(out.params, FsqConfig::default_video()).unwrap();
    for seed in 0..20 {
        let x = sample_signal(seed, 0.01).values;
        let full = model.forward_full(&x).unwrap();
        let adaptive = model
            .forward_adaptive(&x, &TokenMask::full(TOKENS))
            .unwrap();
        assert_eq!(full.recon, adaptive.recon);
    }
}

#[test]
fn ema_stays_positive_and_router_tracks_beta() {
    let t = elbo_model();
    assert!(t.out.logs.iter().all(|r| r.ema > 0.0 && r.ema.is_finite()));
    let tail = &t.out.logs[t.out.logs.len() * 9 / 10..];
    let mean_n = tail.iter().map(|r| r.n_x).sum::<f64>() / tail.len() as f64;
    assert!((mean_n - 8.0).abs() / 8.0 < 0.05, "{mean_n}");
}

#[test]
fn trained_router_prefers_complex_signals() {
    let t = elbo_model();
    let rows = evaluate(&t.model, &t.out.router, &t.held, &[0.5625]).unwrap();
    assert!(rows[0].spearman > 0.0, "{}", rows[0].spearman);
}

#[test]
fn adaptive_loss_falls_with_more_tokens() {
    let t = elbo_model();
    let curves = loss_curves(&t.model, &t.held, &ORACLE_GRID).unwrap();
    let mean: Vec<f64> = (0..ORACLE_GRID.len())
        .map(|g| curves.iter().map(|c| c[g]).sum::<f64>() / curves.len() as f64)
        .collect();
    assert!(mean.windows(2).all(|w| w[1] <= w[0]), "{mean:?}");
}

#[test]
fn realized_length_matches_beta_when_clamps_are_rare() {
    let t = elbo_model();
    let mean = mean_full_nll(&t.model, &t.held).unwrap();
    for beta in [3.0, 4.0] {
        let row = evaluate_beta(&t.model, &t.out.router, &t.held, beta, mean, beta).unwrap();
        assert!(row.clamp_fraction < 0.025, "{}", row.clamp_fraction);
        assert!(
            (row.mean_n_x - beta).abs() / beta < 0.02,
            "{beta} {}",
            row.mean_n_x
        );
    }
}

#[test]
fn beta_at_n_max_saturates_above_average_signals() {
    let t = elbo_model();
    let set = &t.held[..100];
    // BPP16 of 17/16 maps to beta = n_max.
    let rows = evaluate(&t.model, &t.out.router, set, &[17.0 / 16.0]).unwrap();
    assert_eq!(rows[0].beta, TOKENS as f64);
    let mean = mean_full_nll(&t.model, set).unwrap();
    for (s, &n) in set.iter().zip(&rows[0].n_x) {
        if t.model.forward_full(&s.values).unwrap().nll_proxy >= mean {
            assert_eq!(n, TOKENS);
        }
    }
    let row = evaluate_beta(&t.model, &t.out.router, &t.held, 1e6, mean, 0.0).unwrap();
    assert_eq!(row.mean_n_x, TOKENS as f64);
}

#[test]
fn calibrated_beta_hits_target_mean() {
    let t = elbo_model();
    let beta = calibrate_beta(&t.model, &t.out.router, &t.held, 8.0).unwrap();
    let mean = mean_full_nll(&t.model, &t.held).unwrap();
    let row = evaluate_beta(&t.model, &t.out.router, &t.held, beta, mean, beta).unwrap();
    assert!(
        row.mean_n_x <= 8.0 && row.mean_n_x > 7.9,
        "{}",
        row.mean_n_x
    );
}

#[test]
fn search_baseline_probes_log2_lengths() {
    let t = elbo_model();
    let before = t.model.nfe.snapshot();
    let row = evaluate_search(&t.model, &t.out.router, &t.held[..40], 0.05).unwrap();
    assert_eq!(row.search_probes, 4.0);
    let after = t.model.nfe.snapshot();
    assert!(after.decoder > before.decoder);
}

#[test]
fn empty_eval_set_is_rejected() {
    let t = elbo_model();
    assert!(matches!(
        evaluate(&t.model, &t.out.router, &[], &[0.5]),
        Err(Error::Validation(_))
    ));
    assert!(evaluate_fixed(&t.model, &[], 8).is_err());
    assert!(loss_curves(&t.model, &[], &ORACLE_GRID).is_err());
}

#[test]
fn divergence_aborts() {
    let cfg = TrainConfig {
        lr_start: 1e3,
        lr_end: 1e3,
        ..quick(RouterMode::FullLength, 500, 0)
    };
    assert!(matches!(train_synthetic(&cfg), Err(Error::Diverged { .. })));
    let cfg = TrainConfig {
        divergence_loss: 1e-12,
        ..quick(RouterMode::FullLength, 10, 0)
    };
    assert!(matches!(
        train_synthetic(&cfg),
        Err(Error::Diverged { step: 0, .. })
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig {
            steps: 0,
            ..Default::default()
        },
        TrainConfig {
            lr_start: 1e-3,
            lr_end: 1e-2,
            ..Default::default()
        },
        TrainConfig {
            lr_end: 0.0,
            ..Default::default()
        },
        TrainConfig {
            phase1_fraction: 1.5,
            ..Default::default()
        },
        TrainConfig {
            beta: 0.0,
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
        assert!(train_synthetic(&cfg).is_err());
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
    let cfg: TrainConfig =
        serde_json::from_str(r#"{"steps": 3, "router_mode": "uniform_baseline"}"#).unwrap();
    assert_eq!(cfg.steps, 3);
    assert_eq!(cfg.router_mode, RouterMode::UniformBaseline);
}

#[test]
fn short_stream_is_an_error() {
    let data = (0..10).map(|s| sample_signal(s, 0.01));
    let cfg = quick(RouterMode::FixedBeta, 5, 0);
    assert!(train(&cfg, adatok_core::ModelParams::init(0), data).is_err());
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = TrainConfig {
        steps: 101,
        lr_start: 1e-2,
        lr_end: 1e-4,
        ..Default::default()
    };
    assert_eq!(cfg.lr_at(0), 1e-2);
    assert!((cfg.lr_at(100) - 1e-4).abs() < 1e-15);
    assert!((cfg.lr_at(50) - 0.5 * (1e-2 + 1e-4)).abs() < 1e-12);
}

#[test]
fn log_csv_has_expected_columns() {
    let out = train_synthetic(&quick(RouterMode::FixedBeta, 4, 0)).unwrap();
    let mut buf = Vec::new();
    write_log_csv(&mut buf, &out.logs).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss,n_x,ema,lr"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn constant_signals_are_reconstructed_below_the_noise_floor() {
    let sigma = 0.1;
    let stream = (0u64..).map(move |s| sample_signal_with_segments(s, 1, sigma).unwrap());
    let cfg = quick(RouterMode::FullLength, 3000, 0);
    let out = train(&cfg, adatok_core::ModelParams::init(0), stream).unwrap();
    let model = Model::new(out.params, FsqConfig::default_video()).unwrap();
    let (mut nll, mut floor) = (0.0, 0.0);
    for s in 0..200u64 {
        let seed = HELD_OUT_SEED_BASE + s;
        let noisy = sample_signal_with_segments(seed, 1, sigma).unwrap().values;
        let clean = sample_signal_with_segments(seed, 1, 0.0).unwrap().values;
        nll += model.forward_full(&noisy).unwrap().nll_proxy;
        floor += noisy
            .iter()
            .zip(&clean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    assert!(nll < floor, "nll {nll} floor {floor}");
}

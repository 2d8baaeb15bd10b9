use adatok_core::model::*;
use adatok_core::router::RouterState;
use adatok_core::source::{sample_signal, SIGNAL_LEN};
use adatok_core::{Error, FsqConfig, TokenMask};
use proptest::prelude::*;

fn signal(seed: u64) -> Vec<f64> {
    sample_signal(seed, 0.01).values
}

fn perturbed(seed: u64, scale: f64) -> Model {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(seed);
    for f in p.fields_mut() {
        f.iter_mut()
            .for_each(|w| *w += scale * rng.random_range(-1.0..1.0));
    }
    Model::new(p, FsqConfig::default_video()).unwrap()
}

#[test]
fn zero_weights_give_zero_latents() {
    let model = Model::new(ModelParams::zeros(), FsqConfig::default_video()).unwrap();
    let h = model.encode(&signal(3)).unwrap();
    assert_eq!(h.len(), TOKENS);
    assert!(h.iter().flatten().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn latents_stay_inside_open_unit_interval(seed in 0u64..1000, values in prop::collection::vec(-1.0f64..=1.0, SIGNAL_LEN)) {
        let model = Model::init(seed);
        let h = model.encode(&values).unwrap();
        prop_assert!(h.iter().flatten().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn adaptive_loss_is_nonnegative(seed in 0u64..200, keep in 1usize..=TOKENS) {
        let model = perturbed(seed, 0.3);
        let mask = TokenMask::from_positions(TOKENS, &(0..keep).collect::<Vec<_>>()).unwrap();
        let out = model.forward_adaptive(&signal(seed), &mask).unwrap();
        prop_assert!(out.loss >= 0.0);
    }

    #[test]
    fn full_mask_matches_fixed_pipeline_at_init(seed in 0u64..200) {
        let model = Model::init(seed);
        let x = signal(seed + 1);
        let full = model.forward_full(&x).unwrap();
        let adaptive = model.forward_adaptive(&x, &TokenMask::full(TOKENS)).unwrap();
        prop_assert_eq!(full.recon, adaptive.recon);
    }
}

#[test]
fn encoder_jacobian_matches_central_differences() {
    let model = perturbed(11, 0.2);
    let x = signal(5);
    let h = model.encode(&x).unwrap();
    let w = &model.params.enc_w;
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..TOKENS {
        for i in 0..PATCH {
            let j = t * PATCH + i;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let hp = model.encode(&xp).unwrap();
            let hm = model.encode(&xm).unwrap();
            for k in 0..LATENT {
                let fd = (hp[t][k] - hm[t][k]) / (2.0 * step);
                let analytic = (1.0 - h[t][k] * h[t][k]) * w[k * PATCH + i];
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
                worst = worst.max(rel);
                // Other tokens do not depend on this patch.
                let other = (t + 1) % TOKENS;
                assert_eq!(hp[other][k], h[other][k]);
            }
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn forward_full_contract() {
    let model = Model::init(2);
    let x = signal(9);
    let before = model.nfe.snapshot();
    let out = model.forward_full(&x).unwrap();
    let after = model.nfe.snapshot();
    assert_eq!(out.recon.len(), SIGNAL_LEN);
    assert_eq!(out.nll_proxy, out.per_element_sq_errors.iter().sum::<f64>());
    assert_eq!(after.encoder - before.encoder, 1);
    assert_eq!(after.decoder - before.decoder, 1);
    assert_eq!(after.compressor, before.compressor);
}

#[test]
fn adaptive_reuse_costs_one_extra_decoder_pass() {
    let model = perturbed(4, 0.2);
    let router = RouterState::new(8.0, TOKENS).unwrap();
    let tok = AdaptiveTokenizer::new(&model, &router);
    model.nfe.reset();
    let (stream, out) = tok.tokenize(&signal(1), 8.0, Some(1.0)).unwrap();
    let n = model.nfe.snapshot();
    assert_eq!((n.encoder, n.decoder), (1, 2));
    assert_eq!(stream.codes.len(), stream.mask.popcount());
    let back = tok.detokenize(&stream).unwrap();
    assert_eq!(back, out.recon);
}

#[test]
fn detokenize_rejects_foreign_config() {
    let model = Model::init(0);
    let router = RouterState::new(8.0, TOKENS).unwrap();
    let tok = AdaptiveTokenizer::new(&model, &router);
    let (mut stream, _) = tok.tokenize(&signal(0), 8.0, Some(1.0)).unwrap();
    stream.config = FsqConfig::new(vec![8, 8, 8, 5, 5, 4]).unwrap();
    assert!(matches!(tok.detokenize(&stream), Err(Error::Version(_))));
}

#[test]
fn mask_length_mismatch_is_rejected() {
    let model = Model::init(0);
    let err = model
        .forward_adaptive(&signal(0), &TokenMask::full(8))
        .unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    let bad_len = vec![0.0; 10];
    assert!(model.forward_full(&bad_len).is_err());
}

#[test]
fn forward_is_deterministic() {
    let model = perturbed(8, 0.3);
    let mask = TokenMask::from_positions(TOKENS, &[0, 3, 7, 12]).unwrap();
    let a = model.forward_adaptive(&signal(4), &mask).unwrap();
    let b = model.forward_adaptive(&signal(4), &mask).unwrap();
    assert!(a
        .recon
        .iter()
        .zip(&b.recon)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn exact_reconstruction_gives_zero_gradients() {
    let model = Model::new(ModelParams::zeros(), FsqConfig::default_video()).unwrap();
    let x = vec![0.0; SIGNAL_LEN];
    let full = model.forward_full(&x).unwrap();
    assert_eq!(full.nll_proxy, 0.0);
    let mask = TokenMask::from_positions(TOKENS, &[1, 5]).unwrap();
    let adaptive = model.forward_adaptive_reusing(&full.trace, &mask).unwrap();
    assert_eq!(adaptive.loss, 0.0);
    for tr in [&full.trace, &adaptive.trace] {
        let g = model.backward(tr, 1.0).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn backward_is_linear_in_scale_and_accumulates() {
    let model = perturbed(6, 0.3);
    let mask = TokenMask::from_positions(TOKENS, &[2, 9, 10]).unwrap();
    let full = model.forward_full(&signal(6)).unwrap();
    let adaptive = model.forward_adaptive_reusing(&full.trace, &mask).unwrap();
    let one = model.backward(&adaptive.trace, 1.0).unwrap().to_flat();
    let two = model.backward(&adaptive.trace, 2.0).unwrap().to_flat();
    assert!(one
        .iter()
        .zip(&two)
        .all(|(a, b)| (2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0)));

    let mut sum = model.backward(&full.trace, 1.0).unwrap();
    model.backward_into(&adaptive.trace, 1.0, &mut sum).unwrap();
    let f = model.backward(&full.trace, 1.0).unwrap().to_flat();
    for ((s, a), b) in sum.to_flat().iter().zip(&f).zip(&one) {
        assert!((s - (a + b)).abs() <= 1e-12 * s.abs().max(1.0));
    }
}

#[test]
fn stale_traces_are_rejected() {
    let mut model = Model::init(1);
    let full = model.forward_full(&signal(2)).unwrap();
    model.params.dec_b[0] += 1e-3;
    assert!(matches!(
        model.backward(&full.trace, 1.0),
        Err(Error::StaleTrace)
    ));
    let mask = TokenMask::full(TOKENS);
    assert!(matches!(
        model.forward_adaptive_reusing(&full.trace, &mask),
        Err(Error::StaleTrace)
    ));
}

#[test]
fn grad_check_linear_subnetwork_is_exact() {
    let opts = GradCheckOptions {
        subset: ParamSubset::DecoderAffine,
        ..Default::default()
    };
    let r = grad_check_with(0.5, &[0, 1, 2], opts).unwrap();
    assert!(r.compared > 0);
    assert!(r.max_rel_err < 1e-8, "{r:?}");
}

#[test]
fn grad_check_full_network() {
    let seeds: Vec<u64> = (0..10).collect();
    let r = grad_check(0.5, &seeds).unwrap();
    assert!(r.compared > r.skipped);
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn grad_check_step_sweep_has_interior_minimum() {
    let seeds = [0, 1, 2];
    let med: Vec<f64> = [1e-4, 1e-5, 1e-6]
        .iter()
        .map(|&step| {
            grad_check_with(
                0.5,
                &seeds,
                GradCheckOptions {
                    step,
                    ..Default::default()
                },
            )
            .unwrap()
            .median_rel_err
        })
        .collect();
    assert!(med[1] < med[0] && med[1] < med[2], "{med:?}");
}

#[test]
fn checkpoint_roundtrip_and_version_errors() {
    let model = perturbed(3, 0.1);
    let mut router = RouterState::new(6.0, TOKENS).unwrap();
    router.update_ema(0.4).unwrap();
    let ckpt = Checkpoint {
        params: model.params.clone(),
        fsq: model.fsq.clone(),
        router,
    };
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..4], &CHECKPOINT_MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.itkm");
    write_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), ckpt);

    let mut wrong = bytes.clone();
    wrong[4] = CHECKPOINT_VERSION + 1;
    assert!(matches!(
        Checkpoint::from_bytes(&wrong),
        Err(Error::Version(_))
    ));

    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[9..9 + header_len].to_vec()).unwrap();
    let edited = header.replace("\"hidden\":32", "\"hidden\":64");
    assert_ne!(edited, header);
    let mut reshaped = bytes[..5].to_vec();
    reshaped.extend_from_slice(&(edited.len() as u32).to_le_bytes());
    reshaped.extend_from_slice(edited.as_bytes());
    reshaped.extend_from_slice(&bytes[9 + header_len..]);
    assert!(matches!(
        Checkpoint::from_bytes(&reshaped),
        Err(Error::Version(_))
    ));

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    assert!(Checkpoint::from_bytes(b"NOPE").is_err());
}

#[test]
fn model_rejects_mismatched_fsq_and_nonfinite_params() {
    assert!(Model::new(ModelParams::zeros(), FsqConfig::new(vec![8, 8, 8]).unwrap()).is_err());
    let mut p = ModelParams::zeros();
    p.fill[0] = f64::NAN;
    assert!(Model::new(p, FsqConfig::default_video()).is_err());
}

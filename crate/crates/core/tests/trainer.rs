use dualsep::dataset::{generate_samples, DatasetKind, Split};
use dualsep::rng::RngStream;
use dualsep::trainer::{
    train, train_step, validation_psnr, AblationConfig, AblationRow, AblationTable, Checkpoint, TrainConfig,
    TrainEvent, TrainState,
};
use dualsep::{Error, Tensor};

/// Small but complete configuration: 16x16 images, 10 diffusion steps.
fn tiny() -> TrainConfig {
    TrainConfig {
        train_count: 24,
        test_count: 4,
        size: 16,
        steps: 10,
        batch_size: 4,
        max_iterations: 6,
        val_interval: 3,
        val_count: 2,
        eval_count: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn quiet() -> impl FnMut(&TrainEvent) {
    |_| {}
}

#[test]
fn disabled_suppression_freezes_wfens() {
    let cfg = TrainConfig { wsm_enabled: false, val_count: 0, ..tiny() };
    let sched = cfg.schedule().unwrap();
    let data = generate_samples(&cfg.dataset(), Split::Train, 4).unwrap();
    let batch: Vec<_> = data.iter().collect();
    let mut state = TrainState::new(&cfg).unwrap();
    let before = state.models.clone();
    for it in 0..3 {
        let r = train_step(&batch, &mut state, &RngStream::new(1, 2).substream(it), &cfg, &sched).unwrap();
        assert_eq!(r.l_wfen, 2.0);
        assert_eq!(r.clamp_activations, 0);
    }
    assert_eq!(state.models.wfen1, before.wfen1);
    assert_eq!(state.models.wfen2, before.wfen2);
    assert_ne!(state.models.eps1, before.eps1);

    let out = train(&cfg, &mut quiet()).unwrap();
    let init = Checkpoint::capture(&cfg, &TrainState::new(&cfg).unwrap());
    assert_eq!(out.checkpoint.models.wfen1, init.models.wfen1);
    assert_eq!(out.checkpoint.models.wfen2, init.models.wfen2);
}

#[test]
fn overfits_one_batch() {
    // 8x8 images; lr raised so the sanity run is short
    let cfg = TrainConfig { size: 8, lr: 2e-3, steps: 50, ..tiny() };
    let sched = cfg.schedule().unwrap();
    let data = generate_samples(&cfg.dataset(), Split::Train, 4).unwrap();
    let batch: Vec<_> = data.iter().collect();
    let probe = RngStream::new(99, 0);
    let frozen = TrainConfig { lr: 0.0, ..cfg.clone() };
    let measure = |s: &TrainState| {
        (0..8u64)
            .map(|k| train_step(&batch, &mut s.clone(), &probe.substream(k), &frozen, &sched).unwrap().l_diff)
            .sum::<f64>()
    };
    let mut state = TrainState::new(&cfg).unwrap();
    let initial = measure(&state);
    for it in 0..200 {
        train_step(&batch, &mut state, &RngStream::new(3, 2).substream(it), &cfg, &sched).unwrap();
    }
    let fin = measure(&state);
    assert!(fin < 0.5 * initial, "l_diff {initial} -> {fin}");
}

#[test]
fn identical_runs_are_bit_identical() {
    let cfg = tiny();
    let a = train(&cfg, &mut quiet()).unwrap();
    let b = train(&cfg, &mut quiet()).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.validation, b.validation);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let c = train(&TrainConfig { seed: 6, ..cfg }, &mut quiet()).unwrap();
    assert_ne!(a.losses, c.losses);
}

#[test]
fn frozen_training_stops_after_two_rounds() {
    let cfg = TrainConfig { lr: 0.0, patience: 1, val_interval: 2, max_iterations: 100, ..tiny() };
    let mut log = Vec::new();
    let out = train(&cfg, &mut |e| log.push(e.log_line())).unwrap();
    assert_eq!(out.validation.len(), 2);
    assert_eq!(out.validation[0].1, out.validation[1].1);
    assert!(out.stopped_early);
    assert_eq!(out.iterations_run, 4);
    assert!(log.last().unwrap().starts_with("early-stop 4"));
    assert_eq!(out.checkpoint.iteration, 2);
    assert_eq!(out.checkpoint.scalar("val.best_psnr"), Some(out.validation[0].1));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny();
    let out = train(&cfg, &mut quiet()).unwrap();
    let ck = out.checkpoint;
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, false).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(validation_psnr(&back).unwrap(), validation_psnr(&ck).unwrap());
    assert_eq!(validation_psnr(&back).unwrap(), ck.scalar("val.best_psnr").unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path, false).unwrap(), ck);

    let other = TrainConfig { gamma: 5.0, ..cfg.clone() };
    assert!(matches!(ck.check_config(&other, false), Err(Error::ConfigMismatch { .. })));
    ck.check_config(&other, true).unwrap();
    ck.check_config(&cfg, false).unwrap();

    // a tampered hash is refused unless forced
    let mut bad = bytes.clone();
    bad[8] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bad, false), Err(Error::ConfigMismatch { .. })));
    assert!(Checkpoint::from_bytes(&bad, true).is_ok());
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], false), Err(Error::Parse { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"nope", false), Err(Error::Parse { .. })));
}

#[test]
fn non_finite_batch_is_divergence() {
    let cfg = TrainConfig { size: 8, ..tiny() };
    let sched = cfg.schedule().unwrap();
    let mut data = generate_samples(&cfg.dataset(), Split::Train, 2).unwrap();
    data[1].mixture = Tensor::full(data[1].mixture.shape(), f64::NAN);
    let batch: Vec<_> = data.iter().collect();
    let mut state = TrainState::new(&cfg).unwrap();
    let before = state.clone();
    let err = train_step(&batch, &mut state, &RngStream::new(0, 2), &cfg, &sched).unwrap_err();
    assert!(matches!(err, Error::Divergence { iteration: 0, .. }), "{err}");
    assert_eq!(state, before);
    assert!(train_step(&[], &mut state, &RngStream::new(0, 2), &cfg, &sched).is_err());
}

#[test]
fn config_text_round_trip_and_validation() {
    let cfg = TrainConfig { kind: DatasetKind::SnowToy, gamma: 7.0, ..TrainConfig::default() };
    let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_ne!(TrainConfig::default().hash(), cfg.hash());
    assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::default());
    for bad in ["lr_rate = 1.0", "gamma = 0.0", "size = 24", "alpha_index = 11", "batch_size = 0", "beta_end = 1.5"] {
        assert!(matches!(TrainConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn ablation_table_format() {
    let rows = AblationConfig::ALL
        .iter()
        .enumerate()
        .map(|(k, &config)| AblationRow { config, psnr: vec![10.0 + k as f64, 11.0], ssim: vec![0.5, 0.25] })
        .collect();
    let t = AblationTable { seeds: vec![0, 1], alpha_index: 5, rows, baseline: vec![9.0, 9.5] };
    let text = t.to_text();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "seeds: 0, 1");
    assert!(lines[1].contains("WSM@alpha") && lines[1].contains("PSNR") && lines[1].contains("SSIM"));
    assert_eq!(lines.len(), 2 + 4 + 1);
    assert!(lines[5].starts_with("IV") && lines[5].contains("yes (a=5)"));
    assert_eq!(t.row(AblationConfig::III).mean_psnr(), 11.5);
    assert_eq!(t.to_csv().lines().count(), 1 + 8);
}

use memscore::datasets::{generate_synthetic, TargetFn};
use memscore::models::{ModelConfig, Network, Variant};
use memscore::preprocess::{LegacyPipelineConfig, PipelineConfig, SimplePipelineConfig};
use memscore::training::{
    predict, sweep, train, train_data, train_with_validator, write_curves_csv, StopReason,
    TrainConfig, TrainData, TrainError,
};

fn pipeline() -> PipelineConfig {
    PipelineConfig::Simple(SimplePipelineConfig::identity(32))
}

fn data(n: usize, seed: u64) -> TrainData {
    let ds = generate_synthetic(n, 32, seed, TargetFn::TextureOnly).unwrap();
    TrainData::from_manifest(&ds.manifest, &ds.memory_source(), &pipeline()).unwrap()
}

fn net(seed: u64) -> Network<f32> {
    Network::build(&ModelConfig::tiny(Variant::Memnet), seed).unwrap()
}

#[test]
fn overfits_a_small_set() {
    let d = data(16, 1);
    let cfg = TrainConfig {
        eta: 0.05,
        batch_size: 8,
        max_epochs: 150,
        early_stop_patience: 0,
        ..TrainConfig::default()
    };
    let before = memscore::eval::mse(&predict(&net(0), &d, 16).unwrap(), &d.targets).unwrap();
    let out = train_data(net(0), &d, &d, &pipeline(), &cfg).unwrap();
    let after = memscore::eval::mse(&predict(&out.last, &d, 16).unwrap(), &d.targets).unwrap();
    assert!(after < 0.2 * before, "before {before} after {after}");
    assert_eq!(out.log.stopped_reason, StopReason::MaxEpochs);
    assert_eq!(out.log.train_loss.len(), 150 * 2);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let d = data(10, 2);
    let cfg = TrainConfig {
        eta: 0.0,
        batch_size: 4,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let start = net(3);
    let out = train_data(start.clone(), &d, &d, &pipeline(), &cfg).unwrap();
    let a: Vec<_> = start.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let b: Vec<_> = out.last.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    assert_eq!(a, b);
}

#[test]
fn early_stopping_keeps_the_peak() {
    let d = data(8, 3);
    let script = [0.1, 0.3, 0.5, 0.4, 0.5, 0.2, 0.45, 0.9];
    let mut calls = 0;
    let mut seen = Vec::new();
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 20,
        early_stop_patience: 3,
        ..TrainConfig::default()
    };
    let out = train_with_validator(net(0), &d, &pipeline(), &cfg, &mut |n| {
        seen.push(n.named_params()[0].1.clone());
        let r = script[calls];
        calls += 1;
        Ok((1.0 - r, Some(r)))
    })
    .unwrap();
    assert_eq!(calls, 6);
    assert_eq!(out.log.stopped_reason, StopReason::EarlyStop);
    let best = out.log.best.unwrap();
    assert_eq!((best.step, best.val_spearman), (3, Some(0.5)));
    assert_eq!(out.checkpoint.train_meta.step, 3);
    assert_eq!(out.best.named_params()[0].1, &seen[2]);
    assert_ne!(out.last.named_params()[0].1, &seen[2]);
}

#[test]
fn undefined_rho_never_becomes_best() {
    let d = data(8, 3);
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 4,
        early_stop_patience: 2,
        ..TrainConfig::default()
    };
    let out =
        train_with_validator(net(0), &d, &pipeline(), &cfg, &mut |_| Ok((0.1, None))).unwrap();
    assert!(out.log.best.is_none());
    assert_eq!(out.log.evals.len(), 2);
}

#[test]
fn eval_every_controls_evaluation_steps() {
    let d = data(20, 4);
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 2,
        early_stop_patience: 0,
        eval_every: Some(3),
        ..TrainConfig::default()
    };
    let out = train_data(net(0), &d, &d, &pipeline(), &cfg).unwrap();
    let steps: Vec<usize> = out.log.evals.iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![3, 6, 9]);
}

#[test]
fn huge_learning_rate_diverges_with_step() {
    let d = data(8, 5);
    let cfg = TrainConfig {
        eta: 1e12,
        batch_size: 4,
        max_epochs: 5,
        ..TrainConfig::default()
    };
    match train_data(net(0), &d, &d, &pipeline(), &cfg) {
        Err(TrainError::Diverged { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.stopped_reason)),
    }
}

#[test]
fn training_is_deterministic() {
    let d = data(12, 6);
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 2,
        seed: 8,
        ..TrainConfig::default()
    };
    let a = train_data(net(1), &d, &d, &pipeline(), &cfg).unwrap();
    let b = train_data(net(1), &d, &d, &pipeline(), &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.model_tag, b.checkpoint.model_tag);
}

#[test]
fn legacy_pipeline_and_bad_config_are_rejected() {
    let ds = generate_synthetic(4, 32, 0, TargetFn::TextureOnly).unwrap();
    let legacy = PipelineConfig::Legacy(LegacyPipelineConfig::new(32));
    let err = train(net(0), &ds.manifest, &ds.manifest, &ds.memory_source(), &legacy, &TrainConfig::default());
    assert!(matches!(err, Err(TrainError::LegacyPipeline)));

    let d = data(4, 0);
    for bad in [
        TrainConfig { eta: -1.0, ..TrainConfig::default() },
        TrainConfig { gamma: 1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(
            train_data(net(0), &d, &d, &pipeline(), &bad),
            Err(TrainError::Config(_))
        ));
    }
    let empty = TrainData::default();
    assert!(train_data(net(0), &d, &empty, &pipeline(), &TrainConfig::default()).is_err());
}

#[test]
fn sweep_is_reproducible_and_seeds_differ() {
    let (t, v) = (data(12, 7), data(6, 8));
    let base = TrainConfig {
        batch_size: 4,
        max_epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let grid = vec![
        TrainConfig { eta: 0.01, ..base.clone() },
        TrainConfig { eta: 0.01, ..base.clone() },
        TrainConfig { eta: f64::NAN, ..base.clone() },
    ];
    let cfg = ModelConfig::tiny(Variant::Memnet);
    let a = sweep(&cfg, &grid, &t, &v, &pipeline()).unwrap();
    let b = sweep(&cfg, &grid, &t, &v, &pipeline()).unwrap();
    assert_eq!(a[0].log(), b[0].log());
    assert_eq!(a[1].log(), b[1].log());
    assert_ne!(a[0].config.seed, a[1].config.seed);
    assert_ne!(a[0].log(), a[1].log());
    assert!(a[2].result.is_err());

    let mut buf = Vec::new();
    write_curves_csv(&mut buf, &a).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run,eta,gamma,batch_size,step,epoch,val_mse,val_spearman"
    );
    assert_eq!(lines.count(), 4);
}

use otrecon::nets::{init_state, ModelState, NetSpec, BUNDLE_NAMES, M};
use otrecon::{ComplexImage, Error, RasterImage, SamplingMask};
use otrecon::trainer::*;
use otrecon::imageio::Dataset;
use otrecon::otcore::{dual_losses_alignment, dual_losses_synthesis};

fn tiny_spec() -> NetSpec {
    NetSpec { depth: 2, base_channels: 3, cascades: 1, critic_channels: 4, critic_depth: 2, ..NetSpec::toy() }
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig { net: tiny_spec(), batch_size: 2, max_steps: 4, eval_every: 2, ..TrainConfig::toy() }
}

fn data(seed: u64) -> Vec<Prepared> {
    let ds = Dataset::phantoms(6, 16, 1.5, seed).unwrap();
    let mask = tiny_cfg().mask(16, 16).unwrap();
    Prepared::prepare_all(&ds.train, &mask).unwrap()
}

#[test]
fn config_toml_round_trip_and_missing_key() {
    let cfg = TrainConfig::toy();
    let text = cfg.to_toml();
    assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    let without: String = text.lines().filter(|l| !l.starts_with("eta ")).map(|l| format!("{l}\n")).collect();
    match TrainConfig::from_toml_str(&without) {
        Err(Error::Config(msg)) => assert!(msg.contains("eta"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
    let bad = text.replace("lr = 0.003", "lr = -1.0");
    assert!(matches!(TrainConfig::from_toml_str(&bad), Err(Error::Config(_))));
}

#[test]
fn full_scale_defaults() {
    let c = TrainConfig::full_scale();
    assert_eq!([c.alpha, c.beta, c.delta, c.eta], [3000.0, 1.0, 1.0, 1000.0]);
    assert_eq!(c.lr, 1e-4);
    assert_eq!((c.inner_iters, c.critic_steps_per_update), (1, 1));
    assert_eq!("without_isa".parse::<Ablation>().unwrap(), Ablation::WithoutIsa);
    assert!("none".parse::<Ablation>().is_err());
}

#[test]
fn zero_weights_give_zero_total() {
    let d = data(1);
    let state = init_state(&tiny_spec(), 2).unwrap();
    let cfg = TrainConfig { alpha: 0.0, beta: 0.0, delta: 0.0, eta: 0.0, ..tiny_cfg() };
    let batch: Vec<&Prepared> = d.iter().take(2).collect();
    assert_eq!(total_loss(&state, &batch, &cfg).unwrap().total, 0.0);
}

#[test]
fn without_cms_total_is_reconstruction_only() {
    let d = data(2);
    let state = init_state(&tiny_spec(), 2).unwrap();
    let cfg = TrainConfig { ablation: Ablation::WithoutCms, ..tiny_cfg() };
    let batch: Vec<&Prepared> = d.iter().take(3).collect();
    let l = total_loss(&state, &batch, &cfg).unwrap();
    assert!((l.total - cfg.alpha * l.l_rec).abs() <= 1e-12 * l.total.abs());
}

#[test]
fn oracle_state_has_zero_reconstruction_and_smoothness_loss() {
    // full sampling with zero refiners reproduces the target exactly,
    // and a zero deformation generator gives a constant field
    let ds = Dataset::phantoms(4, 16, 1.0, 3).unwrap();
    let mask = SamplingMask::all(16, 16);
    let d = Prepared::prepare_all(&ds.train, &mask).unwrap();
    let state = init_state(&tiny_spec(), 4).unwrap();
    let batch: Vec<&Prepared> = d.iter().collect();
    let l = total_loss(&state, &batch, &tiny_cfg()).unwrap();
    assert!(l.l_rec < 1e-12, "{}", l.l_rec);
    assert_eq!(l.l_reg, 0.0);
}

#[test]
fn map_objectives_match_dual_loss_reports() {
    let d = data(4);
    let mut state = init_state(&tiny_spec(), 5).unwrap();
    // give the synthesis output layer some weight so the critics see a
    // non-trivial image
    let out = state.bundles[M].index_of("out.w").unwrap();
    state.bundles[M].tensors[out].tensor.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * (i % 5) as f64 - 0.1);
    let cfg = tiny_cfg();
    let batch: Vec<&Prepared> = d.iter().take(3).collect();
    let l = total_loss(&state, &batch, &cfg).unwrap();
    let infs: Vec<Inference> = batch.iter().map(|s| infer(&state, cfg.ablation, s).unwrap()).collect();
    let t1: Vec<RasterImage> = batch.iter().map(|s| RasterImage::from_f64(16, 16, &s.t1.data)).collect();
    let r0: Vec<ComplexImage> = infs.iter().map(|i| i.r0.clone()).collect();
    let t2: Vec<ComplexImage> = batch.iter().map(|s| s.target.clone()).collect();
    let a = dual_losses_alignment(&state, &t1, &r0, &t2, cfg.cost, cfg.cost_weight).unwrap();
    assert!((a.generator_objective - l.l_g).abs() < 1e-6, "{} vs {}", a.generator_objective, l.l_g);
    let t1a: Vec<RasterImage> = infs.iter().map(|i| i.aligned.clone()).collect();
    let s = dual_losses_synthesis(&state, &t1a, &t2, cfg.cost, cfg.cost_weight).unwrap();
    assert!((s.generator_objective - l.l_otm).abs() < 1e-6, "{} vs {}", s.generator_objective, l.l_otm);
}

#[test]
fn trace_follows_the_alternating_scheme() {
    let d = data(5);
    let mut state = init_state(&tiny_spec(), 1).unwrap();
    let mut opt = Adam::new(&state);
    let batch: Vec<&Prepared> = d.iter().take(2).collect();
    for iters in [1, 2] {
        let cfg = TrainConfig { inner_iters: iters, ..tiny_cfg() };
        let mut events = Vec::new();
        train_step(&mut state, &mut opt, &batch, &cfg, 1, &mut |e| events.push(e)).unwrap();
        assert_eq!(events, expected_trace(iters));
    }
}

#[test]
fn zero_learning_rate_keeps_state_bitwise() {
    let d = data(6);
    let mut state = init_state(&tiny_spec(), 7).unwrap();
    let before = state.clone();
    let mut opt = Adam::new(&state);
    let cfg = TrainConfig { lr: 0.0, ..tiny_cfg() };
    let batch: Vec<&Prepared> = d.iter().take(2).collect();
    train_step(&mut state, &mut opt, &batch, &cfg, 1, &mut |_| {}).unwrap();
    assert_eq!(state, before);
}

fn fingerprints(s: &ModelState) -> Vec<u64> {
    s.bundles.iter().map(|b| b.fingerprint()).collect()
}

#[test]
fn ablations_freeze_the_right_bundles() {
    let d = data(7);
    let batch: Vec<&Prepared> = d.iter().take(2).collect();
    for ablation in Ablation::ALL {
        let mut state = init_state(&tiny_spec(), 8).unwrap();
        let before = fingerprints(&state);
        let mut opt = Adam::new(&state);
        let cfg = TrainConfig { ablation, ..tiny_cfg() };
        train_step(&mut state, &mut opt, &batch, &cfg, 1, &mut |_| {}).unwrap();
        let after = fingerprints(&state);
        let shapes_same = state.shapes() == init_state(&tiny_spec(), 8).unwrap().shapes();
        assert!(shapes_same);
        for b in 0..5 {
            assert_eq!(before[b] == after[b], ablation.frozen()[b], "{ablation} bundle {}", BUNDLE_NAMES[b]);
        }
    }
}

#[test]
fn small_steps_usually_descend() {
    let mut decreased = 0;
    for seed in 0..20u64 {
        let d = data(100 + seed);
        let mut state = init_state(&tiny_spec(), seed).unwrap();
        let mut opt = Adam::new(&state);
        let cfg = TrainConfig { lr: 1e-4, ..tiny_cfg() };
        let batch: Vec<&Prepared> = d.iter().take(2).collect();
        let before = total_loss(&state, &batch, &cfg).unwrap().total;
        train_step(&mut state, &mut opt, &batch, &cfg, 1, &mut |_| {}).unwrap();
        let after = total_loss(&state, &batch, &cfg).unwrap().total;
        decreased += (after < before) as usize;
    }
    assert!(decreased >= 15, "{decreased}/20");
}

#[test]
fn fit_is_deterministic_and_resumable() {
    let d = data(8);
    let val = data(9);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 2, ..tiny_cfg() };
    let run = |sub: &str| {
        fit(&d, &cfg, FitOptions { checkpoint_dir: Some(dir.path().join(sub)), resume: None, validation: val.clone() }).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a.log, b.log);
    assert_eq!(a.state, b.state);
    assert_eq!(a.log.len(), 4);
    assert_eq!(a.status, FitStatus::MaxSteps);
    assert!(a.log.validation_records().count() >= 2);
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let mid = otrecon::checkpoint::load_checkpoint(&a.checkpoints[0]).unwrap();
    assert_eq!(mid.step, 2);
    let resumed = fit(&d, &cfg, FitOptions { checkpoint_dir: None, resume: Some(mid), validation: val.clone() }).unwrap();
    assert_eq!(resumed.log.records(), &a.log.records()[2..]);
    assert_eq!(resumed.state, a.state);
    let parsed = TrainLog::from_ndjson(&a.log.to_ndjson()).unwrap();
    assert_eq!(parsed, a.log);
}

#[test]
fn divergence_is_reported() {
    let d = data(10);
    let cfg = TrainConfig { alpha: 1e12, ..tiny_cfg() };
    let r = fit(&d, &cfg, FitOptions::default()).unwrap();
    assert!(matches!(r.status, FitStatus::Diverged { step: 1, .. }), "{:?}", r.status);
    assert!(r.log.is_empty());
    assert_eq!(r.state, init_state(&cfg.net, cfg.seed).unwrap());
}

#[test]
fn batches_are_deterministic() {
    assert_eq!(batch_indices(3, 10, 20, 4), batch_indices(3, 10, 20, 4));
    assert_ne!(batch_indices(3, 10, 20, 4), batch_indices(3, 11, 20, 4));
    assert_eq!(batch_indices(0, 1, 2, 5).len(), 2);
}

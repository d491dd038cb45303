//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each and exits non-zero if any failed.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use otrecon::graph::gradcheck::max_rel_error;
use otrecon::graph::{Graph, Var};
use otrecon::kspace::{fft2c, ifft2c, make_mask, measure, undersample, SamplingMask};
use otrecon::nets::{critic_value, forward, init_state, GAMMA, OMEGA};
use otrecon::otcore::{exact_w1, grid_diameter, sinkhorn_w1, verify_theorem1};
use otrecon::trainer::{evaluate, fit, FitOptions, Prepared};
use otrecon::{Ablation, ComplexImage, Dataset, DiscreteMeasure, MaskScheme, RasterImage, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_complex(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ComplexImage {
    let re: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let im: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    ComplexImage::from_parts(h, w, &re, &im)
}

fn fft_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rt, mut worst_parseval) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = random_complex(64, 64, &mut rng);
        let k = fft2c(&x).unwrap();
        let back = ifft2c(&k).unwrap();
        let rt = x.data.iter().zip(&back.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        worst_rt = worst_rt.max(rt);
        worst_parseval = worst_parseval.max((k.energy() - x.energy()).abs() / x.energy());
    }
    outcome(
        worst_rt < 1e-6 && worst_parseval < 1e-5,
        format!("max round-trip error {worst_rt:.2e}, max relative Parseval error {worst_parseval:.2e}"),
    )
}

fn mask_fractions() -> Outcome {
    let (h, w) = (320, 320);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for scheme in [MaskScheme::Random, MaskScheme::Equispaced, MaskScheme::Radial] {
        for ratio in [0.25, 0.125, 0.0625] {
            let m = make_mask(scheme, ratio, h, w, 7).unwrap();
            let frac = m.kept_fraction();
            let ok_frac = match scheme {
                MaskScheme::Radial => (frac / ratio - 1.0).abs() <= 0.05,
                _ => (frac - ratio).abs() <= 0.02,
            };
            worst = worst.max((frac / ratio - 1.0).abs());
            let ok_core = match scheme {
                MaskScheme::Radial => m.is_kept(h / 2, w / 2),
                _ => {
                    let kept = m.full_columns().len();
                    SamplingMask::core_columns(w, kept).all(|x| (0..h).all(|y| m.is_kept(y, x)))
                        && SamplingMask::core_columns(w, kept).len() == ((0.32 * kept as f64).floor() as usize).max(1)
                }
            };
            if !(ok_frac && ok_core) {
                failures.push(format!("{scheme:?}@{ratio}: fraction {frac:.4}, core {ok_core}"));
            }
        }
    }
    outcome(failures.is_empty(), format!("9 masks, worst relative fraction deviation {worst:.3}; failures {failures:?}"))
}

fn random_measure(n: usize, rng: &mut ChaCha8Rng) -> DiscreteMeasure {
    let support: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    DiscreteMeasure::new(support, raw.iter().map(|v| v / total).collect()).unwrap()
}

/// Minimum over all assignments for equal-size uniform measures.
fn brute_force_uniform_w1(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn go(i: usize, a: &[Vec<f64>], b: &[Vec<f64>], used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if i == a.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                let d = ((a[i][0] - b[j][0]).powi(2) + (a[i][1] - b[j][1]).powi(2)).sqrt();
                go(i + 1, a, b, used, acc + d, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, a, b, &mut vec![false; b.len()], 0.0, &mut best);
    best / a.len() as f64
}

fn w1_axioms_and_sinkhorn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_axiom = 0.0f64;
    for _ in 0..200 {
        let ms: Vec<DiscreteMeasure> = (0..3).map(|_| random_measure(rng.random_range(1..=32), &mut rng)).collect();
        let d = |a: &DiscreteMeasure, b: &DiscreteMeasure| exact_w1(a, b).unwrap();
        let (ab, ba, bc, ac, aa) = (d(&ms[0], &ms[1]), d(&ms[1], &ms[0]), d(&ms[1], &ms[2]), d(&ms[0], &ms[2]), d(&ms[0], &ms[0]));
        worst_axiom = worst_axiom.max(aa.abs()).max((ab - ba).abs()).max(ac - ab - bc).max(-ab);
    }
    let mut worst_oracle = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=6);
        let a: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
        let b: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
        let exact = exact_w1(&DiscreteMeasure::uniform(a.clone()).unwrap(), &DiscreteMeasure::uniform(b.clone()).unwrap()).unwrap();
        worst_oracle = worst_oracle.max((exact - brute_force_uniform_w1(&a, &b)).abs());
    }
    let mut worst_sinkhorn = 0.0f64;
    for _ in 0..20 {
        let (mu, nu) = (random_measure(rng.random_range(2..=64), &mut rng), random_measure(rng.random_range(2..=64), &mut rng));
        let exact = exact_w1(&mu, &nu).unwrap();
        let approx = sinkhorn_w1(&mu, &nu, 0.02, 50_000).unwrap();
        worst_sinkhorn = worst_sinkhorn.max((approx - exact).abs() / exact);
    }
    outcome(
        worst_axiom <= 1e-9 && worst_oracle <= 1e-9 && worst_sinkhorn <= 0.01,
        format!(
            "axiom violation {worst_axiom:.2e}, assignment oracle error {worst_oracle:.2e}, Sinkhorn relative error {:.3}%",
            100.0 * worst_sinkhorn
        ),
    )
}

/// L1 distance over the real and imaginary channels.
fn l1(a: &ComplexImage, b: &ComplexImage) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x.re - y.re).abs() + (x.im - y.im).abs()).sum()
}

fn lipschitz_ratio(state: &otrecon::ModelState, images: &[ComplexImage], rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..100 {
        let a = &images[rng.random_range(0..images.len())];
        let b = if k % 2 == 0 {
            images[rng.random_range(0..images.len())].clone()
        } else {
            let noise = random_complex(a.height, a.width, rng);
            let scale = rng.random_range(0.01..0.5);
            ComplexImage::from_parts(
                a.height,
                a.width,
                &a.data.iter().zip(&noise.data).map(|(x, n)| x.re + scale * n.re).collect::<Vec<_>>(),
                &a.data.iter().zip(&noise.data).map(|(x, n)| x.im + scale * n.im).collect::<Vec<_>>(),
            )
        };
        let dist = l1(a, &b);
        if dist < 1e-9 {
            continue;
        }
        for bundle in [GAMMA, OMEGA] {
            let pa = critic_value(&state.spec, &state.bundles[bundle], a).unwrap();
            let pb = critic_value(&state.spec, &state.bundles[bundle], &b).unwrap();
            worst = worst.max((pa - pb).abs() / dist);
        }
    }
    worst
}

fn critic_lipschitz() -> Outcome {
    let ds = Dataset::phantoms(24, 32, 3.0, 11).unwrap();
    let mut cfg = TrainConfig::toy();
    cfg.max_steps = 40;
    let mask = cfg.mask(32, 32).unwrap();
    let train = Prepared::prepare_all(&ds.train, &mask).unwrap();
    let images: Vec<ComplexImage> = train.iter().map(|p| p.target.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init = init_state(&cfg.net, cfg.seed).unwrap();
    let before = lipschitz_ratio(&init, &images, &mut rng);
    let trained = fit(&train, &cfg, FitOptions::default()).unwrap();
    let after = lipschitz_ratio(&trained.state, &images, &mut rng);
    outcome(before <= 1.05 && after <= 1.05, format!("max ratio at init {before:.4}, after 40 steps {after:.4}"))
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
}

/// Linear scalar read-out: the sum of per-channel means.
fn readout(g: &mut Graph, x: Var) -> Var {
    let m = g.global_mean(x);
    g.sum(m)
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = otrecon::NetSpec { depth: 2, base_channels: 2, cascades: 2, critic_channels: 2, critic_depth: 2, ..otrecon::NetSpec::toy() };
    let state = init_state(&spec, 0).unwrap();
    let randomized = |b: usize, rng: &mut ChaCha8Rng| -> Vec<Tensor> {
        state.bundles[b].tensors.iter().map(|t| random_tensor(&t.tensor.shape, 0.4, rng)).collect()
    };
    let (h, w) = (8, 8);
    let x = random_complex(h, w, &mut rng);
    let mask = make_mask(MaskScheme::Random, 0.5, h, w, 1).unwrap();
    let measured = measure(&x, &mask).unwrap();
    let zero_filled = undersample(&x, &mask).unwrap().to_tensor();
    let keep = Arc::new(mask.keep.clone());
    let guide = random_tensor(&[1, h, w], 1.0, &mut rng);
    let t1 = random_tensor(&[1, h, w], 1.0, &mut rng);

    let mut nets = Vec::new();
    let theta = randomized(0, &mut rng);
    nets.push(("reconstruction", max_rel_error(&theta, &|g, p| {
        let xu = g.constant(zero_filled.clone());
        let gd = g.constant(guide.clone());
        let out = forward::reconstruct(g, &spec, p, xu, gd, &measured, &keep);
        readout(g, out)
    }, 1e-6, 1e-6)));
    let s = randomized(1, &mut rng);
    nets.push(("deformation", max_rel_error(&s, &|g, p| {
        let a = g.constant(t1.clone());
        let b = g.constant(guide.clone());
        let out = forward::deformation(g, &spec, p, a, b);
        readout(g, out)
    }, 1e-6, 1e-6)));
    let m = randomized(2, &mut rng);
    nets.push(("synthesis", max_rel_error(&m, &|g, p| {
        let a = g.constant(t1.clone());
        let out = forward::synthesize(g, &spec, p, a);
        readout(g, out)
    }, 1e-6, 1e-6)));
    for bundle in [GAMMA, OMEGA] {
        let c = randomized(bundle, &mut rng);
        let bundle_state = &state.bundles[bundle];
        nets.push(("critic", max_rel_error(&c, &|g, p| {
            let xin = g.constant(x.to_tensor());
            forward::critic(g, &spec, bundle_state, p, xin)
        }, 1e-6, 1e-6)));
    }
    let net_worst = nets.iter().map(|(_, e)| *e).fold(0.0, f64::max);

    let field = Tensor::from_vec(&[2, h, w], (0..2 * h * w).map(|_| rng.random_range(-1.5..1.5)).collect());
    let src = random_tensor(&[1, h, w], 1.0, &mut rng);
    let warp_err = max_rel_error(&[src, field.clone()], &|g, v| {
        let out = g.warp(v[0], v[1]);
        readout(g, out)
    }, 1e-7, 1e-6);
    let guide_vals = Arc::new(guide.data.clone());
    let smooth_err = max_rel_error(&[field], &|g, v| g.smoothness(v[0], guide_vals.clone()), 1e-7, 1e-6);
    let per_net: Vec<String> = nets.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        net_worst < 1e-3 && warp_err < 1e-4 && smooth_err < 1e-4,
        format!("{}; warp {warp_err:.1e}; smoothness {smooth_err:.1e}", per_net.join(", ")),
    )
}

fn theorem_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w) = (16, 16);
    let diam = grid_diameter(h, w);
    let (mut worst_slack, mut holds) = (f64::NEG_INFINITY, 0usize);
    let img = |rng: &mut ChaCha8Rng| RasterImage::from_f64(h, w, &(0..h * w).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>());
    for _ in 0..500 {
        let t2 = img(&mut rng);
        let noise = rng.random_range(0.0..0.3);
        let g_vals: Vec<f64> = t2.to_f64().iter().map(|v| (v + noise * rng.random_range(-1.0..1.0)).max(0.0)).collect();
        let x_g = RasterImage::from_f64(h, w, &g_vals);
        let x_r = img(&mut rng);
        let r = verify_theorem1(&x_r, &x_g, &t2, diam).unwrap();
        worst_slack = worst_slack.max(r.triangle_slack);
        holds += usize::from(r.holds);
    }
    outcome(
        worst_slack <= 1e-9,
        format!("max triangle slack {worst_slack:.2e}; full inequality with C = 1/diam holds on {holds}/500 triples"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn toy_training() -> Outcome {
    let ds = Dataset::phantoms(600, 32, 3.0, 1).unwrap();
    let cfg = TrainConfig::toy();
    let mask = cfg.mask(32, 32).unwrap();
    let train = Prepared::prepare_all(&ds.train, &mask).unwrap();
    let test = Prepared::prepare_all(&ds.test, &mask).unwrap();
    let mut psnr = Vec::new();
    let mut full_report = None;
    for ablation in Ablation::ALL {
        let c = TrainConfig { ablation, ..cfg.clone() };
        let r = fit(&train, &c, FitOptions::default()).unwrap();
        let e = evaluate(&r.state, ablation, &test).unwrap();
        psnr.push((ablation, e.model.psnr.mean));
        if ablation == Ablation::Full {
            full_report = Some(e);
        }
    }
    let full = full_report.unwrap();
    let p = |a: Ablation| psnr.iter().find(|(b, _)| *b == a).unwrap().1;
    let (pf, pc, pi) = (p(Ablation::Full), p(Ablation::WithoutCms), p(Ablation::WithoutIsa));
    let zf = full.zero_filled.psnr.mean;
    let (epe, zero) = (full.mean_endpoint_error.unwrap(), full.mean_zero_field_error.unwrap());
    let epe_gain = 1.0 - epe / zero;

    let (mut initial, mut last) = (Vec::new(), Vec::new());
    for seed in 1..=5 {
        let c = TrainConfig { seed, max_steps: 200, ..cfg.clone() };
        let r = fit(&train, &c, FitOptions::default()).unwrap();
        initial.push(r.log.records().first().unwrap().l1_gap);
        last.push(r.log.records().last().unwrap().l1_gap);
    }
    let (gap0, gap1) = (median(initial), median(last));
    let checks = [pf >= zf + 3.0, pf > pc, pf > pi, epe_gain >= 0.30, gap1 < gap0];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "PSNR full {pf:.2} / zero-filled {zf:.2} / without_cms {pc:.2} / without_isa {pi:.2} dB; \
             EPE {epe:.3} vs zero field {zero:.3} ({:.1}% better); median L1 gap {gap0:.1} -> {gap1:.1}; checks {checks:?}",
            100.0 * epe_gain
        ),
    )
}

fn determinism() -> Outcome {
    let ds = Dataset::phantoms(20, 32, 3.0, 21).unwrap();
    let mut cfg = TrainConfig::toy();
    cfg.max_steps = 20;
    cfg.checkpoint_every = 10;
    cfg.eval_every = 10;
    let mask = cfg.mask(32, 32).unwrap();
    let train = Prepared::prepare_all(&ds.train, &mask).unwrap();
    let val = Prepared::prepare_all(&ds.val, &mask).unwrap();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let r = fit(&train, &cfg, FitOptions { checkpoint_dir: Some(dir.path().to_path_buf()), validation: val.clone(), ..Default::default() })
            .unwrap();
        let bytes: Vec<Vec<u8>> = r.checkpoints.iter().map(|p| std::fs::read(p).unwrap()).collect();
        (r.log.to_ndjson(), bytes)
    };
    let (log_a, ck_a) = run();
    let (log_b, ck_b) = run();
    outcome(
        log_a == log_b && ck_a == ck_b && ck_a.len() == 2,
        format!("logs identical {}, {} checkpoints identical {}", log_a == log_b, ck_a.len(), ck_a == ck_b),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("1 fft round trip and Parseval", fft_round_trip, Duration::from_secs(10)),
        ("2 sampling masks", mask_fractions, Duration::from_secs(5)),
        ("3 W1 axioms and Sinkhorn", w1_axioms_and_sinkhorn, Duration::from_secs(60)),
        ("4 critic Lipschitz ratio", critic_lipschitz, Duration::from_secs(30)),
        ("5 gradient checks", gradient_checks, Duration::from_secs(60)),
        ("6 gap bound", theorem_bound, Duration::from_secs(120)),
        ("7 toy training", toy_training, Duration::from_secs(30 * 60)),
        ("8 determinism", determinism, Duration::from_secs(30 * 60)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run, limit) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let elapsed = start.elapsed();
        let pass = o.pass && elapsed <= limit;
        failed += usize::from(!pass);
        println!(
            "criterion {name}: {} ({:.1}s, limit {}s) {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            o.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Command implementations behind the `otrecon` binary.
//!
//! Every command returns a [`CommandResult`] instead of exiting, so the
//! commands can be driven from tests as well as from `main`.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use otrecon::checkpoint::{check_compatible, load_checkpoint, save_checkpoint, Checkpoint};
use otrecon::imageio::{write_phantom_dataset, write_raster};
use otrecon::metrics::format_table;
use otrecon::otcore::{grid_diameter, verify_theorem1};
use otrecon::trainer::{
    checkpoint_config, evaluate, fit, infer, make_checkpoint, EvalReport, FitOptions, FitStatus, Prepared,
};
use otrecon::{Ablation, Dataset, Error, MaskScheme, RasterImage, Result, TrainConfig};

pub mod plot;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "OTRECON_THREADS";

/// Outcome of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts_written: Vec<PathBuf>,
    pub summary: String,
}

impl CommandResult {
    fn success(artifacts_written: Vec<PathBuf>, summary: String) -> Self {
        CommandResult { exit_code: EXIT_OK, artifacts_written, summary }
    }

    fn failure(err: &Error) -> Self {
        CommandResult { exit_code: exit_code(err), artifacts_written: Vec::new(), summary: err.to_string() }
    }

    pub fn is_success(&self) -> bool {
        self.exit_code == EXIT_OK
    }
}

/// Numeric trouble is a runtime failure; everything else is a problem with
/// the inputs.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric { .. } | Error::Convergence { .. } => EXIT_RUNTIME,
        Error::Storage { .. }
        | Error::Validation(_)
        | Error::Format(_)
        | Error::UnsupportedVersion(_)
        | Error::Capacity { .. }
        | Error::Config(_) => EXIT_USAGE,
    }
}

fn finish(r: Result<CommandResult>) -> CommandResult {
    r.unwrap_or_else(|e| CommandResult::failure(&e))
}

fn storage(path: &Path, source: std::io::Error) -> Error {
    Error::Storage { path: path.to_path_buf(), source }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| storage(dir, e))
}

fn write_text(path: &Path, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(path, text).map_err(|e| storage(path, e))?;
    written.push(path.to_path_buf());
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("records serialize")
}

fn to_ndjson<T: Serialize>(records: &[T]) -> String {
    records.iter().map(|r| to_json(r) + "\n").collect()
}

/// Sizes the global thread pool from [`THREADS_ENV`] when it is set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Validation(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Validation(format!("cannot size the worker pool: {e}")))
}

/// Command-line replacements for config values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub ablation: Option<Ablation>,
    pub mask: Option<MaskScheme>,
    pub ratio: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.max_steps = v;
        }
        if let Some(v) = self.ablation {
            cfg.ablation = v;
        }
        if let Some(v) = self.mask {
            cfg.mask_scheme = v;
        }
        if let Some(v) = self.ratio {
            cfg.mask_ratio = v;
        }
        cfg.validate()
    }
}

pub fn cmd_generate_data(n_pairs: usize, size: usize, max_disp: f64, out_dir: &Path, seed: u64) -> CommandResult {
    finish(write_phantom_dataset(out_dir, n_pairs, size, max_disp, seed).map(|written| {
        let summary = format!(
            "wrote {n_pairs} phantom pairs of {size}x{size} (max displacement {max_disp} px, seed {seed}) to {}",
            out_dir.display()
        );
        CommandResult::success(written, summary)
    }))
}

/// Writes a preset configuration file.
pub fn cmd_write_config(cfg: &TrainConfig, out: &Path) -> CommandResult {
    let mut written = Vec::new();
    finish(write_text(out, &cfg.to_toml(), &mut written).map(|_| {
        CommandResult::success(written, format!("wrote configuration to {}", out.display()))
    }))
}

/// Optional behaviour of [`cmd_train`].
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub overrides: Overrides,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
}

fn load_data(data_dir: &Path, cfg: &TrainConfig) -> Result<(Dataset, (usize, usize))> {
    let ds = Dataset::load(data_dir)?;
    let shape = ds.shape().ok_or_else(|| Error::Validation(format!("{} holds no samples", data_dir.display())))?;
    cfg.net.check_input(shape.0, shape.1)?;
    Ok((ds, shape))
}

pub fn cmd_train(config_path: &Path, data_dir: &Path, out_dir: &Path, options: &TrainOptions) -> CommandResult {
    finish(train(config_path, data_dir, out_dir, options))
}

fn train(config_path: &Path, data_dir: &Path, out_dir: &Path, options: &TrainOptions) -> Result<CommandResult> {
    let mut cfg = TrainConfig::load(config_path)?;
    options.overrides.apply(&mut cfg)?;
    let resume = options.resume.as_deref().map(load_checkpoint).transpose()?;
    let (ds, (h, w)) = load_data(data_dir, &cfg)?;
    let mask = cfg.mask(h, w)?;
    let train_set = Prepared::prepare_all(&ds.train, &mask)?;
    let val_set = Prepared::prepare_all(&ds.val, &mask)?;

    create_dir(out_dir)?;
    let mut written = Vec::new();
    write_text(&out_dir.join("config.toml"), &cfg.to_toml(), &mut written)?;
    let fit_options = FitOptions {
        checkpoint_dir: Some(out_dir.join("checkpoints")),
        resume: resume.clone(),
        validation: val_set.clone(),
    };
    let result = fit(&train_set, &cfg, fit_options)?;
    written.extend(result.checkpoints.iter().cloned());
    let log_path = out_dir.join("train_log.ndjson");
    result.log.write(&log_path)?;
    written.push(log_path);

    let steps = match (result.log.records().last(), &resume) {
        (Some(r), _) => r.step,
        (None, Some(ck)) => ck.step,
        (None, None) => 0,
    };
    if let FitStatus::Diverged { step, detail } = &result.status {
        return Ok(CommandResult {
            exit_code: EXIT_RUNTIME,
            artifacts_written: written,
            summary: format!("training diverged at step {step}: {detail}; last good step {}", step - 1),
        });
    }

    let final_path = out_dir.join("final.otck");
    match result.checkpoints.last() {
        Some(last) => {
            fs::copy(last, &final_path).map_err(|e| storage(&final_path, e))?;
        }
        None => {
            let ck = make_checkpoint(&result.state, &result.optimizer, steps, &VecDeque::new(), &cfg);
            save_checkpoint(&ck, &final_path)?;
        }
    }
    written.push(final_path);

    let (split, samples) = if val_set.is_empty() { ("training", &train_set) } else { ("validation", &val_set) };
    let report = evaluate(&result.state, cfg.ablation, samples)?;
    let status = match result.status {
        FitStatus::Converged { step } => format!("converged at step {step}"),
        _ => format!("stopped after {steps} steps"),
    };
    let table = format_table(
        &format!("{} on the {split} split ({} samples), {status}", cfg.ablation, samples.len()),
        &[report.zero_filled.clone(), report.model.clone()],
    );
    write_text(&out_dir.join("summary.txt"), &table, &mut written)?;
    Ok(CommandResult::success(written, table))
}

/// Optional behaviour of [`cmd_evaluate`].
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub mask: Option<MaskScheme>,
    pub ratio: Option<f64>,
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
    /// Network spec the checkpoint must match; defaults to the one stored in it.
    pub config: Option<PathBuf>,
    pub error_maps: bool,
}

struct Loaded {
    checkpoint: Checkpoint,
    cfg: TrainConfig,
    dataset: Dataset,
    height: usize,
    width: usize,
}

fn load_for_inference(
    checkpoint: &Path,
    data_dir: &Path,
    config: Option<&Path>,
    overrides: &Overrides,
) -> Result<Loaded> {
    let ck = load_checkpoint(checkpoint)?;
    let mut cfg = checkpoint_config(&ck)?;
    if let Some(path) = config {
        cfg = TrainConfig::load(path)?;
    }
    check_compatible(&ck, &cfg.net)?;
    if ck.state.spec != cfg.net {
        return Err(Error::Validation("checkpoint network spec differs from the config".into()));
    }
    overrides.apply(&mut cfg)?;
    let (dataset, (height, width)) = load_data(data_dir, &cfg)?;
    Ok(Loaded { checkpoint: ck, cfg, dataset, height, width })
}

/// One machine-readable evaluation record.
#[derive(Serialize)]
struct EvalRecord<'a> {
    split: &'static str,
    #[serde(flatten)]
    sample: &'a otrecon::trainer::SampleEval,
}

#[derive(Serialize)]
struct EvalAggregate<'a> {
    ablation: Ablation,
    mask_scheme: MaskScheme,
    mask_ratio: f64,
    zero_filled: &'a otrecon::metrics::MetricReport,
    model: &'a otrecon::metrics::MetricReport,
    mean_l1_gap: f64,
    mean_endpoint_error: Option<f64>,
    mean_zero_field_error: Option<f64>,
}

pub fn cmd_evaluate(checkpoint: &Path, data_dir: &Path, out_dir: &Path, options: &EvalOptions) -> CommandResult {
    finish(evaluate_command(checkpoint, data_dir, out_dir, options))
}

fn evaluate_command(checkpoint: &Path, data_dir: &Path, out_dir: &Path, options: &EvalOptions) -> Result<CommandResult> {
    let overrides = Overrides {
        seed: options.seed,
        ablation: options.ablation,
        mask: options.mask,
        ratio: options.ratio,
        ..Overrides::default()
    };
    let l = load_for_inference(checkpoint, data_dir, options.config.as_deref(), &overrides)?;
    if l.dataset.test.is_empty() {
        return Err(Error::Validation("the test split is empty".into()));
    }
    let mask = l.cfg.mask(l.height, l.width)?;
    let test = Prepared::prepare_all(&l.dataset.test, &mask)?;
    let mut report: EvalReport = evaluate(&l.checkpoint.state, l.cfg.ablation, &test)?;
    report.samples.sort_by_key(|s| s.id);

    create_dir(out_dir)?;
    let mut written = Vec::new();
    let title = format!(
        "test split: {} samples, {} mask at {:.4}, ablation {}",
        report.samples.len(),
        l.cfg.mask_scheme,
        mask.kept_fraction(),
        l.cfg.ablation
    );
    let mut text = format_table(&title, &[report.zero_filled.clone(), report.model.clone()]);
    text.push_str(&format!("\nmean L1 gap between guided and synthesized images: {:.6}\n", report.mean_l1_gap));
    if let (Some(e), Some(z)) = (report.mean_endpoint_error, report.mean_zero_field_error) {
        text.push_str(&format!("mean endpoint error: {e:.4} px (zero field {z:.4} px)\n"));
    }
    if report.zero_filled.psnr_infinite > 0 {
        text.push_str(&format!(
            "zero-filled PSNR is infinite on {} of {} samples\n",
            report.zero_filled.psnr_infinite, report.zero_filled.n_samples
        ));
    }
    text.push_str("\nper-sample PSNR (dB):\n  id      zero-filled  model\n");
    for s in &report.samples {
        text.push_str(&format!("  {:06}  {:>11}  {:>8}\n", s.id, psnr_text(&s.zero_filled.psnr), psnr_text(&s.model.psnr)));
    }
    write_text(&out_dir.join("metrics.txt"), &text, &mut written)?;

    let records: Vec<EvalRecord> = report.samples.iter().map(|sample| EvalRecord { split: "test", sample }).collect();
    write_text(&out_dir.join("records.ndjson"), &to_ndjson(&records), &mut written)?;
    let aggregate = EvalAggregate {
        ablation: l.cfg.ablation,
        mask_scheme: l.cfg.mask_scheme,
        mask_ratio: l.cfg.mask_ratio,
        zero_filled: &report.zero_filled,
        model: &report.model,
        mean_l1_gap: report.mean_l1_gap,
        mean_endpoint_error: report.mean_endpoint_error,
        mean_zero_field_error: report.mean_zero_field_error,
    };
    let aggregate_json = serde_json::to_string_pretty(&aggregate).expect("aggregate serializes") + "\n";
    write_text(&out_dir.join("aggregate.json"), &aggregate_json, &mut written)?;

    let groups = [
        ("zero-filled", report.samples.iter().map(|s| s.zero_filled.psnr.value()).collect::<Vec<_>>()),
        ("model", report.samples.iter().map(|s| s.model.psnr.value()).collect::<Vec<_>>()),
    ];
    let svg = plot::violin_svg("PSNR on the test split", "PSNR (dB)", &groups);
    write_text(&out_dir.join("psnr_violin.svg"), &svg, &mut written)?;

    if options.error_maps {
        written.extend(write_error_maps(&l.checkpoint, l.cfg.ablation, &test, &out_dir.join("error_maps"))?);
    }
    Ok(CommandResult::success(written, text))
}

fn psnr_text(p: &otrecon::metrics::Psnr) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{:.2}", p.value())
    }
}

fn abs_difference(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect()
}

/// Raw error rasters plus PNG renderings on a shared intensity scale.
fn write_error_maps(ck: &Checkpoint, ablation: Ablation, samples: &[Prepared], dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let maps: Vec<(usize, Vec<f64>, Vec<f64>)> = samples
        .par_iter()
        .map(|s| -> Result<_> {
            let inf = infer(&ck.state, ablation, s)?;
            let target = s.target.magnitude();
            Ok((
                s.id,
                abs_difference(&inf.reconstruction.magnitude(), &target),
                abs_difference(&s.zero_filled.magnitude(), &target),
            ))
        })
        .collect::<Result<_>>()?;
    let peak = maps.iter().flat_map(|(_, m, z)| m.iter().chain(z)).fold(0.0f64, |a, &b| a.max(b));
    let mut written = Vec::new();
    for (id, model, zero) in &maps {
        let (h, w) = (samples[0].height, samples[0].width);
        let raw = dir.join(format!("sample_{id:06}_model.otmr"));
        write_raster(&RasterImage::from_f64(h, w, model), &raw)?;
        written.push(raw);
        for (name, values) in [("model", model), ("zero_filled", zero)] {
            let png = dir.join(format!("sample_{id:06}_{name}.png"));
            plot::write_gray_png(values, h, w, peak, &png)?;
            written.push(png);
        }
    }
    Ok(written)
}

/// Optional behaviour of [`cmd_verify_theorem`].
#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub mask: Option<MaskScheme>,
    pub ratio: Option<f64>,
    pub seed: Option<u64>,
    /// Replaces the reconstruction with the synthesized image.
    pub force_equal: bool,
}

#[derive(Serialize)]
struct BoundRecord {
    id: usize,
    #[serde(flatten)]
    report: otrecon::BoundReport,
}

#[derive(Serialize)]
struct BoundSummary {
    n_samples: usize,
    diameter: f64,
    c: f64,
    max_triangle_slack: f64,
    max_lhs: f64,
    holding: usize,
    fraction_holding: f64,
    forced_equal: bool,
}

pub fn cmd_verify_theorem(
    checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
    n_samples: usize,
    options: &VerifyOptions,
) -> CommandResult {
    finish(verify_command(checkpoint, data_dir, out_dir, n_samples, options))
}

fn verify_command(
    checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
    n_samples: usize,
    options: &VerifyOptions,
) -> Result<CommandResult> {
    if n_samples == 0 {
        return Err(Error::Validation("n_samples must be positive".into()));
    }
    let overrides =
        Overrides { seed: options.seed, mask: options.mask, ratio: options.ratio, ..Overrides::default() };
    let l = load_for_inference(checkpoint, data_dir, None, &overrides)?;
    let mask = l.cfg.mask(l.height, l.width)?;
    let pool: Vec<_> = l.dataset.test.iter().chain(&l.dataset.val).chain(&l.dataset.train).take(n_samples).cloned().collect();
    let samples = Prepared::prepare_all(&pool, &mask)?;
    let diameter = grid_diameter(l.height, l.width);
    let raster = |v: Vec<f64>| RasterImage::from_f64(l.height, l.width, &v);
    let records: Vec<BoundRecord> = samples
        .par_iter()
        .map(|s| -> Result<BoundRecord> {
            let inf = infer(&l.checkpoint.state, l.cfg.ablation, s)?;
            let x_g = raster(inf.synthesized.magnitude());
            let x_r = if options.force_equal { x_g.clone() } else { raster(inf.reconstruction.magnitude()) };
            let x_t2 = raster(s.target.magnitude());
            Ok(BoundRecord { id: s.id, report: verify_theorem1(&x_r, &x_g, &x_t2, diameter)? })
        })
        .collect::<Result<_>>()?;

    let holding = records.iter().filter(|r| r.report.holds).count();
    let summary = BoundSummary {
        n_samples: records.len(),
        diameter,
        c: 1.0 / diameter,
        max_triangle_slack: records.iter().map(|r| r.report.triangle_slack).fold(f64::NEG_INFINITY, f64::max),
        max_lhs: records.iter().map(|r| r.report.lhs).fold(0.0, f64::max),
        holding,
        fraction_holding: holding as f64 / records.len() as f64,
        forced_equal: options.force_equal,
    };
    create_dir(out_dir)?;
    let mut written = Vec::new();
    write_text(&out_dir.join("theorem.ndjson"), &to_ndjson(&records), &mut written)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_text(&out_dir.join("theorem_summary.json"), &json, &mut written)?;

    let mut text = String::from("  id         LHS         RHS   triangle slack  holds\n");
    for r in &records {
        text.push_str(&format!(
            "  {:06} {:>11.5} {:>11.5} {:>16.3e}  {}\n",
            r.id, r.report.lhs, r.report.rhs, r.report.triangle_slack, r.report.holds
        ));
    }
    text.push_str(&format!(
        "\n{} samples, C = 1/diam = {:.6} (diam {:.4} px)\nmax triangle slack {:.3e}\nfull inequality holds on {}/{} ({:.1}%)\n",
        summary.n_samples,
        summary.c,
        diameter,
        summary.max_triangle_slack,
        holding,
        summary.n_samples,
        100.0 * summary.fraction_holding
    ));
    write_text(&out_dir.join("theorem.txt"), &text, &mut written)?;
    Ok(CommandResult::success(written, text))
}

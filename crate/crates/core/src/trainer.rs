//! Alternating optimization of the reconstruction cascade together with
//! the alignment and synthesis maps, each paired with its own critic.
//!
//! One [`train_step`] performs a global update of the reconstruction and
//! mapping parameters on the weighted objective, followed by
//! `inner_iters` rounds of separate refinement for the synthesis map, its
//! critic, the deformation generator and the alignment critic.
//!
//! The reconstruction network runs twice per sample: once with an empty
//! guide channel, giving the estimate the deformation generator aligns
//! against, and once guided by the magnitude of the synthesized image.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, ParamGrads, Var};
use crate::imageio::{write_atomic, PairSample, RasterImage};
use crate::kspace::{ifft2c_unchecked, make_mask, measure, ComplexImage, MaskScheme, SamplingMask};
use crate::metrics::{evaluate_sample, MetricReport, SampleMetrics};
use crate::nets::{forward, init_state, ModelState, NamedTensor, NetSpec, BUNDLE_NAMES, GAMMA, M, OMEGA, S, THETA};
use crate::otcore::TransportCost;
use crate::tensor::Tensor;
use crate::warp::{mean_endpoint_error, neighbor_pairs, DeformationField};

/// Any loss above this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// No cross-modal synthesis: only the reconstruction parameters learn.
    WithoutCms,
    /// No spatial alignment: the auxiliary image is used unwarped.
    WithoutIsa,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::WithoutCms, Ablation::WithoutIsa];

    /// Bundles whose parameters never change, indexed like `BUNDLE_NAMES`.
    pub fn frozen(self) -> [bool; 5] {
        match self {
            Ablation::Full => [false; 5],
            Ablation::WithoutCms => [false, true, true, true, true],
            Ablation::WithoutIsa => [false, true, false, true, false],
        }
    }

    pub fn aligns(self) -> bool {
        self != Ablation::WithoutIsa
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::WithoutCms => "without_cms",
            Ablation::WithoutIsa => "without_isa",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected full, without_cms or without_isa)")))
    }
}

/// Training hyper-parameters. Every field is required in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub eta: f64,
    pub lr: f64,
    pub inner_iters: usize,
    pub critic_steps_per_update: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub mask_scheme: MaskScheme,
    pub mask_ratio: f64,
    pub cost: TransportCost,
    /// Multiplier of the transport cost inside both map objectives.
    pub cost_weight: f64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub convergence_window: usize,
    /// Zero disables the convergence stop.
    pub convergence_tol: f64,
    pub net: NetSpec,
}

impl TrainConfig {
    /// Full-scale weights and optimizer settings.
    pub fn full_scale() -> Self {
        TrainConfig {
            alpha: 3000.0,
            beta: 1.0,
            delta: 1.0,
            eta: 1000.0,
            lr: 1e-4,
            inner_iters: 1,
            critic_steps_per_update: 1,
            batch_size: 4,
            max_steps: 100_000,
            seed: 0,
            ablation: Ablation::Full,
            mask_scheme: MaskScheme::Random,
            mask_ratio: 0.25,
            cost: TransportCost::Paired,
            cost_weight: 1.0,
            checkpoint_every: 1000,
            eval_every: 1000,
            convergence_window: 100,
            convergence_tol: 1e-4,
            net: NetSpec::full_scale(),
        }
    }

    /// Small CPU setting for 32x32 phantoms. Field smoothness comes from the
    /// deformation network's low-pass head, so the penalty weight is zero.
    pub fn toy() -> Self {
        TrainConfig {
            eta: 0.0,
            lr: 3e-3,
            batch_size: 4,
            max_steps: 2000,
            cost_weight: 100.0,
            convergence_tol: 0.0,
            checkpoint_every: 0,
            eval_every: 100,
            net: NetSpec::toy(),
            ..TrainConfig::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("delta", self.delta), ("eta", self.eta), ("cost_weight", self.cost_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative weight, got {w}")));
            }
        }
        let checks = [
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            (self.inner_iters >= 1, "inner_iters must be at least 1"),
            (self.critic_steps_per_update >= 1, "critic_steps_per_update must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.mask_ratio > 0.0 && self.mask_ratio <= 1.0, "mask_ratio must lie in (0, 1]"),
            (self.convergence_window >= 1, "convergence_window must be at least 1"),
            (self.convergence_tol >= 0.0, "convergence_tol must be non-negative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        self.net.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        TrainConfig::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Loss weights after applying the ablation.
    pub fn effective_weights(&self) -> [f64; 4] {
        match self.ablation {
            Ablation::Full => [self.alpha, self.beta, self.delta, self.eta],
            Ablation::WithoutCms => [self.alpha, 0.0, 0.0, 0.0],
            Ablation::WithoutIsa => [self.alpha, 0.0, self.delta, 0.0],
        }
    }

    pub fn mask(&self, height: usize, width: usize) -> Result<SamplingMask> {
        make_mask(self.mask_scheme, self.mask_ratio, height, width, self.seed)
    }
}

/// Per-sample tensors prepared once: fully sampled target, k-space
/// measurements under a mask and the zero-filled image.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: usize,
    pub height: usize,
    pub width: usize,
    pub t1: Arc<Tensor>,
    pub target: ComplexImage,
    pub target_tensor: Arc<Tensor>,
    pub measured: ComplexImage,
    pub zero_filled: ComplexImage,
    pub keep: Arc<Vec<bool>>,
    pub displacement: Option<DeformationField>,
}

impl Prepared {
    pub fn new(sample: &PairSample, mask: &SamplingMask) -> Result<Self> {
        let (h, w) = (sample.height, sample.width);
        ensure(mask.height == h && mask.width == w, || "mask and sample shapes differ".into())?;
        let target = ComplexImage::from_real(h, w, &sample.t2);
        let measured = measure(&target, mask)?;
        let zero_filled = if mask.keep.iter().all(|&k| k) { target.clone() } else { ifft2c_unchecked(&measured) };
        Ok(Prepared {
            id: sample.id,
            height: h,
            width: w,
            t1: Arc::new(Tensor::from_vec(&[1, h, w], sample.t1.clone())),
            target_tensor: Arc::new(target.to_tensor()),
            target,
            measured,
            zero_filled,
            keep: Arc::new(mask.keep.clone()),
            displacement: sample.displacement.clone(),
        })
    }

    pub fn prepare_all(samples: &[PairSample], mask: &SamplingMask) -> Result<Vec<Prepared>> {
        samples.iter().map(|s| Prepared::new(s, mask)).collect()
    }
}

/// Loss values for one batch; `total` is the weighted objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_g: f64,
    pub l_otm: f64,
    pub l_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn named(&self) -> [(&'static str, f64); 5] {
        [("l_rec", self.l_rec), ("l_g", self.l_g), ("l_otm", self.l_otm), ("l_reg", self.l_reg), ("total", self.total)]
    }

    fn check(&self, limit: f64) -> Result<()> {
        for (name, v) in self.named() {
            if !v.is_finite() || v.abs() > limit {
                return Err(Error::numeric(name, format!("value {v}")));
            }
        }
        Ok(())
    }
}

/// Instrumentation events emitted by [`train_step`] in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    /// A numbered step of the alternating scheme.
    Line(u8),
    /// Second reconstruction pass guided by the synthesized image.
    GuidedReconstruction,
}

/// Expected trace of one step with a single inner iteration.
pub fn expected_trace(inner_iters: usize) -> Vec<TraceEvent> {
    use TraceEvent::*;
    let mut t = vec![Line(2), Line(3), Line(4), GuidedReconstruction, Line(5), Line(6), Line(7)];
    for _ in 0..inner_iters {
        t.extend([Line(9), Line(10), Line(11), Line(12), Line(13), Line(14), Line(15)]);
    }
    t
}

/// Validation snapshot attached to some log records.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSnapshot {
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
    pub l1_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_rec: f64,
    pub l_g: f64,
    pub l_otm: f64,
    pub l_reg: f64,
    pub total: f64,
    /// Batch mean of `|| |x_R| - |x_G| ||_1` (pixel sum).
    pub l1_gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValSnapshot>,
}

impl StepRecord {
    pub fn losses(&self) -> LossBreakdown {
        LossBreakdown { l_rec: self.l_rec, l_g: self.l_g, l_otm: self.l_otm, l_reg: self.l_reg, total: self.total }
    }
}

/// Append-only list of step records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            ensure(r.step > last.step, || format!("log step {} does not follow {}", r.step, last.step))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validation_records(&self) -> impl Iterator<Item = (u64, &ValSnapshot)> {
        self.records.iter().filter_map(|r| r.validation.as_ref().map(|v| (r.step, v)))
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r = serde_json::from_str(line).map_err(|e| Error::Format(format!("log line {}: {e}", i + 1)))?;
            log.push(r)?;
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_ndjson().as_bytes())
    }
}

struct AdamSlot {
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// Adam with one moment pair per parameter tensor and a step counter per
/// bundle.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(state: &ModelState) -> Self {
        let slots = state
            .bundles
            .iter()
            .map(|b| {
                let zeros: Vec<Tensor> = b.tensors.iter().map(|t| Tensor::zeros(&t.tensor.shape)).collect();
                AdamSlot { t: 0, m: zeros.clone(), v: zeros }
            })
            .collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, slots }
    }

    /// Applies one update to `bundle`; returns whether any value changed.
    pub fn step(&mut self, state: &mut ModelState, bundle: usize, grads: &[Tensor], lr: f64) -> bool {
        let slot = &mut self.slots[bundle];
        slot.t += 1;
        let c1 = 1.0 - self.beta1.powi(slot.t as i32);
        let c2 = 1.0 - self.beta2.powi(slot.t as i32);
        let mut changed = false;
        for (k, p) in state.bundles[bundle].tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut slot.m[k].data, &mut slot.v[k].data, &grads[k].data);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let before = p.tensor.data[i];
                p.tensor.data[i] = before - upd;
                changed |= p.tensor.data[i].to_bits() != before.to_bits();
            }
        }
        changed
    }

    /// Moments and counters as named tensors for checkpointing.
    pub fn export(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (b, slot) in self.slots.iter().enumerate() {
            out.push(NamedTensor { name: format!("adam.{}.t", BUNDLE_NAMES[b]), tensor: Tensor::scalar(slot.t as f64) });
            for (k, (m, v)) in slot.m.iter().zip(&slot.v).enumerate() {
                out.push(NamedTensor { name: format!("adam.{}.m.{k}", BUNDLE_NAMES[b]), tensor: m.clone() });
                out.push(NamedTensor { name: format!("adam.{}.v.{k}", BUNDLE_NAMES[b]), tensor: v.clone() });
            }
        }
        out
    }

    pub fn import(state: &ModelState, tensors: &[NamedTensor]) -> Result<Self> {
        let mut adam = Adam::new(state);
        let find = |name: String| {
            tensors.iter().find(|t| t.name == name).map(|t| t.tensor.clone()).ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
        };
        for (b, slot) in adam.slots.iter_mut().enumerate() {
            slot.t = find(format!("adam.{}.t", BUNDLE_NAMES[b]))?.item() as u64;
            for k in 0..slot.m.len() {
                let m = find(format!("adam.{}.m.{k}", BUNDLE_NAMES[b]))?;
                let v = find(format!("adam.{}.v.{k}", BUNDLE_NAMES[b]))?;
                ensure(m.shape == slot.m[k].shape && v.shape == slot.v[k].shape, || "optimizer moment shape mismatch".into())?;
                slot.m[k] = m;
                slot.v[k] = v;
            }
        }
        Ok(adam)
    }
}

fn plane(h: usize, w: usize, v: Vec<f64>) -> Tensor {
    Tensor::from_vec(&[1, h, w], v)
}

fn magnitude_tensor(t: &Tensor) -> Tensor {
    let (_, h, w) = t.chw();
    plane(h, w, ComplexImage::from_tensor(t).magnitude())
}

fn l1_gap(a: &Tensor, b: &Tensor) -> f64 {
    let (ma, mb) = (ComplexImage::from_tensor(a).magnitude(), ComplexImage::from_tensor(b).magnitude());
    ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum()
}

/// Per-sample forward graph for the joint objective, built in stages.
struct Joint<'a> {
    sample: &'a Prepared,
    g: Graph,
    p: Vec<Vec<Var>>,
    x_under: Option<Var>,
    r0: Option<Var>,
    field: Option<Var>,
    t1a: Option<Var>,
    gen: Option<Var>,
    r: Option<Var>,
    root: Option<Var>,
    losses: LossBreakdown,
}

impl<'a> Joint<'a> {
    fn new(state: &ModelState, sample: &'a Prepared, trainable: [bool; 5]) -> Self {
        let mut g = Graph::new();
        let p = (0..5).map(|b| state.bundles[b].load(&mut g, b, trainable[b])).collect();
        Joint { sample, g, p, x_under: None, r0: None, field: None, t1a: None, gen: None, r: None, root: None, losses: LossBreakdown::default() }
    }

    fn reconstruct(&mut self, spec: &NetSpec) {
        let s = self.sample;
        let xu = self.g.constant(s.zero_filled.to_tensor());
        let zero = self.g.constant(Tensor::zeros(&[1, s.height, s.width]));
        self.x_under = Some(xu);
        self.r0 = Some(forward::reconstruct(&mut self.g, spec, &self.p[THETA], xu, zero, &s.measured, &s.keep));
    }

    fn align(&mut self, spec: &NetSpec, ablation: Ablation) {
        let t1 = self.g.constant((*self.sample.t1).clone());
        if ablation.aligns() {
            let mag = magnitude_tensor(self.g.value(self.r0.unwrap()));
            let mag = self.g.constant(mag);
            let field = forward::deformation(&mut self.g, spec, &self.p[S], t1, mag);
            self.field = Some(field);
            self.t1a = Some(self.g.warp(t1, field));
        } else {
            self.t1a = Some(t1);
        }
    }

    fn synthesize(&mut self, spec: &NetSpec) {
        self.gen = Some(forward::synthesize(&mut self.g, spec, &self.p[M], self.t1a.unwrap()));
    }

    fn guided(&mut self, spec: &NetSpec) {
        let s = self.sample;
        let guide = magnitude_tensor(self.g.value(self.gen.unwrap()));
        let guide = self.g.constant(guide);
        self.r = Some(forward::reconstruct(&mut self.g, spec, &self.p[THETA], self.x_under.unwrap(), guide, &s.measured, &s.keep));
    }

    fn losses(&mut self, state: &ModelState, cfg: &TrainConfig) {
        let spec = &state.spec;
        let s = self.sample;
        let g = &mut self.g;
        let (r0, r, gen, t1a) = (self.r0.unwrap(), self.r.unwrap(), self.gen.unwrap(), self.t1a.unwrap());
        let e0 = g.mean_abs_diff(r0, s.target_tensor.clone());
        let e1 = g.mean_abs_diff(r, s.target_tensor.clone());
        let l_rec = g.lin_comb(&[(e0, 0.5), (e1, 0.5)]);
        let t1a_value = g.value(t1a).clone();
        let cost_s = transport_cost(g, cfg.cost, gen, s, &s.t1);
        let cost_m = transport_cost(g, cfg.cost, gen, s, &t1a_value);
        let real = g.constant(s.target.to_tensor());
        let psi_g = forward::critic(g, spec, &state.bundles[GAMMA], &self.p[GAMMA], gen);
        let psi_g_real = forward::critic(g, spec, &state.bundles[GAMMA], &self.p[GAMMA], real);
        let l_g = g.lin_comb(&[(psi_g, 1.0), (psi_g_real, -1.0), (cost_s, cfg.cost_weight)]);
        let psi_o = forward::critic(g, spec, &state.bundles[OMEGA], &self.p[OMEGA], gen);
        let psi_o_real = forward::critic(g, spec, &state.bundles[OMEGA], &self.p[OMEGA], real);
        let l_otm = g.lin_comb(&[(psi_o, 1.0), (psi_o_real, -1.0), (cost_m, cfg.cost_weight)]);
        let l_reg = match self.field {
            Some(f) => {
                let raw = g.smoothness(f, Arc::new(t1a_value.data.clone()));
                g.scale(raw, 1.0 / neighbor_pairs(s.height, s.width) as f64)
            }
            None => g.constant(Tensor::scalar(0.0)),
        };
        let [a, b, d, e] = cfg.effective_weights();
        let total = g.lin_comb(&[(l_rec, a), (l_g, b), (l_otm, d), (l_reg, e)]);
        self.root = Some(total);
        let v = |x: Var| g.value(x).item();
        self.losses = LossBreakdown { l_rec: v(l_rec), l_g: v(l_g), l_otm: v(l_otm), l_reg: v(l_reg), total: v(total) };
    }
}

/// Transport cost node: paired L1 to the target, or L1 to the map input
/// (a single-channel plane promoted to a complex image).
fn transport_cost(g: &mut Graph, kind: TransportCost, gen: Var, s: &Prepared, source: &Tensor) -> Var {
    match kind {
        TransportCost::Paired => g.mean_abs_diff(gen, s.target_tensor.clone()),
        TransportCost::Source => {
            let (_, h, w) = source.chw();
            let promoted = ComplexImage::from_real(h, w, &source.data).to_tensor();
            g.mean_abs_diff(gen, Arc::new(promoted))
        }
    }
}

fn mean<T>(items: &[T], f: impl Fn(&T) -> f64) -> f64 {
    items.iter().map(f).sum::<f64>() / items.len() as f64
}

fn mean_losses(parts: &[LossBreakdown]) -> LossBreakdown {
    LossBreakdown {
        l_rec: mean(parts, |l| l.l_rec),
        l_g: mean(parts, |l| l.l_g),
        l_otm: mean(parts, |l| l.l_otm),
        l_reg: mean(parts, |l| l.l_reg),
        total: mean(parts, |l| l.total),
    }
}

fn check_batch(state: &ModelState, batch: &[&Prepared]) -> Result<()> {
    ensure(!batch.is_empty(), || "empty batch".into())?;
    let (h, w) = (batch[0].height, batch[0].width);
    ensure(batch.iter().all(|s| s.height == h && s.width == w), || "batch images differ in shape".into())?;
    state.spec.check_input(h, w)
}

/// Weighted objective and its components on a batch, without updates.
pub fn total_loss(state: &ModelState, batch: &[&Prepared], cfg: &TrainConfig) -> Result<LossBreakdown> {
    check_batch(state, batch)?;
    let parts: Vec<LossBreakdown> = batch
        .par_iter()
        .map(|s| {
            let mut j = Joint::new(state, s, [false; 5]);
            j.reconstruct(&state.spec);
            j.align(&state.spec, cfg.ablation);
            j.synthesize(&state.spec);
            j.guided(&state.spec);
            j.losses(state, cfg);
            j.losses
        })
        .collect();
    let l = mean_losses(&parts);
    l.check(f64::INFINITY)?;
    Ok(l)
}

/// Sums per-sample gradients in sample order and divides by the batch size.
fn reduce_grads(state: &ModelState, per_sample: Vec<ParamGrads>) -> Vec<Vec<Tensor>> {
    let n = per_sample.len() as f64;
    let mut acc: Vec<Vec<Tensor>> =
        state.bundles.iter().map(|b| b.tensors.iter().map(|t| Tensor::zeros(&t.tensor.shape)).collect()).collect();
    for grads in per_sample {
        for (r, g) in grads {
            acc[r.bundle][r.index].add_assign(&g);
        }
    }
    acc.iter_mut().flatten().for_each(|t| t.scale(1.0 / n));
    acc
}

fn apply(state: &mut ModelState, opt: &mut Adam, grads: &[Vec<Tensor>], bundles: &[usize], lr: f64) {
    for &b in bundles {
        if opt.step(state, b, &grads[b], lr) && !state.bundles[b].spectral.is_empty() {
            state.bundles[b].refresh_spectral(1);
        }
    }
}

/// One graph per sample, run in parallel; returns the reduced gradients.
fn per_sample_grads<F>(state: &ModelState, batch: &[&Prepared], build: F) -> Vec<Vec<Tensor>>
where
    F: Fn(&mut Graph, usize) -> Var + Sync,
{
    let grads: Vec<ParamGrads> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new();
            let root = build(&mut g, i);
            g.backward(root)
        })
        .collect();
    reduce_grads(state, grads)
}

/// Runs the synthesis network on fixed inputs.
fn synth_values(state: &ModelState, inputs: &[Tensor]) -> Vec<Tensor> {
    inputs
        .par_iter()
        .map(|x| {
            let mut g = Graph::new();
            let m = state.bundles[M].load(&mut g, M, false);
            let xv = g.constant(x.clone());
            let out = forward::synthesize(&mut g, &state.spec, &m, xv);
            g.value(out).clone()
        })
        .collect()
}

/// Aligned auxiliary images for fixed alignment targets.
fn align_values(state: &ModelState, batch: &[&Prepared], mags: &[Tensor]) -> Vec<Tensor> {
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new();
            let sp = state.bundles[S].load(&mut g, S, false);
            let t1 = g.constant((*batch[i].t1).clone());
            let mag = g.constant(mags[i].clone());
            let field = forward::deformation(&mut g, &state.spec, &sp, t1, mag);
            let out = g.warp(t1, field);
            g.value(out).clone()
        })
        .collect()
}

/// Critic update on `psi(real) - psi(fake)` for the critic in `bundle`.
fn critic_update(state: &mut ModelState, opt: &mut Adam, batch: &[&Prepared], fakes: &[Tensor], bundle: usize, cfg: &TrainConfig) {
    for _ in 0..cfg.critic_steps_per_update {
        let st: &ModelState = state;
        let grads = per_sample_grads(st, batch, |g, i| {
            let p = st.bundles[bundle].load(g, bundle, true);
            let real = g.constant(batch[i].target.to_tensor());
            let fake = g.constant(fakes[i].clone());
            let pr = forward::critic(g, &st.spec, &st.bundles[bundle], &p, real);
            let pf = forward::critic(g, &st.spec, &st.bundles[bundle], &p, fake);
            g.lin_comb(&[(pr, 1.0), (pf, -1.0)])
        });
        apply(state, opt, &grads, &[bundle], cfg.lr);
    }
}

/// One iteration of the alternating scheme on `batch`. `trace` receives
/// every stage as it runs.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut Adam,
    batch: &[&Prepared],
    cfg: &TrainConfig,
    step: u64,
    trace: &mut dyn FnMut(TraceEvent),
) -> Result<StepRecord> {
    check_batch(state, batch)?;
    ensure(cfg.lr >= 0.0 && cfg.lr.is_finite(), || "learning rate must be finite and non-negative".into())?;
    if !state.is_finite() {
        return Err(Error::numeric("train_step", "state contains non-finite parameters"));
    }
    let frozen = cfg.ablation.frozen();
    let trainable = [!frozen[THETA], !frozen[S], !frozen[M], false, false];
    let spec = state.spec.clone();
    let (losses, grads, mags, aligned, generated, gap) = {
        let st: &ModelState = state;
        let mut joints: Vec<Joint> = batch.iter().map(|s| Joint::new(st, s, trainable)).collect();
        joints.par_iter_mut().for_each(|j| j.reconstruct(&spec));
        trace(TraceEvent::Line(2));
        joints.par_iter_mut().for_each(|j| j.align(&spec, cfg.ablation));
        trace(TraceEvent::Line(3));
        joints.par_iter_mut().for_each(|j| j.synthesize(&spec));
        trace(TraceEvent::Line(4));
        joints.par_iter_mut().for_each(|j| j.guided(&spec));
        trace(TraceEvent::GuidedReconstruction);
        joints.par_iter_mut().for_each(|j| j.losses(st, cfg));
        trace(TraceEvent::Line(5));
        let losses = mean_losses(&joints.iter().map(|j| j.losses).collect::<Vec<_>>());
        let gap = mean(&joints, |j| l1_gap(j.g.value(j.r.unwrap()), j.g.value(j.gen.unwrap())));
        let mags: Vec<Tensor> = joints.iter().map(|j| magnitude_tensor(j.g.value(j.r0.unwrap()))).collect();
        let aligned: Vec<Tensor> = joints.iter().map(|j| j.g.value(j.t1a.unwrap()).clone()).collect();
        let generated: Vec<Tensor> = joints.iter().map(|j| j.g.value(j.gen.unwrap()).clone()).collect();
        let per: Vec<ParamGrads> = joints.par_iter().map(|j| j.g.backward(j.root.unwrap())).collect();
        (losses, reduce_grads(st, per), mags, aligned, generated, gap)
    };
    losses.check(DIVERGENCE_LIMIT)?;
    if !frozen[THETA] {
        apply(state, opt, &grads, &[THETA], cfg.lr);
    }
    trace(TraceEvent::Line(6));
    let phi: Vec<usize> = [S, M].into_iter().filter(|&b| !frozen[b]).collect();
    apply(state, opt, &grads, &phi, cfg.lr);
    trace(TraceEvent::Line(7));

    let mut aligned = aligned;
    let mut generated = generated;
    let w = cfg.cost_weight;
    for _ in 0..cfg.inner_iters {
        if !frozen[M] {
            let st: &ModelState = state;
            let grads = per_sample_grads(st, batch, |g, i| {
                let m = st.bundles[M].load(g, M, true);
                let o = st.bundles[OMEGA].load(g, OMEGA, false);
                let a = g.constant(aligned[i].clone());
                let gen = forward::synthesize(g, &st.spec, &m, a);
                let psi = forward::critic(g, &st.spec, &st.bundles[OMEGA], &o, gen);
                let cost = transport_cost(g, cfg.cost, gen, batch[i], &aligned[i]);
                g.lin_comb(&[(psi, cfg.delta), (cost, cfg.delta * w)])
            });
            apply(state, opt, &grads, &[M], cfg.lr);
        }
        trace(TraceEvent::Line(9));
        if !frozen[OMEGA] {
            critic_update(state, opt, batch, &generated, OMEGA, cfg);
        }
        trace(TraceEvent::Line(10));
        let half = synth_values(state, &aligned);
        trace(TraceEvent::Line(11));
        if !frozen[S] {
            let st: &ModelState = state;
            let grads = per_sample_grads(st, batch, |g, i| {
                let sp = st.bundles[S].load(g, S, true);
                let m = st.bundles[M].load(g, M, false);
                let c = st.bundles[GAMMA].load(g, GAMMA, false);
                let t1 = g.constant((*batch[i].t1).clone());
                let mag = g.constant(mags[i].clone());
                let field = forward::deformation(g, &st.spec, &sp, t1, mag);
                let a = g.warp(t1, field);
                let gen = forward::synthesize(g, &st.spec, &m, a);
                let psi = forward::critic(g, &st.spec, &st.bundles[GAMMA], &c, gen);
                let cost = transport_cost(g, cfg.cost, gen, batch[i], &batch[i].t1);
                g.lin_comb(&[(psi, cfg.beta), (cost, cfg.beta * w)])
            });
            apply(state, opt, &grads, &[S], cfg.lr);
        }
        trace(TraceEvent::Line(12));
        if !frozen[GAMMA] {
            critic_update(state, opt, batch, &half, GAMMA, cfg);
        }
        trace(TraceEvent::Line(13));
        if cfg.ablation.aligns() {
            aligned = align_values(state, batch, &mags);
        }
        trace(TraceEvent::Line(14));
        generated = synth_values(state, &aligned);
        trace(TraceEvent::Line(15));
    }
    if !state.is_finite() {
        return Err(Error::numeric("train_step", "parameters became non-finite"));
    }
    Ok(StepRecord {
        step,
        l_rec: losses.l_rec,
        l_g: losses.l_g,
        l_otm: losses.l_otm,
        l_reg: losses.l_reg,
        total: losses.total,
        l1_gap: gap,
        validation: None,
    })
}

/// Deterministic batch for `step`: indices drawn without replacement from
/// a generator seeded by `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0xD6E8_FEB8_6659_FD93).rotate_left(17));
    index::sample(&mut rng, n, batch_size.min(n)).into_vec()
}

/// Everything the inference pipeline produces for one sample.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Unguided reconstruction (alignment target).
    pub r0: ComplexImage,
    pub field: Option<DeformationField>,
    pub aligned: RasterImage,
    pub synthesized: ComplexImage,
    /// Final, guided reconstruction.
    pub reconstruction: ComplexImage,
}

pub fn infer(state: &ModelState, ablation: Ablation, sample: &Prepared) -> Result<Inference> {
    state.spec.check_input(sample.height, sample.width)?;
    let mut j = Joint::new(state, sample, [false; 5]);
    j.reconstruct(&state.spec);
    j.align(&state.spec, ablation);
    j.synthesize(&state.spec);
    j.guided(&state.spec);
    let (h, w) = (sample.height, sample.width);
    let field = j.field.map(|f| {
        let t = j.g.value(f);
        DeformationField { height: h, width: w, dx: t.channel(0).to_vec(), dy: t.channel(1).to_vec() }
    });
    let inf = Inference {
        r0: ComplexImage::from_tensor(j.g.value(j.r0.unwrap())),
        field,
        aligned: RasterImage::from_f64(h, w, &j.g.value(j.t1a.unwrap()).data),
        synthesized: ComplexImage::from_tensor(j.g.value(j.gen.unwrap())),
        reconstruction: ComplexImage::from_tensor(j.g.value(j.r.unwrap())),
    };
    if inf.reconstruction.is_finite() && inf.synthesized.is_finite() {
        Ok(inf)
    } else {
        Err(Error::numeric("inference", "non-finite output"))
    }
}

/// Per-sample evaluation results.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: usize,
    pub model: SampleMetrics,
    pub zero_filled: SampleMetrics,
    pub l1_gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_field_error: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: MetricReport,
    pub zero_filled: MetricReport,
    pub mean_l1_gap: f64,
    pub mean_endpoint_error: Option<f64>,
    pub mean_zero_field_error: Option<f64>,
    pub samples: Vec<SampleEval>,
}

fn magnitude_raster(x: &ComplexImage) -> RasterImage {
    RasterImage::from_f64(x.height, x.width, &x.magnitude())
}

/// Metrics of the model and of zero-filling against the fully sampled
/// target, on magnitude images with peak 1.
pub fn evaluate(state: &ModelState, ablation: Ablation, samples: &[Prepared]) -> Result<EvalReport> {
    ensure(!samples.is_empty(), || "nothing to evaluate".into())?;
    let per: Vec<SampleEval> = samples
        .par_iter()
        .map(|s| -> Result<SampleEval> {
            let inf = infer(state, ablation, s)?;
            let reference = magnitude_raster(&s.target);
            let key = format!("{:06}", s.id);
            let model = evaluate_sample(&key, &reference, &magnitude_raster(&inf.reconstruction), 1.0)?;
            let zero_filled = evaluate_sample(&key, &reference, &magnitude_raster(&s.zero_filled), 1.0)?;
            let gap = l1_gap(&inf.reconstruction.to_tensor(), &inf.synthesized.to_tensor());
            let (endpoint_error, zero_field_error) = match &s.displacement {
                Some(truth) => {
                    let learned = inf.field.clone().unwrap_or_else(|| DeformationField::zeros(s.height, s.width));
                    let zero = DeformationField::zeros(s.height, s.width);
                    (Some(mean_endpoint_error(&learned, truth)?), Some(mean_endpoint_error(&zero, truth)?))
                }
                None => (None, None),
            };
            Ok(SampleEval { id: s.id, model, zero_filled, l1_gap: gap, endpoint_error, zero_field_error })
        })
        .collect::<Result<Vec<_>>>()?;
    let opt_mean = |f: &dyn Fn(&SampleEval) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = per.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(EvalReport {
        model: MetricReport::aggregate("model", &per.iter().map(|p| p.model.clone()).collect::<Vec<_>>()),
        zero_filled: MetricReport::aggregate("zero-filled", &per.iter().map(|p| p.zero_filled.clone()).collect::<Vec<_>>()),
        mean_l1_gap: mean(&per, |p| p.l1_gap),
        mean_endpoint_error: opt_mean(&|p| p.endpoint_error),
        mean_zero_field_error: opt_mean(&|p| p.zero_field_error),
        samples: per,
    })
}

/// How a [`fit`] run ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum FitStatus {
    MaxSteps,
    Converged { step: u64 },
    /// Training halted; the returned state is the one before `step`.
    Diverged { step: u64, detail: String },
}

pub struct FitResult {
    pub state: ModelState,
    pub optimizer: Adam,
    pub log: TrainLog,
    pub status: FitStatus,
    pub checkpoints: Vec<PathBuf>,
}

/// Optional behaviour of [`fit`].
#[derive(Default)]
pub struct FitOptions {
    /// Directory for periodic checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Validation samples for snapshots; none disables them.
    pub validation: Vec<Prepared>,
}

#[derive(Serialize, Deserialize)]
struct ResumeMeta {
    recent_totals: Vec<f64>,
    config: TrainConfig,
}

pub fn make_checkpoint(state: &ModelState, opt: &Adam, step: u64, recent: &VecDeque<f64>, cfg: &TrainConfig) -> Checkpoint {
    let meta = ResumeMeta { recent_totals: recent.iter().copied().collect(), config: cfg.clone() };
    Checkpoint {
        state: state.clone(),
        step,
        extra: opt.export(),
        meta: serde_json::to_value(meta).expect("metadata serializes"),
    }
}

/// The training configuration stored alongside a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<TrainConfig> {
    let meta: ResumeMeta =
        serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    Ok(meta.config)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.otck")
}

fn snapshot(state: &ModelState, ablation: Ablation, val: &[Prepared]) -> Result<ValSnapshot> {
    let r = evaluate(state, ablation, val)?;
    Ok(ValSnapshot { psnr: r.model.psnr.mean, ssim: r.model.ssim.mean, nmse: r.model.nmse.mean, l1_gap: r.mean_l1_gap })
}

/// Relative change between the means of the last two windows of totals.
fn converged(recent: &VecDeque<f64>, window: usize, tol: f64) -> bool {
    if recent.len() < 2 * window {
        return false;
    }
    let v: Vec<f64> = recent.iter().copied().collect();
    let n = v.len();
    let prev = v[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
    let last = v[n - window..].iter().sum::<f64>() / window as f64;
    (last - prev).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE)
}

/// Repeats [`train_step`] on deterministic batches from `train` until
/// `max_steps`, convergence or divergence.
pub fn fit(train: &[Prepared], cfg: &TrainConfig, options: FitOptions) -> Result<FitResult> {
    cfg.validate()?;
    ensure(!train.is_empty(), || "training split is empty".into())?;
    let (mut state, mut opt, start, mut recent) = match options.resume {
        Some(ck) => {
            ensure(ck.state.spec == cfg.net, || "checkpoint network spec differs from the config".into())?;
            let meta: ResumeMeta =
                serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
            let opt = Adam::import(&ck.state, &ck.extra)?;
            (ck.state, opt, ck.step, meta.recent_totals.into_iter().collect::<VecDeque<_>>())
        }
        None => {
            let state = init_state(&cfg.net, cfg.seed)?;
            let opt = Adam::new(&state);
            (state, opt, 0, VecDeque::new())
        }
    };
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let mut status = FitStatus::MaxSteps;
    let max = cfg.max_steps as u64;
    for step in start + 1..=max {
        let idx = batch_indices(cfg.seed, step, train.len(), cfg.batch_size);
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &train[i]).collect();
        let before = state.clone();
        let before_opt = opt.export();
        let mut record = match train_step(&mut state, &mut opt, &batch, cfg, step, &mut |_| {}) {
            Ok(r) => r,
            Err(e) => {
                status = FitStatus::Diverged { step, detail: e.to_string() };
                state = before;
                opt = Adam::import(&state, &before_opt)?;
                break;
            }
        };
        recent.push_back(record.total);
        while recent.len() > 2 * cfg.convergence_window {
            recent.pop_front();
        }
        let done = converged(&recent, cfg.convergence_window, cfg.convergence_tol);
        let last = step == max || done;
        if !options.validation.is_empty() && (step == 1 || last || (cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0)) {
            record.validation = Some(snapshot(&state, cfg.ablation, &options.validation)?);
        }
        log.push(record)?;
        if let Some(dir) = &options.checkpoint_dir {
            if last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0) {
                let path = dir.join(checkpoint_name(step));
                save_checkpoint(&make_checkpoint(&state, &opt, step, &recent, cfg), &path)?;
                checkpoints.push(path);
            }
        }
        if done {
            status = FitStatus::Converged { step };
            break;
        }
    }
    Ok(FitResult { state, optimizer: opt, log, status, checkpoints })
}

//! Network definitions: the unrolled reconstruction cascade, the
//! deformation generator, the cross-modal synthesis network and the two
//! spectrally normalized critics.
//!
//! Every network is an encoder-decoder ("U-Net") except the critics, which
//! are stacks of non-overlapping 2x2 strided convolutions followed by a
//! global mean and a linear read-out. Non-overlapping patches make each
//! layer's operator norm equal to the spectral norm of its reshaped weight,
//! so normalizing every layer bounds the critic's Lipschitz constant by 1.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{bilinear, Graph, ParamRef, Var};
use crate::imageio::RasterImage;
use crate::kspace::{ComplexImage, SamplingMask};
use crate::tensor::Tensor;
use crate::warp::DeformationField;

pub const THETA: usize = 0;
pub const S: usize = 1;
pub const M: usize = 2;
pub const GAMMA: usize = 3;
pub const OMEGA: usize = 4;
pub const BUNDLE_NAMES: [&str; 5] = ["theta", "s", "m", "gamma", "omega"];

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

/// Architecture of all five networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Down-sampling stages in each encoder (and up-sampling stages in each decoder).
    pub depth: usize,
    pub base_channels: usize,
    /// Unrolled refinement blocks in the reconstruction network.
    pub cascades: usize,
    pub activation: Activation,
    /// Instance normalization in the reconstruction and synthesis U-Nets.
    /// The deformation U-Net is never normalized.
    pub instance_norm: bool,
    pub critic_channels: usize,
    /// Strided 2x2 stages in each critic.
    pub critic_depth: usize,
    /// Standard deviation of the Gaussian low-pass applied to the predicted
    /// deformation, as a fraction of the image width. Zero disables it.
    pub field_smoothing: f64,
    /// Removes the spatial mean of each displacement component.
    pub zero_mean_field: bool,
}

impl NetSpec {
    /// Full-size setting: four down / four up stages, four cascades.
    pub fn full_scale() -> Self {
        NetSpec {
            depth: 4,
            base_channels: 32,
            cascades: 4,
            activation: Activation::Relu,
            instance_norm: true,
            critic_channels: 32,
            critic_depth: 4,
            field_smoothing: 0.0,
            zero_mean_field: false,
        }
    }

    /// Desk-scale setting for 32x32 phantoms.
    pub fn toy() -> Self {
        NetSpec {
            depth: 3,
            base_channels: 6,
            cascades: 2,
            activation: Activation::Relu,
            instance_norm: true,
            critic_channels: 8,
            critic_depth: 3,
            field_smoothing: 0.2,
            zero_mean_field: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.depth >= 2, || format!("encoder depth {} must be at least 2", self.depth))?;
        ensure(self.base_channels >= 1, || "base_channels must be positive".into())?;
        ensure(self.cascades >= 1, || "cascades must be positive".into())?;
        ensure(self.critic_channels >= 1 && self.critic_depth >= 1, || "critic must have at least one stage".into())?;
        ensure(self.field_smoothing.is_finite() && self.field_smoothing >= 0.0, || {
            format!("field_smoothing {} must be finite and non-negative", self.field_smoothing)
        })
    }

    /// Checks that an `h x w` image survives the encoder and critic strides.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        ensure(h % f == 0 && w % f == 0 && h / f >= 2 && w / f >= 2, || {
            format!("{h}x{w} input incompatible with encoder depth {}", self.depth)
        })?;
        let c = 1usize << self.critic_depth;
        ensure(h % c == 0 && w % c == 0, || format!("{h}x{w} input incompatible with critic depth {}", self.critic_depth))
    }

    fn unet_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Named tensor inside a parameter bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Persistent power-iteration state for one spectrally normalized layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    /// Index of the weight tensor inside the bundle.
    pub weight: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBundle {
    pub name: String,
    pub tensors: Vec<NamedTensor>,
    pub spectral: Vec<SpectralState>,
}

impl ParamBundle {
    fn new(name: &str) -> Self {
        ParamBundle { name: name.into(), tensors: Vec::new(), spectral: Vec::new() }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.tensor.is_finite())
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in &self.tensors {
            eat(t.name.as_bytes());
            for &d in &t.tensor.shape {
                eat(&(d as u64).to_le_bytes());
            }
            for v in &t.tensor.data {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Registers every tensor of this bundle on `g`.
    pub fn load(&self, g: &mut Graph, bundle: usize, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(index, t)| g.param(&t.tensor, ParamRef { bundle, index }, trainable))
            .collect()
    }

    /// Runs `iters` power-iteration steps on every normalized layer,
    /// updating the stored singular-vector estimates.
    pub fn refresh_spectral(&mut self, iters: usize) {
        for st in &mut self.spectral {
            let w = &self.tensors[st.weight].tensor;
            let (u, v) = power_iteration(w, iters, Some(&st.u));
            st.u = u;
            st.v = v;
        }
    }

    /// Current spectral-norm estimates `u^T W v` per normalized layer.
    pub fn sigma_estimates(&self) -> Vec<f64> {
        self.spectral
            .iter()
            .map(|st| {
                let w = &self.tensors[st.weight].tensor;
                let rows = w.shape[0];
                bilinear(&w.data, rows, w.len() / rows, &st.u, &st.v)
            })
            .collect()
    }
}

/// The five parameter bundles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: NetSpec,
    pub seed: u64,
    pub bundles: Vec<ParamBundle>,
}

impl ModelState {
    pub fn theta(&self) -> &ParamBundle {
        &self.bundles[THETA]
    }

    pub fn param_count(&self) -> usize {
        self.bundles.iter().map(|b| b.param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.bundles.iter().all(|b| b.is_finite())
    }

    pub fn shapes(&self) -> Vec<Vec<Vec<usize>>> {
        self.bundles.iter().map(|b| b.tensors.iter().map(|t| t.tensor.shape.clone()).collect()).collect()
    }
}

/// `(u, v)` leading singular-vector estimates of `w` viewed as a
/// `shape[0] x rest` matrix.
pub fn power_iteration(w: &Tensor, iters: usize, u0: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let rows = w.shape[0];
    let cols = w.len() / rows;
    let mut u: Vec<f64> = match u0 {
        Some(u) => u.to_vec(),
        None => (0..rows).map(|i| 1.0 + 0.1 * i as f64).collect(),
    };
    normalize(&mut u);
    let mut v = vec![0.0; cols];
    for _ in 0..iters.max(1) {
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..rows).map(|i| w.data[i * cols + j] * u[i]).sum();
        }
        normalize(&mut v);
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = (0..cols).map(|j| w.data[i * cols + j] * v[j]).sum();
        }
        normalize(&mut u);
    }
    (u, v)
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 1e-300 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn he(&mut self, shape: &[usize]) -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| dist.sample(&mut self.rng)).collect())
    }
}

fn push_conv(b: &mut ParamBundle, init: &mut Init, name: &str, cout: usize, cin: usize, k: usize, zero: bool) {
    let w = if zero { Tensor::zeros(&[cout, cin, k, k]) } else { init.he(&[cout, cin, k, k]) };
    b.tensors.push(NamedTensor { name: format!("{name}.w"), tensor: w });
    b.tensors.push(NamedTensor { name: format!("{name}.b"), tensor: Tensor::zeros(&[cout]) });
}

fn push_unet(b: &mut ParamBundle, init: &mut Init, spec: &NetSpec, prefix: &str, cin: usize, cout: usize) {
    let mut prev = cin;
    for l in 0..spec.depth {
        let c = spec.unet_channels(l);
        push_conv(b, init, &format!("{prefix}enc{l}"), c, prev, 3, false);
        prev = c;
    }
    push_conv(b, init, &format!("{prefix}mid"), spec.unet_channels(spec.depth), prev, 3, false);
    for l in (0..spec.depth).rev() {
        let c = spec.unet_channels(l);
        push_conv(b, init, &format!("{prefix}dec{l}"), c, spec.unet_channels(l + 1) + c, 3, false);
    }
    push_conv(b, init, &format!("{prefix}out"), cout, spec.base_channels, 1, true);
}

fn push_critic(b: &mut ParamBundle, init: &mut Init, spec: &NetSpec) {
    let mut prev = 2;
    for l in 0..spec.critic_depth {
        let c = spec.critic_channels << l;
        push_conv(b, init, &format!("l{l}"), c, prev, 2, false);
        prev = c;
    }
    push_conv(b, init, "head", 1, prev, 1, false);
    for i in 0..=spec.critic_depth {
        let weight = 2 * i;
        let (u, v) = power_iteration(&b.tensors[weight].tensor, 30, None);
        b.spectral.push(SpectralState { weight, u, v });
    }
}

/// Input channels of each network: reconstruction refiners see the
/// current estimate (2) plus a guide magnitude (1); the deformation
/// generator sees the auxiliary image and the target magnitude; the
/// synthesis network sees the aligned auxiliary image.
pub const RECON_IN: usize = 3;
pub const ALIGN_IN: usize = 2;
pub const SYNTH_IN: usize = 1;

/// Deterministic initialization; output layers of the refiners and of the
/// deformation generator start at zero.
pub fn init_state(spec: &NetSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut bundles = Vec::with_capacity(5);
    for (idx, name) in BUNDLE_NAMES.iter().enumerate() {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed ^ ((idx as u64 + 1) << 48)) };
        let mut b = ParamBundle::new(name);
        match idx {
            THETA => {
                for c in 0..spec.cascades {
                    push_unet(&mut b, &mut init, spec, &format!("c{c}."), RECON_IN, 2);
                }
            }
            S => push_unet(&mut b, &mut init, spec, "", ALIGN_IN, 2),
            M => push_unet(&mut b, &mut init, spec, "", SYNTH_IN, 2),
            _ => push_critic(&mut b, &mut init, spec),
        }
        bundles.push(b);
    }
    Ok(ModelState { spec: spec.clone(), seed, bundles })
}

/// Closed-form parameter counts `(unet(cin, cout), critic)`.
pub fn unet_param_count(spec: &NetSpec, cin: usize, cout: usize) -> usize {
    let c = |l: usize| spec.base_channels << l;
    let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
    let mut n = 0;
    let mut prev = cin;
    for l in 0..spec.depth {
        n += conv(c(l), prev, 3);
        prev = c(l);
    }
    n += conv(c(spec.depth), prev, 3);
    for l in 0..spec.depth {
        n += conv(c(l), c(l + 1) + c(l), 3);
    }
    n + conv(cout, c(0), 1)
}

/// Graph-side forward passes. Each takes the `Var`s returned by
/// [`ParamBundle::load`] for the matching bundle.
pub mod forward {
    use super::*;

    fn conv_block(g: &mut Graph, spec: &NetSpec, p: &[Var], at: usize, x: Var, norm: bool) -> Var {
        let mut y = g.conv2d(x, p[at], Some(p[at + 1]), 1, 1);
        if norm {
            y = g.instance_norm(y);
        }
        match spec.activation {
            Activation::Relu => g.relu(y),
            Activation::LeakyRelu => g.leaky_relu(y, LEAKY_SLOPE),
        }
    }

    /// Number of tensors one U-Net occupies in a bundle.
    pub fn unet_tensors(spec: &NetSpec) -> usize {
        2 * (2 * spec.depth + 2)
    }

    /// U-Net whose tensors start at `p[0]`; `norm` enables instance
    /// normalization after every convolution block.
    pub fn unet(g: &mut Graph, spec: &NetSpec, p: &[Var], x: Var, norm: bool) -> Var {
        let mut at = 0;
        let mut skips = Vec::with_capacity(spec.depth);
        let mut h = x;
        for _ in 0..spec.depth {
            h = conv_block(g, spec, p, at, h, norm);
            at += 2;
            skips.push(h);
            h = g.avg_pool2(h);
        }
        h = conv_block(g, spec, p, at, h, norm);
        at += 2;
        for _ in 0..spec.depth {
            let up = g.upsample2(h);
            let skip = skips.pop().unwrap();
            let cat = g.concat(&[up, skip]);
            h = conv_block(g, spec, p, at, cat, norm);
            at += 2;
        }
        g.conv2d(h, p[at], Some(p[at + 1]), 1, 0)
    }

    /// Unrolled cascade: `x <- DC(x + refine_k([x, guide]))`.
    pub fn reconstruct(
        g: &mut Graph,
        spec: &NetSpec,
        theta: &[Var],
        x_under: Var,
        guide: Var,
        measured: &ComplexImage,
        keep: &Arc<Vec<bool>>,
    ) -> Var {
        let per = unet_tensors(spec);
        let mut x = x_under;
        for c in 0..spec.cascades {
            let inp = g.concat(&[x, guide]);
            let delta = unet(g, spec, &theta[c * per..(c + 1) * per], inp, spec.instance_norm);
            let sum = g.add(x, delta);
            x = g.data_consistency(sum, measured, keep.clone());
        }
        x
    }

    /// Deformation field `[dx, dy]` from the auxiliary image and the target
    /// magnitude.
    pub fn deformation(g: &mut Graph, spec: &NetSpec, s: &[Var], t1: Var, target_mag: Var) -> Var {
        let inp = g.concat(&[t1, target_mag]);
        let mut field = unet(g, spec, s, inp, false);
        if spec.field_smoothing > 0.0 {
            let (_, _, w) = g.value(field).chw();
            field = g.gaussian_blur(field, spec.field_smoothing * w as f64);
        }
        if spec.zero_mean_field {
            field = g.center(field);
        }
        field
    }

    pub fn synthesize(g: &mut Graph, spec: &NetSpec, m: &[Var], t1a: Var) -> Var {
        unet(g, spec, m, t1a, spec.instance_norm)
    }

    /// Scalar critic output; every weight goes through spectral
    /// normalization with the bundle's stored singular vectors.
    pub fn critic(g: &mut Graph, spec: &NetSpec, bundle: &ParamBundle, p: &[Var], x: Var) -> Var {
        let mut h = x;
        for l in 0..spec.critic_depth {
            let st = &bundle.spectral[l];
            let w = g.spectral_norm(p[st.weight], &st.u, &st.v);
            h = g.conv2d(h, w, Some(p[st.weight + 1]), 2, 0);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = g.global_mean(h);
        let st = &bundle.spectral[spec.critic_depth];
        let w = g.spectral_norm(p[st.weight], &st.u, &st.v);
        let out = g.conv2d(pooled, w, Some(p[st.weight + 1]), 1, 0);
        g.sum(out)
    }
}

fn tensor1(h: usize, w: usize, v: &[f64]) -> Tensor {
    Tensor::from_vec(&[1, h, w], v.to_vec())
}

fn check_numeric(t: &Tensor, context: impl FnOnce() -> String) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(context(), "non-finite activations"))
    }
}

/// Runs the reconstruction cascade. `guide` is the magnitude of a
/// synthesized target-contrast image, or `None` for an all-zero guide.
pub fn reconstruct(
    state: &ModelState,
    x_under: &ComplexImage,
    measured: &ComplexImage,
    mask: &SamplingMask,
    guide: Option<&[f64]>,
) -> Result<ComplexImage> {
    let (h, w) = (x_under.height, x_under.width);
    ensure(measured.height == h && measured.width == w && mask.height == h && mask.width == w, || {
        "reconstruct: input, k-space and mask shapes differ".into()
    })?;
    state.spec.check_input(h, w)?;
    let mut g = Graph::new();
    let theta = state.bundles[THETA].load(&mut g, THETA, false);
    let guide = match guide {
        Some(v) => {
            ensure(v.len() == h * w, || "reconstruct: guide shape mismatch".into())?;
            g.constant(tensor1(h, w, v))
        }
        None => g.constant(Tensor::zeros(&[1, h, w])),
    };
    let keep = Arc::new(mask.keep.clone());
    let per = forward::unet_tensors(&state.spec);
    let mut x = g.constant(x_under.to_tensor());
    for c in 0..state.spec.cascades {
        let inp = g.concat(&[x, guide]);
        let delta = forward::unet(&mut g, &state.spec, &theta[c * per..(c + 1) * per], inp, state.spec.instance_norm);
        check_numeric(g.value(delta), || format!("reconstruction cascade {c}"))?;
        let sum = g.add(x, delta);
        x = g.data_consistency(sum, measured, keep.clone());
    }
    Ok(ComplexImage::from_tensor(g.value(x)))
}

/// Predicts the deformation aligning `x_t1` to the reconstructed target and
/// returns it together with the warped auxiliary image.
pub fn align(state: &ModelState, x_t1: &RasterImage, x_t2r: &ComplexImage) -> Result<(DeformationField, RasterImage)> {
    let (h, w) = (x_t1.height, x_t1.width);
    ensure(x_t1.channels == 1, || "align: auxiliary image must be single-channel".into())?;
    ensure(x_t2r.height == h && x_t2r.width == w, || "align: image shapes differ".into())?;
    state.spec.check_input(h, w)?;
    let mut g = Graph::new();
    let s = state.bundles[S].load(&mut g, S, false);
    let t1 = g.constant(tensor1(h, w, &x_t1.to_f64()));
    let mag = g.constant(tensor1(h, w, &x_t2r.magnitude()));
    let field = forward::deformation(&mut g, &state.spec, &s, t1, mag);
    check_numeric(g.value(field), || "deformation generator".into())?;
    let warped = g.warp(t1, field);
    let f = g.value(field);
    let df = DeformationField { height: h, width: w, dx: f.channel(0).to_vec(), dy: f.channel(1).to_vec() };
    Ok((df, RasterImage::from_f64(h, w, &g.value(warped).data)))
}

pub fn synthesize(state: &ModelState, x_t1a: &RasterImage) -> Result<ComplexImage> {
    let (h, w) = (x_t1a.height, x_t1a.width);
    ensure(x_t1a.channels == 1, || "synthesize: input must be single-channel".into())?;
    let input = x_t1a.to_f64();
    ensure(input.iter().all(|v| v.is_finite()), || "synthesize: non-finite input".into())?;
    state.spec.check_input(h, w)?;
    let mut g = Graph::new();
    let m = state.bundles[M].load(&mut g, M, false);
    let x = g.constant(tensor1(h, w, &input));
    let out = forward::synthesize(&mut g, &state.spec, &m, x);
    check_numeric(g.value(out), || "synthesis network".into())?;
    Ok(ComplexImage::from_tensor(g.value(out)))
}

/// Critic potential of `img` under `bundle` (either `GAMMA` or `OMEGA`).
pub fn critic_value(spec: &NetSpec, bundle: &ParamBundle, img: &ComplexImage) -> Result<f64> {
    ensure(img.is_finite(), || "critic: non-finite input".into())?;
    let mut g = Graph::new();
    let p = bundle.load(&mut g, GAMMA, false);
    let x = g.constant(img.to_tensor());
    let out = forward::critic(&mut g, spec, bundle, &p, x);
    let v = g.value(out).item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric("critic", "non-finite output"))
    }
}

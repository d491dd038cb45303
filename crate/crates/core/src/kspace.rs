//! Fourier-domain forward model built on centered orthonormal FFTs.
//! Sampling masks may be Cartesian or radial; data consistency re-inserts
//! the acquired samples after each reconstruction stage.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Share of kept columns reserved for the contiguous low-frequency core.
pub const LOW_FREQ_SHARE: f64 = 0.32;

/// 2-D complex raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl ComplexImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexImage { height, width, data: vec![Complex64::new(0.0, 0.0); height * width] }
    }

    pub fn from_real(height: usize, width: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), height * width);
        ComplexImage {
            height,
            width,
            data: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn from_parts(height: usize, width: usize, re: &[f64], im: &[f64]) -> Self {
        assert_eq!(re.len(), height * width);
        assert_eq!(im.len(), height * width);
        ComplexImage {
            height,
            width,
            data: re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect(),
        }
    }

    /// Two-channel `[re, im]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(2 * n);
        data.extend(self.data.iter().map(|c| c.re));
        data.extend(self.data.iter().map(|c| c.im));
        Tensor::from_vec(&[2, self.height, self.width], data)
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (c, h, w) = t.chw();
        assert_eq!(c, 2, "complex tensor needs two channels");
        ComplexImage::from_parts(h, w, t.channel(0), t.channel(1))
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    fn check_shape(&self, other_h: usize, other_w: usize, what: &str) -> Result<()> {
        ensure(self.height == other_h && self.width == other_w, || {
            format!(
                "{what}: shape {}x{} does not match {}x{}",
                self.height, self.width, other_h, other_w
            )
        })
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn roll2(data: &[Complex64], h: usize, w: usize, sy: usize, sx: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for y in 0..h {
        let ty = (y + sy) % h;
        for x in 0..w {
            out[ty * w + (x + sx) % w] = data[y * w + x];
        }
    }
    out
}

fn fft2_inplace(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let row = if inverse { p.plan_fft_inverse(w) } else { p.plan_fft_forward(w) };
        let col = if inverse { p.plan_fft_inverse(h) } else { p.plan_fft_forward(h) };
        row.process(buf);
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
    });
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

fn centered(img: &ComplexImage, inverse: bool) -> ComplexImage {
    let (h, w) = (img.height, img.width);
    // ifftshift, transform, fftshift
    let mut buf = roll2(&img.data, h, w, h - h / 2, w - w / 2);
    fft2_inplace(&mut buf, h, w, inverse);
    ComplexImage { height: h, width: w, data: roll2(&buf, h, w, h / 2, w / 2) }
}

pub(crate) fn fft2c_unchecked(img: &ComplexImage) -> ComplexImage {
    centered(img, false)
}

pub(crate) fn ifft2c_unchecked(img: &ComplexImage) -> ComplexImage {
    centered(img, true)
}

/// Centered, orthonormal 2-D DFT. Zero frequency lands at `(h/2, w/2)`.
pub fn fft2c(img: &ComplexImage) -> Result<ComplexImage> {
    ensure(img.is_finite(), || "fft2c input contains non-finite values".into())?;
    Ok(centered(img, false))
}

/// Inverse of [`fft2c`].
pub fn ifft2c(kspace: &ComplexImage) -> Result<ComplexImage> {
    ensure(kspace.is_finite(), || "ifft2c input contains non-finite values".into())?;
    Ok(centered(kspace, true))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskScheme {
    Random,
    Equispaced,
    Radial,
}

impl fmt::Display for MaskScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskScheme::Random => "random",
            MaskScheme::Equispaced => "equispaced",
            MaskScheme::Radial => "radial",
        })
    }
}

impl FromStr for MaskScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskScheme::Random),
            "equispaced" => Ok(MaskScheme::Equispaced),
            "radial" => Ok(MaskScheme::Radial),
            other => Err(Error::Validation(format!("unknown mask scheme '{other}'"))),
        }
    }
}

/// Binary keep/drop pattern over a centered k-space grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pub scheme: MaskScheme,
    pub ratio: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub keep: Vec<bool>,
}

impl SamplingMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept() as f64 / self.keep.len() as f64
    }

    pub fn is_kept(&self, y: usize, x: usize) -> bool {
        self.keep[y * self.width + x]
    }

    /// Columns whose every row is kept.
    pub fn full_columns(&self) -> Vec<usize> {
        (0..self.width)
            .filter(|&x| (0..self.height).all(|y| self.is_kept(y, x)))
            .collect()
    }

    /// Column range `[start, end)` of the low-frequency core for a given
    /// number of kept columns.
    pub fn core_columns(width: usize, kept_columns: usize) -> std::ops::Range<usize> {
        let core = ((LOW_FREQ_SHARE * kept_columns as f64).floor() as usize).max(1);
        let start = width / 2 - core / 2;
        start..start + core
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }

    pub fn all(height: usize, width: usize) -> Self {
        SamplingMask {
            scheme: MaskScheme::Random,
            ratio: 1.0,
            height,
            width,
            seed: 0,
            keep: vec![true; height * width],
        }
    }
}

/// Builds a sampling mask.
///
/// Random and equispaced schemes keep whole phase-encode columns, always
/// including a centered low-frequency block of `floor(0.32 * kept)` columns
/// (minimum one). The radial scheme keeps grid samples nearest to
/// `ceil(ratio * max(h, w) * pi / 2)` equiangular diameters, then trims or
/// pads by distance to the center if the density is more than 5% off.
pub fn make_mask(
    scheme: MaskScheme,
    ratio: f64,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<SamplingMask> {
    ensure(ratio > 0.0 && ratio <= 1.0, || format!("mask ratio {ratio} outside (0, 1]"))?;
    ensure(height > 0 && width > 0, || "mask must have non-empty shape".into())?;
    let keep = match scheme {
        MaskScheme::Random | MaskScheme::Equispaced => {
            column_mask(scheme, ratio, height, width, seed)
        }
        MaskScheme::Radial if ratio >= 1.0 => vec![true; height * width],
        MaskScheme::Radial => radial_mask(ratio, height, width),
    };
    Ok(SamplingMask { scheme, ratio, height, width, seed, keep })
}

fn column_mask(scheme: MaskScheme, ratio: f64, height: usize, width: usize, seed: u64) -> Vec<bool> {
    let kept = ((ratio * width as f64).round() as usize).clamp(1, width);
    let core = SamplingMask::core_columns(width, kept);
    let outer: Vec<usize> = (0..width).filter(|x| !core.contains(x)).collect();
    let needed = kept - core.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<usize> = core.collect();
    if needed > 0 {
        match scheme {
            MaskScheme::Equispaced => {
                let stride = outer.len() as f64 / needed as f64;
                let offset = rng.random::<f64>() * stride;
                columns.extend((0..needed).map(|k| outer[(offset + k as f64 * stride) as usize]));
            }
            _ => {
                let picks = index::sample(&mut rng, outer.len(), needed);
                columns.extend(picks.into_iter().map(|i| outer[i]));
            }
        }
    }
    let mut keep = vec![false; height * width];
    for x in columns {
        for y in 0..height {
            keep[y * width + x] = true;
        }
    }
    keep
}

fn radial_mask(ratio: f64, height: usize, width: usize) -> Vec<bool> {
    let total = height * width;
    let target = ((ratio * total as f64).round() as usize).clamp(1, total);
    let (cy, cx) = ((height / 2) as f64, (width / 2) as f64);
    let lines = (ratio * height.max(width) as f64 * std::f64::consts::FRAC_PI_2).ceil() as usize;
    let radius = (height.max(width) as f64) * std::f64::consts::SQRT_2 / 2.0 + 1.0;
    let mut keep = vec![false; total];
    for k in 0..lines.max(1) {
        let theta = k as f64 * std::f64::consts::PI / lines.max(1) as f64;
        let (dy, dx) = (theta.sin(), theta.cos());
        let steps = (2.0 * radius / 0.5) as i64;
        for s in 0..=steps {
            let t = -radius + s as f64 * 0.5;
            let y = (cy + t * dy).round();
            let x = (cx + t * dx).round();
            if y >= 0.0 && x >= 0.0 && (y as usize) < height && (x as usize) < width {
                keep[y as usize * width + x as usize] = true;
            }
        }
    }
    let count = keep.iter().filter(|&&k| k).count();
    if (count as f64 / target as f64 - 1.0).abs() > 0.05 {
        // order samples by distance to the center, ties by raster index
        let mut order: Vec<usize> = (0..total).collect();
        let dist = |i: usize| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            (y - cy).powi(2) + (x - cx).powi(2)
        };
        order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        if count > target {
            let mut excess = count - target;
            for &i in order.iter().rev() {
                if excess == 0 {
                    break;
                }
                if keep[i] {
                    keep[i] = false;
                    excess -= 1;
                }
            }
        } else {
            let mut missing = target - count;
            for &i in &order {
                if missing == 0 {
                    break;
                }
                if !keep[i] {
                    keep[i] = true;
                    missing -= 1;
                }
            }
        }
    }
    keep
}

/// `mask ⊙ fft2c(x)`: the acquired k-space samples.
pub fn measure(x: &ComplexImage, mask: &SamplingMask) -> Result<ComplexImage> {
    x.check_shape(mask.height, mask.width, "measure")?;
    let mut k = fft2c(x)?;
    for (v, &keep) in k.data.iter_mut().zip(&mask.keep) {
        if !keep {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    Ok(k)
}

/// Zero-filled reconstruction `ifft2c(mask ⊙ fft2c(x))`.
pub fn undersample(x: &ComplexImage, mask: &SamplingMask) -> Result<ComplexImage> {
    let k = measure(x, mask)?;
    Ok(ifft2c_unchecked(&k))
}

/// Replaces the k-space of `current` with `measured` at kept locations.
pub fn data_consistency(
    current: &ComplexImage,
    measured: &ComplexImage,
    mask: &SamplingMask,
) -> Result<ComplexImage> {
    current.check_shape(mask.height, mask.width, "data_consistency current")?;
    measured.check_shape(mask.height, mask.width, "data_consistency measured")?;
    let mut k = fft2c(current)?;
    ensure(measured.is_finite(), || "measured k-space contains non-finite values".into())?;
    for ((v, m), &keep) in k.data.iter_mut().zip(&measured.data).zip(&mask.keep) {
        if keep {
            *v = *m;
        }
    }
    Ok(ifft2c_unchecked(&k))
}

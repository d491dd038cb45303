//! PSNR, SSIM and NMSE on magnitude images, plus aggregate reports.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imageio::RasterImage;

/// SSIM local window side.
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;

/// A PSNR value; identical images have no finite PSNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }

    /// Numeric value; the infinite case maps to `f64::INFINITY`.
    pub fn value(&self) -> f64 {
        match *self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

fn check_pair(reference: &RasterImage, estimate: &RasterImage) -> Result<()> {
    ensure(
        reference.height == estimate.height && reference.width == estimate.width && reference.channels == estimate.channels,
        || {
            format!(
                "metric inputs differ in shape: {}x{}x{} vs {}x{}x{}",
                reference.channels, reference.height, reference.width, estimate.channels, estimate.height, estimate.width
            )
        },
    )?;
    ensure(!reference.data.is_empty(), || "metric inputs are empty".into())
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn psnr(reference: &RasterImage, estimate: &RasterImage, peak: f64) -> Result<Psnr> {
    check_pair(reference, estimate)?;
    ensure(peak > 0.0 && peak.is_finite(), || format!("peak {peak} must be positive"))?;
    let e = mse(&reference.data, &estimate.data);
    Ok(if e == 0.0 { Psnr::Infinite } else { Psnr::Finite(10.0 * (peak * peak / e).log10()) })
}

/// Mean SSIM over all fully contained `7x7` windows, averaged over
/// channels.
pub fn ssim(reference: &RasterImage, estimate: &RasterImage) -> Result<f64> {
    check_pair(reference, estimate)?;
    let (h, w) = (reference.height, reference.width);
    ensure(h >= SSIM_WINDOW && w >= SSIM_WINDOW, || {
        format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    })?;
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..reference.channels as usize {
        let a = &reference.data[ch * plane..(ch + 1) * plane];
        let b = &estimate.data[ch * plane..(ch + 1) * plane];
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (p, q) = (a[y * w + x] as f64, b[y * w + x] as f64);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                // unbiased local statistics
                let va = (saa - n * ma * ma) / (n - 1.0);
                let vb = (sbb - n * mb * mb) / (n - 1.0);
                let cov = (sab - n * ma * mb) / (n - 1.0);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn nmse(reference: &RasterImage, estimate: &RasterImage) -> Result<f64> {
    check_pair(reference, estimate)?;
    let energy: f64 = reference.data.iter().map(|&v| (v as f64).powi(2)).sum();
    ensure(energy > 0.0, || "nmse reference has zero energy".into())?;
    Ok(mse(&reference.data, &estimate.data) * reference.data.len() as f64 / energy)
}

/// Metrics of one estimate against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr: Psnr,
    pub ssim: f64,
    pub nmse: f64,
}

pub fn evaluate_sample(id: &str, reference: &RasterImage, estimate: &RasterImage, peak: f64) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: id.to_string(),
        psnr: psnr(reference, estimate, peak)?,
        ssim: ssim(reference, estimate)?,
        nmse: nmse(reference, estimate)?,
    })
}

/// Mean and (population) standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

/// Aggregate over a set of samples. PSNR statistics cover the finite
/// values only; `psnr_infinite` counts the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub n_samples: usize,
    pub psnr: Stat,
    pub psnr_infinite: usize,
    pub ssim: Stat,
    pub nmse: Stat,
}

impl MetricReport {
    /// Aggregates samples in id order so the result does not depend on
    /// the order they were computed in.
    pub fn aggregate(label: &str, samples: &[SampleMetrics]) -> MetricReport {
        let mut sorted: Vec<&SampleMetrics> = samples.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let finite: Vec<f64> = sorted.iter().filter_map(|s| match s.psnr {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }).collect();
        MetricReport {
            label: label.to_string(),
            n_samples: sorted.len(),
            psnr: Stat::of(&finite),
            psnr_infinite: sorted.len() - finite.len(),
            ssim: Stat::of(&sorted.iter().map(|s| s.ssim).collect::<Vec<_>>()),
            nmse: Stat::of(&sorted.iter().map(|s| s.nmse).collect::<Vec<_>>()),
        }
    }

    pub fn psnr_cell(&self) -> String {
        if self.psnr_infinite == self.n_samples && self.n_samples > 0 {
            "inf".to_string()
        } else if self.psnr_infinite > 0 {
            format!("{:.2} ± {:.2} (+{} inf)", self.psnr.mean, self.psnr.std, self.psnr_infinite)
        } else {
            format!("{:.2} ± {:.2}", self.psnr.mean, self.psnr.std)
        }
    }
}

/// Renders reports as an aligned table with one row per method.
pub fn format_table(title: &str, reports: &[MetricReport]) -> String {
    let header = ["Method", "PSNR (dB)", "SSIM", "NMSE"];
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.psnr_cell(),
                format!("{:.4} ± {:.4}", r.ssim.mean, r.ssim.std),
                format!("{:.4} ± {:.4}", r.nmse.mean, r.nmse.std),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect::<Vec<_>>().join(" | ")
    };
    let mut out = format!(
        "{title}\nSSIM window {SSIM_WINDOW}x{SSIM_WINDOW}, k1={SSIM_K1}, k2={SSIM_K2}, L={SSIM_RANGE}\n"
    );
    out.push_str(&line(&header.map(String::from)));
    out.push('\n');
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

//! Dense displacement fields, bilinear resampling and the edge-aware
//! smoothness penalty on displacement fields.

use crate::error::{ensure, Result};
use crate::imageio::RasterImage;

/// Per-pixel displacement in pixel units. `dx` moves along columns, `dy`
/// along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DeformationField {
    pub fn zeros(height: usize, width: usize) -> Self {
        DeformationField { height, width, dx: vec![0.0; height * width], dy: vec![0.0; height * width] }
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        DeformationField { height, width, dx: vec![dx; height * width], dy: vec![dy; height * width] }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx.iter().zip(&self.dy).map(|(x, y)| x.hypot(*y)).fold(0.0, f64::max)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.dx.len().max(1) as f64;
        self.dx.iter().zip(&self.dy).map(|(x, y)| x.hypot(*y)).sum::<f64>() / n
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }

    /// Two-channel raster `[dx, dy]`.
    pub fn to_raster(&self) -> RasterImage {
        let data = self.dx.iter().chain(&self.dy).map(|&v| v as f32).collect();
        RasterImage { height: self.height, width: self.width, channels: 2, data }
    }

    pub fn from_raster(r: &RasterImage) -> Result<Self> {
        ensure(r.channels == 2, || format!("deformation raster needs 2 channels, got {}", r.channels))?;
        let n = r.height * r.width;
        Ok(DeformationField {
            height: r.height,
            width: r.width,
            dx: r.data[..n].iter().map(|&v| v as f64).collect(),
            dy: r.data[n..].iter().map(|&v| v as f64).collect(),
        })
    }
}

/// Mean Euclidean distance between corresponding displacement vectors.
pub fn mean_endpoint_error(a: &DeformationField, b: &DeformationField) -> Result<f64> {
    ensure(a.height == b.height && a.width == b.width, || "endpoint error: field shapes differ".into())?;
    let n = a.dx.len().max(1) as f64;
    Ok(a.dx
        .iter()
        .zip(&a.dy)
        .zip(b.dx.iter().zip(&b.dy))
        .map(|((ax, ay), (bx, by))| (ax - bx).hypot(ay - by))
        .sum::<f64>()
        / n)
}

#[derive(Clone, Copy)]
struct Tap {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: f64,
    fx: f64,
    // whether the coordinate was strictly inside the clamp range
    free_y: bool,
    free_x: bool,
}

#[inline]
fn tap(h: usize, w: usize, y: f64, x: f64) -> Tap {
    let ymax = (h - 1) as f64;
    let xmax = (w - 1) as f64;
    let free_y = y > 0.0 && y < ymax;
    let free_x = x > 0.0 && x < xmax;
    let yc = y.clamp(0.0, ymax);
    let xc = x.clamp(0.0, xmax);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    Tap {
        y0,
        x0,
        y1: (y0 + 1).min(h - 1),
        x1: (x0 + 1).min(w - 1),
        fy: yc - y0 as f64,
        fx: xc - x0 as f64,
        free_y,
        free_x,
    }
}

/// Resamples each channel of `src` (`channels` planes of `h*w`) at
/// `p + field(p)`, bilinear with border clamp.
pub fn warp_planes(src: &[f64], channels: usize, h: usize, w: usize, dx: &[f64], dy: &[f64]) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; channels * n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = tap(h, w, y as f64 + dy[p], x as f64 + dx[p]);
            for c in 0..channels {
                let s = &src[c * n..(c + 1) * n];
                let top = s[t.y0 * w + t.x0] * (1.0 - t.fx) + s[t.y0 * w + t.x1] * t.fx;
                let bot = s[t.y1 * w + t.x0] * (1.0 - t.fx) + s[t.y1 * w + t.x1] * t.fx;
                out[c * n + p] = top * (1.0 - t.fy) + bot * t.fy;
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`warp_planes`]: returns gradients with
/// respect to the source planes and to `(dx, dy)`.
pub(crate) fn warp_planes_backward(
    src: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    dx: &[f64],
    dy: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = h * w;
    let mut g_src = vec![0.0; channels * n];
    let mut g_dx = vec![0.0; n];
    let mut g_dy = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = tap(h, w, y as f64 + dy[p], x as f64 + dx[p]);
            for c in 0..channels {
                let g = grad_out[c * n + p];
                if g == 0.0 {
                    continue;
                }
                let s = &src[c * n..(c + 1) * n];
                let gs = &mut g_src[c * n..(c + 1) * n];
                gs[t.y0 * w + t.x0] += g * (1.0 - t.fy) * (1.0 - t.fx);
                gs[t.y0 * w + t.x1] += g * (1.0 - t.fy) * t.fx;
                gs[t.y1 * w + t.x0] += g * t.fy * (1.0 - t.fx);
                gs[t.y1 * w + t.x1] += g * t.fy * t.fx;
                let (v00, v01) = (s[t.y0 * w + t.x0], s[t.y0 * w + t.x1]);
                let (v10, v11) = (s[t.y1 * w + t.x0], s[t.y1 * w + t.x1]);
                if t.free_x {
                    g_dx[p] += g * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                }
                if t.free_y {
                    g_dy[p] += g * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                }
            }
        }
    }
    (g_src, g_dx, g_dy)
}

/// `out(p) = img(p + field(p))`, bilinear with border clamp, per channel.
pub fn warp_image(img: &RasterImage, field: &DeformationField) -> Result<RasterImage> {
    ensure(img.height == field.height && img.width == field.width, || {
        format!(
            "warp: image {}x{} vs field {}x{}",
            img.height, img.width, field.height, field.width
        )
    })?;
    let src: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let out = warp_planes(&src, img.channels as usize, img.height, img.width, &field.dx, &field.dy);
    Ok(RasterImage {
        height: img.height,
        width: img.width,
        channels: img.channels,
        data: out.into_iter().map(|v| v as f32).collect(),
    })
}

/// Edge-stopping weight `exp(-|va - vb|)`.
pub fn bilateral_weight(va: f64, vb: f64) -> f64 {
    (-(va - vb).abs()).exp()
}

/// Number of unordered 4-neighbor pairs on an `h x w` grid.
pub fn neighbor_pairs(h: usize, w: usize) -> usize {
    h * w.saturating_sub(1) + w * h.saturating_sub(1)
}

/// Sum over unordered 4-neighbor pairs `(a, b)` of
/// `exp(-|guide[a] - guide[b]|) * ||phi(a) - phi(b)||_2`.
pub(crate) fn smoothness_planes(h: usize, w: usize, dx: &[f64], dy: &[f64], guide: &[f64]) -> f64 {
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let b = y * w + x;
            for a in [(x + 1 < w).then(|| b + 1), (y + 1 < h).then(|| b + w)].into_iter().flatten() {
                let norm = (dx[a] - dx[b]).hypot(dy[a] - dy[b]);
                total += bilateral_weight(guide[a], guide[b]) * norm;
            }
        }
    }
    total
}

/// Gradient of [`smoothness_planes`] with respect to `(dx, dy)`; the
/// subgradient at coincident neighbors is taken as zero.
pub(crate) fn smoothness_planes_grad(
    h: usize,
    w: usize,
    dx: &[f64],
    dy: &[f64],
    guide: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let b = y * w + x;
            for a in [(x + 1 < w).then(|| b + 1), (y + 1 < h).then(|| b + w)].into_iter().flatten() {
                let (ex, ey) = (dx[a] - dx[b], dy[a] - dy[b]);
                let norm = ex.hypot(ey);
                if norm == 0.0 {
                    continue;
                }
                let k = bilateral_weight(guide[a], guide[b]) / norm;
                gx[a] += k * ex;
                gx[b] -= k * ex;
                gy[a] += k * ey;
                gy[b] -= k * ey;
            }
        }
    }
    (gx, gy)
}

/// Edge-aware smoothness penalty of `field`, weighted by a single-channel
/// guide image (the aligned auxiliary image during training).
pub fn smoothness_loss(field: &DeformationField, guide: &RasterImage) -> Result<f64> {
    ensure(guide.channels == 1, || "smoothness guide must be single-channel".into())?;
    ensure(guide.height == field.height && guide.width == field.width, || {
        "smoothness: field and guide shapes differ".into()
    })?;
    let g: Vec<f64> = guide.data.iter().map(|&v| v as f64).collect();
    Ok(smoothness_planes(field.height, field.width, &field.dx, &field.dy, &g))
}

/// Gradient of [`smoothness_loss`] with respect to the field.
pub fn smoothness_loss_grad(field: &DeformationField, guide: &RasterImage) -> Result<DeformationField> {
    ensure(guide.height == field.height && guide.width == field.width && guide.channels == 1, || {
        "smoothness: field and guide shapes differ".into()
    })?;
    let g: Vec<f64> = guide.data.iter().map(|&v| v as f64).collect();
    let (dx, dy) = smoothness_planes_grad(field.height, field.width, &field.dx, &field.dy, &g);
    Ok(DeformationField { height: field.height, width: field.width, dx, dy })
}

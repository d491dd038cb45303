//! Static figures: violin plots as SVG and grayscale error maps as PNG.

use std::fmt::Write as _;
use std::path::Path;

use otrecon::{Error, Result};

const WIDTH: f64 = 520.0;
const HEIGHT: f64 = 380.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const KDE_POINTS: usize = 64;
const COLORS: [&str; 4] = ["#8c9eb5", "#d9825b", "#6fae7c", "#b07cc6"];

/// Gaussian kernel density with Silverman's bandwidth, evaluated on `grid`.
pub fn kde(values: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let bw = (1.06 * sd * n.powf(-0.2)).max(1e-3);
    grid.iter()
        .map(|&g| values.iter().map(|&v| (-0.5 * ((g - v) / bw).powi(2)).exp()).sum::<f64>() / (n * bw * (2.0 * std::f64::consts::PI).sqrt()))
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Violin plot with overlaid sample points and a median bar per group.
/// Non-finite values are left out of the density and counted in the label.
pub fn violin_svg(title: &str, y_label: &str, groups: &[(&str, Vec<f64>)]) -> String {
    let finite: Vec<Vec<f64>> = groups.iter().map(|(_, v)| v.iter().copied().filter(|x| x.is_finite()).collect()).collect();
    let all: Vec<f64> = finite.iter().flatten().copied().collect();
    let (lo, hi) = if all.is_empty() {
        (0.0, 1.0)
    } else {
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.1).max(0.5);
        (lo - pad, hi + pad)
    };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y_of = |v: f64| TOP + plot_h * (1.0 - (v - lo) / (hi - lo));
    let slot = plot_w / groups.len().max(1) as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/><line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    for k in 0..=5 {
        let v = lo + (hi - lo) * k as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="black"/><line x1="{LEFT}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#e4e4e4"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            LEFT - 4.0,
            LEFT + plot_w,
            LEFT - 7.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + plot_h / 2.0,
        escape(y_label)
    );

    for (gi, ((name, raw), values)) in groups.iter().zip(&finite).enumerate() {
        let cx = LEFT + slot * (gi as f64 + 0.5);
        let color = COLORS[gi % COLORS.len()];
        let skipped = raw.len() - values.len();
        let label = if skipped > 0 { format!("{name} (+{skipped} inf)") } else { name.to_string() };
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            TOP + plot_h + 20.0,
            escape(&label)
        );
        if values.is_empty() {
            continue;
        }
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let (vmin, vmax) = (sorted[0], sorted[sorted.len() - 1]);
        let spread = (vmax - vmin).max(1e-6);
        let grid: Vec<f64> = (0..KDE_POINTS).map(|i| vmin - 0.1 * spread + 1.2 * spread * i as f64 / (KDE_POINTS - 1) as f64).collect();
        let dens = kde(values, &grid);
        let peak = dens.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let half = 0.4 * slot;
        let mut path = String::new();
        for (i, (g, d)) in grid.iter().zip(&dens).enumerate() {
            let _ = write!(path, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, cx + half * d / peak, y_of(*g));
        }
        for (g, d) in grid.iter().zip(&dens).rev() {
            let _ = write!(path, "L{:.2},{:.2} ", cx - half * d / peak, y_of(*g));
        }
        let _ = writeln!(svg, r#"<path d="{}Z" fill="{color}" fill-opacity="0.55" stroke="{color}"/>"#, path);
        for (i, v) in values.iter().enumerate() {
            let jitter = ((i * 37 % 17) as f64 / 16.0 - 0.5) * 0.25 * slot;
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="black" fill-opacity="0.6"/>"#, cx + jitter, y_of(*v));
        }
        let m = y_of(median(&sorted));
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{m:.1}" x2="{:.1}" y2="{m:.1}" stroke="black" stroke-width="2"/>"#,
            cx - 0.2 * slot,
            cx + 0.2 * slot
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `values / peak` as an 8-bit grayscale PNG.
pub fn write_gray_png(values: &[f64], height: usize, width: usize, peak: f64, path: &Path) -> Result<()> {
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let bytes: Vec<u8> = values.iter().map(|v| (v * scale).round().clamp(0.0, 255.0) as u8).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Validation(format!("{} values do not fill a {height}x{width} image", values.len())))?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Storage { path: path.to_path_buf(), source },
        other => Error::Format(other.to_string()),
    })
}

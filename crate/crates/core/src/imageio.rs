//! OTMR raster files, dataset manifests and the paired phantom generator.
//!
//! An OTMR file is a 32-byte little-endian header followed by the float32
//! payload:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `OTMR`               |
//! | 4      | 4    | version (`1`)              |
//! | 8      | 4    | channels (1 or 2)          |
//! | 12     | 4    | height                     |
//! | 16     | 4    | width                      |
//! | 20     | 12   | reserved, zero             |
//!
//! Channels are stored as consecutive row-major planes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::warp::{warp_planes, DeformationField};

pub const MAGIC: &[u8; 4] = b"OTMR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Standard deviation of the additive noise on phantom T2 images.
pub const PHANTOM_NOISE_SIGMA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    /// 1 for real images, 2 for complex `[re, im]` or displacement `[dx, dy]`.
    pub channels: u32,
    pub data: Vec<f32>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: u32, data: Vec<f32>) -> Result<Self> {
        let img = RasterImage { height, width, channels, data };
        img.validate()?;
        Ok(img)
    }

    pub fn from_f64(height: usize, width: usize, values: &[f64]) -> Self {
        RasterImage { height, width, channels: 1, data: values.iter().map(|&v| v as f32).collect() }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.channels == 1 || self.channels == 2, || {
            format!("raster must have 1 or 2 channels, got {}", self.channels)
        })?;
        ensure(self.data.len() == self.height * self.width * self.channels as usize, || {
            format!(
                "raster data length {} does not match {}x{}x{}",
                self.data.len(),
                self.channels,
                self.height,
                self.width
            )
        })?;
        ensure(self.data.iter().all(|v| v.is_finite()), || "raster contains non-finite values".into())
    }

    /// Rescales a single-channel image into `[0, 1]` by its maximum.
    pub fn normalized(&self) -> RasterImage {
        let max = self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        let data = if max > 0.0 {
            self.data.iter().map(|&v| (v / max).clamp(0.0, 1.0)).collect()
        } else {
            self.data.clone()
        };
        RasterImage { data, ..self.clone() }
    }
}

pub fn encode_raster(img: &RasterImage) -> Result<Vec<u8>> {
    img.validate()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * img.data.len());
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, img.channels, img.height as u32, img.width as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&[0u8; 12]);
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_raster(bytes: &[u8]) -> Result<RasterImage> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file too short for header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (channels, height, width) = (word(8), word(12) as usize, word(16) as usize);
    if channels != 1 && channels != 2 {
        return Err(Error::Format(format!("unsupported channel count {channels}")));
    }
    let expected = height * width * channels as usize * 4;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!("payload is {} bytes, header implies {expected}", payload.len())));
    }
    let data: Vec<f32> =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Format("payload contains non-finite values".into()));
    }
    Ok(RasterImage { height, width, channels, data })
}

pub fn write_raster(img: &RasterImage, path: &Path) -> Result<()> {
    let bytes = encode_raster(img)?;
    fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

pub fn read_raster(path: &Path) -> Result<RasterImage> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_raster(&bytes)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::storage(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::storage(&tmp, e))?;
    f.sync_all().map_err(|e| Error::storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
}

/// A synthetic auxiliary/target pair with its ground-truth misalignment.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub t1: RasterImage,
    pub t2: RasterImage,
    pub true_displacement: DeformationField,
    pub seed: u64,
}

/// Monotone decreasing contrast map emulating the T1 to T2 inversion.
pub fn contrast_map(v: f64) -> f64 {
    1.0 - v.clamp(0.0, 1.0).powf(1.5)
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    value: f64,
}

impl Blob {
    /// Soft indicator with a logistic edge roughly 1.5 px wide.
    fn coverage(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (py, px) = (y - self.cy, x - self.cx);
        let u = (c * px + s * py) / self.rx;
        let v = (-s * px + c * py) / self.ry;
        let r = (u * u + v * v).sqrt();
        let edge = 1.5 / self.rx.min(self.ry);
        1.0 / (1.0 + ((r - 1.0) / (edge / 4.0)).exp())
    }
}

fn smooth_displacement(size: usize, max_disp: f64, rng: &mut ChaCha8Rng) -> DeformationField {
    if max_disp == 0.0 {
        return DeformationField::zeros(size, size);
    }
    const ORDER: usize = 3;
    let mut coef = [[[0.0f64; ORDER]; ORDER]; 2];
    for plane in coef.iter_mut() {
        for (p, row) in plane.iter_mut().enumerate() {
            for (q, c) in row.iter_mut().enumerate() {
                *c = rng.random_range(-1.0..1.0) / (1 + p + q) as f64;
            }
        }
        // no constant term: the field has zero spatial mean
        plane[0][0] = 0.0;
    }
    let n = size as f64;
    let mut field = DeformationField::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let mut d = [0.0; 2];
            for (k, plane) in coef.iter().enumerate() {
                for (p, row) in plane.iter().enumerate() {
                    let cy = (std::f64::consts::PI * p as f64 * (y as f64 + 0.5) / n).cos();
                    for (q, c) in row.iter().enumerate() {
                        let cx = (std::f64::consts::PI * q as f64 * (x as f64 + 0.5) / n).cos();
                        d[k] += c * cy * cx;
                    }
                }
            }
            field.dx[y * size + x] = d[0];
            field.dy[y * size + x] = d[1];
        }
    }
    let peak = field.max_magnitude();
    let scale = if peak > 0.0 { max_disp * rng.random_range(0.6..1.0) / peak } else { 0.0 };
    field.dx.iter_mut().chain(field.dy.iter_mut()).for_each(|v| *v *= scale);
    field
}

/// Generates a T1-like phantom, a smooth random displacement and the
/// matching T2-like image `g(warp(t1, d)) + noise`, clamped to `[0, 1]`.
pub fn generate_phantom_pair(size: usize, max_disp: f64, seed: u64) -> Result<PhantomPair> {
    ensure(size >= 16, || format!("phantom size {size} is below the minimum of 16"))?;
    ensure(max_disp >= 0.0 && max_disp <= size as f64 / 8.0, || {
        format!("max_disp {max_disp} outside [0, {}]", size as f64 / 8.0)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let c = n / 2.0;
    let mut blobs = vec![Blob {
        cy: c + rng.random_range(-0.04..0.04) * n,
        cx: c + rng.random_range(-0.04..0.04) * n,
        ry: n * rng.random_range(0.36..0.44),
        rx: n * rng.random_range(0.30..0.40),
        angle: rng.random_range(-0.3..0.3),
        value: 0.35,
    }];
    // elongated band across the head
    blobs.push(Blob {
        cy: c + rng.random_range(-0.1..0.1) * n,
        cx: c,
        ry: n * rng.random_range(0.04..0.07),
        rx: n * 0.28,
        angle: rng.random_range(-0.8..0.8),
        value: 0.6,
    });
    for &value in &[0.95, 0.75, 0.12] {
        let r = rng.random_range(0.0..0.18) * n;
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        blobs.push(Blob {
            cy: c + r * t.sin(),
            cx: c + r * t.cos(),
            ry: n * rng.random_range(0.06..0.13),
            rx: n * rng.random_range(0.06..0.13),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            value,
        });
    }
    // small structures that column undersampling aliases away
    for _ in 0..rng.random_range(6..=12) {
        let r = rng.random_range(0.0..0.28) * n;
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let radius = n * rng.random_range(0.05..0.09);
        blobs.push(Blob {
            cy: c + r * t.sin(),
            cx: c + r * t.cos(),
            ry: radius,
            rx: radius * rng.random_range(0.7..1.3),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            value: rng.random_range(0.05..1.0),
        });
    }
    let mut t1 = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for b in &blobs {
                let a = b.coverage(y as f64, x as f64);
                v = v * (1.0 - a) + b.value * a;
            }
            t1[y * size + x] = v.clamp(0.0, 1.0);
        }
    }
    let disp = smooth_displacement(size, max_disp, &mut rng);
    let warped = warp_planes(&t1, 1, size, size, &disp.dx, &disp.dy);
    let noise = Normal::new(0.0, PHANTOM_NOISE_SIGMA).expect("valid sigma");
    let t2: Vec<f64> =
        warped.iter().map(|&v| (contrast_map(v) + noise.sample(&mut rng)).clamp(0.0, 1.0)).collect();
    Ok(PhantomPair {
        t1: RasterImage::from_f64(size, size, &t1),
        t2: RasterImage::from_f64(size, size, &t2),
        true_displacement: disp,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub t1_path: PathBuf,
    pub t2_path: PathBuf,
    pub split: Split,
    /// Ground-truth displacement, read only by evaluation code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disp_path: Option<PathBuf>,
}

/// TOML document listing dataset pairs. Paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let m: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion(m.format_version));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    /// Checks that files exist, share one spatial shape, and that no file
    /// appears in two splits.
    pub fn validate(&self, root: &Path) -> Result<(usize, usize)> {
        ensure(!self.entries.is_empty(), || "manifest has no entries".into())?;
        let mut seen = std::collections::HashMap::new();
        let mut shape = None;
        for e in &self.entries {
            for p in [&e.t1_path, &e.t2_path] {
                if let Some(prev) = seen.insert(p.clone(), e.split) {
                    ensure(prev == e.split, || format!("{} appears in two splits", p.display()))?;
                }
                let img = read_raster(&root.join(p))?;
                let s = (img.height, img.width);
                ensure(*shape.get_or_insert(s) == s, || {
                    format!("{} is {}x{}, expected {:?}", p.display(), s.0, s.1, shape.unwrap())
                })?;
            }
        }
        Ok(shape.unwrap())
    }
}

/// One loaded pair; images as `f64` planes in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub id: usize,
    pub height: usize,
    pub width: usize,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub displacement: Option<DeformationField>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<PairSample>,
    pub val: Vec<PairSample>,
    pub test: Vec<PairSample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(&dir.join(MANIFEST_FILE))?;
        manifest.validate(dir)?;
        let mut ds = Dataset::default();
        for (id, e) in manifest.entries.iter().enumerate() {
            let t1 = read_raster(&dir.join(&e.t1_path))?;
            let t2 = read_raster(&dir.join(&e.t2_path))?;
            let displacement = match &e.disp_path {
                Some(p) => Some(DeformationField::from_raster(&read_raster(&dir.join(p))?)?),
                None => None,
            };
            let s = PairSample {
                id,
                height: t1.height,
                width: t1.width,
                t1: t1.normalized().to_f64(),
                t2: t2.normalized().to_f64(),
                displacement,
            };
            match e.split {
                Split::Train => ds.train.push(s),
                Split::Val => ds.val.push(s),
                Split::Test => ds.test.push(s),
            }
        }
        Ok(ds)
    }

    /// In-memory phantom dataset with a 70/15/15 split.
    pub fn phantoms(n_pairs: usize, size: usize, max_disp: f64, seed: u64) -> Result<Self> {
        ensure(n_pairs > 0, || "n_pairs must be positive".into())?;
        let mut ds = Dataset::default();
        for i in 0..n_pairs {
            let p = generate_phantom_pair(size, max_disp, pair_seed(seed, i))?;
            let s = PairSample {
                id: i,
                height: size,
                width: size,
                t1: p.t1.to_f64(),
                t2: p.t2.to_f64(),
                displacement: Some(p.true_displacement),
            };
            match split_of(i, n_pairs) {
                Split::Train => ds.train.push(s),
                Split::Val => ds.val.push(s),
                Split::Test => ds.test.push(s),
            }
        }
        Ok(ds)
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.train.iter().chain(&self.val).chain(&self.test).next().map(|s| (s.height, s.width))
    }
}

pub fn pair_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// 70/15/15 split by position; every split gets at least one pair once
/// there are three or more.
pub fn split_of(index: usize, n: usize) -> Split {
    let n_train = ((n as f64 * 0.70).round() as usize).clamp(1.min(n), n.saturating_sub(2).max(1));
    let n_val = ((n as f64 * 0.15).round() as usize).max(1).min(n - n_train);
    if index < n_train {
        Split::Train
    } else if index < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes `n_pairs` phantom pairs plus a manifest into `out_dir`; returns
/// the written paths.
pub fn write_phantom_dataset(out_dir: &Path, n_pairs: usize, size: usize, max_disp: f64, seed: u64) -> Result<Vec<PathBuf>> {
    ensure(n_pairs > 0, || "n_pairs must be positive".into())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::storage(out_dir, e))?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for i in 0..n_pairs {
        let p = generate_phantom_pair(size, max_disp, pair_seed(seed, i))?;
        let names = [format!("pair_{i:04}_t1.otmr"), format!("pair_{i:04}_t2.otmr"), format!("pair_{i:04}_disp.otmr")];
        for (name, img) in names.iter().zip([&p.t1, &p.t2, &p.true_displacement.to_raster()]) {
            let path = out_dir.join(name);
            write_raster(img, &path)?;
            written.push(path);
        }
        entries.push(ManifestEntry {
            t1_path: names[0].clone().into(),
            t2_path: names[1].clone().into(),
            split: split_of(i, n_pairs),
            disp_path: Some(names[2].clone().into()),
        });
    }
    let manifest = DatasetManifest { format_version: MANIFEST_VERSION, entries };
    let mpath = out_dir.join(MANIFEST_FILE);
    manifest.write(&mpath)?;
    written.push(mpath);
    Ok(written)
}

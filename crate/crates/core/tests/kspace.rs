use otrecon::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use otrecon::kspace::*;
use rand_distr::{Distribution, StandardNormal};

fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w)
        .map(|_| Complex64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
        .collect();
    ComplexImage { height: h, width: w, data }
}

fn max_abs_diff(a: &ComplexImage, b: &ComplexImage) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[test]
fn constant_image_concentrates_at_center() {
    let (h, w) = (8, 6);
    let img = ComplexImage::from_real(h, w, &vec![2.0; h * w]);
    let k = fft2c(&img).unwrap();
    let center = k.data[(h / 2) * w + w / 2];
    assert!((center.re - 2.0 * ((h * w) as f64).sqrt()).abs() < 1e-12);
    let off: f64 = k.data.iter().enumerate().filter(|(i, _)| *i != (h / 2) * w + w / 2).map(|(_, c)| c.norm()).sum();
    assert!(off < 1e-10);
    assert!((k.energy() - img.energy()).abs() < 1e-9);
}

#[test]
fn impulse_has_flat_spectrum() {
    let (h, w) = (16, 16);
    let mut img = ComplexImage::zeros(h, w);
    img.data[(h / 2) * w + w / 2] = Complex64::new(1.0, 0.0);
    let k = fft2c(&img).unwrap();
    let expected = 1.0 / ((h * w) as f64).sqrt();
    for c in &k.data {
        assert!((c.norm() - expected).abs() < 1e-12);
    }
}

#[test]
fn odd_sizes_round_trip() {
    let img = random_image(7, 9, 3);
    let back = ifft2c(&fft2c(&img).unwrap()).unwrap();
    assert!(max_abs_diff(&img, &back) < 1e-12);
}

#[test]
fn fft_rejects_nan() {
    let mut img = ComplexImage::zeros(4, 4);
    img.data[3].re = f64::NAN;
    assert!(matches!(fft2c(&img), Err(Error::Validation(_))));
}

#[test]
fn full_ratio_keeps_everything() {
    for scheme in [MaskScheme::Random, MaskScheme::Equispaced, MaskScheme::Radial] {
        let m = make_mask(scheme, 1.0, 24, 20, 5).unwrap();
        assert!(m.keep.iter().all(|&k| k), "{scheme}");
    }
}

#[test]
fn equispaced_quarter_at_320() {
    let m = make_mask(MaskScheme::Equispaced, 0.25, 320, 320, 0).unwrap();
    let cols = m.full_columns();
    assert_eq!(cols.len(), 80);
    // longest contiguous run containing the DC column
    let dc = 160;
    assert!(cols.contains(&dc));
    let mut lo = dc;
    while lo > 0 && cols.contains(&(lo - 1)) {
        lo -= 1;
    }
    let mut hi = dc;
    while cols.contains(&(hi + 1)) {
        hi += 1;
    }
    assert!(hi - lo + 1 >= 25);
    assert_eq!(SamplingMask::core_columns(320, 80), 148..173);
    // stride among non-core columns is uniform up to rounding
    let outer: Vec<usize> = cols.iter().copied().filter(|c| !(148..173).contains(c)).collect();
    assert_eq!(outer.len(), 55);
}

#[test]
fn core_tie_breaks_left() {
    // even core length: one more column left of DC than right of it
    let r = SamplingMask::core_columns(32, 13);
    assert_eq!(r.len(), 4);
    assert_eq!(r, 14..18);
}

#[test]
fn masks_are_deterministic() {
    for scheme in [MaskScheme::Random, MaskScheme::Equispaced, MaskScheme::Radial] {
        let a = make_mask(scheme, 0.125, 64, 64, 11).unwrap();
        let b = make_mask(scheme, 0.125, 64, 64, 11).unwrap();
        assert_eq!(a, b);
    }
    let a = make_mask(MaskScheme::Random, 0.125, 64, 64, 1).unwrap();
    let b = make_mask(MaskScheme::Random, 0.125, 64, 64, 2).unwrap();
    assert_ne!(a.keep, b.keep);
}

#[test]
fn bad_ratio_rejected() {
    assert!(make_mask(MaskScheme::Random, 0.0, 8, 8, 0).is_err());
    assert!(make_mask(MaskScheme::Random, 1.5, 8, 8, 0).is_err());
    assert!(make_mask(MaskScheme::Radial, -0.1, 8, 8, 0).is_err());
}

#[test]
fn undersample_limits() {
    let x = random_image(16, 16, 9);
    let full = SamplingMask::all(16, 16);
    assert!(max_abs_diff(&undersample(&x, &full).unwrap(), &x) < 1e-12);
    let mut none = full.clone();
    none.keep.iter_mut().for_each(|k| *k = false);
    assert!(undersample(&x, &none).unwrap().energy() < 1e-24);
    let m = make_mask(MaskScheme::Random, 0.25, 16, 16, 2).unwrap();
    assert!(undersample(&x, &m).unwrap().energy() <= x.energy() + 1e-9);
}

#[test]
fn shape_mismatch_is_validation_error() {
    let x = random_image(8, 8, 1);
    let m = make_mask(MaskScheme::Random, 0.5, 8, 10, 0).unwrap();
    assert!(matches!(undersample(&x, &m), Err(Error::Validation(_))));
    assert!(matches!(data_consistency(&x, &x, &m), Err(Error::Validation(_))));
}

#[test]
fn data_consistency_limits_and_idempotence() {
    let cur = random_image(12, 12, 4);
    let truth = random_image(12, 12, 5);
    let full = SamplingMask::all(12, 12);
    let kmeas = measure(&truth, &full).unwrap();
    let out = data_consistency(&cur, &kmeas, &full).unwrap();
    assert!(max_abs_diff(&out, &ifft2c(&kmeas).unwrap()) < 1e-12);

    let mut none = full.clone();
    none.keep.iter_mut().for_each(|k| *k = false);
    let out = data_consistency(&cur, &kmeas, &none).unwrap();
    assert!(max_abs_diff(&out, &cur) < 1e-12);

    let m = make_mask(MaskScheme::Random, 0.25, 12, 12, 7).unwrap();
    let kmeas = measure(&truth, &m).unwrap();
    let once = data_consistency(&cur, &kmeas, &m).unwrap();
    let twice = data_consistency(&once, &kmeas, &m).unwrap();
    assert!(max_abs_diff(&once, &twice) < 1e-12);
}

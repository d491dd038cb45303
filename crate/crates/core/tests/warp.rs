use otrecon::RasterImage;
use otrecon::warp::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gray(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> RasterImage {
    let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
    RasterImage { height: h, width: w, channels: 1, data }
}

#[test]
fn zero_field_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = gray(9, 7, |_, _| rng.random::<f32>());
    let out = warp_image(&img, &DeformationField::zeros(9, 7)).unwrap();
    assert_eq!(out, img);
}

#[test]
fn unit_shift_recovers_interior() {
    let base = |y: usize, x: usize| ((y * 13 + x * 7) % 11) as f32 / 10.0;
    let (h, w) = (8, 10);
    // shifted(y, x) = base(y, x - 1)
    let shifted = gray(h, w, |y, x| if x == 0 { 0.0 } else { base(y, x - 1) });
    let out = warp_image(&shifted, &DeformationField::constant(h, w, 1.0, 0.0)).unwrap();
    for y in 0..h {
        for x in 0..w - 1 {
            assert!((out.data[y * w + x] - base(y, x)).abs() < 1e-5);
        }
    }
}

#[test]
fn warp_is_linear_in_intensity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (6, 6);
    let a = gray(h, w, |_, _| rng.random::<f32>());
    let b = gray(h, w, |_, _| rng.random::<f32>());
    let field = DeformationField {
        height: h,
        width: w,
        dx: (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect(),
        dy: (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect(),
    };
    let (ka, kb) = (0.7f64, -1.3f64);
    let to64 = |r: &RasterImage| r.data.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (av, bv) = (to64(&a), to64(&b));
    let mix: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| ka * x + kb * y).collect();
    let lhs = warp_planes(&mix, 1, h, w, &field.dx, &field.dy);
    let wa = warp_planes(&av, 1, h, w, &field.dx, &field.dy);
    let wb = warp_planes(&bv, 1, h, w, &field.dx, &field.dy);
    for i in 0..h * w {
        assert!((lhs[i] - (ka * wa[i] + kb * wb[i])).abs() < 1e-6);
    }
}

#[test]
fn bilateral_closed_forms() {
    assert_eq!(bilateral_weight(0.3, 0.3), 1.0);
    assert!((bilateral_weight(0.0, std::f64::consts::LN_2) - 0.5).abs() < 1e-15);
    let mut prev = 1.0;
    for k in 1..50 {
        let w = bilateral_weight(0.0, k as f64 * 0.5);
        assert!(w < prev);
        prev = w;
    }
    assert!(prev < 1e-10);
}

/// Brute force over every ordered pair of grid points, keeping the 4-adjacent
/// ones and halving, so each unordered pair contributes once.
fn smoothness_oracle(h: usize, w: usize, dx: &[f64], dy: &[f64], guide: &[f64]) -> f64 {
    let mut total = 0.0;
    for p in 0..h * w {
        for q in 0..h * w {
            let (py, px) = ((p / w) as i64, (p % w) as i64);
            let (qy, qx) = ((q / w) as i64, (q % w) as i64);
            if (py - qy).abs() + (px - qx).abs() == 1 {
                let d = ((dx[p] - dx[q]).powi(2) + (dy[p] - dy[q]).powi(2)).sqrt();
                total += 0.5 * (-(guide[p] - guide[q]).abs()).exp() * d;
            }
        }
    }
    total
}

#[test]
fn smoothness_ramp_golden() {
    let (h, w) = (3, 3);
    let field = DeformationField {
        height: h,
        width: w,
        dx: (0..9).map(|i| (i % 3) as f64).collect(),
        dy: vec![0.0; 9],
    };
    let guide = gray(h, w, |_, _| 0.5);
    let oracle = smoothness_oracle(h, w, &field.dx, &field.dy, &vec![0.5; 9]);
    assert_eq!(oracle, 6.0);
    assert_eq!(smoothness_loss(&field, &guide).unwrap(), 6.0);
    assert_eq!(neighbor_pairs(3, 3), 12);
}

#[test]
fn smoothness_matches_oracle_and_edges_reduce_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (5, 6);
    let field = DeformationField {
        height: h,
        width: w,
        dx: (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        dy: (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let flat = gray(h, w, |_, _| 0.2);
    let edges = gray(h, w, |y, x| if (x + y) % 2 == 0 { 0.0 } else { 1.0 });
    let g: Vec<f64> = edges.data.iter().map(|&v| v as f64).collect();
    let got = smoothness_loss(&field, &edges).unwrap();
    assert!((got - smoothness_oracle(h, w, &field.dx, &field.dy, &g)).abs() < 1e-12);
    assert!(got < smoothness_loss(&field, &flat).unwrap());
}

#[test]
fn constant_field_has_zero_penalty() {
    let guide = gray(4, 4, |y, x| (y * x) as f32 / 9.0);
    assert_eq!(smoothness_loss(&DeformationField::constant(4, 4, 2.5, -1.0), &guide).unwrap(), 0.0);
}

#[test]
fn shape_errors() {
    let img = gray(4, 4, |_, _| 0.0);
    assert!(warp_image(&img, &DeformationField::zeros(4, 5)).is_err());
    assert!(smoothness_loss(&DeformationField::zeros(5, 4), &img).is_err());
}

#[test]
fn raster_round_trip() {
    let f = DeformationField { height: 2, width: 2, dx: vec![0.5, 1.0, -1.0, 0.0], dy: vec![0.0, 2.0, 0.25, -3.0] };
    assert_eq!(DeformationField::from_raster(&f.to_raster()).unwrap(), f);
}

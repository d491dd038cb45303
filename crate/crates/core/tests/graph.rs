use std::sync::Arc;
use otrecon::{ComplexImage, Tensor};
use otrecon::graph::gradcheck::max_rel_error;
use otrecon::graph::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn conv_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for &(k, stride, pad) in &[(3, 1, 1), (2, 2, 0), (1, 1, 0), (3, 2, 1)] {
        let x = rand_t(&[3, 7, 6], &mut rng);
        let w = rand_t(&[4, 3, k, k], &mut rng);
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let out = conv_forward(&x, &w, Some(&b), stride, pad);
        let (_, ho, wo) = out.chw();
        for co in 0..4 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[co];
                    for ci in 0..3 {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && iy < 7 && ix < 6 {
                                    s += w.data[((co * 3 + ci) * k + ky) * k + kx]
                                        * x.data[(ci * 7 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data[(co * ho + oy) * wo + ox] - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_and_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let leaves = vec![rand_t(&[2, 6, 6], &mut rng), rand_t(&[3, 2, 3, 3], &mut rng), rand_t(&[3], &mut rng)];
    let err = max_rel_error(
        &leaves,
        &|g, v| {
            let c = g.conv2d(v[0], v[1], Some(v[2]), 1, 1);
            let n = g.instance_norm(c);
            let r = g.leaky_relu(n, 0.2);
            let p = g.avg_pool2(r);
            let u = g.upsample2(p);
            let cat = g.concat(&[u, c]);
            let s = g.slice(cat, 1, 5);
            let sq = g.mean_abs_diff(s, Arc::new(Tensor::zeros(&[4, 6, 6])));
            let m = g.global_mean(s);
            let t = g.sum(m);
            g.lin_comb(&[(sq, 2.0), (t, -0.5)])
        },
        1e-6,
        1e-4,
    );
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn blur_gradient_and_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let leaves = vec![rand_t(&[2, 5, 7], &mut rng)];
    let err = max_rel_error(
        &leaves,
        &|g, v| {
            let b = g.gaussian_blur(v[0], 1.3);
            let b = g.center(b);
            g.mean_abs_diff(b, Arc::new(Tensor::zeros(&[2, 5, 7])))
        },
        1e-6,
        1e-6,
    );
    assert!(err < 1e-5, "rel err {err}");
    let mut g = Graph::new();
    let c = g.constant(Tensor::from_vec(&[1, 4, 6], vec![2.5; 24]));
    let b = g.gaussian_blur(c, 2.0);
    assert!(g.value(b).data.iter().all(|v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn strided_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let leaves = vec![rand_t(&[2, 8, 8], &mut rng), rand_t(&[3, 2, 2, 2], &mut rng)];
    let err = max_rel_error(
        &leaves,
        &|g, v| {
            let c = g.conv2d(v[0], v[1], None, 2, 0);
            let r = g.relu(c);
            g.sum(r)
        },
        1e-6,
        1e-6,
    );
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn spectral_norm_gradient_and_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = rand_t(&[3, 2, 2, 2], &mut rng);
    let (u, v) = otrecon::nets::power_iteration(&w, 50, None);
    let x = rand_t(&[2, 4, 4], &mut rng);
    let err = max_rel_error(
        &[w.clone()],
        &|g, p| {
            let sn = g.spectral_norm(p[0], &u, &v);
            let xv = g.constant(x.clone());
            let c = g.conv2d(xv, sn, None, 2, 0);
            let s = g.sum(c);
            let c2 = g.mean_abs_diff(c, Arc::new(Tensor::zeros(&[3, 2, 2])));
            g.lin_comb(&[(s, 1.0), (c2, 3.0)])
        },
        1e-6,
        1e-6,
    );
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn magnitude_dc_warp_smoothness_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (8, 8);
    let keep: Arc<Vec<bool>> = Arc::new((0..h * w).map(|i| i % 3 == 0).collect());
    let measured = ComplexImage::from_tensor(&rand_t(&[2, h, w], &mut rng));
    let guide = Arc::new((0..h * w).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
    let field = Tensor::from_vec(&[2, h, w], (0..2 * h * w).map(|_| rng.random_range(-1.7..1.7)).collect());
    let leaves = vec![rand_t(&[2, h, w], &mut rng), field];
    let err = max_rel_error(
        &leaves,
        &|g, v| {
            let dc = g.data_consistency(v[0], &measured, keep.clone());
            let wp = g.warp(dc, v[1]);
            let m = g.magnitude(wp);
            let s = g.sum(m);
            let r = g.smoothness(v[1], guide.clone());
            let sc = g.scale(r, 0.1);
            let a = g.add(sc, s);
            g.sum(a)
        },
        1e-6,
        1e-6,
    );
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn constants_get_no_gradients() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(2.0));
    let p = g.param(&Tensor::scalar(3.0), ParamRef { bundle: 1, index: 0 }, true);
    let f = g.param(&Tensor::scalar(4.0), ParamRef { bundle: 2, index: 0 }, false);
    let out = g.lin_comb(&[(c, 1.0), (p, 2.0), (f, 5.0)]);
    let grads = g.backward(out);
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].0.bundle, 1);
    assert_eq!(grads[0].1.item(), 2.0);
}

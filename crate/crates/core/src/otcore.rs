//! Optimal-transport tooling. Discrete W1 is solved exactly or with
//! entropic smoothing, and the dual critic/generator objectives drive
//! alignment and synthesis. A separate check compares the
//! reconstruction/synthesis gap against its bound.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imageio::RasterImage;
use crate::kspace::ComplexImage;
use crate::nets::{self, ModelState, GAMMA, OMEGA};

/// Largest support accepted by [`exact_w1`].
pub const MAX_SUPPORT: usize = 256;
/// Side length grids are reduced to before computing image W1.
pub const W1_GRID: usize = 16;

const MASS_TOL: f64 = 1e-15;

/// Weighted point cloud in one or two dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    pub support: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let m = DiscreteMeasure { support, weights };
        m.validate()?;
        Ok(m)
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        DiscreteMeasure { support: vec![point], weights: vec![1.0] }
    }

    pub fn uniform(support: Vec<Vec<f64>>) -> Result<Self> {
        let n = support.len();
        DiscreteMeasure::new(support, vec![1.0 / n as f64; n])
    }

    /// Normalized intensity mass on pixel centers `(row, col)` scaled by
    /// `pitch`. Negative intensities are clipped to zero.
    pub fn from_grid(values: &[f64], height: usize, width: usize, pitch: f64) -> Result<Self> {
        ensure(values.len() == height * width, || "grid measure: shape mismatch".into())?;
        let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
        ensure(total > 0.0 && total.is_finite(), || "image has zero mass".into())?;
        let mut support = Vec::new();
        let mut weights = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            if v > 0.0 {
                support.push(vec![(i / width) as f64 * pitch, (i % width) as f64 * pitch]);
                weights.push(v / total);
            }
        }
        Ok(DiscreteMeasure { support, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, |p| p.len())
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.weights.is_empty(), || "measure has empty support".into())?;
        ensure(self.support.len() == self.weights.len(), || "support and weights differ in length".into())?;
        let d = self.dim();
        ensure((1..=2).contains(&d), || format!("support dimension {d} not in 1..=2"))?;
        ensure(self.support.iter().all(|p| p.len() == d && p.iter().all(|v| v.is_finite())), || {
            "support points must be finite and share a dimension".into()
        })?;
        ensure(self.weights.iter().all(|&w| w >= 0.0 && w.is_finite()), || "weights must be non-negative".into())?;
        let s: f64 = self.weights.iter().sum();
        ensure((s - 1.0).abs() <= 1e-9, || format!("weights sum to {s}, not 1"))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn cost_matrix(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Vec<f64> {
    let mut c = Vec::with_capacity(mu.len() * nu.len());
    for p in &mu.support {
        for q in &nu.support {
            c.push(dist(p, q));
        }
    }
    c
}

fn check_pair(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<()> {
    mu.validate()?;
    nu.validate()?;
    ensure(mu.dim() == nu.dim(), || "measures live in different dimensions".into())
}

/// Exact 1-Wasserstein distance with Euclidean ground cost, solved as a
/// transportation problem by successive shortest augmenting paths.
pub fn exact_w1(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    for m in [mu, nu] {
        if m.len() > MAX_SUPPORT {
            return Err(Error::Capacity { got: m.len(), limit: MAX_SUPPORT });
        }
    }
    check_pair(mu, nu)?;
    let cost = cost_matrix(mu, nu);
    Ok(transport(&mu.weights, &nu.weights, &cost))
}

/// Min-cost transport between supplies `a` and demands `b` (equal totals up
/// to rounding) over dense cost `c` (`a.len() x b.len()`).
fn transport(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![0.0f64; n * m];
    // node ids: sources 0..n, sinks n..n+m
    let mut pot = vec![0.0f64; n + m];
    for j in 0..m {
        pot[n + j] = (0..n).map(|i| c[i * m + j]).fold(f64::INFINITY, f64::min);
    }
    let mut dist = vec![0.0f64; n + m];
    let mut prev = vec![usize::MAX; n + m];
    let mut done = vec![false; n + m];
    loop {
        let remaining_supply: f64 = supply.iter().filter(|&&s| s > MASS_TOL).sum();
        let remaining_demand: f64 = demand.iter().filter(|&&d| d > MASS_TOL).sum();
        if remaining_supply <= 1e-13 || remaining_demand <= 1e-13 {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        for i in 0..n {
            if supply[i] > MASS_TOL {
                dist[i] = 0.0;
            }
        }
        let target = loop {
            let mut best = usize::MAX;
            let mut bd = f64::INFINITY;
            for v in 0..n + m {
                if !done[v] && dist[v] < bd {
                    bd = dist[v];
                    best = v;
                }
            }
            if best == usize::MAX {
                break None;
            }
            done[best] = true;
            if best >= n {
                let j = best - n;
                if demand[j] > MASS_TOL {
                    break Some(j);
                }
                // backward arcs sink j -> source i where flow exists
                for i in 0..n {
                    if !done[i] && flow[i * m + j] > MASS_TOL {
                        let rc = (-c[i * m + j] + pot[best] - pot[i]).max(0.0);
                        if bd + rc < dist[i] {
                            dist[i] = bd + rc;
                            prev[i] = best;
                        }
                    }
                }
            } else {
                let i = best;
                for j in 0..m {
                    let v = n + j;
                    if !done[v] {
                        let rc = (c[i * m + j] + pot[i] - pot[v]).max(0.0);
                        if bd + rc < dist[v] {
                            dist[v] = bd + rc;
                            prev[v] = i;
                        }
                    }
                }
            }
        };
        let Some(tj) = target else { break };
        let dt = dist[n + tj];
        for v in 0..n + m {
            pot[v] += dist[v].min(dt);
        }
        // walk back to the originating source, finding the bottleneck
        let mut amount = demand[tj];
        let mut v = n + tj;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= n {
                // v is a source reached through a backward arc from sink u
                amount = amount.min(flow[v * m + (u - n)]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);
        let source = v;
        let mut v = n + tj;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < n {
                flow[u * m + (v - n)] += amount;
            } else {
                flow[v * m + (u - n)] -= amount;
            }
            v = u;
        }
        supply[source] -= amount;
        demand[tj] -= amount;
    }
    flow.iter().zip(c).map(|(f, c)| f.max(0.0) * c).sum()
}

const ANNEAL_SWEEPS: usize = 50;

/// Entropy-regularized transport cost `<P, C>` via log-domain Sinkhorn with
/// epsilon scaling. Converges when the L1 marginal violation drops below
/// `1e-6`; `max_iter` bounds the total number of sweeps.
pub fn sinkhorn_w1(mu: &DiscreteMeasure, nu: &DiscreteMeasure, epsilon: f64, max_iter: usize) -> Result<f64> {
    ensure(epsilon > 0.0 && epsilon.is_finite(), || format!("epsilon {epsilon} must be positive"))?;
    check_pair(mu, nu)?;
    // zero-weight points carry no mass and break the log
    let keep = |m: &DiscreteMeasure| -> (Vec<Vec<f64>>, Vec<f64>) {
        m.support.iter().zip(&m.weights).filter(|(_, &w)| w > 0.0).map(|(p, &w)| (p.clone(), w)).unzip()
    };
    let (xs, a) = keep(mu);
    let (ys, b) = keep(nu);
    let (n, m) = (a.len(), b.len());
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            c[i * m + j] = dist(&xs[i], &ys[j]);
        }
    }
    let la: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let lse = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = vals.collect();
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    let sweep = |f: &mut [f64], g: &mut [f64], eps: f64| -> f64 {
        for i in 0..n {
            f[i] = eps * la[i] - eps * lse(&mut (0..m).map(|j| (g[j] - c[i * m + j]) / eps));
        }
        for j in 0..m {
            g[j] = eps * lb[j] - eps * lse(&mut (0..n).map(|i| (f[i] - c[i * m + j]) / eps));
        }
        (0..n).map(|i| ((0..m).map(|j| ((f[i] + g[j] - c[i * m + j]) / eps).exp()).sum::<f64>() - a[i]).abs()).sum()
    };
    let mut used = 0;
    // anneal from the cost scale down to `epsilon`, warm-starting the potentials
    let mut eps = c.iter().cloned().fold(0.0, f64::max).max(epsilon);
    while eps > epsilon && used < max_iter {
        for _ in 0..ANNEAL_SWEEPS {
            used += 1;
            if sweep(&mut f, &mut g, eps) < 1e-3 || used >= max_iter {
                break;
            }
        }
        eps = (eps * 0.5).max(epsilon);
    }
    let mut residual = f64::INFINITY;
    while used < max_iter {
        used += 1;
        residual = sweep(&mut f, &mut g, epsilon);
        if residual < 1e-6 {
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..m {
                    total += ((f[i] + g[j] - c[i * m + j]) / epsilon).exp() * c[i * m + j];
                }
            }
            return Ok(total);
        }
    }
    Err(Error::Convergence { iterations: max_iter, residual })
}

/// Objective values of one adversarial transport problem on a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualLossReport {
    /// `mean psi(generated) - mean psi(real)`, maximized by the critic.
    /// With `psi^c = -psi` this is the dual transport value.
    pub critic_objective: f64,
    /// `critic_objective + transport_cost_term`, minimized by the map.
    pub generator_objective: f64,
    pub transport_cost_term: f64,
}

/// Assembles a [`DualLossReport`] from per-sample potentials and costs
/// using empirical means.
pub fn dual_report(psi_generated: &[f64], psi_real: &[f64], costs: &[f64]) -> Result<DualLossReport> {
    ensure(!psi_generated.is_empty() && !psi_real.is_empty(), || "empty batch".into())?;
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let critic_objective = mean(psi_generated) - mean(psi_real);
    let transport_cost_term = mean(costs);
    let r = DualLossReport {
        critic_objective,
        generator_objective: critic_objective + transport_cost_term,
        transport_cost_term,
    };
    if [r.critic_objective, r.generator_objective, r.transport_cost_term].iter().all(|v| v.is_finite()) {
        Ok(r)
    } else {
        Err(Error::numeric("dual objective", "non-finite value"))
    }
}

/// Which pair of images the transport cost compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportCost {
    /// Mean L1 between the mapped image and the sample's target-contrast
    /// reference.
    #[default]
    Paired,
    /// Mean L1 between the mapped image and the map's own input.
    Source,
}

/// Mean absolute difference over both channels of two complex images.
pub fn l1_cost(a: &ComplexImage, b: &ComplexImage) -> f64 {
    let n = a.data.len() as f64 * 2.0;
    a.data.iter().zip(&b.data).map(|(x, y)| (x.re - y.re).abs() + (x.im - y.im).abs()).sum::<f64>() / n
}

fn check_batches(lens: &[usize], shapes: &[(usize, usize)]) -> Result<()> {
    ensure(lens.iter().all(|&n| n > 0), || "batches must be non-empty".into())?;
    ensure(lens.windows(2).all(|w| w[0] == w[1]), || "batches differ in length".into())?;
    ensure(shapes.windows(2).all(|w| w[0] == w[1]), || "batch images differ in shape".into())
}

/// Alignment objectives: `psi_gamma` evaluated on `OT_M(OT_S(x_t1))` with
/// the synthesis parameters held fixed. The per-sample transport cost is
/// multiplied by `cost_weight`.
pub fn dual_losses_alignment(
    state: &ModelState,
    batch_t1: &[RasterImage],
    batch_t2r: &[ComplexImage],
    batch_t2: &[ComplexImage],
    cost: TransportCost,
    cost_weight: f64,
) -> Result<DualLossReport> {
    let mut shapes: Vec<(usize, usize)> = batch_t1.iter().map(|x| (x.height, x.width)).collect();
    shapes.extend(batch_t2r.iter().chain(batch_t2).map(|x| (x.height, x.width)));
    check_batches(&[batch_t1.len(), batch_t2r.len(), batch_t2.len()], &shapes)?;
    let mut gen = Vec::new();
    let mut real = Vec::new();
    let mut costs = Vec::new();
    for ((t1, t2r), t2) in batch_t1.iter().zip(batch_t2r).zip(batch_t2) {
        let (_, t1a) = nets::align(state, t1, t2r)?;
        let g = nets::synthesize(state, &t1a)?;
        gen.push(nets::critic_value(&state.spec, &state.bundles[GAMMA], &g)?);
        real.push(nets::critic_value(&state.spec, &state.bundles[GAMMA], t2)?);
        costs.push(cost_weight * match cost {
            TransportCost::Paired => l1_cost(&g, t2),
            TransportCost::Source => l1_cost(&g, &ComplexImage::from_real(t1.height, t1.width, &t1.to_f64())),
        });
    }
    dual_report(&gen, &real, &costs)
}

/// Synthesis objectives: `psi_omega` evaluated on `OT_M(x_t1a)`.
pub fn dual_losses_synthesis(
    state: &ModelState,
    batch_t1a: &[RasterImage],
    batch_t2: &[ComplexImage],
    cost: TransportCost,
    cost_weight: f64,
) -> Result<DualLossReport> {
    let mut shapes: Vec<(usize, usize)> = batch_t1a.iter().map(|x| (x.height, x.width)).collect();
    shapes.extend(batch_t2.iter().map(|x| (x.height, x.width)));
    check_batches(&[batch_t1a.len(), batch_t2.len()], &shapes)?;
    let mut gen = Vec::new();
    let mut real = Vec::new();
    let mut costs = Vec::new();
    for (t1a, t2) in batch_t1a.iter().zip(batch_t2) {
        let g = nets::synthesize(state, t1a)?;
        gen.push(nets::critic_value(&state.spec, &state.bundles[OMEGA], &g)?);
        real.push(nets::critic_value(&state.spec, &state.bundles[OMEGA], t2)?);
        costs.push(cost_weight * match cost {
            TransportCost::Paired => l1_cost(&g, t2),
            TransportCost::Source => l1_cost(&g, &ComplexImage::from_real(t1a.height, t1a.width, &t1a.to_f64())),
        });
    }
    dual_report(&gen, &real, &costs)
}

/// Numbers behind the bound
/// `||x_R - x_G||_1 <= ||x_R - x_T2||_1 + C * W1(x_G, x_T2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    /// `||x_R - x_T2||_1`.
    pub rhs_l1: f64,
    /// `W1` between `x_G` and `x_T2` as normalized intensity measures.
    pub w1: f64,
    pub c: f64,
    /// `rhs_l1 + c * w1`.
    pub rhs: f64,
    pub l1_g_t2: f64,
    /// `lhs - rhs_l1 - l1_g_t2`; never positive.
    pub triangle_slack: f64,
    /// `w1 / ||p_G - p_T2||_1` on the normalized grid measures.
    pub w1_over_l1: f64,
    pub holds: bool,
}

/// Euclidean diameter of an `h x w` pixel grid.
pub fn grid_diameter(height: usize, width: usize) -> f64 {
    (((height - 1).pow(2) + (width - 1).pow(2)) as f64).sqrt()
}

/// Block-sums an image onto at most `W1_GRID x W1_GRID` cells; returns the
/// reduced values, its shape, and the pitch in original pixels.
fn reduce_grid(v: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize, usize) {
    let f = h.max(w).div_ceil(W1_GRID).max(1);
    let (rh, rw) = (h.div_ceil(f), w.div_ceil(f));
    let mut out = vec![0.0; rh * rw];
    for y in 0..h {
        for x in 0..w {
            out[(y / f) * rw + x / f] += v[y * w + x].max(0.0);
        }
    }
    (out, rh, rw, f)
}

/// W1 between two equally shaped non-negative images treated as
/// probability measures on the (reduced) pixel grid, in pixel units.
pub fn image_w1(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<(f64, f64)> {
    let (ra, rh, rw, f) = reduce_grid(a, height, width);
    let (rb, _, _, _) = reduce_grid(b, height, width);
    let (sa, sb): (f64, f64) = (ra.iter().sum(), rb.iter().sum());
    ensure(sa > 0.0 && sb > 0.0, || "image has zero mass".into())?;
    // only the signed difference has to move
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut l1 = 0.0;
    for i in 0..rh * rw {
        let d = ra[i] / sa - rb[i] / sb;
        l1 += d.abs();
        let p = vec![(i / rw) as f64 * f as f64, (i % rw) as f64 * f as f64];
        if d > 0.0 {
            pos.push((p, d));
        } else if d < 0.0 {
            neg.push((p, -d));
        }
    }
    let moved: f64 = pos.iter().map(|(_, w)| w).sum();
    if moved <= 1e-15 || neg.is_empty() {
        return Ok((0.0, l1));
    }
    let (ps, pw): (Vec<_>, Vec<_>) = pos.into_iter().map(|(p, w)| (p, w / moved)).unzip();
    let negm: f64 = neg.iter().map(|(_, w)| w).sum();
    let (ns, nw): (Vec<_>, Vec<_>) = neg.into_iter().map(|(p, w)| (p, w / negm)).unzip();
    let mu = DiscreteMeasure { support: ps, weights: pw };
    let nu = DiscreteMeasure { support: ns, weights: nw };
    Ok((moved * exact_w1(&mu, &nu)?, l1))
}

/// Evaluates both sides of the gap bound for one image triple with
/// `C = 1 / region_diameter`.
pub fn verify_theorem1(x_r: &RasterImage, x_g: &RasterImage, x_t2: &RasterImage, region_diameter: f64) -> Result<BoundReport> {
    for img in [x_r, x_g, x_t2] {
        ensure(img.channels == 1, || "bound check expects single-channel magnitude images".into())?;
        ensure(img.height == x_r.height && img.width == x_r.width, || "bound check: image shapes differ".into())?;
    }
    ensure(region_diameter > 0.0, || "region diameter must be positive".into())?;
    let (r, g, t) = (x_r.to_f64(), x_g.to_f64(), x_t2.to_f64());
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let lhs = l1(&r, &g);
    let rhs_l1 = l1(&r, &t);
    let l1_g_t2 = l1(&g, &t);
    let (w1, l1_measures) = image_w1(&g, &t, x_r.height, x_r.width)?;
    let c = 1.0 / region_diameter;
    let rhs = rhs_l1 + c * w1;
    Ok(BoundReport {
        lhs,
        rhs_l1,
        w1,
        c,
        rhs,
        l1_g_t2,
        triangle_slack: lhs - rhs_l1 - l1_g_t2,
        w1_over_l1: if l1_measures > 0.0 { w1 / l1_measures } else { 0.0 },
        holds: lhs <= rhs + 1e-12,
    })
}

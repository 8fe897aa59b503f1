//! Monte Carlo over field samples: partition functions and free energies,
//! replica sampling under the Gibbs measure, empirical two-overlap
//! distributions, Ghirlanda-Guerra residuals, the Gaussian
//! integration-by-parts identity, ultrametricity statistics and high-point
//! counts.
//!
//! The outer expectation (over the field) is always Monte Carlo; the inner
//! expectation (over replicas given the field) is an exact weighted sum
//! whenever the vertex count allows it, and replica sampling otherwise.
//! Every estimator derives its randomness from (master seed, stage tag,
//! indices), so results do not depend on thread scheduling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::SpeedProfile;
use crate::error::{Error, Result};
use crate::field::{restricted_set, FieldContext, FieldSample};
use crate::seed::{derive_rng, derive_seed};

/// Vertex counts up to this bound use exact inner Gibbs sums; larger boxes
/// fall back to replica sampling for multi-replica functionals.
pub const EXACT_INNER_LIMIT: usize = 4096;

/// A mean with its standard error, the sample count behind it, and the seed
/// that reproduces it.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl McEstimate {
    pub fn from_values(values: &[f64], seed: u64) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        McEstimate {
            mean,
            standard_error: (var / n).sqrt(),
            sample_count: values.len(),
            seed,
        }
    }

    pub fn covers(&self, target: f64, sigmas: f64) -> bool {
        (self.mean - target).abs() <= sigmas * self.standard_error
    }
}

/// Delta-method mean and standard error for a smooth combination of
/// per-sample component means. `combine` returns the value and gradient at
/// the vector of means.
pub fn delta_method(
    rows: &[Vec<f64>],
    seed: u64,
    combine: impl Fn(&[f64]) -> (f64, Vec<f64>),
) -> McEstimate {
    let n = rows.len();
    let k = rows[0].len();
    let mut means = vec![0.0; k];
    for row in rows {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let (value, grad) = combine(&means);
    // variance of the combination: g^T Cov(means) g
    let mut var = 0.0;
    for row in rows {
        let mut dot = 0.0;
        for i in 0..k {
            dot += grad[i] * (row[i] - means[i]);
        }
        var += dot * dot;
    }
    var /= (n as f64) * (n as f64 - 1.0).max(1.0);
    McEstimate {
        mean: value,
        standard_error: var.sqrt(),
        sample_count: n,
        seed,
    }
}

// ---------------------------------------------------------------------------
// Gibbs ensemble
// ---------------------------------------------------------------------------

/// Gibbs weights of one field realization at inverse temperature beta, on
/// the full box and optionally restricted to the deep-interior set.
#[derive(Clone, Debug)]
pub struct GibbsEnsemble {
    pub n: usize,
    pub beta: f64,
    /// Normalized weights over all box vertices.
    pub weights: Vec<f64>,
    pub log_z: f64,
    /// f_N = log Z / log n^2.
    pub f_n: f64,
    pub max_psi: f64,
    /// xi_N = max psi / log n^2.
    pub xi: f64,
    restricted: Option<RestrictedEnsemble>,
}

#[derive(Clone, Debug)]
pub struct RestrictedEnsemble {
    pub rho: f64,
    pub indices: Vec<usize>,
    /// Weights renormalized over the restricted set.
    pub weights: Vec<f64>,
    pub f_n_rho: f64,
    /// Free energy of the complement (negative infinity when empty).
    pub f_complement: f64,
}

impl GibbsEnsemble {
    pub fn new(n: usize, psi: &[f64], beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidParams("beta must be positive".into()));
        }
        let log_n2 = 2.0 * (n as f64).ln();
        let max_psi = psi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = psi.iter().map(|&p| (beta * (p - max_psi)).exp()).sum();
        let log_z = beta * max_psi + sum.ln();
        let weights: Vec<f64> = psi
            .iter()
            .map(|&p| (beta * (p - max_psi)).exp() / sum)
            .collect();
        Ok(GibbsEnsemble {
            n,
            beta,
            weights,
            log_z,
            f_n: log_z / log_n2,
            max_psi,
            xi: max_psi / log_n2,
            restricted: None,
        })
    }

    /// Build from a sample's psi (or psi^u when present).
    pub fn from_sample(ctx: &FieldContext, sample: &FieldSample, beta: f64) -> Result<Self> {
        let psi = sample.psi_u.as_ref().unwrap_or(&sample.psi);
        GibbsEnsemble::new(ctx.n(), psi, beta)
    }

    /// Attach the restriction to A_{n,rho}; fails when the set is empty.
    pub fn restrict(mut self, psi: &[f64], rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidParams(format!("rho = {rho} outside (0,1]")));
        }
        let indices = restricted_set(self.n, rho);
        if indices.is_empty() {
            return Err(Error::EmptyRestriction { n: self.n, rho });
        }
        let log_n2 = 2.0 * (self.n as f64).ln();
        let max_in = indices
            .iter()
            .map(|&i| psi[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = indices
            .iter()
            .map(|&i| (self.beta * (psi[i] - max_in)).exp())
            .sum();
        let weights: Vec<f64> = indices
            .iter()
            .map(|&i| (self.beta * (psi[i] - max_in)).exp() / sum)
            .collect();
        let f_n_rho = (self.beta * max_in + sum.ln()) / log_n2;
        // complement free energy
        let inside: std::collections::HashSet<usize> = indices.iter().cloned().collect();
        let mut max_out = f64::NEG_INFINITY;
        for (i, &p) in psi.iter().enumerate() {
            if !inside.contains(&i) {
                max_out = max_out.max(p);
            }
        }
        let f_complement = if max_out.is_finite() {
            let s: f64 = psi
                .iter()
                .enumerate()
                .filter(|(i, _)| !inside.contains(i))
                .map(|(_, &p)| (self.beta * (p - max_out)).exp())
                .sum();
            (self.beta * max_out + s.ln()) / log_n2
        } else {
            f64::NEG_INFINITY
        };
        self.restricted = Some(RestrictedEnsemble {
            rho,
            indices,
            weights,
            f_n_rho,
            f_complement,
        });
        Ok(self)
    }

    pub fn restricted(&self) -> Option<&RestrictedEnsemble> {
        self.restricted.as_ref()
    }

    /// Gibbs mass of the complement of A_{n,rho} under the full measure.
    /// Equals 1 when the restricted set is empty.
    pub fn mass_outside(&self, rho: f64) -> f64 {
        let inside: f64 = restricted_set(self.n, rho)
            .iter()
            .map(|&i| self.weights[i])
            .sum();
        1.0 - inside
    }
}

/// |{v : psi_v >= gamma log n^2}| for each gamma.
pub fn high_point_counts(n: usize, psi: &[f64], gammas: &[f64]) -> Vec<usize> {
    let log_n2 = 2.0 * (n as f64).ln();
    gammas
        .iter()
        .map(|&g| psi.iter().filter(|&&p| p >= g * log_n2).count())
        .collect()
}

/// Inverse-CDF categorical sampler over a weight vector.
pub struct ReplicaSampler {
    cum: Vec<f64>,
}

impl ReplicaSampler {
    pub fn new(weights: &[f64]) -> Self {
        let mut cum = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in weights {
            acc += w;
            cum.push(acc);
        }
        ReplicaSampler { cum }
    }

    /// Index into the weight vector (not the vertex set, for restricted
    /// ensembles map through the index list).
    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random::<f64>() * self.cum.last().unwrap();
        self.cum.partition_point(|&c| c <= u).min(self.cum.len() - 1)
    }
}

// ---------------------------------------------------------------------------
// Overlap functionals
// ---------------------------------------------------------------------------

/// Bounded functions of the replica overlaps used in the identity checks:
/// constants and products of overlap threshold indicators.
#[derive(Clone, Debug)]
pub enum OverlapFunction {
    One,
    /// Product over replica pairs (i, j), 0-based, of 1{q(v_i, v_j) > t}.
    IndicatorAbove { pairs: Vec<(usize, usize)>, threshold: f64 },
}

impl OverlapFunction {
    pub fn sup_norm(&self) -> f64 {
        1.0
    }

    fn eval(&self, q: impl Fn(usize, usize) -> f64, tuple: &[usize]) -> f64 {
        match self {
            OverlapFunction::One => 1.0,
            OverlapFunction::IndicatorAbove { pairs, threshold } => {
                for &(a, b) in pairs {
                    if q(tuple[a], tuple[b]) <= *threshold {
                        return 0.0;
                    }
                }
                1.0
            }
        }
    }
}

/// The functional of the extended identity: s replicas, distinguished index
/// k (0-based, < s), a bounded overlap function h, and the scale window
/// (alpha, alpha') defining the kernel through the normalized speed.
#[derive(Clone, Debug)]
pub struct GgFunctional {
    pub s: usize,
    pub k: usize,
    pub h: OverlapFunction,
    pub alpha: f64,
    pub alpha_prime: f64,
}

/// Check the between-effective-scales placement of the window: some j with
/// lambda^{j-1} < alpha < alpha' < lambda^{j + (m-j) 1{j = l_beta}}.
pub fn validate_gg_window(
    profile: &SpeedProfile,
    beta: f64,
    alpha: f64,
    alpha_prime: f64,
) -> Result<()> {
    if !(alpha < alpha_prime) {
        return Err(Error::BadScaleWindow {
            alpha,
            alpha_prime,
            reason: "need alpha < alpha'".into(),
        });
    }
    let m = profile.effective_count();
    let lb = profile.l_beta(beta).min(m);
    let scales = profile.eff_scales();
    for j in 1..=lb {
        let hi = if j == lb { scales[m] } else { scales[j] };
        if scales[j - 1] < alpha && alpha_prime < hi {
            return Ok(());
        }
    }
    Err(Error::BadScaleWindow {
        alpha,
        alpha_prime,
        reason: "window does not sit between consecutive effective scales".into(),
    })
}

/// The kernel r -> length((Jbar(alpha), Jbar(alpha')] intersect (-inf, q)),
/// i.e. integral over the window of 1{r < q} dr.
fn window_kernel(q: f64, lo: f64, hi: f64) -> f64 {
    (q.min(hi) - lo).max(0.0)
}

// ---------------------------------------------------------------------------
// Ghirlanda-Guerra residual on the field
// ---------------------------------------------------------------------------

/// Per-sample components of the identity: the (s+1)-replica term, the
/// two-replica kernel mean, the s-replica h mean, and the summed
/// same-tuple kernel terms.
struct GgComponents {
    t_extra: f64,
    kernel2: f64,
    h_mean: f64,
    t_same: f64,
}

fn gg_components_exact(
    weights: &[f64],
    vertex_of: &dyn Fn(usize) -> usize,
    q: &dyn Fn(usize, usize) -> f64,
    f: &GgFunctional,
    lo: f64,
    hi: f64,
) -> GgComponents {
    let nw = weights.len();
    match f.s {
        1 => {
            // h is necessarily constant for a single replica
            let mut kernel2 = 0.0;
            for i in 0..nw {
                let vi = vertex_of(i);
                for j in 0..nw {
                    kernel2 += weights[i] * weights[j] * window_kernel(q(vi, vertex_of(j)), lo, hi);
                }
            }
            GgComponents {
                t_extra: kernel2,
                kernel2,
                h_mean: 1.0,
                t_same: 0.0,
            }
        }
        2 => {
            // factorized double sums through the distinguished replica
            let hv = |i: usize, j: usize| f.h.eval(|a, b| q(a, b), &[vertex_of(i), vertex_of(j)]);
            let mut kernel2 = 0.0;
            let mut h_mean = 0.0;
            let mut t_same = 0.0;
            let mut h_row = vec![0.0; nw];
            let mut k_row = vec![0.0; nw];
            for i in 0..nw {
                let vi = vertex_of(i);
                let mut hr = 0.0;
                let mut kr = 0.0;
                for j in 0..nw {
                    let vj = vertex_of(j);
                    let k = window_kernel(q(vi, vj), lo, hi);
                    let h = hv(i, j);
                    hr += weights[j] * h;
                    kr += weights[j] * k;
                    kernel2 += weights[i] * weights[j] * k;
                    h_mean += weights[i] * weights[j] * h;
                    t_same += weights[i] * weights[j] * k * h;
                }
                h_row[i] = hr;
                k_row[i] = kr;
            }
            // E^{x3}[K(q(v_k, v_3)) h(v_1, v_2)]: condition on the
            // distinguished replica
            let mut t_extra = 0.0;
            for i in 0..nw {
                t_extra += weights[i] * h_row[i] * k_row[i];
            }
            GgComponents {
                t_extra,
                kernel2,
                h_mean,
                t_same,
            }
        }
        s => {
            // replica-sampled inner expectation for higher order identities
            // is handled by the caller; exact sums would cost |V|^{s+1}
            panic!("exact inner sums implemented for s <= 2, got s = {s}")
        }
    }
}

fn gg_components_sampled(
    sampler: &ReplicaSampler,
    vertex_of: &dyn Fn(usize) -> usize,
    q: &dyn Fn(usize, usize) -> f64,
    f: &GgFunctional,
    lo: f64,
    hi: f64,
    tuples: usize,
    rng: &mut impl Rng,
) -> GgComponents {
    let s = f.s;
    let mut t_extra = 0.0;
    let mut kernel2 = 0.0;
    let mut h_mean = 0.0;
    let mut t_same = 0.0;
    let mut tuple = vec![0usize; s + 1];
    for _ in 0..tuples {
        for slot in tuple.iter_mut() {
            *slot = vertex_of(sampler.draw(rng));
        }
        let h = f.h.eval(|a, b| q(a, b), &tuple[..s]);
        t_extra += window_kernel(q(tuple[f.k], tuple[s]), lo, hi) * h;
        kernel2 += window_kernel(q(tuple[0], tuple[1.min(s)]), lo, hi);
        h_mean += h;
        for l in 0..s {
            if l != f.k {
                t_same += window_kernel(q(tuple[f.k], tuple[l]), lo, hi) * h;
            }
        }
    }
    let m = tuples as f64;
    GgComponents {
        t_extra: t_extra / m,
        kernel2: kernel2 / m,
        h_mean: h_mean / m,
        t_same: t_same / m,
    }
}

/// Monte Carlo estimate of the approximate-identity residual: the
/// (s+1)-replica window term minus the 1/s-weighted two-replica and
/// s-replica terms, with common random numbers across the three terms.
/// `rho = 1` runs on the full box.
pub fn gg_residual(
    ctx: &FieldContext,
    beta: f64,
    rho: f64,
    f: &GgFunctional,
    n_samples: usize,
    tuples_per_sample: usize,
    master_seed: u64,
) -> Result<McEstimate> {
    validate_gg_window(ctx.profile(), beta, f.alpha, f.alpha_prime)?;
    if f.k >= f.s {
        return Err(Error::InvalidParams(format!(
            "distinguished index {} out of range for s = {}",
            f.k, f.s
        )));
    }
    let lo = ctx.profile().speed_normalized(f.alpha);
    let hi = ctx.profile().speed_normalized(f.alpha_prime);
    let _ = ctx.cov_psi();
    let exact = ctx.vertex_count() <= EXACT_INNER_LIMIT && f.s <= 2;
    let rows: Vec<Vec<f64>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let sample = ctx.sample(derive_seed(master_seed, "gg-field", &[i]));
            let ens = GibbsEnsemble::new(ctx.n(), &sample.psi, beta).unwrap();
            let (weights, indices): (Vec<f64>, Option<Vec<usize>>) = if rho >= 1.0 {
                (ens.weights.clone(), None)
            } else {
                let r = GibbsEnsemble::new(ctx.n(), &sample.psi, beta)
                    .unwrap()
                    .restrict(&sample.psi, rho)
                    .expect("restricted set empty");
                let r = r.restricted().unwrap().clone();
                (r.weights, Some(r.indices))
            };
            let vertex_of = |i: usize| -> usize {
                match &indices {
                    Some(ix) => ix[i],
                    None => i,
                }
            };
            let q = |a: usize, b: usize| ctx.overlap(a, b);
            let c = if exact {
                gg_components_exact(&weights, &vertex_of, &q, f, lo, hi)
            } else {
                let sampler = ReplicaSampler::new(&weights);
                let mut rng = derive_rng(master_seed, "gg-replicas", &[i]);
                gg_components_sampled(
                    &sampler,
                    &vertex_of,
                    &q,
                    f,
                    lo,
                    hi,
                    tuples_per_sample,
                    &mut rng,
                )
            };
            vec![c.t_extra, c.kernel2, c.h_mean, c.t_same]
        })
        .collect();
    let s = f.s as f64;
    Ok(delta_method(&rows, master_seed, |m| {
        let value = m[0] - (m[1] * m[2] + m[3]) / s;
        let grad = vec![1.0, -m[2] / s, -m[1] / s, -1.0 / s];
        (value, grad)
    }))
}

// ---------------------------------------------------------------------------
// Gaussian integration by parts (Bovier-Kurkova identity)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BkReport {
    pub lhs: f64,
    pub rhs: f64,
    /// Estimate of LHS - RHS; exactly zero in expectation.
    pub diff: McEstimate,
}

/// Check the exact identity: E G^{x s}[psi_{v_k}(a,a') h] / (beta (J log n + C0))
/// equals sum_l E G^{x s}[q_{a,a'}(v_k, v_l) h] - s E G^{x(s+1)}[q_{a,a'}(v_k, v_{s+1}) h].
/// Inner expectations are exact sums; vertex counts above the exact limit
/// are rejected.
pub fn bovier_kurkova_check(
    ctx: &FieldContext,
    beta: f64,
    rho: f64,
    f: &GgFunctional,
    n_samples: usize,
    master_seed: u64,
) -> Result<BkReport> {
    validate_gg_window(ctx.profile(), beta, f.alpha, f.alpha_prime)?;
    if ctx.vertex_count() > EXACT_INNER_LIMIT || f.s > 2 {
        return Err(Error::InvalidParams(
            "integration-by-parts check runs exact inner sums only (vertex count <= 4096, s <= 2)"
                .into(),
        ));
    }
    let inc_cov = ctx.increment_cov_vs_psi(f.alpha, f.alpha_prime)?;
    let norm = ctx.overlap_norm();
    let rows: Vec<Vec<f64>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let sample = ctx.sample(derive_seed(master_seed, "bk-field", &[i]));
            let psi_inc = ctx.psi_increment(&sample, f.alpha, f.alpha_prime).unwrap();
            let ens = GibbsEnsemble::new(ctx.n(), &sample.psi, beta).unwrap();
            let (weights, indices): (Vec<f64>, Option<Vec<usize>>) = if rho >= 1.0 {
                (ens.weights, None)
            } else {
                let r = GibbsEnsemble::new(ctx.n(), &sample.psi, beta)
                    .unwrap()
                    .restrict(&sample.psi, rho)
                    .expect("restricted set empty");
                let r = r.restricted().unwrap().clone();
                (r.weights, Some(r.indices))
            };
            let vertex_of = |i: usize| -> usize {
                match &indices {
                    Some(ix) => ix[i],
                    None => i,
                }
            };
            let nw = weights.len();
            let qi = |a: usize, b: usize| inc_cov.get(a, b) / norm;
            let qq = |a: usize, b: usize| ctx.overlap(a, b);
            match f.s {
                1 => {
                    let mut lhs = 0.0;
                    let mut same = 0.0;
                    let mut w_qi_w = 0.0;
                    for a in 0..nw {
                        let va = vertex_of(a);
                        lhs += weights[a] * psi_inc[va];
                        same += weights[a] * qi(va, va);
                        let mut row = 0.0;
                        for b in 0..nw {
                            row += weights[b] * qi(va, vertex_of(b));
                        }
                        w_qi_w += weights[a] * row;
                    }
                    lhs /= beta * norm;
                    vec![lhs, same - w_qi_w]
                }
                2 => {
                    let hv =
                        |a: usize, b: usize| f.h.eval(|x, y| qq(x, y), &[vertex_of(a), vertex_of(b)]);
                    // lhs: E[psi_inc(v_k) h(v1,v2)]
                    let mut lhs = 0.0;
                    let mut same = 0.0;
                    let mut h_row = vec![0.0; nw];
                    let mut qrow = vec![0.0; nw];
                    for a in 0..nw {
                        let va = vertex_of(a);
                        let mut hr = 0.0;
                        for b in 0..nw {
                            let vb = vertex_of(b);
                            let h = hv(a, b);
                            hr += weights[b] * h;
                            // sum over l in {k, other}: q(v_k, v_k) h + q(v_k, v_l) h
                            same += weights[a] * weights[b] * (qi(va, va) + qi(va, vb)) * h;
                        }
                        h_row[a] = hr;
                        lhs += weights[a] * psi_inc[va] * hr;
                        let mut qr = 0.0;
                        for c in 0..nw {
                            qr += weights[c] * qi(va, vertex_of(c));
                        }
                        qrow[a] = qr;
                    }
                    lhs /= beta * norm;
                    let mut extra = 0.0;
                    for a in 0..nw {
                        extra += weights[a] * h_row[a] * qrow[a];
                    }
                    vec![lhs, same - 2.0 * extra]
                }
                _ => unreachable!(),
            }
        })
        .collect();
    let lhs_vals: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let rhs_vals: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let diffs: Vec<f64> = rows.iter().map(|r| r[0] - r[1]).collect();
    Ok(BkReport {
        lhs: lhs_vals.iter().sum::<f64>() / lhs_vals.len() as f64,
        rhs: rhs_vals.iter().sum::<f64>() / rhs_vals.len() as f64,
        diff: McEstimate::from_values(&diffs, master_seed),
    })
}

// ---------------------------------------------------------------------------
// Two-overlap distribution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct TwoOverlapCdf {
    pub n: usize,
    pub beta: f64,
    pub rho: f64,
    pub r_grid: Vec<f64>,
    pub cdf: Vec<f64>,
    pub standard_error: Vec<f64>,
    pub sample_count: usize,
    pub seed: u64,
}

/// Estimate r -> E G^{x 2}[1{q <= r}] on the given grid. Exact inner double
/// sums when the box allows it, replica pairs otherwise. `rho = 1` uses the
/// full box measure.
pub fn empirical_two_overlap_cdf(
    ctx: &FieldContext,
    beta: f64,
    rho: f64,
    r_grid: &[f64],
    n_samples: usize,
    pairs_per_sample: usize,
    master_seed: u64,
) -> Result<TwoOverlapCdf> {
    ctx.profile().limit_law(beta)?; // propagate the critical-beta error
    let _ = ctx.cov_psi();
    let exact = ctx.vertex_count() <= EXACT_INNER_LIMIT;
    let grid = r_grid.to_vec();
    let per_sample: Vec<Vec<f64>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let sample = ctx.sample(derive_seed(master_seed, "tod-field", &[i]));
            let ens = GibbsEnsemble::new(ctx.n(), &sample.psi, beta).unwrap();
            let (weights, indices): (Vec<f64>, Option<Vec<usize>>) = if rho >= 1.0 {
                (ens.weights, None)
            } else {
                let r = GibbsEnsemble::new(ctx.n(), &sample.psi, beta)
                    .unwrap()
                    .restrict(&sample.psi, rho)
                    .expect("restricted set empty");
                let r = r.restricted().unwrap().clone();
                (r.weights, Some(r.indices))
            };
            let vertex_of = |i: usize| -> usize {
                match &indices {
                    Some(ix) => ix[i],
                    None => i,
                }
            };
            let nw = weights.len();
            let mut cdf = vec![0.0; grid.len()];
            if exact {
                for a in 0..nw {
                    let va = vertex_of(a);
                    for b in 0..nw {
                        let q = ctx.overlap(va, vertex_of(b));
                        let w = weights[a] * weights[b];
                        for (slot, &r) in cdf.iter_mut().zip(&grid) {
                            if q <= r {
                                *slot += w;
                            }
                        }
                    }
                }
            } else {
                let sampler = ReplicaSampler::new(&weights);
                let mut rng = derive_rng(master_seed, "tod-replicas", &[i]);
                for _ in 0..pairs_per_sample {
                    let a = vertex_of(sampler.draw(&mut rng));
                    let b = vertex_of(sampler.draw(&mut rng));
                    let q = ctx.overlap(a, b);
                    for (slot, &r) in cdf.iter_mut().zip(&grid) {
                        if q <= r {
                            *slot += 1.0;
                        }
                    }
                }
                for slot in &mut cdf {
                    *slot /= pairs_per_sample as f64;
                }
            }
            cdf
        })
        .collect();
    let m = n_samples as f64;
    let mut cdf = vec![0.0; grid.len()];
    let mut se = vec![0.0; grid.len()];
    for row in &per_sample {
        for (acc, v) in cdf.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for c in &mut cdf {
        *c /= m;
    }
    for row in &per_sample {
        for ((acc, v), c) in se.iter_mut().zip(row).zip(&cdf) {
            *acc += (v - c) * (v - c);
        }
    }
    for s in &mut se {
        *s = (*s / (m * (m - 1.0).max(1.0))).sqrt();
    }
    Ok(TwoOverlapCdf {
        n: ctx.n(),
        beta,
        rho,
        r_grid: grid,
        cdf,
        standard_error: se,
        sample_count: n_samples,
        seed: master_seed,
    })
}

// ---------------------------------------------------------------------------
// Ultrametricity
// ---------------------------------------------------------------------------

/// Estimate E G^{x 3}[1{q(v1,v2) < q(v1,v3) ^ q(v2,v3) - eps}], the
/// ultrametricity violation probability with slack eps.
pub fn ultrametricity_statistic(
    ctx: &FieldContext,
    beta: f64,
    rho: f64,
    eps: f64,
    n_samples: usize,
    triples_per_sample: usize,
    master_seed: u64,
) -> Result<McEstimate> {
    let _ = ctx.cov_psi();
    let values: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let sample = ctx.sample(derive_seed(master_seed, "ultra-field", &[i]));
            let ens = GibbsEnsemble::new(ctx.n(), &sample.psi, beta).unwrap();
            let (weights, indices): (Vec<f64>, Option<Vec<usize>>) = if rho >= 1.0 {
                (ens.weights, None)
            } else {
                let r = GibbsEnsemble::new(ctx.n(), &sample.psi, beta)
                    .unwrap()
                    .restrict(&sample.psi, rho)
                    .expect("restricted set empty");
                let r = r.restricted().unwrap().clone();
                (r.weights, Some(r.indices))
            };
            let vertex_of = |i: usize| -> usize {
                match &indices {
                    Some(ix) => ix[i],
                    None => i,
                }
            };
            let sampler = ReplicaSampler::new(&weights);
            let mut rng = derive_rng(master_seed, "ultra-replicas", &[i]);
            let mut violations = 0usize;
            for _ in 0..triples_per_sample {
                let v1 = vertex_of(sampler.draw(&mut rng));
                let v2 = vertex_of(sampler.draw(&mut rng));
                let v3 = vertex_of(sampler.draw(&mut rng));
                let q12 = ctx.overlap(v1, v2);
                let q13 = ctx.overlap(v1, v3);
                let q23 = ctx.overlap(v2, v3);
                if q12 < q13.min(q23) - eps {
                    violations += 1;
                }
            }
            violations as f64 / triples_per_sample as f64
        })
        .collect();
    Ok(McEstimate::from_values(&values, master_seed))
}

// ---------------------------------------------------------------------------
// Free-energy convergence study
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct FreeEnergyStudy {
    pub beta: f64,
    pub f_limit: f64,
    pub ns: Vec<usize>,
    /// Median of |f_N - f_limit| per box side.
    pub median_abs_dev: Vec<f64>,
    pub mean_f: Vec<f64>,
    /// Mean Gibbs mass outside A_{n,rho} per box side, when rho given.
    pub boundary_mass: Option<Vec<f64>>,
    pub samples_per_n: usize,
    pub seed: u64,
}

/// Per-sample free energies across box sides with index-paired seeds, plus
/// the deviation medians against the limit.
pub fn free_energy_study(
    contexts: &[&FieldContext],
    beta: f64,
    rho: Option<f64>,
    samples_per_n: usize,
    master_seed: u64,
) -> Result<FreeEnergyStudy> {
    if contexts.is_empty() {
        return Err(Error::InvalidParams("need at least one context".into()));
    }
    let f_limit = contexts[0].profile().free_energy(beta);
    let mut ns = Vec::new();
    let mut medians = Vec::new();
    let mut means = Vec::new();
    let mut masses = rho.map(|_| Vec::new());
    for ctx in contexts {
        let per: Vec<(f64, f64)> = (0..samples_per_n as u64)
            .into_par_iter()
            .map(|i| {
                let sample = ctx.sample(derive_seed(master_seed, "fe-field", &[ctx.n() as u64, i]));
                let ens = GibbsEnsemble::new(ctx.n(), &sample.psi, beta).unwrap();
                let mass = rho.map(|r| ens.mass_outside(r)).unwrap_or(0.0);
                (ens.f_n, mass)
            })
            .collect();
        let mut devs: Vec<f64> = per.iter().map(|&(f, _)| (f - f_limit).abs()).collect();
        devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ns.push(ctx.n());
        medians.push(devs[devs.len() / 2]);
        means.push(per.iter().map(|&(f, _)| f).sum::<f64>() / per.len() as f64);
        if let Some(m) = &mut masses {
            m.push(per.iter().map(|&(_, x)| x).sum::<f64>() / per.len() as f64);
        }
    }
    Ok(FreeEnergyStudy {
        beta,
        f_limit,
        ns,
        median_abs_dev: medians,
        mean_f: means,
        boundary_mass: masses,
        samples_per_n,
        seed: master_seed,
    })
}

/// 99th percentile of the chi-square distribution by the Wilson-Hilferty
/// approximation, for the uniformity test.
pub fn chi_square_99(df: usize) -> f64 {
    let k = df as f64;
    let z = 2.3263478740408408; // Phi^{-1}(0.99)
    let t = 1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt();
    k * t * t * t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::FieldParams;

    fn worked_ctx(n: usize) -> FieldContext {
        let params = FieldParams::new(vec![2.0, 1.0], vec![0.5, 1.0]).unwrap();
        FieldContext::new(n, &params, &[0.2, 0.4]).unwrap()
    }

    #[test]
    fn ensemble_weights_normalize_and_sandwich_holds() {
        let ctx = worked_ctx(16);
        for (seed, beta) in [(1u64, 0.25), (2, 1.5), (3, 4.0)] {
            let s = ctx.sample(seed);
            let ens = GibbsEnsemble::new(16, &s.psi, beta).unwrap();
            let total: f64 = ens.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(ens.f_n >= beta * ens.xi - 1e-12);
            assert!(ens.f_n <= beta * ens.xi + 2.0 + 1e-12);
        }
    }

    #[test]
    fn small_beta_free_energy_approaches_box_entropy() {
        let ctx = worked_ctx(16);
        let s = ctx.sample(4);
        let ens = GibbsEnsemble::new(16, &s.psi, 1e-9).unwrap();
        let want = (17.0f64 * 17.0).ln() / (2.0 * 16.0f64.ln());
        assert!((ens.f_n - want).abs() < 1e-6);
        assert!(want >= 1.0);
    }

    #[test]
    fn restricted_free_energy_monotone_in_rho() {
        let ctx = worked_ctx(32);
        let s = ctx.sample(9);
        let f_small = GibbsEnsemble::new(32, &s.psi, 2.0)
            .unwrap()
            .restrict(&s.psi, 0.2)
            .unwrap()
            .restricted()
            .unwrap()
            .f_n_rho;
        let full = GibbsEnsemble::new(32, &s.psi, 2.0)
            .unwrap()
            .restrict(&s.psi, 1.0)
            .unwrap();
        let f_full = full.restricted().unwrap().f_n_rho;
        assert!(f_full >= f_small);
        assert!((f_full - full.f_n).abs() < 1e-12);
        // complement of the full box is empty
        assert_eq!(full.restricted().unwrap().f_complement, f64::NEG_INFINITY);
    }

    #[test]
    fn empty_restriction_is_rejected_but_outside_mass_works() {
        let ctx = worked_ctx(16);
        let s = ctx.sample(5);
        let ens = GibbsEnsemble::new(16, &s.psi, 2.0).unwrap();
        assert!(matches!(
            ens.clone().restrict(&s.psi, 0.2),
            Err(Error::EmptyRestriction { .. })
        ));
        assert_eq!(ens.mass_outside(0.2), 1.0);
        assert!(ens.mass_outside(1.0).abs() < 1e-12);
    }

    #[test]
    fn high_point_counts_edges() {
        let ctx = worked_ctx(16);
        let s = ctx.sample(6);
        let ens = GibbsEnsemble::new(16, &s.psi, 1.0).unwrap();
        let counts = high_point_counts(16, &s.psi, &[0.0, ens.xi + 0.01]);
        assert_eq!(counts[0], 17 * 17 - s.psi.iter().filter(|&&p| p < 0.0).count());
        assert_eq!(counts[1], 0);
    }

    #[test]
    fn replica_draws_are_deterministic_and_uniform_at_zero_temperature() {
        let nv = 81usize;
        let weights = vec![1.0 / nv as f64; nv];
        let sampler = ReplicaSampler::new(&weights);
        let mut rng = derive_rng(7, "unif", &[]);
        let draws = 100_000usize;
        let mut counts = vec![0usize; nv];
        for _ in 0..draws {
            counts[sampler.draw(&mut rng)] += 1;
        }
        let expected = draws as f64 / nv as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(
            chi2 < chi_square_99(nv - 1),
            "chi2 {chi2} vs {}",
            chi_square_99(nv - 1)
        );
        let mut rng2 = derive_rng(7, "unif", &[]);
        let mut rng3 = derive_rng(7, "unif", &[]);
        for _ in 0..100 {
            assert_eq!(sampler.draw(&mut rng2), sampler.draw(&mut rng3));
        }
    }

    #[test]
    fn modal_vertex_frequency_matches_weight() {
        let ctx = worked_ctx(8);
        let s = ctx.sample(11);
        let ens = GibbsEnsemble::new(8, &s.psi, 6.0).unwrap();
        let modal = ens
            .weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let sampler = ReplicaSampler::new(&ens.weights);
        let mut rng = derive_rng(8, "modal", &[]);
        let draws = 50_000usize;
        let hits = (0..draws).filter(|_| sampler.draw(&mut rng) == modal.0).count();
        let p_hat = hits as f64 / draws as f64;
        let se = (modal.1 * (1.0 - modal.1) / draws as f64).sqrt();
        assert!(
            (p_hat - modal.1).abs() <= 3.0 * se.max(1e-4),
            "{p_hat} vs {}",
            modal.1
        );
    }

    #[test]
    fn gg_residual_is_identically_zero_for_single_replica_constant_h() {
        let ctx = worked_ctx(8);
        let f = GgFunctional {
            s: 1,
            k: 0,
            h: OverlapFunction::One,
            alpha: 0.2,
            alpha_prime: 0.4,
        };
        let est = gg_residual(&ctx, 1.5, 1.0, &f, 20, 0, 77).unwrap();
        assert!(est.mean.abs() < 1e-14);
        assert!(est.standard_error < 1e-14);
    }

    #[test]
    fn gg_residual_empty_window_is_zero() {
        let ctx = worked_ctx(8);
        // degenerate window: alpha = alpha' rejected by placement check
        let f = GgFunctional {
            s: 2,
            k: 0,
            h: OverlapFunction::IndicatorAbove {
                pairs: vec![(0, 1)],
                threshold: 0.4,
            },
            alpha: 0.3,
            alpha_prime: 0.3,
        };
        assert!(gg_residual(&ctx, 1.5, 1.0, &f, 4, 0, 1).is_err());
    }

    #[test]
    fn gg_window_validation() {
        let ctx = worked_ctx(8);
        let p = ctx.profile();
        assert!(validate_gg_window(p, 1.5, 0.2, 0.4).is_ok());
        assert!(validate_gg_window(p, 1.5, 0.6, 0.9).is_ok());
        // straddles the effective scale 0.5
        assert!(validate_gg_window(p, 1.5, 0.4, 0.6).is_err());
        // at high temperature l_beta = 1 and only the full window remains
        assert!(validate_gg_window(p, 0.5, 0.2, 0.9).is_ok());
        assert!(validate_gg_window(p, 0.5, 0.0, 0.4).is_err());
    }

    #[test]
    fn bovier_kurkova_identity_within_three_se() {
        let ctx = worked_ctx(16);
        let f = GgFunctional {
            s: 1,
            k: 0,
            h: OverlapFunction::One,
            alpha: 0.2,
            alpha_prime: 0.4,
        };
        let rep = bovier_kurkova_check(&ctx, 1.5, 1.0, &f, 400, 13).unwrap();
        assert!(
            rep.diff.mean.abs() <= 3.0 * rep.diff.standard_error,
            "diff {} +- {}",
            rep.diff.mean,
            rep.diff.standard_error
        );
        // the identity is nontrivial: both sides are away from zero
        assert!(rep.lhs.abs() > 1e-4);
    }

    #[test]
    fn bovier_kurkova_two_replica_variant() {
        let ctx = worked_ctx(8);
        let f = GgFunctional {
            s: 2,
            k: 0,
            h: OverlapFunction::IndicatorAbove {
                pairs: vec![(0, 1)],
                threshold: 0.4,
            },
            alpha: 0.2,
            alpha_prime: 0.4,
        };
        let rep = bovier_kurkova_check(&ctx, 1.5, 1.0, &f, 600, 14).unwrap();
        assert!(
            rep.diff.mean.abs() <= 3.0 * rep.diff.standard_error,
            "diff {} +- {}",
            rep.diff.mean,
            rep.diff.standard_error
        );
    }

    #[test]
    fn free_energy_derivative_link_per_sample() {
        // d/du f_{N,rho}^{psi^u} at u=0 equals (beta / log n^2) G[phi(a,a')],
        // sample by sample
        let params = FieldParams::new(vec![2.0, 1.0], vec![0.5, 1.0]).unwrap();
        let ctx = FieldContext::new(12, &params, &[0.2, 0.4]).unwrap();
        let pert = crate::analytics::Perturbation::new(&params, 0.2, 0.4).unwrap();
        let beta = 1.5;
        let h = 1e-4;
        let log_n2 = 2.0 * 12.0f64.ln();
        for seed in [3u64, 4, 5] {
            let mut s = ctx.sample(seed);
            let mut fu = |u: f64| -> f64 {
                ctx.perturb_sample(&mut s, &pert, u).unwrap();
                GibbsEnsemble::new(12, s.psi_u.as_ref().unwrap(), beta)
                    .unwrap()
                    .f_n
            };
            let fd = (fu(h) - fu(-h)) / (2.0 * h);
            let ens = GibbsEnsemble::new(12, &s.psi, beta).unwrap();
            let inc = ctx.psi_increment(&s, 0.2, 0.4).unwrap();
            let sigma1 = params.sigma()[0];
            let gibbs_avg: f64 = ens
                .weights
                .iter()
                .zip(&inc)
                .map(|(w, p)| w * p / sigma1)
                .sum();
            let want = beta * gibbs_avg / log_n2;
            assert!((fd - want).abs() < 1e-7, "fd {fd} vs {want}");
        }
    }

    #[test]
    fn two_overlap_cdf_is_monotone_with_unit_endpoints() {
        let ctx = worked_ctx(16);
        let grid = vec![-0.5, 0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let cdf = empirical_two_overlap_cdf(&ctx, 1.5, 1.0, &grid, 40, 0, 21).unwrap();
        for w in cdf.cdf.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
        assert!((cdf.cdf.last().unwrap() - 1.0).abs() < 1e-12);
        // exact covariance keeps overlaps essentially nonnegative
        assert!(cdf.cdf[0] < 0.05);
        // critical beta propagates
        assert!(matches!(
            empirical_two_overlap_cdf(&ctx, 1.0, 1.0, &grid, 2, 0, 1),
            Err(Error::CriticalBeta { .. })
        ));
    }

    #[test]
    fn ultrametricity_slack_two_is_never_violated() {
        let ctx = worked_ctx(16);
        let est = ultrametricity_statistic(&ctx, 2.0, 1.0, 2.0, 10, 200, 31).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.standard_error, 0.0);
    }

    #[test]
    fn free_energy_study_reports_shapes() {
        let params = FieldParams::new(vec![2.0, 1.0], vec![0.5, 1.0]).unwrap();
        let c8 = FieldContext::new(8, &params, &[]).unwrap();
        let c12 = FieldContext::new(12, &params, &[]).unwrap();
        let study = free_energy_study(&[&c8, &c12], 1.5, Some(0.5), 16, 41).unwrap();
        assert_eq!(study.ns, vec![8, 12]);
        assert_eq!(study.median_abs_dev.len(), 2);
        let masses = study.boundary_mass.unwrap();
        assert!(masses.iter().all(|&m| (0.0..=1.0).contains(&m)));
        assert!((study.f_limit - 2.28125).abs() < 1e-12);
    }

    #[test]
    fn chi_square_quantile_matches_tables() {
        // reference values: 6.63 (df 1), 112.33 (df 80)
        assert!((chi_square_99(1) - 6.63).abs() < 0.08);
        assert!((chi_square_99(80) - 112.33).abs() < 0.1);
    }
}

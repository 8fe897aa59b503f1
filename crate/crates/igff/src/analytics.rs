//! Closed-form limit quantities of the scale-inhomogeneous field: speed
//! function and its concave majorant, effective scales and variances,
//! critical levels, entropy, free energies, the limiting two-overlap
//! distribution and the cascade parameters it induces, and derivatives of
//! the free energy under a variance perturbation on a scale window.
//!
//! Everything here is deterministic and exact up to floating point: all
//! integrands are step functions, so integrals are evaluated on merged
//! breakpoint grids, never by quadrature.

use crate::error::{Error, Result};

/// Variance multipliers `sigma` on the scale intervals `(lambda[i-1], lambda[i]]`,
/// with the implicit lambda[-1] = 0 and lambda[M-1] = 1.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldParams {
    sigma: Vec<f64>,
    lambda: Vec<f64>,
}

impl FieldParams {
    pub fn new(sigma: Vec<f64>, lambda: Vec<f64>) -> Result<Self> {
        if sigma.is_empty() || sigma.len() != lambda.len() {
            return Err(Error::InvalidParams(format!(
                "need equal nonzero counts of sigma and lambda entries, got {} and {}",
                sigma.len(),
                lambda.len()
            )));
        }
        if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParams(
                "all sigma entries must be positive and finite".into(),
            ));
        }
        let mut prev = 0.0;
        for &l in &lambda {
            if !(l > prev) {
                return Err(Error::InvalidParams(
                    "lambda not strictly increasing from 0".into(),
                ));
            }
            prev = l;
        }
        if (prev - 1.0).abs() > 1e-15 {
            return Err(Error::InvalidParams("last lambda must equal 1".into()));
        }
        let mut lambda = lambda;
        *lambda.last_mut().unwrap() = 1.0;
        Ok(FieldParams { sigma, lambda })
    }

    /// Number of scale intervals M.
    pub fn level_count(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// The left-continuous step function sigma(s), with sigma(0) = sigma_1.
    pub fn sigma_at(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return self.sigma[0];
        }
        for (i, &l) in self.lambda.iter().enumerate() {
            if s <= l {
                return self.sigma[i];
            }
        }
        *self.sigma.last().unwrap()
    }

    /// Index i (0-based) with lambda[i-1] <= s (strictly below for s > 0).
    pub fn interval_of(&self, s: f64) -> usize {
        if s <= 0.0 {
            return 0;
        }
        for (i, &l) in self.lambda.iter().enumerate() {
            if s <= l {
                return i;
            }
        }
        self.sigma.len() - 1
    }
}

/// The speed function J(s) = integral of sigma^2, its least concave majorant,
/// and everything read off the majorant: effective variances `sigma_bar`
/// (hull slopes, square-rooted, strictly decreasing), effective scales
/// (hull vertices), and the normalized atoms x^j.
#[derive(Clone, Debug)]
pub struct SpeedProfile {
    params: FieldParams,
    /// Hull vertex abscissae: 0 = eff_scales[0] < ... < eff_scales[m] = 1.
    eff_scales: Vec<f64>,
    /// sqrt of hull slopes per hull segment, strictly decreasing, len m.
    sigma_bar: Vec<f64>,
    /// Hull values at the vertices (equal to J there).
    hull_values: Vec<f64>,
}

/// Slopes closer than this (relatively) are merged into one hull segment.
const SLOPE_MERGE_TOL: f64 = 1e-12;

pub fn build_speed_profile(params: &FieldParams) -> SpeedProfile {
    let m_in = params.level_count();
    // breakpoints of J: (0, 0), (lambda_i, J(lambda_i))
    let mut xs = Vec::with_capacity(m_in + 1);
    let mut ys = Vec::with_capacity(m_in + 1);
    xs.push(0.0);
    ys.push(0.0);
    let mut acc = 0.0;
    let mut prev = 0.0;
    for i in 0..m_in {
        acc += params.sigma[i] * params.sigma[i] * (params.lambda[i] - prev);
        prev = params.lambda[i];
        xs.push(params.lambda[i]);
        ys.push(acc);
    }
    // upper hull by monotone chain: keep indices with strictly decreasing slopes
    let mut hull: Vec<usize> = Vec::with_capacity(xs.len());
    for p in 0..xs.len() {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (xs[b] - xs[a]) * (ys[p] - ys[a]) - (ys[b] - ys[a]) * (xs[p] - xs[a]);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let mut eff_scales = Vec::with_capacity(hull.len());
    let mut hull_values = Vec::with_capacity(hull.len());
    let mut sigma_bar: Vec<f64> = Vec::with_capacity(hull.len() - 1);
    for (k, &ix) in hull.iter().enumerate() {
        if k > 0 {
            let prev_ix = hull[k - 1];
            let slope = (ys[ix] - ys[prev_ix]) / (xs[ix] - xs[prev_ix]);
            let sb = slope.sqrt();
            match sigma_bar.last() {
                Some(&last) if (last - sb).abs() <= SLOPE_MERGE_TOL * last.max(1.0) => {
                    // numerically collinear: extend the previous segment
                    *eff_scales.last_mut().unwrap() = xs[ix];
                    *hull_values.last_mut().unwrap() = ys[ix];
                    continue;
                }
                _ => {
                    sigma_bar.push(sb);
                    eff_scales.push(xs[ix]);
                    hull_values.push(ys[ix]);
                }
            }
        } else {
            eff_scales.push(xs[ix]);
            hull_values.push(ys[ix]);
        }
    }
    SpeedProfile {
        params: params.clone(),
        eff_scales,
        sigma_bar,
        hull_values,
    }
}

impl SpeedProfile {
    pub fn params(&self) -> &FieldParams {
        &self.params
    }

    /// Number of effective scales m.
    pub fn effective_count(&self) -> usize {
        self.sigma_bar.len()
    }

    pub fn sigma_bar(&self) -> &[f64] {
        &self.sigma_bar
    }

    /// 0 = lambda^0 < lambda^1 < ... < lambda^m = 1.
    pub fn eff_scales(&self) -> &[f64] {
        &self.eff_scales
    }

    /// sigma_bar(s): left-continuous step, sigma_bar(0) = sigma_bar[0].
    pub fn sigma_bar_at(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return self.sigma_bar[0];
        }
        for j in 1..self.eff_scales.len() {
            if s <= self.eff_scales[j] {
                return self.sigma_bar[j - 1];
            }
        }
        *self.sigma_bar.last().unwrap()
    }

    /// J(s), the speed function.
    pub fn speed(&self, s: f64) -> f64 {
        let p = &self.params;
        let mut acc = 0.0;
        let mut prev = 0.0;
        for i in 0..p.level_count() {
            let hi = p.lambda[i].min(s);
            if hi > prev {
                acc += p.sigma[i] * p.sigma[i] * (hi - prev);
                prev = hi;
            }
            if p.lambda[i] >= s {
                break;
            }
        }
        acc
    }

    /// J(a, b) = J(b) - J(a).
    pub fn speed_between(&self, a: f64, b: f64) -> f64 {
        self.speed(b) - self.speed(a)
    }

    /// J(1), the total variance speed.
    pub fn total_speed(&self) -> f64 {
        *self.hull_values.last().unwrap()
    }

    /// The least concave majorant evaluated at s.
    pub fn hull(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        for j in 1..self.eff_scales.len() {
            if s <= self.eff_scales[j] {
                let sb = self.sigma_bar[j - 1];
                return self.hull_values[j - 1] + sb * sb * (s - self.eff_scales[j - 1]);
            }
        }
        *self.hull_values.last().unwrap()
    }

    /// Normalized speed Jbar(s) = J(s) / J(1).
    pub fn speed_normalized(&self, s: f64) -> f64 {
        self.speed(s) / self.total_speed()
    }

    pub fn speed_normalized_between(&self, a: f64, b: f64) -> f64 {
        self.speed_between(a, b) / self.total_speed()
    }

    /// Overlap atom x^j = Jbar(lambda^j), j = 0..m.
    pub fn atom(&self, j: usize) -> f64 {
        self.hull_values[j] / self.total_speed()
    }

    /// Integral of sigma^2(s) / sigma_bar(s) over [0, s], on the merged grid.
    pub fn speed_over_sigma_bar(&self, s: f64) -> f64 {
        let mut acc = 0.0;
        let mut prev = 0.0;
        // merged breakpoints of sigma and sigma_bar
        let mut cuts: Vec<f64> = self
            .params
            .lambda
            .iter()
            .chain(self.eff_scales.iter().skip(1))
            .cloned()
            .filter(|&c| c < s)
            .collect();
        cuts.push(s);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        for &c in &cuts {
            if c <= prev {
                continue;
            }
            let mid = 0.5 * (prev + c);
            let sg = self.params.sigma_at(mid);
            let sb = self.sigma_bar_at(mid);
            acc += sg * sg / sb * (c - prev);
            prev = c;
        }
        acc
    }

    /// gamma* = J_{sigma^2 / sigma_bar}(1), the leading-order maximum.
    pub fn gamma_star(&self) -> f64 {
        self.speed_over_sigma_bar(1.0)
    }

    /// Critical levels gamma^0 = 0 < gamma^1 < ... < gamma^m = gamma*.
    pub fn critical_levels(&self) -> Vec<f64> {
        let m = self.effective_count();
        let mut out = Vec::with_capacity(m + 1);
        out.push(0.0);
        for l in 1..=m {
            let el = self.eff_scales[l];
            out.push(self.speed_over_sigma_bar(el) + self.speed_between(el, 1.0) / self.sigma_bar[l - 1]);
        }
        out
    }

    /// The high-point entropy E(gamma) on [0, gamma*].
    pub fn entropy(&self, gamma: f64) -> Result<f64> {
        let gs = self.gamma_star();
        if gamma < 0.0 || gamma > gs * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::GammaOutOfRange {
                gamma,
                gamma_star: gs,
            });
        }
        if gamma == 0.0 {
            return Ok(1.0);
        }
        let levels = self.critical_levels();
        // branch l with gamma in (gamma^{l-1}, gamma^l]
        let mut l = levels.len() - 1;
        for k in 1..levels.len() {
            if gamma <= levels[k] {
                l = k;
                break;
            }
        }
        let el = self.eff_scales[l - 1];
        let offset = self.speed_over_sigma_bar(el);
        let denom = self.speed_between(el, 1.0);
        Ok((1.0 - el) - (gamma - offset) * (gamma - offset) / denom)
    }

    /// Smallest l in 1..=m with beta <= 2 / sigma_bar[l], or m+1 when beta
    /// exceeds every critical inverse temperature.
    pub fn l_beta(&self, beta: f64) -> usize {
        for (j, &sb) in self.sigma_bar.iter().enumerate() {
            if beta <= 2.0 / sb {
                return j + 1;
            }
        }
        self.effective_count() + 1
    }

    /// Limiting free energy as the effective-scale-weighted sum of REM free
    /// energies.
    pub fn free_energy(&self, beta: f64) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.effective_count() {
            let dl = self.eff_scales[j + 1] - self.eff_scales[j];
            acc += rem_free_energy(self.sigma_bar[j], beta) * dl;
        }
        acc
    }

    /// The same limit written with the branch split at l_beta.
    pub fn free_energy_split(&self, beta: f64) -> f64 {
        let lb = self.l_beta(beta);
        let mut acc = 0.0;
        for j in 0..self.effective_count() {
            let dl = self.eff_scales[j + 1] - self.eff_scales[j];
            let bc = 2.0 / self.sigma_bar[j];
            if j + 1 <= lb - 1 {
                acc += 2.0 * beta / bc * dl;
            } else {
                acc += (1.0 + (beta / bc) * (beta / bc)) * dl;
            }
        }
        acc
    }

    /// Maximize P_beta(gamma) = beta gamma + E(gamma) over [0, gamma*] by
    /// exact per-branch quadratic maximization plus boundary candidates.
    /// Returns (argmax, max value).
    pub fn free_energy_by_maximization(&self, beta: f64) -> (f64, f64) {
        let gs = self.gamma_star();
        let levels = self.critical_levels();
        let p = |g: f64| beta * g + self.entropy(g).expect("gamma within range");
        let mut best = (0.0, p(0.0));
        let mut consider = |g: f64| {
            let v = p(g);
            if v > best.1 {
                best = (g, v);
            }
        };
        consider(gs);
        for l in 1..levels.len() {
            consider(levels[l]);
            // stationary point of the branch parabola
            let el = self.eff_scales[l - 1];
            let g = self.speed_over_sigma_bar(el) + 0.5 * beta * self.speed_between(el, 1.0);
            if g > levels[l - 1] && g <= levels[l] {
                consider(g);
            }
        }
        best
    }

    /// The limiting two-overlap distribution and cascade parameters at
    /// inverse temperature `beta`. Fails on the excluded critical set.
    pub fn limit_law(&self, beta: f64) -> Result<LimitLaw> {
        if !(beta > 0.0) {
            return Err(Error::InvalidParams("beta must be positive".into()));
        }
        for (j, &sb) in self.sigma_bar.iter().enumerate() {
            let bc = 2.0 / sb;
            if (beta - bc).abs() <= 1e-12 * bc.max(1.0) {
                return Err(Error::CriticalBeta {
                    beta,
                    index: j + 1,
                    critical: bc,
                });
            }
        }
        let lb = self.l_beta(beta);
        let mut atoms = Vec::with_capacity(lb);
        let mut cum_prev = 0.0;
        for j in 1..lb {
            // CDF value on [x^{j-1}, x^j)
            let cum = (2.0 / self.sigma_bar[j - 1]) / beta;
            atoms.push((self.atom(j - 1), cum - cum_prev));
            cum_prev = cum;
        }
        atoms.push((self.atom(lb - 1), 1.0 - cum_prev));
        let zetas: Vec<f64> = (1..lb).map(|j| (2.0 / self.sigma_bar[j - 1]) / beta).collect();
        let qs: Vec<f64> = (0..lb).map(|j| self.atom(j)).collect();
        Ok(LimitLaw {
            beta,
            gamma_star: self.gamma_star(),
            gamma_levels: self.critical_levels(),
            l_beta: lb,
            free_energy: self.free_energy(beta),
            atoms,
            rpc: RpcParams {
                levels: lb - 1,
                zetas,
                qs,
            },
        })
    }
}

/// Limiting REM free energy for variance multiplier `sigma`.
pub fn rem_free_energy(sigma: f64, beta: f64) -> f64 {
    let bc = 2.0 / sigma;
    if beta > bc {
        2.0 * beta / bc
    } else {
        1.0 + (beta / bc) * (beta / bc)
    }
}

/// Cascade parameters read off the limit law: `levels` = l_beta - 1 tree
/// levels, weights zeta_0 < ... < zeta_{r-1} and overlaps q_0 = 0 < ... < q_r.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RpcParams {
    pub levels: usize,
    pub zetas: Vec<f64>,
    pub qs: Vec<f64>,
}

/// The limiting two-overlap distribution at a fixed `beta`, together with
/// the derived cascade parameters.
#[derive(Clone, Debug)]
pub struct LimitLaw {
    pub beta: f64,
    pub gamma_star: f64,
    pub gamma_levels: Vec<f64>,
    pub l_beta: usize,
    pub free_energy: f64,
    /// (location, mass) of every atom, locations increasing, masses > 0
    /// except possibly the last one at high temperature.
    atoms: Vec<(f64, f64)>,
    pub rpc: RpcParams,
}

impl LimitLaw {
    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// Right-continuous CDF Q_beta(r).
    pub fn cdf(&self, r: f64) -> f64 {
        let mut acc = 0.0;
        for &(x, mass) in &self.atoms {
            if r >= x {
                acc += mass;
            }
        }
        acc
    }
}

/// A variance perturbation of size `u` applied on the window `(alpha, alpha']`
/// inside a single sigma interval.
#[derive(Clone, Debug)]
pub struct Perturbation {
    base: FieldParams,
    profile: SpeedProfile,
    pub alpha: f64,
    pub alpha_prime: f64,
    /// 0-based index of the sigma interval containing (alpha, alpha'].
    pub i_star: usize,
    /// 0-based index of the hull segment containing that interval.
    pub j_star: usize,
}

impl Perturbation {
    pub fn new(base: &FieldParams, alpha: f64, alpha_prime: f64) -> Result<Self> {
        if !(0.0 <= alpha && alpha < alpha_prime && alpha_prime <= 1.0) {
            return Err(Error::BadScaleWindow {
                alpha,
                alpha_prime,
                reason: "need 0 <= alpha < alpha' <= 1".into(),
            });
        }
        // the window must sit inside one sigma interval
        let i_star = base.interval_of(alpha_prime);
        let lo = if i_star == 0 { 0.0 } else { base.lambda[i_star - 1] };
        if alpha < lo {
            return Err(Error::BadScaleWindow {
                alpha,
                alpha_prime,
                reason: "window straddles a sigma breakpoint".into(),
            });
        }
        let profile = build_speed_profile(base);
        // hull segment whose scale range contains the window
        let mut j_star = profile.effective_count() - 1;
        for j in 0..profile.effective_count() {
            if alpha_prime <= profile.eff_scales[j + 1] + 1e-15 {
                j_star = j;
                break;
            }
        }
        Ok(Perturbation {
            base: base.clone(),
            profile,
            alpha,
            alpha_prime,
            i_star,
            j_star,
        })
    }

    pub fn base(&self) -> &FieldParams {
        &self.base
    }

    pub fn base_profile(&self) -> &SpeedProfile {
        &self.profile
    }

    /// Parameters with sigma_{i*} replaced by sigma_{i*} + u on (alpha, alpha'],
    /// splicing the window into the scale grid.
    pub fn perturbed_params(&self, u: f64) -> Result<FieldParams> {
        let s0 = self.base.sigma[self.i_star];
        if u <= -s0 {
            return Err(Error::InvalidParams(format!(
                "perturbation u = {u} must exceed -sigma[{}] = {}",
                self.i_star, -s0
            )));
        }
        let mut sigma = Vec::new();
        let mut lambda = Vec::new();
        for i in 0..self.base.level_count() {
            let lo = if i == 0 { 0.0 } else { self.base.lambda[i - 1] };
            let hi = self.base.lambda[i];
            if i != self.i_star {
                sigma.push(self.base.sigma[i]);
                lambda.push(hi);
                continue;
            }
            for (a, b, s) in [
                (lo, self.alpha, s0),
                (self.alpha, self.alpha_prime, s0 + u),
                (self.alpha_prime, hi, s0),
            ] {
                if b > a + 1e-15 {
                    sigma.push(s);
                    lambda.push(b);
                }
            }
        }
        FieldParams::new(sigma, lambda)
    }

    /// Speed profile of the perturbed parameters.
    pub fn perturbed_profile(&self, u: f64) -> Result<SpeedProfile> {
        Ok(build_speed_profile(&self.perturbed_params(u)?))
    }

    /// f^{psi^u}(beta) through the generic machinery.
    pub fn perturbed_free_energy(&self, u: f64, beta: f64) -> Result<f64> {
        Ok(self.perturbed_profile(u)?.free_energy(beta))
    }

    /// Closed form for d/du f^{psi^u}(beta) at u = 0. Fails when beta equals
    /// the critical inverse temperature of the hull segment j*.
    pub fn free_energy_derivative(&self, beta: f64) -> Result<f64> {
        let sb = self.profile.sigma_bar()[self.j_star];
        let bc = 2.0 / sb;
        if (beta - bc).abs() <= 1e-12 * bc.max(1.0) {
            return Err(Error::CriticalBeta {
                beta,
                index: self.j_star + 1,
                critical: bc,
            });
        }
        let s0 = self.base.sigma[self.i_star];
        let width = self.alpha_prime - self.alpha;
        let lb = self.profile.l_beta(beta);
        if self.j_star + 1 <= lb - 1 {
            Ok(beta * s0 * width / sb)
        } else {
            Ok(beta * beta * s0 * width / 2.0)
        }
    }
}

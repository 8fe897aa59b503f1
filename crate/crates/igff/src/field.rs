//! The scale-inhomogeneous field on the square box: exact sampling of the
//! underlying free field, scale decomposition by harmonic averaging,
//! assembly of psi (and its perturbed variant), and exact covariances,
//! overlaps, branching scales and the boundary-restricted vertex set.
//!
//! All covariance identities here are quadratic forms h^T G h' in the Green
//! matrix, where h are harmonic-measure weight vectors; sampling uses the
//! exact sine eigenbasis of the box, so the sampler and the covariance side
//! agree to solver precision.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::analytics::{build_speed_profile, FieldParams, Perturbation, SpeedProfile};
use crate::error::{Error, Result};
use crate::lattice::{
    green_matrix, harmonic_matrix, GreenOperator, HarmonicCache, LatticeBox, Vertex,
};
use crate::mat::{Matrix, SparseRows};
use crate::seed::derive_rng;

/// One realization of the field: the free field phi, its conditional values
/// at every grid scale, and the assembled psi (plus optionally a perturbed
/// psi^u).
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub n: usize,
    pub seed: u64,
    pub phi: Vec<f64>,
    /// Indexed like the context scale grid.
    pub phi_at_scale: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
    pub psi_u: Option<Vec<f64>>,
}

/// Everything tied to one (n, params, scale grid): Green matrix, harmonic
/// matrices, the psi weight operator and its exact covariance. Immutable
/// after construction and safe to share across threads.
pub struct FieldContext {
    domain: LatticeBox,
    params: FieldParams,
    profile: SpeedProfile,
    /// Merged scale grid: 0, the params scales, and any extra scales.
    grid: Vec<f64>,
    h_mats: Vec<SparseRows>,
    green: Arc<GreenOperator>,
    /// psi = w_psi phi, rows mapped to interior indices of the Green matrix.
    w_psi_interior: Vec<Vec<(u32, f64)>>,
    sampler: SpectralSampler,
    cov_psi: OnceLock<Matrix>,
    c0: OnceLock<f64>,
}

impl FieldContext {
    pub fn new(n: usize, params: &FieldParams, extra_scales: &[f64]) -> Result<Self> {
        let green = Arc::new(green_matrix(&LatticeBox::square(n))?);
        FieldContext::with_green(green, params, extra_scales)
    }

    /// Build around an existing Green operator; contexts for different
    /// parameter sets on the same box share the expensive solve.
    pub fn with_green(
        green: Arc<GreenOperator>,
        params: &FieldParams,
        extra_scales: &[f64],
    ) -> Result<Self> {
        let domain = *green.bbox();
        if domain.width != domain.height || domain.x0 != 0 || domain.y0 != 0 {
            return Err(Error::InvalidParams(
                "field contexts live on square boxes at the origin".into(),
            ));
        }
        let n = domain.side();
        if n < 2 {
            return Err(Error::InvalidParams("box side must be at least 2".into()));
        }
        let mut grid = vec![0.0];
        grid.extend_from_slice(params.lambda());
        for &s in extra_scales {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidParams(format!("scale {s} outside [0,1]")));
            }
            grid.push(s);
        }
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        let cache = HarmonicCache::new();
        let h_mats: Vec<SparseRows> = grid
            .iter()
            .map(|&lam| harmonic_matrix(&domain, lam, &cache))
            .collect();
        let profile = build_speed_profile(params);
        // psi = sum_i (sigma_i - sigma_{i+1}) phi(lambda_i), sigma_{M+1} = 0
        let mut w_psi = SparseRows::zeros(domain.vertex_count(), domain.vertex_count());
        let m = params.level_count();
        for i in 0..m {
            let c = params.sigma()[i] - if i + 1 < m { params.sigma()[i + 1] } else { 0.0 };
            if c != 0.0 {
                let gi = grid_index(&grid, params.lambda()[i]).unwrap();
                w_psi.add_scaled(&h_mats[gi], c);
            }
        }
        let w_psi_interior = interior_rows(&domain, &w_psi);
        let sampler = SpectralSampler::new(n);
        Ok(FieldContext {
            domain,
            params: params.clone(),
            profile,
            grid,
            h_mats,
            green,
            w_psi_interior,
            sampler,
            cov_psi: OnceLock::new(),
            c0: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.domain.side()
    }

    pub fn domain(&self) -> &LatticeBox {
        &self.domain
    }

    pub fn params(&self) -> &FieldParams {
        &self.params
    }

    pub fn profile(&self) -> &SpeedProfile {
        &self.profile
    }

    pub fn green(&self) -> &GreenOperator {
        &self.green
    }

    pub fn green_arc(&self) -> Arc<GreenOperator> {
        self.green.clone()
    }

    pub fn scale_grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn vertex_count(&self) -> usize {
        self.domain.vertex_count()
    }

    /// Draw phi and decompose it through every grid scale.
    pub fn sample(&self, seed: u64) -> FieldSample {
        let phi = self.sampler.sample(seed);
        let phi_at_scale: Vec<Vec<f64>> = self
            .grid
            .iter()
            .enumerate()
            .map(|(k, &lam)| {
                if lam <= 0.0 {
                    vec![0.0; phi.len()]
                } else if lam >= 1.0 {
                    phi.clone()
                } else {
                    self.h_mats[k].apply(&phi)
                }
            })
            .collect();
        let m = self.params.level_count();
        let mut psi = vec![0.0; phi.len()];
        for i in 0..m {
            let s = self.params.sigma()[i];
            let hi = grid_index(&self.grid, self.params.lambda()[i]).unwrap();
            let lo = if i == 0 {
                0
            } else {
                grid_index(&self.grid, self.params.lambda()[i - 1]).unwrap()
            };
            let (top, bot) = (&phi_at_scale[hi], &phi_at_scale[lo]);
            for (p, (t, b)) in psi.iter_mut().zip(top.iter().zip(bot)) {
                *p += s * (t - b);
            }
        }
        FieldSample {
            n: self.n(),
            seed,
            phi,
            phi_at_scale,
            psi,
            psi_u: None,
        }
    }

    /// psi_v(a, b) = psi_v(b) - psi_v(a) for grid scales a < b, per vertex.
    pub fn psi_increment(&self, sample: &FieldSample, a: f64, b: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; sample.psi.len()];
        self.accumulate_psi_between(a, b, |scale_hi, scale_lo, sigma| {
            let top = &sample.phi_at_scale[scale_hi];
            let bot = &sample.phi_at_scale[scale_lo];
            for (o, (t, bo)) in out.iter_mut().zip(top.iter().zip(bot)) {
                *o += sigma * (t - bo);
            }
        })?;
        Ok(out)
    }

    /// Attach psi^u = u phi(alpha, alpha') + psi to the sample.
    pub fn perturb_sample(
        &self,
        sample: &mut FieldSample,
        pert: &Perturbation,
        u: f64,
    ) -> Result<()> {
        if u <= -self.params.sigma()[pert.i_star] {
            return Err(Error::InvalidParams(format!(
                "perturbation u = {u} must exceed {}",
                -self.params.sigma()[pert.i_star]
            )));
        }
        let hi = grid_index(&self.grid, pert.alpha_prime).ok_or_else(|| {
            Error::InvalidParams("alpha' missing from the context scale grid".into())
        })?;
        let lo = grid_index(&self.grid, pert.alpha).ok_or_else(|| {
            Error::InvalidParams("alpha missing from the context scale grid".into())
        })?;
        let top = &sample.phi_at_scale[hi];
        let bot = &sample.phi_at_scale[lo];
        let psi_u = sample
            .psi
            .iter()
            .zip(top.iter().zip(bot))
            .map(|(p, (t, b))| p + u * (t - b))
            .collect();
        sample.psi_u = Some(psi_u);
        Ok(())
    }

    /// Exact covariance matrix of psi over all box vertices (zero rows on
    /// the boundary). Built once on first use.
    pub fn cov_psi(&self) -> &Matrix {
        self.cov_psi
            .get_or_init(|| cov_product(&self.w_psi_interior, &self.w_psi_interior, &self.green))
    }

    /// Uniform variance slack: max(0, max_v Var psi_v - J(1) log n).
    pub fn c0(&self) -> f64 {
        *self.c0.get_or_init(|| {
            let cov = self.cov_psi();
            let mut max_var = 0.0f64;
            for i in 0..cov.nrows {
                max_var = max_var.max(cov.get(i, i));
            }
            (max_var - self.profile.total_speed() * (self.n() as f64).ln()).max(0.0)
        })
    }

    /// The overlap normalization J(1) log n + C0.
    pub fn overlap_norm(&self) -> f64 {
        self.profile.total_speed() * (self.n() as f64).ln() + self.c0()
    }

    /// q^N(v, v') by full-vertex indices.
    pub fn overlap(&self, i: usize, j: usize) -> f64 {
        self.cov_psi().get(i, j) / self.overlap_norm()
    }

    /// Weight rows of psi(lambda) = E[psi | scale lambda] over the grid.
    pub fn psi_scale_rows(&self, lam: f64) -> Result<SparseRows> {
        let count = self.domain.vertex_count();
        let mut rows = SparseRows::zeros(count, count);
        self.accumulate_psi_between(0.0, lam, |hi, lo, sigma| {
            rows.add_scaled(&self.h_mats[hi], sigma);
            if self.grid[lo] > 0.0 {
                rows.add_scaled(&self.h_mats[lo], -sigma);
            }
        })?;
        Ok(rows)
    }

    /// Exact Cov(psi_v(a, b), psi_w) for all pairs, as a full-vertex matrix.
    pub fn increment_cov_vs_psi(&self, a: f64, b: f64) -> Result<Matrix> {
        let wa = self.psi_scale_rows(b)?;
        let mut wb = self.psi_scale_rows(a)?;
        for (ra, rb) in wa.rows.iter().zip(wb.rows.iter_mut()) {
            let mut merged = ra.clone();
            for &(j, w) in rb.iter() {
                match merged.iter_mut().find(|(jj, _)| *jj == j) {
                    Some(e) => e.1 -= w,
                    None => merged.push((j, -w)),
                }
            }
            *rb = merged;
        }
        let rows = interior_rows(&self.domain, &wb);
        Ok(cov_product(&rows, &self.w_psi_interior, &self.green))
    }

    /// Exact Cov(phi_v(a,b), phi_w(c,d)) for two vertices, by quadratic form.
    pub fn phi_increment_cov(
        &self,
        v: Vertex,
        (a, b): (f64, f64),
        w: Vertex,
        (c, d): (f64, f64),
    ) -> Result<f64> {
        let rv = self.phi_increment_row(v, a, b)?;
        let rw = self.phi_increment_row(w, c, d)?;
        Ok(self.quadratic_form(&rv, &rw))
    }

    fn phi_increment_row(&self, v: Vertex, a: f64, b: f64) -> Result<Vec<(u32, f64)>> {
        let ia = grid_index(&self.grid, a)
            .ok_or_else(|| Error::InvalidParams(format!("scale {a} not on the grid")))?;
        let ib = grid_index(&self.grid, b)
            .ok_or_else(|| Error::InvalidParams(format!("scale {b} not on the grid")))?;
        let vi = self.domain.vertex_index(v);
        let mut row: Vec<(u32, f64)> = Vec::new();
        let mut add = |entries: &[(u32, f64)], c: f64| {
            for &(j, w) in entries {
                match row.iter_mut().find(|(jj, _)| *jj == j) {
                    Some(e) => e.1 += c * w,
                    None => row.push((j, c * w)),
                }
            }
        };
        if self.grid[ib] >= 1.0 {
            add(&[(vi as u32, 1.0)], 1.0);
        } else if self.grid[ib] > 0.0 {
            add(&self.h_mats[ib].rows[vi], 1.0);
        }
        if self.grid[ia] >= 1.0 {
            add(&[(vi as u32, 1.0)], -1.0);
        } else if self.grid[ia] > 0.0 {
            add(&self.h_mats[ia].rows[vi], -1.0);
        }
        Ok(row
            .into_iter()
            .filter_map(|(j, w)| {
                self.domain
                    .interior_index(self.domain.vertex_at(j as usize))
                    .map(|ii| (ii as u32, w))
            })
            .collect())
    }

    fn quadratic_form(&self, ra: &[(u32, f64)], rb: &[(u32, f64)]) -> f64 {
        let g = self.green.matrix();
        let mut acc = 0.0;
        for &(i, wi) in ra {
            let row = g.row(i as usize);
            for &(j, wj) in rb {
                acc += wi * wj * row[j as usize];
            }
        }
        acc
    }

    /// Run `emit(hi_scale_index, lo_scale_index, sigma_i)` for every piece of
    /// the interval decomposition of psi(a, b) over the sigma intervals.
    fn accumulate_psi_between(
        &self,
        a: f64,
        b: f64,
        mut emit: impl FnMut(usize, usize, f64),
    ) -> Result<()> {
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "bad scale interval ({a}, {b})"
            )));
        }
        let m = self.params.level_count();
        for i in 0..m {
            let lo_l = if i == 0 { 0.0 } else { self.params.lambda()[i - 1] };
            let hi_l = self.params.lambda()[i];
            let lo = lo_l.max(a);
            let hi = hi_l.min(b);
            if hi <= lo + 1e-15 {
                continue;
            }
            let hi_ix = grid_index(&self.grid, hi)
                .ok_or_else(|| Error::InvalidParams(format!("scale {hi} not on the grid")))?;
            let lo_ix = grid_index(&self.grid, lo)
                .ok_or_else(|| Error::InvalidParams(format!("scale {lo} not on the grid")))?;
            emit(hi_ix, lo_ix, self.params.sigma()[i]);
        }
        Ok(())
    }

    /// CSV snapshot (x, y, phi, psi) with full float precision.
    pub fn write_snapshot_csv(&self, sample: &FieldSample, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "x,y,phi,psi")?;
        for (i, v) in self.domain.vertices().enumerate() {
            writeln!(
                w,
                "{},{},{:.16e},{:.16e}",
                v.x, v.y, sample.phi[i], sample.psi[i]
            )?;
        }
        Ok(())
    }
}

impl FieldSample {
    /// Binary snapshot in the same style as the Green matrix format:
    /// 16-byte header (magic, side, value count), then phi and psi
    /// row-major as little-endian f64.
    pub fn dump(&self, mut w: impl std::io::Write) -> Result<()> {
        w.write_all(b"GFS1")?;
        w.write_all((self.n as u32).to_le_bytes().as_ref())?;
        w.write_all((self.phi.len() as u64).to_le_bytes().as_ref())?;
        for &x in self.phi.iter().chain(&self.psi) {
            w.write_all(x.to_le_bytes().as_ref())?;
        }
        Ok(())
    }

    /// Read a snapshot back; the seed and per-scale fields are not part of
    /// the format.
    pub fn load(mut r: impl std::io::Read) -> Result<FieldSample> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[0..4] != b"GFS1" {
            return Err(Error::Format("bad magic".into()));
        }
        let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        if count != (n + 1) * (n + 1) {
            return Err(Error::Format(format!(
                "value count {count} does not match side {n}"
            )));
        }
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            let mut out = vec![0.0f64; len];
            let mut buf = [0u8; 8];
            for x in &mut out {
                r.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
            Ok(out)
        };
        let phi = read_vec(count)?;
        let psi = read_vec(count)?;
        Ok(FieldSample {
            n,
            seed: 0,
            phi,
            phi_at_scale: Vec::new(),
            psi,
            psi_u: None,
        })
    }
}

fn grid_index(grid: &[f64], s: f64) -> Option<usize> {
    grid.iter().position(|&g| (g - s).abs() < 1e-14)
}

/// Map full-vertex sparse rows to Green interior indices, dropping boundary
/// columns (the Green matrix is zero there).
fn interior_rows(domain: &LatticeBox, rows: &SparseRows) -> Vec<Vec<(u32, f64)>> {
    rows.rows
        .iter()
        .map(|row| {
            row.iter()
                .filter_map(|&(j, w)| {
                    domain
                        .interior_index(domain.vertex_at(j as usize))
                        .map(|ii| (ii as u32, w))
                })
                .collect()
        })
        .collect()
}

/// (A G B^T)[i][j] over full-vertex indices, where A, B are given as
/// interior-mapped weight rows and G is the interior Green matrix.
fn cov_product(wa: &[Vec<(u32, f64)>], wb: &[Vec<(u32, f64)>], green: &GreenOperator) -> Matrix {
    let g = green.matrix();
    let nin = g.nrows;
    let nv = wa.len();
    // T = A G, dense over (vertex, interior)
    let t: Vec<f64> = wa
        .par_iter()
        .flat_map_iter(|row| {
            let mut acc = vec![0.0; nin];
            for &(j, w) in row {
                let gr = g.row(j as usize);
                for (dst, &src) in acc.iter_mut().zip(gr) {
                    *dst += w * src;
                }
            }
            acc
        })
        .collect();
    let data: Vec<f64> = (0..nv)
        .into_par_iter()
        .flat_map_iter(|i| {
            let trow = &t[i * nin..(i + 1) * nin];
            wb.iter()
                .map(move |row| row.iter().map(|&(j, w)| w * trow[j as usize]).sum())
        })
        .collect();
    Matrix {
        nrows: nv,
        ncols: nv,
        data,
    }
}

/// Exact sampler from the sine eigenbasis of the box interior.
struct SpectralSampler {
    n: usize,
    /// basis[x][j] = sqrt(2/n) sin((j+1)(x+1) pi / n), interior-sized
    basis: Matrix,
    /// sqrt((pi/2) / (1 - mu_jk)) per mode
    amplitude: Matrix,
}

impl SpectralSampler {
    fn new(n: usize) -> Self {
        let m = n - 1;
        let mut basis = Matrix::zeros(m, m);
        for x in 0..m {
            for j in 0..m {
                basis.set(
                    x,
                    j,
                    (2.0 / n as f64).sqrt()
                        * (((j + 1) * (x + 1)) as f64 * std::f64::consts::PI / n as f64).sin(),
                );
            }
        }
        let mut amplitude = Matrix::zeros(m, m);
        for j in 0..m {
            for k in 0..m {
                let mu = 0.5
                    * ((((j + 1) as f64) * std::f64::consts::PI / n as f64).cos()
                        + (((k + 1) as f64) * std::f64::consts::PI / n as f64).cos());
                amplitude.set(j, k, (std::f64::consts::FRAC_PI_2 / (1.0 - mu)).sqrt());
            }
        }
        SpectralSampler { n, basis, amplitude }
    }

    /// Full-vertex field, zero on the boundary. Deterministic per seed.
    fn sample(&self, seed: u64) -> Vec<f64> {
        let m = self.n - 1;
        let mut rng = derive_rng(seed, "gff-sample", &[]);
        let mut coef = Matrix::zeros(m, m);
        for j in 0..m {
            for k in 0..m {
                let z: f64 = rng.sample(StandardNormal);
                coef.set(j, k, z * self.amplitude.get(j, k));
            }
        }
        // interior field = B C B^T
        let bc = mat_mul(&self.basis, &coef);
        let mut out = vec![0.0; (self.n + 1) * (self.n + 1)];
        for x in 0..m {
            for y in 0..m {
                let mut s = 0.0;
                for k in 0..m {
                    s += bc.get(x, k) * self.basis.get(y, k);
                }
                out[(y + 1) * (self.n + 1) + (x + 1)] = s;
            }
        }
        out
    }
}

fn mat_mul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.ncols, b.nrows);
    let mut out = Matrix::zeros(a.nrows, b.ncols);
    for i in 0..a.nrows {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for (k, &av) in ar.iter().enumerate() {
            let br = &b.data[k * b.ncols..(k + 1) * b.ncols];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Geometry: branching scale and the boundary-restricted set
// ---------------------------------------------------------------------------

/// Largest scale at which the neighborhoods of v and v' intersect:
/// 1 for v = v', else 1 - log ||v - v'||_inf / log n, clamped to [0, 1].
pub fn branching_scale(n: usize, v: Vertex, w: Vertex) -> f64 {
    if v == w {
        return 1.0;
    }
    let d = v.dist_inf(w) as f64;
    (1.0 - d.ln() / (n as f64).ln()).clamp(0.0, 1.0)
}

/// Euclidean distance from v to the exterior of the box {0..n}^2.
pub fn exterior_distance(n: usize, v: Vertex) -> f64 {
    let ni = n as i64;
    ((v.x + 1).min(ni + 1 - v.x).min(v.y + 1).min(ni + 1 - v.y)) as f64
}

/// Full-vertex indices of the set of vertices at distance >= n^{1-rho} from
/// the exterior, ties included. Empty when rho is too small for n. The
/// cutoff carries a relative slack of 1e-12 so that exact integer ties
/// (e.g. 32^0.8 = 16) survive the power computation.
pub fn restricted_set(n: usize, rho: f64) -> Vec<usize> {
    let need = (n as f64).powf(1.0 - rho) * (1.0 - 1e-12);
    let domain = LatticeBox::square(n);
    domain
        .vertices()
        .enumerate()
        .filter(|&(_, v)| exterior_distance(n, v) >= need)
        .map(|(i, _)| i)
        .collect()
}

/// Deviation summary of overlaps against the normalized speed function at
/// the branching scale, over a set of vertex pairs.
#[derive(Clone, Debug)]
pub struct OverlapDeviationReport {
    pub n: usize,
    pub pair_count: usize,
    pub max_dev: f64,
    pub median_dev: f64,
}

/// max/median of |q^N(v,v') - Jbar(alpha ^ b, alpha' ^ b)| over the pairs,
/// for the increment window (alpha, alpha'); (0, 1) gives the full-field
/// overlap check.
pub fn overlap_deviation_report(
    ctx: &FieldContext,
    pairs: &[(Vertex, Vertex)],
    alpha: f64,
    alpha_prime: f64,
) -> Result<OverlapDeviationReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    let full_window = alpha <= 0.0 && alpha_prime >= 1.0;
    let cov = if full_window {
        None
    } else {
        Some(ctx.increment_cov_vs_psi(alpha, alpha_prime)?)
    };
    let norm = ctx.overlap_norm();
    let mut devs: Vec<f64> = Vec::with_capacity(pairs.len());
    for &(v, w) in pairs {
        let i = ctx.domain().vertex_index(v);
        let j = ctx.domain().vertex_index(w);
        let q = match &cov {
            None => ctx.overlap(i, j),
            Some(c) => c.get(i, j) / norm,
        };
        let b = branching_scale(ctx.n(), v, w);
        let want = ctx
            .profile()
            .speed_normalized_between(alpha.min(b), alpha_prime.min(b));
        devs.push((q - want).abs());
    }
    devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(OverlapDeviationReport {
        n: ctx.n(),
        pair_count: pairs.len(),
        max_dev: *devs.last().unwrap(),
        median_dev: devs[devs.len() / 2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_params() -> FieldParams {
        FieldParams::new(vec![2.0, 1.0], vec![0.5, 1.0]).unwrap()
    }

    #[test]
    fn homogeneous_psi_equals_phi_exactly() {
        let params = FieldParams::new(vec![1.0], vec![1.0]).unwrap();
        let ctx = FieldContext::new(8, &params, &[]).unwrap();
        let s = ctx.sample(3);
        assert_eq!(s.psi, s.phi);
    }

    #[test]
    fn sampling_is_deterministic_and_zero_on_boundary() {
        let ctx = FieldContext::new(12, &worked_params(), &[]).unwrap();
        let a = ctx.sample(99);
        let b = ctx.sample(99);
        assert_eq!(a.phi, b.phi);
        assert_eq!(a.psi, b.psi);
        let c = ctx.sample(100);
        assert_ne!(a.phi, c.phi);
        for v in ctx.domain().vertices() {
            if ctx.domain().is_boundary(v) {
                assert_eq!(a.phi[ctx.domain().vertex_index(v)], 0.0);
            }
        }
    }

    #[test]
    fn empirical_variance_matches_green_diagonal() {
        let params = FieldParams::new(vec![1.0], vec![1.0]).unwrap();
        let ctx = FieldContext::new(16, &params, &[]).unwrap();
        let center = Vertex::new(8, 8);
        let ci = ctx.domain().vertex_index(center);
        let want = ctx.green().value(center, center);
        let n_samples = 6000usize;
        let (sum, sum_sq) = (0..n_samples as u64)
            .into_par_iter()
            .map(|s| {
                let x = ctx.sample(crate::seed::derive_seed(21, "var-test", &[s])).phi[ci];
                (x, x * x)
            })
            .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        let mean = sum / n_samples as f64;
        let var = sum_sq / n_samples as f64 - mean * mean;
        let se = want * (2.0 / n_samples as f64).sqrt();
        assert!(
            (var - want).abs() <= 3.0 * se,
            "empirical {var} vs exact {want} (se {se})"
        );
    }

    #[test]
    fn martingale_increments_are_orthogonal() {
        let ctx = FieldContext::new(16, &worked_params(), &[]).unwrap();
        for v in ctx.domain().vertices() {
            let c = ctx
                .phi_increment_cov(v, (0.0, 0.5), v, (0.5, 1.0))
                .unwrap();
            assert!(c.abs() <= 1e-8, "cross-scale covariance {c} at {v:?}");
        }
    }

    #[test]
    fn homogeneous_cov_psi_is_green() {
        let params = FieldParams::new(vec![1.0], vec![1.0]).unwrap();
        let ctx = FieldContext::new(10, &params, &[]).unwrap();
        let cov = ctx.cov_psi();
        for v in [Vertex::new(3, 4), Vertex::new(5, 5), Vertex::new(1, 8)] {
            for w in [Vertex::new(3, 4), Vertex::new(7, 2)] {
                let i = ctx.domain().vertex_index(v);
                let j = ctx.domain().vertex_index(w);
                assert!((cov.get(i, j) - ctx.green().value(v, w)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sample_covariance_matches_exact_covariance() {
        let ctx = FieldContext::new(16, &worked_params(), &[]).unwrap();
        let n_samples = 6000usize;
        let mut rng = derive_rng(30, "cov-pairs", &[]);
        let pairs: Vec<(usize, usize)> = (0..50)
            .map(|_| {
                (
                    rng.random_range(0..ctx.vertex_count()),
                    rng.random_range(0..ctx.vertex_count()),
                )
            })
            .collect();
        let samples: Vec<FieldSample> = (0..n_samples as u64)
            .into_par_iter()
            .map(|s| ctx.sample(crate::seed::derive_seed(31, "cov-test", &[s])))
            .collect();
        let cov = ctx.cov_psi();
        for &(i, j) in &pairs {
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut sxy = 0.0;
            for s in &samples {
                sx += s.psi[i];
                sy += s.psi[j];
                sxy += s.psi[i] * s.psi[j];
            }
            let m = n_samples as f64;
            let c_hat = sxy / m - (sx / m) * (sy / m);
            let want = cov.get(i, j);
            let vi = cov.get(i, i);
            let vj = cov.get(j, j);
            let se = ((vi * vj + want * want) / m).sqrt();
            assert!(
                (c_hat - want).abs() <= 3.0 * se.max(1e-12),
                "pair ({i},{j}): {c_hat} vs {want} (se {se})"
            );
        }
    }

    #[test]
    fn psi_variance_decays_near_the_boundary() {
        let ctx = FieldContext::new(32, &worked_params(), &[]).unwrap();
        let cov = ctx.cov_psi();
        let center = ctx.domain().vertex_index(Vertex::new(16, 16));
        let near = ctx.domain().vertex_index(Vertex::new(2, 16));
        assert!(cov.get(near, near) < cov.get(center, center));
    }

    #[test]
    fn cov_psi_is_psd_on_random_subsets() {
        let ctx = FieldContext::new(16, &worked_params(), &[]).unwrap();
        let cov = ctx.cov_psi();
        let mut rng = derive_rng(32, "psd-subset", &[]);
        let subset: Vec<usize> = (0..50)
            .map(|_| rng.random_range(0..ctx.vertex_count()))
            .collect();
        let mut sub = Matrix::zeros(subset.len(), subset.len());
        for (a, &i) in subset.iter().enumerate() {
            for (b, &j) in subset.iter().enumerate() {
                sub.set(a, b, cov.get(i, j));
            }
        }
        let eigs = crate::mat::sym_eigenvalues(&sub);
        assert!(eigs[0] >= -1e-8, "smallest eigenvalue {}", eigs[0]);
    }

    #[test]
    fn overlaps_are_bounded_by_one() {
        for n in [16usize, 24] {
            let ctx = FieldContext::new(n, &worked_params(), &[]).unwrap();
            let cov = ctx.cov_psi();
            let norm = ctx.overlap_norm();
            let mut worst = 0.0f64;
            for i in 0..cov.nrows {
                for j in 0..cov.ncols {
                    worst = worst.max((cov.get(i, j) / norm).abs());
                }
            }
            assert!(worst <= 1.0 + 1e-12, "n = {n}: max |q| = {worst}");
        }
    }

    #[test]
    fn distant_pairs_have_small_overlap() {
        let ctx = FieldContext::new(32, &worked_params(), &[]).unwrap();
        let a = restricted_set(32, 0.5);
        let (v, w) = (
            ctx.domain().vertex_at(a[0]),
            ctx.domain().vertex_at(*a.last().unwrap()),
        );
        assert!(branching_scale(32, v, w) < 0.35);
        let q = ctx.overlap(ctx.domain().vertex_index(v), ctx.domain().vertex_index(w));
        assert!(q.abs() < 0.5, "corner overlap {q}");
    }

    #[test]
    fn branching_scale_hand_values() {
        assert_eq!(branching_scale(64, Vertex::new(3, 3), Vertex::new(3, 3)), 1.0);
        let b = branching_scale(100, Vertex::new(0, 0), Vertex::new(10, 4));
        assert!((b - 0.5).abs() < 1e-12);
        assert_eq!(branching_scale(100, Vertex::new(0, 0), Vertex::new(100, 7)), 0.0);
    }

    #[test]
    fn restricted_set_geometry() {
        // A_{n,1} is the whole box
        assert_eq!(restricted_set(16, 1.0).len(), 17 * 17);
        // rho = 0.2 at n = 16 leaves nothing
        assert!(restricted_set(16, 0.2).is_empty());
        // monotone in rho
        let small = restricted_set(32, 0.3);
        let big = restricted_set(32, 0.6);
        assert!(small.len() < big.len());
        assert!(small.iter().all(|i| big.contains(i)));
        // membership matches the distance rule with ties included
        let need = 32f64.powf(0.7);
        for &i in &small {
            let v = LatticeBox::square(32).vertex_at(i);
            assert!(exterior_distance(32, v) >= need);
        }
    }

    #[test]
    fn perturbed_field_identities() {
        let params = worked_params();
        let pert = Perturbation::new(&params, 0.2, 0.4).unwrap();
        let ctx = FieldContext::new(16, &params, &[0.2, 0.4]).unwrap();
        let mut s = ctx.sample(77);
        ctx.perturb_sample(&mut s, &pert, 0.0).unwrap();
        assert_eq!(s.psi_u.as_ref().unwrap(), &s.psi);
        let inc = ctx.psi_increment(&s, 0.2, 0.4).unwrap();
        // psi(0.2, 0.4) = sigma_1 phi(0.2, 0.4) inside the first interval
        let mut s1 = s.clone();
        ctx.perturb_sample(&mut s1, &pert, 0.5).unwrap();
        let mut s2 = s.clone();
        ctx.perturb_sample(&mut s2, &pert, 1.0).unwrap();
        let sigma1 = params.sigma()[0];
        for i in 0..s.psi.len() {
            let phi_inc = inc[i] / sigma1;
            let diff = s2.psi_u.as_ref().unwrap()[i] - s1.psi_u.as_ref().unwrap()[i];
            assert!((diff - 0.5 * phi_inc).abs() < 1e-12);
        }
        assert!(ctx.perturb_sample(&mut s1, &pert, -2.5).is_err());
    }

    #[test]
    fn perturbed_variance_grows_quadratically_on_the_window() {
        let params = worked_params();
        let ctx = FieldContext::new(16, &params, &[0.2, 0.4]).unwrap();
        let center = Vertex::new(8, 8);
        let i = ctx.domain().vertex_index(center);
        let var_inc = ctx
            .phi_increment_cov(center, (0.2, 0.4), center, (0.2, 0.4))
            .unwrap();
        let pert = Perturbation::new(&params, 0.2, 0.4).unwrap();
        let sigma = params.sigma()[pert.i_star];
        let base = ctx.cov_psi().get(i, i);
        let inc_row = ctx.phi_increment_row(center, 0.2, 0.4).unwrap();
        for u in [0.3, -0.4, 1.0] {
            // route 1: quadratic form of the perturbed weight row
            let mut row_u = ctx.w_psi_interior[i].clone();
            for &(j, w) in &inc_row {
                match row_u.iter_mut().find(|(jj, _)| *jj == j) {
                    Some(e) => e.1 += u * w,
                    None => row_u.push((j, u * w)),
                }
            }
            let var_u = ctx.quadratic_form(&row_u, &row_u);
            // route 2: independent-increment structure,
            // Var psi^u = Var psi + ((sigma+u)^2 - sigma^2) Var phi(a, a')
            let want = base + ((sigma + u) * (sigma + u) - sigma * sigma) * var_inc;
            assert!(
                (var_u - want).abs() < 1e-9,
                "u = {u}: {var_u} vs {want}"
            );
        }
    }

    #[test]
    fn overlap_deviation_report_diagonal() {
        let ctx = FieldContext::new(32, &worked_params(), &[]).unwrap();
        // deep interior, where the variance stays above J log n
        let set = restricted_set(32, 0.2);
        assert_eq!(set.len(), 9, "tie at 32^0.8 = 16 must be included");
        let pairs: Vec<(Vertex, Vertex)> = set
            .iter()
            .map(|&i| {
                let v = ctx.domain().vertex_at(i);
                (v, v)
            })
            .collect();
        let rep = overlap_deviation_report(&ctx, &pairs, 0.0, 1.0).unwrap();
        // |q(v,v) - 1| = C0-normalization slack at worst
        let slack = ctx.c0() / ctx.overlap_norm();
        assert!(rep.max_dev <= slack + 1e-12, "{} vs {slack}", rep.max_dev);
        assert!(overlap_deviation_report(&ctx, &[], 0.0, 1.0).is_err());
    }

    #[test]
    fn snapshot_csv_has_header_and_rows() {
        let ctx = FieldContext::new(4, &worked_params(), &[]).unwrap();
        let s = ctx.sample(1);
        let mut buf = Vec::new();
        ctx.write_snapshot_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x,y,phi,psi");
        assert_eq!(text.lines().count(), 1 + 25);
    }

    #[test]
    fn snapshot_binary_round_trip() {
        let ctx = FieldContext::new(5, &worked_params(), &[]).unwrap();
        let s = ctx.sample(2);
        let mut buf = Vec::new();
        s.dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 2 * 8 * 36);
        let back = FieldSample::load(buf.as_slice()).unwrap();
        assert_eq!(back.n, 5);
        assert_eq!(back.phi, s.phi);
        assert_eq!(back.psi, s.psi);
        assert!(FieldSample::load(&buf[1..]).is_err());
    }
}

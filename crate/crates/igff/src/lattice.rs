//! Discrete potential theory on rectangular boxes: Green functions of the
//! simple random walk killed at the boundary, harmonic measure of clipped
//! neighborhoods, a Monte Carlo walk oracle, and the potential-kernel
//! cross-check.
//!
//! Covariances are normalized so that G(v,v) = pi/2 for a box with a single
//! interior vertex; variances then grow like log(side) + O(1).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::{Arc, RwLock};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mat::{cholesky_lower, spd_inverse_from_cholesky, Matrix, SparseRows};
use crate::seed::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Vertex {
    pub x: i64,
    pub y: i64,
}

impl Vertex {
    pub fn new(x: i64, y: i64) -> Self {
        Vertex { x, y }
    }

    pub fn neighbors(self) -> [Vertex; 4] {
        [
            Vertex::new(self.x - 1, self.y),
            Vertex::new(self.x + 1, self.y),
            Vertex::new(self.x, self.y - 1),
            Vertex::new(self.x, self.y + 1),
        ]
    }

    pub fn dist_inf(self, other: Vertex) -> i64 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }

    pub fn dist_euclid(self, other: Vertex) -> f64 {
        let dx = (self.x - other.x) as f64;
        let dy = (self.y - other.y) as f64;
        (dx * dx + dy * dy).sqrt()
    }
}

/// An axis-aligned box of lattice vertices, boundary included. The boundary
/// consists of the vertices with a distance-1 neighbor outside the box, so a
/// box of width or height <= 2 has no interior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LatticeBox {
    pub x0: i64,
    pub y0: i64,
    pub width: usize,
    pub height: usize,
}

impl LatticeBox {
    pub fn new(x0: i64, y0: i64, width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1);
        LatticeBox {
            x0,
            y0,
            width,
            height,
        }
    }

    /// The square box {0,...,n}^2.
    pub fn square(n: usize) -> Self {
        LatticeBox::new(0, 0, n + 1, n + 1)
    }

    /// Side parameter of a square box (vertex count minus one).
    pub fn side(&self) -> usize {
        debug_assert_eq!(self.width, self.height);
        self.width - 1
    }

    pub fn x1(&self) -> i64 {
        self.x0 + self.width as i64 - 1
    }

    pub fn y1(&self) -> i64 {
        self.y0 + self.height as i64 - 1
    }

    pub fn contains(&self, v: Vertex) -> bool {
        v.x >= self.x0 && v.x <= self.x1() && v.y >= self.y0 && v.y <= self.y1()
    }

    pub fn is_boundary(&self, v: Vertex) -> bool {
        self.contains(v)
            && (v.x == self.x0 || v.x == self.x1() || v.y == self.y0 || v.y == self.y1())
    }

    pub fn is_interior(&self, v: Vertex) -> bool {
        self.contains(v) && !self.is_boundary(v)
    }

    pub fn vertex_count(&self) -> usize {
        self.width * self.height
    }

    pub fn interior_width(&self) -> usize {
        self.width.saturating_sub(2)
    }

    pub fn interior_height(&self) -> usize {
        self.height.saturating_sub(2)
    }

    pub fn interior_count(&self) -> usize {
        self.interior_width() * self.interior_height()
    }

    /// Row-major index over all box vertices.
    pub fn vertex_index(&self, v: Vertex) -> usize {
        debug_assert!(self.contains(v));
        (v.y - self.y0) as usize * self.width + (v.x - self.x0) as usize
    }

    pub fn vertex_at(&self, index: usize) -> Vertex {
        Vertex::new(
            self.x0 + (index % self.width) as i64,
            self.y0 + (index / self.width) as i64,
        )
    }

    /// Row-major index over interior vertices only.
    pub fn interior_index(&self, v: Vertex) -> Option<usize> {
        if !self.is_interior(v) {
            return None;
        }
        let ix = (v.x - self.x0 - 1) as usize;
        let iy = (v.y - self.y0 - 1) as usize;
        Some(iy * self.interior_width() + ix)
    }

    pub fn interior_vertex_at(&self, index: usize) -> Vertex {
        let iw = self.interior_width();
        Vertex::new(
            self.x0 + 1 + (index % iw) as i64,
            self.y0 + 1 + (index / iw) as i64,
        )
    }

    pub fn vertices(&self) -> impl Iterator<Item = Vertex> + '_ {
        (0..self.vertex_count()).map(|i| self.vertex_at(i))
    }

    pub fn interior_vertices(&self) -> impl Iterator<Item = Vertex> + '_ {
        (0..self.interior_count()).map(|i| self.interior_vertex_at(i))
    }

    /// The square of half-width `hw` around `center`, cut off by `domain`.
    pub fn clipped(center: Vertex, hw: i64, domain: &LatticeBox) -> LatticeBox {
        let x0 = (center.x - hw).max(domain.x0);
        let x1 = (center.x + hw).min(domain.x1());
        let y0 = (center.y - hw).max(domain.y0);
        let y1 = (center.y + hw).min(domain.y1());
        LatticeBox::new(x0, y0, (x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize)
    }
}

/// Half-width of the scale-`lambda` neighborhood inside a side-`n` box.
pub fn neighborhood_half_width(n: usize, lambda: f64) -> i64 {
    ((n as f64).powf(1.0 - lambda) / 2.0).floor() as i64
}

// ---------------------------------------------------------------------------
// Green operator
// ---------------------------------------------------------------------------

/// Exact covariance of the field on a box: G = (pi/2) (I - P)^{-1} over
/// interior vertices, zero-extended to the boundary.
pub struct GreenOperator {
    bbox: LatticeBox,
    g: Matrix,
}

/// Build the Green matrix by a dense Cholesky solve of (I - P) X = (pi/2) I.
/// Interiors beyond ~4096 vertices are outside the exact-covariance regime
/// of this crate and are rejected.
pub fn green_matrix(bbox: &LatticeBox) -> Result<GreenOperator> {
    let n = bbox.interior_count();
    if n == 0 {
        return Err(Error::EmptyInterior);
    }
    let iw = bbox.interior_width();
    let ih = bbox.interior_height();
    let mut a = Matrix::zeros(n, n);
    for iy in 0..ih {
        for ix in 0..iw {
            let i = iy * iw + ix;
            a.set(i, i, 1.0);
            if ix > 0 {
                a.set(i, i - 1, -0.25);
            }
            if ix + 1 < iw {
                a.set(i, i + 1, -0.25);
            }
            if iy > 0 {
                a.set(i, i - iw, -0.25);
            }
            if iy + 1 < ih {
                a.set(i, i + iw, -0.25);
            }
        }
    }
    cholesky_lower(&mut a)
        .unwrap_or_else(|(j, piv)| panic!("I - P not positive definite at pivot {j}: {piv}"));
    let g = spd_inverse_from_cholesky(&a, PI / 2.0);
    let op = GreenOperator { bbox: *bbox, g };
    let residual = op.generator_residual();
    assert!(
        residual <= 1e-10,
        "Green solve residual {residual} above tolerance for box {bbox:?}"
    );
    Ok(op)
}

impl GreenOperator {
    pub fn bbox(&self) -> &LatticeBox {
        &self.bbox
    }

    pub fn interior_count(&self) -> usize {
        self.bbox.interior_count()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.g
    }

    /// G(v, w), zero when either vertex is on the boundary.
    pub fn value(&self, v: Vertex, w: Vertex) -> f64 {
        assert!(self.bbox.contains(v) && self.bbox.contains(w));
        match (self.bbox.interior_index(v), self.bbox.interior_index(w)) {
            (Some(i), Some(j)) => self.g.get(i, j),
            _ => 0.0,
        }
    }

    /// max |(I - P) G - (pi/2) I| over all entries.
    pub fn generator_residual(&self) -> f64 {
        let n = self.interior_count();
        let iw = self.bbox.interior_width();
        let ih = self.bbox.interior_height();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let ix = i % iw;
                let iy = i / iw;
                let mut worst = 0.0f64;
                for j in 0..n {
                    let mut acc = self.g.get(i, j);
                    if ix > 0 {
                        acc -= 0.25 * self.g.get(i - 1, j);
                    }
                    if ix + 1 < iw {
                        acc -= 0.25 * self.g.get(i + 1, j);
                    }
                    if iy > 0 {
                        acc -= 0.25 * self.g.get(i - iw, j);
                    }
                    if iy + 1 < ih {
                        acc -= 0.25 * self.g.get(i + iw, j);
                    }
                    let want = if i == j { PI / 2.0 } else { 0.0 };
                    worst = worst.max((acc - want).abs());
                }
                worst
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Binary snapshot: 16-byte header (magic, side, interior count), then
    /// the interior matrix row-major as little-endian f64. Square boxes at
    /// the origin only.
    pub fn dump(&self, mut w: impl Write) -> Result<()> {
        if self.bbox.width != self.bbox.height || self.bbox.x0 != 0 || self.bbox.y0 != 0 {
            return Err(Error::Format(
                "only square boxes at the origin are dumpable".into(),
            ));
        }
        w.write_all(b"GFG1")?;
        w.write_all((self.bbox.side() as u32).to_le_bytes().as_ref())?;
        w.write_all((self.interior_count() as u64).to_le_bytes().as_ref())?;
        for &x in &self.g.data {
            w.write_all(x.to_le_bytes().as_ref())?;
        }
        Ok(())
    }

    pub fn load(mut r: impl Read) -> Result<GreenOperator> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[0..4] != b"GFG1" {
            return Err(Error::Format("bad magic".into()));
        }
        let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let bbox = LatticeBox::square(n);
        if bbox.interior_count() != count {
            return Err(Error::Format(format!(
                "interior count {count} does not match side {n}"
            )));
        }
        let mut data = vec![0.0f64; count * count];
        let mut buf = [0u8; 8];
        for x in &mut data {
            r.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
        Ok(GreenOperator {
            bbox,
            g: Matrix {
                nrows: count,
                ncols: count,
                data,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Hitting distributions / harmonic measure
// ---------------------------------------------------------------------------

/// Conjugate gradients for (I - Q) x = b on the interior grid of a box,
/// where Q is the interior-to-interior quarter kernel. The system is
/// symmetric positive definite.
fn cg_interior(iw: usize, ih: usize, b: &[f64], rel_tol: f64) -> Vec<f64> {
    let n = iw * ih;
    debug_assert_eq!(b.len(), n);
    let apply = |x: &[f64], y: &mut [f64]| {
        for iy in 0..ih {
            for ix in 0..iw {
                let i = iy * iw + ix;
                let mut s = 0.0;
                if ix > 0 {
                    s += x[i - 1];
                }
                if ix + 1 < iw {
                    s += x[i + 1];
                }
                if iy > 0 {
                    s += x[i - iw];
                }
                if iy + 1 < ih {
                    s += x[i + iw];
                }
                y[i] = x[i] - 0.25 * s;
            }
        }
    };
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_b == 0.0 {
        return vec![0.0; n];
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rs = norm_b * norm_b;
    let max_iter = 20 * (iw + ih) + 100;
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rs / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        if rs_new.sqrt() <= rel_tol * norm_b {
            break;
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}

/// Hitting distribution of the walk started at the strictly interior source
/// on the box boundary, in relative coordinates. Sources on the boundary
/// (including every vertex of a box without interior) get a point mass.
fn hitting_distribution_rel(w: usize, h: usize, sx: usize, sy: usize) -> Vec<((i32, i32), f64)> {
    if w <= 2 || h <= 2 || sx == 0 || sy == 0 || sx == w - 1 || sy == h - 1 {
        return vec![((sx as i32, sy as i32), 1.0)];
    }
    let iw = w - 2;
    let ih = h - 2;
    let mut b = vec![0.0; iw * ih];
    b[(sy - 1) * iw + (sx - 1)] = 1.0;
    // expected visit counts before absorption
    let mu = cg_interior(iw, ih, &b, 1e-13);
    let visits = |x: i64, y: i64| -> f64 {
        if x <= 0 || y <= 0 || x >= w as i64 - 1 || y >= h as i64 - 1 {
            0.0
        } else {
            mu[(y as usize - 1) * iw + (x as usize - 1)]
        }
    };
    let mut out = Vec::with_capacity(2 * (w + h));
    let mut push = |x: usize, y: usize| {
        let (xi, yi) = (x as i64, y as i64);
        let mass = 0.25
            * (visits(xi - 1, yi) + visits(xi + 1, yi) + visits(xi, yi - 1) + visits(xi, yi + 1));
        out.push(((x as i32, y as i32), mass));
    };
    for x in 0..w {
        push(x, 0);
        push(x, h - 1);
    }
    for y in 1..h - 1 {
        push(0, y);
        push(w - 1, y);
    }
    out
}

type ShapeKey = (u32, u32, u32, u32);

/// Cache of hitting distributions keyed by (box shape, relative source).
/// Shapes repeat massively across vertices away from the domain boundary.
#[derive(Default)]
pub struct HarmonicCache {
    map: RwLock<HashMap<ShapeKey, Arc<Vec<((i32, i32), f64)>>>>,
}

impl HarmonicCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, w: usize, h: usize, sx: usize, sy: usize) -> Arc<Vec<((i32, i32), f64)>> {
        let key: ShapeKey = (w as u32, h as u32, sx as u32, sy as u32);
        if let Some(hit) = self.map.read().unwrap().get(&key) {
            return hit.clone();
        }
        let value = Arc::new(hitting_distribution_rel(w, h, sx, sy));
        let mut guard = self.map.write().unwrap();
        guard.entry(key).or_insert(value).clone()
    }
}

/// Harmonic measure of `v` at scale `lambda` inside the domain: the hitting
/// distribution of the walk from `v` on the boundary of the clipped
/// neighborhood. `lambda = 0` uses the whole domain, `lambda = 1` the single
/// vertex `v`.
#[derive(Clone, Debug)]
pub struct HarmonicMeasure {
    pub source: Vertex,
    pub scale: f64,
    pub weights: Vec<(Vertex, f64)>,
}

impl HarmonicMeasure {
    /// Apply the measure to a function given on domain vertices.
    pub fn integrate(&self, f: impl Fn(Vertex) -> f64) -> f64 {
        self.weights.iter().map(|&(z, w)| w * f(z)).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().map(|&(_, w)| w).sum()
    }
}

pub fn harmonic_measure(
    domain: &LatticeBox,
    v: Vertex,
    lambda: f64,
    cache: &HarmonicCache,
) -> HarmonicMeasure {
    assert!(domain.contains(v), "source outside the domain");
    let clip = if lambda <= 0.0 {
        *domain
    } else if lambda >= 1.0 {
        LatticeBox::new(v.x, v.y, 1, 1)
    } else {
        let hw = neighborhood_half_width(domain.side(), lambda);
        LatticeBox::clipped(v, hw, domain)
    };
    let rel = cache.get(
        clip.width,
        clip.height,
        (v.x - clip.x0) as usize,
        (v.y - clip.y0) as usize,
    );
    let weights = rel
        .iter()
        .map(|&((dx, dy), w)| (Vertex::new(clip.x0 + dx as i64, clip.y0 + dy as i64), w))
        .collect();
    HarmonicMeasure {
        source: v,
        scale: lambda,
        weights,
    }
}

/// The harmonic-measure weights of every domain vertex at one scale, as a
/// sparse matrix over the full domain indexing. At `lambda = 0` this is the
/// zero operator: the field vanishes on the domain boundary, so the
/// conditional expectation given scale 0 is identically zero.
pub fn harmonic_matrix(domain: &LatticeBox, lambda: f64, cache: &HarmonicCache) -> SparseRows {
    let count = domain.vertex_count();
    let mut rows = SparseRows::zeros(count, count);
    if lambda <= 0.0 {
        return rows;
    }
    if lambda >= 1.0 {
        for i in 0..count {
            rows.rows[i].push((i as u32, 1.0));
        }
        return rows;
    }
    let out: Vec<Vec<(u32, f64)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let v = domain.vertex_at(i);
            let hm = harmonic_measure(domain, v, lambda, cache);
            hm.weights
                .iter()
                .map(|&(z, w)| (domain.vertex_index(z) as u32, w))
                .collect()
        })
        .collect();
    rows.rows = out;
    rows
}

// ---------------------------------------------------------------------------
// Monte Carlo oracle
// ---------------------------------------------------------------------------

/// Unbiased walk estimate of G(v, w): (pi/2) times the mean number of visits
/// to `w` before absorption, with its standard error.
pub fn green_monte_carlo(
    bbox: &LatticeBox,
    v: Vertex,
    w: Vertex,
    walks: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    if walks == 0 {
        return Err(Error::InvalidParams("need at least one walk".into()));
    }
    if !bbox.is_interior(v) {
        return Err(Error::InvalidParams("walk source must be interior".into()));
    }
    const BATCH: u64 = 4096;
    let batches = walks.div_ceil(BATCH);
    let (sum, sum_sq) = (0..batches)
        .into_par_iter()
        .map(|batch| {
            let mut rng = derive_rng(seed, "green-walk", &[batch]);
            let todo = BATCH.min(walks - batch * BATCH);
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for _ in 0..todo {
                let mut pos = v;
                let mut visits = 0u64;
                loop {
                    if pos == w {
                        visits += 1;
                    }
                    match rng.random_range(0..4u8) {
                        0 => pos.x -= 1,
                        1 => pos.x += 1,
                        2 => pos.y -= 1,
                        _ => pos.y += 1,
                    }
                    if bbox.is_boundary(pos) {
                        break;
                    }
                }
                let x = visits as f64;
                s += x;
                s2 += x * x;
            }
            (s, s2)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = walks as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok((PI / 2.0 * mean, PI / 2.0 * (var / n).sqrt()))
}

// ---------------------------------------------------------------------------
// Potential kernel cross-check
// ---------------------------------------------------------------------------

/// a(w) = log ||w|| + k0 with a(0) = 0. The additive constant is fitted once
/// from an exact Green diagonal rather than taken from the literature.
#[derive(Clone, Copy, Debug)]
pub struct PotentialKernel {
    pub constant: f64,
}

impl PotentialKernel {
    /// Fit k0 from G(c, c) at the center of the given box:
    /// k0 = G(c,c) - sum_z hit(c, z) log ||z - c||.
    pub fn fitted(green: &GreenOperator, cache: &HarmonicCache) -> Self {
        let b = green.bbox();
        let c = Vertex::new(b.x0 + b.width as i64 / 2, b.y0 + b.height as i64 / 2);
        let hm = boundary_hitting(b, c, cache);
        let avg: f64 = hm
            .weights
            .iter()
            .map(|&(z, w)| w * z.dist_euclid(c).ln())
            .sum();
        PotentialKernel {
            constant: green.value(c, c) - avg,
        }
    }

    pub fn a(&self, dx: i64, dy: i64) -> f64 {
        if dx == 0 && dy == 0 {
            return 0.0;
        }
        let r = ((dx * dx + dy * dy) as f64).sqrt();
        r.ln() + self.constant
    }
}

/// Hitting distribution of the walk from `v` on the boundary of the box
/// itself (the scale-0 measure of that box).
pub fn boundary_hitting(bbox: &LatticeBox, v: Vertex, cache: &HarmonicCache) -> HarmonicMeasure {
    let rel = cache.get(
        bbox.width,
        bbox.height,
        (v.x - bbox.x0) as usize,
        (v.y - bbox.y0) as usize,
    );
    let weights = rel
        .iter()
        .map(|&((dx, dy), w)| (Vertex::new(bbox.x0 + dx as i64, bbox.y0 + dy as i64), w))
        .collect();
    HarmonicMeasure {
        source: v,
        scale: 0.0,
        weights,
    }
}

/// Discrepancy between G(v, w) and its boundary representation through the
/// potential kernel. A consistency diagnostic, not a primary code path.
pub fn potential_kernel_check(
    green: &GreenOperator,
    kernel: &PotentialKernel,
    cache: &HarmonicCache,
    v: Vertex,
    w: Vertex,
) -> Result<f64> {
    if v == w {
        return Err(Error::InvalidParams(
            "potential kernel check needs distinct vertices".into(),
        ));
    }
    let b = green.bbox();
    if !b.is_interior(v) || !b.is_interior(w) {
        return Err(Error::InvalidParams("vertices must be interior".into()));
    }
    let hm = boundary_hitting(b, v, cache);
    let repr: f64 = hm
        .weights
        .iter()
        .map(|&(z, wt)| wt * kernel.a(z.x - w.x, z.y - w.y))
        .sum::<f64>()
        - kernel.a(w.x - v.x, w.y - v.y);
    Ok((green.value(v, w) - repr).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_classification() {
        let b = LatticeBox::square(4); // {0..4}^2
        assert_eq!(b.vertex_count(), 25);
        assert_eq!(b.interior_count(), 9);
        assert!(b.is_boundary(Vertex::new(0, 2)));
        assert!(b.is_boundary(Vertex::new(4, 4)));
        assert!(b.is_interior(Vertex::new(2, 2)));
        assert!(!b.contains(Vertex::new(5, 0)));
        // every interior vertex has all four neighbors inside the box
        for v in b.interior_vertices() {
            assert!(v.neighbors().iter().all(|&u| b.contains(u)));
        }
        // a slab of width 2 is all boundary
        let slab = LatticeBox::new(0, 0, 2, 5);
        assert_eq!(slab.interior_count(), 0);
        assert!(slab.vertices().all(|v| slab.is_boundary(v)));
    }

    #[test]
    fn single_interior_green_is_half_pi() {
        let g = green_matrix(&LatticeBox::new(0, 0, 3, 3)).unwrap();
        assert_eq!(g.interior_count(), 1);
        assert!((g.value(Vertex::new(1, 1), Vertex::new(1, 1)) - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn green_symmetry_diagonal_and_psd() {
        let g = green_matrix(&LatticeBox::square(8)).unwrap();
        assert!(g.matrix().asymmetry() < 1e-10);
        for v in g.bbox().interior_vertices() {
            assert!(g.value(v, v) >= PI / 2.0 - 1e-12);
        }
        let eigs = crate::mat::sym_eigenvalues(g.matrix());
        assert!(eigs[0] >= -1e-8, "smallest eigenvalue {}", eigs[0]);
    }

    #[test]
    fn green_rows_are_harmonic_off_the_source() {
        let g = green_matrix(&LatticeBox::square(8)).unwrap();
        let b = *g.bbox();
        let v = Vertex::new(3, 4);
        for w in b.interior_vertices() {
            let avg: f64 = w.neighbors().iter().map(|&u| g.value(v, u)).sum::<f64>() / 4.0;
            let defect = g.value(v, w) - avg;
            if w == v {
                assert!((defect - PI / 2.0).abs() < 1e-9);
            } else {
                assert!(defect.abs() < 1e-9, "defect {defect} at {w:?}");
            }
        }
    }

    #[test]
    fn green_center_diagonal_grows_like_log_side() {
        let g16 = green_matrix(&LatticeBox::square(16)).unwrap();
        let g32 = green_matrix(&LatticeBox::square(32)).unwrap();
        let d = g32.value(Vertex::new(16, 16), Vertex::new(16, 16))
            - g16.value(Vertex::new(8, 8), Vertex::new(8, 8));
        assert!(
            (d - std::f64::consts::LN_2).abs() < 0.15,
            "diagonal growth {d}"
        );
    }

    #[test]
    fn green_rejects_empty_interior() {
        assert!(matches!(
            green_matrix(&LatticeBox::new(0, 0, 2, 4)),
            Err(Error::EmptyInterior)
        ));
    }

    #[test]
    fn monte_carlo_agrees_with_exact_green() {
        // one interior vertex: the visit count is deterministically 1
        let b = LatticeBox::new(0, 0, 3, 3);
        let c = Vertex::new(1, 1);
        let (est, se) = green_monte_carlo(&b, c, c, 100_000, 42).unwrap();
        assert_eq!(se, 0.0);
        assert!((est - PI / 2.0).abs() < 1e-15);
        // nontrivial box: 3 SE coverage of the exact value
        let big = LatticeBox::square(10);
        let g = green_matrix(&big).unwrap();
        let v = Vertex::new(4, 5);
        let w = Vertex::new(6, 5);
        let (est, se) = green_monte_carlo(&big, v, w, 200_000, 42).unwrap();
        assert!(se > 0.0);
        assert!(
            (est - g.value(v, w)).abs() <= 3.0 * se,
            "estimate {est} +- {se} vs {}",
            g.value(v, w)
        );
        // boundary target is never visited before absorption
        let (zero, _) = green_monte_carlo(&b, c, Vertex::new(0, 1), 1000, 7).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn monte_carlo_is_deterministic_and_symmetric_under_box_symmetry() {
        let b = LatticeBox::square(6);
        let v = Vertex::new(2, 3);
        let w = Vertex::new(4, 3);
        let a1 = green_monte_carlo(&b, v, w, 20_000, 5).unwrap();
        let a2 = green_monte_carlo(&b, v, w, 20_000, 5).unwrap();
        assert_eq!(a1, a2);
        // mirror the pair through the vertical axis: same estimate law
        let (m, sm) = green_monte_carlo(&b, Vertex::new(4, 3), Vertex::new(2, 3), 20_000, 6).unwrap();
        assert!((a1.0 - m).abs() <= 3.0 * (a1.1 * a1.1 + sm * sm).sqrt());
    }

    #[test]
    fn harmonic_measure_one_step_box() {
        let domain = LatticeBox::square(16);
        let cache = HarmonicCache::new();
        // scale with half-width 1 around an inner vertex: 3x3 box, all four
        // neighbors are its boundary
        let lambda = 1.0 - (3.0f64).ln() / (16.0f64).ln(); // hw = floor(16^{1-l}/2) = 1
        let v = Vertex::new(8, 8);
        let hm = harmonic_measure(&domain, v, lambda, &cache);
        let mut mass = HashMap::new();
        for (z, w) in &hm.weights {
            if *w != 0.0 {
                mass.insert(*z, *w);
            }
        }
        assert_eq!(mass.len(), 4);
        for u in v.neighbors() {
            assert!((mass[&u] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn harmonic_measure_extremes_and_mass() {
        let domain = LatticeBox::square(16);
        let cache = HarmonicCache::new();
        let v = Vertex::new(5, 9);
        let point = harmonic_measure(&domain, v, 1.0, &cache);
        assert_eq!(point.weights, vec![(v, 1.0)]);
        for lambda in [0.0, 0.3, 0.62, 0.9] {
            let hm = harmonic_measure(&domain, v, lambda, &cache);
            assert!((hm.total_mass() - 1.0).abs() < 1e-12, "lambda {lambda}");
            assert!(hm.weights.iter().all(|&(_, w)| w >= -1e-15));
            // constant boundary data is reproduced
            assert!((hm.integrate(|_| 3.25) - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn harmonic_measure_reproduces_coordinates_on_unclipped_boxes() {
        let domain = LatticeBox::square(32);
        let cache = HarmonicCache::new();
        let v = Vertex::new(16, 13);
        // hw = 4 at this scale, far from the domain boundary: unclipped
        let lambda = 1.0 - (9.0f64).ln() / (32.0f64).ln();
        let hm = harmonic_measure(&domain, v, lambda, &cache);
        let x = hm.integrate(|z| z.x as f64);
        let y = hm.integrate(|z| z.y as f64);
        assert!((x - v.x as f64).abs() < 1e-11);
        assert!((y - v.y as f64).abs() < 1e-11);
    }

    #[test]
    fn harmonic_cache_reuses_shapes() {
        let domain = LatticeBox::square(16);
        let cache = HarmonicCache::new();
        let lambda = 0.5;
        for v in [Vertex::new(6, 6), Vertex::new(9, 7), Vertex::new(10, 10)] {
            harmonic_measure(&domain, v, lambda, &cache);
        }
        // all three unclipped boxes share one cache entry
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn harmonic_matrix_rows_match_single_measures() {
        let domain = LatticeBox::square(8);
        let cache = HarmonicCache::new();
        let h = harmonic_matrix(&domain, 0.4, &cache);
        let v = Vertex::new(3, 5);
        let hm = harmonic_measure(&domain, v, 0.4, &cache);
        let row = &h.rows[domain.vertex_index(v)];
        assert_eq!(row.len(), hm.weights.len());
        let total: f64 = row.iter().map(|&(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // scale 1 is the identity, scale 0 the zero operator
        let h1 = harmonic_matrix(&domain, 1.0, &cache);
        assert_eq!(h1.rows[10], vec![(10, 1.0)]);
        let h0 = harmonic_matrix(&domain, 0.0, &cache);
        assert!(h0.rows.iter().all(|r| r.is_empty()));
    }

    #[test]
    fn potential_kernel_constant_and_representation() {
        let g = green_matrix(&LatticeBox::square(40)).unwrap();
        let cache = HarmonicCache::new();
        let pk = PotentialKernel::fitted(&g, &cache);
        // gamma_E + (3/2) ln 2 for this normalization
        assert!(
            (pk.constant - 1.6169).abs() < 0.02,
            "fitted constant {}",
            pk.constant
        );
        // well-separated interior pair: representation matches closely
        let d = potential_kernel_check(&g, &pk, &cache, Vertex::new(14, 20), Vertex::new(26, 20))
            .unwrap();
        assert!(d < 5e-3, "discrepancy {d}");
        // adjacent pair: finite, no NaN
        let d2 = potential_kernel_check(&g, &pk, &cache, Vertex::new(20, 20), Vertex::new(21, 20))
            .unwrap();
        assert!(d2.is_finite());
        // mirror-symmetric swap gives the identical value
        let a = potential_kernel_check(&g, &pk, &cache, Vertex::new(17, 20), Vertex::new(23, 20))
            .unwrap();
        let b = potential_kernel_check(&g, &pk, &cache, Vertex::new(23, 20), Vertex::new(17, 20))
            .unwrap();
        assert!((a - b).abs() < 1e-10);
        // diagonal rejected
        assert!(potential_kernel_check(&g, &pk, &cache, Vertex::new(5, 5), Vertex::new(5, 5))
            .is_err());
    }

    #[test]
    fn dump_load_round_trip() {
        let g = green_matrix(&LatticeBox::square(6)).unwrap();
        let mut buf = Vec::new();
        g.dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 8 * 25 * 25);
        let back = GreenOperator::load(buf.as_slice()).unwrap();
        assert_eq!(back.bbox(), g.bbox());
        assert_eq!(back.matrix().data, g.matrix().data);
    }
}

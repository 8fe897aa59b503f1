//! Ruelle probability cascades: nested Poisson-Dirichlet weights on a
//! truncated tree, replica sampling, exact-limit law checks (two-overlap
//! atoms, identities, ultrametricity) and the three-way comparison against
//! the field estimates and the closed forms.
//!
//! Trees are truncated to K children per node with renormalized weights;
//! the points z_n = Gamma_n^{-1/zeta} are the K largest points of the
//! Poisson process with intensity zeta x^{-1-zeta} dx, already in
//! decreasing order.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::Serialize;

use crate::analytics::{LimitLaw, RpcParams};
use crate::error::{Error, Result};
use crate::gibbs::{delta_method, McEstimate, TwoOverlapCdf};
use crate::seed::{derive_rng, derive_seed};

#[derive(Clone, Debug)]
pub struct CascadeParams {
    /// Number of tree levels r >= 0.
    pub levels: usize,
    /// 0 < zeta_0 < ... < zeta_{r-1} < 1.
    pub zetas: Vec<f64>,
    /// Overlap values by ancestor depth: 0 = q_0 < q_1 < ... < q_r <= 1.
    pub qs: Vec<f64>,
    /// Children kept per node.
    pub truncation: usize,
}

impl CascadeParams {
    pub fn new(zetas: Vec<f64>, qs: Vec<f64>, truncation: usize) -> Result<Self> {
        let r = zetas.len();
        if qs.len() != r + 1 {
            return Err(Error::InvalidParams(format!(
                "need {} overlap values for {} levels, got {}",
                r + 1,
                r,
                qs.len()
            )));
        }
        let mut prev = 0.0;
        for &z in &zetas {
            if !(z > prev && z < 1.0) {
                return Err(Error::InvalidParams(
                    "zetas must be strictly increasing in (0, 1)".into(),
                ));
            }
            prev = z;
        }
        if qs[0] != 0.0 {
            return Err(Error::InvalidParams("q_0 must be zero".into()));
        }
        for w in qs.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidParams("qs must be strictly increasing".into()));
            }
        }
        if *qs.last().unwrap() > 1.0 {
            return Err(Error::InvalidParams("q_r must not exceed 1".into()));
        }
        if truncation < 2 {
            return Err(Error::InvalidParams("truncation must be at least 2".into()));
        }
        Ok(CascadeParams {
            levels: r,
            zetas,
            qs,
            truncation,
        })
    }

    /// Cascade parameters read off a limiting two-overlap law.
    pub fn from_limit_law(rpc: &RpcParams, truncation: usize) -> Result<Self> {
        CascadeParams::new(rpc.zetas.clone(), rpc.qs.clone(), truncation)
    }

    /// A single leaf of mass one (the high-temperature degenerate cascade).
    pub fn degenerate() -> Self {
        CascadeParams {
            levels: 0,
            zetas: vec![],
            qs: vec![0.0],
            truncation: 2,
        }
    }
}

/// The K largest points of the Poisson process with mean measure
/// zeta x^{-1-zeta} dx, in decreasing order: z_n = Gamma_n^{-1/zeta}.
pub fn sample_poisson_points(zeta: f64, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::InvalidParams(format!("zeta = {zeta} outside (0,1)")));
    }
    let mut gamma = 0.0;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let e: f64 = rng.sample(Exp1);
        gamma += e;
        out.push(gamma.powf(-1.0 / zeta));
    }
    Ok(out)
}

/// A truncated cascade: per level, the child weights grouped by parent
/// (each group of K sums to one).
#[derive(Clone, Debug)]
pub struct CascadeTree {
    pub params: CascadeParams,
    /// weights[p] has K^{p+1} entries: the children of the K^p nodes at
    /// depth p, in parent-major order.
    weights: Vec<Vec<f64>>,
}

pub fn build_cascade(params: &CascadeParams, seed: u64) -> CascadeTree {
    let k = params.truncation;
    let mut rng = derive_rng(seed, "cascade-tree", &[]);
    let mut weights = Vec::with_capacity(params.levels);
    let mut nodes = 1usize;
    for level in 0..params.levels {
        let zeta = params.zetas[level];
        let mut w = Vec::with_capacity(nodes * k);
        for _ in 0..nodes {
            let z = sample_poisson_points(zeta, k, &mut rng).unwrap();
            let total: f64 = z.iter().sum();
            w.extend(z.iter().map(|x| x / total));
        }
        weights.push(w);
        nodes *= k;
    }
    CascadeTree {
        params: params.clone(),
        weights,
    }
}

impl CascadeTree {
    pub fn leaf_count(&self) -> usize {
        self.params.truncation.pow(self.params.levels as u32)
    }

    /// Mass of the leaf reached by the given child path.
    pub fn leaf_mass(&self, path: &[u32]) -> f64 {
        let k = self.params.truncation;
        let mut node = 0usize;
        let mut mass = 1.0;
        for (level, &c) in path.iter().enumerate() {
            mass *= self.weights[level][node * k + c as usize];
            node = node * k + c as usize;
        }
        mass
    }

    /// Per-node sum of squared child weights at a level, averaged over the
    /// nodes: the within-tree estimate of P(two replicas share the child).
    pub fn mean_weight_square_sum(&self, level: usize) -> f64 {
        let k = self.params.truncation;
        let w = &self.weights[level];
        let nodes = w.len() / k;
        let mut acc = 0.0;
        for node in 0..nodes {
            // replica pairs reach this node with probability given by the
            // ancestor weights; averaging plainly over nodes is only used
            // as the PD moment diagnostic at the root level
            let s: f64 = w[node * k..(node + 1) * k].iter().map(|x| x * x).sum();
            acc += s;
        }
        acc / nodes as f64
    }

    /// Draw one leaf path by cascading categorical sampling.
    pub fn draw_leaf(&self, rng: &mut impl Rng) -> Vec<u32> {
        let k = self.params.truncation;
        let mut node = 0usize;
        let mut path = Vec::with_capacity(self.params.levels);
        for w in &self.weights {
            let group = &w[node * k..(node + 1) * k];
            let mut u: f64 = rng.random();
            let mut child = k - 1;
            for (c, &wc) in group.iter().enumerate() {
                if u < wc {
                    child = c;
                    break;
                }
                u -= wc;
            }
            path.push(child as u32);
            node = node * k + child;
        }
        path
    }
}

/// Depth of the deepest common ancestor of two leaf paths.
pub fn common_depth(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Overlaps of i.i.d. replica draws from one cascade, reported through the
/// overlap alphabet q_0..q_r; the diagonal is q_r by convention.
#[derive(Clone, Debug)]
pub struct ReplicaOverlapArray {
    pub qs: Vec<f64>,
    pub paths: Vec<Vec<u32>>,
}

impl ReplicaOverlapArray {
    pub fn overlap(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return *self.qs.last().unwrap();
        }
        self.qs[common_depth(&self.paths[i], &self.paths[j])]
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

pub fn sample_cascade_replicas(tree: &CascadeTree, count: usize, seed: u64) -> ReplicaOverlapArray {
    let mut rng = derive_rng(seed, "cascade-replicas", &[]);
    let paths = (0..count).map(|_| tree.draw_leaf(&mut rng)).collect();
    ReplicaOverlapArray {
        qs: tree.params.qs.clone(),
        paths,
    }
}

// ---------------------------------------------------------------------------
// Two-overlap atoms of the cascade
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct CascadeAtoms {
    pub qs: Vec<f64>,
    /// P(R_{1,2} = q_j) per depth j, estimated over trees and pairs.
    pub mass: Vec<McEstimate>,
}

pub fn cascade_two_overlap_atoms(
    params: &CascadeParams,
    trees: usize,
    pairs_per_tree: usize,
    master_seed: u64,
) -> CascadeAtoms {
    let depth_counts: Vec<Vec<f64>> = (0..trees as u64)
        .into_par_iter()
        .map(|t| {
            let tree = build_cascade(params, derive_seed(master_seed, "atoms-tree", &[t]));
            let mut rng = derive_rng(master_seed, "atoms-pairs", &[t]);
            let mut counts = vec![0.0; params.levels + 1];
            for _ in 0..pairs_per_tree {
                let a = tree.draw_leaf(&mut rng);
                let b = tree.draw_leaf(&mut rng);
                counts[common_depth(&a, &b)] += 1.0;
            }
            for c in &mut counts {
                *c /= pairs_per_tree as f64;
            }
            counts
        })
        .collect();
    let mass = (0..params.levels + 1)
        .map(|j| {
            let vals: Vec<f64> = depth_counts.iter().map(|c| c[j]).collect();
            McEstimate::from_values(&vals, master_seed)
        })
        .collect();
    CascadeAtoms {
        qs: params.qs.clone(),
        mass,
    }
}

/// Mean of the squared-weight sums at each level over independent trees;
/// converges to 1 - zeta_level (the Poisson-Dirichlet pair-coincidence
/// moment) as the truncation grows.
pub fn poisson_dirichlet_moments(
    params: &CascadeParams,
    trees: usize,
    master_seed: u64,
) -> Vec<McEstimate> {
    let per_tree: Vec<Vec<f64>> = (0..trees as u64)
        .into_par_iter()
        .map(|t| {
            let tree = build_cascade(params, derive_seed(master_seed, "pd-tree", &[t]));
            (0..params.levels)
                .map(|l| tree.mean_weight_square_sum(l))
                .collect()
        })
        .collect();
    (0..params.levels)
        .map(|l| {
            let vals: Vec<f64> = per_tree.iter().map(|r| r[l]).collect();
            McEstimate::from_values(&vals, master_seed)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Ghirlanda-Guerra identities on the cascade
// ---------------------------------------------------------------------------

/// One multiplicative factor of h: a per-depth table applied to the overlap
/// of a replica pair (0-based indices below s).
#[derive(Clone, Debug)]
pub struct PairTable {
    pub i: usize,
    pub j: usize,
    pub by_depth: Vec<f64>,
}

/// The functional of the limit identity: g acts on the distinguished
/// overlap through a per-depth table; h is a product of pair tables over
/// the first s replicas.
#[derive(Clone, Debug)]
pub struct CascadeFunctional {
    pub s: usize,
    pub k: usize,
    pub g_by_depth: Vec<f64>,
    pub h_factors: Vec<PairTable>,
}

impl CascadeFunctional {
    fn h(&self, paths: &[Vec<u32>]) -> f64 {
        let mut acc = 1.0;
        for f in &self.h_factors {
            acc *= f.by_depth[common_depth(&paths[f.i], &paths[f.j])];
        }
        acc
    }
}

/// Monte Carlo residual of the limit identity
/// E[g(R_{k,s+1}) h] - (1/s) E[g(R_{1,2})] E[h] - (1/s) sum_{l != k} E[g(R_{k,l}) h],
/// with the three terms estimated from common replica tuples per tree.
pub fn cascade_gg_check(
    params: &CascadeParams,
    f: &CascadeFunctional,
    trees: usize,
    tuples_per_tree: usize,
    master_seed: u64,
) -> Result<McEstimate> {
    if f.g_by_depth.len() != params.levels + 1 {
        return Err(Error::AlphabetMismatch(format!(
            "g table has {} entries for alphabet size {}",
            f.g_by_depth.len(),
            params.levels + 1
        )));
    }
    for t in &f.h_factors {
        if t.by_depth.len() != params.levels + 1 {
            return Err(Error::AlphabetMismatch(format!(
                "h table has {} entries for alphabet size {}",
                t.by_depth.len(),
                params.levels + 1
            )));
        }
        if t.i >= f.s || t.j >= f.s {
            return Err(Error::InvalidParams(
                "h factor references a replica outside 1..s".into(),
            ));
        }
    }
    if f.k >= f.s {
        return Err(Error::InvalidParams(
            "distinguished index outside 1..s".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = (0..trees as u64)
        .into_par_iter()
        .map(|t| {
            let tree = build_cascade(params, derive_seed(master_seed, "gg-tree", &[t]));
            let mut rng = derive_rng(master_seed, "gg-tuples", &[t]);
            let mut m = [0.0f64; 4];
            for _ in 0..tuples_per_tree {
                let paths: Vec<Vec<u32>> =
                    (0..f.s + 1).map(|_| tree.draw_leaf(&mut rng)).collect();
                let h = f.h(&paths);
                let g_extra = f.g_by_depth[common_depth(&paths[f.k], &paths[f.s])];
                m[0] += g_extra * h;
                m[1] += f.g_by_depth[common_depth(&paths[0], &paths[1.min(f.s)])];
                m[2] += h;
                for l in 0..f.s {
                    if l != f.k {
                        m[3] += f.g_by_depth[common_depth(&paths[f.k], &paths[l])] * h;
                    }
                }
            }
            m.iter().map(|x| x / tuples_per_tree as f64).collect()
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
// Three-way comparison
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct MatchRow {
    pub q: f64,
    pub closed_mass: f64,
    pub rpc_mass: f64,
    pub rpc_se: f64,
    pub rpc_within_3se: bool,
    pub field_mass: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatchReport {
    pub rows: Vec<MatchRow>,
    pub rpc_matches_closed_form: bool,
}

/// Step-function read of an empirical CDF at r (value at the largest grid
/// point <= r, 0 below the grid).
fn cdf_at(cdf: &TwoOverlapCdf, r: f64) -> f64 {
    let mut val = 0.0;
    for (&g, &c) in cdf.r_grid.iter().zip(&cdf.cdf) {
        if g <= r {
            val = c;
        }
    }
    val
}

/// Three-way table at the atom grid: closed-form masses, cascade estimates
/// (gated at 3 SE), and the field empirical masses (descriptive). Field
/// masses are read off midpoint bins of the CDF grid.
pub fn match_field_to_cascade(
    field: &TwoOverlapCdf,
    law: &LimitLaw,
    cascade: &CascadeAtoms,
) -> MatchReport {
    let atoms = law.atoms();
    let mut rows = Vec::with_capacity(atoms.len());
    let mut all_ok = true;
    for (j, &(q, closed_mass)) in atoms.iter().enumerate() {
        let lo_edge = if j == 0 {
            -1.0
        } else {
            0.5 * (atoms[j - 1].0 + q)
        };
        let hi_edge = if j + 1 < atoms.len() {
            0.5 * (q + atoms[j + 1].0)
        } else {
            1.0
        };
        let field_mass = cdf_at(field, hi_edge) - cdf_at(field, lo_edge);
        let est = &cascade.mass[j];
        let ok = (est.mean - closed_mass).abs() <= 3.0 * est.standard_error.max(1e-12);
        all_ok &= ok;
        rows.push(MatchRow {
            q,
            closed_mass,
            rpc_mass: est.mean,
            rpc_se: est.standard_error,
            rpc_within_3se: ok,
            field_mass,
        });
    }
    MatchReport {
        rows,
        rpc_matches_closed_form: all_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{build_speed_profile, FieldParams};

    fn worked_cascade(k: usize) -> CascadeParams {
        CascadeParams::new(vec![2.0 / 3.0], vec![0.0, 0.8], k).unwrap()
    }

    #[test]
    fn poisson_points_are_strictly_decreasing_and_deterministic() {
        let mut rng = derive_rng(1, "pp", &[]);
        let z = sample_poisson_points(0.5, 64, &mut rng).unwrap();
        for w in z.windows(2) {
            assert!(w[0] > w[1]);
        }
        let mut rng2 = derive_rng(1, "pp", &[]);
        assert_eq!(z, sample_poisson_points(0.5, 64, &mut rng2).unwrap());
        assert!(sample_poisson_points(1.2, 4, &mut rng).is_err());
    }

    #[test]
    fn poisson_point_counts_match_mean_measure() {
        // E #{points > x} = x^{-zeta}; counts are Poisson
        let zeta = 0.5;
        let runs = 100_000usize;
        let k = 24;
        let mut rng = derive_rng(2, "pp-counts", &[]);
        let mut counts = [0.0f64; 3];
        let xs = [1.0, 2.0, 4.0];
        for _ in 0..runs {
            let z = sample_poisson_points(zeta, k, &mut rng).unwrap();
            for (slot, &x) in counts.iter_mut().zip(&xs) {
                *slot += z.iter().filter(|&&v| v > x).count() as f64;
            }
        }
        for (&x, &total) in xs.iter().zip(&counts) {
            let want = x.powf(-zeta);
            let mean = total / runs as f64;
            let se = (want / runs as f64).sqrt();
            assert!(
                (mean - want).abs() <= 3.0 * se,
                "x = {x}: {mean} vs {want} (se {se})"
            );
        }
    }

    #[test]
    fn degenerate_cascade_is_a_single_leaf() {
        let tree = build_cascade(&CascadeParams::degenerate(), 3);
        assert_eq!(tree.leaf_count(), 1);
        assert_eq!(tree.leaf_mass(&[]), 1.0);
        let reps = sample_cascade_replicas(&tree, 5, 4);
        assert_eq!(reps.overlap(0, 1), 0.0);
        assert_eq!(reps.overlap(2, 2), 0.0);
    }

    #[test]
    fn leaf_masses_sum_to_one() {
        let params = CascadeParams::new(vec![0.4, 0.7], vec![0.0, 0.3, 0.9], 8).unwrap();
        let tree = build_cascade(&params, 11);
        let mut total = 0.0;
        for a in 0..8u32 {
            for b in 0..8u32 {
                total += tree.leaf_mass(&[a, b]);
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn replica_overlaps_are_symmetric_with_diagonal_q_r() {
        let params = CascadeParams::new(vec![0.4, 0.7], vec![0.0, 0.3, 0.9], 16).unwrap();
        let tree = build_cascade(&params, 21);
        let reps = sample_cascade_replicas(&tree, 32, 22);
        for i in 0..reps.len() {
            assert_eq!(reps.overlap(i, i), 0.9);
            for j in 0..reps.len() {
                assert_eq!(reps.overlap(i, j), reps.overlap(j, i));
                assert!(params.qs.contains(&reps.overlap(i, j)));
            }
        }
    }

    #[test]
    fn sampled_triples_are_exactly_ultrametric() {
        let params = CascadeParams::new(vec![0.3, 0.6], vec![0.0, 0.4, 1.0], 8).unwrap();
        let tree = build_cascade(&params, 31);
        let reps = sample_cascade_replicas(&tree, 600, 32);
        for t in 0..200 {
            let (a, b, c) = (3 * t, 3 * t + 1, 3 * t + 2);
            let r12 = reps.overlap(a, b);
            let r13 = reps.overlap(a, c);
            let r23 = reps.overlap(b, c);
            assert!(r12 >= r13.min(r23));
        }
    }

    #[test]
    fn pair_coincidence_matches_poisson_dirichlet_moment() {
        let params = worked_cascade(512);
        let moments = poisson_dirichlet_moments(&params, 6000, 41);
        let want = 1.0 - 2.0 / 3.0;
        assert!(
            moments[0].covers(want, 3.0),
            "{} +- {} vs {want}",
            moments[0].mean,
            moments[0].standard_error
        );
    }

    #[test]
    fn truncation_bias_shrinks_as_k_doubles() {
        let want = 1.0 - 2.0 / 3.0;
        let mut biases = Vec::new();
        for k in [2usize, 8, 64] {
            let params = worked_cascade(k);
            let m = poisson_dirichlet_moments(&params, 4000, 43);
            biases.push((m[0].mean - want).abs());
        }
        assert!(
            biases[0] > biases[1] && biases[1] > biases[2],
            "biases {biases:?}"
        );
    }

    #[test]
    fn two_overlap_atoms_match_the_limit_law() {
        let profile =
            build_speed_profile(&FieldParams::new(vec![2.0, 1.0], vec![0.5, 1.0]).unwrap());
        let law = profile.limit_law(1.5).unwrap();
        let params = CascadeParams::from_limit_law(&law.rpc, 512).unwrap();
        let atoms = cascade_two_overlap_atoms(&params, 1500, 64, 47);
        for (est, &(_, mass)) in atoms.mass.iter().zip(law.atoms()) {
            assert!(
                est.covers(mass, 3.0),
                "{} +- {} vs {mass}",
                est.mean,
                est.standard_error
            );
        }
    }

    #[test]
    fn gg_check_single_replica_constant_h_is_exactly_zero() {
        let params = worked_cascade(64);
        let f = CascadeFunctional {
            s: 1,
            k: 0,
            g_by_depth: vec![0.0, 1.0],
            h_factors: vec![],
        };
        let est = cascade_gg_check(&params, &f, 200, 16, 51).unwrap();
        assert!(est.mean.abs() < 1e-14);
    }

    #[test]
    fn gg_check_two_replica_indicators_within_three_se() {
        let params = worked_cascade(256);
        let f = CascadeFunctional {
            s: 2,
            k: 0,
            g_by_depth: vec![0.0, 1.0],
            h_factors: vec![PairTable {
                i: 0,
                j: 1,
                by_depth: vec![0.0, 1.0],
            }],
        };
        let est = cascade_gg_check(&params, &f, 4000, 64, 53).unwrap();
        assert!(
            est.mean.abs() <= 3.0 * est.standard_error,
            "{} +- {}",
            est.mean,
            est.standard_error
        );
        // the terms themselves follow the Poisson-Dirichlet moments:
        // E[g h] = E p_3 = (1-z)(2-z)/2 with z = 2/3
        let zeta: f64 = 2.0 / 3.0;
        let p3 = (1.0 - zeta) * (2.0 - zeta) / 2.0;
        let lhs_vals: Vec<f64> = (0..2000u64)
            .map(|t| {
                let tree = build_cascade(&params, derive_seed(99, "p3", &[t]));
                let mut rng = derive_rng(99, "p3-tuples", &[t]);
                let mut acc = 0.0;
                for _ in 0..32 {
                    let a = tree.draw_leaf(&mut rng);
                    let b = tree.draw_leaf(&mut rng);
                    let c = tree.draw_leaf(&mut rng);
                    if common_depth(&a, &b) == 1 && common_depth(&a, &c) == 1 {
                        acc += 1.0;
                    }
                }
                acc / 32.0
            })
            .collect();
        let lhs = McEstimate::from_values(&lhs_vals, 99);
        assert!(lhs.covers(p3, 3.5), "{} vs {p3}", lhs.mean);
    }

    #[test]
    fn gg_check_rejects_alphabet_mismatch() {
        let params = worked_cascade(16);
        let f = CascadeFunctional {
            s: 2,
            k: 0,
            g_by_depth: vec![0.0, 1.0, 2.0],
            h_factors: vec![],
        };
        assert!(matches!(
            cascade_gg_check(&params, &f, 4, 4, 1),
            Err(Error::AlphabetMismatch(_))
        ));
    }

    #[test]
    fn match_report_flags_and_field_masses() {
        let profile =
            build_speed_profile(&FieldParams::new(vec![2.0, 1.0], vec![0.5, 1.0]).unwrap());
        let law = profile.limit_law(1.5).unwrap();
        let field = TwoOverlapCdf {
            n: 16,
            beta: 1.5,
            rho: 1.0,
            r_grid: vec![-0.5, 0.0, 0.4, 0.8, 1.0],
            cdf: vec![0.0, 0.6, 0.7, 1.0, 1.0],
            standard_error: vec![0.0; 5],
            sample_count: 1,
            seed: 0,
        };
        let params = CascadeParams::from_limit_law(&law.rpc, 256).unwrap();
        let atoms = cascade_two_overlap_atoms(&params, 800, 64, 61);
        let report = match_field_to_cascade(&field, &law, &atoms);
        assert_eq!(report.rows.len(), 2);
        assert!(report.rpc_matches_closed_form);
        // the (0, 0.4] slab of the step CDF lands in the first atom's bin
        assert!((report.rows[0].field_mass - 0.7).abs() < 1e-12);
        assert!((report.rows[1].field_mass - 0.3).abs() < 1e-12);
        // deterministic given the inputs
        let report2 = match_field_to_cascade(&field, &law, &atoms);
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&report2).unwrap()
        );
    }
}

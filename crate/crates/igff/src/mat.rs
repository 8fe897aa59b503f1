//! Minimal dense linear algebra: row-major matrices, a blocked Cholesky,
//! SPD inversion, and a cyclic Jacobi eigensolver for small symmetric
//! matrices (test diagnostics). Sized for interiors up to ~4096 vertices.

use rayon::prelude::*;

#[derive(Clone, Debug)]
pub struct Matrix {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Matrix {
            nrows,
            ncols,
            data: vec![0.0; nrows * ncols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ncols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.ncols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.ncols, self.nrows);
        for i in 0..self.nrows {
            for j in 0..self.ncols {
                t.data[j * self.nrows + i] = self.data[i * self.ncols + j];
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// max |A - A^T|
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.nrows, self.ncols);
        let mut worst = 0.0f64;
        for i in 0..self.nrows {
            for j in (i + 1)..self.ncols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

const BLK: usize = 64;

/// In-place lower Cholesky factorization A = L L^T of an SPD matrix.
/// The strict upper triangle is left untouched. Returns `Err` with the
/// offending pivot if a non-positive pivot is met.
pub fn cholesky_lower(a: &mut Matrix) -> Result<(), (usize, f64)> {
    assert_eq!(a.nrows, a.ncols);
    let n = a.nrows;
    let mut k0 = 0;
    while k0 < n {
        let kb = BLK.min(n - k0);
        // diagonal block, unblocked
        for j in k0..k0 + kb {
            let mut d = a.get(j, j);
            for k in k0..j {
                let v = a.get(j, k);
                d -= v * v;
            }
            if d <= 0.0 {
                return Err((j, d));
            }
            let lj = d.sqrt();
            a.set(j, j, lj);
            for i in (j + 1)..(k0 + kb) {
                let mut s = a.get(i, j);
                for k in k0..j {
                    s -= a.get(i, k) * a.get(j, k);
                }
                a.set(i, j, s / lj);
            }
        }
        let rest = k0 + kb;
        if rest < n {
            // panel solve: rows below the diagonal block against L11^T
            let diag: Vec<f64> = (k0..k0 + kb)
                .map(|j| a.row(j)[k0..k0 + kb].to_vec())
                .flatten()
                .collect();
            let ncols = a.ncols;
            a.data[rest * ncols..]
                .par_chunks_mut(ncols)
                .for_each(|row| {
                    for j in 0..kb {
                        let mut s = row[k0 + j];
                        for k in 0..j {
                            s -= row[k0 + k] * diag[j * kb + k];
                        }
                        row[k0 + j] = s / diag[j * kb + j];
                    }
                });
            // trailing update: A22 -= L21 L21^T (lower triangle only)
            let panel: Vec<f64> = (rest..n)
                .map(|i| a.row(i)[k0..k0 + kb].to_vec())
                .flatten()
                .collect();
            a.data[rest * ncols..]
                .par_chunks_mut(ncols)
                .enumerate()
                .for_each(|(di, row)| {
                    let pi = &panel[di * kb..(di + 1) * kb];
                    for j in rest..=(rest + di) {
                        let pj = &panel[(j - rest) * kb..(j - rest + 1) * kb];
                        let mut s = 0.0;
                        for k in 0..kb {
                            s += pi[k] * pj[k];
                        }
                        row[j] -= s;
                    }
                });
        }
        k0 += kb;
    }
    Ok(())
}

/// Given the lower Cholesky factor L of A, return `scale * A^{-1}`,
/// symmetrized. Columns are solved independently in parallel; the back
/// substitution runs on a pre-transposed factor for contiguous access.
pub fn spd_inverse_from_cholesky(l: &Matrix, scale: f64) -> Matrix {
    let n = l.nrows;
    let mut lt = Matrix::zeros(n, n);
    for i in 0..n {
        for k in 0..=i {
            lt.data[k * n + i] = l.data[i * n + k];
        }
    }
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            // forward solve L y = e_j, exploiting y[0..j] = 0
            let mut y = vec![0.0; n];
            y[j] = 1.0 / l.get(j, j);
            for i in (j + 1)..n {
                let mut s = 0.0;
                let row = l.row(i);
                for k in j..i {
                    s += row[k] * y[k];
                }
                y[i] = -s / row[i];
            }
            // back solve L^T x = scale * y using rows of L^T
            let mut x = vec![0.0; n];
            for i in (0..n).rev() {
                let row = lt.row(i);
                let mut s = scale * y[i];
                for k in (i + 1)..n {
                    s -= row[k] * x[k];
                }
                x[i] = s / row[i];
            }
            x
        })
        .collect();
    let mut out = Matrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            out.data[i * n + j] = cols[j][i];
        }
    }
    // A^{-1} is symmetric; average out solver roundoff
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (out.get(i, j) + out.get(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
/// Intended for diagnostic checks (n up to a few hundred).
pub fn sym_eigenvalues(a: &Matrix) -> Vec<f64> {
    assert_eq!(a.nrows, a.ncols);
    let n = a.nrows;
    let mut m = a.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + m.max_abs()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = 0.5 * (2.0 * apq).atan2(app - aqq);
                let (s, c) = theta.sin_cos();
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp + s * mkq);
                    m.set(p, k, c * mkp + s * mkq);
                    m.set(k, q, c * mkq - s * mkp);
                    m.set(q, k, c * mkq - s * mkp);
                }
                m.set(p, p, c * c * app + 2.0 * s * c * apq + s * s * aqq);
                m.set(q, q, s * s * app - 2.0 * s * c * apq + c * c * aqq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs
}

/// Sparse rows with a fixed column dimension, used for harmonic-measure
/// weight matrices. Row `i` holds (column, weight) pairs.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    pub ncols: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl SparseRows {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseRows {
            ncols,
            rows: vec![Vec::new(); nrows],
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    /// y = S x
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        self.rows
            .par_iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j as usize]).sum())
            .collect()
    }

    /// dot(S row i, x)
    #[inline]
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        self.rows[i].iter().map(|&(j, w)| w * x[j as usize]).sum()
    }

    /// S A (A dense, returns dense rows of the product)
    pub fn mul_dense(&self, a: &Matrix) -> Matrix {
        assert_eq!(self.ncols, a.nrows);
        let ncols = a.ncols;
        let data: Vec<f64> = self
            .rows
            .par_iter()
            .flat_map_iter(|row| {
                let mut acc = vec![0.0; ncols];
                for &(j, w) in row {
                    let ar = a.row(j as usize);
                    for (dst, &src) in acc.iter_mut().zip(ar) {
                        *dst += w * src;
                    }
                }
                acc
            })
            .collect();
        Matrix {
            nrows: self.nrows(),
            ncols,
            data,
        }
    }

    /// A S^T where A is dense with A.ncols == self.ncols... i.e. returns
    /// B[i][j] = dot(A row i, S row j). Used for W G W^T style products.
    pub fn mul_dense_transposed(&self, a: &Matrix) -> Matrix {
        assert_eq!(a.ncols, self.ncols);
        let nrows = a.nrows;
        let ncols = self.nrows();
        let data: Vec<f64> = (0..nrows)
            .into_par_iter()
            .flat_map_iter(|i| {
                let ar = a.row(i);
                (0..ncols)
                    .map(move |j| self.rows[j].iter().map(|&(k, w)| w * ar[k as usize]).sum())
            })
            .collect();
        Matrix { nrows, ncols, data }
    }

    /// S + c * I (square only)
    pub fn add_scaled_identity(&mut self, c: f64) {
        assert_eq!(self.ncols, self.nrows());
        for (i, row) in self.rows.iter_mut().enumerate() {
            match row.iter_mut().find(|(j, _)| *j as usize == i) {
                Some(entry) => entry.1 += c,
                None => row.push((i as u32, c)),
            }
        }
    }

    pub fn scaled(&self, c: f64) -> SparseRows {
        let mut out = self.clone();
        for row in &mut out.rows {
            for entry in row {
                entry.1 *= c;
            }
        }
        out
    }

    /// self += c * other (row-wise merge)
    pub fn add_scaled(&mut self, other: &SparseRows, c: f64) {
        assert_eq!(self.ncols, other.ncols);
        assert_eq!(self.nrows(), other.nrows());
        for (dst, src) in self.rows.iter_mut().zip(&other.rows) {
            for &(j, w) in src {
                match dst.iter_mut().find(|(jj, _)| *jj == j) {
                    Some(entry) => entry.1 += c * w,
                    None => dst.push((j, c * w)),
                }
            }
        }
    }
}

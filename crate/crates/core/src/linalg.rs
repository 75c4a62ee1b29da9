//! Dense helpers shared by the decomposition stages.
//!
//! All singular value decompositions here go through the eigendecomposition
//! of the smaller Gram matrix. Singular values are then re-read as the norms of
//! the projected rows, which keeps tiny singular values accurate to
//! `eps * ‖A‖` instead of `sqrt(eps) * ‖A‖`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Economy SVD `A = U diag(s) Vt` with `m = min(rows, cols)` triplets.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// `rows × m`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Length `m`, non-increasing, non-negative.
    pub s: DVector<f64>,
    /// `m × cols`, orthonormal rows.
    pub vt: DMatrix<f64>,
    /// Leading rows of `vt` that come from the data; later rows are
    /// completions of a numerically null space.
    pub rank: usize,
}

pub fn thin_svd(a: &DMatrix<f64>) -> Result<ThinSvd> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("cannot decompose a {rows}×{cols} matrix")));
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("matrix contains non-finite values".into()));
    }
    if rows <= cols {
        wide_svd(a)
    } else {
        let t = wide_svd(&a.transpose())?;
        Ok(ThinSvd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
            rank: t.rank,
        })
    }
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
pub fn sorted_symmetric_eigen(sym: DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = sym.nrows();
    let eig = sym
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("symmetric eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

fn wide_svd(a: &DMatrix<f64>) -> Result<ThinSvd> {
    let (rows, cols) = a.shape();
    let gram = a * a.transpose();
    let (_, u) = sorted_symmetric_eigen(gram)?;
    let projected = u.transpose() * a;

    let norms: Vec<f64> = projected.row_iter().map(|r| r.norm()).collect();
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u_sorted = DMatrix::zeros(rows, rows);
    let mut vt = DMatrix::zeros(rows, cols);
    let mut s = DVector::zeros(rows);
    let s_max = norms[order[0]];
    let tol = s_max * (cols as f64) * f64::EPSILON * 16.0;
    let mut deficient = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        s[dst] = norms[src];
        if norms[src] > tol && norms[src] > 0.0 {
            vt.set_row(dst, &(projected.row(src) / norms[src]));
        } else {
            deficient.push(dst);
        }
    }
    orthonormalize_rows(&mut vt, &deficient);
    let rank = rows - deficient.len();
    Ok(ThinSvd { u: u_sorted, s, vt, rank })
}

/// Re-orthonormalize rows in place with two passes of modified Gram–Schmidt.
/// Rows listed in `fill` carry no usable direction and are replaced by the
/// standard basis vector least represented in the preceding rows.
pub fn orthonormalize_rows(m: &mut DMatrix<f64>, fill: &[usize]) {
    let (rows, cols) = m.shape();
    // columns of the transpose are contiguous
    let mut t = m.transpose();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for i in 0..rows {
        let (done, rest) = t.as_mut_slice().split_at_mut(i * cols);
        let row = &mut rest[..cols];
        if fill.contains(&i) {
            let mut captured = vec![0.0; cols];
            for prev in done.chunks_exact(cols) {
                for (c, v) in captured.iter_mut().zip(prev) {
                    *c += v * v;
                }
            }
            let best = captured
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .unwrap_or(0);
            row.fill(0.0);
            row[best] = 1.0;
        }
        for _ in 0..2 {
            for prev in done.chunks_exact(cols) {
                let d = dot(row, prev);
                row.iter_mut().zip(prev).for_each(|(r, p)| *r -= d * p);
            }
        }
        let norm = dot(row, row).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|r| *r /= norm);
        }
    }
    *m = t.transpose();
}

/// Index of the largest-magnitude entry; ties resolve to the first index.
pub fn argmax_abs<'a>(values: impl IntoIterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_abs = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v.abs() > best_abs {
            best_abs = v.abs();
            best = i;
        }
    }
    best
}

/// Flip row `i` so that its largest-|entry| is positive. Returns the sign applied.
pub fn canonical_row_sign(m: &mut DMatrix<f64>, i: usize) -> f64 {
    let j = argmax_abs(m.row(i).iter());
    if m[(i, j)] < 0.0 {
        m.row_mut(i).neg_mut();
        -1.0
    } else {
        1.0
    }
}

/// Largest absolute deviation of `m mᵀ` from the identity.
pub fn orthonormality_error(m: &DMatrix<f64>) -> f64 {
    let gram = m * m.transpose();
    let mut worst = 0.0f64;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Stack matrices with equal column counts vertically.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let cols = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    if blocks.iter().any(|b| b.ncols() != cols) {
        return Err(Error::Dimension("blocks differ in column count".into()));
    }
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut offset = 0;
    for b in blocks {
        out.rows_mut(offset, b.nrows()).copy_from(*b);
        offset += b.nrows();
    }
    Ok(out)
}

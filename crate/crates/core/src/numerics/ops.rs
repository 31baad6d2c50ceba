//! Dense kernels with explicit backward rules.
//!
//! Every product accumulates each output entry in ascending inner-index order
//! starting from zero, whichever layout variant is used. `matmul`,
//! `matmul_bt` and `matmul_at` therefore agree bit-for-bit on the same
//! logical product, and a row computed alone matches the same row computed
//! inside a batch.

use std::cmp::Ordering;

use super::matrix::{Matrix, Real};
use crate::error::{Error, Result};

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("{:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, n) = (a.rows(), b.cols());
    let mut c = Matrix::zeros(m, n);
    if n == 0 {
        return Ok(c);
    }
    for i in 0..m {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (cij, &bkj) in c_row.iter_mut().zip(b_row) {
                *cij += aik * bkj;
            }
        }
    }
    c.ensure_finite("matmul")?;
    Ok(c)
}

/// `a · bᵀ` where `b` is stored untransposed.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "matmul_bt",
            format!("{:?} · {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    matmul(a, &b.transpose())
}

/// `aᵀ · b` where `a` is stored untransposed.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "matmul_at",
            format!("{:?}ᵀ · {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, n) = (a.cols(), b.cols());
    let mut c = Matrix::zeros(m, n);
    for r in 0..a.rows() {
        let a_row = a.row(r);
        let b_row = b.row(r);
        for (i, &ari) in a_row.iter().enumerate() {
            let c_row = c.row_mut(i);
            for (cij, &brj) in c_row.iter_mut().zip(b_row) {
                *cij += ari * brj;
            }
        }
    }
    c.ensure_finite("matmul_at")?;
    Ok(c)
}

/// Backward rule for `c = a · b`: returns `(dc · bᵀ, aᵀ · dc)`.
pub fn matmul_backward(a: &Matrix, b: &Matrix, dc: &Matrix) -> Result<(Matrix, Matrix)> {
    if dc.shape() != (a.rows(), b.cols()) {
        return Err(Error::shape(
            "matmul_backward",
            format!("dc {:?} for {:?} · {:?}", dc.shape(), a.shape(), b.shape()),
        ));
    }
    Ok((matmul_bt(dc, b)?, matmul_at(a, dc)?))
}

/// Row-wise softmax with row-max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    logits.ensure_finite("softmax_rows")?;
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward rule for `p = softmax_rows(z)`: `dz = p ⊙ (dp − ⟨p, dp⟩)` per row.
pub fn softmax_rows_backward(probs: &Matrix, dprobs: &Matrix) -> Result<Matrix> {
    probs.ensure_same_shape(dprobs, "softmax_rows_backward")?;
    let mut dz = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = dprobs.row(r);
        let dot: Real = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for ((out, &pi), &dpi) in dz.row_mut(r).iter_mut().zip(p).zip(dp) {
            *out = pi * (dpi - dot);
        }
    }
    Ok(dz)
}

/// Stabilized `log Σ_j exp(z_rj)` for each row.
pub fn log_sum_exp_rows(logits: &Matrix) -> Result<Vec<Real>> {
    logits.ensure_finite("log_sum_exp_rows")?;
    Ok((0..logits.rows())
        .map(|r| log_sum_exp(logits.row(r)))
        .collect())
}

pub(crate) fn log_sum_exp(row: &[Real]) -> Real {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if max == Real::NEG_INFINITY {
        return max;
    }
    let sum: Real = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x · σ(x)`, elementwise.
pub fn silu(x: &Matrix) -> Matrix {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Matrix::new(x.rows(), x.cols(), data).expect("same shape")
}

/// Backward rule for `silu`: `dx = dy ⊙ σ(x)(1 + x(1 − σ(x)))`.
pub fn silu_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    x.ensure_same_shape(dy, "silu_backward")?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Matrix::new(x.rows(), x.cols(), data)
}

/// Order applied among equal scores in [`topk_rows`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    /// Equal scores keep the lower column index first.
    LowerIndexFirst,
    /// Equal scores keep the higher column index first.
    HigherIndexFirst,
}

/// Per-row top-k selection, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub k: usize,
    /// `rows × k` column indices.
    pub indices: Vec<usize>,
    /// `rows × k` selected scores.
    pub values: Vec<Real>,
}

impl TopK {
    pub fn row_indices(&self, r: usize) -> &[usize] {
        &self.indices[r * self.k..(r + 1) * self.k]
    }

    pub fn row_values(&self, r: usize) -> &[Real] {
        &self.values[r * self.k..(r + 1) * self.k]
    }
}

#[inline]
pub(crate) fn rank_order(row: &[Real], a: usize, b: usize, tiebreak: TieBreak) -> Ordering {
    // inputs are finite, so partial_cmp is total here (and treats -0.0 == 0.0)
    row[b]
        .partial_cmp(&row[a])
        .unwrap_or(Ordering::Equal)
        .then_with(|| match tiebreak {
        TieBreak::LowerIndexFirst => a.cmp(&b),
            TieBreak::HigherIndexFirst => b.cmp(&a),
        })
}

/// Top-k of a single row, written into `out` (cleared first).
pub(crate) fn topk_row_into(row: &[Real], k: usize, tiebreak: TieBreak, out: &mut Vec<usize>) {
    out.clear();
    out.extend(0..row.len());
    if k == 0 {
        out.clear();
        return;
    }
    if k < row.len() {
        out.select_nth_unstable_by(k - 1, |&a, &b| rank_order(row, a, b, tiebreak));
        out.truncate(k);
    }
    out.sort_unstable_by(|&a, &b| rank_order(row, a, b, tiebreak));
}

/// The `k` largest entries of each row with a deterministic tie order.
pub fn topk_rows(scores: &Matrix, k: usize, tiebreak: TieBreak) -> Result<TopK> {
    if k > scores.cols() {
        return Err(Error::shape(
            "topk_rows",
            format!("k = {k} exceeds {} columns", scores.cols()),
        ));
    }
    scores.ensure_finite("topk_rows")?;
    let mut indices = Vec::with_capacity(scores.rows() * k);
    let mut values = Vec::with_capacity(scores.rows() * k);
    let mut scratch = Vec::with_capacity(scores.cols());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        topk_row_into(row, k, tiebreak, &mut scratch);
        values.extend(scratch.iter().map(|&c| row[c]));
        indices.extend_from_slice(&scratch);
    }
    Ok(TopK { k, indices, values })
}

/// Stable counting sort of keys in `0..bins`. Also returns the histogram.
pub fn stable_argsort_bins(keys: &[usize], bins: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut counts = vec![0usize; bins];
    for &k in keys {
        if k >= bins {
            return Err(Error::shape(
                "stable_argsort_bins",
                format!("key {k} outside 0..{bins}"),
            ));
        }
        counts[k] += 1;
    }
    let mut offsets = vec![0usize; bins];
    let mut acc = 0;
    for (off, &c) in offsets.iter_mut().zip(&counts) {
        *off = acc;
        acc += c;
    }
    let mut order = vec![0usize; keys.len()];
    for (i, &k) in keys.iter().enumerate() {
        order[offsets[k]] = i;
        offsets[k] += 1;
    }
    Ok((order, counts))
}

/// Permutation that sorts `keys` ascending; equal keys keep input order.
pub fn stable_argsort(keys: &[usize]) -> Vec<usize> {
    let max = keys.iter().copied().max().unwrap_or(0);
    if max <= keys.len().saturating_mul(4) + 1024 {
        return stable_argsort_bins(keys, max + 1)
            .expect("bins cover max key")
            .0;
    }
    merge_argsort(keys)
}

// Bottom-up merge sort on indices, for sparse key ranges.
fn merge_argsort(keys: &[usize]) -> Vec<usize> {
    let n = keys.len();
    let mut src: Vec<usize> = (0..n).collect();
    let mut dst = vec![0usize; n];
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo < n {
            let mid = (lo + width).min(n);
            let hi = (lo + 2 * width).min(n);
            let (mut i, mut j, mut o) = (lo, mid, lo);
            while i < mid && j < hi {
                if keys[src[j]] < keys[src[i]] {
                    dst[o] = src[j];
                    j += 1;
                } else {
                    dst[o] = src[i];
                    i += 1;
                }
                o += 1;
            }
            dst[o..o + (mid - i)].copy_from_slice(&src[i..mid]);
            o += mid - i;
            dst[o..o + (hi - j)].copy_from_slice(&src[j..hi]);
            lo = hi;
        }
        std::mem::swap(&mut src, &mut dst);
        width *= 2;
    }
    src
}

/// `dest[row_index[j]] += src[j]` for every `j`, in ascending `j` order.
pub fn scatter_add(mut dest: Matrix, row_index: &[usize], src: &Matrix) -> Result<Matrix> {
    scatter_add_into(&mut dest, row_index, src)?;
    Ok(dest)
}

/// In-place form of [`scatter_add`].
pub fn scatter_add_into(dest: &mut Matrix, row_index: &[usize], src: &Matrix) -> Result<()> {
    if src.rows() != row_index.len() {
        return Err(Error::shape(
            "scatter_add",
            format!("{} src rows for {} indices", src.rows(), row_index.len()),
        ));
    }
    if !row_index.is_empty() && src.cols() != dest.cols() {
        return Err(Error::shape(
            "scatter_add",
            format!("src has {} cols, dest {}", src.cols(), dest.cols()),
        ));
    }
    for (j, &r) in row_index.iter().enumerate() {
        if r >= dest.rows() {
            return Err(Error::shape(
                "scatter_add",
                format!("row index {r} outside 0..{}", dest.rows()),
            ));
        }
        for (d, s) in dest.row_mut(r).iter_mut().zip(src.row(j)) {
            *d += s;
        }
    }
    Ok(())
}

/// Rows of `src` picked by `row_index`, in order.
pub fn gather_rows(src: &Matrix, row_index: &[usize]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(row_index.len() * src.cols());
    for &r in row_index {
        if r >= src.rows() {
            return Err(Error::shape(
                "gather_rows",
                format!("row index {r} outside 0..{}", src.rows()),
            ));
        }
        data.extend_from_slice(src.row(r));
    }
    Matrix::new(row_index.len(), src.cols(), data)
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_diff, rel_err};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[Real]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let r = matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
        assert!(matmul_bt(&a, &Matrix::zeros(2, 2)).is_err());
        assert!(matmul_at(&a, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn layout_variants_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::random_normal(6, 9, 1.0, &mut rng);
        let b = Matrix::random_normal(9, 4, 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(matmul_bt(&a, &b.transpose()).unwrap(), c);
        assert_eq!(matmul_at(&a.transpose(), &b).unwrap(), c);
        // single rows match the batched product
        for r in 0..a.rows() {
            let row = Matrix::new(1, 9, a.row(r).to_vec()).unwrap();
            assert_eq!(matmul(&row, &b).unwrap().row(0), c.row(r));
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = Matrix::random_normal(5, 7, 1.0, &mut rng);
            let b = Matrix::random_normal(7, 3, 1.0, &mut rng);
            let w = Matrix::random_normal(5, 3, 1.0, &mut rng);
            let loss = |a: &Matrix, b: &Matrix| -> Real {
                let c = matmul(a, b).unwrap();
                c.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
            };
            let (da, db) = matmul_backward(&a, &b, &w).unwrap();
            let na = central_diff(&a, 1e-6, |p| loss(p, &b));
            let nb = central_diff(&b, 1e-6, |p| loss(&a, p));
            assert!(rel_err(&da, &na) < 1e-5);
            assert!(rel_err(&db, &nb) < 1e-5);
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax_rows(&m(&[&[0.0, 0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
        let p = softmax_rows(&m(&[&[(3.0 as Real).ln(), 0.0]])).unwrap();
        assert!((p.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((p.get(0, 1) - 0.25).abs() < 1e-15);
        let p = softmax_rows(&m(&[&[1000.0, 0.0]])).unwrap();
        assert!(p.is_finite());
        assert!((p.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(p.get(0, 1) < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let z = m(&[&[Real::NAN, 0.0]]);
        assert!(matches!(softmax_rows(&z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let z = Matrix::random_normal(4, 6, 2.0, &mut rng);
            let w = Matrix::random_normal(4, 6, 1.0, &mut rng);
            let loss = |z: &Matrix| -> Real {
                let p = softmax_rows(z).unwrap();
                p.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
            };
            let p = softmax_rows(&z).unwrap();
            let dz = softmax_rows_backward(&p, &w).unwrap();
            let nz = central_diff(&z, 1e-6, loss);
            assert!(rel_err(&dz, &nz) < 1e-5, "{}", rel_err(&dz, &nz));
        }
    }

    #[test]
    fn silu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = Matrix::random_normal(3, 5, 3.0, &mut rng);
            let w = Matrix::random_normal(3, 5, 1.0, &mut rng);
            let loss = |x: &Matrix| -> Real {
                silu(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
            };
            let dx = silu_backward(&x, &w).unwrap();
            let nx = central_diff(&x, 1e-6, loss);
            assert!(rel_err(&dx, &nx) < 1e-5);
        }
    }

    #[test]
    fn topk_examples() {
        let t = topk_rows(&m(&[&[5.0, 1.0, 9.0]]), 2, TieBreak::LowerIndexFirst).unwrap();
        assert_eq!(t.row_indices(0), &[2, 0]);
        assert_eq!(t.row_values(0), &[9.0, 5.0]);
        let t = topk_rows(&m(&[&[7.0, 7.0, 7.0]]), 2, TieBreak::LowerIndexFirst).unwrap();
        assert_eq!(t.row_indices(0), &[0, 1]);
        let t = topk_rows(&m(&[&[7.0, 7.0, 7.0]]), 2, TieBreak::HigherIndexFirst).unwrap();
        assert_eq!(t.row_indices(0), &[2, 1]);
        assert!(topk_rows(&m(&[&[1.0, 2.0]]), 3, TieBreak::LowerIndexFirst).is_err());
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            // coarse values so ties are common
            let row: Vec<Real> = (0..128).map(|_| rng.gen_range(0..20) as Real).collect();
            let scores = Matrix::new(1, 128, row.clone()).unwrap();
            let t = topk_rows(&scores, 8, TieBreak::LowerIndexFirst).unwrap();
            let mut oracle: Vec<usize> = (0..128).collect();
            oracle.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(t.row_indices(0), &oracle[..8]);
        }
    }

    #[test]
    fn argsort_examples() {
        assert_eq!(stable_argsort(&[2, 0, 1]), vec![1, 2, 0]);
        assert_eq!(stable_argsort(&[1, 1, 0]), vec![2, 0, 1]);
        assert!(stable_argsort(&[]).is_empty());
        assert!(stable_argsort_bins(&[3], 3).is_err());
    }

    #[test]
    fn argsort_matches_reference_sort_on_10k_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for range in [16usize, 1 << 40] {
            let keys: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..range)).collect();
            let mut oracle: Vec<usize> = (0..keys.len()).collect();
            oracle.sort_by_key(|&i| keys[i]);
            assert_eq!(stable_argsort(&keys), oracle);
        }
    }

    #[test]
    fn scatter_add_examples() {
        let out = scatter_add(
            Matrix::zeros(2, 1),
            &[0, 0, 1],
            &m(&[&[1.0], &[2.0], &[3.0]]),
        )
        .unwrap();
        assert_eq!(out.data(), &[3.0, 3.0]);
        let dest = m(&[&[1.0, 2.0]]);
        assert_eq!(scatter_add(dest.clone(), &[], &Matrix::zeros(0, 2)).unwrap(), dest);
        assert!(scatter_add(Matrix::zeros(1, 1), &[1], &m(&[&[1.0]])).is_err());
    }

    #[test]
    fn scatter_add_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let dest = Matrix::random_normal(7, 4, 1.0, &mut rng);
        let idx: Vec<usize> = (0..40).map(|_| rng.gen_range(0..7)).collect();
        let src = Matrix::random_normal(40, 4, 1.0, &mut rng);
        let mut oracle = dest.clone();
        for (j, &r) in idx.iter().enumerate() {
            for c in 0..4 {
                let v = oracle.get(r, c) + src.get(j, c);
                oracle.set(r, c, v);
            }
        }
        assert_eq!(scatter_add(dest, &idx, &src).unwrap(), oracle);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..40),
            shift in -100.0f64..100.0,
        ) {
            let z = Matrix::new(1, row.len(), row.clone()).unwrap();
            let p = softmax_rows(&z).unwrap();
            let s: Real = p.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
            let shifted: Vec<Real> = row.iter().map(|v| v + shift).collect();
            let q = softmax_rows(&Matrix::new(1, row.len(), shifted).unwrap()).unwrap();
            prop_assert!(p.max_abs_diff(&q).unwrap() < 1e-12);
        }

        #[test]
        fn scatter_then_gather_is_identity_for_permutations(
            seed in 0u64..1000, rows in 1usize..30,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = Matrix::random_normal(rows, 3, 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..rows).collect();
            for i in (1..rows).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let scattered = scatter_add(Matrix::zeros(rows, 3), &perm, &src).unwrap();
            prop_assert_eq!(gather_rows(&scattered, &perm).unwrap(), src);
        }

        #[test]
        fn topk_is_prefix_of_full_sort(
            row in proptest::collection::vec(-5i32..5, 1..64), k_frac in 0.0f64..1.0,
        ) {
            let vals: Vec<Real> = row.iter().map(|&v| v as Real).collect();
            let k = ((vals.len() as f64) * k_frac) as usize;
            let scores = Matrix::new(1, vals.len(), vals.clone()).unwrap();
            let t = topk_rows(&scores, k, TieBreak::LowerIndexFirst).unwrap();
            let mut full: Vec<usize> = (0..vals.len()).collect();
            full.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
            prop_assert_eq!(t.row_indices(0), &full[..k]);
        }
    }
}

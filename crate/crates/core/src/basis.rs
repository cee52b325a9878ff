//! B-spline bases, difference penalties and the row constructors used to
//! build smooth, varying-coefficient, tensor-product and by-factor terms.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("difference order {order} must be smaller than basis size {k}")]
    OrderTooLarge { k: usize, order: usize },
    #[error("basis size {k} too small for degree {degree}")]
    TooFewBasis { k: usize, degree: usize },
    #[error("degenerate domain [{0}, {1}]")]
    DegenerateDomain(f64, f64),
    #[error("category {category} out of range for {num_categories} categories")]
    BadCategory { category: usize, num_categories: usize },
    #[error("constraint vector vanishes; block has zero column sums")]
    RankDeficient,
    #[error("sum-to-zero needs more rows ({rows}) than columns ({cols})")]
    TooFewRows { rows: usize, cols: usize },
}

/// A clamped B-spline basis on `[lo, hi]` with equally spaced interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDef {
    pub degree: usize,
    pub num_basis: usize,
    /// Full knot vector, `num_basis + degree + 1` entries; the boundary knots
    /// are repeated `degree + 1` times.
    pub knots: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl BasisDef {
    pub fn uniform(lo: f64, hi: f64, num_basis: usize, degree: usize) -> Result<Self, BasisError> {
        if num_basis < degree + 1 {
            return Err(BasisError::TooFewBasis { k: num_basis, degree });
        }
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(BasisError::DegenerateDomain(lo, hi));
        }
        let interior = num_basis - degree - 1;
        let mut knots = Vec::with_capacity(num_basis + degree + 1);
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        for j in 1..=interior {
            knots.push(lo + (hi - lo) * j as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        Ok(Self { degree, num_basis, knots, lo, hi })
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.num_basis]
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    /// Basis values at `x` (clamped into the domain).
    pub fn row(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis];
        self.row_into(x, &mut out);
        out
    }

    pub fn row_into(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.num_basis);
        out.iter_mut().for_each(|v| *v = 0.0);
        let x = self.clamp(x);
        let p = self.degree;
        let u = &self.knots;
        // knot span: u[span] <= x < u[span + 1], last span closed on the right
        let span = if x >= self.hi {
            self.num_basis - 1
        } else {
            let mut s = p;
            while s + 1 < self.num_basis && u[s + 1] <= x {
                s += 1;
            }
            s
        };
        // Cox-de Boor recursion in triangular form; n[j] holds B_{span-p+j, deg}
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        for (j, v) in n.into_iter().enumerate() {
            out[span - p + j] = v;
        }
    }
}

/// Penalty matrix `D^T D` for the order-`order` difference operator `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub matrix: DMatrix<f64>,
    pub order: usize,
}

impl PenaltyBlock {
    pub fn quadratic_form(&self, beta: &[f64]) -> f64 {
        quadratic_form(&self.matrix, beta)
    }
}

pub fn quadratic_form(m: &DMatrix<f64>, beta: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        let mut row = 0.0;
        for j in 0..m.ncols() {
            row += m[(i, j)] * beta[j];
        }
        acc += beta[i] * row;
    }
    acc
}

/// The `(k - order) x k` finite-difference operator.
pub fn difference_matrix(k: usize, order: usize) -> Result<DMatrix<f64>, BasisError> {
    if order >= k {
        return Err(BasisError::OrderTooLarge { k, order });
    }
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        d = DMatrix::from_fn(rows, k, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    Ok(d)
}

pub fn difference_penalty(k: usize, order: usize) -> Result<PenaltyBlock, BasisError> {
    let d = difference_matrix(k, order)?;
    Ok(PenaltyBlock { matrix: d.transpose() * d, order })
}

/// Separable tensor-product penalty pieces `(S_x ⊗ I, I ⊗ S_y)` matching the
/// column order of [`tensor_row`].
pub fn tensor_penalties(sx: &DMatrix<f64>, sy: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let ix = DMatrix::<f64>::identity(sx.nrows(), sx.ncols());
    let iy = DMatrix::<f64>::identity(sy.nrows(), sy.ncols());
    (sx.kronecker(&iy), ix.kronecker(sy))
}

/// Kronecker product of two marginal rows: entry `i * ky + j` is `bx[i] * by[j]`.
pub fn tensor_row(bx: &[f64], by: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(bx.len() * by.len());
    for a in bx {
        for b in by {
            out.push(a * b);
        }
    }
    out
}

pub fn varying_coeff_row(b: &[f64], r: f64) -> Vec<f64> {
    b.iter().map(|v| v * r).collect()
}

/// Places `b` in block `category` of a `b.len() * num_categories` row.
pub fn by_factor_row(b: &[f64], category: usize, num_categories: usize) -> Result<Vec<f64>, BasisError> {
    if category >= num_categories {
        return Err(BasisError::BadCategory { category, num_categories });
    }
    let k = b.len();
    let mut out = vec![0.0; k * num_categories];
    out[category * k..(category + 1) * k].copy_from_slice(b);
    Ok(out)
}

/// Reparameterisation removing the direction of the column sums, so the
/// term's fitted values average to zero over the rows it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumToZero {
    /// `k x (k - 1)` matrix, stored row-major.
    k: usize,
    z: Vec<f64>,
}

impl SumToZero {
    /// Householder reflection of the constraint vector `c`; its last `k - 1`
    /// columns span the orthogonal complement of `c`.
    pub fn from_constraint(c: &[f64]) -> Result<Self, BasisError> {
        let k = c.len();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(norm > 1e-300) || scale == 0.0 {
            return Err(BasisError::RankDeficient);
        }
        let mut v = c.to_vec();
        let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * norm;
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        let mut z = Vec::with_capacity(k * (k - 1));
        for i in 0..k {
            for j in 1..k {
                let h = if i == j { 1.0 } else { 0.0 } - 2.0 * v[i] * v[j] / vtv;
                z.push(h);
            }
        }
        Ok(Self { k, z })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.k, self.k - 1, &self.z)
    }

    /// `row · Z`
    pub fn constrain_row(&self, row: &[f64]) -> Vec<f64> {
        let m = self.k - 1;
        let mut out = vec![0.0; m];
        for (i, r) in row.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            let zi = &self.z[i * m..(i + 1) * m];
            for (o, zv) in out.iter_mut().zip(zi) {
                *o += r * zv;
            }
        }
        out
    }

    /// Map constrained coefficients back to the original `k` basis coefficients.
    pub fn expand(&self, beta: &[f64]) -> Vec<f64> {
        let m = self.k - 1;
        (0..self.k)
            .map(|i| self.z[i * m..(i + 1) * m].iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn constrain_penalty(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self.matrix();
        z.transpose() * s * z
    }
}

/// Apply a sum-to-zero constraint to an `n x k` design block.
pub fn apply_sum_to_zero(block: &DMatrix<f64>) -> Result<(DMatrix<f64>, SumToZero), BasisError> {
    let (n, k) = block.shape();
    if n <= k {
        return Err(BasisError::TooFewRows { rows: n, cols: k });
    }
    let c: Vec<f64> = (0..k).map(|j| block.column(j).sum()).collect();
    let t = SumToZero::from_constraint(&c)?;
    Ok((block * t.matrix(), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn knot_layout() {
        let b = BasisDef::uniform(0.0, 1.0, 10, 3).unwrap();
        assert_eq!(b.knots.len(), 14);
        assert_eq!(b.interior_knots().len(), 6);
        assert!(b.interior_knots().windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(BasisDef::uniform(1.0, 1.0, 10, 3), Err(BasisError::DegenerateDomain(..))));
        assert!(matches!(BasisDef::uniform(0.0, 1.0, 3, 3), Err(BasisError::TooFewBasis { .. })));
    }

    #[test]
    fn partition_of_unity_and_nonnegative() {
        let b = BasisDef::uniform(-2.0, 5.0, 10, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = rng.gen_range(-2.0..=5.0);
            let r = b.row(x);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|v| *v >= 0.0));
        }
        for x in [-2.0, 5.0, 1.5] {
            assert!((b.row(x).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_values() {
        let b = BasisDef::uniform(0.0, 3.0, 7, 3).unwrap();
        let lo = b.row(0.0);
        assert_eq!(lo[0], 1.0);
        assert!(lo[1..].iter().all(|v| *v == 0.0));
        let hi = b.row(3.0);
        assert_eq!(hi[6], 1.0);
        // clamped outside the domain
        assert_eq!(b.row(-10.0), lo);
        assert_eq!(b.row(99.0), hi);
    }

    #[test]
    fn degree_zero_is_histogram() {
        let b = BasisDef::uniform(0.0, 4.0, 4, 0).unwrap();
        assert_eq!(b.row(0.5), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.row(2.2), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(b.row(4.0), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cubic_matches_cox_de_boor_recursion() {
        // textbook recursive definition as an independent oracle
        fn n(u: &[f64], i: usize, p: usize, x: f64, last: usize) -> f64 {
            if p == 0 {
                let inside = u[i] <= x && x < u[i + 1];
                let right_end = i == last && x == u[i + 1];
                return if inside || right_end { 1.0 } else { 0.0 };
            }
            let mut v = 0.0;
            let d1 = u[i + p] - u[i];
            if d1 > 0.0 {
                v += (x - u[i]) / d1 * n(u, i, p - 1, x, last);
            }
            let d2 = u[i + p + 1] - u[i + 1];
            if d2 > 0.0 {
                v += (u[i + p + 1] - x) / d2 * n(u, i + 1, p - 1, x, last);
            }
            v
        }
        let b = BasisDef::uniform(0.0, 1.0, 8, 3).unwrap();
        let last_span = b.num_basis - 1;
        for step in 0..=40 {
            let x = step as f64 / 40.0;
            let row = b.row(x);
            for (i, v) in row.iter().enumerate() {
                let expect = n(&b.knots, i, 3, x, last_span);
                assert!((v - expect).abs() < 1e-12, "x={x} i={i} {v} vs {expect}");
            }
        }
    }

    #[test]
    fn difference_penalty_examples() {
        let p = difference_penalty(4, 2).unwrap();
        assert!(p.quadratic_form(&[1.0, 1.0, 1.0, 1.0]).abs() < 1e-12);
        assert!(p.quadratic_form(&[0.0, 1.0, 2.0, 3.0]).abs() < 1e-12);
        let p1 = difference_penalty(5, 1).unwrap();
        assert!((p1.quadratic_form(&[1.0, 2.0, 4.0, 8.0, 16.0]) - 85.0).abs() < 1e-12);
        assert!(matches!(difference_penalty(3, 3), Err(BasisError::OrderTooLarge { .. })));
    }

    #[test]
    fn penalty_null_space_polynomials() {
        for order in 1..=3 {
            let p = difference_penalty(10, order).unwrap();
            for deg in 0..order {
                let beta: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3 - 1.0).powi(deg as i32)).collect();
                assert!(p.quadratic_form(&beta).abs() < 1e-12, "order {order} deg {deg}");
            }
            // rank k - order
            let eig = p.matrix.clone().symmetric_eigenvalues();
            assert_eq!(eig.iter().filter(|v| v.abs() < 1e-9).count(), order);
        }
    }

    #[test]
    fn tensor_rows() {
        assert_eq!(tensor_row(&[1.0, 0.0], &[0.0, 1.0]), vec![0.0, 1.0, 0.0, 0.0]);
        let bx = BasisDef::uniform(0.0, 1.0, 3, 2).unwrap().row(0.3);
        let by = BasisDef::uniform(0.0, 1.0, 4, 3).unwrap().row(0.8);
        let t = tensor_row(&bx, &by);
        assert_eq!(t.len(), 12);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(t[i * 4 + j], bx[i] * by[j]);
            }
        }
    }

    #[test]
    fn tensor_penalty_layout() {
        let sx = difference_penalty(3, 1).unwrap().matrix;
        let sy = difference_penalty(4, 2).unwrap().matrix;
        let (px, py) = tensor_penalties(&sx, &sy);
        assert_eq!(px.shape(), (12, 12));
        // coefficients constant along x (vary only in y) are unpenalised by px
        let beta: Vec<f64> = (0..12).map(|c| (c % 4) as f64).collect();
        assert!(quadratic_form(&px, &beta).abs() < 1e-12);
        // linear in y is unpenalised by py
        assert!(quadratic_form(&py, &beta).abs() < 1e-12);
    }

    #[test]
    fn varying_and_by_factor_rows() {
        let b = [0.2, 0.5, 0.3];
        assert_eq!(varying_coeff_row(&b, 0.0), vec![0.0; 3]);
        assert_eq!(varying_coeff_row(&b, 1.0), b.to_vec());
        assert!((varying_coeff_row(&b, 2.0).iter().sum::<f64>() - 2.0).abs() < 1e-15);
        assert_eq!(by_factor_row(&b, 0, 1).unwrap(), b.to_vec());
        assert_eq!(by_factor_row(&[1.0, 0.0], 1, 2).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(by_factor_row(&b, 2, 2), Err(BasisError::BadCategory { .. })));
        let r0 = by_factor_row(&b, 0, 3).unwrap();
        let r2 = by_factor_row(&b, 2, 3).unwrap();
        assert_eq!(r0.iter().zip(&r2).map(|(a, b)| a * b).sum::<f64>(), 0.0);
        assert!((r2.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    fn random_block(seed: u64, n: usize, k: usize) -> DMatrix<f64> {
        let basis = BasisDef::uniform(0.0, 1.0, k, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DMatrix::zeros(n, k);
        for i in 0..n {
            let r = basis.row(rng.gen::<f64>());
            for j in 0..k {
                m[(i, j)] = r[j];
            }
        }
        m
    }

    #[test]
    fn sum_to_zero_identical_rows() {
        let row = BasisDef::uniform(0.0, 1.0, 5, 3).unwrap().row(0.4);
        let block = DMatrix::from_fn(20, 5, |_, j| row[j]);
        let (c, _) = apply_sum_to_zero(&block).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sum_to_zero_centres_term_values() {
        for seed in 0..5 {
            let block = random_block(seed, 200, 8);
            let (c, t) = apply_sum_to_zero(&block).unwrap();
            for j in 0..7 {
                assert!(c.column(j).sum().abs() < 1e-10);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let beta_c: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let beta = t.expand(&beta_c);
            let vals = &block * nalgebra::DVector::from_vec(beta);
            assert!(vals.mean().abs() < 1e-10);
            // row-wise constraint agrees with the matrix product
            let r: Vec<f64> = block.row(3).iter().copied().collect();
            let cr = t.constrain_row(&r);
            for j in 0..7 {
                assert!((cr[j] - c[(3, j)]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn constrained_with_intercept_matches_unconstrained_fit() {
        // basis rows sum to one, so intercept + constrained block spans the
        // same column space as the raw block
        let block = random_block(42, 150, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = nalgebra::DVector::from_fn(150, |_, _| rng.gen::<f64>());
        let (c, _) = apply_sum_to_zero(&block).unwrap();
        let x_c = DMatrix::from_fn(150, 6, |i, j| if j == 0 { 1.0 } else { c[(i, j - 1)] });
        let fit = |x: &DMatrix<f64>| {
            let xtx = x.transpose() * x;
            let b = xtx.cholesky().unwrap().solve(&(x.transpose() * &y));
            x * b
        };
        let a = fit(&block);
        let b = fit(&x_c);
        assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn sum_to_zero_errors() {
        assert!(matches!(apply_sum_to_zero(&DMatrix::zeros(10, 3)), Err(BasisError::RankDeficient)));
        assert!(matches!(apply_sum_to_zero(&DMatrix::zeros(3, 3)), Err(BasisError::TooFewRows { .. })));
    }
}

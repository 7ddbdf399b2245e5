//! Small dense linear algebra for desk-scale plants.
//!
//! Everything here works on [`Mat`], a row-major dense matrix with at most
//! [`MAX_DIM`] rows and columns. The routines are deliberately small: a left
//! pseudo-inverse for tall input matrices, eigenvalues of matrices up to 4x4
//! through the characteristic polynomial, and a scaled-and-squared matrix
//! exponential used as an oracle for state transition matrices.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported row/column count.
pub const MAX_DIM: usize = 16;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(
            rows > 0 && cols > 0 && rows <= MAX_DIM && cols <= MAX_DIM,
            "matrix shape {rows}x{cols} outside 1..={MAX_DIM}"
        );
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = Self::zeros(entries.len(), entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            assert_eq!(row.len(), c, "ragged rows");
            m.data[i * c..(i + 1) * c].copy_from_slice(row);
        }
        m
    }

    /// Column vector from a slice.
    pub fn column(entries: &[f64]) -> Self {
        let mut m = Self::zeros(entries.len(), 1);
        m.data.copy_from_slice(entries);
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major view of the entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "dimension mismatch in mul_vec");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Transposed matrix-vector product `selfᵀ v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "dimension mismatch in tr_mul_vec");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "dimension mismatch in matmul");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Induced 1-norm (max column sum).
    pub fn norm1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Determinant by partial-pivot elimination.
    pub fn determinant(&self) -> f64 {
        assert!(self.is_square());
        let n = self.rows;
        let mut a = self.clone();
        let mut det = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a[(x, col)].abs().total_cmp(&a[(y, col)].abs()))
                .unwrap_or(col);
            if a[(pivot, col)] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                a.swap_rows(pivot, col);
                det = -det;
            }
            let p = a[(col, col)];
            det *= p;
            for r in col + 1..n {
                let factor = a[(r, col)] / p;
                for c in col..n {
                    let v = a[(col, c)];
                    a[(r, c)] -= factor * v;
                }
            }
        }
        det
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        for c in 0..self.cols {
            self.data.swap(a * self.cols + c, b * self.cols + c);
        }
    }

    /// Inverse by Gauss-Jordan with partial pivoting.
    pub fn inverse(&self) -> Result<Mat> {
        if !self.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "inverse of non-square {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let scale = self.max_abs();
        if scale == 0.0 {
            return Err(Error::SingularMatrix);
        }
        let mut a = self.clone();
        let mut inv = Mat::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a[(x, col)].abs().total_cmp(&a[(y, col)].abs()))
                .unwrap_or(col);
            if a[(pivot, col)].abs() <= 1e-12 * scale {
                return Err(Error::SingularMatrix);
            }
            a.swap_rows(pivot, col);
            inv.swap_rows(pivot, col);
            let p = a[(col, col)];
            for c in 0..n {
                a[(col, c)] /= p;
                inv[(col, c)] /= p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a[(r, col)];
                if factor == 0.0 {
                    continue;
                }
                for c in 0..n {
                    let av = a[(col, c)];
                    let iv = inv[(col, c)];
                    a[(r, c)] -= factor * av;
                    inv[(r, c)] -= factor * iv;
                }
            }
        }
        Ok(inv)
    }

    fn is_triangular(&self) -> bool {
        let n = self.rows;
        let upper = (0..n).all(|i| (0..i).all(|j| self[(i, j)] == 0.0));
        let lower = (0..n).all(|i| (i + 1..n).all(|j| self[(i, j)] == 0.0));
        upper || lower
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &Mat {
    type Output = Mat;
    fn add(self, rhs: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Mat {
    type Output = Mat;
    fn sub(self, rhs: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Neg for &Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

impl Mul for &Mat {
    type Output = Mat;
    fn mul(self, rhs: &Mat) -> Mat {
        self.matmul(rhs)
    }
}

impl fmt::Display for Mat {
    /// Rows on separate lines, entries to four decimals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:>9.4}")).collect();
            writeln!(f, "[{}]", row.join(" "))?;
        }
        Ok(())
    }
}

/// Complex scalar, used for eigenvalues.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexScalar {
    pub re: f64,
    pub im: f64,
}

impl ComplexScalar {
    pub const ZERO: Self = Self { re: 0.0, im: 0.0 };
    pub const ONE: Self = Self { re: 1.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn real(re: f64) -> Self {
        Self { re, im: 0.0 }
    }

    pub fn modulus(self) -> f64 {
        self.re.hypot(self.im)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.re * s, self.im * s)
    }

    pub fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

impl std::ops::Add for ComplexScalar {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }
}

impl std::ops::Sub for ComplexScalar {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im - o.im)
    }
}

impl std::ops::Mul for ComplexScalar {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

impl std::ops::Div for ComplexScalar {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        // Smith's algorithm
        if o.re.abs() >= o.im.abs() {
            let r = o.im / o.re;
            let d = o.re + o.im * r;
            Self::new((self.re + self.im * r) / d, (self.im - self.re * r) / d)
        } else {
            let r = o.re / o.im;
            let d = o.re * r + o.im;
            Self::new((self.re * r + self.im) / d, (self.im * r - self.re) / d)
        }
    }
}

impl fmt::Display for ComplexScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prec = f.precision().unwrap_or(4);
        if self.im == 0.0 {
            write!(f, "{:.*}", prec, self.re)
        } else if self.im > 0.0 {
            write!(f, "{:.*} + {:.*}i", prec, self.re, prec, self.im)
        } else {
            write!(f, "{:.*} - {:.*}i", prec, self.re, prec, -self.im)
        }
    }
}

/// Left pseudo-inverse `(gᵀg)⁻¹gᵀ` of a tall, full-column-rank matrix.
pub fn left_pseudo_inverse(g: &Mat) -> Result<Mat> {
    if g.rows() < g.cols() {
        return Err(Error::DimensionMismatch(format!(
            "left pseudo-inverse needs a tall matrix, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    let gt = g.transpose();
    let gram = gt.matmul(g);
    Ok(gram.inverse()?.matmul(&gt))
}

/// Characteristic polynomial coefficients `[1, c1, ..., cn]` of
/// `det(λI - A)` by Faddeev-LeVerrier.
pub fn characteristic_polynomial(a: &Mat) -> Vec<f64> {
    assert!(a.is_square());
    let n = a.rows();
    let mut coeffs = vec![1.0];
    let mut m = Mat::zeros(n, n);
    for k in 1..=n {
        // M_k = A M_{k-1} + c_{k-1} I, c_k = -tr(A M_k)/k
        let mut next = a.matmul(&m);
        let c_prev = coeffs[k - 1];
        for i in 0..n {
            next[(i, i)] += c_prev;
        }
        let ck = -a.matmul(&next).trace() / k as f64;
        coeffs.push(ck);
        m = next;
    }
    coeffs
}

fn poly_eval(coeffs: &[f64], z: ComplexScalar) -> ComplexScalar {
    coeffs
        .iter()
        .fold(ComplexScalar::ZERO, |acc, &c| acc * z + ComplexScalar::real(c))
}

fn poly_eval_with_derivative(coeffs: &[f64], z: ComplexScalar) -> (ComplexScalar, ComplexScalar) {
    let mut p = ComplexScalar::ZERO;
    let mut dp = ComplexScalar::ZERO;
    for &c in coeffs {
        dp = dp * z + p;
        p = p * z + ComplexScalar::real(c);
    }
    (p, dp)
}

/// Relative residual `|p(z)| / Σ|c_k||z|^k` of a candidate root.
pub fn relative_root_residual(coeffs: &[f64], z: ComplexScalar) -> f64 {
    let r = z.modulus();
    let denom = coeffs.iter().fold(0.0, |acc, c| acc * r + c.abs());
    let num = poly_eval(coeffs, z).modulus();
    if denom == 0.0 {
        num
    } else {
        num / denom
    }
}

/// Roots of a monic real polynomial by Aberth-Ehrlich iteration followed by
/// Newton polishing.
fn polynomial_roots(coeffs: &[f64]) -> Vec<ComplexScalar> {
    let n = coeffs.len() - 1;
    match n {
        0 => return Vec::new(),
        1 => return vec![ComplexScalar::real(-coeffs[1])],
        _ => {}
    }
    // Cauchy bound on root moduli.
    let bound = 1.0 + coeffs[1..].iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let mut roots: Vec<ComplexScalar> = (0..n)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / n as f64 + 0.4;
            ComplexScalar::new(0.5 * bound * angle.cos(), 0.5 * bound * angle.sin())
        })
        .collect();

    for _ in 0..500 {
        let mut max_step = 0.0_f64;
        for i in 0..n {
            let (p, dp) = poly_eval_with_derivative(coeffs, roots[i]);
            if p.modulus() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let mut repulsion = ComplexScalar::ZERO;
            for j in 0..n {
                if j != i {
                    let diff = roots[i] - roots[j];
                    if diff.modulus() > 0.0 {
                        repulsion = repulsion + ComplexScalar::ONE / diff;
                    }
                }
            }
            let denom = ComplexScalar::ONE - ratio * repulsion;
            let step = if denom.modulus() > 0.0 { ratio / denom } else { ratio };
            if step.is_finite() {
                roots[i] = roots[i] - step;
                max_step = max_step.max(step.modulus() / (1.0 + roots[i].modulus()));
            }
        }
        if max_step < 1e-16 {
            break;
        }
    }

    for root in roots.iter_mut() {
        for _ in 0..5 {
            let (p, dp) = poly_eval_with_derivative(coeffs, *root);
            if dp.modulus() == 0.0 {
                break;
            }
            let step = p / dp;
            let candidate = *root - step;
            if !candidate.is_finite()
                || relative_root_residual(coeffs, candidate) > relative_root_residual(coeffs, *root)
            {
                break;
            }
            *root = candidate;
        }
        let mag = 1.0 + root.re.abs();
        if root.im.abs() <= 1e-13 * mag {
            root.im = 0.0;
        }
    }
    roots
}

/// Eigenvalues (with multiplicity) of a square matrix of size at most 4.
///
/// Triangular matrices return their diagonal. Otherwise the matrix is shifted
/// by its mean diagonal entry, the characteristic polynomial of the shifted
/// matrix is solved, and the shift is added back; the shift keeps clustered
/// spectra near the shift (monodromy matrices near `I`) well resolved.
pub fn eigenvalues(m: &Mat) -> Result<Vec<ComplexScalar>> {
    if !m.is_square() || m.rows() > 4 {
        return Err(Error::DimensionMismatch(format!(
            "eigenvalues supports square matrices up to 4x4, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("matrix entries".into()));
    }
    if m.is_triangular() {
        return Ok((0..m.rows()).map(|i| ComplexScalar::real(m[(i, i)])).collect());
    }
    let n = m.rows();
    let shift = m.trace() / n as f64;
    let mut shifted = m.clone();
    for i in 0..n {
        shifted[(i, i)] -= shift;
    }
    let coeffs = characteristic_polynomial(&shifted);
    Ok(polynomial_roots(&coeffs)
        .into_iter()
        .map(|z| ComplexScalar::new(z.re + shift, z.im))
        .collect())
}

/// Sorts eigenvalues by descending modulus, breaking ties by real part.
pub fn sort_by_modulus_desc(values: &mut [ComplexScalar]) {
    values.sort_by(|a, b| {
        b.modulus()
            .total_cmp(&a.modulus())
            .then(b.re.total_cmp(&a.re))
            .then(b.im.total_cmp(&a.im))
    });
}

/// `exp(A t)` by scaling and squaring of a truncated Taylor series.
pub fn matrix_exponential(a: &Mat, t: f64) -> Mat {
    assert!(a.is_square(), "matrix exponential of non-square matrix");
    let n = a.rows();
    let at = a.scale(t);
    let norm = at.norm1();
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = at.scale(0.5_f64.powi(squarings as i32));
    // With ‖X‖ ≤ 1/2, 20 terms leave a remainder below 1e-23.
    let mut result = Mat::identity(n);
    let mut term = Mat::identity(n);
    for k in 1..=20 {
        term = term.matmul(&scaled).scale(1.0 / k as f64);
        result = &result + &term;
    }
    for _ in 0..squarings {
        result = result.matmul(&result);
    }
    result
}

/// Mixed tolerance comparison `|a - b| <= max(atol, rtol |b|)`.
pub fn close(a: f64, b: f64, atol: f64, rtol: f64) -> bool {
    (a - b).abs() <= atol.max(rtol * b.abs())
}

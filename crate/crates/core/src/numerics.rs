//! Dense double-precision kernels shared by the model and the optimizer.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. Matrices are row-major and
//! masks are boolean matrices of the same shape; masked products never read
//! the weight stored under a `false` entry.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("matrix {rows}x{cols} needs {} entries, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// Column vector (n x 1), the storage used for biases.
    pub fn column(v: Vec<f64>) -> Self {
        Self { rows: v.len(), cols: 1, data: v }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Matrix, alpha: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    /// Accumulates the outer product `u v^T` into `self`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!((self.rows, self.cols), (u.len(), v.len()));
        for (r, &ur) in u.iter().enumerate() {
            if ur == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &vc) in row.iter_mut().zip(v) {
                *w += ur * vc;
            }
        }
    }

    /// Zeroes every entry whose mask bit is false.
    pub fn apply_mask(&mut self, mask: &Mask) {
        debug_assert_eq!(self.shape(), mask.shape());
        for (v, &keep) in self.data.iter_mut().zip(&mask.bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

/// Boolean connectivity matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn falses(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn trues(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![true; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape(format!("mask {rows}x{cols} got {} bits", bits.len())));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when row `r` has at least one open entry.
    pub fn row_any(&self, r: usize) -> bool {
        self.bits[r * self.cols..(r + 1) * self.cols].iter().any(|&b| b)
    }

    pub fn transpose(&self) -> Mask {
        let mut t = Mask::falses(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.bits[c * self.rows + r] = self.bits[r * self.cols + c];
            }
        }
        t
    }

    pub fn and(&self, other: &Mask) -> Mask {
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        Mask { rows: self.rows, cols: self.cols, bits }
    }
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!("{what}: expected length {expected}, got {got}")));
    }
    Ok(())
}

/// Plain matrix-vector product.
pub fn matvec(w: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    check_len("matvec input", w.cols, x.len())?;
    Ok((0..w.rows).map(|r| dot(w.row(r), x)).collect())
}

/// `W^T g`, used to route gradients backwards through a product.
pub fn matvec_t(w: &Matrix, g: &[f64]) -> Result<Vec<f64>> {
    check_len("transposed matvec input", w.rows, g.len())?;
    let mut out = vec![0.0; w.cols];
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(r)) {
            *o += wv * gr;
        }
    }
    Ok(out)
}

/// `W x + b`.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len("affine bias", w.rows, b.len())?;
    let mut out = matvec(w, x)?;
    for (o, bv) in out.iter_mut().zip(b) {
        *o += bv;
    }
    Ok(out)
}

/// `(W ⊙ mask) x`. Entries under a false mask bit contribute exactly zero.
pub fn masked_matvec(w: &Matrix, mask: &Mask, x: &[f64]) -> Result<Vec<f64>> {
    if w.shape() != mask.shape() {
        return Err(Error::Shape(format!("weight {:?} and mask {:?} differ", w.shape(), mask.shape())));
    }
    check_len("masked matvec input", w.cols, x.len())?;
    Ok((0..w.rows)
        .map(|r| {
            let bits = &mask.bits[r * w.cols..(r + 1) * w.cols];
            w.row(r).iter().zip(bits).zip(x).fold(0.0, |acc, ((&wv, &keep), &xv)| if keep { acc + wv * xv } else { acc })
        })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Logistic function, evaluated in the branch that never exponentiates a
/// positive argument.
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn relu_scalar(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

pub fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| relu_scalar(v)).collect()
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Rescales all tensors so their joint L2 norm is at most `threshold`.
/// Returns the factor that was applied (1.0 when no clipping happened).
pub fn clip_global_norm<'a, I>(grads: I, threshold: f64) -> f64
where
    I: IntoIterator<Item = &'a mut Matrix>,
{
    assert!(threshold > 0.0, "clip threshold must be positive");
    let mut grads: Vec<&mut Matrix> = grads.into_iter().collect();
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for g in grads.iter_mut() {
            g.scale(scale);
        }
        scale
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn affine_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(affine(&Matrix::identity(3), &x, &[0.0; 3]).unwrap(), vec![1.0, 2.0, 3.0]);

        let w = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 2.0]]).unwrap();
        assert_eq!(affine(&w, &[3.0, 4.0], &[1.0, 0.0]).unwrap(), vec![8.0, 8.0]);

        let z = Matrix::zeros(2, 2);
        assert_eq!(affine(&z, &[-9.0, 4.5], &[5.0, 6.0]).unwrap(), vec![5.0, 6.0]);
    }

    #[test]
    fn affine_rejects_bad_shapes() {
        let w = Matrix::zeros(2, 3);
        assert!(affine(&w, &[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(affine(&w, &[1.0, 2.0, 3.0], &[0.0]).is_err());
    }

    #[test]
    fn masked_matvec_examples() {
        let w = Matrix::from_rows(&[&[7.0, 2.0], &[3.0, 4.0]]).unwrap();
        let diag = Mask::from_vec(2, 2, vec![true, false, false, true]).unwrap();
        assert_eq!(masked_matvec(&w, &diag, &[1.0, 1.0]).unwrap(), vec![7.0, 4.0]);
        assert_eq!(masked_matvec(&w, &Mask::falses(2, 2), &[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(masked_matvec(&w, &Mask::trues(2, 2), &[0.5, -1.0]).unwrap(), matvec(&w, &[0.5, -1.0]).unwrap());
        assert!(masked_matvec(&w, &Mask::trues(2, 3), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn masked_entries_ignore_stored_value() {
        let w = Matrix::from_rows(&[&[f64::MAX, 1.0]]).unwrap();
        let m = Mask::from_vec(1, 2, vec![false, true]).unwrap();
        assert_eq!(masked_matvec(&w, &m, &[1e300, 2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(relu_scalar(-3.2), 0.0);
        assert_eq!(relu_scalar(1.5), 1.5);
        let tiny = sigmoid_scalar(-40.0);
        // e^-40 = 4.248354255291589e-18
        assert!(tiny > 0.0 && tiny < 1e-17);
        assert!((tiny - 4.248354255291589e-18).abs() < 1e-30);
        for z in [-40.0, -5.0, -0.3, 0.0, 0.7, 12.0, 40.0] {
            assert!((sigmoid_scalar(z) + sigmoid_scalar(-z) - 1.0).abs() <= 1e-15);
        }
        assert_eq!(sigmoid_scalar(-800.0), 0.0);
        assert_eq!(sigmoid_scalar(800.0), 1.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn clip_examples() {
        let mut g = Matrix::column(vec![30.0, 40.0]);
        let s = clip_global_norm([&mut g], 25.0);
        assert_eq!(s, 0.5);
        assert_eq!(g.as_slice(), &[15.0, 20.0]);

        let mut g = Matrix::column(vec![6.0, 8.0]);
        assert_eq!(clip_global_norm([&mut g], 25.0), 1.0);
        assert_eq!(g.as_slice(), &[6.0, 8.0]);

        let mut z = Matrix::zeros(3, 2);
        assert_eq!(clip_global_norm([&mut z], 25.0), 1.0);
    }

    fn arb_problem() -> impl Strategy<Value = (Matrix, Mask, Vec<f64>)> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            (
                proptest::collection::vec(-10.0f64..10.0, r * c),
                proptest::collection::vec(any::<bool>(), r * c),
                proptest::collection::vec(-10.0f64..10.0, c),
            )
                .prop_map(move |(w, m, x)| (Matrix::from_vec(r, c, w).unwrap(), Mask::from_vec(r, c, m).unwrap(), x))
        })
    }

    proptest! {
        #[test]
        fn masked_equals_affine_of_hadamard((w, m, x) in arb_problem()) {
            let mut wm = w.clone();
            wm.apply_mask(&m);
            let zero = vec![0.0; w.rows()];
            prop_assert_eq!(masked_matvec(&w, &m, &x).unwrap(), affine(&wm, &x, &zero).unwrap());
        }

        #[test]
        fn sigmoid_monotone_bounded(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(sigmoid_scalar(lo) <= sigmoid_scalar(hi));
            let s = sigmoid_scalar(a);
            prop_assert!((0.0..=1.0).contains(&s));
            // strictly inside while 1 - s is still representable
            if a.abs() < 36.0 { prop_assert!(s > 0.0 && s < 1.0); }
            prop_assert!(relu_scalar(a) >= 0.0);
            if a >= 0.0 { prop_assert_eq!(relu_scalar(a), a); }
        }

        #[test]
        fn clip_bounds_norm_and_keeps_direction(
            v in proptest::collection::vec(-100.0f64..100.0, 1..20),
            th in 0.01f64..50.0,
        ) {
            let orig = v.clone();
            let mut g = Matrix::column(v);
            let s = clip_global_norm([&mut g], th);
            prop_assert!(g.sum_sq().sqrt() <= th + 1e-9);
            prop_assert!(s > 0.0 && s <= 1.0);
            for (a, b) in g.as_slice().iter().zip(&orig) {
                prop_assert_eq!(*a, b * s);
            }
        }
    }
}

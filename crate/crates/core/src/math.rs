//! Dense numerical primitives shared by every differentiable module.
//!
//! Everything is `f64`. Matrices are row-major with fixed dimensions; the
//! model code only needs matrix-vector products, so there is no general
//! broadcasting here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are rejected by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

pub type Rng64 = ChaCha8Rng;

/// Seeded generator for a named stream.
///
/// The base seed and stream ids are mixed with SplitMix64 and fed to ChaCha8,
/// a counter-based generator whose output is identical on every platform.
pub fn seeded_rng(seed: u64, stream: &[u64]) -> Rng64 {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ 0x6a09_e667_f3bc_c908);
    for &s in stream {
        state = splitmix64(state ^ splitmix64(s.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    state
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidShape(format!("non-finite entry at {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Appends a row. Fails if the length is wrong.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() || n <= EPS_NORM {
        return Err(Error::DegenerateNorm { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Vector-Jacobian product of [`l2_normalize`]: `(I − uuᵀ) g / ‖v‖`.
pub fn l2_normalize_backward(unit: &[f64], input_norm: f64, upstream: &[f64]) -> Vec<f64> {
    let proj = dot(unit, upstream);
    unit.iter()
        .zip(upstream)
        .map(|(u, g)| (g - proj * u) / input_norm)
        .collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// `rows × cols` matrix with entries uniform on `[−L, L]`,
/// `L = √(6 / (fan_in + fan_out))`, taking `fan_in = cols` and `fan_out = rows`.
pub fn xavier_uniform(rows: usize, cols: usize, seed: u64) -> Result<Matrix> {
    let mut rng = seeded_rng(seed, &[]);
    xavier_uniform_with(rows, cols, &mut rng)
}

pub fn xavier_uniform_with(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidShape(format!(
            "xavier init needs nonzero fans, got {rows}x{cols}"
        )));
    }
    let limit = xavier_limit(rows, cols);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Ok(Matrix { rows, cols, data })
}

pub fn xavier_limit(fan_out: usize, fan_in: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let u = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateNorm { .. })
        ));
        assert!(l2_normalize(&[1e-13, 0.0]).is_err());
    }

    #[test]
    fn normalize_gradient_at_three_four() {
        let upstream = [1.0, 0.0];
        let f = |v: &[f64]| Ok(dot(&l2_normalize(v)?, &upstream));
        let v = [3.0, 4.0];
        let u = l2_normalize(&v).unwrap();
        let analytic = l2_normalize_backward(&u, norm(&v), &upstream);
        let report = grad_check(f, &v, &analytic, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
        // (I - uu^T) e1 / 5 = [1 - 0.36, -0.48] / 5
        assert!((analytic[0] - 0.128).abs() < 1e-15);
        assert!((analytic[1] + 0.096).abs() < 1e-15);
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let m = xavier_uniform(4, 6, 7).unwrap();
        let limit = (6.0f64 / 10.0).sqrt();
        assert!((limit - 0.7746).abs() < 1e-4);
        assert!(m.as_slice().iter().all(|v| v.abs() <= limit));
        let again = xavier_uniform(4, 6, 7).unwrap();
        assert_eq!(
            m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(m, xavier_uniform(4, 6, 8).unwrap());
        assert!(matches!(
            xavier_uniform(0, 3, 1),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn xavier_mean_within_three_sigma() {
        let m = xavier_uniform(100, 100, 42).unwrap();
        let limit = xavier_limit(100, 100);
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let std_err = limit / (3.0 * n).sqrt();
        assert!(mean.abs() < 3.0 * std_err, "mean {mean}, se {std_err}");
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.9, 0.9]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn seeds_separate_streams() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert_eq!(derive_seed(5, &[3, 4]), derive_seed(5, &[3, 4]));
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 2..12).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn normalize_is_unit_and_idempotent(v in nonzero_vec()) {
            let u = l2_normalize(&v).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() <= 1e-12);
            let uu = l2_normalize(&u).unwrap();
            for (a, b) in u.iter().zip(&uu) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalize_positive_scale_invariant(v in nonzero_vec(), alpha in 1e-3f64..1e3) {
            let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
            let a = l2_normalize(&v).unwrap();
            let b = l2_normalize(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn unit_distance_identity(a in nonzero_vec(), b in nonzero_vec()) {
            let d = a.len().min(b.len());
            let u = l2_normalize(&a[..d]).ok();
            let v = l2_normalize(&b[..d]).ok();
            if let (Some(u), Some(v)) = (u, v) {
                let lhs = squared_distance(&u, &v);
                let rhs = 2.0 - 2.0 * dot(&u, &v);
                prop_assert!((lhs - rhs).abs() <= 1e-12);
            }
        }
    }
}

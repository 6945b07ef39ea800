//! Dense linear algebra helpers not covered directly by nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Cholesky factorization restricted to the envelope (skyline) of a symmetric
/// positive definite matrix. Entries left of each row's first non-zero stay zero
/// in the factor, so banded or block-banded systems factor in near-linear time.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    first: Vec<usize>,
    l: DMatrix<f64>,
}

impl EnvelopeCholesky {
    /// Factors the lower triangle of `a`. Returns `None` if a pivot is not positive.
    pub fn factor(a: &DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "matrix must be square");
        let first: Vec<usize> = (0..n)
            .map(|i| (0..i).find(|&j| a[(i, j)] != 0.0).unwrap_or(i))
            .collect();
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in first[i]..=i {
                let start = first[i].max(first[j]);
                let mut sum = a[(i, j)];
                for k in start..j {
                    sum -= l[(i, k)] * l[(j, k)];
                }
                if j == i {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return None;
                    }
                    l[(i, i)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Some(Self { n, first, l })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut y = b.clone();
        for i in 0..n {
            let mut sum = y[i];
            for k in self.first[i]..i {
                sum -= self.l[(i, k)] * y[k];
            }
            y[i] = sum / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let yi = y[i] / self.l[(i, i)];
            y[i] = yi;
            for k in self.first[i]..i {
                y[k] -= self.l[(i, k)] * yi;
            }
        }
        y
    }

    /// Number of stored entries in the lower envelope.
    pub fn envelope_size(&self) -> usize {
        self.first.iter().enumerate().map(|(i, &f)| i - f + 1).sum()
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
pub fn sorted_symmetric_eigen(a: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Median of a slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

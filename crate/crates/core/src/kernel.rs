//! Binary-tree and squared-exponential kernels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::partition::{CellId, PartitionScheme, StateBox};
use crate::real::Real;

/// Binary-tree kernel `k(x, x') = sum_i w_i 1(prefix_i(x) = prefix_i(x'))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BtRepr<T>", into = "BtRepr<T>")]
#[serde(bound = "T: Real")]
pub struct BtKernel<T> {
    scheme: PartitionScheme<T>,
    weights: Vec<T>,
    roots: Vec<T>,
    /// `cum[l]` is the kernel value of two cells sharing exactly `l` leading bits.
    cum: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct BtRepr<T> {
    scheme: PartitionScheme<T>,
    weights: Vec<T>,
}

impl<T: Real> TryFrom<BtRepr<T>> for BtKernel<T> {
    type Error = Error;
    fn try_from(r: BtRepr<T>) -> Result<Self> {
        BtKernel::new(r.scheme, r.weights)
    }
}

impl<T: Real> From<BtKernel<T>> for BtRepr<T> {
    fn from(k: BtKernel<T>) -> Self {
        BtRepr {
            scheme: k.scheme,
            weights: k.weights,
        }
    }
}

impl<T: Real> BtKernel<T> {
    /// Weights are renormalized to sum to one; negative or all-zero
    /// weights are rejected.
    pub fn new(scheme: PartitionScheme<T>, weights: Vec<T>) -> Result<Self> {
        let q = scheme.precision();
        if weights.len() != q {
            return Err(Error::invalid(format!("expected {q} weights, got {}", weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::invalid("kernel weights must be finite and nonnegative"));
        }
        let total: T = weights.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(Error::invalid("kernel weights sum to zero"));
        }
        let weights: Vec<T> = weights.into_iter().map(|w| w / total).collect();
        let roots: Vec<T> = weights.iter().map(|w| w.sqrt()).collect();
        let mut cum = Vec::with_capacity(q + 1);
        let mut acc = T::zero();
        cum.push(acc);
        for &r in &roots {
            // products of the stored roots, so feature-map dot products
            // reproduce these sums exactly
            acc += r * r;
            cum.push(acc);
        }
        Ok(BtKernel {
            scheme,
            weights,
            roots,
            cum,
        })
    }

    /// Uniform weights `1/q`.
    pub fn uniform(scheme: PartitionScheme<T>) -> Result<Self> {
        let q = scheme.precision();
        BtKernel::new(scheme, vec![T::one(); q])
    }

    pub fn scheme(&self) -> &PartitionScheme<T> {
        &self.scheme
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn precision(&self) -> usize {
        self.scheme.precision()
    }

    /// Kernel value for two cells sharing `l` leading bits.
    #[inline]
    pub fn cumulative(&self, l: usize) -> T {
        self.cum[l]
    }

    /// Prior variance `k(x, x)`.
    #[inline]
    pub fn diagonal(&self) -> T {
        self.cum[self.precision()]
    }

    #[inline]
    pub fn eval_cells(&self, s: &CellId, t: &CellId) -> T {
        self.cum[s.common_prefix_len(t)]
    }

    pub fn eval(&self, x: &[T], y: &[T]) -> Result<T> {
        let s = self.scheme.encode(x)?;
        let t = self.scheme.encode(y)?;
        Ok(self.eval_cells(&s, &t))
    }

    /// Length of the explicit feature vector, `sum_i 2^i`.
    pub fn feature_dim(&self) -> usize {
        (1usize << (self.precision() + 1)) - 2
    }

    /// Explicit feature vector: entry `(i, s)` is `sqrt(w_i)` when `x` lies
    /// in the level-`i` cell `s`. Levels are stored consecutively, strings
    /// in integer order within a level.
    pub fn feature_map(&self, x: &[T]) -> Result<Vec<T>> {
        let s = self.scheme.encode(x)?;
        let mut phi = vec![T::zero(); self.feature_dim()];
        for i in 1..=self.precision() {
            phi[(1usize << i) - 2 + s.prefix(i).index()] = self.roots[i - 1];
        }
        Ok(phi)
    }

    pub fn gram<P: AsRef<[T]> + Sync>(&self, points: &[P]) -> Result<Mat<T>> {
        let cells = points
            .iter()
            .map(|p| self.scheme.encode(p.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.gram_cells(&cells))
    }

    pub fn gram_cells(&self, cells: &[CellId]) -> Mat<T> {
        let n = cells.len();
        let rows: Vec<Vec<T>> = cells
            .par_iter()
            .map(|a| cells.iter().map(|b| self.eval_cells(a, b)).collect())
            .collect();
        Mat::from_vec(n, n, rows.into_iter().flatten().collect())
    }

    /// Evaluates `f(x) = sum_i w_i sum_{s in B^i} y_s 1(x in cell s)`.
    pub fn eval_expansion(&self, coeffs: &BtCoefficients<T>, x: &[T]) -> Result<T> {
        coeffs.check(self.precision())?;
        let s = self.scheme.encode(x)?;
        let mut acc = T::zero();
        for i in 1..=self.precision() {
            acc += self.weights[i - 1] * coeffs.levels[i - 1][s.prefix(i).index()];
        }
        Ok(acc)
    }

    /// Upper bound `sqrt(sum_i w_i sum_s y_s^2)` on the RKHS norm of the
    /// expansion evaluated by [`BtKernel::eval_expansion`].
    pub fn norm_bound(&self, coeffs: &BtCoefficients<T>) -> Result<T> {
        coeffs.check(self.precision())?;
        Ok(rkhs_norm_bound(&self.weights, coeffs))
    }
}

/// Coefficients `y_s` for every string `s` of length `1..=q`; level `i`
/// holds `2^i` values in integer order.
#[derive(Clone, Debug, PartialEq)]
pub struct BtCoefficients<T> {
    pub levels: Vec<Vec<T>>,
}

impl<T: Real> BtCoefficients<T> {
    pub fn zeros(q: usize) -> Self {
        BtCoefficients {
            levels: (1..=q).map(|i| vec![T::zero(); 1 << i]).collect(),
        }
    }

    /// Coefficients of the kernel expansion `sum_j alpha_j k(., z_j)`:
    /// `y_s` is the sum of the `alpha_j` whose centers fall in cell `s`.
    pub fn from_expansion(scheme: &PartitionScheme<T>, alphas: &[T], centers: &[CellId]) -> Self {
        let q = scheme.precision();
        let mut c = BtCoefficients::zeros(q);
        for (&a, z) in alphas.iter().zip(centers) {
            for i in 1..=q {
                c.levels[i - 1][z.prefix(i).index()] += a;
            }
        }
        c
    }

    fn check(&self, q: usize) -> Result<()> {
        if self.levels.len() != q || self.levels.iter().enumerate().any(|(i, l)| l.len() != 2 << i) {
            return Err(Error::invalid("coefficient table does not match the kernel precision"));
        }
        Ok(())
    }
}

/// `sqrt(sum_i w_i sum_{s in B^i} y_s^2)`.
pub fn rkhs_norm_bound<T: Real>(weights: &[T], coeffs: &BtCoefficients<T>) -> T {
    weights
        .iter()
        .zip(&coeffs.levels)
        .map(|(&w, level)| w * level.iter().map(|&y| y * y).sum::<T>())
        .sum::<T>()
        .sqrt()
}

/// Squared-exponential kernel `c^2 exp(-1/2 sum_d (x_d - x'_d)^2 / l_d^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SeKernel<T> {
    amplitude: T,
    lengthscales: Vec<T>,
}

impl<T: Real> SeKernel<T> {
    pub fn new(amplitude: T, lengthscales: Vec<T>) -> Result<Self> {
        if !(amplitude.is_finite() && amplitude > T::zero()) {
            return Err(Error::invalid(format!("SE amplitude must be positive, got {amplitude}")));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(l.is_finite() && *l > T::zero())) {
            return Err(Error::invalid("SE lengthscales must be positive"));
        }
        Ok(SeKernel {
            amplitude,
            lengthscales,
        })
    }

    pub fn amplitude(&self) -> T {
        self.amplitude
    }

    pub fn lengthscales(&self) -> &[T] {
        &self.lengthscales
    }

    /// `c^2`, the kernel's maximum.
    pub fn variance(&self) -> T {
        self.amplitude * self.amplitude
    }

    #[inline]
    pub fn eval(&self, x: &[T], y: &[T]) -> T {
        debug_assert_eq!(x.len(), self.lengthscales.len());
        let mut r2 = T::zero();
        for d in 0..x.len() {
            let u = (x[d] - y[d]) / self.lengthscales[d];
            r2 += u * u;
        }
        self.variance() * (-r2 / T::lit(2.0)).exp()
    }

    pub fn gram<P: AsRef<[T]> + Sync>(&self, points: &[P]) -> Mat<T> {
        self.cross(points, points)
    }

    /// `[k(a_i, b_j)]_{ij}`.
    pub fn cross<P: AsRef<[T]> + Sync, Q: AsRef<[T]> + Sync>(&self, a: &[P], b: &[Q]) -> Mat<T> {
        let rows: Vec<Vec<T>> = a
            .par_iter()
            .map(|x| b.iter().map(|y| self.eval(x.as_ref(), y.as_ref())).collect())
            .collect();
        Mat::from_vec(a.len(), b.len(), rows.into_iter().flatten().collect())
    }

    /// Infimum of `k(x_s, .)` over a cell containing `x_s`; attained at the
    /// farthest corner.
    pub fn cell_inf(&self, x_s: &[T], cell: &StateBox<T>) -> T {
        let far: Vec<T> = (0..x_s.len())
            .map(|d| {
                let (lo, hi) = (cell.lower()[d], cell.upper()[d]);
                if (x_s[d] - lo).abs() >= (hi - x_s[d]).abs() {
                    lo
                } else {
                    hi
                }
            })
            .collect();
        self.eval(x_s, &far)
    }
}

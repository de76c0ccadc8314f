//! Per-cell error radii between the BTGP posterior mean and a true
//! dynamics function of bounded norm in a squared-exponential RKHS.
//!
//! `eps_d(s) = eps1 + eps2 + eps3`, where `eps1` bounds the noise
//! contribution, `eps2` the variation of the true function inside the cell
//! and `eps3` the bias of the regression weights against the true kernel.
//! Everything is evaluated on the aggregated data: the full-data regression
//! weights of a sample in cell `c` are `a_c / m_c`, with `a = C^{-1} k(s)`
//! the aggregated weights.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{BtgpModel, Dataset, PosteriorSolve};
use crate::kernel::{BtKernel, SeKernel};
use crate::linalg::{symmetric_eigenvalues, Mat};
use crate::partition::CellId;
use crate::real::Real;

/// Largest sample count handled by the dense true-kernel path.
pub const DEFAULT_DENSE_CAP: usize = 20_000;

/// Which noise bound enters `eps1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eps1Branch {
    /// Cauchy-Schwarz on the regression weights.
    TermA,
    /// Self-normalized bound through the spectrum of `K (K + s^2 I)^{-1}`.
    TermB,
    /// Smaller of the two; costs a union bound in the confidence.
    Min,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ErrorConfig<T> {
    pub delta: T,
    /// Norm bounds `B_d`, one per output dimension.
    pub bounds: Vec<T>,
    /// True kernels, one per output dimension.
    pub kernels: Vec<SeKernel<T>>,
    pub branch: Eps1Branch,
    /// Multiply both noise terms by `sigma_v` (sub-Gaussian constant of the
    /// noise). Off by default; the unscaled terms assume unit noise scale.
    pub scale_noise: bool,
    pub dense_cap: usize,
    /// Above `dense_cap`, estimate the true-kernel averages from a uniform
    /// subsample instead of failing. The result is flagged as heuristic.
    pub subsample: bool,
    pub seed: u64,
}

impl<T: Real> ErrorConfig<T> {
    pub fn new(delta: T, bounds: Vec<T>, kernels: Vec<SeKernel<T>>) -> Result<Self> {
        let cfg = ErrorConfig {
            delta,
            bounds,
            kernels,
            branch: Eps1Branch::Min,
            scale_noise: false,
            dense_cap: DEFAULT_DENSE_CAP,
            subsample: false,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > T::zero() && self.delta < T::one()) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.bounds.iter().any(|b| !(b.is_finite() && *b >= T::zero())) {
            return Err(Error::invalid("norm bounds must be finite and nonnegative"));
        }
        if self.bounds.len() != self.kernels.len() {
            return Err(Error::invalid(format!(
                "{} norm bounds but {} kernels",
                self.bounds.len(),
                self.kernels.len()
            )));
        }
        Ok(())
    }

    /// Reported confidence `1 - kappa n delta`.
    pub fn confidence(&self) -> T {
        let kappa = if self.branch == Eps1Branch::Min { 2 } else { 1 };
        T::one() - T::from_count(kappa * self.bounds.len()) * self.delta
    }
}

/// `sqrt(N + 2 sqrt(N ln(1/delta)) + 2 ln(1/delta))`.
pub fn term_a_radical<T: Real>(n: usize, delta: T) -> T {
    let t = (T::one() / delta).ln();
    let n = T::from_count(n);
    let two = T::lit(2.0);
    (n + two * (n * t).sqrt() + two * t).sqrt()
}

/// Trace, trace of the square and spectral norm of `K (K + s^2 I)^{-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SpectrumStats<T> {
    pub trace: T,
    pub trace_sq: T,
    pub norm: T,
}

impl<T: Real> SpectrumStats<T> {
    /// From eigenvalues of the (uncompressed) Gram matrix.
    pub fn from_gram_eigenvalues(eigs: &[T], noise_var: T) -> Self {
        let mut st = SpectrumStats {
            trace: T::zero(),
            trace_sq: T::zero(),
            norm: T::zero(),
        };
        for &l in eigs {
            let l = l.max(T::zero());
            let r = l / (l + noise_var);
            st.trace += r;
            st.trace_sq += r * r;
            st.norm = st.norm.max(r);
        }
        st
    }

    /// `sqrt(tr S + 2 sqrt(tr(S^2) ln(1/delta)) + 2 ||S|| ln(1/delta))`.
    pub fn radical(&self, delta: T) -> T {
        let t = (T::one() / delta).ln();
        let two = T::lit(2.0);
        (self.trace + two * (self.trace_sq * t).sqrt() + two * self.norm * t).sqrt()
    }
}

/// Spectrum statistics from the compressed matrix `D^{1/2} K_cells D^{1/2}`,
/// `D = diag(m_c)`, whose nonzero eigenvalues are those of the full Gram.
pub fn spectrum_stats<T: Real>(kernel: &BtKernel<T>, cells: &[CellId], counts: &[usize], noise_std: T) -> Result<SpectrumStats<T>> {
    let mut g = kernel.gram_cells(cells);
    let root: Vec<T> = counts.iter().map(|&m| T::from_count(m).sqrt()).collect();
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            g[(i, j)] = g[(i, j)] * root[i] * root[j];
        }
    }
    let eigs = symmetric_eigenvalues(&g).ok_or_else(|| Error::NumericalFailure("eigenvalue iteration did not converge".into()))?;
    Ok(SpectrumStats::from_gram_eigenvalues(&eigs, noise_std * noise_std))
}

/// Spectrum statistics from the raw `N x N` Gram matrix.
pub fn spectrum_stats_dense<T: Real>(kernel: &BtKernel<T>, data: &Dataset<T>) -> Result<SpectrumStats<T>> {
    let pts: Vec<&[T]> = (0..data.len()).map(|i| data.input(i)).collect();
    let g = kernel.gram(&pts)?;
    let eigs = symmetric_eigenvalues(&g).ok_or_else(|| Error::NumericalFailure("eigenvalue iteration did not converge".into()))?;
    Ok(SpectrumStats::from_gram_eigenvalues(&eigs, data.noise_std() * data.noise_std()))
}

/// `B sqrt(2 (c^2 - inf_{x in cell} k(x_s, x)))` with `x_s` the cell center.
pub fn eps2_value<T: Real>(bound: T, kernel: &SeKernel<T>, center: &[T], cell: &crate::partition::StateBox<T>) -> T {
    let gap = (kernel.variance() - kernel.cell_inf(center, cell)).max(T::zero());
    bound * (T::lit(2.0) * gap).sqrt()
}

/// Error radii with their components, `2^q x n` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ErrorTable<T> {
    pub precision: usize,
    pub eps1: Vec<Vec<T>>,
    pub eps2: Vec<Vec<T>>,
    pub eps3: Vec<Vec<T>>,
    pub eps: Vec<Vec<T>>,
    pub confidence: T,
    pub branch: Eps1Branch,
    /// Set when `eps3` was estimated from a subsample.
    pub heuristic: bool,
}

impl<T: Real> ErrorTable<T> {
    /// Table with the same radius `eps` in every cell and dimension, mostly
    /// for tests and hand-built abstractions.
    pub fn constant(precision: usize, n: usize, eps: T, confidence: T) -> Self {
        let rows = vec![vec![eps; n]; 1 << precision];
        let zeros = vec![vec![T::zero(); n]; 1 << precision];
        ErrorTable {
            precision,
            eps1: rows.clone(),
            eps2: zeros.clone(),
            eps3: zeros,
            eps: rows,
            confidence,
            branch: Eps1Branch::Min,
            heuristic: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.eps.first().map_or(0, |r| r.len())
    }

    #[inline]
    pub fn get(&self, s: &CellId, d: usize) -> T {
        self.eps[s.index()][d]
    }

    pub fn radii(&self, s: &CellId) -> &[T] {
        &self.eps[s.index()]
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let rows: Vec<ErrorRow<T>> = (0..self.eps.len())
            .map(|i| ErrorRow {
                cell: CellId::new(i as u64, self.precision).expect("index below 2^q").to_string(),
                eps1: self.eps1[i].clone(),
                eps2: self.eps2[i].clone(),
                eps3: self.eps3[i].clone(),
                eps: self.eps[i].clone(),
            })
            .collect();
        crate::io::write_json(
            path,
            &ErrorFile {
                precision: self.precision,
                confidence: self.confidence,
                branch: self.branch,
                heuristic: self.heuristic,
                cells: rows,
            },
        )
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let f: ErrorFile<T> = crate::io::read_json(path)?;
        if f.cells.len() != 1usize << f.precision {
            return Err(Error::InconsistentScheme(format!(
                "error table has {} rows for precision {}",
                f.cells.len(),
                f.precision
            )));
        }
        let mut t = ErrorTable {
            precision: f.precision,
            eps1: Vec::with_capacity(f.cells.len()),
            eps2: Vec::with_capacity(f.cells.len()),
            eps3: Vec::with_capacity(f.cells.len()),
            eps: Vec::with_capacity(f.cells.len()),
            confidence: f.confidence,
            branch: f.branch,
            heuristic: f.heuristic,
        };
        for (i, row) in f.cells.into_iter().enumerate() {
            let s: CellId = row.cell.parse()?;
            if s.index() != i || s.len() != f.precision {
                return Err(Error::parse(format!("error table row {i} is out of order")));
            }
            if row.eps.iter().chain(&row.eps1).chain(&row.eps2).chain(&row.eps3).any(|v| !(v.is_finite() && *v >= T::zero())) {
                return Err(Error::parse(format!("error table row {i} has a negative or non-finite entry")));
            }
            t.eps1.push(row.eps1);
            t.eps2.push(row.eps2);
            t.eps3.push(row.eps3);
            t.eps.push(row.eps);
        }
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct ErrorFile<T> {
    precision: usize,
    confidence: T,
    branch: Eps1Branch,
    heuristic: bool,
    cells: Vec<ErrorRow<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct ErrorRow<T> {
    cell: String,
    eps1: Vec<T>,
    eps2: Vec<T>,
    eps3: Vec<T>,
    eps: Vec<T>,
}

/// Shared state for evaluating the three error components of any cell.
pub struct ErrorBounds<'a, T> {
    model: &'a BtgpModel<T>,
    config: &'a ErrorConfig<T>,
    n_samples: usize,
    /// `sqrt(sum_c a_c^2 / m_c)` per cell.
    weight_norm: Vec<T>,
    spectrum: SpectrumStats<T>,
    /// `|a^T G a - 2 a^T h + c^2|` per dimension and cell.
    bias_sq: Vec<Vec<T>>,
    heuristic: bool,
}

impl<'a, T: Real> ErrorBounds<'a, T> {
    pub fn new(data: &Dataset<T>, model: &'a BtgpModel<T>, solve: &PosteriorSolve<T>, config: &'a ErrorConfig<T>) -> Result<Self> {
        config.validate()?;
        let n = model.dim();
        if config.bounds.len() != n || data.dim() != n {
            return Err(Error::invalid(format!(
                "error config covers {} dimensions, model has {n}",
                config.bounds.len()
            )));
        }
        if solve.cells() != model.aggregation().cells.as_slice() {
            return Err(Error::InconsistentScheme("factorization does not belong to the model".into()));
        }
        let agg = model.aggregation();
        let assignment = if agg.assignment.len() == data.len() {
            agg.assignment.clone()
        } else {
            let scheme = model.scheme();
            (0..data.len())
                .map(|i| {
                    let s = scheme.encode(data.input(i))?;
                    agg.cells
                        .binary_search(&s)
                        .map_err(|_| Error::InconsistentScheme("dataset does not match the model's aggregation".into()))
                })
                .collect::<Result<Vec<_>>>()?
        };

        let kernel = model.kernel();
        let a = solve.weights(kernel);
        let m = agg.len();
        let cells = a.cols();
        let mut wsq = vec![T::zero(); cells];
        for c in 0..m {
            let inv = T::one() / T::from_count(agg.counts[c]);
            for (acc, &v) in wsq.iter_mut().zip(a.row(c)) {
                *acc += v * v * inv;
            }
        }
        let weight_norm = wsq.into_iter().map(|v| v.sqrt()).collect();
        let spectrum = spectrum_stats(kernel, &agg.cells, &agg.counts, model.noise_std())?;

        let (members, heuristic) = if data.len() > config.dense_cap {
            if !config.subsample {
                return Err(Error::DataTooLarge {
                    n: data.len(),
                    cap: config.dense_cap,
                });
            }
            log::warn!(
                "{} samples exceed the dense cap {}; eps3 uses a subsample and is heuristic",
                data.len(),
                config.dense_cap
            );
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut idx = sample(&mut rng, data.len(), config.dense_cap).into_vec();
            idx.sort_unstable();
            (idx, true)
        } else {
            ((0..data.len()).collect::<Vec<_>>(), false)
        };

        let centers: Vec<Vec<T>> = model
            .scheme()
            .cells()
            .map(|s| model.scheme().cell_center(&s))
            .collect::<Result<_>>()?;
        let bias_sq = (0..n)
            .map(|d| bias_terms(data, &assignment, &members, m, &a, &centers, &config.kernels[d]))
            .collect();
        Ok(ErrorBounds {
            model,
            config,
            n_samples: data.len(),
            weight_norm,
            spectrum,
            bias_sq,
            heuristic,
        })
    }

    pub fn spectrum(&self) -> &SpectrumStats<T> {
        &self.spectrum
    }

    fn noise_scale(&self) -> T {
        if self.config.scale_noise {
            self.model.noise_std()
        } else {
            T::one()
        }
    }

    pub fn eps1_term_a(&self, s: &CellId) -> T {
        self.noise_scale() * self.weight_norm[s.index()] * term_a_radical(self.n_samples, self.config.delta)
    }

    pub fn eps1_term_b(&self, s: &CellId, d: usize) -> T {
        let sd = self.model.variance(s, d).sqrt();
        self.noise_scale() * sd / self.model.noise_std() * self.spectrum.radical(self.config.delta)
    }

    pub fn eps1(&self, s: &CellId, d: usize) -> T {
        match self.config.branch {
            Eps1Branch::TermA => self.eps1_term_a(s),
            Eps1Branch::TermB => self.eps1_term_b(s, d),
            Eps1Branch::Min => self.eps1_term_a(s).min(self.eps1_term_b(s, d)),
        }
    }

    pub fn eps2(&self, s: &CellId, d: usize) -> Result<T> {
        let scheme = self.model.scheme();
        let cell = scheme.cell_box(s)?;
        Ok(eps2_value(self.config.bounds[d], &self.config.kernels[d], &cell.center(), &cell))
    }

    pub fn eps3(&self, s: &CellId, d: usize) -> T {
        self.config.bounds[d] * self.bias_sq[d][s.index()].sqrt()
    }

    pub fn table(&self) -> Result<ErrorTable<T>> {
        let n = self.model.dim();
        let scheme = self.model.scheme();
        let rows: Vec<[Vec<T>; 4]> = (0..scheme.num_cells())
            .into_par_iter()
            .map(|idx| {
                let s = scheme.cell_at(idx);
                let mut r: [Vec<T>; 4] = Default::default();
                for d in 0..n {
                    let (e1, e2, e3) = (self.eps1(&s, d), self.eps2(&s, d)?, self.eps3(&s, d));
                    r[0].push(e1);
                    r[1].push(e2);
                    r[2].push(e3);
                    r[3].push(e1 + e2 + e3);
                }
                Ok(r)
            })
            .collect::<Result<_>>()?;
        let mut t = ErrorTable {
            precision: scheme.precision(),
            eps1: Vec::with_capacity(rows.len()),
            eps2: Vec::with_capacity(rows.len()),
            eps3: Vec::with_capacity(rows.len()),
            eps: Vec::with_capacity(rows.len()),
            confidence: self.config.confidence(),
            branch: self.config.branch,
            heuristic: self.heuristic,
        };
        for [e1, e2, e3, e] in rows {
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure("error radius is not finite".into()));
            }
            t.eps1.push(e1);
            t.eps2.push(e2);
            t.eps3.push(e3);
            t.eps.push(e);
        }
        Ok(t)
    }
}

/// `|a_s^T G a_s - 2 a_s^T h_s + c^2|` for every cell `s`, where `G` holds
/// the true-kernel averages between the samples of two occupied cells and
/// `h_s` the averages between the samples of a cell and the center of `s`.
fn bias_terms<T: Real>(
    data: &Dataset<T>,
    assignment: &[usize],
    members: &[usize],
    m: usize,
    a: &Mat<T>,
    centers: &[Vec<T>],
    k: &SeKernel<T>,
) -> Vec<T> {
    let mut counts = vec![0usize; m];
    let mut by_cell: Vec<Vec<usize>> = vec![Vec::new(); m];
    for &i in members {
        counts[assignment[i]] += 1;
        by_cell[assignment[i]].push(i);
    }
    // cells without retained samples (subsampling only) fall back to zero
    // weight in the averages
    let inv: Vec<T> = counts
        .iter()
        .map(|&c| if c == 0 { T::zero() } else { T::one() / T::from_count(c) })
        .collect();

    let g_rows: Vec<Vec<T>> = (0..m)
        .into_par_iter()
        .map(|c| {
            let mut row = vec![T::zero(); m];
            for &i in &by_cell[c] {
                let xi = data.input(i);
                for &j in members {
                    row[assignment[j]] += k.eval(xi, data.input(j));
                }
            }
            for (c2, v) in row.iter_mut().enumerate() {
                *v = *v * inv[c] * inv[c2];
            }
            row
        })
        .collect();
    let g = Mat::from_vec(m, m, g_rows.into_iter().flatten().collect());
    let ga = g.matmul(a);

    let total = a.cols();
    let c2 = k.variance();
    (0..total)
        .into_par_iter()
        .map(|s| {
            let mut h = vec![T::zero(); m];
            for &i in members {
                h[assignment[i]] += k.eval(data.input(i), &centers[s]);
            }
            let mut quad = T::zero();
            let mut lin = T::zero();
            for c in 0..m {
                let w = a[(c, s)];
                quad += w * ga[(c, s)];
                lin += w * h[c] * inv[c];
            }
            (quad - T::lit(2.0) * lin + c2).abs()
        })
        .collect()
}

/// Error table for a fitted model; refactors the posterior covariance.
pub fn error_table<T: Real>(data: &Dataset<T>, model: &BtgpModel<T>, config: &ErrorConfig<T>) -> Result<ErrorTable<T>> {
    let solve = PosteriorSolve::new(model.aggregation(), model.kernel(), model.noise_std())?;
    error_table_with_solve(data, model, &solve, config)
}

pub fn error_table_with_solve<T: Real>(
    data: &Dataset<T>,
    model: &BtgpModel<T>,
    solve: &PosteriorSolve<T>,
    config: &ErrorConfig<T>,
) -> Result<ErrorTable<T>> {
    ErrorBounds::new(data, model, solve, config)?.table()
}

//! Gaussian-process regression with the binary-tree kernel.
//!
//! The posterior of a BT-kernel GP only depends on which level-`q` cell a
//! point falls in, so samples sharing a cell are merged into one averaged
//! observation with noise variance `sigma_v^2 / m`. This reduction is exact
//! and caps the Gram matrix at the number of occupied cells.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::kernel::{BtKernel, SeKernel};
use crate::linalg::{dot, Cholesky, Mat};
use crate::partition::{CellId, PartitionScheme};
use crate::real::Real;

const JITTER: f64 = 1e-10;

/// Input states and noisy successor states.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    x: Mat<T>,
    y: Mat<T>,
    noise_std: T,
}

impl<T: Real> Dataset<T> {
    pub fn new(x: Mat<T>, y: Mat<T>, noise_std: T) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::invalid("dataset is empty"));
        }
        if x.rows() != y.rows() || x.cols() != y.cols() || x.cols() == 0 {
            return Err(Error::invalid(format!(
                "inputs are {}x{} but outputs are {}x{}",
                x.rows(),
                x.cols(),
                y.rows(),
                y.cols()
            )));
        }
        if !(noise_std.is_finite() && noise_std > T::zero()) {
            return Err(Error::invalid(format!("noise std must be positive, got {noise_std}")));
        }
        if x.as_slice().iter().chain(y.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset { x, y, noise_std })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn noise_std(&self) -> T {
        self.noise_std
    }

    pub fn inputs(&self) -> &Mat<T> {
        &self.x
    }

    pub fn outputs(&self) -> &Mat<T> {
        &self.y
    }

    pub fn input(&self, i: usize) -> &[T] {
        self.x.row(i)
    }

    pub fn output(&self, i: usize) -> &[T] {
        self.y.row(i)
    }

    /// Rows `idx` of the dataset, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let n = self.dim();
        let pick = |m: &Mat<T>| Mat::from_vec(idx.len(), n, idx.iter().flat_map(|&i| m.row(i).to_vec()).collect());
        Dataset::new(pick(&self.x), pick(&self.y), self.noise_std)
    }

    /// Reads a CSV with header `x1..xn,y1..yn`.
    pub fn read_csv(path: &Path, noise_std: T) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
        let header = rdr.headers().map_err(|e| Error::parse(e.to_string()))?.clone();
        let width = header.len();
        if width == 0 || width % 2 != 0 {
            return Err(Error::parse(format!("expected header x1..xn,y1..yn, got {width} columns")));
        }
        let n = width / 2;
        for (j, name) in header.iter().enumerate() {
            let want = if j < n { format!("x{}", j + 1) } else { format!("y{}", j - n + 1) };
            if name.trim() != want {
                return Err(Error::parse(format!("column {} is `{name}`, expected `{want}`", j + 1)));
            }
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::parse(e.to_string()))?;
            for (j, field) in rec.iter().enumerate() {
                let v: T = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(format!("row {}: `{field}` is not a number", line + 2)))?;
                if j < n {
                    xs.push(v);
                } else {
                    ys.push(v);
                }
            }
        }
        let rows = xs.len() / n;
        Dataset::new(Mat::from_vec(rows, n, xs), Mat::from_vec(rows, n, ys), noise_std)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.dim();
        let mut out = String::new();
        let names: Vec<String> = (1..=n).map(|d| format!("x{d}")).chain((1..=n).map(|d| format!("y{d}"))).collect();
        out.push_str(&names.join(","));
        out.push('\n');
        for i in 0..self.len() {
            let fields: Vec<String> = self.input(i).iter().chain(self.output(i)).map(|&v| io::fmt_exact(v)).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        io::write_atomic(path, out.as_bytes())
    }
}

/// Per-cell averages of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AggregatedDataset<T> {
    /// Occupied cells in integer order.
    pub cells: Vec<CellId>,
    /// Cell centers, one row per occupied cell.
    pub centers: Vec<Vec<T>>,
    /// Averaged outputs, one row per occupied cell.
    pub means: Vec<Vec<T>>,
    pub counts: Vec<usize>,
    /// For every raw sample, its row in `cells`.
    #[serde(skip)]
    pub assignment: Vec<usize>,
}

impl<T: Real> AggregatedDataset<T> {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    fn means_mat(&self) -> Mat<T> {
        let n = self.means.first().map_or(0, |m| m.len());
        Mat::from_vec(self.len(), n, self.means.iter().flatten().copied().collect())
    }
}

/// Groups samples by level-`q` cell and averages their outputs.
pub fn aggregate<T: Real>(data: &Dataset<T>, scheme: &PartitionScheme<T>) -> Result<AggregatedDataset<T>> {
    if data.dim() != scheme.dim() {
        return Err(Error::invalid(format!(
            "dataset has dimension {}, partition has {}",
            data.dim(),
            scheme.dim()
        )));
    }
    let n = data.dim();
    let codes = (0..data.len())
        .map(|i| scheme.encode(data.input(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<CellId, (Vec<T>, usize)> = BTreeMap::new();
    for (i, &s) in codes.iter().enumerate() {
        let e = groups.entry(s).or_insert_with(|| (vec![T::zero(); n], 0));
        for (acc, &y) in e.0.iter_mut().zip(data.output(i)) {
            *acc += y;
        }
        e.1 += 1;
    }
    let mut agg = AggregatedDataset {
        cells: Vec::with_capacity(groups.len()),
        centers: Vec::with_capacity(groups.len()),
        means: Vec::with_capacity(groups.len()),
        counts: Vec::with_capacity(groups.len()),
        assignment: Vec::with_capacity(data.len()),
    };
    for (s, (sum, m)) in groups {
        agg.centers.push(scheme.cell_center(&s)?);
        agg.means.push(sum.into_iter().map(|v| v / T::from_count(m)).collect());
        agg.cells.push(s);
        agg.counts.push(m);
    }
    for s in &codes {
        agg.assignment.push(agg.cells.binary_search(s).expect("cell was inserted"));
    }
    Ok(agg)
}

/// Cholesky factor of `K_cells + diag(sigma_v^2 / m_s)` over the occupied
/// cells, shared by the posterior tables and the error bounds.
#[derive(Clone, Debug)]
pub struct PosteriorSolve<T> {
    cells: Vec<CellId>,
    counts: Vec<usize>,
    chol: Cholesky<T>,
}

impl<T: Real> PosteriorSolve<T> {
    pub fn new(agg: &AggregatedDataset<T>, kernel: &BtKernel<T>, noise_std: T) -> Result<Self> {
        let noise = noise_std * noise_std;
        let mut c = kernel.gram_cells(&agg.cells);
        for (j, &m) in agg.counts.iter().enumerate() {
            c[(j, j)] += noise / T::from_count(m);
        }
        let chol = match Cholesky::factor(c.clone()) {
            Ok(ch) => ch,
            Err(_) => {
                for j in 0..c.rows() {
                    c[(j, j)] += T::lit(JITTER);
                }
                Cholesky::factor(c).map_err(|e| {
                    Error::NumericalFailure(format!(
                        "posterior covariance is not positive definite at pivot {} after jitter",
                        e.pivot
                    ))
                })?
            }
        };
        Ok(PosteriorSolve {
            cells: agg.cells.clone(),
            counts: agg.counts.clone(),
            chol,
        })
    }

    pub fn cells(&self) -> &[CellId] {
        &self.cells
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn cholesky(&self) -> &Cholesky<T> {
        &self.chol
    }

    /// `[k(c_j, s)]` for occupied cells `c_j` (rows) and all level-`q`
    /// cells `s` (columns).
    pub fn cross_covariance(&self, kernel: &BtKernel<T>) -> Mat<T> {
        let q = kernel.precision();
        let total = 1usize << q;
        let mut k = Mat::zeros(self.cells.len(), total);
        for (j, c) in self.cells.iter().enumerate() {
            let row = k.row_mut(j);
            for (idx, v) in row.iter_mut().enumerate() {
                let s = CellId::new(idx as u64, q).expect("index below 2^q");
                *v = kernel.eval_cells(c, &s);
            }
        }
        k
    }

    /// `C^{-1} K_cross`: column `s` holds the regression weights that map
    /// the averaged outputs to the posterior mean of cell `s`.
    pub fn weights(&self, kernel: &BtKernel<T>) -> Mat<T> {
        self.chol.solve(&self.cross_covariance(kernel))
    }
}

/// Posterior mean and variance tables over all `2^q` cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BtgpModel<T> {
    kernel: BtKernel<T>,
    noise_std: T,
    aggregation: AggregatedDataset<T>,
    /// `2^q x n`, row = cell.
    #[serde(with = "mat_rows")]
    means: Mat<T>,
    /// `2^q x n`, row = cell.
    #[serde(with = "mat_rows")]
    variances: Mat<T>,
}

mod mat_rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<T: Real, S: Serializer>(m: &Mat<T>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<&[T]> = (0..m.rows()).map(|r| m.row(r)).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, T: Real, D: Deserializer<'de>>(d: D) -> std::result::Result<Mat<T>, D::Error> {
        let rows: Vec<Vec<T>> = Vec::deserialize(d)?;
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged table"));
        }
        Ok(Mat::from_vec(rows.len(), cols, rows.into_iter().flatten().collect()))
    }
}

/// Fits the BTGP posterior on the aggregated form of `data`.
pub fn fit<T: Real>(data: &Dataset<T>, kernel: &BtKernel<T>) -> Result<BtgpModel<T>> {
    Ok(fit_with_solve(data, kernel)?.0)
}

/// As [`fit`], also returning the factorization for the error bounds.
pub fn fit_with_solve<T: Real>(data: &Dataset<T>, kernel: &BtKernel<T>) -> Result<(BtgpModel<T>, PosteriorSolve<T>)> {
    let agg = aggregate(data, kernel.scheme())?;
    fit_aggregated(agg, kernel, data.noise_std())
}

pub fn fit_aggregated<T: Real>(
    agg: AggregatedDataset<T>,
    kernel: &BtKernel<T>,
    noise_std: T,
) -> Result<(BtgpModel<T>, PosteriorSolve<T>)> {
    if agg.is_empty() {
        return Err(Error::invalid("no samples to fit"));
    }
    let solve = PosteriorSolve::new(&agg, kernel, noise_std)?;
    let kx = solve.cross_covariance(kernel);
    let alpha = solve.chol.solve(&agg.means_mat());
    let means = kx.t_matmul(&alpha);

    let mut b = kx;
    solve.chol.forward_in_place(&mut b);
    let total = b.cols();
    let mut explained = vec![T::zero(); total];
    for j in 0..b.rows() {
        for (e, &v) in explained.iter_mut().zip(b.row(j)) {
            *e += v * v;
        }
    }
    let prior = kernel.diagonal();
    let n = means.cols();
    let mut variances = Mat::zeros(total, n);
    for (s, e) in explained.iter().enumerate() {
        let v = (prior - *e).max(T::min_positive_value()).min(prior);
        for d in 0..n {
            variances[(s, d)] = v;
        }
    }
    let model = BtgpModel {
        kernel: kernel.clone(),
        noise_std,
        aggregation: agg,
        means,
        variances,
    };
    Ok((model, solve))
}

impl<T: Real> BtgpModel<T> {
    pub fn kernel(&self) -> &BtKernel<T> {
        &self.kernel
    }

    pub fn scheme(&self) -> &PartitionScheme<T> {
        self.kernel.scheme()
    }

    pub fn noise_std(&self) -> T {
        self.noise_std
    }

    pub fn aggregation(&self) -> &AggregatedDataset<T> {
        &self.aggregation
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn num_cells(&self) -> usize {
        self.means.rows()
    }

    #[inline]
    pub fn mean(&self, s: &CellId, d: usize) -> T {
        self.means[(s.index(), d)]
    }

    #[inline]
    pub fn variance(&self, s: &CellId, d: usize) -> T {
        self.variances[(s.index(), d)]
    }

    /// Mean vector of cell `s`.
    pub fn means(&self, s: &CellId) -> &[T] {
        self.means.row(s.index())
    }

    /// Variance vector of cell `s`.
    pub fn variances(&self, s: &CellId) -> &[T] {
        self.variances.row(s.index())
    }

    /// Replaces the per-cell moments, e.g. for hand-set abstractions.
    pub fn set_moments(&mut self, means: Mat<T>, variances: Mat<T>) -> Result<()> {
        let shape = (self.means.rows(), self.means.cols());
        if (means.rows(), means.cols()) != shape || (variances.rows(), variances.cols()) != shape {
            return Err(Error::invalid(format!("moment tables must be {} x {}", shape.0, shape.1)));
        }
        if means.as_slice().iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("means must be finite"));
        }
        if variances.as_slice().iter().any(|v| !(*v > T::zero() && v.is_finite())) {
            return Err(Error::invalid("variances must be positive"));
        }
        self.means = means;
        self.variances = variances;
        Ok(())
    }

    /// `(mean, variance)` of the predictive Gaussian of dimension `d` in
    /// cell `s`; `with_noise` adds the observation noise variance.
    pub fn predictive_density_params(&self, s: &CellId, d: usize, with_noise: bool) -> (T, T) {
        let v = self.variance(s, d);
        let v = if with_noise { v + self.noise_std * self.noise_std } else { v };
        (self.mean(s, d), v)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        io::write_json(path, &ModelFile::from_model(self))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        io::read_json::<ModelFile<T>>(path)?.into_model()
    }
}

/// On-disk model layout: one row per cell, cells in integer order.
#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct ModelFile<T> {
    kernel: BtKernel<T>,
    noise_std: T,
    aggregation: Vec<AggRow<T>>,
    cells: Vec<CellRow<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct AggRow<T> {
    cell: String,
    count: usize,
    mean: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct CellRow<T> {
    cell: String,
    mean: Vec<T>,
    variance: Vec<T>,
}

impl<T: Real> ModelFile<T> {
    fn from_model(m: &BtgpModel<T>) -> Self {
        let aggregation = (0..m.aggregation.len())
            .map(|j| AggRow {
                cell: m.aggregation.cells[j].to_string(),
                count: m.aggregation.counts[j],
                mean: m.aggregation.means[j].clone(),
            })
            .collect();
        let cells = m
            .scheme()
            .cells()
            .map(|s| CellRow {
                cell: s.to_string(),
                mean: m.means(&s).to_vec(),
                variance: m.variances(&s).to_vec(),
            })
            .collect();
        ModelFile {
            kernel: m.kernel.clone(),
            noise_std: m.noise_std,
            aggregation,
            cells,
        }
    }

    fn into_model(self) -> Result<BtgpModel<T>> {
        let scheme = self.kernel.scheme().clone();
        let q = scheme.precision();
        if self.cells.len() != scheme.num_cells() {
            return Err(Error::InconsistentScheme(format!(
                "model has {} cell rows, precision {q} needs {}",
                self.cells.len(),
                scheme.num_cells()
            )));
        }
        let n = scheme.dim();
        let mut means = Mat::zeros(self.cells.len(), n);
        let mut variances = Mat::zeros(self.cells.len(), n);
        for (idx, row) in self.cells.into_iter().enumerate() {
            let s: CellId = row.cell.parse()?;
            if s.len() != q || s.index() != idx || row.mean.len() != n || row.variance.len() != n {
                return Err(Error::parse(format!("model row {idx} is malformed")));
            }
            means.row_mut(idx).copy_from_slice(&row.mean);
            variances.row_mut(idx).copy_from_slice(&row.variance);
        }
        let mut agg = AggregatedDataset {
            cells: Vec::new(),
            centers: Vec::new(),
            means: Vec::new(),
            counts: Vec::new(),
            assignment: Vec::new(),
        };
        for row in self.aggregation {
            let s: CellId = row.cell.parse()?;
            if s.len() != q {
                return Err(Error::InconsistentScheme(format!("aggregated cell {s} has wrong length")));
            }
            agg.centers.push(scheme.cell_center(&s)?);
            agg.cells.push(s);
            agg.counts.push(row.count);
            agg.means.push(row.mean);
        }
        Ok(BtgpModel {
            kernel: self.kernel,
            noise_std: self.noise_std,
            aggregation: agg,
            means,
            variances,
        })
    }
}

/// Pointwise Gaussian posterior over successor states.
pub trait Posterior<T: Real>: Sync {
    fn output_dim(&self) -> usize;

    /// Per-dimension posterior mean and variance at `x`.
    fn predict(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)>;
}

impl<T: Real> Posterior<T> for BtgpModel<T> {
    fn output_dim(&self) -> usize {
        self.dim()
    }

    fn predict(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let s = self.scheme().encode(x)?;
        Ok((self.means(&s).to_vec(), self.variances(&s).to_vec()))
    }
}

/// Standard GP with one squared-exponential kernel per output dimension,
/// fitted on the raw samples.
#[derive(Clone, Debug)]
pub struct SeGp<T> {
    inputs: Vec<Vec<T>>,
    kernels: Vec<SeKernel<T>>,
    factors: Vec<Cholesky<T>>,
    alphas: Vec<Vec<T>>,
}

impl<T: Real> SeGp<T> {
    pub fn fit(data: &Dataset<T>, kernels: Vec<SeKernel<T>>) -> Result<Self> {
        if kernels.len() != data.dim() {
            return Err(Error::invalid(format!(
                "need {} SE kernels, got {}",
                data.dim(),
                kernels.len()
            )));
        }
        let inputs: Vec<Vec<T>> = (0..data.len()).map(|i| data.input(i).to_vec()).collect();
        let noise = data.noise_std() * data.noise_std();
        let mut factors = Vec::with_capacity(kernels.len());
        let mut alphas = Vec::with_capacity(kernels.len());
        for (d, k) in kernels.iter().enumerate() {
            let mut c = k.gram(&inputs);
            for i in 0..c.rows() {
                c[(i, i)] += noise;
            }
            let chol = Cholesky::factor(c)
                .map_err(|e| Error::NumericalFailure(format!("SE Gram of dimension {d} fails at pivot {}", e.pivot)))?;
            alphas.push(chol.solve_vec(&data.outputs().column(d)));
            factors.push(chol);
        }
        Ok(SeGp {
            inputs,
            kernels,
            factors,
            alphas,
        })
    }
}

impl<T: Real> Posterior<T> for SeGp<T> {
    fn output_dim(&self) -> usize {
        self.kernels.len()
    }

    fn predict(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let mut mean = Vec::with_capacity(self.kernels.len());
        let mut var = Vec::with_capacity(self.kernels.len());
        for (d, k) in self.kernels.iter().enumerate() {
            let kx: Vec<T> = self.inputs.iter().map(|xi| k.eval(xi, x)).collect();
            mean.push(dot(&kx, &self.alphas[d]));
            let mut b = Mat::from_vec(kx.len(), 1, kx);
            self.factors[d].forward_in_place(&mut b);
            let explained = dot(b.as_slice(), b.as_slice());
            var.push((k.variance() - explained).max(T::min_positive_value()));
        }
        Ok((mean, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::StateBox;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scheme(n: usize, q: usize) -> PartitionScheme<f64> {
        PartitionScheme::cyclic(StateBox::cube(n, -10.0, 10.0).unwrap(), q).unwrap()
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize, count: usize, noise: f64) -> Dataset<f64> {
        let x: Vec<f64> = (0..count * n).map(|_| rng.random_range(-10.0..=10.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.random_range(-1.0..1.0)).collect();
        Dataset::new(Mat::from_vec(count, n, x), Mat::from_vec(count, n, y), noise).unwrap()
    }

    #[test]
    fn aggregation_averages() {
        let data = Dataset::new(Mat::from_vec(2, 1, vec![1.0, 2.0]), Mat::from_vec(2, 1, vec![1.0, 3.0]), 1.0).unwrap();
        let agg = aggregate(&data, &scheme(1, 1)).unwrap();
        assert_eq!(agg.means, vec![vec![2.0]]);
        assert_eq!(agg.counts, vec![2]);
        assert_eq!(agg.centers, vec![vec![5.0]]);
        assert_eq!(agg.assignment, vec![0, 0]);

        let data = Dataset::new(Mat::from_vec(2, 1, vec![-1.0, 2.0]), Mat::from_vec(2, 1, vec![1.0, 3.0]), 1.0).unwrap();
        let agg = aggregate(&data, &scheme(1, 1)).unwrap();
        assert_eq!(agg.counts, vec![1, 1]);
        assert_eq!(agg.means, vec![vec![1.0], vec![3.0]]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for count in [1, 17, 300] {
            let data = random_data(&mut rng, 2, count, 1.0);
            assert_eq!(aggregate(&data, &scheme(2, 5)).unwrap().total(), count);
        }
        let bad = Dataset::new(Mat::from_vec(1, 1, vec![12.0]), Mat::from_vec(1, 1, vec![0.0]), 1.0).unwrap();
        assert!(matches!(aggregate(&bad, &scheme(1, 2)), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(Mat::<f64>::zeros(0, 1), Mat::zeros(0, 1), 1.0).is_err());
        assert!(Dataset::new(Mat::from_vec(1, 1, vec![0.0]), Mat::from_vec(1, 1, vec![0.0]), 0.0).is_err());
        assert!(Dataset::new(Mat::from_vec(1, 1, vec![0.0]), Mat::from_vec(1, 2, vec![0.0, 1.0]), 1.0).is_err());
    }

    #[test]
    fn single_sample_posterior() {
        let k = BtKernel::uniform(scheme(1, 1)).unwrap();
        let data = Dataset::new(Mat::from_vec(1, 1, vec![3.0]), Mat::from_vec(1, 1, vec![2.0]), 1.0).unwrap();
        let m = fit(&data, &k).unwrap();
        let hit: CellId = "1".parse().unwrap();
        let miss: CellId = "0".parse().unwrap();
        assert!((m.mean(&hit, 0) - 1.0).abs() < 1e-15);
        assert!((m.variance(&hit, 0) - 0.5).abs() < 1e-15);
        assert_eq!(m.mean(&miss, 0), 0.0);
        assert_eq!(m.variance(&miss, 0), 1.0);
        let (mu, v) = m.predictive_density_params(&hit, 0, true);
        assert_eq!((mu, v), (m.mean(&hit, 0), m.variance(&hit, 0) + 1.0));
    }

    #[test]
    fn untouched_subtree_gets_prior() {
        let k = BtKernel::uniform(scheme(2, 4)).unwrap();
        let data = Dataset::new(Mat::from_vec(1, 2, vec![3.0, 3.0]), Mat::from_vec(1, 2, vec![2.0, 1.0]), 1.0).unwrap();
        let m = fit(&data, &k).unwrap();
        for s in k.scheme().cells().filter(|s| !s.bit(0)) {
            assert_eq!(m.means(&s), &[0.0, 0.0]);
            assert_eq!(m.variances(&s), &[k.diagonal(), k.diagonal()]);
        }
    }

    /// Posterior tables from the raw `N`-sample Gram matrix.
    fn full_posterior(data: &Dataset<f64>, k: &BtKernel<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
        let n = data.len();
        let pts: Vec<Vec<f64>> = (0..n).map(|i| data.input(i).to_vec()).collect();
        let g = k.gram(&pts).unwrap();
        let noise = data.noise_std() * data.noise_std();
        let c = DMatrix::from_fn(n, n, |i, j| g[(i, j)] + if i == j { noise } else { 0.0 });
        let chol = c.cholesky().unwrap();
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for s in k.scheme().cells() {
            let ks = DVector::from_fn(n, |i, _| k.eval_cells(&k.scheme().encode(&pts[i]).unwrap(), &s));
            let w = chol.solve(&ks);
            vars.push(k.diagonal() - ks.dot(&w));
            means.push((0..data.dim()).map(|d| w.dot(&DVector::from_vec(data.outputs().column(d)))).collect());
        }
        (means, vars)
    }

    #[test]
    fn aggregated_posterior_equals_full_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let q = 1 + trial % 4;
            let count = rng.random_range(1..=200);
            let noise = rng.random_range(0.1..3.0);
            let data = random_data(&mut rng, 2, count, noise);
            let k = BtKernel::new(scheme(2, q), (0..q).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
            let m = fit(&data, &k).unwrap();
            let (means, vars) = full_posterior(&data, &k);
            for s in k.scheme().cells() {
                for d in 0..2 {
                    assert!((m.mean(&s, d) - means[s.index()][d]).abs() < 1e-8);
                    assert!((m.variance(&s, d) - vars[s.index()]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn more_data_never_increases_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = BtKernel::uniform(scheme(2, 4)).unwrap();
        let data = random_data(&mut rng, 2, 40, 1.0);
        let before = fit(&data, &k).unwrap();
        let extra = data.select(&[0, 0, 0]).unwrap();
        let mut x = data.inputs().as_slice().to_vec();
        x.extend_from_slice(extra.inputs().as_slice());
        let mut y = data.outputs().as_slice().to_vec();
        y.extend_from_slice(extra.outputs().as_slice());
        let more = Dataset::new(Mat::from_vec(43, 2, x), Mat::from_vec(43, 2, y), 1.0).unwrap();
        let after = fit(&more, &k).unwrap();
        for s in k.scheme().cells() {
            assert!(after.variance(&s, 0) <= before.variance(&s, 0) + 1e-15);
            assert!(after.variance(&s, 0) > 0.0 && after.variance(&s, 0) <= k.diagonal());
        }
    }

    #[test]
    fn fitting_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_data(&mut rng, 2, 500, 2.0);
        let k = BtKernel::uniform(scheme(2, 8)).unwrap();
        assert_eq!(fit(&data, &k).unwrap(), fit(&data, &k).unwrap());
    }

    #[test]
    fn model_and_dataset_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_data(&mut rng, 2, 60, 0.7);
        let k = BtKernel::uniform(scheme(2, 4)).unwrap();
        let m = fit(&data, &k).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.write_json(&path).unwrap();
        let mut back = BtgpModel::<f64>::read_json(&path).unwrap();
        back.aggregation.assignment = m.aggregation.assignment.clone();
        assert_eq!(back, m);

        let csv = dir.path().join("data.csv");
        data.write_csv(&csv).unwrap();
        assert_eq!(Dataset::read_csv(&csv, 0.7).unwrap(), data);
        std::fs::write(&csv, "x1,z1\n0,0\n").unwrap();
        assert!(Dataset::<f64>::read_csv(&csv, 1.0).is_err());
    }

    #[test]
    fn se_gp_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_data(&mut rng, 1, 30, 0.5);
        let k = SeKernel::new(2.0, vec![3.0]).unwrap();
        let gp = SeGp::fit(&data, vec![k.clone()]).unwrap();
        let pts: Vec<Vec<f64>> = (0..30).map(|i| data.input(i).to_vec()).collect();
        let g = k.gram(&pts);
        let c = DMatrix::from_fn(30, 30, |i, j| g[(i, j)] + if i == j { 0.25 } else { 0.0 });
        let inv = c.try_inverse().unwrap();
        let x = [1.234];
        let kx = DVector::from_fn(30, |i, _| k.eval(&pts[i], &x));
        let y = DVector::from_vec(data.outputs().column(0));
        let (mu, var) = gp.predict(&x).unwrap();
        assert!((mu[0] - (kx.transpose() * &inv * y)[0]).abs() < 1e-9);
        assert!((var[0] - (4.0 - (kx.transpose() * &inv * &kx)[0])).abs() < 1e-9);
    }
}

//! Interval Markov chain abstraction of a fitted BTGP.
//!
//! Every source cell carries one Gaussian (mean `mu(s) + e`, variance
//! `sigma^2(s)`) per output dimension, with the mean shift `e` ranging over
//! the error box `[-eps(s), eps(s)]`. The probability of landing in a
//! rectangular destination factorizes over dimensions, and each factor is
//! optimized over its shift in closed form.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::errbound::ErrorTable;
use crate::error::{Error, Result};
use crate::gp::{BtgpModel, Posterior};
use crate::io::{read_json, write_atomic_with, write_json};
use crate::partition::{CellId, PartitionScheme, StateBox};
use crate::real::Real;

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-12;

/// Variance used for the successor-state Gaussian of a cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionVariance {
    /// Posterior variance `sigma_N^2(s)`.
    #[default]
    Posterior,
    /// Predictive variance `sigma_N^2(s) + sigma_v^2`.
    PosteriorPlusNoise,
    /// Process noise `sigma_v^2` only. With `|f - mu| <= eps` on the cell,
    /// this is the variance of the true one-step kernel.
    Noise,
}

impl TransitionVariance {
    pub fn apply<T: Real>(self, posterior: T, noise_std: T) -> T {
        match self {
            TransitionVariance::Posterior => posterior,
            TransitionVariance::PosteriorPlusNoise => posterior + noise_std * noise_std,
            TransitionVariance::Noise => noise_std * noise_std,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImcOptions<T> {
    /// Destinations with an upper bound below this are not stored.
    pub prune_threshold: T,
    pub variance: TransitionVariance,
}

impl<T: Real> Default for ImcOptions<T> {
    fn default() -> Self {
        ImcOptions {
            prune_threshold: T::lit(DEFAULT_PRUNE_THRESHOLD),
            variance: TransitionVariance::Posterior,
        }
    }
}

impl<T: Real> ImcOptions<T> {
    fn validate(&self) -> Result<()> {
        if !(self.prune_threshold >= T::zero() && self.prune_threshold < T::one()) {
            return Err(Error::invalid(format!(
                "prune threshold must lie in [0, 1), got {}",
                self.prune_threshold
            )));
        }
        Ok(())
    }
}

/// `P(a <= X <= b)` for `X ~ N(mean, std^2)`.
///
/// The two tails are evaluated with `erfc` on whichever side avoids
/// cancellation; infinite bounds are allowed.
pub fn interval_prob<T: Real>(a: T, b: T, mean: T, std: T) -> T {
    let r = T::lit(std::f64::consts::FRAC_1_SQRT_2) / std;
    let za = (a - mean) * r;
    let zb = (b - mean) * r;
    let half = T::lit(0.5);
    let p = if za >= T::zero() {
        half * (za.erfc() - zb.erfc())
    } else if zb <= T::zero() {
        half * ((-zb).erfc() - (-za).erfc())
    } else {
        T::one() - half * ((-za).erfc() + zb.erfc())
    };
    p.max(T::zero()).min(T::one())
}

/// Gaussian measure of a box given by per-dimension bounds, which may be
/// infinite.
pub fn gauss_bounds_prob<T: Real>(lower: &[T], upper: &[T], mean: &[T], var: &[T]) -> T {
    let mut p = T::one();
    for d in 0..mean.len() {
        p *= interval_prob(lower[d], upper[d], mean[d], var[d].sqrt());
    }
    p
}

/// Product of per-dimension normal measures of `b`.
pub fn gauss_box_prob<T: Real>(b: &StateBox<T>, mean: &[T], var: &[T]) -> T {
    gauss_bounds_prob(b.lower(), b.upper(), mean, var)
}

/// Smallest and largest measure of `[a, b]` under `N(mean + e, std^2)` for
/// `e` in `[-eps, eps]`.
///
/// The measure is unimodal in `e` with its peak where the shifted mean hits
/// the interval midpoint, so the maximum sits at the clamped midpoint and the
/// minimum at one of the two ends.
#[inline]
pub fn shifted_interval_bounds<T: Real>(a: T, b: T, mean: T, std: T, eps: T) -> (T, T) {
    let mid = a + (b - a) * T::lit(0.5);
    let star = (mid - mean).max(-eps).min(eps);
    let hi = interval_prob(a, b, mean + star, std);
    let lo = interval_prob(a, b, mean - eps, std).min(interval_prob(a, b, mean + eps, std));
    (lo.min(hi), hi)
}

/// One source/destination pair with the source's Gaussian parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionQuery<T> {
    pub source: CellId,
    pub dest: CellId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: Vec<T>,
}

impl<T: Real> TransitionQuery<T> {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.mean.len() != n || self.var.len() != n || self.eps.len() != n {
            return Err(Error::invalid(format!("transition query needs {n} entries per field")));
        }
        if self.var.iter().any(|v| !(*v > T::zero() && v.is_finite())) {
            return Err(Error::invalid("transition variance must be positive"));
        }
        if self.eps.iter().any(|e| !(*e >= T::zero() && e.is_finite())) {
            return Err(Error::invalid("error radius must be nonnegative"));
        }
        Ok(())
    }
}

/// `(lower, upper)` bound on the probability of moving into `query.dest`.
pub fn transition_bounds<T: Real>(scheme: &PartitionScheme<T>, query: &TransitionQuery<T>) -> Result<(T, T)> {
    query.validate(scheme.dim())?;
    if query.dest.len() != scheme.precision() {
        return Err(Error::InconsistentScheme(format!(
            "destination has length {}, scheme precision is {}",
            query.dest.len(),
            scheme.precision()
        )));
    }
    let cell = scheme.cell_box(&query.dest)?;
    let (mut lo, mut hi) = (T::one(), T::one());
    for d in 0..scheme.dim() {
        let (l, h) = shifted_interval_bounds(
            cell.lower()[d],
            cell.upper()[d],
            query.mean[d],
            query.var[d].sqrt(),
            query.eps[d],
        );
        lo *= l;
        hi *= h;
    }
    Ok((lo, hi))
}

/// Outgoing transitions of one state, sorted by destination.
#[derive(Clone, Debug, PartialEq)]
pub struct ImcRow<T> {
    pub dst: Vec<u32>,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
    /// Upper-bound mass of the destinations that were not stored.
    pub pruned: T,
}

impl<T: Real> ImcRow<T> {
    /// Row from `(destination, lower, upper)` triples in any order.
    pub fn new(mut entries: Vec<(usize, T, T)>, pruned: T) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("row lists a destination twice"));
        }
        let mut row = ImcRow {
            dst: Vec::with_capacity(entries.len()),
            lower: Vec::with_capacity(entries.len()),
            upper: Vec::with_capacity(entries.len()),
            pruned,
        };
        for (d, l, u) in entries {
            row.dst.push(u32::try_from(d).map_err(|_| Error::invalid("destination index overflows u32"))?);
            row.lower.push(l);
            row.upper.push(u);
        }
        Ok(row)
    }

    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }
}

/// Borrowed view of a stored row.
#[derive(Clone, Copy, Debug)]
pub struct RowView<'a, T> {
    pub dst: &'a [u32],
    pub lower: &'a [T],
    pub upper: &'a [T],
}

/// Interval Markov chain over the `2^q` cells, stored row-compressed.
#[derive(Clone, Debug, PartialEq)]
pub struct Imc<T> {
    precision: usize,
    init: CellId,
    target: Vec<bool>,
    row_ptr: Vec<usize>,
    dst: Vec<u32>,
    lower: Vec<T>,
    upper: Vec<T>,
    reward: Vec<(T, T)>,
    loss: Vec<(T, T)>,
    pruned: Vec<T>,
    confidence: T,
    prune_threshold: T,
    variance: TransitionVariance,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct ImcMeta<T> {
    precision: usize,
    init: String,
    targets: Vec<String>,
    confidence: T,
    prune_threshold: T,
    variance: TransitionVariance,
    transitions: usize,
}

pub const TRIPLETS_FILE: &str = "imc.triplets";
pub const STATES_FILE: &str = "imc.states";
pub const META_FILE: &str = "imc.meta.json";

fn check_precision(q: usize) -> Result<()> {
    if q > 31 {
        return Err(Error::invalid(format!("an explicit chain needs precision <= 31, got {q}")));
    }
    Ok(())
}

fn target_flags(precision: usize, targets: &[CellId]) -> Result<Vec<bool>> {
    let mut flags = vec![false; 1usize << precision];
    for t in targets {
        if t.len() != precision {
            return Err(Error::InconsistentScheme(format!(
                "target cell {t} does not have length {precision}"
            )));
        }
        flags[t.index()] = true;
    }
    Ok(flags)
}

impl<T: Real> Imc<T> {
    /// Builds a chain from explicit rows, deriving reward and loss bounds:
    /// `r = [sum_T lower, min(sum_T upper + pruned, 1)]`,
    /// `l = [max(0, 1 - sum upper - pruned), 1 - sum lower]`.
    pub fn from_rows(
        precision: usize,
        init: CellId,
        targets: &[CellId],
        rows: Vec<ImcRow<T>>,
        confidence: T,
    ) -> Result<Self> {
        check_precision(precision)?;
        let target = target_flags(precision, targets)?;
        Self::assemble(precision, init, target, rows, confidence, T::zero(), TransitionVariance::default())
    }

    fn assemble(
        precision: usize,
        init: CellId,
        target: Vec<bool>,
        rows: Vec<ImcRow<T>>,
        confidence: T,
        prune_threshold: T,
        variance: TransitionVariance,
    ) -> Result<Self> {
        let states = 1usize << precision;
        if rows.len() != states {
            return Err(Error::invalid(format!("chain needs {states} rows, got {}", rows.len())));
        }
        if init.len() != precision {
            return Err(Error::InconsistentScheme(format!("initial cell {init} does not have length {precision}")));
        }
        let nnz = rows.iter().map(|r| r.len()).sum();
        let mut imc = Imc {
            precision,
            init,
            target,
            row_ptr: Vec::with_capacity(states + 1),
            dst: Vec::with_capacity(nnz),
            lower: Vec::with_capacity(nnz),
            upper: Vec::with_capacity(nnz),
            reward: Vec::with_capacity(states),
            loss: Vec::with_capacity(states),
            pruned: Vec::with_capacity(states),
            confidence,
            prune_threshold,
            variance,
        };
        imc.row_ptr.push(0);
        for (s, row) in rows.into_iter().enumerate() {
            check_row(s, states, &row)?;
            let (r, l) = summarize(&row, &imc.target);
            imc.reward.push(r);
            imc.loss.push(l);
            imc.pruned.push(row.pruned);
            imc.dst.extend_from_slice(&row.dst);
            imc.lower.extend_from_slice(&row.lower);
            imc.upper.extend_from_slice(&row.upper);
            imc.row_ptr.push(imc.dst.len());
        }
        Ok(imc)
    }

    pub fn precision(&self) -> usize {
        self.precision
    }

    pub fn num_states(&self) -> usize {
        self.target.len()
    }

    /// Number of stored transitions.
    pub fn nnz(&self) -> usize {
        self.dst.len()
    }

    pub fn init(&self) -> CellId {
        self.init
    }

    pub fn cell(&self, s: usize) -> CellId {
        CellId::new(s as u64, self.precision).expect("state index below 2^q")
    }

    #[inline]
    pub fn is_target(&self, s: usize) -> bool {
        self.target[s]
    }

    pub fn targets(&self) -> Vec<CellId> {
        (0..self.num_states()).filter(|&s| self.target[s]).map(|s| self.cell(s)).collect()
    }

    #[inline]
    pub fn row(&self, s: usize) -> RowView<'_, T> {
        let (a, b) = (self.row_ptr[s], self.row_ptr[s + 1]);
        RowView {
            dst: &self.dst[a..b],
            lower: &self.lower[a..b],
            upper: &self.upper[a..b],
        }
    }

    /// `(lower, upper)` bound on entering the target in one step.
    #[inline]
    pub fn reward(&self, s: usize) -> (T, T) {
        self.reward[s]
    }

    /// `(lower, upper)` bound on leaving the domain in one step.
    #[inline]
    pub fn loss(&self, s: usize) -> (T, T) {
        self.loss[s]
    }

    #[inline]
    pub fn pruned(&self, s: usize) -> T {
        self.pruned[s]
    }

    pub fn confidence(&self) -> T {
        self.confidence
    }

    pub fn prune_threshold(&self) -> T {
        self.prune_threshold
    }

    pub fn variance(&self) -> TransitionVariance {
        self.variance
    }

    /// Stored bounds for `s -> d`, or `None` if the pair is not stored.
    pub fn transition(&self, s: usize, d: usize) -> Option<(T, T)> {
        let row = self.row(s);
        let k = row.dst.binary_search(&(d as u32)).ok()?;
        Some((row.lower[k], row.upper[k]))
    }

    /// Writes the triplet file, the per-state table and the metadata into
    /// `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        write_atomic_with(&dir.join(TRIPLETS_FILE), |w| {
            writeln!(w, "# src_cell dst_cell t_lower t_upper")?;
            for s in 0..self.num_states() {
                let row = self.row(s);
                for k in 0..row.dst.len() {
                    writeln!(w, "{} {} {:e} {:e}", s, row.dst[k], row.lower[k], row.upper[k])?;
                }
            }
            Ok(())
        })?;
        write_atomic_with(&dir.join(STATES_FILE), |w| {
            writeln!(w, "# cell r_lower r_upper l_lower l_upper pruned_mass")?;
            for s in 0..self.num_states() {
                let (r, l) = (self.reward[s], self.loss[s]);
                writeln!(w, "{} {:e} {:e} {:e} {:e} {:e}", s, r.0, r.1, l.0, l.1, self.pruned[s])?;
            }
            Ok(())
        })?;
        write_json(
            &dir.join(META_FILE),
            &ImcMeta {
                precision: self.precision,
                init: self.init.to_string(),
                targets: self.targets().iter().map(|c| c.to_string()).collect(),
                confidence: self.confidence,
                prune_threshold: self.prune_threshold,
                variance: self.variance,
                transitions: self.nnz(),
            },
        )
    }

    /// Reads a chain written by [`Imc::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta: ImcMeta<T> = read_json(&dir.join(META_FILE))?;
        check_precision(meta.precision)?;
        let states = 1usize << meta.precision;
        let init: CellId = meta.init.parse()?;
        let targets = meta.targets.iter().map(|t| t.parse()).collect::<Result<Vec<CellId>>>()?;
        let target = target_flags(meta.precision, &targets)?;

        let text = fs::read_to_string(dir.join(TRIPLETS_FILE))?;
        let mut row_ptr = vec![0usize; states + 1];
        let mut dst = Vec::with_capacity(meta.transitions);
        let mut lower = Vec::with_capacity(meta.transitions);
        let mut upper = Vec::with_capacity(meta.transitions);
        let mut last: Option<(usize, usize)> = None;
        for (ln, line) in data_lines(&text) {
            let f = fields::<4>(line, ln, TRIPLETS_FILE)?;
            let s = parse_index(f[0], states, ln, TRIPLETS_FILE)?;
            let d = parse_index(f[1], states, ln, TRIPLETS_FILE)?;
            if let Some(prev) = last {
                if (s, d) <= prev {
                    return Err(Error::parse(format!("{TRIPLETS_FILE}:{ln}: triplets are not sorted by (src, dst)")));
                }
            }
            last = Some((s, d));
            row_ptr[s + 1] += 1;
            dst.push(d as u32);
            lower.push(parse_num::<T>(f[2], ln, TRIPLETS_FILE)?);
            upper.push(parse_num::<T>(f[3], ln, TRIPLETS_FILE)?);
        }
        for s in 0..states {
            row_ptr[s + 1] += row_ptr[s];
        }

        let text = fs::read_to_string(dir.join(STATES_FILE))?;
        let mut reward = Vec::with_capacity(states);
        let mut loss = Vec::with_capacity(states);
        let mut pruned = Vec::with_capacity(states);
        for (ln, line) in data_lines(&text) {
            let f = fields::<6>(line, ln, STATES_FILE)?;
            let s = parse_index(f[0], states, ln, STATES_FILE)?;
            if s != reward.len() {
                return Err(Error::parse(format!("{STATES_FILE}:{ln}: expected state {}", reward.len())));
            }
            let v: Vec<T> = f[1..].iter().map(|x| parse_num(x, ln, STATES_FILE)).collect::<Result<_>>()?;
            reward.push((v[0], v[1]));
            loss.push((v[2], v[3]));
            pruned.push(v[4]);
        }
        if reward.len() != states {
            return Err(Error::parse(format!("{STATES_FILE}: expected {states} states, got {}", reward.len())));
        }

        let imc = Imc {
            precision: meta.precision,
            init,
            target,
            row_ptr,
            dst,
            lower,
            upper,
            reward,
            loss,
            pruned,
            confidence: meta.confidence,
            prune_threshold: meta.prune_threshold,
            variance: meta.variance,
        };
        imc.check()?;
        Ok(imc)
    }

    /// Checks the interval invariants of every row.
    pub fn check(&self) -> Result<()> {
        let unit = |x: T| x >= T::zero() && x <= T::one();
        for s in 0..self.num_states() {
            let row = self.row(s);
            let row = ImcRow {
                dst: row.dst.to_vec(),
                lower: row.lower.to_vec(),
                upper: row.upper.to_vec(),
                pruned: self.pruned[s],
            };
            check_row(s, self.num_states(), &row)?;
            let (r, l) = (self.reward[s], self.loss[s]);
            if !(unit(r.0) && unit(r.1) && r.0 <= r.1 && unit(l.0) && unit(l.1) && l.0 <= l.1) {
                return Err(Error::invalid(format!("state {s}: reward/loss bounds are not nested intervals in [0, 1]")));
            }
        }
        Ok(())
    }
}

fn check_row<T: Real>(s: usize, states: usize, row: &ImcRow<T>) -> Result<()> {
    if row.dst.len() != row.lower.len() || row.dst.len() != row.upper.len() {
        return Err(Error::invalid(format!("state {s}: ragged row")));
    }
    if row.dst.windows(2).any(|w| w[0] >= w[1]) || row.dst.last().is_some_and(|&d| d as usize >= states) {
        return Err(Error::invalid(format!("state {s}: destinations must be sorted, unique and below {states}")));
    }
    for k in 0..row.dst.len() {
        let (l, u) = (row.lower[k], row.upper[k]);
        if !(T::zero() <= l && l <= u && u <= T::one()) {
            return Err(Error::invalid(format!(
                "state {s} -> {}: need 0 <= lower <= upper <= 1, got [{l}, {u}]",
                row.dst[k]
            )));
        }
    }
    if !(row.pruned >= T::zero() && row.pruned.is_finite()) {
        return Err(Error::invalid(format!("state {s}: pruned mass must be nonnegative")));
    }
    let total: T = row.lower.iter().copied().sum();
    if total > T::one() + T::lit(1e-9) {
        return Err(Error::invalid(format!("state {s}: lower bounds sum to {total} > 1")));
    }
    Ok(())
}

type Bounds<T> = ((T, T), (T, T));

fn summarize<T: Real>(row: &ImcRow<T>, target: &[bool]) -> Bounds<T> {
    let (mut r_lo, mut r_hi, mut lo_sum, mut hi_sum) = (T::zero(), T::zero(), T::zero(), T::zero());
    for k in 0..row.dst.len() {
        lo_sum += row.lower[k];
        hi_sum += row.upper[k];
        if target[row.dst[k] as usize] {
            r_lo += row.lower[k];
            r_hi += row.upper[k];
        }
    }
    let r_hi = (r_hi + row.pruned).min(T::one());
    let l_hi = (T::one() - lo_sum).max(T::zero());
    let l_lo = (T::one() - hi_sum - row.pruned).max(T::zero()).min(l_hi);
    ((r_lo.min(r_hi), r_hi), (l_lo, l_hi))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn fields<'a, const K: usize>(line: &'a str, ln: usize, file: &str) -> Result<[&'a str; K]> {
    let mut out = [""; K];
    let mut it = line.split_whitespace();
    for slot in out.iter_mut() {
        *slot = it.next().ok_or_else(|| Error::parse(format!("{file}:{ln}: expected {K} fields")))?;
    }
    if it.next().is_some() {
        return Err(Error::parse(format!("{file}:{ln}: expected {K} fields")));
    }
    Ok(out)
}

fn parse_index(s: &str, states: usize, ln: usize, file: &str) -> Result<usize> {
    let v: usize = s.parse().map_err(|_| Error::parse(format!("{file}:{ln}: bad state index `{s}`")))?;
    if v >= states {
        return Err(Error::parse(format!("{file}:{ln}: state {v} out of range")));
    }
    Ok(v)
}

fn parse_num<T: Real>(s: &str, ln: usize, file: &str) -> Result<T> {
    s.parse().map_err(|_| Error::parse(format!("{file}:{ln}: bad number `{s}`")))
}

/// Per-axis bit pattern that full-precision slice `g` contributes to a cell
/// code; a cell's code is the OR over axes.
fn axis_codes<T: Real>(scheme: &PartitionScheme<T>) -> Vec<Vec<u64>> {
    let shape = scheme.grid_shape();
    (0..scheme.dim())
        .map(|d| {
            let mut g = vec![0usize; scheme.dim()];
            (0..shape[d])
                .map(|i| {
                    g[d] = i;
                    scheme.cell_from_grid(&g).code()
                })
                .collect()
        })
        .collect()
}

fn axis_slices<T: Real>(scheme: &PartitionScheme<T>) -> Vec<Vec<(T, T)>> {
    let shape = scheme.grid_shape();
    (0..scheme.dim())
        .map(|d| (0..shape[d]).map(|g| scheme.slice_bounds(d, g)).collect())
        .collect()
}

/// Per-axis `(lower, upper)` factor of every slice for one Gaussian.
fn factor_tables<T: Real>(slices: &[Vec<(T, T)>], mean: &[T], var: &[T], eps: &[T]) -> Vec<Vec<(T, T)>> {
    slices
        .iter()
        .enumerate()
        .map(|(d, axis)| {
            let std = var[d].sqrt();
            axis.iter()
                .map(|&(a, b)| shifted_interval_bounds(a, b, mean[d], std, eps[d]))
                .collect()
        })
        .collect()
}

/// Row of one source from its factor tables. Destinations whose upper bound
/// falls below `threshold` are dropped and their upper mass accumulated.
fn product_row<T: Real>(tables: &[Vec<(T, T)>], codes: &[Vec<u64>], threshold: T) -> ImcRow<T> {
    let n = tables.len();
    let mut pruned = T::zero();
    // Slices that can still reach the threshold; every factor is <= 1.
    let cand: Vec<Vec<usize>> = tables
        .iter()
        .map(|t| (0..t.len()).filter(|&g| t[g].1 >= threshold && t[g].1 > T::zero()).collect())
        .collect();
    // Destinations with some axis outside its candidates, grouped by the
    // first such axis: prod_{e<d} C_e * R_d * prod_{e>d} S_e.
    let kept: Vec<T> = (0..n).map(|d| cand[d].iter().map(|&g| tables[d][g].1).sum()).collect();
    let total: Vec<T> = tables.iter().map(|t| t.iter().map(|f| f.1).sum()).collect();
    for d in 0..n {
        let rest: T = (0..tables[d].len())
            .filter(|g| cand[d].binary_search(g).is_err())
            .map(|g| tables[d][g].1)
            .sum();
        if rest > T::zero() {
            let mut m = rest;
            for e in 0..n {
                if e < d {
                    m *= kept[e];
                } else if e > d {
                    m *= total[e];
                }
            }
            pruned += m;
        }
    }

    let mut entries: Vec<(u64, T, T)> = Vec::new();
    if cand.iter().all(|c| !c.is_empty()) {
        entries.reserve(cand.iter().map(|c| c.len()).product());
        let mut idx = vec![0usize; n];
        'outer: loop {
            let (mut lo, mut hi, mut code) = (T::one(), T::one(), 0u64);
            for d in 0..n {
                let g = cand[d][idx[d]];
                lo *= tables[d][g].0;
                hi *= tables[d][g].1;
                code |= codes[d][g];
            }
            if hi >= threshold && hi > T::zero() {
                entries.push((code, lo, hi));
            } else {
                pruned += hi;
            }
            let mut d = n;
            loop {
                if d == 0 {
                    break 'outer;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < cand[d].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
    entries.sort_unstable_by_key(|e| e.0);
    ImcRow {
        dst: entries.iter().map(|e| e.0 as u32).collect(),
        lower: entries.iter().map(|e| e.1).collect(),
        upper: entries.iter().map(|e| e.2).collect(),
        pruned,
    }
}

fn check_inputs<T: Real>(
    scheme: &PartitionScheme<T>,
    output_dim: usize,
    errors: &ErrorTable<T>,
    targets: &[CellId],
    x_init: &[T],
    options: &ImcOptions<T>,
) -> Result<(CellId, Vec<bool>)> {
    options.validate()?;
    check_precision(scheme.precision())?;
    if errors.precision != scheme.precision() || errors.eps.len() != scheme.num_cells() {
        return Err(Error::InconsistentScheme(format!(
            "error table has precision {}, model has {}",
            errors.precision,
            scheme.precision()
        )));
    }
    if errors.dim() != output_dim || output_dim != scheme.dim() {
        return Err(Error::InconsistentScheme(format!(
            "error table has {} dimensions, model has {output_dim}, domain has {}",
            errors.dim(),
            scheme.dim()
        )));
    }
    let set: BTreeSet<CellId> = targets.iter().copied().collect();
    let flags = target_flags(scheme.precision(), &set.into_iter().collect::<Vec<_>>())?;
    let init = scheme.encode(x_init)?;
    Ok((init, flags))
}

/// Interval Markov chain of a fitted BTGP with the given error radii.
pub fn build_imc<T: Real>(
    model: &BtgpModel<T>,
    errors: &ErrorTable<T>,
    targets: &[CellId],
    x_init: &[T],
    options: &ImcOptions<T>,
) -> Result<Imc<T>> {
    let scheme = model.scheme();
    let (init, target) = check_inputs(scheme, model.dim(), errors, targets, x_init, options)?;
    let codes = axis_codes(scheme);
    let slices = axis_slices(scheme);
    let noise = model.noise_std();
    let rows: Vec<ImcRow<T>> = (0..scheme.num_cells())
        .into_par_iter()
        .map(|i| {
            let s = scheme.cell_at(i);
            let var: Vec<T> = model.variances(&s).iter().map(|&v| options.variance.apply(v, noise)).collect();
            let tables = factor_tables(&slices, model.means(&s), &var, errors.radii(&s));
            product_row(&tables, &codes, options.prune_threshold)
        })
        .collect();
    Imc::assemble(
        scheme.precision(),
        init,
        target,
        rows,
        errors.confidence,
        options.prune_threshold,
        options.variance,
    )
}

/// Settings of the continuous-posterior baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceOptions<T> {
    /// Sample points per axis inside each source cell.
    pub grid: usize,
    /// Process noise, used by the noise-based variance modes.
    pub noise_std: T,
    pub imc: ImcOptions<T>,
}

/// Baseline abstraction from a posterior that varies inside cells.
///
/// Each source cell is sampled on a `grid^n` lattice of cell-centered
/// points; the bounds are the max/min over those points of the per-point
/// bounds. This is an outer-approximation heuristic kept for timing
/// comparisons, with no guarantee between the sample points.
pub fn build_imc_continuous_reference<T: Real, P: Posterior<T>>(
    posterior: &P,
    scheme: &PartitionScheme<T>,
    errors: &ErrorTable<T>,
    targets: &[CellId],
    x_init: &[T],
    options: &ReferenceOptions<T>,
) -> Result<Imc<T>> {
    let (init, target) = check_inputs(scheme, posterior.output_dim(), errors, targets, x_init, &options.imc)?;
    if options.grid == 0 {
        return Err(Error::invalid("in-cell grid needs at least one point per axis"));
    }
    let n = scheme.dim();
    let slices = axis_slices(scheme);
    let dests: Vec<Vec<usize>> = scheme.cells().map(|c| scheme.grid_of(&c).0).collect();
    let threshold = options.imc.prune_threshold;
    let m = options.grid;
    let points = m.pow(n as u32);
    let rows: Vec<ImcRow<T>> = (0..scheme.num_cells())
        .into_par_iter()
        .map(|i| -> Result<ImcRow<T>> {
            let s = scheme.cell_at(i);
            let cell = scheme.cell_box(&s)?;
            let eps = errors.radii(&s);
            let mut tables = Vec::with_capacity(points);
            for p in 0..points {
                let mut rem = p;
                let x: Vec<T> = (0..n)
                    .map(|d| {
                        let k = rem % m;
                        rem /= m;
                        let (a, b) = (cell.lower()[d], cell.upper()[d]);
                        a + (b - a) * ((T::from_count(k) + T::lit(0.5)) / T::from_count(m))
                    })
                    .collect();
                let (mean, var) = posterior.predict(&x)?;
                let var: Vec<T> = var.iter().map(|&v| options.imc.variance.apply(v, options.noise_std)).collect();
                tables.push(factor_tables(&slices, &mean, &var, eps));
            }
            let mut entries = Vec::new();
            let mut pruned = T::zero();
            for (j, g) in dests.iter().enumerate() {
                let (mut lo, mut hi) = (T::infinity(), T::zero());
                for t in &tables {
                    let (mut pl, mut ph) = (T::one(), T::one());
                    for d in 0..n {
                        pl *= t[d][g[d]].0;
                        ph *= t[d][g[d]].1;
                    }
                    lo = lo.min(pl);
                    hi = hi.max(ph);
                }
                if hi >= threshold && hi > T::zero() {
                    entries.push((j, lo, hi));
                } else {
                    pruned += hi;
                }
            }
            ImcRow::new(entries, pruned)
        })
        .collect::<Result<_>>()?;
    Imc::assemble(
        scheme.precision(),
        init,
        target,
        rows,
        errors.confidence,
        threshold,
        options.imc.variance,
    )
}

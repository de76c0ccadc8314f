//! Interval iteration on an interval Markov chain.
//!
//! Two passes bracket the robust reachability probability: the min pass
//! drives both envelopes with the minimizing distribution of the current
//! row polytope and yields the lower value, the max pass does the same with
//! the maximizing distribution and yields the upper value. Target cells are
//! absorbing with value 1 and are never updated.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::Imc;
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic_with, write_json};
use crate::partition::{CellId, PartitionScheme};
use crate::real::Real;

pub const DEFAULT_NU: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 1_000_000;

/// Slack on the simplex constraint of an inner problem.
const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Successor<T> {
    /// Cell index, used to break ties between equal values.
    pub id: usize,
    pub lower: T,
    pub upper: T,
    pub value: T,
}

/// `optimize r + sum_j t_j V_j` over `t_j in [lower_j, upper_j]`,
/// `r in reward`, `l in loss`, `r + l + sum_j t_j = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerProblem<T> {
    pub successors: Vec<Successor<T>>,
    pub reward: (T, T),
    pub loss: (T, T),
}

/// Optimal distribution of an inner problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Witness<T> {
    /// Mass per successor, in the order of the problem.
    pub successors: Vec<T>,
    pub reward: T,
    pub loss: T,
}

impl<T: Real> InnerProblem<T> {
    pub fn check(&self) -> Result<()> {
        let ok = |(l, u): (T, T)| l.is_finite() && u.is_finite() && T::zero() <= l && l <= u;
        if !ok(self.reward) || !ok(self.loss) || !self.successors.iter().all(|s| ok((s.lower, s.upper)) && s.value.is_finite()) {
            return Err(Error::invalid("inner problem needs finite bounds with 0 <= lower <= upper"));
        }
        let (lo, hi) = self.mass_range();
        let tol = T::lit(FEASIBILITY_TOL);
        if lo > T::one() + tol || hi < T::one() - tol {
            return Err(Error::Infeasible(format!("total mass ranges over [{lo}, {hi}], which excludes 1")));
        }
        Ok(())
    }

    fn mass_range(&self) -> (T, T) {
        let mut lo: T = self.successors.iter().map(|s| s.lower).sum();
        let mut hi: T = self.successors.iter().map(|s| s.upper).sum();
        lo += self.reward.0 + self.loss.0;
        hi += self.reward.1 + self.loss.1;
        (lo, hi)
    }
}

/// Moves up to `slack` out of `rem`.
#[inline]
fn take<T: Real>(rem: &mut T, slack: T) -> T {
    let a = slack.min(*rem).max(T::zero());
    *rem -= a;
    a
}

/// Solves an inner problem by greedy assignment: every item starts at its
/// lower bound and the remaining mass goes to the best items first, with the
/// reward worth 1 and the loss worth 0. Equal values are ordered by cell id;
/// the reward precedes cells of value 1 and the loss precedes cells of
/// value 0 whenever they would receive mass first.
pub fn solve_inner<T: Real>(p: &InnerProblem<T>, sense: Sense) -> Result<(T, Witness<T>)> {
    p.check()?;
    let mut w = Witness {
        successors: p.successors.iter().map(|s| s.lower).collect(),
        reward: p.reward.0,
        loss: p.loss.0,
    };
    let mut obj = p.reward.0;
    let mut lower_sum = T::zero();
    for s in &p.successors {
        obj += s.lower * s.value;
        lower_sum += s.lower;
    }
    let mut rem = (T::one() - (lower_sum + p.reward.0 + p.loss.0)).max(T::zero());
    let mut order: Vec<usize> = (0..p.successors.len()).collect();
    order.sort_by(|&a, &b| compare(&p.successors[a], &p.successors[b], sense));

    let r_slack = p.reward.1 - p.reward.0;
    let l_slack = p.loss.1 - p.loss.0;
    match sense {
        Sense::Max => {
            let a = take(&mut rem, r_slack);
            w.reward += a;
            obj += a;
        }
        Sense::Min => w.loss += take(&mut rem, l_slack),
    }
    for &j in &order {
        if rem <= T::zero() {
            break;
        }
        let s = &p.successors[j];
        let a = take(&mut rem, s.upper - s.lower);
        w.successors[j] += a;
        obj += a * s.value;
    }
    match sense {
        Sense::Max => w.loss += take(&mut rem, l_slack),
        Sense::Min => {
            let a = take(&mut rem, r_slack);
            w.reward += a;
            obj += a;
        }
    }
    Ok((obj, w))
}

fn compare<T: Real>(a: &Successor<T>, b: &Successor<T>, sense: Sense) -> std::cmp::Ordering {
    let by_value = match sense {
        Sense::Max => b.value.partial_cmp(&a.value),
        Sense::Min => a.value.partial_cmp(&b.value),
    };
    by_value.unwrap_or(std::cmp::Ordering::Equal).then(a.id.cmp(&b.id))
}

/// Lower and upper value envelopes of one pass.
///
/// Rows are compressed to their non-target successors; target mass is
/// carried by the reward bounds.
pub struct IntervalIteration<'a, T> {
    imc: &'a Imc<T>,
    /// Non-target states.
    active: Vec<u32>,
    ptr: Vec<usize>,
    dst: Vec<u32>,
    lo: Vec<T>,
    slack: Vec<T>,
    reward_lo: Vec<T>,
    reward_slack: Vec<T>,
    loss_slack: Vec<T>,
    /// `1 - sum of lower bounds` per active state.
    free: Vec<T>,
    lower: Vec<T>,
    upper: Vec<T>,
    sense: Sense,
    iterations: usize,
}

struct Scratch {
    stamp: Vec<u32>,
    slot: Vec<u32>,
    pairs: Vec<(u32, u32)>,
}

impl<'a, T: Real> IntervalIteration<'a, T> {
    pub fn new(imc: &'a Imc<T>, sense: Sense) -> Result<Self> {
        let states = imc.num_states();
        let active: Vec<u32> = (0..states).filter(|&s| !imc.is_target(s)).map(|s| s as u32).collect();
        let mut it = IntervalIteration {
            imc,
            ptr: Vec::with_capacity(active.len() + 1),
            dst: Vec::new(),
            lo: Vec::new(),
            slack: Vec::new(),
            reward_lo: Vec::with_capacity(active.len()),
            reward_slack: Vec::with_capacity(active.len()),
            loss_slack: Vec::with_capacity(active.len()),
            free: Vec::with_capacity(active.len()),
            lower: Vec::new(),
            upper: Vec::new(),
            sense,
            iterations: 0,
            active,
        };
        it.ptr.push(0);
        for &s in &it.active {
            let s = s as usize;
            let row = imc.row(s);
            let (r, l) = (imc.reward(s), imc.loss(s));
            let mut lower_sum = T::zero();
            for k in 0..row.dst.len() {
                if !imc.is_target(row.dst[k] as usize) {
                    it.dst.push(row.dst[k]);
                    it.lo.push(row.lower[k]);
                    it.slack.push(row.upper[k] - row.lower[k]);
                    lower_sum += row.lower[k];
                }
            }
            it.ptr.push(it.dst.len());
            let total = lower_sum + r.0 + l.0;
            let upper_total = total + (r.1 - r.0) + (l.1 - l.0) + it.slack[it.ptr[it.ptr.len() - 2]..].iter().copied().sum::<T>();
            let tol = T::lit(FEASIBILITY_TOL);
            if total > T::one() + tol || upper_total < T::one() - tol {
                return Err(Error::Infeasible(format!(
                    "state {s}: total mass ranges over [{total}, {upper_total}], which excludes 1"
                )));
            }
            it.reward_lo.push(r.0);
            it.reward_slack.push(r.1 - r.0);
            it.loss_slack.push(l.1 - l.0);
            it.free.push((T::one() - total).max(T::zero()));
        }
        it.reset(sense);
        Ok(it)
    }

    /// Restarts from `upper = 1`, `lower = 0` off the target.
    pub fn reset(&mut self, sense: Sense) {
        let states = self.imc.num_states();
        self.sense = sense;
        self.iterations = 0;
        self.upper = vec![T::one(); states];
        self.lower = (0..states)
            .map(|s| if self.imc.is_target(s) { T::one() } else { T::zero() })
            .collect();
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// `max_s (upper(s) - lower(s))`.
    pub fn gap(&self) -> T {
        self.active
            .iter()
            .map(|&s| self.upper[s as usize] - self.lower[s as usize])
            .fold(T::zero(), T::max)
    }

    /// One synchronous Bellman update of both envelopes. Returns `false`
    /// if nothing changed, i.e. the iteration sits at a fixed point.
    pub fn step(&mut self) -> bool {
        let lower = self.update(&self.lower);
        let upper = self.update(&self.upper);
        let mut moved = false;
        for (a, &s) in self.active.iter().enumerate() {
            let s = s as usize;
            moved |= self.lower[s] != lower[a] || self.upper[s] != upper[a];
            self.lower[s] = lower[a];
            self.upper[s] = upper[a];
        }
        self.iterations += 1;
        moved
    }

    /// Optimal row values against `v` for every active state.
    fn update(&self, v: &[T]) -> Vec<T> {
        let states = self.imc.num_states();
        let mut order = self.active.clone();
        let sense = self.sense;
        order.sort_unstable_by(|&a, &b| {
            let (va, vb) = (v[a as usize], v[b as usize]);
            let c = match sense {
                Sense::Max => vb.partial_cmp(&va),
                Sense::Min => va.partial_cmp(&vb),
            };
            c.unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut rank = vec![0u32; states];
        for (i, &s) in order.iter().enumerate() {
            rank[s as usize] = i as u32;
        }
        (0..self.active.len())
            .into_par_iter()
            .map_init(
                || Scratch {
                    stamp: vec![0; states],
                    slot: vec![0; states],
                    pairs: Vec::new(),
                },
                |sc, a| self.row_value(a, v, &order, &rank, sc),
            )
            .collect()
    }

    fn row_value(&self, a: usize, v: &[T], order: &[u32], rank: &[u32], sc: &mut Scratch) -> T {
        let (p0, p1) = (self.ptr[a], self.ptr[a + 1]);
        let dst = &self.dst[p0..p1];
        let lo = &self.lo[p0..p1];
        let slack = &self.slack[p0..p1];
        let mut obj = self.reward_lo[a];
        for k in 0..dst.len() {
            obj += lo[k] * v[dst[k] as usize];
        }
        let mut rem = self.free[a];
        match self.sense {
            Sense::Max => obj += take(&mut rem, self.reward_slack[a]),
            Sense::Min => {
                take(&mut rem, self.loss_slack[a]);
            }
        }
        if rem > T::zero() && !dst.is_empty() {
            if dst.len() * 16 < order.len() {
                sc.pairs.clear();
                sc.pairs.extend(dst.iter().enumerate().map(|(k, &d)| (rank[d as usize], k as u32)));
                sc.pairs.sort_unstable();
                for &(_, k) in &sc.pairs {
                    let k = k as usize;
                    obj += take(&mut rem, slack[k]) * v[dst[k] as usize];
                    if rem <= T::zero() {
                        break;
                    }
                }
            } else {
                let tag = a as u32 + 1;
                for (k, &d) in dst.iter().enumerate() {
                    sc.stamp[d as usize] = tag;
                    sc.slot[d as usize] = k as u32;
                }
                let mut seen = 0;
                for &u in order {
                    if sc.stamp[u as usize] != tag {
                        continue;
                    }
                    let k = sc.slot[u as usize] as usize;
                    obj += take(&mut rem, slack[k]) * v[u as usize];
                    seen += 1;
                    if rem <= T::zero() || seen == dst.len() {
                        break;
                    }
                }
            }
        }
        if self.sense == Sense::Min && rem > T::zero() {
            obj += take(&mut rem, self.reward_slack[a]);
        }
        obj.max(T::zero()).min(T::one())
    }

    /// Inner problem of state `s` against the value vector `v`.
    pub fn inner_problem(&self, s: usize, v: &[T]) -> Option<InnerProblem<T>> {
        let a = self.active.binary_search(&(s as u32)).ok()?;
        let (p0, p1) = (self.ptr[a], self.ptr[a + 1]);
        Some(InnerProblem {
            successors: (p0..p1)
                .map(|k| Successor {
                    id: self.dst[k] as usize,
                    lower: self.lo[k],
                    upper: self.lo[k] + self.slack[k],
                    value: v[self.dst[k] as usize],
                })
                .collect(),
            reward: self.imc.reward(s),
            loss: self.imc.loss(s),
        })
    }
}

/// Stopping rule of [`interval_iteration`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationOptions<T> {
    pub nu: T,
    pub max_iters: usize,
}

impl<T: Real> Default for IterationOptions<T> {
    fn default() -> Self {
        IterationOptions {
            nu: T::lit(DEFAULT_NU),
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

/// Certified value bounds per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ValueBounds<T> {
    pub precision: usize,
    pub v_min: Vec<T>,
    /// Upper envelope of the max pass plus the pruned mass, clamped to 1.
    pub v_max: Vec<T>,
    /// Pruned mass added to `v_max`.
    pub inflation: Vec<T>,
    pub iterations_min: usize,
    pub iterations_max: usize,
    pub gap_min: T,
    pub gap_max: T,
    pub nu: T,
    /// False if either pass hit the iteration cap.
    pub converged: bool,
}

impl<T: Real> ValueBounds<T> {
    pub fn num_states(&self) -> usize {
        self.v_min.len()
    }

    /// Largest final envelope gap of the two passes.
    pub fn gap(&self) -> T {
        self.gap_min.max(self.gap_max)
    }

    pub fn iterations(&self) -> usize {
        self.iterations_min + self.iterations_max
    }

    /// Writes `cell_id bitstring v_min v_max`, one cell per line.
    pub fn write_results(&self, path: &Path) -> Result<()> {
        write_atomic_with(path, |w| {
            writeln!(w, "# cell_id bitstring v_min v_max")?;
            for s in 0..self.num_states() {
                let c = CellId::new(s as u64, self.precision).expect("state index below 2^q");
                writeln!(w, "{s} {c} {:e} {:e}", self.v_min[s], self.v_max[s])?;
            }
            Ok(())
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let b: Self = read_json(path)?;
        let n = 1usize << b.precision.min(40);
        if b.v_min.len() != n || b.v_max.len() != n || b.inflation.len() != n {
            return Err(Error::parse(format!("value bounds need {n} entries per table")));
        }
        Ok(b)
    }
}

/// Runs both passes of interval iteration.
///
/// Hitting `max_iters`, or a fixed point whose gap still exceeds `nu` (an
/// end component holding the upper envelope at 1), is not an error: every
/// iterate is a sound bound, so the envelopes are returned with
/// `converged == false` and the achieved gaps.
pub fn interval_iteration<T: Real>(imc: &Imc<T>, options: &IterationOptions<T>) -> Result<ValueBounds<T>> {
    if !(options.nu > T::zero() && options.nu.is_finite()) {
        return Err(Error::invalid(format!("stopping threshold must be positive, got {}", options.nu)));
    }
    if options.max_iters == 0 {
        return Err(Error::invalid("iteration cap must be positive"));
    }
    let mut it = IntervalIteration::new(imc, Sense::Min)?;
    let mut converged = true;
    // A sweep that changes nothing leaves every later sweep unchanged too,
    // so the cap would return the same envelopes.
    let mut run = |it: &mut IntervalIteration<T>| {
        while it.gap() > options.nu {
            if it.iterations() >= options.max_iters || !it.step() {
                converged = false;
                break;
            }
        }
    };
    run(&mut it);
    let v_min = it.lower().to_vec();
    let (iterations_min, gap_min) = (it.iterations(), it.gap());
    log::debug!("min pass: {iterations_min} iterations, gap {gap_min:e}");

    it.reset(Sense::Max);
    run(&mut it);
    let (iterations_max, gap_max) = (it.iterations(), it.gap());
    log::debug!("max pass: {iterations_max} iterations, gap {gap_max:e}");

    let inflation: Vec<T> = (0..imc.num_states())
        .map(|s| if imc.is_target(s) { T::zero() } else { imc.pruned(s) })
        .collect();
    let v_max = it
        .upper()
        .iter()
        .zip(&inflation)
        .map(|(&v, &p)| (v + p).min(T::one()))
        .collect();
    if !converged {
        log::warn!("interval iteration stopped at the cap of {} iterations", options.max_iters);
    }
    Ok(ValueBounds {
        precision: imc.precision(),
        v_min,
        v_max,
        inflation,
        iterations_min,
        iterations_max,
        gap_min,
        gap_max,
        nu: options.nu,
        converged,
    })
}

/// Robust satisfaction bounds at the initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct Certificate<T> {
    pub init_cell: String,
    pub init_index: usize,
    pub v_min: T,
    pub v_max: T,
    /// Probability with which the error radii hold.
    pub confidence: T,
    pub nu: T,
    pub iterations_min: usize,
    pub iterations_max: usize,
    pub gap: T,
    pub inflation: T,
    pub converged: bool,
}

impl<T: Real> Certificate<T> {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

impl<T: Real> fmt::Display for Certificate<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "s_init={} P in [{:.6e}, {:.6e}] with confidence {:.4} (nu={:e}, iterations {}+{}, gap {:e}{})",
            self.init_cell,
            self.v_min,
            self.v_max,
            self.confidence,
            self.nu,
            self.iterations_min,
            self.iterations_max,
            self.gap,
            if self.converged { "" } else { ", NOT CONVERGED" }
        )
    }
}

pub fn certify<T: Real>(
    imc: &Imc<T>,
    scheme: &PartitionScheme<T>,
    x_init: &[T],
    bounds: &ValueBounds<T>,
) -> Result<Certificate<T>> {
    if scheme.precision() != imc.precision() || bounds.precision != imc.precision() {
        return Err(Error::InconsistentScheme(format!(
            "scheme, chain and bounds have precisions {}, {} and {}",
            scheme.precision(),
            imc.precision(),
            bounds.precision
        )));
    }
    let s = scheme.encode(x_init)?;
    let i = s.index();
    Ok(Certificate {
        init_cell: s.to_string(),
        init_index: i,
        v_min: bounds.v_min[i],
        v_max: bounds.v_max[i],
        confidence: imc.confidence(),
        nu: bounds.nu,
        iterations_min: bounds.iterations_min,
        iterations_max: bounds.iterations_max,
        gap: bounds.gap(),
        inflation: bounds.inflation[i],
        converged: bounds.converged,
    })
}

//! Binary partition of a box-shaped state space.
//!
//! A [`PartitionScheme`] of precision `q` halves the domain `q` times, bit
//! `i` splitting dimension `split_order[i]`. The resulting [`CellId`] is the
//! path through that binary tree; its first bit is the most significant bit
//! of the integer code. Cells are half-open on every split except the
//! topmost slice of each axis, which is closed, so every point of the closed
//! domain encodes to exactly one cell.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Maximum supported precision (cell codes are stored in a `u64`).
pub const MAX_PRECISION: usize = 40;

/// Axis-aligned box `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox<T> {
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Real> StateBox<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid(format!(
                "box bounds need equal nonzero lengths, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (d, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::invalid(format!("box dimension {d}: need lower < upper, got [{l}, {u}]")));
            }
        }
        Ok(StateBox { lower, upper })
    }

    /// Box that may be degenerate (`lower <= upper`); used for cells and
    /// regions rather than domains.
    pub fn closed(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid("box bounds need equal nonzero lengths"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::invalid("box needs lower <= upper"));
        }
        Ok(StateBox { lower, upper })
    }

    /// `[-half, half]^n` style convenience constructor.
    pub fn cube(n: usize, lower: T, upper: T) -> Result<Self> {
        StateBox::new(vec![lower; n], vec![upper; n])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.len() == self.dim() && x.iter().enumerate().all(|(d, &v)| self.lower[d] <= v && v <= self.upper[d])
    }

    pub fn contains_box(&self, other: &StateBox<T>) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|d| self.lower[d] <= other.lower[d] && other.upper[d] <= self.upper[d])
    }

    pub fn intersects(&self, other: &StateBox<T>) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|d| self.lower[d] <= other.upper[d] && other.lower[d] <= self.upper[d])
    }

    pub fn center(&self) -> Vec<T> {
        let two = T::lit(2.0);
        self.lower.iter().zip(&self.upper).map(|(&l, &u)| (l + u) / two).collect()
    }

    pub fn half_widths(&self) -> Vec<T> {
        let two = T::lit(2.0);
        self.lower.iter().zip(&self.upper).map(|(&l, &u)| (u - l) / two).collect()
    }
}

/// Node of the binary partition tree: a bit string of length `len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    code: u64,
    len: u32,
}

impl CellId {
    pub fn new(code: u64, len: usize) -> Result<Self> {
        if len > MAX_PRECISION || (len < 64 && code >> len != 0) {
            return Err(Error::invalid(format!("code {code} does not fit in {len} bits")));
        }
        Ok(CellId { code, len: len as u32 })
    }

    pub const fn root() -> Self {
        CellId { code: 0, len: 0 }
    }

    /// Integer value of the bit string.
    #[inline]
    pub fn code(&self) -> u64 {
        self.code
    }

    /// Integer value as an index, for tables over all cells.
    #[inline]
    pub fn index(&self) -> usize {
        self.code as usize
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len as usize
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Bit `i` (0-based, from the root).
    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.len());
        (self.code >> (self.len() - 1 - i)) & 1 == 1
    }

    /// Ancestor at level `l`; `l` must not exceed `len()`.
    #[inline]
    pub fn prefix(&self, l: usize) -> CellId {
        assert!(l <= self.len(), "prefix longer than the cell");
        CellId {
            code: self.code >> (self.len() - l),
            len: l as u32,
        }
    }

    pub fn child(&self, bit: bool) -> CellId {
        CellId {
            code: (self.code << 1) | bit as u64,
            len: self.len + 1,
        }
    }

    pub fn is_prefix_of(&self, other: &CellId) -> bool {
        self.len <= other.len && other.prefix(self.len()) == *self
    }

    /// Length of the longest common prefix of two equal-length cells.
    #[inline]
    pub fn common_prefix_len(&self, other: &CellId) -> usize {
        debug_assert_eq!(self.len, other.len);
        let diff = self.code ^ other.code;
        if diff == 0 {
            self.len()
        } else {
            self.len() - (64 - diff.leading_zeros() as usize)
        }
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len() {
            f.write_str(if self.bit(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() > MAX_PRECISION {
            return Err(Error::parse(format!("bit string `{s}` is too long")));
        }
        let mut code = 0u64;
        for ch in s.chars() {
            code = (code << 1)
                | match ch {
                    '0' => 0,
                    '1' => 1,
                    _ => return Err(Error::parse(format!("`{s}` is not a bit string"))),
                };
        }
        Ok(CellId { code, len: s.len() as u32 })
    }
}

/// Map from the domain box into bit strings of length `precision`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemeRepr<T>", into = "SchemeRepr<T>")]
#[serde(bound = "T: Real")]
pub struct PartitionScheme<T> {
    domain: StateBox<T>,
    split_order: Vec<usize>,
    /// Number of splits of each dimension over all `precision` bits.
    splits: Vec<usize>,
    /// For bit `i`, how many earlier bits split the same dimension.
    occurrence: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct SchemeRepr<T> {
    lower: Vec<T>,
    upper: Vec<T>,
    split_order: Vec<usize>,
}

impl<T: Real> TryFrom<SchemeRepr<T>> for PartitionScheme<T> {
    type Error = Error;
    fn try_from(r: SchemeRepr<T>) -> Result<Self> {
        PartitionScheme::with_split_order(StateBox::new(r.lower, r.upper)?, r.split_order)
    }
}

impl<T: Real> From<PartitionScheme<T>> for SchemeRepr<T> {
    fn from(s: PartitionScheme<T>) -> Self {
        SchemeRepr {
            lower: s.domain.lower,
            upper: s.domain.upper,
            split_order: s.split_order,
        }
    }
}

impl<T: Real> PartitionScheme<T> {
    /// Cyclic splitting: bit `i` halves dimension `i mod n`.
    pub fn cyclic(domain: StateBox<T>, precision: usize) -> Result<Self> {
        let n = domain.dim();
        PartitionScheme::with_split_order(domain, (0..precision).map(|i| i % n).collect())
    }

    pub fn with_split_order(domain: StateBox<T>, split_order: Vec<usize>) -> Result<Self> {
        let q = split_order.len();
        if q == 0 || q > MAX_PRECISION {
            return Err(Error::invalid(format!("precision must be in 1..={MAX_PRECISION}, got {q}")));
        }
        let n = domain.dim();
        if let Some(&d) = split_order.iter().find(|&&d| d >= n) {
            return Err(Error::invalid(format!("split dimension {d} out of range for n = {n}")));
        }
        let mut splits = vec![0; n];
        let mut occurrence = Vec::with_capacity(q);
        for &d in &split_order {
            occurrence.push(splits[d]);
            splits[d] += 1;
        }
        Ok(PartitionScheme {
            domain,
            split_order,
            splits,
            occurrence,
        })
    }

    pub fn domain(&self) -> &StateBox<T> {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn precision(&self) -> usize {
        self.split_order.len()
    }

    pub fn split_order(&self) -> &[usize] {
        &self.split_order
    }

    pub fn num_cells(&self) -> usize {
        1usize << self.precision()
    }

    /// All level-`q` cells in integer order.
    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        let q = self.precision() as u32;
        (0..self.num_cells() as u64).map(move |code| CellId { code, len: q })
    }

    pub fn cell_at(&self, index: usize) -> CellId {
        debug_assert!(index < self.num_cells());
        CellId {
            code: index as u64,
            len: self.precision() as u32,
        }
    }

    /// Slices per axis at full precision.
    pub fn grid_shape(&self) -> Vec<usize> {
        self.splits.iter().map(|&k| 1usize << k).collect()
    }

    /// Lower edge of slice `index` of axis `d` when the axis is cut into
    /// `2^level` slices. `index == 2^level` yields the upper edge.
    pub fn boundary(&self, d: usize, level: usize, index: usize) -> T {
        let (lo, hi) = (self.domain.lower[d], self.domain.upper[d]);
        let count = 1usize << level;
        if index == 0 {
            lo
        } else if index >= count {
            hi
        } else {
            lo + (hi - lo) * (T::from_count(index) / T::from_count(count))
        }
    }

    /// Full-precision slice `[a, b]` of axis `d`.
    pub fn slice_bounds(&self, d: usize, index: usize) -> (T, T) {
        let k = self.splits[d];
        (self.boundary(d, k, index), self.boundary(d, k, index + 1))
    }

    fn check_point(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!("state has {} coordinates, domain has {}", x.len(), self.dim())));
        }
        for (d, &v) in x.iter().enumerate() {
            let (lo, hi) = (self.domain.lower[d], self.domain.upper[d]);
            if !(lo <= v && v <= hi) {
                return Err(Error::OutOfDomain {
                    dim: d,
                    value: v.to_f64().unwrap_or(f64::NAN),
                    lower: lo.to_f64().unwrap_or(f64::NAN),
                    upper: hi.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(())
    }

    fn axis_index(&self, d: usize, v: T) -> usize {
        let k = self.splits[d];
        let count = 1usize << k;
        if k == 0 {
            return 0;
        }
        let (lo, hi) = (self.domain.lower[d], self.domain.upper[d]);
        let guess = ((v - lo) / (hi - lo) * T::from_count(count)).floor();
        let mut g = guess.to_usize().unwrap_or(0).min(count - 1);
        while g > 0 && v < self.boundary(d, k, g) {
            g -= 1;
        }
        while g + 1 < count && v >= self.boundary(d, k, g + 1) {
            g += 1;
        }
        g
    }

    /// Full-precision grid coordinates of a point in the domain.
    pub fn grid_index(&self, x: &[T]) -> Result<Vec<usize>> {
        self.check_point(x)?;
        Ok((0..self.dim()).map(|d| self.axis_index(d, x[d])).collect())
    }

    /// Cell from full-precision grid coordinates.
    pub fn cell_from_grid(&self, grid: &[usize]) -> CellId {
        let mut code = 0u64;
        for (i, &d) in self.split_order.iter().enumerate() {
            let bit = (grid[d] >> (self.splits[d] - 1 - self.occurrence[i])) & 1;
            code = (code << 1) | bit as u64;
        }
        CellId {
            code,
            len: self.precision() as u32,
        }
    }

    /// Grid coordinates of a (possibly partial) cell, together with the
    /// number of splits applied to each axis so far.
    pub fn grid_of(&self, s: &CellId) -> (Vec<usize>, Vec<usize>) {
        let mut g = vec![0usize; self.dim()];
        let mut level = vec![0usize; self.dim()];
        for i in 0..s.len() {
            let d = self.split_order[i];
            g[d] = (g[d] << 1) | s.bit(i) as usize;
            level[d] += 1;
        }
        (g, level)
    }

    /// Maps a state to its level-`q` cell.
    pub fn encode(&self, x: &[T]) -> Result<CellId> {
        let g = self.grid_index(x)?;
        Ok(self.cell_from_grid(&g))
    }

    /// Box of states represented by `s` (any prefix length up to `q`).
    pub fn cell_box(&self, s: &CellId) -> Result<StateBox<T>> {
        if s.len() > self.precision() {
            return Err(Error::invalid(format!(
                "cell of length {} exceeds precision {}",
                s.len(),
                self.precision()
            )));
        }
        let (g, level) = self.grid_of(s);
        let lower = (0..self.dim()).map(|d| self.boundary(d, level[d], g[d])).collect();
        let upper = (0..self.dim()).map(|d| self.boundary(d, level[d], g[d] + 1)).collect();
        StateBox::closed(lower, upper)
    }

    /// Midpoint of a level-`q` cell.
    pub fn cell_center(&self, s: &CellId) -> Result<Vec<T>> {
        if s.len() != self.precision() {
            return Err(Error::invalid(format!(
                "cell center needs a full-length cell, got length {}",
                s.len()
            )));
        }
        Ok(self.cell_box(s)?.center())
    }

    /// Level-`q` cells whose boxes lie entirely inside `region`.
    ///
    /// This under-approximates the region, so reaching the returned cells
    /// implies reaching the region.
    pub fn project_set(&self, region: &StateBox<T>) -> Result<Vec<CellId>> {
        if region.dim() != self.dim() || !self.domain.intersects(region) {
            return Err(Error::invalid("region does not intersect the domain"));
        }
        let axes: Vec<Vec<usize>> = (0..self.dim())
            .map(|d| {
                let k = self.splits[d];
                (0..1usize << k)
                    .filter(|&g| {
                        self.boundary(d, k, g) >= region.lower[d] && self.boundary(d, k, g + 1) <= region.upper[d]
                    })
                    .collect()
            })
            .collect();
        let mut cells = Vec::new();
        if axes.iter().all(|a| !a.is_empty()) {
            let mut idx = vec![0usize; self.dim()];
            loop {
                let g: Vec<usize> = (0..self.dim()).map(|d| axes[d][idx[d]]).collect();
                cells.push(self.cell_from_grid(&g));
                let mut d = 0;
                loop {
                    idx[d] += 1;
                    if idx[d] < axes[d].len() {
                        break;
                    }
                    idx[d] = 0;
                    d += 1;
                    if d == self.dim() {
                        break;
                    }
                }
                if d == self.dim() {
                    break;
                }
            }
        }
        if cells.is_empty() {
            log::warn!("no partition cell lies entirely inside the region; projection is empty");
        }
        cells.sort();
        Ok(cells)
    }
}

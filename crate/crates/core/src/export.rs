//! Dense grid export of per-cell values: CSV plus an 8-bit PGM image.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic_with;
use crate::partition::PartitionScheme;
use crate::real::Real;
use crate::verify::ValueBounds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    VMin,
    VMax,
}

impl std::str::FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v_min" | "vmin" => Ok(Which::VMin),
            "v_max" | "vmax" => Ok(Which::VMax),
            _ => Err(Error::invalid(format!("expected v_min or v_max, got `{s}`"))),
        }
    }
}

/// Values on the full-precision grid. Row 0 is the top of the second axis,
/// columns run along the first axis.
pub fn heatmap_grid<T: Real>(values: &[T], scheme: &PartitionScheme<T>) -> Result<Vec<Vec<T>>> {
    if values.len() != scheme.num_cells() {
        return Err(Error::InconsistentScheme(format!(
            "{} values for {} cells",
            values.len(),
            scheme.num_cells()
        )));
    }
    let shape = scheme.grid_shape();
    let (cols, rows) = match shape.len() {
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        n => return Err(Error::invalid(format!("heatmaps need a 1-D or 2-D domain, got {n}-D"))),
    };
    Ok((0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| {
                    let g: Vec<usize> = if shape.len() == 1 { vec![c] } else { vec![c, rows - 1 - r] };
                    values[scheme.cell_from_grid(&g).index()]
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// Writes `path` (CSV) and the same path with a `.pgm` extension.
pub fn export_heatmap<T: Real>(
    bounds: &ValueBounds<T>,
    scheme: &PartitionScheme<T>,
    which: Which,
    path: &Path,
) -> Result<HeatmapFiles> {
    let values = match which {
        Which::VMin => &bounds.v_min,
        Which::VMax => &bounds.v_max,
    };
    let grid = heatmap_grid(values, scheme)?;
    let csv = path.to_path_buf();
    let pgm = path.with_extension("pgm");
    write_atomic_with(&csv, |w| {
        for row in &grid {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    })?;
    write_atomic_with(&pgm, |w| {
        write!(w, "P5\n{} {}\n255\n", grid[0].len(), grid.len())?;
        let px: Vec<u8> = grid
            .iter()
            .flatten()
            .map(|v| {
                let v = v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            })
            .collect();
        w.write_all(&px)
    })?;
    Ok(HeatmapFiles { csv, pgm })
}

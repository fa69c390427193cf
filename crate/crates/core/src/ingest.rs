//! Aggregation of point-level observations onto a regular grid.
//!
//! Each occupied grid cell `k` with `n_k` points gets the mean count
//! `Ybar_k`, the mean library size `Lbar_k`, the response
//! `Z_k = standardize(log(1 + Ybar_k))` and the covariates
//! `(1, log(1 + Lbar_k), log(1 + n_k), s_k1, s_k2)` with standardized cell
//! centers. Empty cells are dropped; occupied cells sharing an edge are
//! neighbours.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::model::{load_model, ModelData};
use crate::simulate::standardize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellRecord {
    pub x: f64,
    pub y: f64,
    pub count: f64,
    pub library_size: f64,
}

/// Validated point-level observations.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    rows: Vec<CellRecord>,
}

impl CellTable {
    pub fn new(rows: Vec<CellRecord>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if !(r.x.is_finite() && r.y.is_finite()) {
                return Err(Error::Parse(format!(
                    "row {}: coordinates must be finite",
                    i + 1
                )));
            }
            if !(r.count.is_finite() && r.count >= 0.0) {
                return Err(Error::Parse(format!(
                    "row {}: count must be a nonnegative number, got {}",
                    i + 1,
                    r.count
                )));
            }
            if !(r.library_size.is_finite() && r.library_size >= 0.0) {
                return Err(Error::Parse(format!(
                    "row {}: library_size must be a nonnegative number, got {}",
                    i + 1,
                    r.library_size
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[CellRecord] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Rectangular study region; points outside it are dropped and counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    fn contains(&self, r: &CellRecord) -> bool {
        r.x >= self.x_min && r.x <= self.x_max && r.y >= self.y_min && r.y <= self.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSize {
    /// Square cells; the longer side of the region is split into this many.
    PerSide(usize),
    /// `columns x rows` cells spanning the region.
    Cells { columns: usize, rows: usize },
    /// Square cells of this width, anchored at the lower-left corner.
    Width(f64),
}

impl GridSize {
    /// Parses `N`, `NxM` (columns by rows).
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("grid size '{s}' is not of the form N or NxM"));
        let positive = |t: &str| -> Result<usize> {
            let v: usize = t.trim().parse().map_err(|_| bad())?;
            if v == 0 {
                return Err(bad());
            }
            Ok(v)
        };
        match s.split_once(['x', 'X']) {
            Some((c, r)) => Ok(GridSize::Cells {
                columns: positive(c)?,
                rows: positive(r)?,
            }),
            None => Ok(GridSize::PerSide(positive(s)?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub size: GridSize,
    /// Region to bin; defaults to the bounding box of the retained points.
    pub bounds: Option<Bounds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Geometry {
    pub x_origin: f64,
    pub y_origin: f64,
    pub cell_width: f64,
    pub cell_height: f64,
    pub columns: usize,
    pub rows: usize,
}

impl Geometry {
    fn new(spec: &GridSpec, region: Bounds) -> Result<Self> {
        let w = region.x_max - region.x_min;
        let h = region.y_max - region.y_min;
        let count = |extent: f64, width: f64| ((extent / width).ceil() as usize).max(1);
        let (cell_width, cell_height, columns, rows) = match spec.size {
            GridSize::PerSide(k) => {
                let side = w.max(h) / k as f64;
                if !(side > 0.0) {
                    return Err(Error::TooFewCells(1));
                }
                (side, side, count(w, side), count(h, side))
            }
            GridSize::Cells { columns, rows } => {
                let cw = if w > 0.0 { w / columns as f64 } else { 1.0 };
                let ch = if h > 0.0 { h / rows as f64 } else { 1.0 };
                (cw, ch, columns, rows)
            }
            GridSize::Width(width) => {
                if !(width > 0.0 && width.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "cell width must be positive, got {width}"
                    )));
                }
                (width, width, count(w, width), count(h, width))
            }
        };
        Ok(Self {
            x_origin: region.x_min,
            y_origin: region.y_min,
            cell_width,
            cell_height,
            columns,
            rows,
        })
    }

    /// `(row, column)` of a point; points on the far edges fall in the last
    /// row or column.
    fn locate(&self, r: &CellRecord) -> (usize, usize) {
        let c = ((r.x - self.x_origin) / self.cell_width).floor().max(0.0) as usize;
        let k = ((r.y - self.y_origin) / self.cell_height).floor().max(0.0) as usize;
        (k.min(self.rows - 1), c.min(self.columns - 1))
    }

    fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_origin + (col as f64 + 0.5) * self.cell_width,
            self.y_origin + (row as f64 + 0.5) * self.cell_height,
        )
    }
}

/// Per-cell aggregates of one occupied grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub row: usize,
    pub column: usize,
    pub center_x: f64,
    pub center_y: f64,
    /// Number of points in the cell, `n_k`.
    pub points: usize,
    pub mean_count: f64,
    pub mean_library_size: f64,
}

/// Areal dataset built from a [`CellTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridDataset {
    /// Occupied cells in row-major order.
    pub cells: Vec<GridCell>,
    /// Standardized `log(1 + Ybar_k)`.
    pub z: DVector<f64>,
    /// `(1, log(1 + Lbar_k), log(1 + n_k), s_k1, s_k2)`.
    pub x: DMatrix<f64>,
    pub graph: AdjacencyGraph,
    pub geometry: Geometry,
    /// Input rows outside the bounds.
    pub dropped_rows: usize,
}

/// Covariate names, in column order of [`GridDataset::x`].
pub const COVARIATES: [&str; 5] = [
    "intercept",
    "log1p_library_size",
    "log1p_points",
    "center_x",
    "center_y",
];

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Bins points onto the grid described by `spec`.
pub fn bin_cells(cells: &CellTable, spec: &GridSpec) -> Result<GridDataset> {
    let retained: Vec<&CellRecord> = match &spec.bounds {
        Some(b) => cells.rows.iter().filter(|r| b.contains(r)).collect(),
        None => cells.rows.iter().collect(),
    };
    let dropped_rows = cells.len() - retained.len();
    if retained.is_empty() {
        return Err(Error::TooFewCells(0));
    }
    let region = spec.bounds.unwrap_or_else(|| {
        let fold = |f: fn(&CellRecord) -> f64, pick: fn(f64, f64) -> f64, init: f64| {
            retained.iter().map(|r| f(r)).fold(init, pick)
        };
        Bounds {
            x_min: fold(|r| r.x, f64::min, f64::INFINITY),
            x_max: fold(|r| r.x, f64::max, f64::NEG_INFINITY),
            y_min: fold(|r| r.y, f64::min, f64::INFINITY),
            y_max: fold(|r| r.y, f64::max, f64::NEG_INFINITY),
        }
    });
    let geometry = Geometry::new(spec, region)?;

    let mut groups: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &retained {
        let entry = groups.entry(geometry.locate(r)).or_default();
        entry.0.push(r.count);
        entry.1.push(r.library_size);
    }
    let m = groups.len();
    if m < 2 {
        return Err(Error::TooFewCells(m));
    }

    let grid_cells: Vec<GridCell> = groups
        .into_iter()
        .map(|((row, column), (counts, libs))| {
            let k = counts.len();
            let (center_x, center_y) = geometry.center(row, column);
            GridCell {
                row,
                column,
                center_x,
                center_y,
                points: k,
                mean_count: sorted_sum(counts) / k as f64,
                mean_library_size: sorted_sum(libs) / k as f64,
            }
        })
        .collect();

    let index: BTreeMap<(usize, usize), usize> = grid_cells
        .iter()
        .enumerate()
        .map(|(i, c)| ((c.row, c.column), i))
        .collect();
    let mut edges = Vec::new();
    for (i, c) in grid_cells.iter().enumerate() {
        for key in [(c.row, c.column + 1), (c.row + 1, c.column)] {
            if let Some(&j) = index.get(&key) {
                edges.push((i, j));
            }
        }
    }
    let graph = AdjacencyGraph::new(m, edges)?;
    let sizes = graph.component_sizes();
    if sizes.len() > 1 {
        return Err(Error::DisconnectedGrid { sizes });
    }

    let log_y: Vec<f64> = grid_cells.iter().map(|c| c.mean_count.ln_1p()).collect();
    let z = DVector::from_vec(standardize(&log_y)?);
    let centers = |f: fn(&GridCell) -> f64, axis: &str| -> Result<Vec<f64>> {
        let v: Vec<f64> = grid_cells.iter().map(f).collect();
        standardize(&v).map_err(|_| {
            Error::InvalidConfig(format!(
                "all occupied cells share one {axis} coordinate; refine the grid"
            ))
        })
    };
    let sx = centers(|c| c.center_x, "x")?;
    let sy = centers(|c| c.center_y, "y")?;
    let x = DMatrix::from_fn(m, 5, |i, j| match j {
        0 => 1.0,
        1 => grid_cells[i].mean_library_size.ln_1p(),
        2 => (grid_cells[i].points as f64).ln_1p(),
        3 => sx[i],
        _ => sy[i],
    });

    Ok(GridDataset {
        cells: grid_cells,
        z,
        x,
        graph,
        geometry,
        dropped_rows,
    })
}

/// Row-aligned model data and adjacency for fitting.
pub fn dataset_to_model(g: &GridDataset) -> Result<(ModelData, AdjacencyGraph)> {
    let sizes = g.graph.component_sizes();
    if sizes.len() > 1 {
        return Err(Error::DisconnectedGrid { sizes });
    }
    Ok((load_model(g.z.clone(), g.x.clone())?, g.graph.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(x: f64, y: f64, count: f64, library_size: f64) -> CellRecord {
        CellRecord {
            x,
            y,
            count,
            library_size,
        }
    }

    fn per_side(k: usize) -> GridSpec {
        GridSpec {
            size: GridSize::PerSide(k),
            bounds: None,
        }
    }

    #[test]
    fn four_corners() {
        let t = CellTable::new(vec![
            rec(0.0, 0.0, 0.0, 10.0),
            rec(1.0, 0.0, 1.0, 10.0),
            rec(0.0, 1.0, 2.0, 10.0),
            rec(1.0, 1.0, 3.0, 10.0),
        ])
        .unwrap();
        let g = bin_cells(&t, &per_side(2)).unwrap();
        assert_eq!(g.cells.len(), 4);
        let means: Vec<f64> = g.cells.iter().map(|c| c.mean_count).collect();
        assert_eq!(means, vec![0.0, 1.0, 2.0, 3.0]);
        let expected = standardize(&[0f64, 1.0, 2.0, 3.0].map(f64::ln_1p)).unwrap();
        for (a, b) in g.z.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(g.z.mean().abs() < 1e-10);
        assert_eq!(g.graph.num_edges(), 4);
    }

    #[test]
    fn identical_counts_have_no_variance() {
        let t = CellTable::new(vec![
            rec(0.0, 0.0, 5.0, 1.0),
            rec(1.0, 0.0, 5.0, 1.0),
            rec(0.0, 1.0, 5.0, 1.0),
            rec(1.0, 1.0, 5.0, 1.0),
        ])
        .unwrap();
        assert!(matches!(
            bin_cells(&t, &per_side(2)),
            Err(Error::ZeroVarianceResponse)
        ));
    }

    #[test]
    fn full_three_by_three() {
        let mut rows = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                rows.push(rec(
                    j as f64 + 0.5,
                    i as f64 + 0.5,
                    (i * 3 + j) as f64,
                    100.0 + j as f64,
                ));
            }
        }
        rows.push(rec(0.0, 0.0, 1.0, 1.0));
        rows.push(rec(3.0, 3.0, 1.0, 1.0));
        let g = bin_cells(&CellTable::new(rows).unwrap(), &per_side(3)).unwrap();
        assert_eq!(g.cells.len(), 9);
        assert_eq!(g.graph.num_edges(), 12);
        let (model, graph) = dataset_to_model(&g).unwrap();
        assert_eq!((model.n(), model.p(), graph.n()), (9, 5, 9));
    }

    #[test]
    fn gaps_disconnect() {
        let t = CellTable::new(vec![
            rec(0.0, 0.0, 1.0, 1.0),
            rec(2.9, 2.9, 2.0, 1.0),
            rec(3.0, 3.0, 3.0, 1.0),
        ])
        .unwrap();
        match bin_cells(&t, &per_side(3)) {
            Err(Error::DisconnectedGrid { sizes }) => assert_eq!(sizes.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bounds_drop_rows() {
        let mut rows: Vec<CellRecord> = (0..16)
            .map(|i| rec((i % 4) as f64, (i / 4) as f64, i as f64, 10.0 + i as f64))
            .collect();
        rows.push(rec(50.0, 0.0, 1.0, 1.0));
        let spec = GridSpec {
            size: GridSize::Width(1.0),
            bounds: Some(Bounds {
                x_min: 0.0,
                x_max: 4.0,
                y_min: 0.0,
                y_max: 4.0,
            }),
        };
        let g = bin_cells(&CellTable::new(rows).unwrap(), &spec).unwrap();
        assert_eq!(g.dropped_rows, 1);
        assert_eq!(g.cells.iter().map(|c| c.points).sum::<usize>(), 16);
    }

    #[test]
    fn grid_size_parsing() {
        assert_eq!(GridSize::parse("8").unwrap(), GridSize::PerSide(8));
        assert_eq!(
            GridSize::parse("4x6").unwrap(),
            GridSize::Cells {
                columns: 4,
                rows: 6
            }
        );
        assert!(GridSize::parse("0").is_err());
        assert!(GridSize::parse("ax3").is_err());
    }

    #[test]
    fn rejects_negative_counts() {
        assert!(CellTable::new(vec![rec(0.0, 0.0, -1.0, 1.0)]).is_err());
        assert!(CellTable::new(vec![rec(f64::NAN, 0.0, 1.0, 1.0)]).is_err());
    }
}

//! Latent-variable Poisson design from a discrete path.
//!
//! Each completed transition contributes one row block: one row per rook
//! neighbor of the occupied cell, with response z = 1 for the realized
//! destination, log residence time as offset, and covariate columns.
//! Location covariates take the occupied cell's layer value; directional
//! covariates take the inner product of a bias vector with the candidate
//! move direction. A time-varying covariate multiplies its base value by
//! the periodic spline basis at the cell-entry time, producing one column
//! per basis function.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::ctcrw::ImputedPath;
use crate::discretize::{step_direction, DiscretePath};
use crate::grid::{CellId, GridError, RasterGrid, UnitDirection};
use crate::spline::{SplineConfig, SplineError};

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("covariate names must be unique ('{0}' repeats)")]
    DuplicateName(String),
    #[error("transition {transition}: destination cell {cell} is not an available neighbor")]
    BadDestination { transition: usize, cell: usize },
    #[error("companion path does not cover time {time}")]
    CompanionGap { time: f64 },
    #[error("design has no rows")]
    Empty,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// What a covariate measures.
#[derive(Debug, Clone)]
pub enum CovariateKind {
    /// Constant 1 for every candidate move; modulates the total exit rate.
    Intercept,
    /// Named layer value of the occupied cell.
    Location { layer: String },
    /// Unit vector toward the nearest true cell of a mask layer, dotted
    /// with the move direction.
    DirectionalFeature { mask_layer: String },
    /// Per-cell vector field (two layers), normalized and dotted with the
    /// move direction.
    DirectionalField { vx_layer: String, vy_layer: String },
    /// Unit vector toward another animal's interpolated position at the
    /// cell-entry time.
    DirectionalConspecific { companion: ImputedPath },
    /// Unit direction of the previous realized rook step (zero for the
    /// first transition).
    DirectionalPersistence,
}

#[derive(Debug, Clone)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    /// Expand this covariate's coefficient in the periodic spline basis.
    pub time_varying: bool,
}

impl CovariateSpec {
    pub fn new(name: impl Into<String>, kind: CovariateKind) -> Self {
        CovariateSpec {
            name: name.into(),
            kind,
            time_varying: false,
        }
    }

    pub fn time_varying(mut self) -> Self {
        self.time_varying = true;
        self
    }

    pub fn is_intercept(&self) -> bool {
        matches!(self.kind, CovariateKind::Intercept)
    }
}

/// Inner product of a bias vector with a move direction.
pub fn directional_value(v: &UnitDirection, w: &UnitDirection) -> f64 {
    v.dot(w)
}

/// Unit vector from `own_position` toward the companion's linearly
/// interpolated position at time `t`; the zero vector inside
/// `proximity_cutoff` meters.
pub fn conspecific_direction(
    own_position: (f64, f64),
    companion: &ImputedPath,
    t: f64,
    proximity_cutoff: f64,
) -> Result<UnitDirection, DesignError> {
    let (cx, cy) = companion
        .position_at(t)
        .ok_or(DesignError::CompanionGap { time: t })?;
    let dx = cx - own_position.0;
    let dy = cy - own_position.1;
    if (dx * dx + dy * dy).sqrt() < proximity_cutoff {
        Ok(UnitDirection::zero())
    } else {
        Ok(UnitDirection::from_components(dx, dy))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DesignOptions {
    /// Include the censored final residence as an all-zero row block
    /// (survival term only).
    pub use_censored_tail: bool,
}

/// Rows of the latent Poisson regression plus the metadata needed for
/// grouped penalties and block-wise cross-validation.
#[derive(Debug, Clone)]
pub struct DesignData {
    /// Covariate matrix, one row per (transition, candidate neighbor).
    pub x: DMatrix<f64>,
    /// 0/1 response: 1 for the realized destination.
    pub z: Vec<f64>,
    /// log residence time, constant within a block.
    pub offset: Vec<f64>,
    /// Residence time per row (exposure).
    pub tau: Vec<f64>,
    /// Log-likelihood weight per row (1, or 1/K after stacking).
    pub weight: Vec<f64>,
    /// Block id per row; a block is one transition and is never split.
    pub block: Vec<usize>,
    /// Transition index per row.
    pub row_transition: Vec<usize>,
    /// Candidate destination cell per row.
    pub row_neighbor: Vec<CellId>,
    /// Move direction per row.
    pub row_direction: Vec<UnitDirection>,
    pub col_names: Vec<String>,
    /// Covariate (group) name per column.
    pub col_group: Vec<String>,
    /// Whether the lasso penalty applies to a column; intercept columns are
    /// exempt.
    pub penalized: Vec<bool>,
}

impl DesignData {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_blocks(&self) -> usize {
        self.block.last().map_or(0, |&b| b + 1)
    }

    /// Empty design with the given column metadata; used for prior-only
    /// sampling.
    pub fn empty(col_names: Vec<String>, penalized: Vec<bool>) -> Self {
        let col_group = col_names.clone();
        let n = col_names.len();
        DesignData {
            x: DMatrix::zeros(0, n),
            z: vec![],
            offset: vec![],
            tau: vec![],
            weight: vec![],
            block: vec![],
            row_transition: vec![],
            row_neighbor: vec![],
            row_direction: vec![],
            col_names,
            col_group,
            penalized,
        }
    }

    /// Rows whose block satisfies the predicate, with blocks renumbered
    /// compactly. Column metadata is preserved.
    pub fn subset_by_blocks(&self, keep: impl Fn(usize) -> bool) -> DesignData {
        let rows: Vec<usize> = (0..self.n_rows())
            .filter(|&i| keep(self.block[i]))
            .collect();
        let p = self.n_cols();
        let mut x = DMatrix::zeros(rows.len(), p);
        let mut renumber = std::collections::BTreeMap::new();
        let mut block = Vec::with_capacity(rows.len());
        for (new_i, &i) in rows.iter().enumerate() {
            for j in 0..p {
                x[(new_i, j)] = self.x[(i, j)];
            }
            let next_id = renumber.len();
            let id = *renumber.entry(self.block[i]).or_insert(next_id);
            block.push(id);
        }
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        DesignData {
            x,
            z: pick(&self.z),
            offset: pick(&self.offset),
            tau: pick(&self.tau),
            weight: pick(&self.weight),
            block,
            row_transition: rows.iter().map(|&i| self.row_transition[i]).collect(),
            row_neighbor: rows.iter().map(|&i| self.row_neighbor[i]).collect(),
            row_direction: rows.iter().map(|&i| self.row_direction[i]).collect(),
            col_names: self.col_names.clone(),
            col_group: self.col_group.clone(),
            penalized: self.penalized.clone(),
        }
    }

    /// Debug CSV: `row,t_index,neighbor_dir,z,offset,<col names...>`.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        write!(w, "row,t_index,neighbor_dir,z,offset")?;
        for name in &self.col_names {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for i in 0..self.n_rows() {
            let dir = compass(&self.row_direction[i]);
            write!(
                w,
                "{},{},{},{},{}",
                i, self.row_transition[i], dir, self.z[i], self.offset[i]
            )?;
            for j in 0..self.n_cols() {
                write!(w, ",{}", self.x[(i, j)])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn compass(d: &UnitDirection) -> &'static str {
    if *d == UnitDirection::EAST {
        "E"
    } else if *d == UnitDirection::NORTH {
        "N"
    } else if *d == UnitDirection::WEST {
        "W"
    } else if *d == UnitDirection::SOUTH {
        "S"
    } else {
        "?"
    }
}

/// Shared covariate evaluation for the design builder and the simulator:
/// both must produce identical rates for identical states.
pub struct CovariateEvaluator<'a> {
    grid: &'a RasterGrid,
    specs: &'a [CovariateSpec],
    spline: SplineConfig,
    /// Precomputed bearing field per spec (directional-feature kinds only).
    bearings: Vec<Option<Vec<UnitDirection>>>,
    n_cols: usize,
}

impl<'a> CovariateEvaluator<'a> {
    pub fn new(
        grid: &'a RasterGrid,
        specs: &'a [CovariateSpec],
        spline: SplineConfig,
    ) -> Result<Self, DesignError> {
        spline.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for s in specs {
            if !seen.insert(s.name.clone()) {
                return Err(DesignError::DuplicateName(s.name.clone()));
            }
        }
        let mut bearings = Vec::with_capacity(specs.len());
        for s in specs {
            let b = match &s.kind {
                CovariateKind::DirectionalFeature { mask_layer } => {
                    let mask = grid.layer_mask(mask_layer)?;
                    Some(grid.bearing_to_nearest_feature(&mask)?)
                }
                CovariateKind::Location { layer } => {
                    grid.layer(layer)?; // existence check
                    None
                }
                CovariateKind::DirectionalField { vx_layer, vy_layer } => {
                    let vx = grid.layer(vx_layer)?;
                    let vy = grid.layer(vy_layer)?;
                    Some(
                        vx.iter()
                            .zip(vy)
                            .map(|(&x, &y)| UnitDirection::from_components(x, y))
                            .collect(),
                    )
                }
                _ => None,
            };
            bearings.push(b);
        }
        let n_spl = spline.n_basis();
        let n_cols = specs
            .iter()
            .map(|s| if s.time_varying { n_spl } else { 1 })
            .sum();
        Ok(CovariateEvaluator {
            grid,
            specs,
            spline,
            bearings,
            n_cols,
        })
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn col_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_cols);
        for s in self.specs {
            if s.time_varying {
                for k in 0..self.spline.n_basis() {
                    names.push(format!("{}_s{k}", s.name));
                }
            } else {
                names.push(s.name.clone());
            }
        }
        names
    }

    pub fn col_groups(&self) -> Vec<String> {
        let mut groups = Vec::with_capacity(self.n_cols);
        for s in self.specs {
            let reps = if s.time_varying {
                self.spline.n_basis()
            } else {
                1
            };
            for _ in 0..reps {
                groups.push(s.name.clone());
            }
        }
        groups
    }

    pub fn penalized(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_cols);
        for s in self.specs {
            let reps = if s.time_varying {
                self.spline.n_basis()
            } else {
                1
            };
            for _ in 0..reps {
                out.push(!s.is_intercept());
            }
        }
        out
    }

    /// Base (unexpanded) covariate value for one candidate move.
    fn base_value(
        &self,
        spec_idx: usize,
        cell: CellId,
        move_dir: &UnitDirection,
        entry_time: f64,
        prev_dir: &UnitDirection,
    ) -> Result<f64, DesignError> {
        let spec = &self.specs[spec_idx];
        Ok(match &spec.kind {
            CovariateKind::Intercept => 1.0,
            CovariateKind::Location { layer } => self.grid.layer(layer)?[cell.index()],
            CovariateKind::DirectionalFeature { .. } | CovariateKind::DirectionalField { .. } => {
                let v = &self.bearings[spec_idx].as_ref().unwrap()[cell.index()];
                directional_value(v, move_dir)
            }
            CovariateKind::DirectionalConspecific { companion } => {
                let v = conspecific_direction(
                    self.grid.center(cell),
                    companion,
                    entry_time,
                    self.grid.cell_size() / 2.0,
                )?;
                directional_value(&v, move_dir)
            }
            CovariateKind::DirectionalPersistence => directional_value(prev_dir, move_dir),
        })
    }

    /// Fills one expanded design row for a candidate move.
    pub fn fill_row(
        &self,
        cell: CellId,
        move_dir: &UnitDirection,
        entry_time: f64,
        prev_dir: &UnitDirection,
        out: &mut [f64],
    ) -> Result<(), DesignError> {
        debug_assert_eq!(out.len(), self.n_cols);
        let basis = if self.specs.iter().any(|s| s.time_varying) {
            Some(self.spline.basis(entry_time))
        } else {
            None
        };
        let mut j = 0;
        for (idx, spec) in self.specs.iter().enumerate() {
            let base = self.base_value(idx, cell, move_dir, entry_time, prev_dir)?;
            if spec.time_varying {
                let basis = basis.as_ref().unwrap();
                for &phi in basis {
                    out[j] = base * phi;
                    j += 1;
                }
            } else {
                out[j] = base;
                j += 1;
            }
        }
        Ok(())
    }

    /// Transition rates to every available neighbor of `cell` at time `t`
    /// given coefficients `alpha`: `(neighbor, direction, rate)`.
    pub fn rates(
        &self,
        cell: CellId,
        t: f64,
        prev_dir: &UnitDirection,
        alpha: &[f64],
    ) -> Result<Vec<(CellId, UnitDirection, f64)>, DesignError> {
        debug_assert_eq!(alpha.len(), self.n_cols);
        let mut row = vec![0.0; self.n_cols];
        let mut out = Vec::with_capacity(4);
        for (neighbor, dir) in self.grid.neighbors(cell)? {
            self.fill_row(cell, &dir, t, prev_dir, &mut row)?;
            let eta: f64 = row.iter().zip(alpha).map(|(x, a)| x * a).sum();
            out.push((neighbor, dir, eta.exp()));
        }
        Ok(out)
    }
}

/// Expands a discrete path into the latent Poisson design.
pub fn build_design(
    dp: &DiscretePath,
    grid: &RasterGrid,
    specs: &[CovariateSpec],
    spline: SplineConfig,
) -> Result<DesignData, DesignError> {
    build_design_with(dp, grid, specs, spline, DesignOptions::default())
}

pub fn build_design_with(
    dp: &DiscretePath,
    grid: &RasterGrid,
    specs: &[CovariateSpec],
    spline: SplineConfig,
    options: DesignOptions,
) -> Result<DesignData, DesignError> {
    let eval = CovariateEvaluator::new(grid, specs, spline)?;
    let n_cols = eval.n_cols();
    let transitions = dp.transition_clock_times();

    let mut x_rows: Vec<f64> = Vec::new();
    let mut z = Vec::new();
    let mut offset = Vec::new();
    let mut tau = Vec::new();
    let mut block = Vec::new();
    let mut row_transition = Vec::new();
    let mut row_neighbor = Vec::new();
    let mut row_direction = Vec::new();
    let mut row_buf = vec![0.0; n_cols];

    let mut prev_dir = UnitDirection::zero();
    for (t_idx, rec) in transitions.iter().enumerate() {
        let neighbors = grid.neighbors(rec.from)?;
        let mut found = false;
        for (neighbor, dir) in &neighbors {
            eval.fill_row(rec.from, dir, rec.entry_time, &prev_dir, &mut row_buf)?;
            x_rows.extend_from_slice(&row_buf);
            let hit = *neighbor == rec.to;
            found |= hit;
            z.push(if hit { 1.0 } else { 0.0 });
            offset.push(rec.residence.ln());
            tau.push(rec.residence);
            block.push(t_idx);
            row_transition.push(t_idx);
            row_neighbor.push(*neighbor);
            row_direction.push(*dir);
        }
        if !found {
            return Err(DesignError::BadDestination {
                transition: t_idx,
                cell: rec.to.index(),
            });
        }
        prev_dir = step_direction(grid, rec.from, rec.to);
    }

    if options.use_censored_tail && dp.n_visits() > 0 {
        let last = dp.n_visits() - 1;
        let cell = dp.cells[last];
        let entry = dp.clock_times[last];
        let residence = dp.residence_times[last];
        if residence > 0.0 {
            let block_id = transitions.len();
            for (neighbor, dir) in grid.neighbors(cell)? {
                eval.fill_row(cell, &dir, entry, &prev_dir, &mut row_buf)?;
                x_rows.extend_from_slice(&row_buf);
                z.push(0.0);
                offset.push(residence.ln());
                tau.push(residence);
                block.push(block_id);
                row_transition.push(block_id);
                row_neighbor.push(neighbor);
                row_direction.push(dir);
            }
        }
    }

    let n_rows = z.len();
    let weight = vec![1.0; n_rows];
    Ok(DesignData {
        x: DMatrix::from_row_slice(n_rows, n_cols, &x_rows),
        z,
        offset,
        tau,
        weight,
        block,
        row_transition,
        row_neighbor,
        row_direction,
        col_names: eval.col_names(),
        col_group: eval.col_groups(),
        penalized: eval.penalized(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid5() -> RasterGrid {
        RasterGrid::new(5, 5, 100.0, 0.0, 0.0).unwrap()
    }

    /// A 2-transition path through interior cells.
    fn two_transition_path(g: &RasterGrid) -> DiscretePath {
        DiscretePath {
            cells: vec![
                g.cell_from_rowcol(2, 2),
                g.cell_from_rowcol(2, 3),
                g.cell_from_rowcol(3, 3),
            ],
            clock_times: vec![0.0, 30.0, 80.0],
            residence_times: vec![30.0, 50.0, 20.0],
            censored_final: true,
        }
    }

    #[test]
    fn intercept_only_block_structure() {
        let g = grid5();
        let dp = two_transition_path(&g);
        let specs = vec![CovariateSpec::new("intercept", CovariateKind::Intercept)];
        let d = build_design(&dp, &g, &specs, SplineConfig::default()).unwrap();
        assert_eq!(d.n_rows(), 8); // 2 interior transitions x 4 neighbors
        assert_eq!(d.z.iter().sum::<f64>(), 2.0);
        assert_eq!(d.n_blocks(), 2);
        // Offset constant within a block, equal to log residence.
        assert_relative_eq!(d.offset[0], 30.0_f64.ln());
        assert_relative_eq!(d.offset[4], 50.0_f64.ln());
        // Exactly one z = 1 per block.
        for b in 0..2 {
            let ones: f64 = (0..d.n_rows())
                .filter(|&i| d.block[i] == b)
                .map(|i| d.z[i])
                .sum();
            assert_eq!(ones, 1.0);
        }
    }

    #[test]
    fn time_varying_intercept_columns_sum_to_one() {
        let g = grid5();
        let dp = two_transition_path(&g);
        let specs =
            vec![CovariateSpec::new("intercept", CovariateKind::Intercept).time_varying()];
        let d = build_design(&dp, &g, &specs, SplineConfig::default()).unwrap();
        assert_eq!(d.n_cols(), 4);
        for i in 0..d.n_rows() {
            let sum: f64 = (0..4).map(|j| d.x[(i, j)]).sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn location_covariate_uses_source_cell() {
        let g = grid5();
        // "not forest" indicator: forested cells are 0.
        let mut layer = vec![0.0; 25];
        layer[g.cell_from_rowcol(2, 3).0] = 1.0; // second source cell is open
        let g = g.with_layer("not_forest", layer).unwrap();
        let dp = two_transition_path(&g);
        let specs = vec![CovariateSpec::new(
            "not_forest",
            CovariateKind::Location {
                layer: "not_forest".to_string(),
            },
        )];
        let d = build_design(&dp, &g, &specs, SplineConfig::default()).unwrap();
        for i in 0..d.n_rows() {
            let expect = if d.row_transition[i] == 0 { 0.0 } else { 1.0 };
            assert_eq!(d.x[(i, 0)], expect);
        }
    }

    #[test]
    fn directional_values_are_projections() {
        let v = UnitDirection::from_components(0.6, 0.8);
        assert_relative_eq!(directional_value(&v, &UnitDirection::EAST), 0.6);
        assert_relative_eq!(directional_value(&v, &UnitDirection::NORTH), 0.8);
        assert_relative_eq!(
            directional_value(&UnitDirection::EAST, &UnitDirection::EAST),
            1.0
        );
        assert_relative_eq!(
            directional_value(&UnitDirection::EAST, &UnitDirection::NORTH),
            0.0
        );
    }

    #[test]
    fn conspecific_direction_cases() {
        let companion = ImputedPath {
            times: vec![0.0, 100.0],
            positions: vec![(0.0, 1000.0), (0.0, 3000.0)],
            source_track: "m".to_string(),
            draw_seed: 0,
        };
        // Companion due north, far.
        let v = conspecific_direction((0.0, 0.0), &companion, 0.0, 50.0).unwrap();
        assert_eq!(v, UnitDirection::NORTH);
        // Interpolated offset (+300, -400): position at t=50 is (0, 2000);
        // own position at (-300, 2400).
        let v = conspecific_direction((-300.0, 2400.0), &companion, 50.0, 50.0).unwrap();
        assert_relative_eq!(v.dx, 0.6, max_relative = 1e-12);
        assert_relative_eq!(v.dy, -0.8, max_relative = 1e-12);
        // Within half a cell: zero.
        let v = conspecific_direction((10.0, 990.0), &companion, 0.0, 50.0).unwrap();
        assert!(v.is_zero());
        // Outside the companion span: error.
        assert!(matches!(
            conspecific_direction((0.0, 0.0), &companion, 200.0, 50.0),
            Err(DesignError::CompanionGap { .. })
        ));
    }

    #[test]
    fn persistence_is_zero_then_previous_step() {
        let g = grid5();
        let dp = two_transition_path(&g); // east step, then north step
        let specs = vec![CovariateSpec::new(
            "crw",
            CovariateKind::DirectionalPersistence,
        )];
        let d = build_design(&dp, &g, &specs, SplineConfig::default()).unwrap();
        // First transition: no previous move, all zeros.
        for i in 0..4 {
            assert_eq!(d.x[(i, 0)], 0.0);
        }
        // Second transition: previous move was east.
        for i in 4..8 {
            let expect = directional_value(&UnitDirection::EAST, &d.row_direction[i]);
            assert_eq!(d.x[(i, 0)], expect);
        }
    }

    #[test]
    fn field_sign_reversal_negates_columns() {
        let g = grid5();
        let vx: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
        let vy: Vec<f64> = (0..25).map(|i| (i as f64 * 0.71).cos()).collect();
        let neg_vx: Vec<f64> = vx.iter().map(|v| -v).collect();
        let neg_vy: Vec<f64> = vy.iter().map(|v| -v).collect();
        let g_pos = g
            .clone()
            .with_layer("vx", vx)
            .unwrap()
            .with_layer("vy", vy)
            .unwrap();
        let g_neg = g
            .with_layer("vx", neg_vx)
            .unwrap()
            .with_layer("vy", neg_vy)
            .unwrap();
        let dp = two_transition_path(&g_pos);
        let specs = vec![
            CovariateSpec::new("intercept", CovariateKind::Intercept),
            CovariateSpec::new(
                "field",
                CovariateKind::DirectionalField {
                    vx_layer: "vx".to_string(),
                    vy_layer: "vy".to_string(),
                },
            ),
        ];
        let d_pos = build_design(&dp, &g_pos, &specs, SplineConfig::default()).unwrap();
        let d_neg = build_design(&dp, &g_neg, &specs, SplineConfig::default()).unwrap();
        for i in 0..d_pos.n_rows() {
            assert_eq!(d_pos.x[(i, 0)], d_neg.x[(i, 0)]); // intercept untouched
            assert_relative_eq!(d_pos.x[(i, 1)], -d_neg.x[(i, 1)], epsilon = 1e-15);
        }
    }

    #[test]
    fn nodata_neighbor_shrinks_block_and_bad_destination_errors() {
        let mut g = grid5();
        let mut bad = vec![false; 25];
        bad[g.cell_from_rowcol(2, 1).0] = true; // west of first source
        g.mask_invalid(&bad).unwrap();
        let dp = two_transition_path(&g);
        let specs = vec![CovariateSpec::new("intercept", CovariateKind::Intercept)];
        let d = build_design(&dp, &g, &specs, SplineConfig::default()).unwrap();
        assert_eq!(d.n_rows(), 7); // first block loses its west neighbor

        // A NODATA destination is inconsistent input.
        let mut g2 = grid5();
        let mut bad2 = vec![false; 25];
        bad2[g2.cell_from_rowcol(2, 3).0] = true; // the realized destination
        g2.mask_invalid(&bad2).unwrap();
        let err = build_design(&dp, &g2, &specs, SplineConfig::default());
        assert!(matches!(err, Err(DesignError::BadDestination { .. })));
    }

    #[test]
    fn censored_tail_adds_one_zero_block() {
        let g = grid5();
        let dp = two_transition_path(&g);
        let specs = vec![CovariateSpec::new("intercept", CovariateKind::Intercept)];
        let d = build_design_with(
            &dp,
            &g,
            &specs,
            SplineConfig::default(),
            DesignOptions {
                use_censored_tail: true,
            },
        )
        .unwrap();
        assert_eq!(d.n_rows(), 12);
        assert_eq!(d.n_blocks(), 3);
        let tail: Vec<usize> = (0..12).filter(|&i| d.block[i] == 2).collect();
        assert_eq!(tail.len(), 4);
        assert!(tail.iter().all(|&i| d.z[i] == 0.0));
        assert_relative_eq!(d.tau[tail[0]], 20.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let g = grid5();
        let dp = two_transition_path(&g);
        let specs = vec![
            CovariateSpec::new("a", CovariateKind::Intercept),
            CovariateSpec::new("a", CovariateKind::DirectionalPersistence),
        ];
        assert!(matches!(
            build_design(&dp, &g, &specs, SplineConfig::default()),
            Err(DesignError::DuplicateName(_))
        ));
    }
}

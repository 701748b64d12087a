//! Reduction of a continuous path to cells and residence times.
//!
//! Cell membership is evaluated continuously along each straight segment of
//! the input polyline: gridline crossings are located by exact linear
//! interpolation and emitted in crossing order, so every cell change is a
//! single rook step. Exact corner hits are ordered vertical-then-horizontal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctcrw::ImputedPath;
use crate::grid::{CellId, GridError, RasterGrid, UnitDirection};

#[derive(Debug, Error)]
pub enum DiscretizeError {
    #[error("path needs at least 2 points (got {0})")]
    TooShort(usize),
    #[error("position ({x}, {y}) at time {time} is outside the grid")]
    OutsideGrid { time: f64, x: f64, y: f64 },
    #[error("position at time {time} lies on NODATA cell {cell}")]
    NodataCell { time: f64, cell: usize },
    #[error("path times must be non-decreasing at point {index}")]
    TimeOrder { index: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// The CTDS reduction of a continuous path: visited cells, entry clock
/// times, and residence times. The final visit's residence is censored
/// (the exit was never observed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePath {
    pub cells: Vec<CellId>,
    /// Entry time into each visited cell.
    pub clock_times: Vec<f64>,
    /// Time spent in each visited cell, including the censored final visit.
    pub residence_times: Vec<f64>,
    pub censored_final: bool,
}

/// One completed transition, the observation unit of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub from: CellId,
    pub to: CellId,
    /// Clock time at which the residence began; covariates and splines are
    /// evaluated here.
    pub entry_time: f64,
    pub residence: f64,
}

impl DiscretePath {
    pub fn n_visits(&self) -> usize {
        self.cells.len()
    }

    pub fn n_transitions(&self) -> usize {
        self.cells.len().saturating_sub(1)
    }

    pub fn total_residence(&self) -> f64 {
        self.residence_times.iter().sum()
    }

    pub fn start_time(&self) -> f64 {
        self.clock_times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.clock_times.last().unwrap() + *self.residence_times.last().unwrap()
    }

    /// The completed transitions in path order.
    pub fn transition_clock_times(&self) -> Vec<TransitionRecord> {
        (0..self.n_transitions())
            .map(|t| TransitionRecord {
                from: self.cells[t],
                to: self.cells[t + 1],
                entry_time: self.clock_times[t],
                residence: self.residence_times[t],
            })
            .collect()
    }

    /// Cell occupied at clock time `t` (the final visit extends to its
    /// censoring time).
    pub fn cell_at(&self, t: f64) -> Option<CellId> {
        if t < self.start_time() || t > self.end_time() {
            return None;
        }
        // Visits are ordered by entry time; find the last entry <= t.
        let idx = match self
            .clock_times
            .binary_search_by(|e| e.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        Some(self.cells[idx])
    }
}

/// Converts a fine-time continuous path into its CTDS representation.
pub fn discretize(path: &ImputedPath, grid: &RasterGrid) -> Result<DiscretePath, DiscretizeError> {
    discretize_polyline(&path.times, &path.positions, grid)
}

/// Core traversal over an arbitrary time-stamped polyline. Zero-duration
/// segments are allowed and model instantaneous jumps (used by the
/// simulator's cell-center traces).
pub fn discretize_polyline(
    times: &[f64],
    positions: &[(f64, f64)],
    grid: &RasterGrid,
) -> Result<DiscretePath, DiscretizeError> {
    if times.len() < 2 || times.len() != positions.len() {
        return Err(DiscretizeError::TooShort(times.len()));
    }
    for (i, w) in times.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(DiscretizeError::TimeOrder { index: i + 1 });
        }
    }

    let (ox, oy) = grid.origin();
    let cs = grid.cell_size();
    let start_cell = grid
        .cell_at_point(positions[0].0, positions[0].1)
        .map_err(|_| DiscretizeError::OutsideGrid {
            time: times[0],
            x: positions[0].0,
            y: positions[0].1,
        })?;
    if !grid.is_valid(start_cell) {
        return Err(DiscretizeError::NodataCell {
            time: times[0],
            cell: start_cell.index(),
        });
    }

    let mut cells = vec![start_cell];
    let mut entries = vec![times[0]];
    let (mut row, mut col) = grid.rowcol(start_cell);

    for seg in 0..times.len() - 1 {
        let (x0, y0) = positions[seg];
        let (x1, y1) = positions[seg + 1];
        let (t0, t1) = (times[seg], times[seg + 1]);
        let (dx, dy) = (x1 - x0, y1 - y0);
        let dt = t1 - t0;

        loop {
            // Parameter of the next boundary crossing in the direction of
            // travel, per axis.
            let s_v = if dx > 0.0 {
                ((ox + (col as f64 + 1.0) * cs) - x0) / dx
            } else if dx < 0.0 {
                ((ox + col as f64 * cs) - x0) / dx
            } else {
                f64::INFINITY
            };
            let s_h = if dy > 0.0 {
                ((oy + (row as f64 + 1.0) * cs) - y0) / dy
            } else if dy < 0.0 {
                ((oy + row as f64 * cs) - y0) / dy
            } else {
                f64::INFINITY
            };
            let s_v = s_v.max(0.0);
            let s_h = s_h.max(0.0);
            if s_v > 1.0 && s_h > 1.0 {
                break;
            }
            // Vertical crossings win exact ties.
            let vertical = s_v <= s_h;
            let s = if vertical { s_v } else { s_h };
            let t_cross = t0 + s * dt;
            let (new_row, new_col) = if vertical {
                (row, if dx > 0.0 { col + 1 } else { col.wrapping_sub(1) })
            } else {
                (if dy > 0.0 { row + 1 } else { row.wrapping_sub(1) }, col)
            };
            if new_row >= grid.n_rows() || new_col >= grid.n_cols() {
                return Err(DiscretizeError::OutsideGrid {
                    time: t_cross,
                    x: x0 + s * dx,
                    y: y0 + s * dy,
                });
            }
            let next = grid.cell_from_rowcol(new_row, new_col);
            if !grid.is_valid(next) {
                return Err(DiscretizeError::NodataCell {
                    time: t_cross,
                    cell: next.index(),
                });
            }
            cells.push(next);
            entries.push(t_cross);
            row = new_row;
            col = new_col;
        }
    }

    let end_time = *times.last().unwrap();
    let mut residences = Vec::with_capacity(cells.len());
    for v in 0..cells.len() {
        let exit = if v + 1 < cells.len() {
            entries[v + 1]
        } else {
            end_time
        };
        residences.push(exit - entries[v]);
    }

    Ok(DiscretePath {
        cells,
        clock_times: entries,
        residence_times: residences,
        censored_final: true,
    })
}

/// Unit direction of a rook step between adjacent cells.
pub fn step_direction(grid: &RasterGrid, from: CellId, to: CellId) -> UnitDirection {
    let (r0, c0) = grid.rowcol(from);
    let (r1, c1) = grid.rowcol(to);
    UnitDirection::from_components(c1 as f64 - c0 as f64, r1 as f64 - r0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> RasterGrid {
        RasterGrid::new(n, n, 100.0, 0.0, 0.0).unwrap()
    }

    fn path(times: Vec<f64>, positions: Vec<(f64, f64)>) -> ImputedPath {
        ImputedPath {
            times,
            positions,
            source_track: "test".to_string(),
            draw_seed: 0,
        }
    }

    #[test]
    fn stationary_path_is_one_censored_visit() {
        let g = grid(3);
        let p = path(vec![0.0, 3600.0, 7200.0], vec![(150.0, 150.0); 3]);
        let dp = discretize(&p, &g).unwrap();
        assert_eq!(dp.n_visits(), 1);
        assert_eq!(dp.cells[0], g.cell_from_rowcol(1, 1));
        assert_relative_eq!(dp.residence_times[0], 7200.0);
        assert!(dp.censored_final);
        assert!(dp.transition_clock_times().is_empty());
    }

    #[test]
    fn symmetric_crossing_splits_time_at_edge() {
        let g = grid(3);
        // Center of (1,1) to center of its east neighbor over 100 s.
        let p = path(vec![0.0, 100.0], vec![(150.0, 150.0), (250.0, 150.0)]);
        let dp = discretize(&p, &g).unwrap();
        assert_eq!(dp.cells, vec![g.cell_from_rowcol(1, 1), g.cell_from_rowcol(1, 2)]);
        assert_relative_eq!(dp.residence_times[0], 50.0);
        assert_relative_eq!(dp.residence_times[1], 50.0);
        assert_relative_eq!(dp.clock_times[1], 50.0);
    }

    #[test]
    fn diagonal_segment_emits_intermediate_rook_cell() {
        let g = grid(3);
        // From (80, 120) to (130, 220) over 100 s inside a 100 m grid:
        // vertical line x=100 crossed at s=0.4 (t=40), horizontal line y=200
        // at s=0.8 (t=80). Hand-computed from the parametric form.
        let p = path(vec![0.0, 100.0], vec![(80.0, 120.0), (130.0, 220.0)]);
        let dp = discretize(&p, &g).unwrap();
        assert_eq!(
            dp.cells,
            vec![
                g.cell_from_rowcol(1, 0),
                g.cell_from_rowcol(1, 1),
                g.cell_from_rowcol(2, 1)
            ]
        );
        assert_relative_eq!(dp.clock_times[1], 40.0);
        assert_relative_eq!(dp.clock_times[2], 80.0);
        assert_relative_eq!(dp.residence_times[1], 40.0);
        // Every transition is a rook step.
        for rec in dp.transition_clock_times() {
            let d = step_direction(&g, rec.from, rec.to);
            assert!(d.dot(&d) == 1.0);
        }
    }

    #[test]
    fn spec_corner_pass_vertical_then_horizontal() {
        let g = grid(3);
        // Exactly through the corner (100, 100): both crossings at s = 0.5.
        let p = path(vec![0.0, 100.0], vec![(50.0, 50.0), (150.0, 150.0)]);
        let dp = discretize(&p, &g).unwrap();
        assert_eq!(
            dp.cells,
            vec![
                g.cell_from_rowcol(0, 0),
                g.cell_from_rowcol(0, 1), // vertical step first
                g.cell_from_rowcol(1, 1)
            ]
        );
        assert_relative_eq!(dp.residence_times[1], 0.0);
        assert_relative_eq!(dp.clock_times[1], dp.clock_times[2]);
    }

    #[test]
    fn reentry_creates_a_new_visit() {
        let g = grid(3);
        let p = path(
            vec![0.0, 100.0, 200.0],
            vec![(150.0, 150.0), (250.0, 150.0), (150.0, 150.0)],
        );
        let dp = discretize(&p, &g).unwrap();
        assert_eq!(dp.n_visits(), 3);
        assert_eq!(dp.cells[0], dp.cells[2]);
    }

    #[test]
    fn residence_sum_equals_span() {
        let g = grid(5);
        let times: Vec<f64> = (0..40).map(|k| k as f64 * 13.7).collect();
        let positions: Vec<(f64, f64)> = (0..40)
            .map(|k| {
                let t = k as f64 * 0.37;
                (250.0 + 180.0 * t.sin(), 250.0 + 140.0 * (1.3 * t).cos())
            })
            .collect();
        let span = times.last().unwrap() - times[0];
        let dp = discretize(&path(times, positions), &g).unwrap();
        assert_relative_eq!(dp.total_residence(), span, max_relative = 1e-12);
        assert!(dp.n_visits() > 3);
    }

    #[test]
    fn refinement_leaves_visits_unchanged() {
        let g = grid(5);
        let times: Vec<f64> = (0..30).map(|k| k as f64 * 20.0).collect();
        let positions: Vec<(f64, f64)> = (0..30)
            .map(|k| {
                let t = k as f64 * 0.5;
                (250.0 + 170.0 * t.sin(), 250.0 + 160.0 * (0.7 * t).cos())
            })
            .collect();
        let coarse = discretize(&path(times.clone(), positions.clone()), &g).unwrap();

        // Halve the step by linear interpolation.
        let mut fine_t = Vec::new();
        let mut fine_p = Vec::new();
        for i in 0..times.len() - 1 {
            fine_t.push(times[i]);
            fine_p.push(positions[i]);
            fine_t.push(0.5 * (times[i] + times[i + 1]));
            fine_p.push((
                0.5 * (positions[i].0 + positions[i + 1].0),
                0.5 * (positions[i].1 + positions[i + 1].1),
            ));
        }
        fine_t.push(*times.last().unwrap());
        fine_p.push(*positions.last().unwrap());
        let fine = discretize(&path(fine_t, fine_p), &g).unwrap();

        assert_eq!(coarse.cells, fine.cells);
        for (a, b) in coarse.residence_times.iter().zip(&fine.residence_times) {
            assert!((a - b).abs() < 10.0); // well under the original step
        }
    }

    #[test]
    fn zero_duration_jump_between_adjacent_centers() {
        let g = grid(3);
        // Piecewise-constant trace: sit at (1,1), jump east at t=60, sit.
        let times = vec![0.0, 60.0, 60.0, 100.0];
        let positions = vec![(150.0, 150.0), (150.0, 150.0), (250.0, 150.0), (250.0, 150.0)];
        let dp = discretize_polyline(&times, &positions, &g).unwrap();
        assert_eq!(dp.n_visits(), 2);
        assert_relative_eq!(dp.residence_times[0], 60.0);
        assert_relative_eq!(dp.residence_times[1], 40.0);
    }

    #[test]
    fn outside_grid_reports_violation_time() {
        let g = grid(3);
        let p = path(vec![0.0, 100.0], vec![(150.0, 150.0), (450.0, 150.0)]);
        match discretize(&p, &g) {
            Err(DiscretizeError::OutsideGrid { time, .. }) => {
                assert_relative_eq!(time, 50.0); // crosses x=300 at s=0.5
            }
            other => panic!("expected OutsideGrid, got {other:?}"),
        }
    }

    #[test]
    fn nodata_cell_is_an_error_with_time() {
        let mut g = grid(3);
        let mut bad = vec![false; 9];
        bad[g.cell_from_rowcol(1, 2).0] = true;
        g.mask_invalid(&bad).unwrap();
        let p = path(vec![0.0, 100.0], vec![(150.0, 150.0), (250.0, 150.0)]);
        match discretize(&p, &g) {
            Err(DiscretizeError::NodataCell { time, cell }) => {
                assert_relative_eq!(time, 50.0);
                assert_eq!(cell, 5);
            }
            other => panic!("expected NodataCell, got {other:?}"),
        }
    }

    #[test]
    fn record_count_is_visits_minus_one() {
        let g = grid(4);
        let p = path(
            vec![0.0, 50.0, 100.0, 150.0],
            vec![(50.0, 50.0), (150.0, 50.0), (250.0, 50.0), (250.0, 150.0)],
        );
        let dp = discretize(&p, &g).unwrap();
        assert_eq!(dp.transition_clock_times().len(), dp.n_visits() - 1);
    }
}

//! Time-stamped planar telemetry fixes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("track '{id}' needs at least 2 fixes (got {got})")]
    TooFewFixes { id: String, got: usize },
    #[error("track '{id}': times must be strictly increasing at fix {index}")]
    NonIncreasingTimes { id: String, index: usize },
    #[error("track '{id}': non-finite coordinate at fix {index}")]
    NonFinitePosition { id: String, index: usize },
    #[error("track '{id}': times and positions differ in length ({times} vs {positions})")]
    LengthMismatch {
        id: String,
        times: usize,
        positions: usize,
    },
}

/// Observed telemetry track: strictly increasing times (seconds) and planar
/// positions (meters).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Track {
    pub id: String,
    pub times: Vec<f64>,
    pub positions: Vec<(f64, f64)>,
}

impl Track {
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        positions: Vec<(f64, f64)>,
    ) -> Result<Self, TrackError> {
        let track = Track {
            id: id.into(),
            times,
            positions,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<(), TrackError> {
        if self.times.len() != self.positions.len() {
            return Err(TrackError::LengthMismatch {
                id: self.id.clone(),
                times: self.times.len(),
                positions: self.positions.len(),
            });
        }
        if self.times.len() < 2 {
            return Err(TrackError::TooFewFixes {
                id: self.id.clone(),
                got: self.times.len(),
            });
        }
        for i in 0..self.times.len() {
            if !self.times[i].is_finite()
                || !self.positions[i].0.is_finite()
                || !self.positions[i].1.is_finite()
            {
                return Err(TrackError::NonFinitePosition {
                    id: self.id.clone(),
                    index: i,
                });
            }
            if i > 0 && self.times[i] <= self.times[i - 1] {
                return Err(TrackError::NonIncreasingTimes {
                    id: self.id.clone(),
                    index: i,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn duration(&self) -> f64 {
        self.end_time() - self.start_time()
    }

    /// Median interval between consecutive fixes.
    pub fn median_fix_interval(&self) -> f64 {
        let mut gaps: Vec<f64> = self.times.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = gaps.len();
        if n % 2 == 1 {
            gaps[n / 2]
        } else {
            0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_basic_invariants() {
        assert!(Track::new("a", vec![0.0], vec![(0.0, 0.0)]).is_err());
        assert!(Track::new("a", vec![0.0, 0.0], vec![(0.0, 0.0), (1.0, 1.0)]).is_err());
        assert!(Track::new("a", vec![0.0, 1.0], vec![(0.0, f64::NAN), (1.0, 1.0)]).is_err());
        let t = Track::new("a", vec![0.0, 60.0, 180.0], vec![(0.0, 0.0); 3]).unwrap();
        assert_eq!(t.median_fix_interval(), 90.0);
        assert_eq!(t.duration(), 180.0);
    }
}

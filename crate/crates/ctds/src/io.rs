//! File formats: ESRI-ASCII rasters and the CSV layouts used by the CLI.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::DateTime;
use thiserror::Error;

use crate::ctcrw::ImputedPath;
use crate::discretize::DiscretePath;
use crate::grid::{CellId, GridError, RasterGrid};
use crate::track::{Track, TrackError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot open '{path}': {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("io error on '{path}': {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("'{path}' line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("csv error on '{path}': {source}")]
    Csv { path: String, source: csv::Error },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("raster '{path}' geometry does not match the grid")]
    GeometryMismatch { path: String },
}

/// One parsed ESRI-ASCII raster. Values are row-major with row 0 at the
/// south edge (the file stores the north row first; the reader flips).
#[derive(Debug, Clone)]
pub struct EsriRaster {
    pub n_rows: usize,
    pub n_cols: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cell_size: f64,
    pub nodata: Option<f64>,
    pub values: Vec<f64>,
    /// True where the cell is NODATA.
    pub nodata_mask: Vec<bool>,
}

pub fn read_esri_ascii(path: impl AsRef<Path>) -> Result<EsriRaster, IoError> {
    let path_str = path.as_ref().display().to_string();
    let file = File::open(path.as_ref()).map_err(|source| IoError::Open {
        path: path_str.clone(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut n_cols = None;
    let mut n_rows = None;
    let mut xll = None;
    let mut yll = None;
    let mut cell_size = None;
    let mut nodata = None;
    let mut flat: Vec<f64> = Vec::new();
    let mut in_header = true;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IoError::Io {
            path: path_str.clone(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parse_err = |message: String| IoError::Parse {
            path: path_str.clone(),
            line: lineno + 1,
            message,
        };
        let mut tokens = trimmed.split_whitespace();
        let first = tokens.next().unwrap();
        if in_header {
            let key = first.to_ascii_lowercase();
            let header_value = |tokens: &mut dyn Iterator<Item = &str>| -> Result<f64, IoError> {
                tokens
                    .next()
                    .ok_or_else(|| parse_err(format!("missing value for '{key}'")))?
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("bad value for '{key}': {e}")))
            };
            match key.as_str() {
                "ncols" => {
                    n_cols = Some(header_value(&mut tokens)? as usize);
                    continue;
                }
                "nrows" => {
                    n_rows = Some(header_value(&mut tokens)? as usize);
                    continue;
                }
                "xllcorner" => {
                    xll = Some(header_value(&mut tokens)?);
                    continue;
                }
                "yllcorner" => {
                    yll = Some(header_value(&mut tokens)?);
                    continue;
                }
                "cellsize" => {
                    cell_size = Some(header_value(&mut tokens)?);
                    continue;
                }
                "nodata_value" => {
                    nodata = Some(header_value(&mut tokens)?);
                    continue;
                }
                _ => in_header = false, // first data row
            }
        }
        for tok in std::iter::once(first).chain(tokens) {
            flat.push(
                tok.parse::<f64>()
                    .map_err(|e| parse_err(format!("bad cell value '{tok}': {e}")))?,
            );
        }
    }

    let path_err = |message: &str| IoError::Parse {
        path: path_str.clone(),
        line: 0,
        message: message.to_string(),
    };
    let n_cols = n_cols.ok_or_else(|| path_err("missing ncols header"))?;
    let n_rows = n_rows.ok_or_else(|| path_err("missing nrows header"))?;
    let xllcorner = xll.ok_or_else(|| path_err("missing xllcorner header"))?;
    let yllcorner = yll.ok_or_else(|| path_err("missing yllcorner header"))?;
    let cell_size = cell_size.ok_or_else(|| path_err("missing cellsize header"))?;
    if flat.len() != n_rows * n_cols {
        return Err(path_err(&format!(
            "expected {} values, found {}",
            n_rows * n_cols,
            flat.len()
        )));
    }

    // File order is north row first; flip to row 0 = south.
    let mut values = vec![0.0; flat.len()];
    for file_row in 0..n_rows {
        let grid_row = n_rows - 1 - file_row;
        let src = &flat[file_row * n_cols..(file_row + 1) * n_cols];
        values[grid_row * n_cols..(grid_row + 1) * n_cols].copy_from_slice(src);
    }
    let nodata_mask: Vec<bool> = values
        .iter()
        .map(|&v| nodata.map_or(false, |nd| v == nd))
        .collect();
    Ok(EsriRaster {
        n_rows,
        n_cols,
        xllcorner,
        yllcorner,
        cell_size,
        nodata,
        values,
        nodata_mask,
    })
}

pub fn write_esri_ascii(
    path: impl AsRef<Path>,
    grid: &RasterGrid,
    layer: &str,
    nodata: f64,
) -> Result<(), IoError> {
    let path_str = path.as_ref().display().to_string();
    let values = grid.layer(layer)?;
    let file = File::create(path.as_ref()).map_err(|source| IoError::Open {
        path: path_str.clone(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |source: std::io::Error| IoError::Io {
        path: path_str.clone(),
        source,
    };
    let (ox, oy) = grid.origin();
    writeln!(w, "ncols {}", grid.n_cols()).map_err(io_err)?;
    writeln!(w, "nrows {}", grid.n_rows()).map_err(io_err)?;
    writeln!(w, "xllcorner {}", ox).map_err(io_err)?;
    writeln!(w, "yllcorner {}", oy).map_err(io_err)?;
    writeln!(w, "cellsize {}", grid.cell_size()).map_err(io_err)?;
    writeln!(w, "NODATA_value {}", nodata).map_err(io_err)?;
    for grid_row in (0..grid.n_rows()).rev() {
        let mut line = String::new();
        for col in 0..grid.n_cols() {
            if col > 0 {
                line.push(' ');
            }
            let cell = grid.cell_from_rowcol(grid_row, col);
            let v = if grid.is_valid(cell) {
                values[cell.index()]
            } else {
                nodata
            };
            line.push_str(&format!("{v}"));
        }
        writeln!(w, "{line}").map_err(io_err)?;
    }
    Ok(())
}

/// Builds a grid from rasters, using the first for geometry. NODATA cells
/// of every raster are masked invalid.
pub fn grid_from_rasters(rasters: &[(String, EsriRaster)]) -> Result<RasterGrid, IoError> {
    let (_, first) = rasters
        .first()
        .ok_or_else(|| IoError::Parse {
            path: String::new(),
            line: 0,
            message: "at least one raster is required".to_string(),
        })?;
    let mut grid = RasterGrid::new(
        first.n_rows,
        first.n_cols,
        first.cell_size,
        first.xllcorner,
        first.yllcorner,
    )?;
    for (name, r) in rasters {
        if r.n_rows != first.n_rows
            || r.n_cols != first.n_cols
            || (r.cell_size - first.cell_size).abs() > 1e-9 * first.cell_size
            || (r.xllcorner - first.xllcorner).abs() > 1e-6
            || (r.yllcorner - first.yllcorner).abs() > 1e-6
        {
            return Err(IoError::GeometryMismatch { path: name.clone() });
        }
        // Replace NODATA sentinels with 0 in the stored layer; the cells are
        // masked invalid so the value is never used.
        let cleaned: Vec<f64> = r
            .values
            .iter()
            .zip(&r.nodata_mask)
            .map(|(&v, &nd)| if nd { 0.0 } else { v })
            .collect();
        grid.add_layer(name, cleaned)?;
        grid.mask_invalid(&r.nodata_mask)?;
    }
    Ok(grid)
}

fn parse_time(tok: &str) -> Option<f64> {
    if let Ok(v) = tok.parse::<f64>() {
        return Some(v);
    }
    DateTime::parse_from_rfc3339(tok)
        .ok()
        .map(|dt| dt.timestamp_millis() as f64 / 1000.0)
}

/// Reads telemetry CSV with header `id,time,x,y`. Time is seconds (real) or
/// ISO-8601 UTC. Returns one track per id, in first-appearance order.
pub fn read_telemetry_csv(path: impl AsRef<Path>) -> Result<Vec<Track>, IoError> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|source| IoError::Csv {
            path: path_str.clone(),
            source,
        })?;
    let mut order: Vec<String> = Vec::new();
    let mut data: std::collections::HashMap<String, (Vec<f64>, Vec<(f64, f64)>)> =
        std::collections::HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|source| IoError::Csv {
            path: path_str.clone(),
            source,
        })?;
        let parse_err = |message: String| IoError::Parse {
            path: path_str.clone(),
            line: i + 2,
            message,
        };
        if record.len() < 4 {
            return Err(parse_err(format!("expected 4 columns, got {}", record.len())));
        }
        let id = record[0].to_string();
        let time = parse_time(&record[1])
            .ok_or_else(|| parse_err(format!("bad time '{}'", &record[1])))?;
        let x: f64 = record[2]
            .parse()
            .map_err(|e| parse_err(format!("bad x '{}': {e}", &record[2])))?;
        let y: f64 = record[3]
            .parse()
            .map_err(|e| parse_err(format!("bad y '{}': {e}", &record[3])))?;
        if !data.contains_key(&id) {
            order.push(id.clone());
        }
        let entry = data.entry(id).or_default();
        entry.0.push(time);
        entry.1.push((x, y));
    }
    let mut tracks = Vec::new();
    for id in order {
        let (times, positions) = data.remove(&id).unwrap();
        tracks.push(Track::new(id, times, positions)?);
    }
    Ok(tracks)
}

pub fn write_telemetry_csv(path: impl AsRef<Path>, tracks: &[Track]) -> Result<(), IoError> {
    let path_str = path.as_ref().display().to_string();
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|source| IoError::Csv {
        path: path_str.clone(),
        source,
    })?;
    let csv_err = |source: csv::Error| IoError::Csv {
        path: path_str.clone(),
        source,
    };
    w.write_record(["id", "time", "x", "y"]).map_err(csv_err)?;
    for t in tracks {
        for (time, (x, y)) in t.times.iter().zip(&t.positions) {
            w.write_record([
                t.id.as_str(),
                &format!("{time}"),
                &format!("{x}"),
                &format!("{y}"),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|source| IoError::Io {
        path: path_str.clone(),
        source,
    })?;
    Ok(())
}

/// Imputed path CSV: `draw,time,x,y`.
pub fn write_imputed_path_csv(
    path: impl AsRef<Path>,
    draw: usize,
    imputed: &ImputedPath,
) -> Result<(), IoError> {
    let path_str = path.as_ref().display().to_string();
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|source| IoError::Csv {
        path: path_str.clone(),
        source,
    })?;
    let csv_err = |source: csv::Error| IoError::Csv {
        path: path_str.clone(),
        source,
    };
    w.write_record(["draw", "time", "x", "y"]).map_err(csv_err)?;
    for (t, (x, y)) in imputed.times.iter().zip(&imputed.positions) {
        w.write_record([
            &format!("{draw}"),
            &format!("{t}"),
            &format!("{x}"),
            &format!("{y}"),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| IoError::Io {
        path: path_str.clone(),
        source,
    })?;
    Ok(())
}

pub fn read_imputed_path_csv(path: impl AsRef<Path>) -> Result<ImputedPath, IoError> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|source| IoError::Csv {
            path: path_str.clone(),
            source,
        })?;
    let mut times = Vec::new();
    let mut positions = Vec::new();
    let mut draw = 0u64;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|source| IoError::Csv {
            path: path_str.clone(),
            source,
        })?;
        let parse_err = |message: String| IoError::Parse {
            path: path_str.clone(),
            line: i + 2,
            message,
        };
        if record.len() < 4 {
            return Err(parse_err(format!("expected 4 columns, got {}", record.len())));
        }
        draw = record[0]
            .parse()
            .map_err(|e| parse_err(format!("bad draw '{}': {e}", &record[0])))?;
        times.push(
            record[1]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad time '{}': {e}", &record[1])))?,
        );
        let x: f64 = record[2]
            .parse()
            .map_err(|e| parse_err(format!("bad x '{}': {e}", &record[2])))?;
        let y: f64 = record[3]
            .parse()
            .map_err(|e| parse_err(format!("bad y '{}': {e}", &record[3])))?;
        positions.push((x, y));
    }
    Ok(ImputedPath {
        times,
        positions,
        source_track: path_str,
        draw_seed: draw,
    })
}

/// Discrete path CSV: `visit,cell,entry_time,residence,censored`.
pub fn write_discrete_path_csv(path: impl AsRef<Path>, dp: &DiscretePath) -> Result<(), IoError> {
    let path_str = path.as_ref().display().to_string();
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|source| IoError::Csv {
        path: path_str.clone(),
        source,
    })?;
    let csv_err = |source: csv::Error| IoError::Csv {
        path: path_str.clone(),
        source,
    };
    w.write_record(["visit", "cell", "entry_time", "residence", "censored"])
        .map_err(csv_err)?;
    for v in 0..dp.n_visits() {
        let censored = dp.censored_final && v + 1 == dp.n_visits();
        w.write_record([
            &format!("{v}"),
            &format!("{}", dp.cells[v].index()),
            &format!("{}", dp.clock_times[v]),
            &format!("{}", dp.residence_times[v]),
            &format!("{}", u8::from(censored)),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| IoError::Io {
        path: path_str.clone(),
        source,
    })?;
    Ok(())
}

pub fn read_discrete_path_csv(path: impl AsRef<Path>) -> Result<DiscretePath, IoError> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|source| IoError::Csv {
            path: path_str.clone(),
            source,
        })?;
    let mut cells = Vec::new();
    let mut clock_times = Vec::new();
    let mut residence_times = Vec::new();
    let mut censored_final = false;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|source| IoError::Csv {
            path: path_str.clone(),
            source,
        })?;
        let parse_err = |message: String| IoError::Parse {
            path: path_str.clone(),
            line: i + 2,
            message,
        };
        if record.len() < 5 {
            return Err(parse_err(format!("expected 5 columns, got {}", record.len())));
        }
        cells.push(CellId(record[1]
            .parse()
            .map_err(|e| parse_err(format!("bad cell '{}': {e}", &record[1])))?));
        clock_times.push(
            record[2]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad entry_time '{}': {e}", &record[2])))?,
        );
        residence_times.push(
            record[3]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad residence '{}': {e}", &record[3])))?,
        );
        censored_final = &record[4] == "1" || record[4].eq_ignore_ascii_case("true");
    }
    Ok(DiscretePath {
        cells,
        clock_times,
        residence_times,
        censored_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn esri_roundtrip_flips_rows() {
        let dir = std::env::temp_dir().join("ctds_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("r.asc");
        std::fs::write(
            &p,
            "ncols 3\nnrows 2\nxllcorner 10\nyllcorner 20\ncellsize 5\nNODATA_value -9999\n\
             1 2 3\n4 -9999 6\n",
        )
        .unwrap();
        let r = read_esri_ascii(&p).unwrap();
        assert_eq!((r.n_rows, r.n_cols), (2, 3));
        // South row (grid row 0) is the file's last row.
        assert_eq!(&r.values[0..3], &[4.0, -9999.0, 6.0]);
        assert_eq!(&r.values[3..6], &[1.0, 2.0, 3.0]);
        assert!(r.nodata_mask[1]);

        let grid = grid_from_rasters(&[("lyr".to_string(), r)]).unwrap();
        assert!(!grid.is_valid(CellId(1)));
        assert_eq!(grid.layer("lyr").unwrap()[5], 3.0);

        let out = dir.join("w.asc");
        write_esri_ascii(&out, &grid, "lyr", -9999.0).unwrap();
        let r2 = read_esri_ascii(&out).unwrap();
        assert_eq!(r2.values[0], 4.0);
        assert!(r2.nodata_mask[1]);
        assert_relative_eq!(r2.xllcorner, 10.0);
    }

    #[test]
    fn telemetry_csv_roundtrip_and_iso_times() {
        let dir = std::env::temp_dir().join("ctds_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.csv");
        std::fs::write(
            &p,
            "id,time,x,y\nA,0,1.5,2.5\nA,60,3.5,4.5\nB,1970-01-01T00:00:00Z,0,0\nB,1970-01-01T00:01:30Z,9,9\n",
        )
        .unwrap();
        let tracks = read_telemetry_csv(&p).unwrap();
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].id, "A");
        assert_eq!(tracks[1].times, vec![0.0, 90.0]);

        let out = dir.join("t2.csv");
        write_telemetry_csv(&out, &tracks).unwrap();
        let again = read_telemetry_csv(&out).unwrap();
        assert_eq!(again[0].positions, tracks[0].positions);
    }
}

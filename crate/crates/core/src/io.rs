//! CSV time series and JSON parameter files.
//!
//! Time series use a header row and `.` decimals. Floats are written in
//! shortest round-trip form, so write-then-load is exact. Metadata that does
//! not fit a column (profile interpolation and ambient, dataset capacity and
//! initial SoC) lives in a sidecar `<file>.meta.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::identification::{FitResult, ParamBounds};
use crate::model::{CellState, ModelParams};
use crate::simulator::{Ambient, CurrentProfile, Interpolation, SimulationTrace, TraceRow};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Path of the metadata file that accompanies `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn read_optional_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn write_params(params: &ModelParams, path: &Path) -> Result<()> {
    write_json(params, path)
}

/// Loads and validates a parameter file.
pub fn load_params(path: &Path) -> Result<ModelParams> {
    let params: ModelParams = read_json(path)?;
    params.validate()?;
    Ok(params)
}

/// Columns read from a CSV file by header name.
struct Table {
    rows: Vec<(usize, Vec<f64>)>,
}

fn read_table(path: &Path, required: &[&str], optional: &[&str]) -> Result<(Table, Vec<bool>)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut index = Vec::with_capacity(required.len() + optional.len());
    for name in required {
        index.push(Some(find(name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}` in header"),
        })?));
    }
    let mut present = Vec::with_capacity(optional.len());
    for name in optional {
        let pos = find(name);
        present.push(pos.is_some());
        index.push(pos);
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let mut values = Vec::with_capacity(index.len());
        for (k, col) in index.iter().enumerate() {
            let Some(col) = col else {
                values.push(f64::NAN);
                continue;
            };
            let cell = record.get(*col).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing cell in column {}", col + 1),
            })?;
            let name = if k < required.len() {
                required[k]
            } else {
                optional[k - required.len()]
            };
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric value `{cell}` in column `{name}`"),
            })?;
            values.push(v);
        }
        if let Some((_, prev)) = rows.last() {
            let prev: &Vec<f64> = prev;
            if !(values[0] > prev[0]) {
                return Err(Error::Parse {
                    line,
                    message: format!("time {} does not increase", values[0]),
                });
            }
        }
        rows.push((line, values));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    Ok((Table { rows }, present))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file)))
}

fn write_rows<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    let mut buf: Vec<String> = Vec::with_capacity(header.len());
    for row in rows {
        buf.clear();
        buf.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&buf).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProfileMeta {
    interpolation: Interpolation,
    ambient: Ambient,
}

/// Writes `time_s,current_a` plus a sidecar with interpolation and ambient.
pub fn write_profile(profile: &CurrentProfile, path: &Path) -> Result<()> {
    let header = ["time_s".to_string(), "current_a".to_string()];
    write_rows(path, &header, profile.samples().iter().map(|&(t, i)| vec![t, i]))?;
    write_json(
        &ProfileMeta {
            interpolation: profile.interpolation(),
            ambient: profile.ambient().clone(),
        },
        &sidecar_path(path),
    )
}

/// Loads a profile CSV. Without a sidecar the profile holds each sample and
/// the ambient is 298.15 K.
pub fn load_profile(path: &Path) -> Result<CurrentProfile> {
    let (table, _) = read_table(path, &["time_s", "current_a"], &[])?;
    let meta: Option<ProfileMeta> = read_optional_json(&sidecar_path(path))?;
    let (interpolation, ambient) = match meta {
        Some(m) => (m.interpolation, m.ambient),
        None => (Interpolation::HoldPrevious, Ambient::Constant(298.15)),
    };
    let samples = table.rows.iter().map(|(_, v)| (v[0], v[1])).collect();
    CurrentProfile::new(samples, interpolation, ambient)
}

fn trace_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "time_s",
        "current_a",
        "voltage_v",
        "temp_surf_k",
        "soc",
        "temp_core_k",
        "heat_w",
        "charge_c",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=n).map(|i| format!("v_s{i}")));
    h.extend((1..=3).map(|j| format!("v_e{j}")));
    h
}

/// Writes one row per trace record: terminal quantities followed by the
/// full state.
pub fn write_trace(trace: &SimulationTrace, path: &Path) -> Result<()> {
    let n = trace.rows.first().map(|r| r.state.v_s.len()).unwrap_or(0);
    let rows = trace.rows.iter().map(|r| {
        let mut v = vec![
            r.time,
            r.current,
            r.terminal_voltage,
            r.state.t_surf,
            r.soc,
            r.state.t_core,
            r.heat_rate,
            r.charge,
        ];
        v.extend_from_slice(&r.state.v_s);
        v.extend_from_slice(&r.state.v_e);
        v
    });
    write_rows(path, &trace_header(n), rows)
}

/// Loads the rows of a trace written by [`write_trace`].
pub fn load_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let n = headers.iter().filter(|h| h.starts_with("v_s")).count();
    let names = trace_header(n);
    let names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let (table, _) = read_table(path, &names, &[])?;
    Ok(table
        .rows
        .into_iter()
        .map(|(_, v)| TraceRow {
            time: v[0],
            current: v[1],
            terminal_voltage: v[2],
            soc: v[4],
            heat_rate: v[6],
            charge: v[7],
            state: CellState {
                v_s: v[8..8 + n].to_vec(),
                v_e: [v[8 + n], v[9 + n], v[10 + n]],
                t_core: v[5],
                t_surf: v[3],
            },
        })
        .collect())
}

/// Writes `time_s,current_a,voltage_v[,temp_surf_k]` plus a metadata
/// sidecar.
pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut header = vec!["time_s".to_string(), "current_a".to_string(), "voltage_v".to_string()];
    if data.temp_surf.is_some() {
        header.push("temp_surf_k".into());
    }
    let rows = (0..data.len()).map(|k| {
        let mut v = vec![data.time[k], data.current[k], data.voltage[k]];
        if let Some(t) = &data.temp_surf {
            v.push(t[k]);
        }
        v
    });
    write_rows(path, &header, rows)?;
    write_json(&data.meta, &sidecar_path(path))
}

/// Loads a dataset, or the measured columns of a trace. Metadata comes from
/// the sidecar when present and defaults otherwise.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (table, present) = read_table(path, &["time_s", "current_a", "voltage_v"], &["temp_surf_k"])?;
    let meta: DatasetMeta = read_optional_json(&sidecar_path(path))?.unwrap_or_default();
    let col = |k: usize| table.rows.iter().map(|(_, v)| v[k]).collect::<Vec<f64>>();
    let temp = present[0].then(|| col(3));
    Dataset::new(col(0), col(1), col(2), temp, meta)
}

pub fn write_fit(fit: &FitResult, path: &Path) -> Result<()> {
    write_json(fit, path)
}

pub fn load_fit(path: &Path) -> Result<FitResult> {
    read_json(path)
}

pub fn write_bounds(bounds: &ParamBounds, path: &Path) -> Result<()> {
    write_json(bounds, path)
}

/// Loads and validates a bounds file: a JSON array of
/// `{name, lower, upper, initial}`.
pub fn load_bounds(path: &Path) -> Result<ParamBounds> {
    let bounds: ParamBounds = read_json(path)?;
    bounds.validate()?;
    Ok(bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate, SimOptions};

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = ModelParams::default();
        write_params(&p, &path).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
    }

    #[test]
    fn params_with_bad_eta_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut p = ModelParams::default();
        p.eta.pop();
        write_params(&p, &path).unwrap();
        match load_params(&path) {
            Err(Error::InvalidParams { field, .. }) => assert_eq!(field, "eta"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trace_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let profile = CurrentProfile::constant(-7.5, 120.0, 298.15).unwrap();
        let trace = simulate(&profile, &ModelParams::default(), &SimOptions::default()).unwrap();
        write_trace(&trace, &path).unwrap();
        let rows = load_trace(&path).unwrap();
        assert_eq!(rows, trace.rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("time_s,current_a,voltage_v,temp_surf_k,"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn trace_loads_as_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let profile = CurrentProfile::constant(-2.5, 30.0, 298.15).unwrap();
        let trace = simulate(&profile, &ModelParams::default(), &SimOptions::default()).unwrap();
        write_trace(&trace, &path).unwrap();
        let d = load_dataset(&path).unwrap();
        assert_eq!(d.len(), 31);
        assert!(d.temp_surf.is_some());
        assert_eq!(d.meta, DatasetMeta::default());
    }

    #[test]
    fn dataset_and_profile_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let meta = DatasetMeta {
            capacity_ah: 2.55,
            t_amb: 300.0,
            soc0: 0.9,
        };
        let d = Dataset::new(
            vec![0.0, 0.1, 1.0 / 3.0],
            vec![-1.25, -1.25, 0.0],
            vec![4.1, 4.0999999999999996, 4.05],
            None,
            meta,
        )
        .unwrap();
        write_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);

        let ppath = dir.path().join("p.csv");
        let prof = crate::profiles::gen_udds_like(-8.0, 5.0, 2.5, 1).unwrap();
        write_profile(&prof, &ppath).unwrap();
        assert_eq!(load_profile(&ppath).unwrap(), prof);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "time_s,current_a\n0,1\n1,abc\n").unwrap();
        match load_profile(&path) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("current_a"));
            }
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "time_s,current_a\n0,1\n5,1\n4,1\n").unwrap();
        assert!(matches!(load_profile(&path), Err(Error::Parse { line: 4, .. })));
        std::fs::write(&path, "t,current_a\n0,1\n").unwrap();
        assert!(matches!(load_profile(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = load_params(Path::new("/nonexistent/params.json")).unwrap_err();
        match e {
            Error::Io { source, .. } => assert_eq!(source.kind(), std::io::ErrorKind::NotFound),
            other => panic!("unexpected {other:?}"),
        }
    }
}

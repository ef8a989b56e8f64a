//! Line-oriented text formats for measurements, poses and solver traces.
//!
//! Every file starts with a one-line header `MVESS/<version> <kind> n=<views>`.
//! Blank lines and lines starting with `#` are ignored. Reals are written in
//! the shortest form that parses back to the same `f64`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use tempfile::NamedTempFile;

use crate::admm::TraceRow;
use crate::cover::ViewingGraph;
use crate::error::{Error, Result};
use crate::geom::{CameraPose, Rotation};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "MVESS";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub i: usize,
    pub j: usize,
    pub block: Matrix3<f64>,
    pub weight: f64,
}

/// Observed blocks `E_ij` with `i < j`, sorted by pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFile {
    pub n: usize,
    pub records: Vec<Measurement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFile {
    pub n: usize,
    /// Indexed by view; views absent from the file are `None`.
    pub poses: Vec<Option<CameraPose>>,
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Lines<'a> {
    path: PathBuf,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, path: &Path) -> Lines<'a> {
        Lines {
            path: path.to_path_buf(),
            inner: text.lines().enumerate(),
        }
    }

    fn error(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    /// Next content line as (1-based line number, tokens).
    fn next_record(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (k, line) in self.inner.by_ref() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Some((k + 1, line.split_whitespace().collect()));
        }
        None
    }

    fn header(&mut self, kind: &str) -> Result<usize> {
        let (line, tokens) = self.next_record().ok_or_else(|| self.error(1, "missing header"))?;
        let expected = format!("{MAGIC}/{FORMAT_VERSION}");
        match tokens.as_slice() {
            [magic, k, n] if *magic == expected && *k == kind => n
                .strip_prefix("n=")
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| self.error(line, format!("bad view count `{n}`"))),
            [magic, ..] if magic.starts_with(MAGIC) && *magic != expected => {
                Err(self.error(line, format!("unsupported format version `{magic}`")))
            }
            _ => Err(self.error(line, format!("expected header `{expected} {kind} n=<views>`"))),
        }
    }
}

fn parse_reals(lines: &Lines, line: usize, tokens: &[&str]) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|t| match t.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(lines.error(line, format!("`{t}` is not a finite real"))),
        })
        .collect()
}

fn parse_index(lines: &Lines, line: usize, token: &str, n: usize) -> Result<usize> {
    match token.parse::<usize>() {
        Ok(v) if v < n => Ok(v),
        Ok(v) => Err(lines.error(line, format!("view {v} out of range for n={n}"))),
        Err(_) => Err(lines.error(line, format!("`{token}` is not a view index"))),
    }
}

fn push_matrix(out: &mut String, m: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            let _ = write!(out, " {}", m[(r, c)]);
        }
    }
}

fn matrix_from(values: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&values[..9])
}

impl MeasurementFile {
    pub fn from_graph(g: &ViewingGraph) -> MeasurementFile {
        MeasurementFile {
            n: g.n(),
            records: g
                .edges()
                .map(|(i, j, e)| Measurement {
                    i,
                    j,
                    block: e.measurement,
                    weight: e.weight,
                })
                .collect(),
        }
    }

    pub fn to_graph(&self) -> Result<ViewingGraph> {
        let mut g = ViewingGraph::new(self.n);
        for r in &self.records {
            g.add_edge(r.i, r.j, r.block, r.weight)?;
        }
        Ok(g)
    }

    pub fn parse(text: &str, path: &Path) -> Result<MeasurementFile> {
        let mut lines = Lines::new(text, path);
        let n = lines.header("measurements")?;
        let mut records: Vec<Measurement> = Vec::new();
        while let Some((line, tokens)) = lines.next_record() {
            if tokens.len() != 12 {
                return Err(lines.error(line, format!("expected 12 fields, found {}", tokens.len())));
            }
            let i = parse_index(&lines, line, tokens[0], n)?;
            let j = parse_index(&lines, line, tokens[1], n)?;
            if i >= j {
                return Err(lines.error(line, format!("pair ({i}, {j}) must satisfy i < j")));
            }
            if records.iter().any(|r| r.i == i && r.j == j) {
                return Err(lines.error(line, format!("duplicate pair ({i}, {j})")));
            }
            let values = parse_reals(&lines, line, &tokens[2..])?;
            records.push(Measurement {
                i,
                j,
                block: matrix_from(&values),
                weight: values[9],
            });
        }
        records.sort_by_key(|r| (r.i, r.j));
        Ok(MeasurementFile { n, records })
    }

    pub fn read(path: &Path) -> Result<MeasurementFile> {
        MeasurementFile::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.render())
    }

    pub fn render(&self) -> String {
        let mut out = format!("{MAGIC}/{FORMAT_VERSION} measurements n={}\n", self.n);
        for r in &self.records {
            let _ = write!(out, "{} {}", r.i, r.j);
            push_matrix(&mut out, &r.block);
            let _ = writeln!(out, " {}", r.weight);
        }
        out
    }
}

impl PoseFile {
    pub fn new(poses: Vec<Option<CameraPose>>) -> PoseFile {
        PoseFile { n: poses.len(), poses }
    }

    pub fn parse(text: &str, path: &Path) -> Result<PoseFile> {
        let mut lines = Lines::new(text, path);
        let n = lines.header("poses")?;
        let mut poses = vec![None; n];
        while let Some((line, tokens)) = lines.next_record() {
            if tokens.len() != 13 {
                return Err(lines.error(line, format!("expected 13 fields, found {}", tokens.len())));
            }
            let v = parse_index(&lines, line, tokens[0], n)?;
            if poses[v].is_some() {
                return Err(lines.error(line, format!("duplicate view {v}")));
            }
            let values = parse_reals(&lines, line, &tokens[1..])?;
            let rotation = Rotation::new(matrix_from(&values)).map_err(|e| lines.error(line, e.to_string()))?;
            let center = Vector3::new(values[9], values[10], values[11]);
            poses[v] = Some(CameraPose::new(rotation, center));
        }
        Ok(PoseFile { n, poses })
    }

    pub fn read(path: &Path) -> Result<PoseFile> {
        PoseFile::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.render())
    }

    pub fn render(&self) -> String {
        let mut out = format!("{MAGIC}/{FORMAT_VERSION} poses n={}\n", self.n);
        for (v, p) in self.poses.iter().enumerate() {
            if let Some(p) = p {
                let _ = write!(out, "{v}");
                push_matrix(&mut out, p.rotation.matrix());
                let _ = writeln!(out, " {} {} {}", p.center.x, p.center.y, p.center.z);
            }
        }
        out
    }
}

pub const TRACE_COLUMNS: &str = "iteration objective max_primal_b max_primal_d skipped relative_change";

pub fn render_trace(trace: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_COLUMNS}\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{} {:e} {:e} {:e} {} {:e}",
            r.iteration, r.objective, r.max_primal_b, r.max_primal_d, r.skipped, r.relative_change
        );
    }
    out
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    write_atomic(path, &render_trace(trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneSpec};
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("test.txt")
    }

    #[test]
    fn measurement_round_trip_through_disk() {
        let scene = generate_scene(&SceneSpec {
            n: 7,
            sigma_r: 0.01,
            sigma_t: 0.01,
            missing_fraction: 0.2,
            seed: 3,
            ..SceneSpec::default()
        })
        .unwrap();
        let file = MeasurementFile::from_graph(&scene.graph);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        file.write(&path).unwrap();
        let back = MeasurementFile::read(&path).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_graph().unwrap(), scene.graph);
    }

    #[test]
    fn pose_round_trip_keeps_gaps() {
        let scene = generate_scene(&SceneSpec { n: 5, ..SceneSpec::default() }).unwrap();
        let mut poses: Vec<Option<CameraPose>> = scene.poses.iter().copied().map(Some).collect();
        poses[2] = None;
        let file = PoseFile::new(poses);
        let back = PoseFile::parse(&file.render(), p()).unwrap();
        assert_eq!(back, file);
        assert_eq!(file.render().lines().count(), 5);
    }

    #[test]
    fn header_errors() {
        assert!(MeasurementFile::parse("", p()).is_err());
        assert!(MeasurementFile::parse("MVESS/2 measurements n=3\n", p()).is_err());
        assert!(MeasurementFile::parse("MVESS/1 poses n=3\n", p()).is_err());
        assert!(MeasurementFile::parse("MVESS/1 measurements n=x\n", p()).is_err());
        let ok = MeasurementFile::parse("# comment\n\nMVESS/1 measurements n=3\n", p()).unwrap();
        assert_eq!(ok.n, 3);
        assert!(ok.records.is_empty());
    }

    #[test]
    fn record_errors_carry_line_numbers() {
        let row = "0 -1 0 1 0 0 0 0 0 1";
        let bad = [
            format!("MVESS/1 measurements n=3\n1 0 {row}\n"),
            format!("MVESS/1 measurements n=3\n0 3 {row}\n"),
            format!("MVESS/1 measurements n=3\n0 1 {row}\n0 1 {row}\n"),
            format!("MVESS/1 measurements n=3\n0 1 {row} 5\n"),
            "MVESS/1 measurements n=3\n0 1 0 0 0 0 0 0 0 0 nan 1\n".to_string(),
        ];
        let lines = [2, 2, 3, 2, 2];
        for (text, expected) in bad.iter().zip(lines) {
            match MeasurementFile::parse(text, p()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, expected, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn pose_file_rejects_non_rotation() {
        let text = "MVESS/1 poses n=2\n0 2 0 0 0 1 0 0 0 1 0 0 0\n";
        assert!(matches!(PoseFile::parse(text, p()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn trace_has_one_line_per_iteration() {
        let rows = vec![
            TraceRow {
                iteration: 1,
                objective: 0.5,
                max_primal_b: 1e-3,
                max_primal_d: 2e-3,
                skipped: 0,
                relative_change: 0.1,
            };
            3
        ];
        let text = render_trace(&rows);
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), TRACE_COLUMNS);
    }

    proptest! {
        #[test]
        fn reals_round_trip_exactly(entries in proptest::collection::vec(-1e6f64..1e6, 9), w in 0.0f64..1e3) {
            let m = Matrix3::from_row_slice(&entries);
            let file = MeasurementFile { n: 4, records: vec![Measurement { i: 1, j: 3, block: m, weight: w }] };
            prop_assert_eq!(MeasurementFile::parse(&file.render(), p()).unwrap(), file);
        }
    }
}

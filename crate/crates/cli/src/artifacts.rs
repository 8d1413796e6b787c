//! CSV, JSON and manifest I/O for run directories.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use riskfb::galerkin::ControlTrajectory;
use riskfb::grid::TimeGrid;
use riskfb::riccati::FeedbackLaw;
use riskfb::sqp::IterationRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const CONTROL_FILE: &str = "control.csv";
pub const FEEDBACK_FILE: &str = "feedback.csv";
pub const STATE_FILE: &str = "state.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(text: &str, path: &Path) -> Result<f64, CliError> {
    text.trim()
        .parse()
        .map_err(|e| CliError::io(path.display(), format!("bad number {text:?}: {e}")))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact(path.display().to_string()))
    }
}

pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path.display(), e))?;
    w.write_record(header).map_err(|e| CliError::io(path.display(), e))?;
    for row in rows {
        w.write_record(row).map_err(|e| CliError::io(path.display(), e))?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))
}

/// Header of strings plus numeric rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    require_file(path)?;
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path.display(), e))?;
    let header = r
        .headers()
        .map_err(|e| CliError::io(path.display(), e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| CliError::io(path.display(), e))?;
        rows.push(record.iter().map(|f| parse_f64(f, path)).collect::<Result<Vec<_>, _>>()?);
    }
    Ok((header, rows))
}

/// Realization × time matrix whose header row holds the time values.
pub fn write_matrix(path: &Path, times: &[f64], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let header: Vec<String> = times.iter().map(|&t| fmt_f64(t)).collect();
    let body: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(|&v| fmt_f64(v)).collect()).collect();
    write_table(path, &header, &body)
}

pub fn read_matrix(path: &Path) -> Result<(Vec<f64>, Vec<Vec<f64>>), CliError> {
    let (header, rows) = read_table(path)?;
    let times = header.iter().map(|h| parse_f64(h, path)).collect::<Result<_, _>>()?;
    Ok((times, rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path.display(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path.display(), e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path.display(), e))
}

pub fn write_control(path: &Path, u: &ControlTrajectory) -> Result<(), CliError> {
    let mut header = vec!["time".to_string()];
    header.extend((1..=u.inputs()).map(|i| format!("u{i}")));
    let rows: Vec<Vec<String>> = u
        .values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let mut row = vec![fmt_f64(u.grid.time(k))];
            row.extend(v.iter().map(|&x| fmt_f64(x)));
            row
        })
        .collect();
    write_table(path, &header, &rows)
}

pub fn read_control(path: &Path, grid: TimeGrid) -> Result<ControlTrajectory, CliError> {
    let (header, rows) = read_table(path)?;
    if rows.len() != grid.steps() || header.len() < 2 {
        return Err(CliError::io(
            path.display(),
            format!("expected {} control rows, found {}", grid.steps(), rows.len()),
        ));
    }
    let values = rows
        .iter()
        .map(|r| DVector::from_column_slice(&r[1..]))
        .collect();
    Ok(ControlTrajectory { grid, values })
}

pub fn write_feedback(path: &Path, law: &FeedbackLaw) -> Result<(), CliError> {
    let mut header: Vec<String> = ["step", "time", "actuator", "offset"].map(String::from).to_vec();
    header.extend((0..law.state_dim()).map(|j| format!("k{j}")));
    let mut rows = Vec::with_capacity(law.gains.len() * law.inputs());
    for (k, (gain, offset)) in law.gains.iter().zip(&law.offsets).enumerate() {
        for a in 0..gain.nrows() {
            let mut row = vec![k.to_string(), fmt_f64(law.grid.time(k)), a.to_string(), fmt_f64(offset[a])];
            row.extend(gain.row(a).iter().map(|&v| fmt_f64(v)));
            rows.push(row);
        }
    }
    write_table(path, &header, &rows)
}

pub fn read_feedback(path: &Path, grid: TimeGrid, inputs: usize, state_dim: usize) -> Result<FeedbackLaw, CliError> {
    let (_, rows) = read_table(path)?;
    if rows.len() != grid.steps() * inputs || rows.iter().any(|r| r.len() != 4 + state_dim) {
        return Err(CliError::io(path.display(), "feedback table does not match the run configuration"));
    }
    let mut gains = Vec::with_capacity(grid.steps());
    let mut offsets = Vec::with_capacity(grid.steps());
    for block in rows.chunks(inputs) {
        gains.push(DMatrix::from_fn(inputs, state_dim, |a, j| block[a][4 + j]));
        offsets.push(DVector::from_fn(inputs, |a, _| block[a][3]));
    }
    Ok(FeedbackLaw { grid, gains, offsets })
}

pub fn write_iterations(path: &Path, records: &[IterationRecord], step_label: &str) -> Result<(), CliError> {
    let header = ["iteration", "objective", "gradient_norm", step_label].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                fmt_f64(r.objective),
                fmt_f64(r.gradient_norm),
                fmt_f64(r.step),
            ]
        })
        .collect();
    write_table(path, &header, &rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Rewrites `manifest.json` in `root` listing every other file below it.
pub fn refresh_manifest(root: &Path) -> Result<Manifest, CliError> {
    let manifest_path = root.join(MANIFEST_FILE);
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::io(root.display(), e))?;
        if !entry.file_type().is_file() || entry.path() == manifest_path {
            continue;
        }
        let rel: PathBuf = entry.path().strip_prefix(root).expect("walk stays below root").to_path_buf();
        let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        let bytes = entry.metadata().map_err(|e| CliError::io(entry.path().display(), e))?.len();
        files.push(ManifestEntry {
            path,
            bytes,
            sha256: sha256_file(entry.path())?,
        });
    }
    let manifest = Manifest { files };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// Checks every manifest digest against the files on disk.
pub fn verify_manifest(root: &Path) -> Result<(), CliError> {
    let manifest: Manifest = read_json(&root.join(MANIFEST_FILE))?;
    for entry in &manifest.files {
        let path = root.join(&entry.path);
        require_file(&path)?;
        if sha256_file(&path)? != entry.sha256 {
            return Err(CliError::Io(format!("digest mismatch for {}", entry.path)));
        }
    }
    Ok(())
}

/// Linear-interpolation percentile of sorted data, `p` in percent.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let rank = p / 100.0 * (n - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Column of a realization × time matrix, sorted ascending.
pub fn sorted_column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
    col.sort_by(f64::total_cmp);
    col
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn percentiles_interpolate() {
        let data = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&data, 50.0), 3.0);
        assert!((percentile(&data, 5.0) - 1.2).abs() < 1e-15);
        assert!((percentile(&data, 95.0) - 4.8).abs() < 1e-15);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![vec![1.0 / 7.0, 2.0], vec![3.0, -4.5e-12]];
        write_matrix(&path, &[0.25, 0.5], &rows).unwrap();
        let (times, back) = read_matrix(&path).unwrap();
        assert_eq!(times, vec![0.25, 0.5]);
        assert_eq!(back, rows);
    }

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a.txt"), "alpha").unwrap();
        fs::write(dir.path().join("sub/b.txt"), "beta").unwrap();
        let m = refresh_manifest(dir.path()).unwrap();
        let paths: Vec<_> = m.files.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, ["a.txt", "sub/b.txt"]);
        verify_manifest(dir.path()).unwrap();
        fs::write(dir.path().join("a.txt"), "gamma").unwrap();
        assert!(verify_manifest(dir.path()).is_err());
    }
}

//! Binary feature files and the CSV manifest that indexes them.
//!
//! Feature file layout: `"SIMF"`, then little-endian `u32` version (1),
//! hemispheres (2), vertices (40962) and channels, then `f32` values
//! `[2][V][C]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{expected_vertices, DataError, Result, SubjectRecord, HEMISPHERES};

pub const MAGIC: &[u8; 4] = b"SIMF";
pub const VERSION: u32 = 1;
pub const MANIFEST_HEADER: [&str; 5] = [
    "subject_id",
    "path",
    "pma_weeks",
    "language_score",
    "motor_score",
];
const HEADER_BYTES: usize = 20;

/// Write `features` (`[2][V][C]`) as `f32`.
pub fn write_simf(path: &Path, features: &[f64], channels: usize) -> Result<()> {
    let v = expected_vertices();
    if channels == 0 || features.len() != HEMISPHERES * v * channels {
        return Err(DataError::ShapeMismatch {
            path: path.to_path_buf(),
            msg: format!(
                "{} values for {HEMISPHERES}x{v}x{channels}",
                features.len()
            ),
        });
    }
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    for x in [VERSION, HEMISPHERES as u32, v as u32, channels as u32] {
        w.write_all(&x.to_le_bytes()).map_err(io)?;
    }
    for &x in features {
        w.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Returns the features widened to `f64` and the channel count.
pub fn read_simf(path: &Path) -> Result<(Vec<f64>, usize)> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DataError::MissingFile {
                path: path.to_path_buf(),
            })
        }
        Err(source) => {
            return Err(DataError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let shape_err = |msg: String| DataError::ShapeMismatch {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER_BYTES {
        return Err(shape_err("header truncated".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4"));
    let (version, hemis, verts, channels) = (word(0), word(1), word(2), word(3) as usize);
    if version != VERSION {
        return Err(DataError::Invalid(format!(
            "{}: unsupported feature file version {version}",
            path.display()
        )));
    }
    if hemis as usize != HEMISPHERES || verts as usize != expected_vertices() || channels == 0 {
        return Err(shape_err(format!(
            "header declares {hemis}x{verts}x{channels}, expected {HEMISPHERES}x{}xC",
            expected_vertices()
        )));
    }
    let n = HEMISPHERES * expected_vertices() * channels;
    let payload = &bytes[HEADER_BYTES..];
    if payload.len() != 4 * n {
        return Err(shape_err(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
        .collect();
    Ok((data, channels))
}

fn parse_label(path: &Path, column: &str, cell: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>().map(Some).map_err(|_| {
        DataError::Invalid(format!(
            "{}: column {column} holds non-numeric value {cell:?}",
            path.display()
        ))
    })
}

/// Read a manifest; relative feature paths resolve against its directory.
/// Blank label cells are left out of the record's label map.
pub fn load_manifest(path: &Path) -> Result<Vec<SubjectRecord>> {
    if !path.exists() {
        return Err(DataError::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header != MANIFEST_HEADER {
        return Err(DataError::Invalid(format!(
            "{}: manifest header {:?}, expected {:?}",
            path.display(),
            header,
            MANIFEST_HEADER
        )));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let id = row.get(0).unwrap_or("").trim().to_string();
        let rel = PathBuf::from(row.get(1).unwrap_or("").trim());
        let file = if rel.is_absolute() { rel } else { base.join(rel) };
        let (features, channels) = read_simf(&file)?;
        let mut labels = BTreeMap::new();
        for (k, name) in MANIFEST_HEADER.iter().enumerate().skip(2) {
            if let Some(y) = parse_label(path, name, row.get(k).unwrap_or(""))? {
                labels.insert(name.to_string(), y);
            }
        }
        out.push(SubjectRecord::new(id, channels, features, labels)?);
    }
    Ok(out)
}

/// Require `label` on every record.
pub fn require_label(records: &[SubjectRecord], label: &str) -> Result<()> {
    for r in records {
        r.label(label)?;
    }
    Ok(())
}

/// Write one feature file per record under `dir` plus `dir/manifest.csv`.
pub fn write_dataset(dir: &Path, records: &[SubjectRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let manifest = dir.join("manifest.csv");
    let csv_err = |source| DataError::Csv {
        path: manifest.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&manifest).map_err(csv_err)?;
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in records {
        let file = format!("{}.simf", r.subject_id);
        write_simf(&dir.join(&file), &r.features, r.channels)?;
        let mut row = vec![r.subject_id.clone(), file];
        for name in &MANIFEST_HEADER[2..] {
            row.push(r.labels.get(*name).map(|v| format!("{v:?}")).unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: manifest.clone(),
        source,
    })?;
    Ok(manifest)
}

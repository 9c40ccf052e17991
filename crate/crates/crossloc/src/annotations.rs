//! JSON Lines annotation files.
//!
//! One object per line:
//!
//! ```json
//! {"id":"syn000001","query_path":"images/syn000001_q.png","click_xy":[31,17],
//!  "reference_path":"images/syn000001_r.png","bbox_xywh":[64.5,40,13,9],"split":"train"}
//! ```
//!
//! `bbox_xywh` is center x, center y, width, height in reference pixels.
//! Image paths are relative to the annotation file. Blank lines are skipped.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use crossloc_core::dataset::{Sample, Split};
use crossloc_core::detection::BBox;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LineError, Result};
use crate::imageio::{read_rgb, write_rgb};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub query_path: String,
    pub click_xy: [f64; 2],
    pub reference_path: String,
    pub bbox_xywh: [f64; 4],
    pub split: Split,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Parses every line; collects every failure with its line number.
pub fn read_records(path: &Path) -> Result<Vec<(usize, Record)>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(line) {
            Ok(r) if !seen.insert(r.id.clone()) => errors.push(LineError {
                line: i + 1,
                message: format!("duplicate id {:?}", r.id),
            }),
            Ok(r) => out.push((i + 1, r)),
            Err(e) => errors.push(LineError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Annotations {
            path: path.into(),
            errors,
        })
    }
}

fn to_sample(base: &Path, r: &Record) -> Result<Sample> {
    let [x, y, w, h] = r.bbox_xywh;
    let sample = Sample {
        id: r.id.clone(),
        query: read_rgb(&base.join(&r.query_path))?,
        click: (r.click_xy[0], r.click_xy[1]),
        reference: read_rgb(&base.join(&r.reference_path))?,
        gt: BBox { x, y, w, h },
        split: r.split,
    };
    sample.validate()?;
    Ok(sample)
}

/// Loads and validates every sample. Any bad line fails the whole load,
/// and the error lists all of them.
pub fn load_annotations(path: &Path) -> Result<Vec<Sample>> {
    let records = read_records(path)?;
    let base = base_dir(path);
    let mut samples = Vec::with_capacity(records.len());
    let mut errors = Vec::new();
    for (line, r) in &records {
        match to_sample(&base, r) {
            Ok(s) => samples.push(s),
            Err(e) => errors.push(LineError {
                line: *line,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(samples)
    } else {
        Err(Error::Annotations {
            path: path.into(),
            errors,
        })
    }
}

/// Samples of one split, in file order.
pub fn load_split(path: &Path, split: Split) -> Result<Vec<Sample>> {
    Ok(load_annotations(path)?
        .into_iter()
        .filter(|s| s.split == split)
        .collect())
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(&buf).map_err(Error::io(path))
}

/// Writes `samples` as PNG pairs under `dir/images` plus
/// `dir/annotations.jsonl`. Returns the annotation path.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let q = format!("images/{}_q.png", s.id);
        let r = format!("images/{}_r.png", s.id);
        write_rgb(&dir.join(&q), &s.query)?;
        write_rgb(&dir.join(&r), &s.reference)?;
        records.push(Record {
            id: s.id.clone(),
            query_path: q,
            click_xy: [s.click.0, s.click.1],
            reference_path: r,
            bbox_xywh: [s.gt.x, s.gt.y, s.gt.w, s.gt.h],
            split: s.split,
        });
    }
    let path = dir.join("annotations.jsonl");
    write_records(&path, &records)?;
    Ok(path)
}

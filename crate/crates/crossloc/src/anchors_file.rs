//! Anchor files: one `w h` pair per line, pixels, sorted by area.

use std::path::Path;

use crossloc_core::detection::AnchorSet;

use crate::error::{Error, Result};

pub fn format_anchors(anchors: &AnchorSet) -> String {
    anchors.as_slice().iter().map(|(w, h)| format!("{w} {h}\n")).collect()
}

pub fn write_anchors(path: &Path, anchors: &AnchorSet) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, format_anchors(anchors)).map_err(Error::io(path))
}

pub fn read_anchors(path: &Path) -> Result<AnchorSet> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        let [w, h] = nums[..] else {
            return Err(Error::format(path, format!("line {}: expected `w h`", i + 1)));
        };
        pairs.push((w, h));
    }
    AnchorSet::new(pairs).map_err(|e| Error::format(path, e.to_string()))
}

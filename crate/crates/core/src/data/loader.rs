//! Sequences on disk: one directory per sequence holding numbered PNG/JPEG
//! frames and a `groundtruth.txt` with one `x,y,w,h` line per frame.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::metrics::BBox;

pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

/// Parses `x,y,w,h` lines; blank lines are ignored.
pub fn parse_groundtruth(text: &str) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "groundtruth line {}: expected 4 comma-separated values, got {}",
                n + 1,
                fields.len()
            )));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Parse(format!("groundtruth line {}: {f:?} is not a finite number", n + 1)))?;
        }
        if v[2] < 0.0 || v[3] < 0.0 {
            return Err(Error::Parse(format!("groundtruth line {}: negative box size", n + 1)));
        }
        boxes.push(BBox::new(v[0], v[1], v[2], v[3]));
    }
    Ok(boxes)
}

pub fn format_groundtruth(boxes: &[BBox]) -> String {
    boxes.iter().map(|b| format!("{},{},{},{}\n", b.x, b.y, b.w, b.h)).collect()
}

fn frame_number(path: &Path) -> Option<u64> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if !matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
        return None;
    }
    path.file_stem()?.to_str()?.parse().ok()
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads one sequence; frames are converted to single-channel intensity.
pub fn load_sequence(dir: &Path, identity: usize) -> Result<Sequence> {
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let boxes = parse_groundtruth(&text)?;
    let mut numbered: Vec<(u64, PathBuf)> = read_dir_sorted(dir)?
        .into_iter()
        .filter_map(|p| frame_number(&p).map(|n| (n, p)))
        .collect();
    numbered.sort();
    let frames = numbered
        .iter()
        .map(|(_, p)| Ok(image::open(p)?.to_luma8()))
        .collect::<Result<Vec<_>>>()?;
    let seq = Sequence {
        name: dir.file_name().and_then(|n| n.to_str()).unwrap_or("sequence").to_string(),
        identity,
        frames,
        boxes,
        nuisances: Vec::new(),
    };
    seq.validate()?;
    Ok(seq)
}

/// Loads every subdirectory of `root` as a sequence, in name order.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let dirs: Vec<PathBuf> = read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if dirs.is_empty() {
        return Err(Error::Validation(format!("{} contains no sequence directories", root.display())));
    }
    let sequences = dirs
        .iter()
        .enumerate()
        .map(|(i, d)| load_sequence(d, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { sequences })
}

/// Writes frames as `0001.png, 0002.png, ...` plus the ground-truth file.
pub fn save_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        frame.save(dir.join(format!("{:04}.png", i + 1)))?;
    }
    let gt = dir.join(GROUNDTRUTH_FILE);
    fs::write(&gt, format_groundtruth(&seq.boxes)).map_err(|e| Error::io(&gt, e))
}

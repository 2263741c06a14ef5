use std::fs;
use std::path::{Path, PathBuf};

use super::{Attribute, SequenceRecord};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::imaging::{load_image, save_png};

/// Parses `x,y,w,h` lines; commas, tabs and spaces all act as separators.
pub fn parse_groundtruth(text: &str, path: &Path) -> Result<Vec<Rect>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("not a number: {s:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 4 {
            return Err(err(format!("expected 4 values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        out.push(Rect::new(vals[0], vals[1], vals[2], vals[3]));
    }
    Ok(out)
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Reads `<dir>/img/*.{png,jpg}` (sorted by name), `<dir>/groundtruth_rect.txt`
/// and, if present, `<dir>/attributes.txt`.
pub fn load_sequence_dir(dir: &Path) -> Result<SequenceRecord> {
    let gt_path = dir.join("groundtruth_rect.txt");
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let gt = parse_groundtruth(&text, &gt_path)?;
    let files = frame_files(&dir.join("img"))?;
    if files.len() != gt.len() {
        return Err(Error::Data(format!(
            "{}: {} frames but {} ground-truth lines",
            dir.display(),
            files.len(),
            gt.len()
        )));
    }
    let frames = crate::par::map_range(files.len(), |i| load_image(&files[i])).into_iter().collect::<Result<Vec<_>>>()?;
    let attr_path = dir.join("attributes.txt");
    let attributes = if attr_path.exists() {
        let text = fs::read_to_string(&attr_path).map_err(|e| Error::io(&attr_path, e))?;
        let mut a = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<Attribute>())
            .collect::<Result<Vec<_>>>()?;
        a.sort();
        a.dedup();
        a
    } else {
        Vec::new()
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let seq = SequenceRecord {
        name,
        frames,
        gt,
        attributes,
    };
    seq.validate()?;
    Ok(seq)
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn format_box(r: &Rect) -> String {
    format!("{},{},{},{}", fmt_num(r.x), fmt_num(r.y), fmt_num(r.w), fmt_num(r.h))
}

pub fn write_sequence_dir(dir: &Path, seq: &SequenceRecord) -> Result<()> {
    seq.validate()?;
    let img = dir.join("img");
    fs::create_dir_all(&img).map_err(|e| Error::io(&img, e))?;
    crate::par::map_range(seq.len(), |i| save_png(&img.join(format!("{:06}.png", i + 1)), &seq.frames[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut gt = String::new();
    for r in &seq.gt {
        gt.push_str(&format_box(r));
        gt.push('\n');
    }
    let gt_path = dir.join("groundtruth_rect.txt");
    fs::write(&gt_path, gt).map_err(|e| Error::io(&gt_path, e))?;
    if !seq.attributes.is_empty() {
        let names: Vec<_> = seq.attributes.iter().map(|a| a.name()).collect();
        let p = dir.join("attributes.txt");
        fs::write(&p, names.join("\n") + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

//! Plain-text point clouds: one `x y z` triple per line, `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use pointlora_core::geometry::{Point, PointCloud};

use crate::error::{Error, Result};

pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut p: Point = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("invalid coordinate {f:?}")))?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Contract(format!("{} contains no points", path.display())));
    }
    Ok(PointCloud::new(points)?)
}

pub fn load_point_cloud_file(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

pub fn format_xyz(points: &[Point]) -> String {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

pub fn write_xyz(path: impl AsRef<Path>, points: &[Point]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_xyz(points)).map_err(|e| Error::io(path, e))
}

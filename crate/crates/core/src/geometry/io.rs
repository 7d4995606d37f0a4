//! Plain-text point clouds: one `x y z` per line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spatial::Point3;

pub fn points_to_text(points: &[Point3]) -> String {
    let mut out = String::new();
    for p in points {
        writeln!(out, "{:e} {:e} {:e}", p[0], p[1], p[2]).expect("write to string");
    }
    out
}

/// Blank lines and `#` comments are skipped.
pub fn points_from_text(text: &str, source: &str) -> Result<Vec<Point3>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let c: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(source, n + 1, "bad coordinate"))?;
        if c.len() != 3 || c.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(source, n + 1, "expected three finite coordinates"));
        }
        out.push([c[0], c[1], c[2]]);
    }
    Ok(out)
}

pub fn save_points(path: &Path, points: &[Point3]) -> Result<()> {
    std::fs::write(path, points_to_text(points)).map_err(|e| Error::io(path, e))
}

pub fn load_points(path: &Path) -> Result<Vec<Point3>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    points_from_text(&text, &path.display().to_string())
}

//! Plain-text point-cloud files.
//!
//! `.xyz`: one point per line, three decimal numbers separated by single
//! spaces, `\n` line endings, no header. Numbers carry 9 significant digits.
//! A plane record is a single line `nx ny nz offset`. PLY export is ASCII,
//! vertex-only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cloud::{Point, PointCloud, SplitPlane};
use crate::error::{Error, Result};

const SIGNIFICANT: i32 = 9;

/// Formats `v` with 9 significant digits, fixed notation for ordinary
/// magnitudes and exponent notation for very small or large ones.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", (SIGNIFICANT - 1) as usize, v);
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if !(-5..SIGNIFICANT).contains(&exp) {
        return sci;
    }
    let decimals = (SIGNIFICANT - 1 - exp).max(0) as usize;
    let fixed = format!("{v:.decimals$}");
    if fixed == "-0" || fixed.chars().all(|c| c == '0' || c == '.' || c == '-') {
        "0".to_string()
    } else {
        fixed
    }
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 40);
    for p in cloud.points() {
        let _ = writeln!(
            out,
            "{} {} {}",
            format_number(p[0]),
            format_number(p[1]),
            format_number(p[2])
        );
    }
    out
}

fn parse_fields<const N: usize>(line: &str, origin: &Path, line_no: usize) -> Result<[f64; N]> {
    let parse_err = |message: String| Error::Parse {
        path: origin.to_path_buf(),
        line: line_no,
        message,
    };
    let mut out = [0.0f64; N];
    let mut fields = line.split(' ');
    for slot in out.iter_mut() {
        let field = fields
            .next()
            .ok_or_else(|| parse_err(format!("expected {N} numbers")))?;
        *slot = field
            .parse()
            .map_err(|_| parse_err(format!("not a number: {field:?}")))?;
        if !slot.is_finite() {
            return Err(parse_err(format!("non-finite value {field:?}")));
        }
    }
    if fields.next().is_some() {
        return Err(parse_err(format!("expected {N} numbers")));
    }
    Ok(out)
}

/// Parses `.xyz` text; `origin` only labels error messages.
pub fn parse_xyz(text: &str, origin: &Path) -> Result<PointCloud> {
    let mut points: Vec<Point> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        points.push(parse_fields::<3>(line, origin, i + 1)?);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: "no points".into(),
        });
    }
    PointCloud::new(points)
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_xyz(cloud)).map_err(|e| Error::io(path, e))
}

/// Passes a cloud through the text format, as if written and read back.
pub fn quantize(cloud: &PointCloud) -> PointCloud {
    parse_xyz(&format_xyz(cloud), Path::new("<memory>")).expect("formatted cloud parses")
}

pub fn format_plane(plane: &SplitPlane) -> String {
    format!(
        "{} {} {} {}\n",
        format_number(plane.normal[0]),
        format_number(plane.normal[1]),
        format_number(plane.normal[2]),
        format_number(plane.offset)
    )
}

pub fn parse_plane(text: &str, origin: &Path) -> Result<SplitPlane> {
    let line = text.lines().next().unwrap_or("");
    let [nx, ny, nz, offset] = parse_fields::<4>(line, origin, 1)?;
    // the text format keeps 9 digits, so renormalize
    let n = (nx * nx + ny * ny + nz * nz).sqrt();
    if n == 0.0 {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 1,
            message: "zero plane normal".into(),
        });
    }
    SplitPlane::new([nx / n, ny / n, nz / n], offset)
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    out.push_str(&format_xyz(cloud));
    out
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_ply(cloud)).map_err(|e| Error::io(path, e))
}

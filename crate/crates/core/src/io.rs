//! ASCII PLY and PCD cloud files.
//!
//! Parsing is total: any byte sequence yields either a cloud or a
//! structured error with a line number. Binary variants are rejected
//! explicitly rather than misread.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::cloud::{Point3, PointCloud3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    PcdAscii,
}

impl CloudFormat {
    /// Format implied by a file extension, defaulting to PLY.
    pub fn from_path(path: &Path) -> CloudFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pcd") => CloudFormat::PcdAscii,
            _ => CloudFormat::PlyAscii,
        }
    }
}

/// Loads an ASCII PLY or PCD cloud, sniffing the format from the content.
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud3<f64>> {
    let bytes = fs::read(path.as_ref())?;
    parse_cloud(&bytes)
}

/// Parses cloud file content (see `load_cloud`).
pub fn parse_cloud(bytes: &[u8]) -> Result<PointCloud3<f64>> {
    let lines = split_lines(bytes)?;
    let first = lines
        .iter()
        .find(|(_, l)| !l.trim().is_empty())
        .map(|&(n, l)| (n, l.trim()));
    match first {
        Some((_, "ply")) => parse_ply(&lines),
        Some((_, l)) if l.starts_with('#') || l.starts_with("VERSION") => parse_pcd(&lines),
        Some((n, l)) => Err(Error::parse(
            n,
            format!("unrecognized cloud header: {:?}", truncate(l)),
        )),
        None => Err(Error::parse(1, "empty file")),
    }
}

/// Writes the cloud in the given ASCII format with full `f64` round-trip
/// precision and deterministic point order.
pub fn save_cloud(
    cloud: &PointCloud3<f64>,
    path: impl AsRef<Path>,
    format: CloudFormat,
) -> Result<()> {
    let mut out = Vec::with_capacity(64 + cloud.len() * 24);
    match format {
        CloudFormat::PlyAscii => {
            write!(
                out,
                "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
                cloud.len()
            )?;
            for p in cloud.iter() {
                writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
            }
        }
        CloudFormat::PcdAscii => {
            write!(
                out,
                "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z\nSIZE 8 8 8\nTYPE F F F\nCOUNT 1 1 1\nWIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA ascii\n",
                n = cloud.len()
            )?;
            for p in cloud.iter() {
                writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
            }
        }
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

fn truncate(l: &str) -> String {
    l.chars().take(32).collect()
}

/// Numbered UTF-8 lines; invalid UTF-8 is a parse error at its line.
fn split_lines(bytes: &[u8]) -> Result<Vec<(usize, &str)>> {
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        match std::str::from_utf8(raw) {
            Ok(s) => lines.push((i + 1, s)),
            Err(_) => return Err(Error::parse(i + 1, "invalid UTF-8 (binary content?)")),
        }
    }
    Ok(lines)
}

fn parse_coord(line_no: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(line_no, format!("non-numeric coordinate {:?}", truncate(field))))?;
    if !v.is_finite() {
        return Err(Error::parse(line_no, "non-finite coordinate"));
    }
    Ok(v)
}

struct PlyElement {
    name: String,
    count: usize,
    // column index per scalar property
    property_names: Vec<String>,
}

fn parse_ply(lines: &[(usize, &str)]) -> Result<PointCloud3<f64>> {
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut body_start = None;
    let mut format_seen = false;

    let mut iter = lines.iter().enumerate();
    iter.next(); // "ply" magic, already checked
    for (idx, &(line_no, line)) in iter {
        let line = line.trim();
        if line.is_empty() || line.starts_with("comment") || line.starts_with("obj_info") {
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                let kind = tok.next().unwrap_or("");
                if kind != "ascii" {
                    return Err(Error::UnsupportedFormat(format!(
                        "binary PLY ({kind}) is not supported; re-export as ascii"
                    )));
                }
                format_seen = true;
            }
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| Error::parse(line_no, "element without a name"))?;
                let count: usize = tok
                    .next()
                    .ok_or_else(|| Error::parse(line_no, "element without a count"))?
                    .parse()
                    .map_err(|_| Error::parse(line_no, "bad element count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    property_names: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(line_no, "property before any element"))?;
                let kind = tok
                    .next()
                    .ok_or_else(|| Error::parse(line_no, "property without a type"))?;
                if kind == "list" {
                    if element.name == "vertex" {
                        return Err(Error::UnsupportedFormat(
                            "list property on the vertex element".into(),
                        ));
                    }
                    // skip the index/count types and name of the list
                    element.property_names.push(String::new());
                    continue;
                }
                let name = tok
                    .next()
                    .ok_or_else(|| Error::parse(line_no, "property without a name"))?;
                element.property_names.push(name.to_string());
            }
            Some("end_header") => {
                body_start = Some(idx + 1);
                break;
            }
            Some(other) => {
                return Err(Error::parse(
                    line_no,
                    format!("unexpected header keyword {:?}", truncate(other)),
                ));
            }
            None => {}
        }
    }

    let body_start =
        body_start.ok_or_else(|| Error::parse(lines.len(), "missing end_header"))?;
    if !format_seen {
        return Err(Error::parse(1, "missing format declaration"));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse(1, "no vertex element in header"))?;

    let columns = xyz_columns(&elements[vertex_pos].property_names)
        .ok_or_else(|| Error::parse(1, "vertex element lacks x/y/z properties"))?;

    // skip data lines of elements declared before the vertices
    let mut cursor = body_start;
    let skip_nonempty = |cursor: &mut usize, mut remaining: usize| -> Result<()> {
        while remaining > 0 {
            let &(line_no, line) = lines.get(*cursor).ok_or_else(|| {
                Error::parse(lines.len(), "truncated body: element data missing")
            })?;
            *cursor += 1;
            if line.trim().is_empty() && *cursor >= lines.len() {
                return Err(Error::parse(line_no, "truncated body: element data missing"));
            }
            if !line.trim().is_empty() {
                remaining -= 1;
            }
        }
        Ok(())
    };
    for element in &elements[..vertex_pos] {
        skip_nonempty(&mut cursor, element.count)?;
    }

    let mut points = Vec::with_capacity(elements[vertex_pos].count.min(1 << 22));
    let mut remaining = elements[vertex_pos].count;
    while remaining > 0 {
        let &(line_no, line) = lines
            .get(cursor)
            .ok_or_else(|| Error::parse(lines.len(), "truncated body: vertex data missing"))?;
        cursor += 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let need = columns.iter().copied().max().unwrap() + 1;
        if fields.len() < need {
            return Err(Error::parse(
                line_no,
                format!("vertex line has {} fields, need {need}", fields.len()),
            ));
        }
        points.push(Point3::new(
            parse_coord(line_no, fields[columns[0]])?,
            parse_coord(line_no, fields[columns[1]])?,
            parse_coord(line_no, fields[columns[2]])?,
        ));
        remaining -= 1;
    }

    Ok(PointCloud3::new(points))
}

fn xyz_columns(names: &[String]) -> Option<[usize; 3]> {
    let find = |n: &str| names.iter().position(|p| p == n);
    Some([find("x")?, find("y")?, find("z")?])
}

fn parse_pcd(lines: &[(usize, &str)]) -> Result<PointCloud3<f64>> {
    let mut fields: Option<Vec<String>> = None;
    let mut counts: Option<Vec<usize>> = None;
    let mut points_declared: Option<usize> = None;
    let mut width: Option<usize> = None;
    let mut height: Option<usize> = None;
    let mut data_start = None;

    for (idx, &(line_no, line)) in lines.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let key = tok.next().unwrap_or("");
        let rest: Vec<&str> = tok.collect();
        match key {
            "VERSION" | "VIEWPOINT" | "SIZE" | "TYPE" => {}
            "FIELDS" => fields = Some(rest.iter().map(|s| s.to_string()).collect()),
            "COUNT" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    rest.iter().map(|s| s.parse()).collect();
                counts =
                    Some(parsed.map_err(|_| Error::parse(line_no, "bad COUNT values"))?);
            }
            "WIDTH" => {
                width = Some(parse_usize(line_no, rest.first())?);
            }
            "HEIGHT" => {
                height = Some(parse_usize(line_no, rest.first())?);
            }
            "POINTS" => {
                points_declared = Some(parse_usize(line_no, rest.first())?);
            }
            "DATA" => {
                let kind = rest.first().copied().unwrap_or("");
                if kind != "ascii" {
                    return Err(Error::UnsupportedFormat(format!(
                        "PCD DATA {kind} is not supported; re-export as ascii"
                    )));
                }
                data_start = Some(idx + 1);
                break;
            }
            other => {
                return Err(Error::parse(
                    line_no,
                    format!("unexpected PCD header key {:?}", truncate(other)),
                ));
            }
        }
    }

    let data_start = data_start.ok_or_else(|| Error::parse(lines.len(), "missing DATA line"))?;
    let fields = fields.ok_or_else(|| Error::parse(1, "missing FIELDS line"))?;
    let counts = counts.unwrap_or_else(|| vec![1; fields.len()]);
    if counts.len() != fields.len() {
        return Err(Error::parse(1, "COUNT and FIELDS lengths differ"));
    }
    let n = points_declared
        .or_else(|| Some(width? * height?))
        .ok_or_else(|| Error::parse(1, "missing POINTS (or WIDTH/HEIGHT)"))?;

    // column offset of each field, honoring multi-count fields
    let mut offsets = Vec::with_capacity(fields.len());
    let mut off = 0usize;
    for &c in &counts {
        offsets.push(off);
        off += c.max(1);
    }
    let col = |name: &str| -> Option<usize> {
        let i = fields.iter().position(|f| f == name)?;
        if counts[i] != 1 {
            return None;
        }
        Some(offsets[i])
    };
    let (cx, cy, cz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::parse(1, "FIELDS must contain scalar x y z")),
    };

    let mut points = Vec::with_capacity(n.min(1 << 22));
    let mut cursor = data_start;
    while points.len() < n {
        let &(line_no, line) = lines
            .get(cursor)
            .ok_or_else(|| Error::parse(lines.len(), "truncated body: point data missing"))?;
        cursor += 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let need = cx.max(cy).max(cz) + 1;
        if cols.len() < need {
            return Err(Error::parse(
                line_no,
                format!("point line has {} fields, need {need}", cols.len()),
            ));
        }
        points.push(Point3::new(
            parse_coord(line_no, cols[cx])?,
            parse_coord(line_no, cols[cy])?,
            parse_coord(line_no, cols[cz])?,
        ));
    }

    Ok(PointCloud3::new(points))
}

fn parse_usize(line_no: usize, field: Option<&&str>) -> Result<usize> {
    field
        .ok_or_else(|| Error::parse(line_no, "missing value"))?
        .parse()
        .map_err(|_| Error::parse(line_no, "bad unsigned integer"))
}

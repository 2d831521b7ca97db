//! Cloud files.
//!
//! ASCII layout, one point per line, whitespace separated:
//!
//! ```text
//! #cols C        (optional: number of feature columns)
//! #normals       (optional: three normal columns follow the features)
//! #labels        (optional: final integer label column)
//! x y z [f1 .. fC] [nx ny nz] [label]
//! ```
//!
//! Without `#cols`, the feature count is inferred from the first data row.
//! Other lines starting with `#` are comments. Files ending in `.ply` are
//! read with a small ASCII PLY reader instead.

use std::fmt::Write as _;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { line, msg: msg.into() })
}

fn parse_float(tok: &str, line: usize) -> Result<f64> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => parse_err(line, format!("non-finite value `{v}`")),
        Err(_) => parse_err(line, format!("`{tok}` is not a number")),
    }
}

fn parse_label(tok: &str, line: usize) -> Result<usize> {
    tok.parse::<usize>()
        .or_else(|_| parse_err(line, format!("`{tok}` is not a non-negative integer label")))
}

struct Columns {
    positions: Vec<f64>,
    features: Vec<f64>,
    normals: Vec<f64>,
    labels: Vec<usize>,
}

fn assemble(cols: Columns, fdim: usize, has_normals: bool, has_labels: bool) -> Result<PointCloud> {
    let n = cols.positions.len() / 3;
    if n == 0 {
        return Err(Error::Schema("file contains no points".into()));
    }
    let mut cloud = PointCloud::new(Tensor::from_parts(vec![n, 3], cols.positions))?;
    if fdim > 0 {
        cloud = cloud.with_features(Tensor::from_parts(vec![n, fdim], cols.features))?;
    }
    if has_normals {
        cloud = cloud.with_normals(Tensor::from_parts(vec![n, 3], cols.normals))?;
    }
    if has_labels {
        cloud = cloud.with_labels(cols.labels)?;
    }
    Ok(cloud)
}

/// Parses the ASCII cloud format.
pub fn parse_ascii(text: &str) -> Result<PointCloud> {
    let mut declared_cols: Option<usize> = None;
    let mut has_normals = false;
    let mut has_labels = false;
    let mut fdim: Option<usize> = None;
    let mut cols = Columns {
        positions: Vec::new(),
        features: Vec::new(),
        normals: Vec::new(),
        labels: Vec::new(),
    };
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('#') {
            let mut toks = h.split_whitespace();
            match toks.next() {
                Some("cols") => {
                    let c = toks
                        .next()
                        .ok_or_else(|| Error::Parse { line: line_no, msg: "#cols needs a count".into() })?;
                    declared_cols = Some(parse_label(c, line_no)?);
                }
                Some("normals") => has_normals = true,
                Some("labels") => has_labels = true,
                _ => {}
            }
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let extra = 3 * usize::from(has_normals) + usize::from(has_labels);
        let c = *fdim.get_or_insert_with(|| declared_cols.unwrap_or(toks.len().saturating_sub(3 + extra)));
        let want = 3 + c + extra;
        if toks.len() < want {
            return Err(Error::Schema(format!(
                "line {line_no}: expected {want} columns, found {}",
                toks.len()
            )));
        }
        if toks.len() > want {
            return parse_err(line_no, format!("expected {want} columns, found {}", toks.len()));
        }
        for t in &toks[..3] {
            cols.positions.push(parse_float(t, line_no)?);
        }
        for t in &toks[3..3 + c] {
            cols.features.push(parse_float(t, line_no)?);
        }
        let mut at = 3 + c;
        if has_normals {
            for t in &toks[at..at + 3] {
                cols.normals.push(parse_float(t, line_no)?);
            }
            at += 3;
        }
        if has_labels {
            cols.labels.push(parse_label(toks[at], line_no)?);
        }
    }
    assemble(cols, fdim.unwrap_or(0), has_normals, has_labels)
}

/// ASCII PLY subset: `format ascii 1.0`, one `vertex` element with float
/// `x y z`, optional `nx ny nz`, optional integer `label`; any other scalar
/// vertex properties become feature columns. Later elements are ignored.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return parse_err(1, "missing `ply` magic"),
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut header_end = None;
    for (ln, raw) in lines.by_ref() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["format", ..] => return parse_err(ln + 1, "only `format ascii 1.0` is supported"),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                vertex_count = Some(parse_label(n, ln + 1)?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => return parse_err(ln + 1, "list properties on vertices are unsupported"),
            ["property", "list", ..] => {}
            ["property", _ty, name] => {
                if in_vertex {
                    props.push((*name).to_string());
                }
            }
            ["end_header"] => {
                header_end = Some(ln + 1);
                break;
            }
            _ => return parse_err(ln + 1, format!("unrecognized header line `{raw}`")),
        }
    }
    let Some(header_end) = header_end else {
        return parse_err(text.lines().count(), "missing end_header");
    };
    let n = vertex_count.ok_or_else(|| Error::Schema("no vertex element".into()))?;
    let find = |name: &str| props.iter().position(|p| p == name);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        return Err(Error::Schema("vertex element needs x, y and z".into()));
    };
    let normal_idx = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let label_idx = find("label");
    let reserved: Vec<usize> = [Some(ix), Some(iy), Some(iz), label_idx]
        .into_iter()
        .flatten()
        .chain(normal_idx.into_iter().flatten())
        .collect();
    let feature_idx: Vec<usize> = (0..props.len()).filter(|i| !reserved.contains(i)).collect();
    let mut cols = Columns {
        positions: Vec::with_capacity(n * 3),
        features: Vec::new(),
        normals: Vec::new(),
        labels: Vec::new(),
    };
    let mut seen = 0;
    for (ln, raw) in lines {
        if seen == n {
            break;
        }
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != props.len() {
            return Err(Error::Schema(format!(
                "line {}: expected {} vertex values, found {}",
                ln + 1,
                props.len(),
                toks.len()
            )));
        }
        for i in [ix, iy, iz] {
            cols.positions.push(parse_float(toks[i], ln + 1)?);
        }
        for &i in &feature_idx {
            cols.features.push(parse_float(toks[i], ln + 1)?);
        }
        if let Some(ni) = normal_idx {
            for i in ni {
                cols.normals.push(parse_float(toks[i], ln + 1)?);
            }
        }
        if let Some(li) = label_idx {
            cols.labels.push(parse_label(toks[li], ln + 1)?);
        }
        seen += 1;
    }
    if seen != n {
        return parse_err(header_end + seen, format!("expected {n} vertices, found {seen}"));
    }
    assemble(cols, feature_idx.len(), normal_idx.is_some(), label_idx.is_some())
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let is_ply = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        parse_ply(&text)
    } else {
        parse_ascii(&text)
    }
}

/// Serializes to the ASCII format. Values use shortest round-trip formatting,
/// so reading back yields bit-identical arrays.
pub fn write_cloud_string(cloud: &PointCloud) -> String {
    let fdim = cloud.feature_dim();
    let mut s = format!("#cols {fdim}\n");
    if cloud.normals().is_some() {
        s.push_str("#normals\n");
    }
    if cloud.labels().is_some() {
        s.push_str("#labels\n");
    }
    for i in 0..cloud.len() {
        let mut vals: Vec<f64> = cloud.point(i).to_vec();
        if let Some(f) = cloud.features() {
            vals.extend_from_slice(f.row(i));
        }
        if let Some(nm) = cloud.normals() {
            vals.extend_from_slice(nm.row(i));
        }
        let mut first = true;
        for v in vals {
            if !first {
                s.push(' ');
            }
            first = false;
            let _ = write!(s, "{v:?}");
        }
        if let Some(l) = cloud.labels() {
            let _ = write!(s, " {}", l[i]);
        }
        s.push('\n');
    }
    s
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_cloud_string(cloud))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_three_columns() {
        let c = parse_ascii("0 0 0\n").unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.features().is_none());
    }

    #[test]
    fn nan_is_a_parse_error() {
        let e = parse_ascii("0 0 0\n1 NaN 0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn missing_columns_is_schema_error() {
        let e = parse_ascii("#cols 2\n0 0 0 1\n").unwrap_err();
        assert!(matches!(e, Error::Schema(_)), "{e}");
    }

    #[test]
    fn garbage_reports_line() {
        let e = parse_ascii("# hello\n0 0 0\n1 x 2\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
    }

    #[test]
    fn headers_and_attributes() {
        let c = parse_ascii("#cols 1\n#normals\n#labels\n0 0 0 5 0 0 1 2\n1 1 1 6 1 0 0 0\n").unwrap();
        assert_eq!(c.feature_dim(), 1);
        assert_eq!(c.labels().unwrap(), &[2, 0]);
        assert_eq!(c.normals().unwrap().row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn ply_subset() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar label\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n0 0 0 1\n1 2 3 4\n";
        let c = parse_ply(text).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.point(1), [1.0, 2.0, 3.0]);
        assert_eq!(c.labels().unwrap(), &[1, 4]);
    }

    #[test]
    fn ply_rejects_binary() {
        let text = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(parse_ply(text).is_err());
    }

    #[test]
    fn ply_short_body() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(matches!(parse_ply(text), Err(Error::Parse { .. })));
    }
}

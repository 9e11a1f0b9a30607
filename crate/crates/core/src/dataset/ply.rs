//! ASCII PLY point clouds with an optional per-vertex mating flag.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::PointCloud;

/// Renders a cloud as ASCII PLY. Coordinates use the shortest decimal form
/// that parses back to the same bits.
pub fn to_ply_string(cloud: &PointCloud<f64>) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "comment part {}", cloud.part_id);
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.mating_mask.is_some() {
        s.push_str("property uchar mating\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
        if let Some(m) = &cloud.mating_mask {
            let _ = write!(s, " {}", u8::from(m[i]));
        }
        s.push('\n');
    }
    s
}

pub fn write_ply(path: &Path, cloud: &PointCloud<f64>) -> Result<()> {
    std::fs::write(path, to_ply_string(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<PointCloud<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

#[derive(Clone, Copy, PartialEq)]
enum Prop {
    X,
    Y,
    Z,
    Mating,
    Other,
}

/// Parses the subset of ASCII PLY written by [`to_ply_string`]: one vertex
/// element with `x y z` and an optional integer `mating` property. Extra
/// vertex properties are skipped.
pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud<f64>> {
    let err = |line: usize, offset: usize, msg: String| Error::Parse {
        kind: "PLY",
        path: path.to_path_buf(),
        location: format!("line {line}, byte offset {offset}"),
        msg,
    };
    let mut offset = 0usize;
    let mut lines = text.split_inclusive('\n').enumerate().map(|(i, l)| {
        let start = offset;
        offset += l.len();
        (i + 1, start, l.trim_end_matches(['\n', '\r']))
    });
    let mut next = |what: &str| lines.next().ok_or_else(|| (what.to_string(), text.len()));
    let (ln, off, magic) = next("magic").map_err(|(w, o)| err(1, o, format!("missing {w}")))?;
    if magic != "ply" {
        return Err(err(ln, off, "missing `ply` magic".into()));
    }
    let mut part_id = 0usize;
    let mut count: Option<usize> = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    let mut last = (1, 0);
    loop {
        let (ln, off, line) = next("end_header").map_err(|(w, o)| err(last.0 + 1, o, format!("truncated header, expected {w}")))?;
        last = (ln, off);
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["format", f, ..] => return Err(err(ln, off, format!("unsupported format `{f}`"))),
            ["comment", "part", id] => {
                part_id = id.parse().map_err(|_| err(ln, off, format!("bad part id `{id}`")))?;
            }
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse().map_err(|_| err(ln, off, format!("bad vertex count `{n}`")))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] if in_vertex => {
                let p = match *name {
                    "x" => Prop::X,
                    "y" => Prop::Y,
                    "z" => Prop::Z,
                    "mating" => Prop::Mating,
                    _ => Prop::Other,
                };
                let numeric = ["float", "double", "float32", "float64", "uchar", "uint8", "int", "char", "short", "ushort", "uint"];
                if !numeric.contains(ty) {
                    return Err(err(ln, off, format!("unsupported property type `{ty}`")));
                }
                props.push(p);
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(err(ln, off, format!("unexpected header line `{line}`"))),
        }
    }
    let n = count.ok_or_else(|| err(last.0, last.1, "no vertex element".into()))?;
    let col = |p: Prop| props.iter().position(|q| *q == p);
    let (Some(cx), Some(cy), Some(cz)) = (col(Prop::X), col(Prop::Y), col(Prop::Z)) else {
        return Err(err(last.0, last.1, "vertex element lacks x, y or z".into()));
    };
    let cm = col(Prop::Mating);
    let mut points = Vec::with_capacity(n);
    let mut mask = cm.map(|_| Vec::with_capacity(n));
    for k in 0..n {
        let (ln, off, line) = next("vertex")
            .map_err(|(_, o)| err(last.0 + 1, o, format!("truncated body: {k} of {n} vertices")))?;
        last = (ln, off);
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.len() != props.len() {
            return Err(err(ln, off, format!("expected {} values, found {}", props.len(), words.len())));
        }
        let num = |c: usize| -> Result<f64> {
            words[c]
                .parse::<f64>()
                .map_err(|_| err(ln, off, format!("bad number `{}`", words[c])))
        };
        points.push([num(cx)?, num(cy)?, num(cz)?]);
        if let (Some(m), Some(c)) = (mask.as_mut(), cm) {
            match words[c] {
                "0" => m.push(false),
                "1" => m.push(true),
                w => return Err(err(ln, off, format!("mating flag must be 0 or 1, found `{w}`"))),
            }
        }
    }
    if let Some((ln, off, line)) = lines.find(|(_, _, l)| !l.trim().is_empty()) {
        return Err(err(ln, off, format!("trailing data `{line}`")));
    }
    let cloud = PointCloud::new(points, part_id);
    Ok(match mask {
        Some(m) => cloud.with_mask(m),
        None => cloud,
    })
}

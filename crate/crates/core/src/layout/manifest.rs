//! Line-oriented `.wfl` layout manifests.
//!
//! ```text
//! classes=3 attrs=rooms,day width=0.125
//! polyline class=0 extrude=wall 0,0 4,0 4,4 0,4 0,0
//! polyline class=1 extrude=none 0,0,0.5 1,1,0.5
//! box class=1 0.5,0.5,0 1.2,1.0,0.8
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use super::{Extrude, LayoutBox, Polyline, VectorLayout};
use crate::error::{Error, Result};
use crate::volume::Vec3;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayoutManifest {
    pub layout: VectorLayout,
    /// Active attribute tag names.
    pub attrs: Vec<String>,
    /// Polyline width in meters, when the author fixed one.
    pub line_width: Option<f32>,
}

fn perr(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_point(tok: &str, line: usize, dims: &[usize]) -> Result<Vec3> {
    let vals = tok
        .split(',')
        .map(|v| {
            v.parse::<f32>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(line, format!("bad coordinate {v:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if !dims.contains(&vals.len()) {
        return Err(perr(line, format!("point {tok:?} has {} coordinates", vals.len())));
    }
    Ok([vals[0], vals[1], vals.get(2).copied().unwrap_or(0.0)])
}

fn key_value<'a>(tok: Option<&'a str>, key: &str, line: usize) -> Result<&'a str> {
    tok.and_then(|t| t.strip_prefix(key)?.strip_prefix('='))
        .ok_or_else(|| perr(line, format!("expected {key}=...")))
}

pub fn parse_manifest(text: &str) -> Result<LayoutManifest> {
    let mut header: Option<(usize, Vec<String>, Option<f32>)> = None;
    let mut layout = VectorLayout::default();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        if header.is_none() {
            let k = key_value(toks.next(), "classes", ln)?
                .parse::<usize>()
                .map_err(|_| perr(ln, "classes must be a non-negative integer"))?;
            let mut attrs = Vec::new();
            let mut width = None;
            for t in toks {
                if let Ok(v) = key_value(Some(t), "attrs", ln) {
                    attrs = v.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
                } else if let Ok(v) = key_value(Some(t), "width", ln) {
                    let w = v
                        .parse::<f32>()
                        .ok()
                        .filter(|w| w.is_finite() && *w > 0.0)
                        .ok_or_else(|| perr(ln, "width must be a positive number"))?;
                    width = Some(w);
                } else {
                    return Err(perr(ln, format!("unexpected header token {t:?}")));
                }
            }
            header = Some((k, attrs, width));
            continue;
        }
        let kind = toks.next().unwrap_or_default();
        let class = key_value(toks.next(), "class", ln)?
            .parse::<usize>()
            .map_err(|_| perr(ln, "class must be a non-negative integer"))?;
        match kind {
            "polyline" => {
                let extrude = match key_value(toks.next(), "extrude", ln)? {
                    "wall" => Extrude::Wall,
                    "ground" => Extrude::Ground,
                    "none" => Extrude::None,
                    other => return Err(perr(ln, format!("unknown extrusion {other:?}"))),
                };
                let dims: &[usize] = if extrude == Extrude::None { &[3] } else { &[2, 3] };
                let points = toks
                    .map(|t| parse_point(t, ln, dims))
                    .collect::<Result<Vec<_>>>()?;
                if points.len() < 2 {
                    return Err(perr(ln, "polyline needs at least 2 points"));
                }
                layout.polylines.push(Polyline { points, class, extrude });
            }
            "box" => {
                let min = parse_point(toks.next().unwrap_or_default(), ln, &[3])?;
                let max = parse_point(toks.next().unwrap_or_default(), ln, &[3])?;
                if toks.next().is_some() {
                    return Err(perr(ln, "box takes exactly two corners"));
                }
                if (0..3).any(|a| !(min[a] < max[a])) {
                    return Err(perr(ln, "box min must be below max"));
                }
                layout.boxes.push(LayoutBox { min, max, class });
            }
            other => return Err(perr(ln, format!("unknown record {other:?}"))),
        }
    }
    let (classes, attrs, line_width) = header.ok_or_else(|| perr(1, "missing classes= header"))?;
    layout.classes = classes;
    layout.validate()?;
    Ok(LayoutManifest {
        layout,
        attrs,
        line_width,
    })
}

impl LayoutManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("classes={} attrs={}", self.layout.classes, self.attrs.join(","));
        if let Some(w) = self.line_width {
            write!(s, " width={w}").unwrap();
        }
        s.push('\n');
        for p in &self.layout.polylines {
            write!(s, "polyline class={} extrude={}", p.class, p.extrude.keyword()).unwrap();
            for v in &p.points {
                match p.extrude {
                    Extrude::None => write!(s, " {},{},{}", v[0], v[1], v[2]).unwrap(),
                    _ => write!(s, " {},{}", v[0], v[1]).unwrap(),
                }
            }
            s.push('\n');
        }
        for b in &self.layout.boxes {
            writeln!(
                s,
                "box class={} {},{},{} {},{},{}",
                b.class, b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
            )
            .unwrap();
        }
        s
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<LayoutManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &LayoutManifest) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

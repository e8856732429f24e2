//! Plain-text clouds: one `x y z [label]` line per point, `#` comments.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut label: Option<(usize, usize)> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let tokens: Vec<&str> = raw
            .split('#')
            .next()
            .unwrap_or("")
            .split_whitespace()
            .collect();
        if tokens.is_empty() {
            continue;
        }
        if !(3..=4).contains(&tokens.len()) {
            return Err(Error::Parse {
                line,
                msg: format!("expected `x y z [label]`, got {} fields", tokens.len()),
            });
        }
        let mut p = [0.0; 3];
        for (d, t) in tokens[..3].iter().enumerate() {
            p[d] = match t.parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("invalid coordinate `{t}`"),
                    })
                }
            };
        }
        if let Some(t) = tokens.get(3) {
            let l: usize = t.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid label `{t}`"),
            })?;
            match label {
                Some((prev, first)) if prev != l => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("label {l} differs from label {prev} on line {first}"),
                    })
                }
                None if !points.is_empty() => {
                    return Err(Error::Parse {
                        line,
                        msg: "label given for some points only".into(),
                    })
                }
                None => label = Some((l, line)),
                _ => {}
            }
        } else if label.is_some() {
            return Err(Error::Parse {
                line,
                msg: "label given for some points only".into(),
            });
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            msg: "no points".into(),
        });
    }
    PointCloud::new(points, label.map(|l| l.0))
}

/// Seventeen significant digits, which round-trips every `f64`.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 72);
    for p in &cloud.points {
        out.push_str(&format!("{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]));
        if let Some(l) = cloud.label {
            out.push_str(&format!(" {l}"));
        }
        out.push('\n');
    }
    out
}

pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text)
}

pub fn save_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_xyz(cloud)).map_err(|e| Error::io(path, e))
}

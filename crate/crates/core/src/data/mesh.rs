//! Triangle meshes: the OFF reader and area-weighted surface sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(f) = faces
            .iter()
            .find(|f| f.iter().any(|&i| i >= vertices.len()))
        {
            return Err(Error::InvalidInput(format!(
                "face {f:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        Ok(Self { vertices, faces })
    }

    pub fn triangle(&self, f: usize) -> [Point3; 3] {
        self.faces[f].map(|i| self.vertices[i])
    }

    pub fn area(&self, f: usize) -> f64 {
        triangle_area(&self.triangle(f))
    }
}

pub fn triangle_area(t: &[Point3; 3]) -> f64 {
    let u = [t[1][0] - t[0][0], t[1][1] - t[0][1], t[1][2] - t[0][2]];
    let v = [t[2][0] - t[0][0], t[2][1] - t[0][1], t[2][2] - t[0][2]];
    let c = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

/// Non-empty, `#`-stripped lines with their 1-based line numbers.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_tokens(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        for (i, raw) in self.inner.by_ref() {
            self.last = i + 1;
            let body = raw.split('#').next().unwrap_or("");
            let tokens: Vec<&str> = body.split_whitespace().collect();
            if !tokens.is_empty() {
                return Ok((i + 1, tokens));
            }
        }
        Err(Error::Parse {
            line: self.last + 1,
            msg: format!("unexpected end of file, expected {what}"),
        })
    }
}

fn count(line: usize, token: &str, what: &str) -> Result<usize> {
    token.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what} `{token}`"),
    })
}

/// Parses an OFF mesh. The `OFF` keyword is optional and may be fused with
/// the counts (`OFF490 518 0`); faces with more than three vertices are
/// fanned from their first vertex.
pub fn parse_off(text: &str) -> Result<Mesh> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (mut line, mut tokens) = lines.next_tokens("OFF header")?;
    if let Some(rest) = tokens[0].strip_prefix("OFF") {
        match (rest.is_empty(), tokens.len()) {
            (true, 1) => (line, tokens) = lines.next_tokens("counts line")?,
            (true, _) => {
                tokens.remove(0);
            }
            (false, _) => tokens[0] = rest,
        };
    }
    if tokens.len() != 3 {
        return Err(Error::Parse {
            line,
            msg: format!("counts line needs `V F E`, got {} values", tokens.len()),
        });
    }
    let nv = count(line, tokens[0], "vertex count")?;
    let nf = count(line, tokens[1], "face count")?;
    count(line, tokens[2], "edge count")?;

    let mut vertices = Vec::with_capacity(nv.min(1 << 16));
    for _ in 0..nv {
        let (line, tokens) = lines.next_tokens("vertex line")?;
        if tokens.len() < 3 {
            return Err(Error::Parse {
                line,
                msg: format!("vertex needs 3 coordinates, got {}", tokens.len()),
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
        vertices.push(p);
    }

    let mut faces = Vec::with_capacity(nf.min(1 << 16));
    for _ in 0..nf {
        let (line, tokens) = lines.next_tokens("face line")?;
        let n = count(line, tokens[0], "face vertex count")?;
        if n < 3 {
            return Err(Error::Parse {
                line,
                msg: format!("face with {n} vertices"),
            });
        }
        if tokens.len() <= n {
            return Err(Error::Parse {
                line,
                msg: format!("face declares {n} vertices but lists {}", tokens.len() - 1),
            });
        }
        let mut idx = Vec::with_capacity(n);
        for t in &tokens[1..=n] {
            let i = count(line, t, "vertex index")?;
            if i >= nv {
                return Err(Error::Parse {
                    line,
                    msg: format!("vertex index {i} out of range for {nv} vertices"),
                });
            }
            idx.push(i);
        }
        faces.extend((1..n - 1).map(|j| [idx[0], idx[j], idx[j + 1]]));
    }
    Ok(Mesh { vertices, faces })
}

/// [`parse_off`] on raw bytes; invalid UTF-8 is a parse error.
pub fn parse_off_bytes(bytes: &[u8]) -> Result<Mesh> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_off(text),
        Err(e) => {
            let line = 1 + bytes[..e.valid_up_to()]
                .iter()
                .filter(|&&b| b == b'\n')
                .count();
            Err(Error::Parse {
                line,
                msg: "invalid UTF-8".into(),
            })
        }
    }
}

/// `n` points drawn uniformly over the surface: a triangle with probability
/// proportional to its area, then a reflected barycentric sample inside it.
pub fn sample_mesh_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_surface_with(mesh, n, &mut rng)
}

pub fn sample_surface_with(mesh: &Mesh, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.area(f);
        cumulative.push(total);
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::InvalidInput(
            "mesh has no triangle with positive finite area".into(),
        ));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.gen::<f64>() * total;
        // First triangle whose cumulative area exceeds r; zero-area
        // triangles never do.
        let f = cumulative
            .partition_point(|&c| c <= r)
            .min(mesh.faces.len() - 1);
        let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
        if u + v > 1.0 {
            (u, v) = (1.0 - u, 1.0 - v);
        }
        let [a, b, c] = mesh.triangle(f);
        points.push([0, 1, 2].map(|d| a[d] + u * (b[d] - a[d]) + v * (c[d] - a[d])));
    }
    PointCloud::new(points, None)
}

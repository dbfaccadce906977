//! Barycentric resampling between spherical triangle meshes.

use std::collections::HashMap;

use super::{cross, dot, norm, sub, GeometryError, IcoMesh, Result, Vec3};

/// Channel values attached to points on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereSamples {
    pub positions: Vec<Vec3>,
    /// `positions.len() * channels` values, point-major.
    pub values: Vec<f64>,
    pub channels: usize,
    pub source_faces: Option<Vec<[u32; 3]>>,
}

impl SphereSamples {
    pub fn new(
        positions: Vec<Vec3>,
        values: Vec<f64>,
        channels: usize,
        source_faces: Option<Vec<[u32; 3]>>,
    ) -> Result<Self> {
        if channels == 0 || values.len() != positions.len() * channels {
            return Err(GeometryError::CountMismatch {
                what: "sample values",
                expected: positions.len() * channels.max(1),
                got: values.len(),
            });
        }
        if let Some(i) = positions.iter().position(|p| (norm(*p) - 1.0).abs() > 1e-9) {
            return Err(GeometryError::Invalid(format!(
                "position {i} is not unit length"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::Invalid("non-finite sample value".into()));
        }
        if let Some(faces) = &source_faces {
            let n = positions.len() as u32;
            if faces.iter().flatten().any(|&i| i >= n) {
                return Err(GeometryError::Invalid("face index out of range".into()));
            }
        }
        Ok(SphereSamples {
            positions,
            values,
            channels,
            source_faces,
        })
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }
}

const INSIDE_TOL: f64 = 1e-10;

/// Planar barycentric weights of the point where the ray from the origin
/// along `d` meets the plane of `(a, b, c)`, or `None` when the ray meets
/// the plane behind the origin or runs parallel to it.
pub(crate) fn ray_barycentric(d: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<[f64; 3]> {
    let s = [
        dot(d, cross(b, c)),
        dot(d, cross(c, a)),
        dot(d, cross(a, b)),
    ];
    let total = s[0] + s[1] + s[2];
    let det = dot(a, cross(b, c));
    if total == 0.0 || det == 0.0 || (total > 0.0) != (det > 0.0) {
        return None;
    }
    Some([s[0] / total, s[1] / total, s[2] / total])
}

struct Locator {
    cells: HashMap<[i32; 3], Vec<u32>>,
    res: f64,
}

impl Locator {
    fn cell(&self, p: Vec3) -> [i32; 3] {
        p.map(|x| ((x + 1.0) * self.res).floor() as i32)
    }

    fn build(pos: &[Vec3], faces: &[[u32; 3]]) -> Self {
        let res = ((faces.len() as f64 / 2.0).sqrt().max(4.0) / 2.0).ceil();
        let mut loc = Locator {
            cells: HashMap::new(),
            res,
        };
        for (fi, f) in faces.iter().enumerate() {
            let [a, b, c] = f.map(|i| pos[i as usize]);
            let n = cross(sub(b, a), sub(c, a));
            let nn = norm(n);
            // the spherical cap over the face bulges out by at most 1 - plane offset
            let margin = if nn > 0.0 {
                (1.0 - (dot(n, a) / nn).abs()).max(0.0)
            } else {
                0.0
            } + 1e-9;
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for v in [a, b, c] {
                for k in 0..3 {
                    lo[k] = lo[k].min(v[k] - margin);
                    hi[k] = hi[k].max(v[k] + margin);
                }
            }
            let (l, h) = (loc.cell(lo), loc.cell(hi));
            for x in l[0]..=h[0] {
                for y in l[1]..=h[1] {
                    for z in l[2]..=h[2] {
                        loc.cells.entry([x, y, z]).or_default().push(fi as u32);
                    }
                }
            }
        }
        loc
    }
}

fn inside(w: &[f64; 3]) -> bool {
    w.iter().all(|&x| x >= -INSIDE_TOL)
}

/// Clamp tolerated negatives, renormalize, and snap near-vertex hits.
fn clean(mut w: [f64; 3]) -> [f64; 3] {
    for x in &mut w {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s = w[0] + w[1] + w[2];
    for x in &mut w {
        *x /= s;
    }
    if let Some(k) = (0..3).find(|&k| w[k] >= 1.0 - 1e-12) {
        w = [0.0; 3];
        w[k] = 1.0;
    }
    w
}

/// Interpolate `source` at every vertex of `target`. The containing
/// triangle is the lowest-indexed source face whose planar barycentric
/// coordinates are all at least `-1e-10`.
pub fn barycentric_resample(source: &SphereSamples, target: &IcoMesh) -> Result<SphereSamples> {
    let faces = source
        .source_faces
        .as_deref()
        .ok_or_else(|| GeometryError::Invalid("source samples carry no faces".into()))?;
    let pos = &source.positions;
    let loc = Locator::build(pos, faces);
    let ch = source.channels;
    let mut values = Vec::with_capacity(target.vertices.len() * ch);
    let weights_in = |fi: u32, d: Vec3| {
        let [a, b, c] = faces[fi as usize].map(|i| pos[i as usize]);
        ray_barycentric(d, a, b, c).filter(inside)
    };
    for (vi, &d) in target.vertices.iter().enumerate() {
        if (norm(d) - 1.0).abs() > 1e-9 {
            return Err(GeometryError::Invalid(format!(
                "target vertex {vi} is not unit length"
            )));
        }
        let hit = loc
            .cells
            .get(&loc.cell(d))
            .and_then(|cand| {
                cand.iter()
                    .find_map(|&fi| weights_in(fi, d).map(|w| (fi, w)))
            })
            .or_else(|| (0..faces.len() as u32).find_map(|fi| weights_in(fi, d).map(|w| (fi, w))));
        let (fi, w) = hit.ok_or(GeometryError::NoContainingFace { vertex: vi })?;
        let w = clean(w);
        let f = faces[fi as usize];
        for c in 0..ch {
            let mut acc = 0.0;
            for k in 0..3 {
                if w[k] != 0.0 {
                    acc += w[k] * source.values[f[k] as usize * ch + c];
                }
            }
            values.push(acc);
        }
    }
    Ok(SphereSamples {
        positions: target.vertices.clone(),
        values,
        channels: ch,
        source_faces: Some(target.faces.clone()),
    })
}

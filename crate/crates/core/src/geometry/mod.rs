//! Icospheres, triangular surface patches and spherical resampling.

mod io;
mod patches;
mod resample;

use std::collections::HashMap;

use thiserror::Error;

pub use io::{MeshFile, PatchFile};
pub use patches::{
    extract_patches, patch_tensorize, side_len, vertices_per_patch, PatchSet, BASE_ORDER,
};
pub use resample::{barycentric_resample, SphereSamples};

pub type Vec3 = [f64; 3];

pub const MAX_ORDER: usize = 8;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("icosphere order {0} outside 0..=8")]
    OrderOutOfRange(usize),
    #[error("patch order {0} outside 1..=5")]
    PatchOrderOutOfRange(usize),
    #[error("subdivision lineage mismatch: {0}")]
    Lineage(String),
    #[error("target vertex {vertex} lies in no source face")]
    NoContainingFace { vertex: usize },
    #[error("{what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// A subdivided icosahedron on the unit sphere.
///
/// Vertex indices are stable under subdivision: the vertices of order `k`
/// are the first `10 * 4^k + 2` vertices of every finer mesh grown from the
/// same seed.
#[derive(Debug, Clone, PartialEq)]
pub struct IcoMesh {
    pub order: usize,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Child vertex of each subdivided edge, keyed by the sorted endpoint pair.
    pub edge_midpoint_map: HashMap<(u32, u32), u32>,
    /// Face lists of every coarser order, `levels[k]` for `k < order`.
    pub levels: Vec<Vec<[u32; 3]>>,
}

pub fn vertex_count(order: usize) -> usize {
    10 * 4usize.pow(order as u32) + 2
}

pub fn face_count(order: usize) -> usize {
    20 * 4usize.pow(order as u32)
}

pub fn edge_count(order: usize) -> usize {
    30 * 4usize.pow(order as u32)
}

pub(crate) fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn normalize(v: Vec3) -> Vec3 {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn edge_key(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// The order-0 icosahedron: vertices `(0, ±1, ±φ)` and cyclic
/// permutations, normalized; faces wound counter-clockwise from outside.
pub fn icosahedron() -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let raw: [Vec3; 12] = [
        [-1.0, p, 0.0],
        [1.0, p, 0.0],
        [-1.0, -p, 0.0],
        [1.0, -p, 0.0],
        [0.0, -1.0, p],
        [0.0, 1.0, p],
        [0.0, -1.0, -p],
        [0.0, 1.0, -p],
        [p, 0.0, -1.0],
        [p, 0.0, 1.0],
        [-p, 0.0, -1.0],
        [-p, 0.0, 1.0],
    ];
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (raw.iter().map(|&v| normalize(v)).collect(), faces)
}

/// Subdivide the icosahedron `order` times. Each step inserts one vertex
/// per edge at the chord midpoint, splits every face into four, and
/// projects the new vertices onto the sphere.
pub fn make_icosphere(order: usize) -> Result<IcoMesh> {
    if order > MAX_ORDER {
        return Err(GeometryError::OrderOutOfRange(order));
    }
    let (mut vertices, mut faces) = icosahedron();
    vertices.reserve(vertex_count(order) - vertices.len());
    let mut edge_midpoint_map = HashMap::new();
    let mut levels = Vec::with_capacity(order);
    for _ in 0..order {
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let mut mid = |i: u32, j: u32| -> u32 {
                *edge_midpoint_map.entry(edge_key(i, j)).or_insert_with(|| {
                    let (vi, vj) = (vertices[i as usize], vertices[j as usize]);
                    vertices.push(normalize([vi[0] + vj[0], vi[1] + vj[1], vi[2] + vj[2]]));
                    (vertices.len() - 1) as u32
                })
            };
            let ab = mid(a, b);
            let bc = mid(b, c);
            let ca = mid(c, a);
            next.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        }
        levels.push(std::mem::replace(&mut faces, next));
    }
    Ok(IcoMesh {
        order,
        vertices,
        faces,
        edge_midpoint_map,
        levels,
    })
}

impl IcoMesh {
    /// Faces of order `k <= self.order`.
    pub fn faces_at(&self, k: usize) -> Option<&[[u32; 3]]> {
        match k.cmp(&self.order) {
            std::cmp::Ordering::Equal => Some(&self.faces),
            std::cmp::Ordering::Less => self.levels.get(k).map(|f| f.as_slice()),
            std::cmp::Ordering::Greater => None,
        }
    }

    /// True when the subdivision history needed for patch extraction is present.
    pub fn has_lineage(&self) -> bool {
        self.levels.len() == self.order
            && self.edge_midpoint_map.len() == (0..self.order).map(edge_count).sum::<usize>()
    }

    /// Undirected edges, each once, as sorted pairs.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut e: Vec<_> = self
            .faces
            .iter()
            .flat_map(|&[a, b, c]| [edge_key(a, b), edge_key(b, c), edge_key(c, a)])
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Number of faces around each vertex.
    pub fn vertex_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.vertices.len()];
        for f in &self.faces {
            for &v in f {
                d[v as usize] += 1;
            }
        }
        d
    }
}

//! Triangular patches: the Ico-6 vertices covered by each face of a coarser
//! icosphere.

use std::collections::HashMap;

use super::{edge_key, face_count, icosahedron, GeometryError, IcoMesh, Result};
use crate::tensor::Tensor;

pub const BASE_ORDER: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSet {
    pub patch_order: usize,
    pub base_order: usize,
    pub num_patches: usize,
    pub vertices_per_patch: usize,
    /// `num_patches` lists of `vertices_per_patch` base-mesh indices.
    pub patch_vertex_indices: Vec<Vec<u32>>,
}

/// Vertices along one side of a patch at the given order.
pub fn side_len(patch_order: usize) -> usize {
    1 << (BASE_ORDER - patch_order)
}

pub fn vertices_per_patch(patch_order: usize) -> usize {
    let m = side_len(patch_order);
    (m + 1) * (m + 2) / 2
}

/// Row-major offset of the lattice point with barycentric weights
/// `(m - r, k, r - k)` on corners `(a, b, c)`.
fn lattice_index(r: usize, k: usize) -> usize {
    r * (r + 1) / 2 + k
}

/// Refine a patch lattice of side `m` to side `2m` by looking up the
/// midpoint of every lattice edge.
fn refine(coarse: &[u32], m: usize, mids: &HashMap<(u32, u32), u32>) -> Result<Vec<u32>> {
    let n = 2 * m;
    let mut fine = vec![0u32; (n + 1) * (n + 2) / 2];
    for r in 0..=n {
        for k in 0..=r {
            let w = [n - r, k, r - k];
            let odd: Vec<usize> = (0..3).filter(|&i| w[i] % 2 == 1).collect();
            let id = if odd.is_empty() {
                coarse[lattice_index(r / 2, k / 2)]
            } else {
                let (i, j) = (odd[0], odd[1]);
                let mut p = w;
                let mut q = w;
                p[i] += 1;
                p[j] -= 1;
                q[i] -= 1;
                q[j] += 1;
                let at = |w: [usize; 3]| {
                    let (rr, kk) = ((n - w[0]) / 2, w[1] / 2);
                    coarse[lattice_index(rr, kk)]
                };
                let (u, v) = (at(p), at(q));
                *mids.get(&edge_key(u, v)).ok_or_else(|| {
                    GeometryError::Lineage(format!("edge ({u}, {v}) was never subdivided"))
                })?
            };
            fine[lattice_index(r, k)] = id;
        }
    }
    Ok(fine)
}

/// Split the order-6 base mesh into the `20 * 4^p` faces of its order-`p`
/// ancestor. Patch `n` lists the base vertices on or inside face `n` of
/// Ico-p: row `r` runs from the edge opposite corner `b` toward corner `b`,
/// starting at corner `a` in row 0 and ending with the `c`..`b` edge.
pub fn extract_patches(base: &IcoMesh, patch_order: usize) -> Result<PatchSet> {
    if !(1..=5).contains(&patch_order) {
        return Err(GeometryError::PatchOrderOutOfRange(patch_order));
    }
    if base.order != BASE_ORDER {
        return Err(GeometryError::Lineage(format!(
            "base mesh has order {}, expected {}",
            base.order, BASE_ORDER
        )));
    }
    let (seed, _) = icosahedron();
    if base.vertices[..12] != seed[..] || !base.has_lineage() {
        return Err(GeometryError::Lineage(
            "base mesh was not grown from the canonical icosahedron".into(),
        ));
    }
    let faces = base
        .faces_at(patch_order)
        .ok_or_else(|| GeometryError::Lineage("missing coarse level".into()))?;
    debug_assert_eq!(faces.len(), face_count(patch_order));
    let mut patches = Vec::with_capacity(faces.len());
    for &[a, b, c] in faces {
        // row 0 = a; row 1 = c, b
        let mut lattice = vec![a, c, b];
        let mut m = 1;
        while m < side_len(patch_order) {
            lattice = refine(&lattice, m, &base.edge_midpoint_map)?;
            m *= 2;
        }
        patches.push(lattice);
    }
    Ok(PatchSet {
        patch_order,
        base_order: BASE_ORDER,
        num_patches: faces.len(),
        vertices_per_patch: vertices_per_patch(patch_order),
        patch_vertex_indices: patches,
    })
}

/// Gather per-vertex features `[40962][C]` into patch order `[N][V][C]`,
/// duplicating shared vertices into every patch holding them.
pub fn patch_tensorize(features: &[f64], channels: usize, patches: &PatchSet) -> Result<Tensor> {
    let nv = super::vertex_count(patches.base_order);
    if channels == 0 || features.len() != nv * channels {
        return Err(GeometryError::CountMismatch {
            what: "feature values",
            expected: nv * channels.max(1),
            got: features.len(),
        });
    }
    let (n, v) = (patches.num_patches, patches.vertices_per_patch);
    let mut data = Vec::with_capacity(n * v * channels);
    for patch in &patches.patch_vertex_indices {
        for &i in patch {
            let i = i as usize;
            data.extend_from_slice(&features[i * channels..(i + 1) * channels]);
        }
    }
    Tensor::new([n, v, channels], data).map_err(|e| GeometryError::Invalid(e.to_string()))
}

impl PatchSet {
    /// Lattice class of each slot in a patch: 0 interior, 1 edge, 2 corner.
    pub fn slot_classes(&self) -> Vec<u8> {
        let m = side_len(self.patch_order);
        let mut out = Vec::with_capacity(self.vertices_per_patch);
        for r in 0..=m {
            for k in 0..=r {
                let zeros = [m - r, k, r - k].iter().filter(|&&w| w == 0).count();
                out.push(zeros as u8);
            }
        }
        out
    }

    /// How many patches list each base vertex.
    pub fn multiplicity(&self) -> Vec<usize> {
        let mut counts = vec![0; super::vertex_count(self.base_order)];
        for patch in &self.patch_vertex_indices {
            for &i in patch {
                counts[i as usize] += 1;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::super::make_icosphere;
    use super::*;
    use std::collections::HashSet;
    use std::sync::OnceLock;

    fn base() -> &'static IcoMesh {
        static B: OnceLock<IcoMesh> = OnceLock::new();
        B.get_or_init(|| make_icosphere(6).unwrap())
    }

    #[test]
    fn sizes_match_closed_forms() {
        let expect = [(80, 561), (320, 153), (1280, 45), (5120, 15), (20480, 6)];
        for (p, &(n, v)) in (1..=5).zip(&expect) {
            let ps = extract_patches(base(), p).unwrap();
            assert_eq!((ps.num_patches, ps.vertices_per_patch), (n, v));
            assert!(ps.patch_vertex_indices.iter().all(|l| l.len() == v));
        }
    }

    #[test]
    fn rejects_bad_order_and_lineage() {
        assert!(extract_patches(base(), 0).is_err());
        assert!(extract_patches(base(), 6).is_err());
        let coarse = make_icosphere(5).unwrap();
        assert!(matches!(
            extract_patches(&coarse, 2),
            Err(GeometryError::Lineage(_))
        ));
        let mut stripped = base().clone();
        stripped.edge_midpoint_map.clear();
        assert!(matches!(
            extract_patches(&stripped, 2),
            Err(GeometryError::Lineage(_))
        ));
    }

    #[test]
    fn vertices_lie_in_their_face() {
        let b = base();
        let ps = extract_patches(b, 3).unwrap();
        let faces = b.faces_at(3).unwrap();
        for (patch, &[a, bb, c]) in ps.patch_vertex_indices.iter().zip(faces) {
            assert_eq!(patch.iter().collect::<HashSet<_>>().len(), patch.len());
            assert_eq!((patch[0], patch[patch.len() - 1]), (a, bb));
            let (va, vb, vc) = (
                b.vertices[a as usize],
                b.vertices[bb as usize],
                b.vertices[c as usize],
            );
            let n = super::super::cross(super::super::sub(vb, va), super::super::sub(vc, va));
            for &i in patch {
                let p = b.vertices[i as usize];
                // on the same side of each great-circle edge plane
                for (u, w) in [(va, vb), (vb, vc), (vc, va)] {
                    assert!(super::super::dot(super::super::cross(u, w), p) > -1e-12);
                }
                assert!(super::super::dot(n, p) > 0.0);
            }
        }
    }

    #[test]
    fn union_and_multiplicity_law() {
        let b = base();
        for p in 1..=5 {
            let ps = extract_patches(b, p).unwrap();
            let counts = ps.multiplicity();
            assert!(counts.iter().all(|&c| c > 0), "p={p}: uncovered vertex");
            let classes = ps.slot_classes();
            let coarse = make_icosphere(p).unwrap();
            let deg = coarse.vertex_degrees();
            for patch in &ps.patch_vertex_indices {
                for (&i, &cls) in patch.iter().zip(&classes) {
                    let c = counts[i as usize];
                    match cls {
                        0 => assert_eq!(c, 1),
                        1 => assert_eq!(c, 2),
                        _ => assert_eq!(c, deg[i as usize]),
                    }
                }
            }
            let m = side_len(p);
            let interior = (m - 1) * (m.max(2) - 2) / 2;
            let total = ps.num_patches * interior
                + super::super::edge_count(p) * (m - 1)
                + super::super::vertex_count(p);
            assert_eq!(total, 40_962);
            assert_eq!(
                counts.iter().sum::<usize>(),
                ps.num_patches * ps.vertices_per_patch
            );
        }
    }

    #[test]
    fn tensorize_shapes_and_shared_edges() {
        let b = base();
        let ps = extract_patches(b, 2).unwrap();
        let t = patch_tensorize(&vec![0.0; 40_962 * 4], 4, &ps).unwrap();
        assert_eq!(t.shape(), &[320, 153, 4]);
        assert!(t.data().iter().all(|&v| v == 0.0));
        let idx: Vec<f64> = (0..40_962).map(|i| i as f64).collect();
        let t = patch_tensorize(&idx, 1, &ps).unwrap();
        // every base vertex value shows up unchanged in every patch that lists it
        for (n, patch) in ps.patch_vertex_indices.iter().enumerate() {
            for (v, &i) in patch.iter().enumerate() {
                assert_eq!(t.data()[n * 153 + v], i as f64);
            }
        }
        assert!(patch_tensorize(&idx[..100], 1, &ps).is_err());
        // faces sharing a coarse edge share exactly that edge's m + 1 values
        let faces = b.faces_at(2).unwrap();
        let mut by_edge: std::collections::HashMap<(u32, u32), Vec<usize>> = Default::default();
        for (n, &[x, y, z]) in faces.iter().enumerate() {
            for e in [(x, y), (y, z), (z, x)] {
                by_edge.entry(edge_key(e.0, e.1)).or_default().push(n);
            }
        }
        for pair in by_edge.values() {
            assert_eq!(pair.len(), 2);
            let values = |n: usize| -> HashSet<u64> {
                t.data()[n * 153..(n + 1) * 153]
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            };
            assert_eq!(
                values(pair[0]).intersection(&values(pair[1])).count(),
                side_len(2) + 1
            );
        }
    }
}

//! JSON files for meshes and patch sets.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{make_icosphere, GeometryError, IcoMesh, PatchSet, Result, Vec3};

#[derive(Debug, Serialize, Deserialize)]
pub struct MeshFile {
    pub order: usize,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PatchFile {
    pub patch_order: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "V")]
    pub v: usize,
    pub patches: Vec<Vec<u32>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GeometryError + '_ {
    move |source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> GeometryError + '_ {
    move |source| GeometryError::Json {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    serde_json::to_writer(BufWriter::new(f), value).map_err(json_err(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(f)).map_err(json_err(path))
}

impl IcoMesh {
    pub fn to_file(&self) -> MeshFile {
        MeshFile {
            order: self.order,
            vertices: self.vertices.clone(),
            faces: self.faces.clone(),
        }
    }

    /// Rebuild a mesh from its file form. When the contents are bit-identical
    /// to a freshly generated icosphere the subdivision lineage is restored;
    /// otherwise the mesh is returned without it.
    pub fn from_file(file: MeshFile) -> Result<IcoMesh> {
        let n = file.vertices.len() as u32;
        if file.faces.iter().flatten().any(|&i| i >= n) {
            return Err(GeometryError::Invalid("face index out of range".into()));
        }
        if file.order <= super::MAX_ORDER {
            let fresh = make_icosphere(file.order)?;
            let same = fresh.faces == file.faces
                && fresh.vertices.len() == file.vertices.len()
                && fresh
                    .vertices
                    .iter()
                    .flatten()
                    .zip(file.vertices.iter().flatten())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if same {
                return Ok(fresh);
            }
        }
        Ok(IcoMesh {
            order: file.order,
            vertices: file.vertices,
            faces: file.faces,
            edge_midpoint_map: Default::default(),
            levels: Vec::new(),
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn load_json(path: &Path) -> Result<IcoMesh> {
        Self::from_file(read_json(path)?)
    }
}

impl PatchSet {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &PatchFile {
                patch_order: self.patch_order,
                n: self.num_patches,
                v: self.vertices_per_patch,
                patches: self.patch_vertex_indices.clone(),
            },
        )
    }

    pub fn load_json(path: &Path) -> Result<PatchSet> {
        let f: PatchFile = read_json(path)?;
        if f.patches.len() != f.n || f.patches.iter().any(|p| p.len() != f.v) {
            return Err(GeometryError::CountMismatch {
                what: "patch list",
                expected: f.n,
                got: f.patches.len(),
            });
        }
        Ok(PatchSet {
            patch_order: f.patch_order,
            base_order: super::BASE_ORDER,
            num_patches: f.n,
            vertices_per_patch: f.v,
            patch_vertex_indices: f.patches,
        })
    }
}

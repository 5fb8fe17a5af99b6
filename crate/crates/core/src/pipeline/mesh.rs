//! Surface extraction with marching cubes over the allocated leaves, and
//! ASCII PLY output.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

use super::mc_tables::{EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};
use crate::decoder::DecoderParams;
use crate::render::RenderConfig;
use crate::svo::{HybridVoxelMap, VoxelCoord};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("resolution must be positive, got {0}")]
    Resolution(f64),
    #[error("ply: {0}")]
    Ply(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Area-weighted mean of the face normals (not normalized).
    pub fn mean_normal(&self) -> Vector3<f64> {
        self.faces.iter().map(|f| self.face_normal(f)).sum()
    }

    /// Cross product of the face edges; its length is twice the area.
    pub fn face_normal(&self, f: &[u32; 3]) -> Vector3<f64> {
        let [a, b, c] = f.map(|i| self.vertices[i as usize]);
        (b - a).cross(&(c - a))
    }

    pub fn write_ply<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", self.vertices.len())?;
        for axis in ["x", "y", "z"] {
            writeln!(w, "property float {axis}")?;
        }
        for channel in ["red", "green", "blue"] {
            writeln!(w, "property uchar {channel}")?;
        }
        writeln!(w, "element face {}", self.faces.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
        writeln!(w, "end_header")?;
        for (v, c) in self.vertices.iter().zip(&self.colors) {
            writeln!(w, "{} {} {} {} {} {}", v.x as f32, v.y as f32, v.z as f32, c[0], c[1], c[2])?;
        }
        for f in &self.faces {
            writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
        }
        Ok(())
    }

    /// Reads the ASCII layout written by [`TriangleMesh::write_ply`].
    pub fn read_ply<R: BufRead>(r: R) -> Result<Self, MeshError> {
        let bad = |m: &str| MeshError::Ply(m.to_string());
        let mut lines = r.lines();
        let mut n_vertices = None;
        let mut n_faces = None;
        loop {
            let line = lines.next().ok_or_else(|| bad("missing end_header"))??;
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some("format"), Some(fmt), _) if fmt != "ascii" => return Err(bad("only ascii is supported")),
                (Some("element"), Some("vertex"), Some(n)) => n_vertices = n.parse::<usize>().ok(),
                (Some("element"), Some("face"), Some(n)) => n_faces = n.parse::<usize>().ok(),
                (Some("end_header"), _, _) => break,
                _ => {}
            }
        }
        let (nv, nf) = n_vertices.zip(n_faces).ok_or_else(|| bad("missing element counts"))?;
        let mut mesh = TriangleMesh::default();
        for _ in 0..nv {
            let line = lines.next().ok_or_else(|| bad("truncated vertex list"))??;
            let v: Vec<f64> =
                line.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|_| bad("bad vertex"))?;
            if v.len() != 6 {
                return Err(bad("vertex needs 6 fields"));
            }
            mesh.vertices.push(Vector3::new(v[0], v[1], v[2]));
            mesh.colors.push([v[3] as u8, v[4] as u8, v[5] as u8]);
        }
        for _ in 0..nf {
            let line = lines.next().ok_or_else(|| bad("truncated face list"))??;
            let f: Vec<u32> =
                line.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|_| bad("bad face"))?;
            if f.len() != 4 || f[0] != 3 || f[1..].iter().any(|&i| i as usize >= nv) {
                return Err(bad("faces must be triangles over existing vertices"));
            }
            mesh.faces.push([f[1], f[2], f[3]]);
        }
        Ok(mesh)
    }
}

/// Lattice point of the extraction grid: leaf coordinate times the
/// subdivision plus the in-leaf index.
type LatticePoint = [i64; 3];

/// Runs marching cubes at iso-level 0 on `s = s_coarse + s_residual`,
/// sampled every `resolution` meters (rounded to divide the voxel size)
/// inside allocated leaves. With priors enabled, leaves having a vertex
/// without an accepted prior are skipped.
pub fn extract_mesh(
    map: &HybridVoxelMap,
    params: &DecoderParams,
    resolution: f64,
    render: &RenderConfig,
) -> Result<TriangleMesh, MeshError> {
    if !(resolution > 0.0) {
        return Err(MeshError::Resolution(resolution));
    }
    let vs = map.voxel_size();
    let n = ((vs / resolution).round() as usize).max(1);
    let cell = vs / n as f64;
    let weights = map.update_weights();
    let mut leaves: Vec<VoxelCoord> = map
        .leaves()
        .filter(|(_, ids)| !render.use_prior || ids.iter().all(|&v| weights[v as usize] > 0))
        .map(|(v, _)| *v)
        .collect();
    leaves.sort();

    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(LatticePoint, usize), u32> = HashMap::new();
    let mut vertex_leaf: Vec<VoxelCoord> = Vec::new();
    let side = n + 1;
    for leaf in &leaves {
        let origin = leaf.min_corner(vs);
        let points: Vec<Vector3<f64>> = (0..side * side * side)
            .map(|i| {
                origin + Vector3::new((i % side) as f64, ((i / side) % side) as f64, (i / (side * side)) as f64) * cell
            })
            .collect();
        let sdf = field(map, params, render, leaf, &points).1;
        let base = [leaf.x as i64 * n as i64, leaf.y as i64 * n as i64, leaf.z as i64 * n as i64];
        for (cx, cy, cz) in (0..n * n * n).map(|i| (i % n, (i / n) % n, i / (n * n))) {
            let corner = |c: usize| {
                let dx = (c & 1) ^ ((c >> 1) & 1);
                let (dy, dz) = ((c >> 1) & 1, c >> 2);
                (cx + dx) + (cy + dy) * side + (cz + dz) * side * side
            };
            let values: [f64; 8] = std::array::from_fn(|c| sdf[corner(c)]);
            let index = values.iter().enumerate().filter(|(_, &v)| v < 0.0).fold(0usize, |acc, (c, _)| acc | 1 << c);
            if EDGE_TABLE[index] == 0 {
                continue;
            }
            let mut ids = [u32::MAX; 12];
            for (e, &(a, b)) in EDGE_CORNERS.iter().enumerate() {
                if EDGE_TABLE[index] & (1 << e) == 0 {
                    continue;
                }
                let (ia, ib) = (corner(a), corner(b));
                let key = lattice_edge(base, side, ia, ib);
                ids[e] = *edge_vertex.entry(key).or_insert_with(|| {
                    let (va, vb) = (values[a], values[b]);
                    let t = if va == vb { 0.5 } else { va / (va - vb) };
                    mesh.vertices.push(points[ia] + (points[ib] - points[ia]) * t);
                    vertex_leaf.push(*leaf);
                    (mesh.vertices.len() - 1) as u32
                });
            }
            for tri in TRIANGLE_TABLE[index].chunks(3).take_while(|t| t[0] >= 0) {
                // Reversed so normals point toward positive SDF.
                mesh.faces.push([ids[tri[0] as usize], ids[tri[2] as usize], ids[tri[1] as usize]]);
            }
        }
    }
    mesh.colors = vertex_colors(map, params, render, &mesh.vertices, &vertex_leaf);
    Ok(mesh)
}

/// Edge between two corner lattice indices of a leaf, keyed by its lower
/// endpoint and axis so neighbouring leaves share vertices.
fn lattice_edge(base: LatticePoint, side: usize, ia: usize, ib: usize) -> (LatticePoint, usize) {
    let at = |i: usize| {
        [base[0] + (i % side) as i64, base[1] + ((i / side) % side) as i64, base[2] + (i / (side * side)) as i64]
    };
    let (pa, pb) = (at(ia), at(ib));
    let axis = (0..3).find(|&k| pa[k] != pb[k]).expect("edge endpoints differ");
    (if pa[axis] < pb[axis] { pa } else { pb }, axis)
}

/// Decoded `(colors, sdf)` for points inside `leaf`.
fn field(
    map: &HybridVoxelMap,
    params: &DecoderParams,
    render: &RenderConfig,
    leaf: &VoxelCoord,
    points: &[Vector3<f64>],
) -> (DMatrix<f64>, Vec<f64>) {
    let d = map.feature_dim();
    let mut feats = DMatrix::zeros(d, points.len());
    let mut coarse = vec![0.0; points.len()];
    for (j, p) in points.iter().enumerate() {
        let it = map.interp_in(leaf, p).expect("leaf is allocated");
        map.blend_feature(&it, feats.column_mut(j).as_mut_slice());
        coarse[j] = render.prior_blend(map, &it).map_or(0.0, |b| b.value);
    }
    let out = params.forward(&feats);
    let sdf = coarse.iter().enumerate().map(|(j, c)| c + out.sdf[(0, j)]).collect();
    (out.color, sdf)
}

fn vertex_colors(
    map: &HybridVoxelMap,
    params: &DecoderParams,
    render: &RenderConfig,
    vertices: &[Vector3<f64>],
    leaves: &[VoxelCoord],
) -> Vec<[u8; 3]> {
    let mut colors = vec![[0u8; 3]; vertices.len()];
    let mut start = 0;
    while start < vertices.len() {
        let leaf = leaves[start];
        let end = start + leaves[start..].iter().take_while(|l| **l == leaf).count();
        let (c, _) = field(map, params, render, &leaf, &vertices[start..end]);
        for (j, out) in colors[start..end].iter_mut().enumerate() {
            *out = std::array::from_fn(|k| (c[(k, j)] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        start = end;
    }
    colors
}

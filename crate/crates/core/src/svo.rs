//! Sparse hybrid voxel map.
//!
//! Leaf voxels are allocated on demand around observed surface points. Each
//! leaf owns eight corner vertices; a vertex is stored once no matter how many
//! leaves share it, and carries a learned feature vector, a fused SDF prior and
//! the fusion weight. Coarser occupancy levels (cell size doubling per level)
//! let rays skip empty space without bounding the scene.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;
use crate::geometry::{backproject, CameraIntrinsics};

const SNAPSHOT_MAGIC: &[u8; 8] = b"HVSLAMAP";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("point {0:?} is outside every allocated voxel")]
    Unallocated([f64; 3]),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Integer leaf-grid coordinate; the leaf spans `[i*s, (i+1)*s)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelCoord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn containing(p: &Vector3<f64>, voxel_size: f64) -> Self {
        Self::new(
            (p.x / voxel_size).floor() as i32,
            (p.y / voxel_size).floor() as i32,
            (p.z / voxel_size).floor() as i32,
        )
    }

    /// Corner `c` (bit 0: +x, bit 1: +y, bit 2: +z).
    pub fn corner(&self, c: usize) -> VertexCoord {
        VertexCoord::new(self.x + (c & 1) as i32, self.y + ((c >> 1) & 1) as i32, self.z + ((c >> 2) & 1) as i32)
    }

    pub fn min_corner(&self, voxel_size: f64) -> Vector3<f64> {
        Vector3::new(self.x as f64, self.y as f64, self.z as f64) * voxel_size
    }

    fn coarse(&self, level: usize) -> [i32; 3] {
        [self.x >> level, self.y >> level, self.z >> level]
    }
}

/// Integer vertex coordinate; vertex `(i, j, k)` sits at `(i, j, k) * s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VertexCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VertexCoord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn position(&self, voxel_size: f64) -> Vector3<f64> {
        Vector3::new(self.x as f64, self.y as f64, self.z as f64) * voxel_size
    }
}

/// Owned copy of one vertex record.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexData {
    pub feature: Vec<f64>,
    pub sdf_prior: f64,
    pub update_weight: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    /// Leaf edge length in meters.
    pub voxel_size: f64,
    /// Length of the per-vertex feature vector.
    pub feature_dim: usize,
    /// Occupancy levels above the leaves; a root block spans `2^levels` leaves.
    pub levels: usize,
    /// Back-projected points a leaf must receive in one frame to be allocated.
    pub allocation_threshold: u32,
    /// New features are drawn uniformly from `[-feature_init, feature_init]`.
    pub feature_init: f64,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { voxel_size: 0.2, feature_dim: 16, levels: 8, allocation_threshold: 5, feature_init: 1e-2, seed: 0 }
    }
}

/// Trilinear stencil of a point inside one allocated leaf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interp {
    pub leaf: VoxelCoord,
    pub vertices: [u32; 8],
    pub weights: [f64; 8],
    /// Normalized in-cell coordinates in `[0, 1]^3`.
    pub local: [f64; 3],
}

/// Stencil blend of vertex priors: `value`, its partials with respect to
/// the eight priors, and per-corner `coefficients` such that the spatial
/// gradient is `sum_c coefficients[c] * weight_gradients[c]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorBlend {
    pub value: f64,
    pub weights: [f64; 8],
    pub coefficients: [f64; 8],
}

/// Observed-weight total below which a stencil counts as unobserved.
pub const OBSERVED_WEIGHT_EPS: f64 = 1e-6;

impl Interp {
    /// Spatial gradients of the eight weights (per meter).
    pub fn weight_gradients(&self, voxel_size: f64) -> [Vector3<f64>; 8] {
        let [u, v, w] = self.local;
        let inv = 1.0 / voxel_size;
        std::array::from_fn(|c| {
            let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let fx = if bx == 1 { u } else { 1.0 - u };
            let fy = if by == 1 { v } else { 1.0 - v };
            let fz = if bz == 1 { w } else { 1.0 - w };
            let sx = if bx == 1 { 1.0 } else { -1.0 };
            let sy = if by == 1 { 1.0 } else { -1.0 };
            let sz = if bz == 1 { 1.0 } else { -1.0 };
            Vector3::new(sx * fy * fz, sy * fx * fz, sz * fx * fy) * inv
        })
    }
}

/// Trilinear weights of normalized coordinates, corner order as `VoxelCoord::corner`.
pub fn trilinear_weights(local: [f64; 3]) -> [f64; 8] {
    let [u, v, w] = local;
    std::array::from_fn(|c| {
        let fx = if c & 1 == 1 { u } else { 1.0 - u };
        let fy = if (c >> 1) & 1 == 1 { v } else { 1.0 - v };
        let fz = if (c >> 2) & 1 == 1 { w } else { 1.0 - w };
        fx * fy * fz
    })
}

/// One allocated leaf crossed by a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub voxel: VoxelCoord,
    pub t_entry: f64,
    pub t_exit: f64,
}

/// Gradient contribution routed to one vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexGradient {
    pub vertex: u32,
    pub weight: f64,
    pub feature: Vec<f64>,
    pub sdf_prior: f64,
}

#[derive(Debug, Clone)]
pub struct HybridVoxelMap {
    config: MapConfig,
    leaves: IndexMap<VoxelCoord, [u32; 8]>,
    vertex_index: HashMap<VertexCoord, u32>,
    vertex_coords: Vec<VertexCoord>,
    features: Vec<f64>,
    priors: Vec<f64>,
    weights: Vec<u32>,
    /// `masks[l - 1]` holds the occupied cells of size `2^l` leaves.
    masks: Vec<HashSet<[i32; 3]>>,
}

impl HybridVoxelMap {
    pub fn new(config: MapConfig) -> Self {
        assert!(config.voxel_size > 0.0 && config.feature_dim > 0);
        Self {
            config,
            leaves: IndexMap::new(),
            vertex_index: HashMap::new(),
            vertex_coords: Vec::new(),
            features: Vec::new(),
            priors: Vec::new(),
            weights: Vec::new(),
            masks: vec![HashSet::new(); config.levels],
        }
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn voxel_size(&self) -> f64 {
        self.config.voxel_size
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn is_allocated(&self, v: &VoxelCoord) -> bool {
        self.leaves.contains_key(v)
    }

    /// Allocated leaves in allocation order.
    pub fn leaves(&self) -> impl Iterator<Item = (&VoxelCoord, &[u32; 8])> {
        self.leaves.iter()
    }

    pub fn leaf_vertices(&self, v: &VoxelCoord) -> Option<&[u32; 8]> {
        self.leaves.get(v)
    }

    pub fn vertex_id(&self, v: &VertexCoord) -> Option<u32> {
        self.vertex_index.get(v).copied()
    }

    pub fn vertex_coord(&self, id: u32) -> VertexCoord {
        self.vertex_coords[id as usize]
    }

    pub fn vertex_position(&self, id: u32) -> Vector3<f64> {
        self.vertex_coords[id as usize].position(self.config.voxel_size)
    }

    pub fn vertex(&self, id: u32) -> VertexData {
        VertexData {
            feature: self.feature(id).to_vec(),
            sdf_prior: self.priors[id as usize],
            update_weight: self.weights[id as usize],
        }
    }

    pub fn feature(&self, id: u32) -> &[f64] {
        let d = self.config.feature_dim;
        &self.features[id as usize * d..(id as usize + 1) * d]
    }

    pub fn feature_mut(&mut self, id: u32) -> &mut [f64] {
        let d = self.config.feature_dim;
        &mut self.features[id as usize * d..(id as usize + 1) * d]
    }

    /// All features, vertex-major (`num_vertices * feature_dim`).
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn priors_mut(&mut self) -> &mut [f64] {
        &mut self.priors
    }

    pub fn update_weights(&self) -> &[u32] {
        &self.weights
    }

    pub fn set_prior(&mut self, id: u32, sdf_prior: f64, update_weight: u32) {
        self.priors[id as usize] = sdf_prior;
        self.weights[id as usize] = update_weight;
    }

    /// True when the occupancy cell of size `2^level` leaves is marked.
    pub fn level_occupied(&self, level: usize, cell: [i32; 3]) -> bool {
        match level {
            0 => self.leaves.contains_key(&VoxelCoord::new(cell[0], cell[1], cell[2])),
            l => self.masks[l - 1].contains(&cell),
        }
    }

    fn init_feature(&self, v: &VertexCoord) -> Vec<f64> {
        let mut h = self.config.seed ^ 0x9E37_79B9_7F4A_7C15;
        for c in [v.x, v.y, v.z] {
            h = splitmix64(h ^ (c as u32 as u64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let a = self.config.feature_init;
        (0..self.config.feature_dim).map(|_| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 }).collect()
    }

    fn insert_vertex(&mut self, v: VertexCoord) -> u32 {
        if let Some(&id) = self.vertex_index.get(&v) {
            return id;
        }
        let id = self.vertex_coords.len() as u32;
        let feat = self.init_feature(&v);
        self.features.extend_from_slice(&feat);
        self.priors.push(0.0);
        self.weights.push(0);
        self.vertex_coords.push(v);
        self.vertex_index.insert(v, id);
        id
    }

    /// Allocates one leaf (no-op when present). Returns true if it was new.
    pub fn allocate(&mut self, v: VoxelCoord) -> bool {
        if self.leaves.contains_key(&v) {
            return false;
        }
        let ids: [u32; 8] = std::array::from_fn(|c| self.insert_vertex(v.corner(c)));
        self.leaves.insert(v, ids);
        for level in 1..=self.config.levels {
            self.masks[level - 1].insert(v.coarse(level));
        }
        true
    }

    /// Number of back-projected valid-depth points per leaf, in first-hit order.
    pub fn point_bins(&self, frame: &Frame, intr: &CameraIntrinsics) -> IndexMap<VoxelCoord, u32> {
        let mut bins = IndexMap::new();
        for &idx in frame.valid_pixels() {
            let (x, y) = frame.pixel_of(idx);
            let d = frame.depth_at(x, y);
            let Ok(pc) = backproject(&Vector2::new(x as f64, y as f64), d, intr) else { continue };
            let pw = frame.pose.transform_point(&pc);
            *bins.entry(VoxelCoord::containing(&pw, self.config.voxel_size)).or_insert(0) += 1;
        }
        bins
    }

    /// Allocates every leaf that receives at least `allocation_threshold`
    /// points from the frame; returns the newly allocated leaves.
    pub fn allocate_from_frame(&mut self, frame: &Frame, intr: &CameraIntrinsics) -> Vec<VoxelCoord> {
        let bins = self.point_bins(frame, intr);
        let mut new = Vec::new();
        for (v, n) in bins {
            if n >= self.config.allocation_threshold && self.allocate(v) {
                new.push(v);
            }
        }
        new
    }

    /// Stencil of `p` inside a specific allocated leaf; coordinates are
    /// clamped onto the leaf so points on shared faces stay consistent.
    pub fn interp_in(&self, leaf: &VoxelCoord, p: &Vector3<f64>) -> Option<Interp> {
        let vertices = *self.leaves.get(leaf)?;
        let s = self.config.voxel_size;
        let o = leaf.min_corner(s);
        let local =
            [((p.x - o.x) / s).clamp(0.0, 1.0), ((p.y - o.y) / s).clamp(0.0, 1.0), ((p.z - o.z) / s).clamp(0.0, 1.0)];
        Some(Interp { leaf: *leaf, vertices, weights: trilinear_weights(local), local })
    }

    /// Stencil of `p` inside the leaf containing it.
    pub fn interp(&self, p: &Vector3<f64>) -> Option<Interp> {
        self.interp_in(&VoxelCoord::containing(p, self.config.voxel_size), p)
    }

    /// Blends the eight vertex features of a stencil into `out`.
    pub fn blend_feature(&self, it: &Interp, out: &mut [f64]) {
        out.fill(0.0);
        for (&vid, &w) in it.vertices.iter().zip(&it.weights) {
            for (o, f) in out.iter_mut().zip(self.feature(vid)) {
                *o += w * f;
            }
        }
    }

    pub fn blend_prior(&self, it: &Interp) -> f64 {
        it.vertices.iter().zip(&it.weights).map(|(&v, &w)| w * self.priors[v as usize]).sum()
    }

    /// Coarse SDF over the stencil's observed vertices (`update_weight > 0`)
    /// with trilinear weights renormalized among them; 0 when none is
    /// observed.
    pub fn blend_prior_observed(&self, it: &Interp) -> PriorBlend {
        let mut total = 0.0;
        let mut acc = 0.0;
        for (&v, &w) in it.vertices.iter().zip(&it.weights) {
            if self.weights[v as usize] > 0 {
                total += w;
                acc += w * self.priors[v as usize];
            }
        }
        if total < OBSERVED_WEIGHT_EPS {
            return PriorBlend { value: 0.0, weights: [0.0; 8], coefficients: [0.0; 8] };
        }
        let value = acc / total;
        let mut weights = [0.0; 8];
        let mut coefficients = [0.0; 8];
        for (c, (&v, &w)) in it.vertices.iter().zip(&it.weights).enumerate() {
            if self.weights[v as usize] > 0 {
                weights[c] = w / total;
                coefficients[c] = (self.priors[v as usize] - value) / total;
            }
        }
        PriorBlend { value, weights, coefficients }
    }

    /// Plain trilinear prior blend in [`PriorBlend`] form.
    pub fn blend_prior_all(&self, it: &Interp) -> PriorBlend {
        PriorBlend {
            value: self.blend_prior(it),
            weights: it.weights,
            coefficients: it.vertices.map(|v| self.priors[v as usize]),
        }
    }

    /// Interpolated `(feature, coarse sdf)` at `p`, or `None` if `p` lies in
    /// unallocated space.
    pub fn trilerp(&self, p: &Vector3<f64>) -> Option<(Vec<f64>, f64)> {
        let it = self.interp(p)?;
        let mut feat = vec![0.0; self.config.feature_dim];
        self.blend_feature(&it, &mut feat);
        Some((feat, self.blend_prior(&it)))
    }

    /// Routes upstream gradients at `p` to the eight stencil vertices with
    /// the same weights `trilerp` uses.
    pub fn vertex_gradient_scatter(
        &self,
        p: &Vector3<f64>,
        upstream_feature: &[f64],
        upstream_sdf: f64,
    ) -> Result<Vec<VertexGradient>, MapError> {
        let it = self.interp(p).ok_or(MapError::Unallocated([p.x, p.y, p.z]))?;
        Ok(it
            .vertices
            .iter()
            .zip(&it.weights)
            .map(|(&vertex, &weight)| VertexGradient {
                vertex,
                weight,
                feature: upstream_feature.iter().map(|g| g * weight).collect(),
                sdf_prior: upstream_sdf * weight,
            })
            .collect())
    }

    /// Accumulates a stencil's share of upstream gradients into dense
    /// per-vertex buffers.
    pub fn scatter_into(
        &self,
        it: &Interp,
        upstream_feature: Option<&[f64]>,
        upstream_sdf: f64,
        feature_grad: Option<&mut [f64]>,
        prior_grad: Option<&mut [f64]>,
    ) {
        let d = self.config.feature_dim;
        if let (Some(up), Some(fg)) = (upstream_feature, feature_grad) {
            for (&vid, &w) in it.vertices.iter().zip(&it.weights) {
                let dst = &mut fg[vid as usize * d..(vid as usize + 1) * d];
                for (g, u) in dst.iter_mut().zip(up) {
                    *g += w * u;
                }
            }
        }
        if let Some(pg) = prior_grad {
            for (&vid, &w) in it.vertices.iter().zip(&it.weights) {
                pg[vid as usize] += w * upstream_sdf;
            }
        }
    }

    /// Allocated leaves pierced by the ray `origin + t * direction`,
    /// `t in [0, max_range]`, ordered by entry distance. Empty octree cells
    /// are skipped level by level.
    pub fn ray_voxel_intersect(&self, origin: &Vector3<f64>, direction: &Vector3<f64>, max_range: f64) -> Vec<RayHit> {
        let mut hits = Vec::new();
        if self.leaves.is_empty() || !(max_range > 0.0) {
            return hits;
        }
        self.traverse(self.config.levels, origin, direction, 0.0, max_range, None, &mut hits);
        hits
    }

    #[allow(clippy::too_many_arguments)]
    fn traverse(
        &self,
        level: usize,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        t0: f64,
        t1: f64,
        parent: Option<[i32; 3]>,
        hits: &mut Vec<RayHit>,
    ) {
        let h = self.config.voxel_size * (1u64 << level) as f64;
        let bounds = parent.map(|p| ([2 * p[0], 2 * p[1], 2 * p[2]], [2 * p[0] + 1, 2 * p[1] + 1, 2 * p[2] + 1]));
        for (cell, te, tx) in GridRay::new(origin, dir, h, t0, t1, bounds) {
            if tx <= te {
                continue;
            }
            if level == 0 {
                let v = VoxelCoord::new(cell[0], cell[1], cell[2]);
                if self.leaves.contains_key(&v) {
                    hits.push(RayHit { voxel: v, t_entry: te, t_exit: tx });
                }
            } else if self.masks[level - 1].contains(&cell) {
                self.traverse(level - 1, origin, dir, te, tx, Some(cell), hits);
            }
        }
    }

    /// Serializes the map (see `docs/FORMATS.md` for the byte layout).
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<(), MapError> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        let c = &self.config;
        w.write_f64::<LittleEndian>(c.voxel_size)?;
        w.write_u32::<LittleEndian>(c.feature_dim as u32)?;
        w.write_u32::<LittleEndian>(c.levels as u32)?;
        w.write_u32::<LittleEndian>(c.allocation_threshold)?;
        w.write_f64::<LittleEndian>(c.feature_init)?;
        w.write_u64::<LittleEndian>(c.seed)?;
        w.write_u64::<LittleEndian>(self.vertex_coords.len() as u64)?;
        for (id, v) in self.vertex_coords.iter().enumerate() {
            for k in [v.x, v.y, v.z] {
                w.write_i32::<LittleEndian>(k)?;
            }
            w.write_f64::<LittleEndian>(self.priors[id])?;
            w.write_u32::<LittleEndian>(self.weights[id])?;
            for &f in self.feature(id as u32) {
                w.write_f64::<LittleEndian>(f)?;
            }
        }
        w.write_u64::<LittleEndian>(self.leaves.len() as u64)?;
        for v in self.leaves.keys() {
            for k in [v.x, v.y, v.z] {
                w.write_i32::<LittleEndian>(k)?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self, MapError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(MapError::Snapshot("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != SNAPSHOT_VERSION {
            return Err(MapError::Snapshot(format!("unsupported version {version}")));
        }
        let config = MapConfig {
            voxel_size: r.read_f64::<LittleEndian>()?,
            feature_dim: r.read_u32::<LittleEndian>()? as usize,
            levels: r.read_u32::<LittleEndian>()? as usize,
            allocation_threshold: r.read_u32::<LittleEndian>()?,
            feature_init: r.read_f64::<LittleEndian>()?,
            seed: r.read_u64::<LittleEndian>()?,
        };
        if !(config.voxel_size > 0.0) || config.feature_dim == 0 || config.levels > 24 {
            return Err(MapError::Snapshot("invalid header".into()));
        }
        let mut map = Self::new(config);
        let n_vertices = r.read_u64::<LittleEndian>()? as usize;
        for id in 0..n_vertices {
            let v = VertexCoord::new(
                r.read_i32::<LittleEndian>()?,
                r.read_i32::<LittleEndian>()?,
                r.read_i32::<LittleEndian>()?,
            );
            let prior = r.read_f64::<LittleEndian>()?;
            let weight = r.read_u32::<LittleEndian>()?;
            let mut feat = vec![0.0; config.feature_dim];
            r.read_f64_into::<LittleEndian>(&mut feat)?;
            if map.vertex_index.insert(v, id as u32).is_some() {
                return Err(MapError::Snapshot(format!("duplicate vertex {v:?}")));
            }
            map.vertex_coords.push(v);
            map.priors.push(prior);
            map.weights.push(weight);
            map.features.extend_from_slice(&feat);
        }
        let n_leaves = r.read_u64::<LittleEndian>()? as usize;
        for _ in 0..n_leaves {
            let v = VoxelCoord::new(
                r.read_i32::<LittleEndian>()?,
                r.read_i32::<LittleEndian>()?,
                r.read_i32::<LittleEndian>()?,
            );
            let ids = (0..8)
                .map(|c| map.vertex_index.get(&v.corner(c)).copied())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| MapError::Snapshot(format!("leaf {v:?} references a missing vertex")))?;
            map.leaves.insert(v, ids.try_into().unwrap());
            for level in 1..=config.levels {
                map.masks[level - 1].insert(v.coarse(level));
            }
        }
        Ok(map)
    }

    /// Order-sensitive checksum over every stored value (used to assert that
    /// read-only phases leave the map untouched).
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |x: u64| h = splitmix64(h ^ x);
        for v in self.leaves.keys() {
            eat(((v.x as u32 as u64) << 32) | v.y as u32 as u64);
            eat(v.z as u32 as u64);
        }
        self.features.iter().chain(&self.priors).for_each(|f| eat(f.to_bits()));
        self.weights.iter().for_each(|&w| eat(w as u64));
        h
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Amanatides–Woo walk over a uniform grid of cell size `h`, restricted to
/// `t in [t0, t1]` and optionally to an inclusive cell range.
struct GridRay {
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    h: f64,
    cell: [i32; 3],
    step: [i32; 3],
    t: f64,
    t_end: f64,
    bounds: Option<([i32; 3], [i32; 3])>,
    done: bool,
}

impl GridRay {
    fn new(
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        h: f64,
        t0: f64,
        t1: f64,
        bounds: Option<([i32; 3], [i32; 3])>,
    ) -> Self {
        // Locate the start cell a hair inside the interval so that entering
        // exactly on a face picks the cell the ray is moving into.
        let probe = origin + dir * (t0 + (t1 - t0) * 1e-9);
        let mut cell = [0i32; 3];
        let mut step = [0i32; 3];
        for a in 0..3 {
            let mut c = (probe[a] / h).floor() as i32;
            if let Some((lo, hi)) = bounds {
                c = c.clamp(lo[a], hi[a]);
            }
            cell[a] = c;
            step[a] = if dir[a] > 0.0 {
                1
            } else if dir[a] < 0.0 {
                -1
            } else {
                0
            };
        }
        Self { origin: *origin, dir: *dir, h, cell, step, t: t0, t_end: t1, bounds, done: t1 <= t0 }
    }

    fn boundary_t(&self, a: usize) -> f64 {
        match self.step[a] {
            1 => ((self.cell[a] + 1) as f64 * self.h - self.origin[a]) / self.dir[a],
            -1 => (self.cell[a] as f64 * self.h - self.origin[a]) / self.dir[a],
            _ => f64::INFINITY,
        }
    }
}

impl Iterator for GridRay {
    type Item = ([i32; 3], f64, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let tm = [self.boundary_t(0), self.boundary_t(1), self.boundary_t(2)];
        let axis = if tm[0] <= tm[1] && tm[0] <= tm[2] {
            0
        } else if tm[1] <= tm[2] {
            1
        } else {
            2
        };
        let exit = tm[axis].min(self.t_end).max(self.t);
        let item = (self.cell, self.t, exit);
        if exit >= self.t_end {
            self.done = true;
        } else {
            self.t = exit;
            self.cell[axis] += self.step[axis];
            if let Some((lo, hi)) = self.bounds {
                if self.cell[axis] < lo[axis] || self.cell[axis] > hi[axis] {
                    self.done = true;
                }
            }
        }
        Some(item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Image;
    use crate::geometry::Pose;

    fn map() -> HybridVoxelMap {
        HybridVoxelMap::new(MapConfig { feature_dim: 4, seed: 7, ..MapConfig::default() })
    }

    #[test]
    fn shared_vertices_are_stored_once() {
        let mut m = map();
        m.allocate(VoxelCoord::new(0, 0, 0));
        m.allocate(VoxelCoord::new(1, 0, 0));
        assert_eq!(m.num_leaves(), 2);
        assert_eq!(m.num_vertices(), 12);
        let a = m.leaf_vertices(&VoxelCoord::new(0, 0, 0)).unwrap();
        let b = m.leaf_vertices(&VoxelCoord::new(1, 0, 0)).unwrap();
        // +x face of the first leaf is the -x face of the second.
        for (ca, cb) in [(1, 0), (3, 2), (5, 4), (7, 6)] {
            assert_eq!(a[ca], b[cb]);
        }
        assert!(!m.allocate(VoxelCoord::new(0, 0, 0)));
    }

    #[test]
    fn level_masks_track_descendants() {
        let mut m = map();
        m.allocate(VoxelCoord::new(-1, 5, 300));
        assert!(m.level_occupied(1, [-1, 2, 150]));
        assert!(m.level_occupied(8, [-1, 0, 1]));
        assert!(!m.level_occupied(8, [0, 0, 1]));
        assert!(!m.level_occupied(1, [0, 2, 150]));
    }

    #[test]
    fn features_initialized_small_and_deterministic() {
        let mut a = map();
        let mut b = map();
        a.allocate(VoxelCoord::new(2, 3, 4));
        b.allocate(VoxelCoord::new(9, 9, 9));
        b.allocate(VoxelCoord::new(2, 3, 4));
        let va = a.vertex_id(&VertexCoord::new(2, 3, 4)).unwrap();
        let vb = b.vertex_id(&VertexCoord::new(2, 3, 4)).unwrap();
        assert_eq!(a.feature(va), b.feature(vb));
        assert!(a.features().iter().all(|f| f.abs() <= 1e-2));
        assert!(a.priors().iter().all(|&p| p == 0.0));
        assert!(a.update_weights().iter().all(|&w| w == 0));
    }

    #[test]
    fn trilerp_at_vertex_and_center() {
        let mut m = map();
        let leaf = VoxelCoord::new(0, 0, 0);
        m.allocate(leaf);
        let ids = *m.leaf_vertices(&leaf).unwrap();
        for (c, &id) in ids.iter().enumerate() {
            m.set_prior(id, c as f64, 1);
        }
        let s = m.voxel_size();
        let (f, sdf) = m.trilerp(&Vector3::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(sdf, 0.0);
        assert_eq!(f, m.feature(ids[0]));
        let (_, sdf) = m.trilerp(&(Vector3::new(0.5, 0.5, 0.5) * s)).unwrap();
        assert!((sdf - 3.5).abs() < 1e-12);
        assert!(m.trilerp(&Vector3::new(-0.01, 0.0, 0.0)).is_none());
    }

    #[test]
    fn scatter_at_vertex_and_center() {
        let mut m = map();
        m.allocate(VoxelCoord::new(0, 0, 0));
        let g = m.vertex_gradient_scatter(&Vector3::zeros(), &[1.0, 2.0, 3.0, 4.0], 8.0).unwrap();
        let at0 = g.iter().find(|v| v.weight == 1.0).unwrap();
        assert_eq!(at0.feature, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(at0.sdf_prior, 8.0);
        let c = Vector3::new(0.1, 0.1, 0.1);
        let g = m.vertex_gradient_scatter(&c, &[8.0; 4], 8.0).unwrap();
        for v in &g {
            assert!((v.sdf_prior - 1.0).abs() < 1e-12);
        }
        assert!(m.vertex_gradient_scatter(&Vector3::new(5.0, 5.0, 5.0), &[0.0; 4], 0.0).is_err());
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut m = map();
        let leaf = VoxelCoord::new(1, -2, 0);
        m.allocate(leaf);
        let p = Vector3::new(0.27, -0.33, 0.05);
        let it = m.interp_in(&leaf, &p).unwrap();
        let g = it.weight_gradients(m.voxel_size());
        let h = 1e-6;
        for a in 0..3 {
            let mut dp = Vector3::zeros();
            dp[a] = h;
            let wp = m.interp_in(&leaf, &(p + dp)).unwrap().weights;
            let wm = m.interp_in(&leaf, &(p - dp)).unwrap().weights;
            for c in 0..8 {
                let fd = (wp[c] - wm[c]) / (2.0 * h);
                assert!((fd - g[c][a]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn axis_aligned_ray_hits_consecutive_voxels_in_order() {
        let mut m = map();
        for x in 3..6 {
            m.allocate(VoxelCoord::new(x, 0, 0));
        }
        m.allocate(VoxelCoord::new(4, 1, 0));
        let hits = m.ray_voxel_intersect(&Vector3::new(0.0, 0.1, 0.1), &Vector3::x(), 10.0);
        let xs: Vec<_> = hits.iter().map(|h| h.voxel.x).collect();
        assert_eq!(xs, vec![3, 4, 5]);
        assert!((hits[0].t_entry - 0.6).abs() < 1e-12);
        assert!((hits[2].t_exit - 1.2).abs() < 1e-12);
        let miss = m.ray_voxel_intersect(&Vector3::new(0.0, 0.1, 0.1), &-Vector3::x(), 10.0);
        assert!(miss.is_empty());
    }

    #[test]
    fn allocation_from_frame_and_idempotence() {
        let intr = CameraIntrinsics::new(50.0, 50.0, 20.0, 15.0, 40, 30, 0.001).unwrap();
        let frame = Frame::new(0, 0.0, Image::filled(40, 30, [0.5; 3]), Image::filled(40, 30, 1.1f32), &intr).unwrap();
        let mut m = map();
        let first = m.allocate_from_frame(&frame, &intr);
        assert!(!first.is_empty());
        assert!(m.allocate_from_frame(&frame, &intr).is_empty());
        let empty = Frame::new(1, 0.0, Image::filled(40, 30, [0.5; 3]), Image::filled(40, 30, 0.0f32), &intr).unwrap();
        assert!(m.allocate_from_frame(&empty, &intr).is_empty());
        let _ = Pose::identity();
    }

    #[test]
    fn snapshot_round_trip() {
        let mut m = map();
        for v in [VoxelCoord::new(0, 0, 0), VoxelCoord::new(-3, 2, 1), VoxelCoord::new(0, 1, 0)] {
            m.allocate(v);
        }
        m.set_prior(3, 0.125, 4);
        let mut buf = Vec::new();
        m.write_snapshot(&mut buf).unwrap();
        let back = HybridVoxelMap::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.num_vertices(), m.num_vertices());
        buf[0] = b'X';
        assert!(HybridVoxelMap::read_snapshot(&mut buf.as_slice()).is_err());
    }
}

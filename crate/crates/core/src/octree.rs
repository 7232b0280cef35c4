//! Log-odds occupancy octree with scan insertion (hit/miss updates along
//! exact grid traversal) and front-to-back raycasting through the node
//! hierarchy.

use crate::geo::LocalPoint;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use thiserror::Error;

pub type VoxelKey = [u32; 3];

const MAGIC: &str = "RBOCTREE";
const DUMP_VERSION: u32 = 1;
const RECORD_BYTES: usize = 1 + 3 * 4 + 8;

#[derive(Debug, Error)]
pub enum OctreeError {
    #[error("invalid octree configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed octree dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OctreeConfig {
    /// Leaf edge length, meters.
    pub resolution: f64,
    pub max_depth: u8,
    pub hit: f64,
    pub miss: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
    pub carve_free_space: bool,
}

impl Default for OctreeConfig {
    fn default() -> Self {
        Self {
            resolution: 0.15,
            max_depth: 16,
            hit: 0.85,
            miss: -0.4,
            clamp_min: -2.0,
            clamp_max: 3.5,
            carve_free_space: true,
        }
    }
}

impl OctreeConfig {
    pub fn validate(&self) -> Result<(), OctreeError> {
        let bad = |m: String| Err(OctreeError::InvalidConfig(m));
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return bad(format!("resolution must be positive, got {}", self.resolution));
        }
        if !(1..=20).contains(&self.max_depth) {
            return bad(format!("max_depth must lie in [1, 20], got {}", self.max_depth));
        }
        if !(self.hit > 0.0 && self.miss < 0.0) {
            return bad(format!("hit must be positive and miss negative, got {} / {}", self.hit, self.miss));
        }
        if !(self.clamp_min < 0.0 && self.clamp_max > 0.0) {
            return bad(format!("clamp interval must straddle 0, got [{}, {}]", self.clamp_min, self.clamp_max));
        }
        Ok(())
    }

    /// Edge length of the root cube.
    pub fn extent(&self) -> f64 {
        self.resolution * f64::from(1u32 << self.max_depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: LocalPoint,
    pub max: LocalPoint,
}

impl Aabb {
    pub fn new(min: LocalPoint, max: LocalPoint) -> Option<Self> {
        (min.east <= max.east && min.north <= max.north && min.up <= max.up).then_some(Self { min, max })
    }

    pub fn contains(&self, p: &LocalPoint) -> bool {
        (self.min.east..=self.max.east).contains(&p.east)
            && (self.min.north..=self.max.north).contains(&p.north)
            && (self.min.up..=self.max.up).contains(&p.up)
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    fn lo(&self, axis: usize) -> f64 {
        [self.min.east, self.min.north, self.min.up][axis]
    }

    fn hi(&self, axis: usize) -> f64 {
        [self.max.east, self.max.north, self.max.up][axis]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: LocalPoint,
    direction: Vector3<f64>,
}

impl Ray {
    /// Normalizes `direction`; `None` for zero or non-finite directions.
    pub fn new(origin: LocalPoint, direction: Vector3<f64>) -> Option<Self> {
        let n = direction.norm();
        (n.is_finite() && n > 0.0 && origin.is_finite()).then(|| Self { origin, direction: direction / n })
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.direction
    }

    pub fn at(&self, t: f64) -> LocalPoint {
        LocalPoint::from_vector(&(self.origin.to_vector() + self.direction * t))
    }
}

/// Slab test. Returns the parametric interval `(t_enter, t_exit)` of the
/// ray inside the (closed) box, with `t_enter` clamped to 0 when the origin
/// is inside. Axis-parallel rays are handled without dividing by zero.
pub fn ray_box_intersect(r: &Ray, b: &Aabb) -> Option<(f64, f64)> {
    let o = [r.origin.east, r.origin.north, r.origin.up];
    let mut t_enter = 0.0f64;
    let mut t_exit = f64::INFINITY;
    for axis in 0..3 {
        let d = r.direction[axis];
        let (lo, hi) = (b.lo(axis), b.hi(axis));
        if d == 0.0 {
            if o[axis] < lo || o[axis] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut t0, mut t1) = ((lo - o[axis]) * inv, (hi - o[axis]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_enter = t_enter.max(t0);
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return None;
        }
    }
    Some((t_enter, t_exit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyState {
    Occupied,
    Free,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occupancy {
    pub probability: f64,
    pub state: OccupancyState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub key: VoxelKey,
    pub center: LocalPoint,
    pub t_enter: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    /// Child node indices by octant; 0 marks an absent child (the root is never a child).
    children: [u32; 8],
    /// Leaf: the voxel's log-odds. Inner node: maximum over its children.
    log_odds: f64,
}

impl Node {
    fn empty() -> Self {
        Self { children: [0; 8], log_odds: f64::NEG_INFINITY }
    }
}

/// Sparse occupancy octree. The root cube starts at `bounds.min` and has
/// edge `resolution * 2^max_depth`; updates are confined to `bounds`.
/// Equality compares the stored tree, not the arena layout.
#[derive(Debug, Clone)]
pub struct OccupancyOctree {
    config: OctreeConfig,
    bounds: Aabb,
    nodes: Vec<Node>,
}

impl PartialEq for OccupancyOctree {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.bounds == other.bounds && self.nodes_preorder() == other.nodes_preorder()
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn octant(key: &VoxelKey, shift: u32) -> usize {
    (((key[0] >> shift) & 1) | (((key[1] >> shift) & 1) << 1) | (((key[2] >> shift) & 1) << 2)) as usize
}

impl OccupancyOctree {
    pub fn new(config: OctreeConfig, bounds: Aabb) -> Result<Self, OctreeError> {
        config.validate()?;
        let extent = config.extent();
        let size = [
            bounds.max.east - bounds.min.east,
            bounds.max.north - bounds.min.north,
            bounds.max.up - bounds.min.up,
        ];
        if !bounds.min.is_finite() || !bounds.max.is_finite() || size.iter().any(|s| *s < 0.0) {
            return Err(OctreeError::InvalidConfig(format!("malformed bounds {bounds:?}")));
        }
        if size.iter().any(|s| *s > extent) {
            return Err(OctreeError::InvalidConfig(format!(
                "bounds {size:?} exceed the root cube edge {extent} m (resolution {} x 2^{})",
                config.resolution, config.max_depth
            )));
        }
        Ok(Self { config, bounds, nodes: vec![Node::empty()] })
    }

    pub fn config(&self) -> &OctreeConfig {
        &self.config
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn resolution(&self) -> f64 {
        self.config.resolution
    }

    pub fn max_depth(&self) -> u8 {
        self.config.max_depth
    }

    /// Number of stored nodes, including the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes[0].children.iter().all(|c| *c == 0)
    }

    fn root_min(&self) -> Vector3<f64> {
        self.bounds.min.to_vector()
    }

    fn cells_per_axis(&self) -> u32 {
        1u32 << self.config.max_depth
    }

    /// Box of the node at `depth` with per-axis index `key` (in cells of that depth).
    pub fn node_box(&self, depth: u8, key: VoxelKey) -> Aabb {
        let size = self.config.resolution * f64::from(1u32 << (self.config.max_depth - depth));
        let o = self.root_min();
        let lo = Vector3::new(
            o.x + f64::from(key[0]) * size,
            o.y + f64::from(key[1]) * size,
            o.z + f64::from(key[2]) * size,
        );
        let hi = Vector3::new(
            o.x + f64::from(key[0] + 1) * size,
            o.y + f64::from(key[1] + 1) * size,
            o.z + f64::from(key[2] + 1) * size,
        );
        Aabb { min: LocalPoint::from_vector(&lo), max: LocalPoint::from_vector(&hi) }
    }

    pub fn voxel_center(&self, key: VoxelKey) -> LocalPoint {
        let b = self.node_box(self.config.max_depth, key);
        LocalPoint::new(
            (b.min.east + b.max.east) / 2.0,
            (b.min.north + b.max.north) / 2.0,
            (b.min.up + b.max.up) / 2.0,
        )
    }

    /// Leaf key of `p`, or `None` outside the root cube.
    pub fn key_of(&self, p: &LocalPoint) -> Option<VoxelKey> {
        let rel = (p.to_vector() - self.root_min()) / self.config.resolution;
        let n = f64::from(self.cells_per_axis());
        let mut key = [0u32; 3];
        for axis in 0..3 {
            let c = rel[axis].floor();
            if !(0.0..n).contains(&c) {
                return None;
            }
            key[axis] = c as u32;
        }
        Some(key)
    }

    /// Largest voxel index per axis whose voxel intersects `bounds`.
    fn last_key(&self) -> VoxelKey {
        let size = self.bounds.max.to_vector() - self.bounds.min.to_vector();
        let top = f64::from(self.cells_per_axis() - 1);
        let mut key = [0u32; 3];
        for axis in 0..3 {
            key[axis] = ((size[axis] / self.config.resolution).ceil() - 1.0).clamp(0.0, top) as u32;
        }
        key
    }

    /// Leaf key of `p`, clamped to the voxels covering `bounds`.
    fn clamped_key(&self, p: &LocalPoint) -> VoxelKey {
        let rel = (p.to_vector() - self.root_min()) / self.config.resolution;
        let last = self.last_key();
        let mut key = [0u32; 3];
        for axis in 0..3 {
            key[axis] = rel[axis].floor().clamp(0.0, f64::from(last[axis])) as u32;
        }
        key
    }

    fn leaf_index(&self, key: &VoxelKey) -> Option<usize> {
        let mut idx = 0usize;
        for level in 0..self.config.max_depth {
            let shift = u32::from(self.config.max_depth - 1 - level);
            let child = self.nodes[idx].children[octant(key, shift)];
            if child == 0 {
                return None;
            }
            idx = child as usize;
        }
        Some(idx)
    }

    /// Stored log-odds of a voxel, `None` if never updated.
    pub fn log_odds(&self, key: &VoxelKey) -> Option<f64> {
        self.leaf_index(key).map(|i| self.nodes[i].log_odds)
    }

    fn modify_leaf(&mut self, key: &VoxelKey, f: impl FnOnce(Option<f64>) -> f64) {
        let depth = self.config.max_depth;
        let mut path = Vec::with_capacity(usize::from(depth) + 1);
        let mut idx = 0usize;
        path.push(idx);
        let mut created = false;
        for level in 0..depth {
            let shift = u32::from(depth - 1 - level);
            let slot = octant(key, shift);
            let mut child = self.nodes[idx].children[slot];
            if child == 0 {
                self.nodes.push(Node::empty());
                child = (self.nodes.len() - 1) as u32;
                self.nodes[idx].children[slot] = child;
                created = true;
            }
            idx = child as usize;
            path.push(idx);
        }
        let previous = if created { None } else { Some(self.nodes[idx].log_odds) };
        self.nodes[idx].log_odds = f(previous).clamp(self.config.clamp_min, self.config.clamp_max);
        for &inner in path.iter().rev().skip(1) {
            let max = self.nodes[inner]
                .children
                .iter()
                .filter(|c| **c != 0)
                .map(|c| self.nodes[*c as usize].log_odds)
                .fold(f64::NEG_INFINITY, f64::max);
            self.nodes[inner].log_odds = max;
        }
    }

    /// Adds `delta` to a voxel's log-odds (starting from 0), clamped.
    pub fn update_voxel(&mut self, key: &VoxelKey, delta: f64) {
        self.modify_leaf(key, |old| old.unwrap_or(0.0) + delta);
    }

    /// Overwrites a voxel's log-odds (clamped).
    pub fn set_log_odds(&mut self, key: &VoxelKey, value: f64) {
        self.modify_leaf(key, |_| value);
    }

    pub fn query_occupancy(&self, p: &LocalPoint) -> Occupancy {
        match self.key_of(p).and_then(|k| self.log_odds(&k)) {
            None => Occupancy { probability: 0.5, state: OccupancyState::Unknown },
            Some(l) => Occupancy {
                probability: logistic(l),
                state: if l > 0.0 { OccupancyState::Occupied } else { OccupancyState::Free },
            },
        }
    }

    /// Integrates one scan. Each voxel is updated at most once per scan:
    /// endpoint voxels get a hit, voxels crossed on the way get a miss
    /// unless they are also an endpoint. Points outside `bounds` are clipped
    /// to the bound surface and only carve free space.
    pub fn insert_scan(&mut self, sensor_origin: &LocalPoint, points: &[LocalPoint]) {
        let mut hits = BTreeSet::new();
        let mut free = BTreeSet::new();
        for p in points {
            if !p.is_finite() {
                continue;
            }
            let delta = p.to_vector() - sensor_origin.to_vector();
            let length = delta.norm();
            let inside = self.bounds.contains(p);
            let Some(ray) = Ray::new(*sensor_origin, delta) else {
                if inside {
                    hits.insert(self.clamped_key(p));
                }
                continue;
            };
            let Some((t0, t1)) = ray_box_intersect(&ray, &self.bounds) else { continue };
            if t0 > length {
                continue;
            }
            let t_end = t1.min(length);
            if self.config.carve_free_space {
                let end_key = inside.then(|| self.clamped_key(p));
                for k in self.traverse(&ray, t0, t_end) {
                    if Some(k) != end_key {
                        free.insert(k);
                    }
                }
            }
            if inside {
                hits.insert(self.clamped_key(p));
            }
        }
        for k in free.difference(&hits) {
            self.update_voxel(k, self.config.miss);
        }
        for k in &hits {
            self.update_voxel(k, self.config.hit);
        }
    }

    /// Voxels crossed by the ray between `t_start` and `t_end`, in order,
    /// by integer grid stepping. At corner and edge crossings the next voxel
    /// is the lexicographically smallest (x, y, z) candidate.
    pub fn traverse(&self, ray: &Ray, t_start: f64, t_end: f64) -> Vec<VoxelKey> {
        let res = self.config.resolution;
        let root = self.root_min();
        let d = ray.direction();
        let o = ray.origin.to_vector();
        let mut current = self.clamped_key(&ray.at(t_start));
        let end = self.clamped_key(&ray.at(t_end));
        let last = self.last_key().map(i64::from);

        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for axis in 0..3 {
            if d[axis] > 0.0 {
                step[axis] = 1;
                let boundary = root[axis] + f64::from(current[axis] + 1) * res;
                t_max[axis] = (boundary - o[axis]) / d[axis];
                t_delta[axis] = res / d[axis];
            } else if d[axis] < 0.0 {
                step[axis] = -1;
                let boundary = root[axis] + f64::from(current[axis]) * res;
                t_max[axis] = (boundary - o[axis]) / d[axis];
                t_delta[axis] = -res / d[axis];
            }
        }

        let mut out = vec![current];
        let limit = 3 * (self.cells_per_axis() as usize) + 3;
        while current != end && out.len() < limit {
            let t_next = t_max.iter().copied().fold(f64::INFINITY, f64::min);
            if !(t_next <= t_end) {
                break;
            }
            // among the axes crossing at t_next, enter the smallest neighbour
            let mut chosen: Option<(usize, [i64; 3])> = None;
            for axis in 0..3 {
                if t_max[axis] == t_next {
                    let mut cand = [i64::from(current[0]), i64::from(current[1]), i64::from(current[2])];
                    cand[axis] += step[axis];
                    if chosen.is_none_or(|(_, best)| cand < best) {
                        chosen = Some((axis, cand));
                    }
                }
            }
            let Some((axis, cand)) = chosen else { break };
            if cand[axis] < 0 || cand[axis] > last[axis] {
                break;
            }
            current = [cand[0] as u32, cand[1] as u32, cand[2] as u32];
            t_max[axis] += t_delta[axis];
            out.push(current);
        }
        out
    }

    /// Centre of the first occupied voxel along the ray whose entry point
    /// lies within `max_range`; ties on entry go to the smallest key.
    pub fn raycast_first_occupied(&self, ray: &Ray, max_range: f64) -> Option<RayHit> {
        if !(max_range > 0.0) {
            return None;
        }
        let mut best: Option<(f64, VoxelKey)> = None;
        self.search(ray, max_range, 0, 0, [0, 0, 0], &mut best);
        best.map(|(t_enter, key)| RayHit { key, center: self.voxel_center(key), t_enter })
    }

    fn search(&self, ray: &Ray, max_range: f64, idx: usize, depth: u8, key: VoxelKey, best: &mut Option<(f64, VoxelKey)>) {
        let node = &self.nodes[idx];
        if !(node.log_odds > 0.0) {
            return;
        }
        let Some((t0, _)) = ray_box_intersect(ray, &self.node_box(depth, key)) else { return };
        if t0 > max_range {
            return;
        }
        if let Some((bt, _)) = best {
            if t0 > *bt {
                return;
            }
        }
        if depth == self.config.max_depth {
            let better = match best {
                None => true,
                Some((bt, bk)) => t0 < *bt || (t0 == *bt && key < *bk),
            };
            if better {
                *best = Some((t0, key));
            }
            return;
        }
        let mut order: Vec<(f64, VoxelKey, usize)> = Vec::with_capacity(8);
        for (slot, &child) in node.children.iter().enumerate() {
            if child == 0 || !(self.nodes[child as usize].log_odds > 0.0) {
                continue;
            }
            let ck = [
                key[0] * 2 + (slot as u32 & 1),
                key[1] * 2 + ((slot as u32 >> 1) & 1),
                key[2] * 2 + ((slot as u32 >> 2) & 1),
            ];
            if let Some((ct0, _)) = ray_box_intersect(ray, &self.node_box(depth + 1, ck)) {
                if ct0 <= max_range {
                    order.push((ct0, ck, child as usize));
                }
            }
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, ck, child) in order {
            self.search(ray, max_range, child, depth + 1, ck, best);
        }
    }

    /// Every stored node in pre-order as `(depth, key, log_odds)`; children
    /// are visited in octant order (bit 0 = east, bit 1 = north, bit 2 = up).
    pub fn nodes_preorder(&self) -> Vec<(u8, VoxelKey, f64)> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(0usize, 0u8, [0u32; 3])];
        while let Some((idx, depth, key)) = stack.pop() {
            out.push((depth, key, self.nodes[idx].log_odds));
            for slot in (0..8).rev() {
                let child = self.nodes[idx].children[slot];
                if child != 0 {
                    let s = slot as u32;
                    let ck = [key[0] * 2 + (s & 1), key[1] * 2 + ((s >> 1) & 1), key[2] * 2 + ((s >> 2) & 1)];
                    stack.push((child as usize, depth + 1, ck));
                }
            }
        }
        out
    }

    /// Stored leaves as `(key, log_odds)` in pre-order.
    pub fn leaves(&self) -> Vec<(VoxelKey, f64)> {
        let depth = self.config.max_depth;
        self.nodes_preorder()
            .into_iter()
            .filter(|(d, _, _)| *d == depth)
            .map(|(_, k, l)| (k, l))
            .collect()
    }

    /// Writes the map dump: a text header terminated by an empty line, then
    /// `count` little-endian records of 21 bytes:
    /// `depth: u8 | x: u32 | y: u32 | z: u32 | log_odds: f64`.
    /// The root (depth 0) record carries `-inf` log-odds when the tree is empty.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<(), OctreeError> {
        let records = self.nodes_preorder();
        let c = &self.config;
        let (lo, hi) = (self.bounds.min, self.bounds.max);
        writeln!(w, "{MAGIC} {DUMP_VERSION}")?;
        writeln!(w, "resolution {:?}", c.resolution)?;
        writeln!(w, "max_depth {}", c.max_depth)?;
        writeln!(w, "bounds {:?} {:?} {:?} {:?} {:?} {:?}", lo.east, lo.north, lo.up, hi.east, hi.north, hi.up)?;
        writeln!(w, "log_odds {:?} {:?} {:?} {:?}", c.hit, c.miss, c.clamp_min, c.clamp_max)?;
        writeln!(w, "carve {}", u8::from(c.carve_free_space))?;
        writeln!(w, "count {}", records.len())?;
        writeln!(w)?;
        let mut buf = Vec::with_capacity(records.len() * RECORD_BYTES);
        for (depth, key, l) in records {
            buf.push(depth);
            for k in key {
                buf.extend_from_slice(&k.to_le_bytes());
            }
            buf.extend_from_slice(&l.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dump<R: BufRead>(mut r: R) -> Result<Self, OctreeError> {
        let fmt = |m: &str| OctreeError::Format(m.to_string());
        let mut header = Vec::new();
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(fmt("unexpected end of header"));
            }
            let line = line.trim_end_matches(['\n', '\r']).to_string();
            if line.is_empty() {
                break;
            }
            header.push(line);
        }
        let field = |name: &str| -> Result<Vec<String>, OctreeError> {
            header
                .iter()
                .find_map(|l| {
                    let mut parts = l.split_whitespace();
                    (parts.next() == Some(name)).then(|| parts.map(str::to_string).collect())
                })
                .ok_or_else(|| OctreeError::Format(format!("missing header field '{name}'")))
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| OctreeError::Format(format!("bad number '{s}'")));
        let version = field(MAGIC)?;
        if version.first().map(String::as_str) != Some("1") {
            return Err(OctreeError::Format(format!("unsupported dump version {version:?}")));
        }
        let b = field("bounds")?.iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
        let lo = field("log_odds")?.iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
        if b.len() != 6 || lo.len() != 4 {
            return Err(fmt("bounds needs 6 values and log_odds 4"));
        }
        let config = OctreeConfig {
            resolution: num(&field("resolution")?.concat())?,
            max_depth: field("max_depth")?.concat().parse().map_err(|_| fmt("bad max_depth"))?,
            hit: lo[0],
            miss: lo[1],
            clamp_min: lo[2],
            clamp_max: lo[3],
            carve_free_space: field("carve")?.concat() == "1",
        };
        let count: usize = field("count")?.concat().parse().map_err(|_| fmt("bad count"))?;
        let bounds = Aabb::new(LocalPoint::new(b[0], b[1], b[2]), LocalPoint::new(b[3], b[4], b[5]))
            .ok_or_else(|| fmt("inverted bounds"))?;
        let mut tree = Self::new(config, bounds)?;

        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != count * RECORD_BYTES {
            return Err(OctreeError::Format(format!(
                "expected {} record bytes, found {}",
                count * RECORD_BYTES,
                body.len()
            )));
        }
        let mut records = Vec::with_capacity(count);
        for chunk in body.chunks_exact(RECORD_BYTES) {
            let u = |i: usize| u32::from_le_bytes(chunk[i..i + 4].try_into().unwrap());
            let l = f64::from_le_bytes(chunk[13..21].try_into().unwrap());
            records.push((chunk[0], [u(1), u(5), u(9)], l));
        }
        for (depth, key, l) in &records {
            if *depth == tree.config.max_depth {
                tree.set_log_odds(key, *l);
            }
        }
        if tree.nodes_preorder() != records {
            return Err(fmt("inner nodes inconsistent with leaves"));
        }
        Ok(tree)
    }
}


#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Aabb {
        Aabb::new(LocalPoint::new(0.0, 0.0, 0.0), LocalPoint::new(1.0, 1.0, 1.0)).unwrap()
    }

    fn small_tree(depth: u8) -> OccupancyOctree {
        let cfg = OctreeConfig { max_depth: depth, ..OctreeConfig::default() };
        let edge = cfg.extent();
        OccupancyOctree::new(cfg, Aabb::new(LocalPoint::ORIGIN, LocalPoint::new(edge, edge, edge)).unwrap()).unwrap()
    }

    fn p(e: f64, n: f64, u: f64) -> LocalPoint {
        LocalPoint::new(e, n, u)
    }

    #[test]
    fn slab_straight_down() {
        let r = Ray::new(p(0.5, 0.5, 10.0), Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(ray_box_intersect(&r, &unit_box()), Some((9.0, 10.0)));
    }

    #[test]
    fn slab_parallel_outside_misses() {
        let r = Ray::new(p(2.0, 0.5, 0.5), Vector3::new(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(ray_box_intersect(&r, &unit_box()), None);
        // parallel and inside the slab: hits
        let r = Ray::new(p(0.5, -1.0, 0.5), Vector3::new(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(ray_box_intersect(&r, &unit_box()), Some((1.0, 2.0)));
    }

    #[test]
    fn slab_origin_inside_and_behind() {
        let r = Ray::new(p(0.5, 0.5, 0.5), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(ray_box_intersect(&r, &unit_box()), Some((0.0, 0.5)));
        let r = Ray::new(p(2.0, 0.5, 0.5), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(ray_box_intersect(&r, &unit_box()), None);
    }

    #[test]
    fn slab_agrees_with_dense_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let res = 0.15;
        let step = res / 100.0;
        for _ in 0..200 {
            let lo = p(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let b = Aabb::new(lo, p(lo.east + rng.random_range(0.2..1.0), lo.north + rng.random_range(0.2..1.0), lo.up + rng.random_range(0.2..1.0))).unwrap();
            let o = p(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let r = Ray::new(o, Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).unwrap();
            let exact = ray_box_intersect(&r, &b);
            let sampled = sampled_interval(&r, &b, 6.0, step);
            match (exact, sampled) {
                (Some((t0, t1)), Some((s0, s1))) => {
                    assert!(t1 >= t0 && t0 >= 0.0);
                    assert!((t0 - s0).abs() <= step && (t1 - s1).abs() <= step, "{exact:?} vs {sampled:?}");
                }
                (None, None) => {}
                // a grazing hit shorter than one sampling step can be missed
                (Some((t0, t1)), None) => assert!(t1 - t0 < step),
                (None, Some(s)) => panic!("sampling found {s:?}, slab test missed"),
            }
        }
    }

    #[test]
    fn empty_scan_is_noop() {
        let mut t = small_tree(5);
        let before = t.clone();
        t.insert_scan(&p(1.0, 1.0, 1.0), &[]);
        assert_eq!(t, before);
        assert!(t.is_empty());
    }

    #[test]
    fn single_point_hit_and_carve() {
        let mut t = small_tree(6);
        let origin = p(1.01, 2.02, 1.03);
        let target = p(2.01, 2.02, 1.03);
        t.insert_scan(&origin, &[target]);
        let hit = t.query_occupancy(&target);
        assert_eq!(hit.state, OccupancyState::Occupied);
        assert!((hit.probability - 1.0 / (1.0 + (-0.85f64).exp())).abs() < 1e-12);
        for i in 0..6 {
            let q = p(1.01 + 0.15 * i as f64, 2.02, 1.03);
            let o = t.query_occupancy(&q);
            assert_eq!(o.state, OccupancyState::Free, "step {i}");
            assert!(o.probability < 0.5);
        }
    }

    #[test]
    fn analytic_log_odds() {
        let mut t = small_tree(4);
        let k = [3, 4, 5];
        t.update_voxel(&k, 0.85);
        let c = t.voxel_center(k);
        assert!((t.query_occupancy(&c).probability - 0.7006).abs() < 1e-4);
        t.update_voxel(&k, -0.4);
        assert!((t.log_odds(&k).unwrap() - 0.45).abs() < 1e-12);
        assert!((t.query_occupancy(&c).probability - 0.6106).abs() < 1e-4);
        assert_eq!(t.query_occupancy(&p(0.01, 0.01, 0.01)).state, OccupancyState::Unknown);
        assert_eq!(t.query_occupancy(&p(-5.0, 0.0, 0.0)).state, OccupancyState::Unknown);
    }

    #[test]
    fn repeated_hits_saturate() {
        let mut t = small_tree(5);
        let target = p(2.0, 2.0, 2.0);
        for _ in 0..20 {
            t.insert_scan(&p(0.5, 0.5, 0.5), &[target]);
        }
        assert_eq!(t.log_odds(&t.key_of(&target).unwrap()), Some(3.5));
        let carved = t.key_of(&p(0.8, 0.8, 0.8)).unwrap();
        assert_eq!(t.log_odds(&carved), Some(-2.0));
    }

    #[test]
    fn carving_can_be_disabled() {
        let cfg = OctreeConfig { max_depth: 5, carve_free_space: false, ..OctreeConfig::default() };
        let e = cfg.extent();
        let mut t = OccupancyOctree::new(cfg, Aabb::new(LocalPoint::ORIGIN, p(e, e, e)).unwrap()).unwrap();
        t.insert_scan(&p(0.1, 0.1, 0.1), &[p(3.0, 0.1, 0.1)]);
        assert_eq!(t.leaves().len(), 1);
    }

    #[test]
    fn out_of_bounds_point_only_carves() {
        let cfg = OctreeConfig { max_depth: 6, ..OctreeConfig::default() };
        let bounds = Aabb::new(LocalPoint::ORIGIN, p(3.0, 3.0, 3.0)).unwrap();
        let mut t = OccupancyOctree::new(cfg, bounds).unwrap();
        t.insert_scan(&p(1.0, 1.0, 1.0), &[p(10.0, 1.0, 1.0)]);
        assert!(t.leaves().iter().all(|(_, l)| *l < 0.0));
        assert!(!t.leaves().is_empty());
        // nothing beyond the bound surface was touched
        assert!(t.leaves().iter().all(|(k, _)| bounds.contains(&t.voxel_center(*k))));
    }

    #[test]
    fn traverse_prefers_smallest_neighbour_at_corners() {
        let t = small_tree(4);
        // diagonal through voxel corners in the xy plane
        let r = Ray::new(p(0.075, 0.075, 0.075), Vector3::new(1.0, 1.0, 0.0)).unwrap();
        let keys = t.traverse(&r, 0.0, 0.3);
        assert_eq!(keys[0], [0, 0, 0]);
        assert_eq!(keys[1], [0, 1, 0]);
        assert_eq!(keys[2], [1, 1, 0]);
    }

    #[test]
    fn traverse_has_no_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = small_tree(6);
        for _ in 0..200 {
            let o = p(rng.random_range(0.5..9.0), rng.random_range(0.5..9.0), rng.random_range(0.5..9.0));
            let r = Ray::new(o, Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).unwrap();
            let keys = t.traverse(&r, 0.0, 3.0);
            for w in keys.windows(2) {
                let dist: i64 = (0..3).map(|a| (i64::from(w[0][a]) - i64::from(w[1][a])).abs()).sum();
                assert_eq!(dist, 1, "{:?}", w);
            }
        }
    }

    #[test]
    fn raycast_empty_and_single_voxel() {
        let mut t = small_tree(6);
        let r = Ray::new(p(1.0, 1.0, 1.0), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(t.raycast_first_occupied(&r, 20.0).is_none());
        let target = t.key_of(&p(3.0, 1.0, 1.0)).unwrap();
        t.set_log_odds(&target, 2.0);
        let hit = t.raycast_first_occupied(&r, 20.0).unwrap();
        assert_eq!(hit.key, target);
        assert_eq!(hit.center, t.voxel_center(target));
        assert!(t.raycast_first_occupied(&r, 1.5).is_none());
        // free voxels do not stop the ray
        let before = t.key_of(&p(2.0, 1.0, 1.0)).unwrap();
        t.set_log_odds(&before, -1.0);
        assert_eq!(t.raycast_first_occupied(&r, 20.0).unwrap().key, target);
    }

    #[test]
    fn raycast_matches_marching_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut t = small_tree(5);
        let n = 32u32;
        for _ in 0..300 {
            let k = [rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n)];
            t.set_log_odds(&k, 1.0);
        }
        let edge = t.config().extent();
        for _ in 0..300 {
            let o = p(rng.random_range(0.0..edge), rng.random_range(0.0..edge), rng.random_range(0.0..edge));
            let r = Ray::new(o, Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).unwrap();
            let got = t.raycast_first_occupied(&r, 10.0).map(|h| h.key);
            let want = march_first_occupied(&t, &r, 10.0, t.resolution() / 10.0);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn hierarchy_boxes_are_exact_octants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = OctreeConfig { max_depth: 7, ..OctreeConfig::default() };
        let lo = p(-3.3, 101.7, -0.9);
        let e = cfg.extent();
        let hi = p(lo.east + e - 1e-9, lo.north + e - 1e-9, lo.up + e - 1e-9);
        let mut t = OccupancyOctree::new(cfg, Aabb::new(lo, hi).unwrap()).unwrap();
        for _ in 0..50 {
            let q = p(lo.east + rng.random_range(0.0..e), lo.north + rng.random_range(0.0..e), lo.up + rng.random_range(0.0..e));
            t.insert_scan(&p(lo.east + 1.0, lo.north + 1.0, lo.up + 1.0), &[q]);
        }
        let nodes = t.nodes_preorder();
        for (depth, key, _) in &nodes {
            if *depth == t.max_depth() {
                continue;
            }
            let parent = t.node_box(*depth, *key);
            let mid = t.node_box(*depth + 1, [key[0] * 2 + 1, key[1] * 2 + 1, key[2] * 2 + 1]).min;
            for slot in 0..8u32 {
                let ck = [key[0] * 2 + (slot & 1), key[1] * 2 + ((slot >> 1) & 1), key[2] * 2 + ((slot >> 2) & 1)];
                let child = t.node_box(*depth + 1, ck);
                assert!(parent.contains_box(&child));
                let expect_min_e = if slot & 1 == 0 { parent.min.east } else { mid.east };
                let expect_max_e = if slot & 1 == 0 { mid.east } else { parent.max.east };
                assert_eq!(child.min.east.to_bits(), expect_min_e.to_bits());
                assert_eq!(child.max.east.to_bits(), expect_max_e.to_bits());
            }
        }
    }

    #[test]
    fn inner_nodes_hold_child_maximum() {
        let mut t = small_tree(4);
        t.set_log_odds(&[1, 1, 1], -1.0);
        t.set_log_odds(&[1, 1, 0], 0.7);
        let root = t.nodes_preorder()[0];
        assert_eq!(root.0, 0);
        assert_eq!(root.2, 0.7);
    }

    #[test]
    fn dump_round_trip() {
        let mut t = small_tree(6);
        t.insert_scan(&p(1.0, 1.0, 1.0), &[p(4.0, 2.0, 1.5), p(2.0, 5.0, 0.2), p(50.0, 1.0, 1.0)]);
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        let back = OccupancyOctree::read_dump(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back, t);
        let header_end = buf.windows(2).position(|w| w == b"\n\n").unwrap() + 2;
        assert_eq!((buf.len() - header_end) % RECORD_BYTES, 0);
        // truncated body is rejected
        assert!(OccupancyOctree::read_dump(std::io::Cursor::new(&buf[..buf.len() - 3])).is_err());
    }

    #[test]
    fn bounds_larger_than_root_rejected() {
        let cfg = OctreeConfig { max_depth: 2, ..OctreeConfig::default() };
        assert!(OccupancyOctree::new(cfg, Aabb::new(LocalPoint::ORIGIN, p(1.0, 1.0, 1.0)).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn scan_order_does_not_matter(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts: Vec<LocalPoint> = (0..25)
                .map(|_| p(rng.random_range(0.0..9.0), rng.random_range(0.0..9.0), rng.random_range(0.0..9.0)))
                .collect();
            let origin = p(4.5, 4.5, 4.5);
            let mut a = small_tree(6);
            a.insert_scan(&origin, &pts);
            pts.reverse();
            pts.rotate_left(7);
            let mut b = small_tree(6);
            b.insert_scan(&origin, &pts);
            prop_assert_eq!(a.leaves().into_iter().collect::<std::collections::BTreeMap<_, _>>(),
                            b.leaves().into_iter().collect::<std::collections::BTreeMap<_, _>>());
        }

        #[test]
        fn stored_log_odds_are_clamped(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = small_tree(5);
            for _ in 0..10 {
                let pts: Vec<_> = (0..10).map(|_| p(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..4.0))).collect();
                t.insert_scan(&p(2.0, 2.0, 2.0), &pts);
            }
            for (_, l) in t.leaves() {
                prop_assert!((-2.0..=3.5).contains(&l));
            }
        }
    }
}

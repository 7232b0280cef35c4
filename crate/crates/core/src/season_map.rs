//! Within-season mapping: observations from one deployment are grouped into
//! landmark instances, and semi-static instances are tied to the static
//! ConMod anchors around them.

use crate::geo::{GeoCoordinate, GeoError, LocalFrame, LocalPoint};
use crate::octree::{Aabb, OccupancyOctree, OctreeConfig, OctreeError};
use crate::perception::{
    project_down_facing, project_front_facing, ClassLabel, FrameView, LandmarkObservation, MaskClassifier,
    PerceptionConfig, PerceptionError, DESCRIPTOR_LEN,
};
use crate::session::{CameraKind, Session, SessionError};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeasonMapError {
    #[error("session has no usable frames ({frames} frames, {skipped} skipped)")]
    NoUsableFrames { frames: usize, skipped: usize },
    #[error("map has no static anchors")]
    NoAnchors,
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Octree(#[from] OctreeError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorOffset {
    pub conmod_id: u64,
    /// Instance position minus anchor position, meters.
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkInstance {
    pub instance_id: u64,
    pub class_label: ClassLabel,
    pub mean_position: LocalPoint,
    pub mean_geo: GeoCoordinate,
    /// Population covariance of member positions.
    pub position_spread: Matrix3<f64>,
    pub descriptor_mean: Vec<f64>,
    pub observations: Vec<LandmarkObservation>,
    pub anchor_offsets: Vec<AnchorOffset>,
}

impl LandmarkInstance {
    fn from_members(members: Vec<LandmarkObservation>) -> Self {
        let n = members.len() as f64;
        let mean = members.iter().fold(Vector3::zeros(), |acc, o| acc + o.position.to_vector()) / n;
        let spread = members.iter().fold(Matrix3::zeros(), |acc, o| {
            let d = o.position.to_vector() - mean;
            acc + d * d.transpose()
        }) / n;
        let len = members[0].descriptor.len();
        let mut descriptor_mean = vec![0.0; len];
        for o in &members {
            for (acc, x) in descriptor_mean.iter_mut().zip(&o.descriptor) {
                *acc += x;
            }
        }
        descriptor_mean.iter_mut().for_each(|x| *x /= n);
        Self {
            instance_id: 0,
            class_label: members[0].class_label,
            mean_position: LocalPoint::from_vector(&mean),
            mean_geo: members[0].geo,
            position_spread: spread,
            descriptor_mean,
            observations: members,
            anchor_offsets: Vec::new(),
        }
    }

    /// Horizontal (east, north) block of the spread.
    pub fn horizontal_spread(&self) -> nalgebra::Matrix2<f64> {
        self.position_spread.fixed_view::<2, 2>(0, 0).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySample {
    pub frame_id: u64,
    pub timestamp: f64,
    pub camera_id: String,
    pub position: LocalPoint,
    /// Ground point on the optical axis, when the camera looks down.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub footprint: Option<LocalPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeasonMap {
    pub session_id: String,
    pub season_tag: String,
    pub season_time: f64,
    pub frame: LocalFrame,
    pub instances: Vec<LandmarkInstance>,
    pub static_anchors: Vec<LandmarkInstance>,
    pub trajectory: Vec<TrajectorySample>,
}

impl SeasonMap {
    pub fn instance(&self, id: u64) -> Option<&LandmarkInstance> {
        self.instances.iter().chain(&self.static_anchors).find(|i| i.instance_id == id)
    }

    pub fn all_instances(&self) -> impl Iterator<Item = &LandmarkInstance> {
        self.instances.iter().chain(&self.static_anchors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    /// Fixed cluster count; `None` selects k by silhouette sweep.
    pub k: Option<usize>,
    pub max_k: usize,
    pub max_iterations: usize,
    pub merge_radius: f64,
    /// Normalized descriptor distance below which clusters may merge.
    pub descriptor_gate: f64,
    /// Per-component scale of the descriptor distance; 0 disables a component.
    pub descriptor_sigmas: Vec<f64>,
    pub seed: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            k: None,
            max_k: 20,
            max_iterations: 100,
            merge_radius: 0.15,
            descriptor_gate: 4.0,
            descriptor_sigmas: vec![0.01, 0.05, 0.05, 0.05, 0.01, 0.01, 0.01, 0.5, 0.0, 15.0],
            seed: 0,
        }
    }
}

/// Normalized Euclidean distance over the enabled components.
pub fn descriptor_distance(a: &[f64], b: &[f64], sigmas: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(sigmas)
        .filter(|(_, s)| **s > 0.0)
        .map(|((x, y), s)| ((x - y) / s).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(p: &Vector3<f64>, centroids: &[Vector3<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// k-means++ seeding. The first centre is uniform; later centres are drawn
/// with probability proportional to squared distance to the nearest chosen
/// centre.
pub fn kmeans_pp_seeds(points: &[Vector3<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        // rounding can leave target past the last weight; fall back to the last eligible point
        let mut pick = d2.iter().rposition(|w| *w > 0.0).expect("positive total");
        for (i, w) in d2.iter().enumerate() {
            acc += w;
            if acc > target && *w > 0.0 {
                pick = i;
                break;
            }
        }
        let c = points[pick];
        centroids.push(c);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
    }
    centroids
}

/// Lloyd iterations from the given centroids. Empty clusters keep their
/// previous centroid. Returns the final assignment.
pub fn lloyd(points: &[Vector3<f64>], mut centroids: Vec<Vector3<f64>>, max_iterations: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..max_iterations {
        let mut sums = vec![Vector3::zeros(); centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l] += p;
            counts[l] += 1;
        }
        for (i, c) in centroids.iter_mut().enumerate() {
            if counts[i] > 0 {
                *c = sums[i] / counts[i] as f64;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// Mean silhouette; singletons score 0, and a single cluster scores 0.
pub fn silhouette(points: &[Vector3<f64>], labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|l| sizes[*l] += 1);
    if sizes.iter().filter(|s| **s > 0).count() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += (p - q).norm();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|c| *c != own && sizes[*c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / points.len() as f64
}

fn kmeans(points: &[Vector3<f64>], k: usize, p: &ClusterParams) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let seeds = kmeans_pp_seeds(points, k, &mut rng);
    lloyd(points, seeds, p.max_iterations)
}

fn distinct_count(points: &[Vector3<f64>]) -> usize {
    let mut keys: Vec<[u64; 3]> = points.iter().map(|v| [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()]).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Groups observations of one class into instances: k-means (k given or
/// chosen by silhouette sweep), then repeated merging of the closest pair
/// of clusters whose centroids lie within `merge_radius` and whose mean
/// descriptors lie within `descriptor_gate`.
pub fn cluster_observations(obs: &[LandmarkObservation], p: &ClusterParams) -> Vec<LandmarkInstance> {
    if obs.is_empty() {
        return Vec::new();
    }
    let points: Vec<Vector3<f64>> = obs.iter().map(|o| o.position.to_vector()).collect();
    let distinct = distinct_count(&points);
    let k_max = p.max_k.max(1).min(distinct);
    let labels = if distinct == 1 {
        vec![0; points.len()]
    } else if let Some(k) = p.k {
        kmeans(&points, k.clamp(1, k_max), p)
    } else {
        let mut best = (0.0, vec![0; points.len()]);
        for k in 2..=k_max {
            let labels = kmeans(&points, k, p);
            let score = silhouette(&points, &labels);
            if score > best.0 {
                best = (score, labels);
            }
        }
        best.1
    };

    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, l) in labels.iter().enumerate() {
        clusters[*l].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    merge_clusters(obs, &mut clusters, p);
    clusters
        .into_iter()
        .map(|members| {
            let mut m: Vec<LandmarkObservation> = members.into_iter().map(|i| obs[i].clone()).collect();
            m.sort_by_key(|o| (o.frame_id, o.mask_id));
            LandmarkInstance::from_members(m)
        })
        .collect()
}

fn merge_clusters(obs: &[LandmarkObservation], clusters: &mut Vec<Vec<usize>>, p: &ClusterParams) {
    let summary = |c: &[usize]| {
        let n = c.len() as f64;
        let centre = c.iter().fold(Vector3::zeros(), |acc, i| acc + obs[*i].position.to_vector()) / n;
        let len = obs[c[0]].descriptor.len();
        let mut desc = vec![0.0; len];
        for i in c {
            for (acc, x) in desc.iter_mut().zip(&obs[*i].descriptor) {
                *acc += x / n;
            }
        }
        (centre, desc)
    };
    loop {
        let summaries: Vec<_> = clusters.iter().map(|c| summary(c)).collect();
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d = (summaries[i].0 - summaries[j].0).norm();
                if d > p.merge_radius {
                    continue;
                }
                if descriptor_distance(&summaries[i].1, &summaries[j].1, &p.descriptor_sigmas) > p.descriptor_gate {
                    continue;
                }
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        let moved = clusters.remove(j);
        clusters[i].extend(moved);
        clusters[i].sort_unstable();
    }
}

/// Single-linkage components: observations are connected when within
/// `radius` of each other. Components are ordered by their first member.
pub fn spatial_components(obs: &[LandmarkObservation], radius: f64) -> Vec<Vec<usize>> {
    let n = obs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let cell = |p: &LocalPoint| ((p.east / radius).floor() as i64, (p.north / radius).floor() as i64);
    let mut grid: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, o) in obs.iter().enumerate() {
        grid.entry(cell(&o.position)).or_default().push(i);
    }
    for (i, o) in obs.iter().enumerate() {
        let (cx, cy) = cell(&o.position);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(list) = grid.get(&(cx + dx, cy + dy)) {
                    for &j in list {
                        if j > i && o.position.distance(&obs[j].position) <= radius {
                            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                            if a != b {
                                parent[a.max(b)] = a.min(b);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShrubParams {
    pub link_radius: f64,
    pub merge_radius: f64,
    /// Front views of one shrub differ in area, so the descriptor gate is off by default.
    pub use_descriptor_gate: bool,
}

impl Default for ShrubParams {
    fn default() -> Self {
        Self { link_radius: 1.0, merge_radius: 0.8, use_descriptor_gate: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub octree: OctreeConfig,
    pub perception: PerceptionConfig,
    pub cluster: ClusterParams,
    /// Observations closer than this may belong to one landmark.
    pub link_radius: f64,
    pub shrub: ShrubParams,
    pub n_anchors: usize,
    /// ConMod instances whose horizontal spread (sqrt of trace) exceeds this are not used as anchors.
    pub conmod_max_spread: f64,
    /// Margin added around scan data when sizing the octree, meters.
    pub scan_margin: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            octree: OctreeConfig::default(),
            perception: PerceptionConfig::default(),
            cluster: ClusterParams::default(),
            link_radius: 0.3,
            shrub: ShrubParams::default(),
            n_anchors: 3,
            conmod_max_spread: 0.30,
            scan_margin: 2.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub frames: usize,
    pub frames_skipped: usize,
    pub masks: usize,
    pub masks_skipped: usize,
    pub observations: usize,
    pub anchors_rejected: usize,
}

#[derive(Debug, Clone)]
pub struct MapOutput {
    pub map: SeasonMap,
    pub octree: Option<OccupancyOctree>,
    pub stats: MapStats,
}

/// Octree from all scans of the session, or `None` without scans.
pub fn build_octree(session: &Session, cfg: &MapConfig) -> Result<Option<OccupancyOctree>, SeasonMapError> {
    let all = session.scans.iter().flat_map(|s| s.points.iter().chain(std::iter::once(&s.origin)));
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in all.filter(|p| p.is_finite()) {
        lo = lo.inf(&p.to_vector());
        hi = hi.sup(&p.to_vector());
    }
    if !(lo.x <= hi.x) {
        return Ok(None);
    }
    let m = Vector3::repeat(cfg.scan_margin);
    let bounds = Aabb::new(LocalPoint::from_vector(&(lo - m)), LocalPoint::from_vector(&(hi + m)))
        .expect("ordered bounds");
    let mut tree = OccupancyOctree::new(cfg.octree.clone(), bounds)?;
    for s in &session.scans {
        tree.insert_scan(&s.origin, &s.points);
    }
    Ok(Some(tree))
}

/// Runs perception on every frame, clusters each class and separates the
/// ConMod anchors. Frames whose masks all fail are skipped and counted.
pub fn build_season_map(
    session: &Session,
    cfg: &MapConfig,
    classifier: &dyn MaskClassifier,
) -> Result<MapOutput, SeasonMapError> {
    session.validate()?;
    let manifest = &session.manifest;
    if manifest.frames.is_empty() {
        return Err(SeasonMapError::NoUsableFrames { frames: 0, skipped: 0 });
    }
    let frame = manifest.local_frame();
    let octree = build_octree(session, cfg)?;
    let masks = session.masks_by_frame();

    let per_frame: Vec<(Vec<LandmarkObservation>, usize, usize)> = manifest
        .frames
        .par_iter()
        .map(|f| {
            let cam = manifest.camera(&f.camera_id).expect("validated camera");
            let view = FrameView {
                intrinsics: &cam.intrinsics,
                pose: &f.pose,
                pose_covariance: &f.pose_covariance,
                timestamp: f.timestamp,
                frame: &frame,
            };
            let list = masks.get(&f.frame_id).map(Vec::as_slice).unwrap_or(&[]);
            let mut out = Vec::new();
            let mut failed = 0;
            for m in list {
                let projected = match cam.kind {
                    CameraKind::DownFacing => project_down_facing(m, &view, f.ground_height, &cfg.perception),
                    CameraKind::FrontFacing => match &octree {
                        Some(t) => project_front_facing(m, &view, t, &cfg.perception),
                        None => Err(PerceptionError::NoHit { max_range: cfg.perception.max_range }),
                    },
                };
                match projected {
                    Ok(mut o) => {
                        if m.class_label.is_none() {
                            let c = classifier.classify(&o.descriptor);
                            o.class_label = c.label;
                            o.confidence = c.confidence;
                        }
                        out.push(o);
                    }
                    Err(e) => {
                        log::debug!("frame {} mask {}: {e}", f.frame_id, m.mask_id);
                        failed += 1;
                    }
                }
            }
            (out, list.len(), failed)
        })
        .collect();

    let mut stats = MapStats { frames: manifest.frames.len(), ..Default::default() };
    let mut observations = Vec::new();
    for (obs, total, failed) in per_frame {
        stats.masks += total;
        stats.masks_skipped += failed;
        if total > 0 && failed == total {
            stats.frames_skipped += 1;
        }
        observations.extend(obs);
    }
    if stats.frames_skipped == stats.frames {
        return Err(SeasonMapError::NoUsableFrames { frames: stats.frames, skipped: stats.frames_skipped });
    }
    if stats.frames_skipped > 0 {
        log::warn!("session {}: skipped {} of {} frames", manifest.session_id, stats.frames_skipped, stats.frames);
    }
    stats.observations = observations.len();
    observations.sort_by_key(|o| (o.frame_id, o.mask_id));

    let mut by_class: BTreeMap<ClassLabel, Vec<LandmarkObservation>> = BTreeMap::new();
    for o in observations {
        by_class.entry(o.class_label).or_default().push(o);
    }
    let jobs: Vec<(ClassLabel, Vec<LandmarkObservation>)> = by_class
        .into_iter()
        .flat_map(|(class, obs)| {
            let radius = if class == ClassLabel::Shrub { cfg.shrub.link_radius } else { cfg.link_radius };
            spatial_components(&obs, radius)
                .into_iter()
                .map(|c| (class, c.into_iter().map(|i| obs[i].clone()).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut instances: Vec<LandmarkInstance> = jobs
        .par_iter()
        .map(|(class, obs)| {
            let mut p = cfg.cluster.clone();
            if *class == ClassLabel::Shrub {
                p.merge_radius = cfg.shrub.merge_radius;
                if !cfg.shrub.use_descriptor_gate {
                    p.descriptor_gate = f64::INFINITY;
                }
            }
            cluster_observations(obs, &p)
        })
        .flatten()
        .collect();

    for inst in &mut instances {
        inst.mean_geo = frame.local_to_geo(&inst.mean_position)?;
    }
    instances.sort_by(|a, b| {
        let key = |i: &LandmarkInstance| {
            (i.class_label, i.mean_position.east, i.mean_position.north, i.observations[0].frame_id, i.observations[0].mask_id)
        };
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
            .then((ka.3, ka.4).cmp(&(kb.3, kb.4)))
    });
    for (i, inst) in instances.iter_mut().enumerate() {
        inst.instance_id = i as u64 + 1;
    }
    let (anchors, mut rest): (Vec<_>, Vec<_>) = instances.into_iter().partition(|i| {
        i.class_label == ClassLabel::Conmod && i.horizontal_spread().trace().sqrt() <= cfg.conmod_max_spread
    });
    stats.anchors_rejected = rest.iter().filter(|i| i.class_label == ClassLabel::Conmod).count();
    rest.sort_by_key(|i| i.instance_id);

    let trajectory = manifest
        .frames
        .iter()
        .map(|f| TrajectorySample {
            frame_id: f.frame_id,
            timestamp: f.timestamp,
            camera_id: f.camera_id.clone(),
            position: f.pose.position,
            footprint: f.footprint_center(),
        })
        .collect();
    let mut map = SeasonMap {
        session_id: manifest.session_id.clone(),
        season_tag: manifest.season_tag.clone(),
        season_time: manifest.season_time,
        frame,
        instances: rest,
        static_anchors: anchors,
        trajectory,
    };
    if !map.static_anchors.is_empty() {
        anchor_to_static(&mut map, cfg.n_anchors)?;
    }
    Ok(MapOutput { map, octree, stats })
}

/// Records, for every non-anchor instance, its offset from each of the
/// `n_anchors` nearest anchors (fewer if fewer exist), sorted by anchor id.
pub fn anchor_to_static(map: &mut SeasonMap, n_anchors: usize) -> Result<(), SeasonMapError> {
    if map.static_anchors.is_empty() {
        return Err(SeasonMapError::NoAnchors);
    }
    let anchors: Vec<(u64, Vector3<f64>)> =
        map.static_anchors.iter().map(|a| (a.instance_id, a.mean_position.to_vector())).collect();
    for inst in &mut map.instances {
        let p = inst.mean_position.to_vector();
        let mut near: Vec<(f64, u64, Vector3<f64>)> = anchors.iter().map(|(id, a)| ((p - a).norm(), *id, p - a)).collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(n_anchors);
        near.sort_by_key(|n| n.1);
        inst.anchor_offsets =
            near.into_iter().map(|(_, id, d)| AnchorOffset { conmod_id: id, offset: [d.x, d.y, d.z] }).collect();
    }
    Ok(())
}

/// Checks that a descriptor has the layout the pipeline expects.
pub fn descriptor_len_ok(d: &[f64]) -> bool {
    d.len() == DESCRIPTOR_LEN
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn obs_at(i: usize, e: f64, n: f64, class: ClassLabel) -> LandmarkObservation {
        LandmarkObservation {
            frame_id: i as u64,
            mask_id: 0,
            timestamp: i as f64,
            class_label: class,
            confidence: 1.0,
            position: LocalPoint::new(e, n, 0.0),
            position_covariance: Matrix3::identity() * 1e-4,
            descriptor: vec![0.01, 0.3, 0.55, 0.22, 0.0, 0.0, 0.0, 1.0, 0.0, 40.0],
            geo: GeoCoordinate::new(38.0, -109.0, 0.0).unwrap(),
        }
    }

    fn two_groups(rng: &mut ChaCha8Rng) -> Vec<LandmarkObservation> {
        (0..20)
            .map(|i| {
                let cx = if i < 10 { 0.0 } else { 5.0 };
                obs_at(i, cx + rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), ClassLabel::Vegetation)
            })
            .collect()
    }

    fn groups_of(instances: &[LandmarkInstance]) -> Vec<Vec<u64>> {
        let mut g: Vec<Vec<u64>> = instances.iter().map(|i| i.observations.iter().map(|o| o.frame_id).collect()).collect();
        g.sort();
        g
    }

    #[test]
    fn two_groups_with_fixed_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = two_groups(&mut rng);
        let p = ClusterParams { k: Some(2), ..Default::default() };
        let inst = cluster_observations(&obs, &p);
        assert_eq!(groups_of(&inst), vec![(0..10).collect::<Vec<_>>(), (10..20).collect()]);
    }

    #[test]
    fn silhouette_sweep_picks_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = two_groups(&mut rng);
        let pts: Vec<Vector3<f64>> = obs.iter().map(|o| o.position.to_vector()).collect();
        // direct silhouette of the true split versus a one-group answer
        let truth: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let direct: f64 = (0..20)
            .map(|i| {
                let own: Vec<f64> = (0..20).filter(|j| *j != i && truth[*j] == truth[i]).map(|j| (pts[i] - pts[j]).norm()).collect();
                let other: Vec<f64> = (0..20).filter(|j| truth[*j] != truth[i]).map(|j| (pts[i] - pts[j]).norm()).collect();
                let a = own.iter().sum::<f64>() / own.len() as f64;
                let b = other.iter().sum::<f64>() / other.len() as f64;
                (b - a) / a.max(b)
            })
            .sum::<f64>()
            / 20.0;
        assert!((silhouette(&pts, &truth) - direct).abs() < 1e-12);
        let inst = cluster_observations(&obs, &ClusterParams::default());
        assert_eq!(inst.len(), 2);
    }

    #[test]
    fn k_clamped_and_coincident_input() {
        let obs: Vec<_> = (0..5).map(|i| obs_at(i, 1.0, 1.0, ClassLabel::Vegetation)).collect();
        let inst = cluster_observations(&obs, &ClusterParams { k: Some(4), ..Default::default() });
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].observations.len(), 5);
        let obs: Vec<_> = (0..3).map(|i| obs_at(i, i as f64 * 3.0, 0.0, ClassLabel::Vegetation)).collect();
        assert_eq!(cluster_observations(&obs, &ClusterParams { k: Some(10), ..Default::default() }).len(), 3);
    }

    /// Textbook Lloyd: assign, recompute, repeat until stable.
    fn reference_lloyd(points: &[Vector3<f64>], init: &[Vector3<f64>]) -> Vec<usize> {
        let mut c = init.to_vec();
        let mut assign = vec![usize::MAX; points.len()];
        for _ in 0..1000 {
            let new: Vec<usize> = points
                .iter()
                .map(|p| {
                    let d: Vec<f64> = c.iter().map(|q| (p - q).norm_squared()).collect();
                    let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
                    d.iter().position(|x| *x == m).unwrap()
                })
                .collect();
            if new == assign {
                break;
            }
            assign = new;
            for (j, cj) in c.iter_mut().enumerate() {
                let members: Vec<&Vector3<f64>> = points.iter().zip(&assign).filter(|(_, a)| **a == j).map(|(p, _)| p).collect();
                if !members.is_empty() {
                    *cj = members.iter().fold(Vector3::zeros(), |s, p| s + *p) / members.len() as f64;
                }
            }
        }
        assign
    }

    #[test]
    fn lloyd_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..50 {
            let n = rng.random_range(5..60);
            let pts: Vec<Vector3<f64>> =
                (0..n).map(|_| Vector3::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), 0.0)).collect();
            let k = rng.random_range(1..6.min(n));
            let mut seed_rng = ChaCha8Rng::seed_from_u64(trial);
            let init = kmeans_pp_seeds(&pts, k, &mut seed_rng);
            assert_eq!(lloyd(&pts, init.clone(), 1000), reference_lloyd(&pts, &init));
        }
    }

    #[test]
    fn merge_respects_descriptor_gate() {
        let mut a = obs_at(0, 0.0, 0.0, ClassLabel::Vegetation);
        let mut b = obs_at(1, 0.1, 0.0, ClassLabel::Vegetation);
        let p = ClusterParams { k: Some(2), ..Default::default() };
        assert_eq!(cluster_observations(&[a.clone(), b.clone()], &p).len(), 1);
        a.descriptor[1] = 0.1;
        b.descriptor[1] = 0.9;
        assert_eq!(cluster_observations(&[a, b], &p).len(), 2);
    }

    #[test]
    fn anchor_offsets() {
        let anchor = LandmarkInstance::from_members(vec![obs_at(0, 0.0, 0.0, ClassLabel::Conmod)]);
        let plant = LandmarkInstance::from_members(vec![obs_at(1, 1.0, 0.0, ClassLabel::Vegetation)]);
        let mut map = SeasonMap {
            session_id: "s".into(),
            season_tag: "t".into(),
            season_time: 0.0,
            frame: LocalFrame::new(GeoCoordinate::new(38.0, -109.0, 0.0).unwrap()).unwrap(),
            instances: vec![LandmarkInstance { instance_id: 2, ..plant }],
            static_anchors: vec![LandmarkInstance { instance_id: 1, ..anchor.clone() }],
            trajectory: vec![],
        };
        anchor_to_static(&mut map, 3).unwrap();
        assert_eq!(map.instances[0].anchor_offsets, vec![AnchorOffset { conmod_id: 1, offset: [1.0, 0.0, 0.0] }]);
        let mut second = anchor;
        second.instance_id = 7;
        second.mean_position = LocalPoint::new(0.0, 4.0, 0.0);
        map.static_anchors.push(second);
        anchor_to_static(&mut map, 3).unwrap();
        assert_eq!(map.instances[0].anchor_offsets.len(), 2);
        map.static_anchors.clear();
        assert!(matches!(anchor_to_static(&mut map, 3), Err(SeasonMapError::NoAnchors)));
    }

    #[test]
    fn components_split_far_groups() {
        let obs: Vec<_> = [0.0, 0.2, 0.4, 2.0, 2.1].iter().enumerate().map(|(i, e)| obs_at(i, *e, 0.0, ClassLabel::Vegetation)).collect();
        assert_eq!(spatial_components(&obs, 0.3), vec![vec![0, 1, 2], vec![3, 4]]);
    }

    proptest! {
        #[test]
        fn clustering_partitions_and_is_deterministic(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..40);
            let obs: Vec<_> = (0..n).map(|i| obs_at(i, rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), ClassLabel::Vegetation)).collect();
            let p = ClusterParams { seed, ..Default::default() };
            let a = cluster_observations(&obs, &p);
            let b = cluster_observations(&obs, &p);
            prop_assert_eq!(&a, &b);
            let mut seen: Vec<u64> = a.iter().flat_map(|i| i.observations.iter().map(|o| o.frame_id)).collect();
            seen.sort();
            prop_assert_eq!(seen, (0..n as u64).collect::<Vec<_>>());
            for inst in &a {
                let mean = inst.observations.iter().fold(Vector3::zeros(), |s, o| s + o.position.to_vector()) / inst.observations.len() as f64;
                prop_assert!((mean - inst.mean_position.to_vector()).norm() < 1e-9);
            }
        }

        #[test]
        fn merging_never_adds_instances(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obs: Vec<_> = (0..25).map(|i| obs_at(i, rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), ClassLabel::Vegetation)).collect();
            let k = rng.random_range(1..10);
            let no_merge = ClusterParams { k: Some(k), merge_radius: 0.0, ..Default::default() };
            let merged = ClusterParams { k: Some(k), ..Default::default() };
            prop_assert!(cluster_observations(&obs, &merged).len() <= cluster_observations(&obs, &no_merge).len());
        }

        #[test]
        fn anchor_offsets_translation_invariant(dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
            let make = |shift: f64, shift_n: f64| {
                let anchors: Vec<LandmarkInstance> = [(0.0, 0.0), (3.3, 0.0), (0.0, 3.3)].iter().enumerate()
                    .map(|(i, (e, n))| LandmarkInstance { instance_id: i as u64 + 1, ..LandmarkInstance::from_members(vec![obs_at(i, e + shift, n + shift_n, ClassLabel::Conmod)]) })
                    .collect();
                let plant = LandmarkInstance { instance_id: 9, ..LandmarkInstance::from_members(vec![obs_at(9, 1.2 + shift, 0.7 + shift_n, ClassLabel::Vegetation)]) };
                let mut map = SeasonMap {
                    session_id: "s".into(), season_tag: "t".into(), season_time: 0.0,
                    frame: LocalFrame::new(GeoCoordinate::new(38.0, -109.0, 0.0).unwrap()).unwrap(),
                    instances: vec![plant], static_anchors: anchors, trajectory: vec![],
                };
                anchor_to_static(&mut map, 3).unwrap();
                map.instances[0].anchor_offsets.clone()
            };
            let (a, b) = (make(0.0, 0.0), make(dx, dy));
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.conmod_id, y.conmod_id);
                for c in 0..3 {
                    prop_assert!((x.offset[c] - y.offset[c]).abs() < 1e-9);
                }
            }
        }
    }
}

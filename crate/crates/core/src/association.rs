//! Cross-season association between season maps, context gathering, and a
//! per-landmark persistence filter with an appearance transition model.

use crate::geo::LocalPoint;
use crate::perception::{ClassLabel, DESCRIPTOR_LEN};
use crate::season_map::{LandmarkInstance, SeasonMap};
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AssociationError {
    #[error("anchor-relative matching needs at least {needed} common anchors, found {found}")]
    InsufficientAnchors { found: usize, needed: usize },
    #[error("update at t = {t} precedes last update at t = {last}")]
    NonMonotonicTime { t: f64, last: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateParams {
    /// Horizontal localization covariance, m².
    pub localization_covariance: Matrix2<f64>,
    pub chi2_threshold: f64,
    /// Covariance of anchor-relative residuals, m².
    pub anchor_covariance: Matrix2<f64>,
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            localization_covariance: Matrix2::identity() * 0.25,
            chi2_threshold: 5.991,
            anchor_covariance: Matrix2::identity() * 0.05f64.powi(2),
        }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<(), AssociationError> {
        let psd = |m: &Matrix2<f64>| {
            m.iter().all(|x| x.is_finite())
                && (m - m.transpose()).abs().max() <= 1e-12
                && m.symmetric_eigenvalues().iter().all(|e| *e >= -1e-12)
        };
        if !psd(&self.localization_covariance) || !psd(&self.anchor_covariance) {
            return Err(AssociationError::InvalidParameter("gate covariances must be symmetric PSD".into()));
        }
        if !(self.chi2_threshold > 0.0) {
            return Err(AssociationError::InvalidParameter("chi2_threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    LocationOnly,
    AnchorRelative,
}

impl MatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::LocationOnly => "location_only",
            MatchMode::AnchorRelative => "anchor_relative",
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "location_only" | "location-only" => Ok(MatchMode::LocationOnly),
            "anchor_relative" | "anchor-relative" => Ok(MatchMode::AnchorRelative),
            _ => Err(format!("unknown match mode '{s}' (expected location-only or anchor-relative)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossSeasonMatch {
    pub instance_a_id: u64,
    pub instance_b_id: u64,
    pub class_label: ClassLabel,
    /// Squared horizontal Mahalanobis distance of the accepted pair.
    pub mahalanobis_distance: f64,
    pub descriptor_distance: f64,
    pub method: MatchMode,
}

/// Expected per-season appearance change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureTransition {
    pub drift: Vec<f64>,
    pub drift_variance: Vec<f64>,
}

impl Default for FeatureTransition {
    fn default() -> Self {
        Self { drift: vec![0.0; DESCRIPTOR_LEN], drift_variance: vec![0.0; DESCRIPTOR_LEN] }
    }
}

impl FeatureTransition {
    pub fn validate(&self) -> Result<(), AssociationError> {
        if self.drift.len() != self.drift_variance.len() {
            return Err(AssociationError::InvalidParameter("drift and drift_variance lengths differ".into()));
        }
        if self.drift_variance.iter().any(|v| !(*v >= 0.0)) || self.drift.iter().any(|d| !d.is_finite()) {
            return Err(AssociationError::InvalidParameter("drift must be finite and drift_variance >= 0".into()));
        }
        Ok(())
    }
}

/// Descriptor mean shifted by `drift * dt`, variance grown by `drift_variance * dt`.
pub fn predict_features(
    descriptor: &[f64],
    variance: &[f64],
    dt: f64,
    f: &FeatureTransition,
) -> Result<(Vec<f64>, Vec<f64>), AssociationError> {
    if !(dt >= 0.0) {
        return Err(AssociationError::InvalidParameter(format!("dt must be >= 0, got {dt}")));
    }
    let mean = descriptor.iter().enumerate().map(|(i, x)| x + f.drift.get(i).copied().unwrap_or(0.0) * dt).collect();
    let var = variance
        .iter()
        .enumerate()
        .map(|(i, v)| v + f.drift_variance.get(i).copied().unwrap_or(0.0) * dt)
        .collect();
    Ok((mean, var))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorGateMode {
    Off,
    /// Compare descriptors as observed.
    Static,
    /// Compare against descriptors predicted by the feature transition.
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescriptorGate {
    pub mode: DescriptorGateMode,
    /// Per-component measurement sigma; 0 excludes a component.
    pub sigmas: Vec<f64>,
    /// Maximum normalized distance.
    pub threshold: f64,
    pub transition: FeatureTransition,
}

impl Default for DescriptorGate {
    fn default() -> Self {
        Self {
            mode: DescriptorGateMode::Off,
            sigmas: vec![0.002, 0.05, 0.05, 0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            threshold: 3.0,
            transition: FeatureTransition::default(),
        }
    }
}

impl DescriptorGate {
    /// Normalized distance between `a` (seen `dt` seasons before `b`) and `b`.
    pub fn distance(&self, a: &[f64], b: &[f64], dt: f64) -> f64 {
        let base: Vec<f64> = self.sigmas.iter().map(|s| s * s).collect();
        let (mean, var) = match self.mode {
            DescriptorGateMode::Predicted => {
                predict_features(a, &base, dt.max(0.0), &self.transition).unwrap_or((a.to_vec(), base.clone()))
            }
            _ => (a.to_vec(), base.clone()),
        };
        mean.iter()
            .zip(b)
            .zip(var.iter().zip(&self.sigmas))
            .filter(|(_, (_, s))| **s > 0.0)
            .map(|((x, y), (v, _))| (x - y).powi(2) / v)
            .sum::<f64>()
            .sqrt()
    }

    fn admits(&self, d: f64) -> bool {
        self.mode == DescriptorGateMode::Off || d <= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorMatchParams {
    /// Largest plausible shift between the two seasons' frames, meters.
    pub max_shift: f64,
    /// Anchors within this distance vote on a candidate correspondence.
    pub neighbourhood: f64,
    /// A vote counts when a shifted anchor lands within this distance of another anchor.
    pub consensus_tolerance: f64,
    /// Minimum votes (including the pair itself) to accept a correspondence.
    pub min_support: usize,
    pub min_common_anchors: usize,
}

impl Default for AnchorMatchParams {
    fn default() -> Self {
        Self { max_shift: 4.0, neighbourhood: 12.0, consensus_tolerance: 0.25, min_support: 2, min_common_anchors: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchParams {
    pub gate: GateParams,
    pub mode: MatchMode,
    pub descriptor: DescriptorGate,
    pub anchors: AnchorMatchParams,
    /// Classes considered for cross-season matching.
    pub classes: Vec<ClassLabel>,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            gate: GateParams::default(),
            mode: MatchMode::AnchorRelative,
            descriptor: DescriptorGate::default(),
            anchors: AnchorMatchParams::default(),
            classes: vec![ClassLabel::Vegetation, ClassLabel::Shrub],
        }
    }
}

fn horizontal(p: &LocalPoint) -> Vector2<f64> {
    Vector2::new(p.east, p.north)
}

/// Squared Mahalanobis distance of `d` under `s`. A singular covariance
/// admits only an exactly zero difference.
pub fn mahalanobis2(d: &Vector2<f64>, s: &Matrix2<f64>) -> f64 {
    match s.try_inverse() {
        Some(inv) if s.determinant() > 0.0 => d.dot(&(inv * d)),
        _ if d.norm() == 0.0 => 0.0,
        _ => f64::INFINITY,
    }
}

fn pair_distance(
    a: &LandmarkInstance,
    a_position: &Vector2<f64>,
    b: &LandmarkInstance,
    base: &Matrix2<f64>,
) -> f64 {
    let s = base + a.horizontal_spread() + b.horizontal_spread();
    mahalanobis2(&(horizontal(&b.mean_position) - a_position), &s)
}

/// Same-class instances of `other` within the chi-square gate of `inst`.
pub fn gate_candidates<'a>(inst: &LandmarkInstance, other: &'a SeasonMap, g: &GateParams) -> Vec<&'a LandmarkInstance> {
    let p = horizontal(&inst.mean_position);
    other
        .all_instances()
        .filter(|c| c.class_label == inst.class_label)
        .filter(|c| pair_distance(inst, &p, c, &g.localization_covariance) <= g.chi2_threshold)
        .collect()
}

/// Greedy one-to-one selection in ascending (distance, a id, b id) order.
fn greedy(mut pairs: Vec<CrossSeasonMatch>) -> Vec<CrossSeasonMatch> {
    pairs.sort_by(|x, y| {
        x.mahalanobis_distance
            .total_cmp(&y.mahalanobis_distance)
            .then(x.instance_a_id.cmp(&y.instance_a_id))
            .then(x.instance_b_id.cmp(&y.instance_b_id))
    });
    let mut used_a = BTreeSet::new();
    let mut used_b = BTreeSet::new();
    let mut out = Vec::new();
    for m in pairs {
        if used_a.contains(&m.instance_a_id) || used_b.contains(&m.instance_b_id) {
            continue;
        }
        used_a.insert(m.instance_a_id);
        used_b.insert(m.instance_b_id);
        out.push(m);
    }
    out.sort_by_key(|m| (m.instance_a_id, m.instance_b_id));
    out
}

/// Anchor correspondences between two maps (a id -> b id) by shift
/// consensus: a candidate pair proposes the shift between the two anchors,
/// and scores one vote per anchor near the first one that the shift maps
/// onto some anchor of the second map.
pub fn match_anchors(map_a: &SeasonMap, map_b: &SeasonMap, p: &AnchorMatchParams) -> BTreeMap<u64, u64> {
    let a: Vec<(u64, Vector2<f64>)> =
        map_a.static_anchors.iter().map(|x| (x.instance_id, horizontal(&x.mean_position))).collect();
    let b: Vec<(u64, Vector2<f64>)> =
        map_b.static_anchors.iter().map(|x| (x.instance_id, horizontal(&x.mean_position))).collect();
    let mut scored = Vec::new();
    for (ia, pa) in &a {
        let neighbours: Vec<&Vector2<f64>> =
            a.iter().map(|(_, q)| q).filter(|q| (*q - pa).norm() <= p.neighbourhood).collect();
        for (ib, pb) in &b {
            let shift = pb - pa;
            if shift.norm() > p.max_shift {
                continue;
            }
            let votes = neighbours
                .iter()
                .filter(|q| b.iter().any(|(_, r)| (r - (**q + shift)).norm() <= p.consensus_tolerance))
                .count();
            if votes >= p.min_support {
                scored.push((votes, shift.norm(), *ia, *ib));
            }
        }
    }
    scored.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2)).then(x.3.cmp(&y.3)));
    let mut out = BTreeMap::new();
    let mut used_b = BTreeSet::new();
    for (_, _, ia, ib) in scored {
        if out.contains_key(&ia) || used_b.contains(&ib) {
            continue;
        }
        out.insert(ia, ib);
        used_b.insert(ib);
    }
    out
}

/// Greedy one-to-one cross-season matching of the configured classes.
///
/// `location_only` compares absolute positions under the localization gate.
/// `anchor_relative` moves each instance of `map_a` by the mean shift of its
/// corresponding anchors, keeps candidates that pass `gate_candidates` at
/// that position, and ranks them by the mean difference of their anchor
/// offsets under the anchor covariance.
pub fn match_cross_season(
    map_a: &SeasonMap,
    map_b: &SeasonMap,
    p: &MatchParams,
) -> Result<Vec<CrossSeasonMatch>, AssociationError> {
    p.gate.validate()?;
    let dt = map_b.season_time - map_a.season_time;
    let classes: BTreeSet<ClassLabel> = p.classes.iter().copied().collect();
    let sources = map_a.instances.iter().filter(|i| classes.contains(&i.class_label));
    let mut pairs = Vec::new();
    match p.mode {
        MatchMode::LocationOnly => {
            for a in sources {
                for b in gate_candidates(a, map_b, &p.gate) {
                    let d2 = pair_distance(a, &horizontal(&a.mean_position), b, &p.gate.localization_covariance);
                    let dd = p.descriptor.distance(&a.descriptor_mean, &b.descriptor_mean, dt);
                    if p.descriptor.admits(dd) {
                        pairs.push(CrossSeasonMatch {
                            instance_a_id: a.instance_id,
                            instance_b_id: b.instance_id,
                            class_label: a.class_label,
                            mahalanobis_distance: d2,
                            descriptor_distance: dd,
                            method: MatchMode::LocationOnly,
                        });
                    }
                }
            }
        }
        MatchMode::AnchorRelative => {
            let correspondence = match_anchors(map_a, map_b, &p.anchors);
            if correspondence.len() < p.anchors.min_common_anchors {
                return Err(AssociationError::InsufficientAnchors {
                    found: correspondence.len(),
                    needed: p.anchors.min_common_anchors,
                });
            }
            let anchor_pos = |m: &SeasonMap, id: u64| m.static_anchors.iter().find(|x| x.instance_id == id).map(|x| horizontal(&x.mean_position));
            for a in sources {
                let shifts: Vec<Vector2<f64>> = a
                    .anchor_offsets
                    .iter()
                    .filter_map(|o| {
                        let ib = correspondence.get(&o.conmod_id)?;
                        Some(anchor_pos(map_b, *ib)? - anchor_pos(map_a, o.conmod_id)?)
                    })
                    .collect();
                if shifts.is_empty() {
                    continue;
                }
                let shift = shifts.iter().sum::<Vector2<f64>>() / shifts.len() as f64;
                let mut moved = a.clone();
                moved.mean_position.east += shift.x;
                moved.mean_position.north += shift.y;
                let aligned = horizontal(&moved.mean_position);
                for b in gate_candidates(&moved, map_b, &p.gate) {
                    let d2 = pair_distance(a, &aligned, b, &p.gate.anchor_covariance);
                    if d2 > p.gate.chi2_threshold {
                        continue;
                    }
                    let dd = p.descriptor.distance(&a.descriptor_mean, &b.descriptor_mean, dt);
                    if p.descriptor.admits(dd) {
                        pairs.push(CrossSeasonMatch {
                            instance_a_id: a.instance_id,
                            instance_b_id: b.instance_id,
                            class_label: a.class_label,
                            mahalanobis_distance: d2,
                            descriptor_distance: dd,
                            method: MatchMode::AnchorRelative,
                        });
                    }
                }
            }
        }
    }
    Ok(greedy(pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchContext {
    pub instance_a_id: u64,
    pub instance_b_id: u64,
    pub frames_a: Vec<u64>,
    pub frames_b: Vec<u64>,
    pub nearby_a: Vec<u64>,
    pub nearby_b: Vec<u64>,
}

fn frames_near(map: &SeasonMap, centre: &LocalPoint, radius: f64) -> Vec<u64> {
    map.trajectory
        .iter()
        .filter(|t| t.footprint.is_some_and(|f| f.horizontal_distance(centre) <= radius))
        .map(|t| t.frame_id)
        .collect()
}

fn instances_near(map: &SeasonMap, centre: &LocalPoint, radius: f64, skip: u64) -> Vec<u64> {
    let mut ids: Vec<u64> = map
        .all_instances()
        .filter(|i| i.instance_id != skip && i.mean_position.horizontal_distance(centre) <= radius)
        .map(|i| i.instance_id)
        .collect();
    ids.sort_unstable();
    ids
}

/// Frames whose ground footprint centre lies within `radius` (inclusive)
/// of the matched instance, and the other instances of any class within
/// `radius`, in both seasons.
pub fn gather_context(m: &CrossSeasonMatch, map_a: &SeasonMap, map_b: &SeasonMap, radius: f64) -> MatchContext {
    let mut ctx = MatchContext {
        instance_a_id: m.instance_a_id,
        instance_b_id: m.instance_b_id,
        frames_a: Vec::new(),
        frames_b: Vec::new(),
        nearby_a: Vec::new(),
        nearby_b: Vec::new(),
    };
    if let Some(a) = map_a.instance(m.instance_a_id) {
        ctx.frames_a = frames_near(map_a, &a.mean_position, radius);
        ctx.nearby_a = instances_near(map_a, &a.mean_position, radius, a.instance_id);
    }
    if let Some(b) = map_b.instance(m.instance_b_id) {
        ctx.frames_b = frames_near(map_b, &b.mean_position, radius);
        ctx.nearby_b = instances_near(map_b, &b.mean_position, radius, b.instance_id);
    }
    ctx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorModel {
    pub p_detect: f64,
    pub p_false: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self { p_detect: 0.9, p_false: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurvivalPrior {
    /// Deaths per season.
    pub hazard_rate: f64,
}

impl Default for SurvivalPrior {
    fn default() -> Self {
        Self { hazard_rate: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evidence {
    Detected,
    /// Surveyed but not detected.
    Missed,
    /// Not surveyed.
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub time: f64,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersistenceBelief {
    pub landmark_id: String,
    pub survival_posterior: f64,
    pub last_update_time: f64,
    pub evidence_log: Vec<EvidenceRecord>,
}

impl PersistenceBelief {
    pub fn new(landmark_id: impl Into<String>, prior: f64, time: f64) -> Self {
        Self { landmark_id: landmark_id.into(), survival_posterior: prior, last_update_time: time, evidence_log: Vec::new() }
    }
}

/// Decays the survival probability over the elapsed time, then applies a
/// Bayes update for a detection or a miss. Evidence with zero probability
/// under both hypotheses leaves the belief unchanged.
pub fn persistence_update(
    b: &PersistenceBelief,
    t: f64,
    evidence: Evidence,
    d: &DetectorModel,
    s: &SurvivalPrior,
) -> Result<PersistenceBelief, AssociationError> {
    if !(t >= b.last_update_time) {
        return Err(AssociationError::NonMonotonicTime { t, last: b.last_update_time });
    }
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    if !unit(d.p_detect) || !unit(d.p_false) || !(s.hazard_rate >= 0.0) {
        return Err(AssociationError::InvalidParameter(format!("{d:?} {s:?}")));
    }
    let alive = b.survival_posterior * (-s.hazard_rate * (t - b.last_update_time)).exp();
    let mut out = b.clone();
    out.last_update_time = t;
    let (l_alive, l_dead) = match evidence {
        Evidence::Absent => {
            out.survival_posterior = alive;
            return Ok(out);
        }
        Evidence::Detected => (d.p_detect, d.p_false),
        Evidence::Missed => (1.0 - d.p_detect, 1.0 - d.p_false),
    };
    let num = alive * l_alive;
    let den = num + (1.0 - alive) * l_dead;
    out.survival_posterior = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { alive };
    out.evidence_log.push(EvidenceRecord { time: t, detected: evidence == Evidence::Detected });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersistenceParams {
    pub detector: DetectorModel,
    pub survival: SurvivalPrior,
    /// Belief of a newly seen landmark before its first detection.
    pub initial_prior: f64,
    /// A landmark counts as surveyed when a frame footprint centre lies this close.
    pub survey_radius: f64,
}

impl Default for PersistenceParams {
    fn default() -> Self {
        Self { detector: DetectorModel::default(), survival: SurvivalPrior::default(), initial_prior: 0.5, survey_radius: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonPairMatches {
    pub session_a: String,
    pub session_b: String,
    pub matches: Vec<CrossSeasonMatch>,
    pub contexts: Vec<MatchContext>,
}

/// A landmark followed across seasons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub landmark_id: String,
    pub class_label: ClassLabel,
    /// `(session_id, instance_id)` per season in which it was seen.
    pub members: Vec<(String, u64)>,
    pub belief: PersistenceBelief,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationResult {
    pub pairs: Vec<SeasonPairMatches>,
    pub tracks: Vec<Track>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationConfig {
    pub matching: MatchParams,
    pub persistence: PersistenceParams,
    pub context_radius: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self { matching: MatchParams::default(), persistence: PersistenceParams::default(), context_radius: 2.0 }
    }
}

fn surveyed(map: &SeasonMap, p: &LocalPoint, radius: f64) -> bool {
    map.trajectory.iter().any(|t| t.footprint.is_some_and(|f| f.horizontal_distance(p) <= radius))
}

/// Matches consecutive seasons (ordered by season time) and maintains a
/// persistence belief per track. Matched tracks record a detection;
/// unmatched tracks record a miss where the area was surveyed, otherwise
/// only decay.
pub fn associate_seasons(maps: &[SeasonMap], cfg: &AssociationConfig) -> Result<AssociationResult, AssociationError> {
    let mut order: Vec<&SeasonMap> = maps.iter().collect();
    order.sort_by(|a, b| a.season_time.total_cmp(&b.season_time).then(a.session_id.cmp(&b.session_id)));
    let classes: BTreeSet<ClassLabel> = cfg.matching.classes.iter().copied().collect();
    let pp = &cfg.persistence;
    let mut tracks: Vec<Track> = Vec::new();
    // instance id in the latest season -> track index
    let mut current: BTreeMap<u64, usize> = BTreeMap::new();
    let mut pairs = Vec::new();

    let start_track = |tracks: &mut Vec<Track>, map: &SeasonMap, inst: &LandmarkInstance| -> Result<usize, AssociationError> {
        let id = format!("{}:{}", map.session_id, inst.instance_id);
        let belief = PersistenceBelief::new(id.clone(), pp.initial_prior, map.season_time);
        let belief = persistence_update(&belief, map.season_time, Evidence::Detected, &pp.detector, &pp.survival)?;
        tracks.push(Track {
            landmark_id: id,
            class_label: inst.class_label,
            members: vec![(map.session_id.clone(), inst.instance_id)],
            belief,
        });
        Ok(tracks.len() - 1)
    };

    if let Some(first) = order.first() {
        for inst in first.instances.iter().filter(|i| classes.contains(&i.class_label)) {
            let t = start_track(&mut tracks, first, inst)?;
            current.insert(inst.instance_id, t);
        }
    }
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        let matches = match_cross_season(a, b, &cfg.matching)?;
        let contexts = matches.iter().map(|m| gather_context(m, a, b, cfg.context_radius)).collect();
        let matched: BTreeMap<u64, u64> = matches.iter().map(|m| (m.instance_a_id, m.instance_b_id)).collect();
        let mut next = BTreeMap::new();
        for (a_id, &t) in &current {
            let track = &mut tracks[t];
            match matched.get(a_id) {
                Some(b_id) => {
                    track.belief = persistence_update(&track.belief, b.season_time, Evidence::Detected, &pp.detector, &pp.survival)?;
                    track.members.push((b.session_id.clone(), *b_id));
                    next.insert(*b_id, t);
                }
                None => {
                    let last = a.instance(*a_id).map(|i| i.mean_position);
                    let evidence = match last {
                        Some(p) if surveyed(b, &p, pp.survey_radius) => Evidence::Missed,
                        _ => Evidence::Absent,
                    };
                    track.belief = persistence_update(&track.belief, b.season_time, evidence, &pp.detector, &pp.survival)?;
                }
            }
        }
        for inst in b.instances.iter().filter(|i| classes.contains(&i.class_label)) {
            if !next.contains_key(&inst.instance_id) {
                let t = start_track(&mut tracks, b, inst)?;
                next.insert(inst.instance_id, t);
            }
        }
        current = next;
        pairs.push(SeasonPairMatches {
            session_a: a.session_id.clone(),
            session_b: b.session_id.clone(),
            matches,
            contexts,
        });
    }
    Ok(AssociationResult { pairs, tracks })
}

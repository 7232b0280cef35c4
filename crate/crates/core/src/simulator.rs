//! Seasonal field simulator: plot layout, plant lifecycles, lawnmower
//! surveys with correlated pose error, analytic mask rendering, and
//! ground-truth scoring of cross-season matches.
//!
//! Every random draw comes from ChaCha8 streams derived from the world
//! seed. The world uses stream 0; the survey of plot `p` in season `s`
//! uses stream `(s + 1) << 32 | p`, so plots can be simulated in any order.

use crate::association::{CrossSeasonMatch, FeatureTransition};
use crate::geo::{GeoCoordinate, GeoError, LocalFrame, LocalPoint};
use crate::perception::{CameraIntrinsics, CameraPose, ClassLabel, SegmentMask, Span, DESCRIPTOR_LEN, DESC_AREA};
use crate::season_map::SeasonMap;
use crate::session::{
    CameraCalibration, CameraKind, DataFiles, FrameRecord, ScanRecord, Session, SessionManifest,
};
use nalgebra::{Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use thiserror::Error;

/// Per-axis sigma of the row-level part of RTK-corrected pose error, meters.
pub const RTK_ROW_SIGMA: f64 = 0.03;
/// Per-axis sigma of the per-frame part of RTK-corrected pose error, meters.
pub const RTK_FRAME_SIGMA: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("season {season} outside the simulated horizon of {seasons} seasons")]
    SeasonOutOfRange { season: u32, seasons: u32 },
    #[error("match refers to unknown instance {instance} of session {session}")]
    UnknownInstance { session: String, instance: u64 },
    #[error("observation of frame {frame} mask {mask} has no truth record in session {session}")]
    UnknownMask { session: String, frame: u64, mask: u32 },
    #[error(transparent)]
    Geo(#[from] GeoError),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidConfig(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    DrillSeeded,
    Conmod,
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Species {
    Forb,
    Grass,
    Shrub,
}

impl Species {
    pub fn class_label(self) -> ClassLabel {
        match self {
            Species::Shrub => ClassLabel::Shrub,
            _ => ClassLabel::Vegetation,
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            Species::Forb => [0.30, 0.55, 0.22],
            Species::Grass => [0.36, 0.56, 0.26],
            Species::Shrub => [0.28, 0.46, 0.22],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicrositeKind {
    Crack,
    Dip,
    Litter,
}

impl MicrositeKind {
    pub fn class_label(self) -> ClassLabel {
        match self {
            MicrositeKind::Crack => ClassLabel::Crack,
            MicrositeKind::Dip => ClassLabel::Dip,
            MicrositeKind::Litter => ClassLabel::Litter,
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            MicrositeKind::Crack => [0.15, 0.13, 0.12],
            MicrositeKind::Dip => [0.35, 0.32, 0.30],
            MicrositeKind::Litter => [0.52, 0.38, 0.22],
        }
    }
}

/// Per-season radius multiplier: normal, clamped to `range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowthModel {
    pub multiplier_mean: f64,
    pub multiplier_sd: f64,
    pub multiplier_range: [f64; 2],
}

impl Default for GrowthModel {
    fn default() -> Self {
        Self { multiplier_mean: 1.1, multiplier_sd: 0.05, multiplier_range: [0.8, 1.4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub plot_count: usize,
    pub plots_per_treatment: usize,
    /// Treatments laid out round-robin over the plots.
    pub treatments: Vec<Treatment>,
    /// Plot edge length, meters.
    pub plot_size: f64,
    pub plot_gap: f64,
    pub plot_columns: usize,
    pub conmod_diameter: f64,
    /// ConMods per plot side in ConMod plots.
    pub conmod_grid: usize,
    pub microsite_radius_range: [f64; 2],
    /// Microsites per m².
    pub microsite_density: f64,
    /// Plants per m² at the first season.
    pub plant_density: f64,
    /// Minimum distance between plant centres, meters.
    pub plant_spacing: f64,
    pub plant_radius_range: [f64; 2],
    pub max_plant_radius: f64,
    pub grass_fraction: f64,
    pub grass_elongation: f64,
    pub drill_row_spacing: f64,
    /// Shrubs per m².
    pub shrub_density: f64,
    pub shrub_radius_range: [f64; 2],
    /// Plant deaths per season (exponential survival). Shrubs do not die.
    pub hazard_rate: f64,
    /// New plants per m² per season after the first.
    pub recruitment_density: f64,
    pub growth_model: GrowthModel,
    pub seasons: u32,
    pub origin: GeoCoordinate,
    pub rng_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            plot_count: 18,
            plots_per_treatment: 6,
            treatments: vec![Treatment::DrillSeeded, Treatment::Conmod, Treatment::Control],
            plot_size: 10.0,
            plot_gap: 5.0,
            plot_columns: 6,
            conmod_diameter: 0.30,
            conmod_grid: 3,
            microsite_radius_range: [0.05, 0.10],
            microsite_density: 0.2,
            plant_density: 1.0,
            plant_spacing: 0.3,
            plant_radius_range: [0.03, 0.08],
            max_plant_radius: 0.12,
            grass_fraction: 0.4,
            grass_elongation: 1.6,
            drill_row_spacing: 1.0,
            shrub_density: 0.01,
            shrub_radius_range: [0.25, 0.35],
            hazard_rate: 0.15,
            recruitment_density: 0.0,
            growth_model: GrowthModel::default(),
            seasons: 4,
            origin: GeoCoordinate { latitude: 38.2, longitude: -109.4, height: 1500.0 },
            rng_seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let distinct: BTreeSet<_> = self.treatments.iter().collect();
        if self.treatments.is_empty() || distinct.len() != self.treatments.len() {
            return Err(invalid("treatments must be non-empty and distinct"));
        }
        if self.plots_per_treatment == 0 || self.plot_count != self.plots_per_treatment * self.treatments.len() {
            return Err(invalid(format!(
                "plot_count {} must equal plots_per_treatment {} x {} treatments",
                self.plot_count,
                self.plots_per_treatment,
                self.treatments.len()
            )));
        }
        let positive = [
            ("plot_size", self.plot_size),
            ("conmod_diameter", self.conmod_diameter),
            ("plant_spacing", self.plant_spacing),
            ("max_plant_radius", self.max_plant_radius),
            ("grass_elongation", self.grass_elongation),
            ("drill_row_spacing", self.drill_row_spacing),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("plot_gap", self.plot_gap),
            ("microsite_density", self.microsite_density),
            ("plant_density", self.plant_density),
            ("shrub_density", self.shrub_density),
            ("hazard_rate", self.hazard_rate),
            ("recruitment_density", self.recruitment_density),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative")));
            }
        }
        for (name, r) in [
            ("microsite_radius_range", self.microsite_radius_range),
            ("plant_radius_range", self.plant_radius_range),
            ("shrub_radius_range", self.shrub_radius_range),
            ("growth_model.multiplier_range", self.growth_model.multiplier_range),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return Err(invalid(format!("{name} must be an ordered positive range")));
            }
        }
        if self.plant_radius_range[1] > self.max_plant_radius {
            return Err(invalid("plant_radius_range exceeds max_plant_radius"));
        }
        if !(0.0..=1.0).contains(&self.grass_fraction) {
            return Err(invalid("grass_fraction must be in [0, 1]"));
        }
        if !(self.growth_model.multiplier_sd >= 0.0) {
            return Err(invalid("growth_model.multiplier_sd must be non-negative"));
        }
        if self.plot_columns == 0 || self.seasons == 0 {
            return Err(invalid("plot_columns and seasons must be positive"));
        }
        if self.treatments.contains(&Treatment::Conmod) && self.conmod_grid == 0 {
            return Err(invalid("conmod_grid must be positive"));
        }
        self.origin.validate()?;
        Ok(())
    }

    /// Treatment of plot `index`.
    pub fn treatment(&self, index: usize) -> Treatment {
        self.treatments[index % self.treatments.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Per-axis sigma of the survey-level horizontal drift, meters.
    pub pose_noise_sigma: f64,
    /// Bound on the horizontal pose error magnitude, meters.
    pub pose_noise_max: f64,
    /// Row and frame error at RTK level; otherwise they scale with `pose_noise_sigma`.
    pub rtk_mode: bool,
    pub detection_miss_rate: f64,
    /// Expected false masks per down-facing frame.
    pub false_positive_rate: f64,
    /// Sigma of per-mask colour noise.
    pub descriptor_noise_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            rtk_mode: true,
            detection_miss_rate: 0.05,
            false_positive_rate: 0.0,
            descriptor_noise_sigma: 0.01,
            ..Self::for_max_error(1.0)
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            pose_noise_sigma: 0.0,
            pose_noise_max: 0.0,
            rtk_mode: false,
            detection_miss_rate: 0.0,
            false_positive_rate: 0.0,
            descriptor_noise_sigma: 0.0,
        }
    }

    /// Drift sigma chosen so the largest horizontal error over a survey of
    /// many plots sits near `max`.
    pub fn for_max_error(max: f64) -> Self {
        Self { pose_noise_sigma: max / 2.0, pose_noise_max: max, ..Self::noiseless() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            self.pose_noise_sigma,
            self.pose_noise_max,
            self.detection_miss_rate,
            self.false_positive_rate,
            self.descriptor_noise_sigma,
        ];
        if fields.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid("noise parameters must be finite and non-negative"));
        }
        if self.pose_noise_max < self.pose_noise_sigma {
            return Err(invalid("pose_noise_max must be >= pose_noise_sigma"));
        }
        if self.detection_miss_rate > 1.0 {
            return Err(invalid("detection_miss_rate must be <= 1"));
        }
        Ok(())
    }

    /// Per-axis sigmas of the (row, frame) parts of the error.
    pub fn local_sigmas(&self) -> (f64, f64) {
        if self.rtk_mode {
            (RTK_ROW_SIGMA, RTK_FRAME_SIGMA)
        } else {
            (0.25 * self.pose_noise_sigma, 0.1 * self.pose_noise_sigma)
        }
    }

    fn horizontal_variance(&self) -> f64 {
        let (row, frame) = self.local_sigmas();
        self.pose_noise_sigma.powi(2) + row * row + frame * frame
    }

    fn bound(&self) -> f64 {
        let (row, frame) = self.local_sigmas();
        if self.rtk_mode {
            // the RTK floor applies even without drift
            self.pose_noise_max.max(4.0 * (row + frame))
        } else {
            self.pose_noise_max
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontCameraParams {
    pub height: f64,
    pub pitch_deg: f64,
    pub intrinsics: CameraIntrinsics,
    /// One front frame (and range scan) per this many down frames.
    pub every: usize,
    /// Shrubs further than this from the camera are not rendered or scanned.
    pub max_range: f64,
    pub lidar_height: f64,
    /// Spacing of scan samples on shrub surfaces, meters.
    pub surface_spacing: f64,
}

impl Default for FrontCameraParams {
    fn default() -> Self {
        Self {
            height: 0.8,
            pitch_deg: 30.0,
            intrinsics: CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 319.5, cy: 239.5, width: 640, height: 480 },
            every: 2,
            max_range: 6.0,
            lidar_height: 1.0,
            surface_spacing: 0.05,
        }
    }
}

/// Lawnmower survey: rows run east-west, alternating direction, and
/// extend `edge_margin` past each plot edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryParams {
    pub row_spacing: f64,
    pub frame_spacing: f64,
    pub edge_margin: f64,
    /// Cart speed, m/s.
    pub speed: f64,
    /// Seconds between the end of one plot and the start of the next.
    pub transit_time: f64,
    pub down_height: f64,
    pub down_intrinsics: CameraIntrinsics,
    pub front: Option<FrontCameraParams>,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            row_spacing: 0.8,
            frame_spacing: 0.5,
            edge_margin: 0.5,
            speed: 0.5,
            transit_time: 60.0,
            down_height: 1.5,
            down_intrinsics: CameraIntrinsics { fx: 600.0, fy: 600.0, cx: 319.5, cy: 239.5, width: 640, height: 480 },
            front: Some(FrontCameraParams::default()),
        }
    }
}

impl TrajectoryParams {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("row_spacing", self.row_spacing),
            ("frame_spacing", self.frame_spacing),
            ("speed", self.speed),
            ("down_height", self.down_height),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("trajectory.{name} must be positive")));
            }
        }
        if !(self.edge_margin >= 0.0) || !(self.transit_time >= 0.0) {
            return Err(invalid("trajectory margins and transit time must be non-negative"));
        }
        self.down_intrinsics.validate().map_err(|e| invalid(e.to_string()))?;
        if let Some(f) = &self.front {
            f.intrinsics.validate().map_err(|e| invalid(e.to_string()))?;
            if f.every == 0 || !(f.height > 0.0) || !(f.max_range > 0.0) || !(f.surface_spacing > 0.0) {
                return Err(invalid("front camera parameters must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotTruth {
    pub index: usize,
    pub treatment: Treatment,
    /// South-west corner.
    pub origin: LocalPoint,
    pub size: f64,
}

impl PlotTruth {
    pub fn contains(&self, p: &LocalPoint) -> bool {
        (self.origin.east..=self.origin.east + self.size).contains(&p.east)
            && (self.origin.north..=self.origin.north + self.size).contains(&p.north)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantTruth {
    pub plant_id: u64,
    pub plot: usize,
    pub species: Species,
    pub position: LocalPoint,
    pub geo: GeoCoordinate,
    pub birth_season: u32,
    /// First season in which the plant is gone.
    pub death_season: Option<u32>,
    /// Canopy radius per season, 0 while not alive. Grass canopies are
    /// ellipses with the same area.
    pub radius: Vec<f64>,
    pub orientation: f64,
    pub color: [f64; 3],
}

impl PlantTruth {
    pub fn alive(&self, season: u32) -> bool {
        season >= self.birth_season && self.death_season.is_none_or(|d| season < d)
    }

    pub fn area(&self, season: u32) -> f64 {
        PI * self.radius.get(season as usize).copied().unwrap_or(0.0).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConmodTruth {
    pub conmod_id: u64,
    pub plot: usize,
    pub position: LocalPoint,
    pub geo: GeoCoordinate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrositeTruth {
    pub microsite_id: u64,
    pub plot: usize,
    pub kind: MicrositeKind,
    pub center: LocalPoint,
    pub radius: f64,
    pub orientation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub config: WorldConfig,
    pub frame: LocalFrame,
    pub plots: Vec<PlotTruth>,
    pub plants: Vec<PlantTruth>,
    pub conmods: Vec<ConmodTruth>,
    pub microsites: Vec<MicrositeTruth>,
}

impl GroundTruth {
    pub fn plants_alive(&self, season: u32) -> impl Iterator<Item = &PlantTruth> {
        self.plants.iter().filter(move |p| p.alive(season))
    }

    pub fn plant(&self, id: u64) -> Option<&PlantTruth> {
        self.plants.iter().find(|p| p.plant_id == id)
    }

    /// Canopy-area change per season of non-shrub plants alive in
    /// consecutive seasons, as a transition on the area component.
    pub fn feature_transition(&self) -> FeatureTransition {
        let deltas: Vec<f64> = self
            .plants
            .iter()
            .filter(|p| p.species != Species::Shrub)
            .flat_map(|p| {
                (1..self.config.seasons)
                    .filter(|s| p.alive(s - 1) && p.alive(*s))
                    .map(|s| p.area(s) - p.area(s - 1))
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut f = FeatureTransition::default();
        if !deltas.is_empty() {
            let n = deltas.len() as f64;
            let mean = deltas.iter().sum::<f64>() / n;
            let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
            f.drift[DESC_AREA] = mean;
            f.drift_variance[DESC_AREA] = var;
        }
        debug_assert_eq!(f.drift.len(), DESCRIPTOR_LEN);
        f
    }
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as usize).unwrap_or(0)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn hdist(a: &LocalPoint, b: &LocalPoint) -> f64 {
    a.horizontal_distance(b)
}

/// Uniform sample inside `plot` at least `margin` from its edges that
/// passes `ok`; `None` after `attempts` rejections.
fn place(
    rng: &mut ChaCha8Rng,
    plot: &PlotTruth,
    margin: f64,
    attempts: usize,
    mut propose_north: impl FnMut(&mut ChaCha8Rng) -> Option<f64>,
    ok: impl Fn(&LocalPoint) -> bool,
) -> Option<LocalPoint> {
    for _ in 0..attempts {
        let e = plot.origin.east + rng.random_range(margin..plot.size - margin);
        let n = match propose_north(rng) {
            Some(n) => plot.origin.north + n,
            None => plot.origin.north + rng.random_range(margin..plot.size - margin),
        };
        let p = LocalPoint::new(e, n, 0.0);
        let inside = (plot.origin.north + margin..=plot.origin.north + plot.size - margin).contains(&p.north);
        if inside && ok(&p) {
            return Some(p);
        }
    }
    None
}

/// Lays out plots, ConMods, shrubs, plants and microsites and samples
/// plant lifecycles and sizes. Placement draws that keep failing the
/// spacing rules are dropped, so a dense config can hold fewer plants
/// than its density implies.
pub fn generate_world(cfg: &WorldConfig) -> Result<GroundTruth, SimError> {
    cfg.validate()?;
    let frame = LocalFrame::new(cfg.origin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let pitch = cfg.plot_size + cfg.plot_gap;
    let plots: Vec<PlotTruth> = (0..cfg.plot_count)
        .map(|i| PlotTruth {
            index: i,
            treatment: cfg.treatment(i),
            origin: LocalPoint::new((i % cfg.plot_columns) as f64 * pitch, (i / cfg.plot_columns) as f64 * pitch, 0.0),
            size: cfg.plot_size,
        })
        .collect();
    let area = cfg.plot_size * cfg.plot_size;
    let conmod_r = cfg.conmod_diameter / 2.0;

    let mut conmods = Vec::new();
    let mut plants: Vec<PlantTruth> = Vec::new();
    let mut microsites = Vec::new();
    let mut next_plant = 1u64;

    for plot in &plots {
        let mut anchors = Vec::new();
        if plot.treatment == Treatment::Conmod {
            let step = cfg.plot_size / cfg.conmod_grid as f64;
            for i in 0..cfg.conmod_grid {
                for j in 0..cfg.conmod_grid {
                    let p = LocalPoint::new(
                        plot.origin.east + step * (i as f64 + 0.5),
                        plot.origin.north + step * (j as f64 + 0.5),
                        0.0,
                    );
                    anchors.push(p);
                    conmods.push(ConmodTruth {
                        conmod_id: conmods.len() as u64 + 1,
                        plot: plot.index,
                        position: p,
                        geo: frame.local_to_geo(&p)?,
                    });
                }
            }
        }

        let mut shrubs: Vec<(LocalPoint, f64)> = Vec::new();
        for _ in 0..poisson(&mut rng, cfg.shrub_density * area) {
            let r = uniform(&mut rng, cfg.shrub_radius_range);
            let ok = |p: &LocalPoint| {
                shrubs.iter().all(|(s, _)| hdist(s, p) >= 3.0)
                    && anchors.iter().all(|a| hdist(a, p) >= r + conmod_r + 0.5)
            };
            if let Some(p) = place(&mut rng, plot, r + 0.2, 100, |_| None, ok) {
                shrubs.push((p, r));
                plants.push(PlantTruth {
                    plant_id: next_plant,
                    plot: plot.index,
                    species: Species::Shrub,
                    position: p,
                    geo: frame.local_to_geo(&p)?,
                    birth_season: 0,
                    death_season: None,
                    radius: vec![r; cfg.seasons as usize],
                    orientation: 0.0,
                    color: Species::Shrub.base_color(),
                });
                next_plant += 1;
            }
        }

        let edge = cfg.max_plant_radius + 0.03;
        let drill_rows: Vec<f64> = if plot.treatment == Treatment::DrillSeeded {
            let mut rows = Vec::new();
            let mut y = 0.5;
            while y <= cfg.plot_size - 0.5 + 1e-9 {
                rows.push(y);
                y += cfg.drill_row_spacing;
            }
            rows
        } else {
            Vec::new()
        };
        for season in 0..cfg.seasons {
            let mean = if season == 0 { cfg.plant_density * area } else { cfg.recruitment_density * area };
            for _ in 0..poisson(&mut rng, mean) {
                let placed: Vec<LocalPoint> =
                    plants.iter().filter(|p| p.plot == plot.index && p.species != Species::Shrub).map(|p| p.position).collect();
                let ok = |p: &LocalPoint| {
                    placed.iter().all(|q| hdist(q, p) >= cfg.plant_spacing)
                        && anchors.iter().all(|a| hdist(a, p) >= conmod_r + cfg.max_plant_radius + 0.05)
                        && shrubs.iter().all(|(s, r)| hdist(s, p) >= r + cfg.max_plant_radius + 0.1)
                };
                let rows = &drill_rows;
                let pick_row = |rng: &mut ChaCha8Rng| {
                    (!rows.is_empty()).then(|| rows[rng.random_range(0..rows.len())] + gauss(rng, 0.03))
                };
                let Some(p) = place(&mut rng, plot, edge, 50, pick_row, ok) else { continue };
                let species = if rng.random_bool(cfg.grass_fraction) { Species::Grass } else { Species::Forb };
                let base = species.base_color();
                let color = [
                    (base[0] + gauss(&mut rng, 0.02)).clamp(0.0, 1.0),
                    (base[1] + gauss(&mut rng, 0.02)).clamp(0.0, 1.0),
                    (base[2] + gauss(&mut rng, 0.02)).clamp(0.0, 1.0),
                ];
                let orientation = rng.random_range(0.0..PI);
                let mut death = None;
                for s in season + 1..cfg.seasons {
                    if rng.random::<f64>() < 1.0 - (-cfg.hazard_rate).exp() {
                        death = Some(s);
                        break;
                    }
                }
                let mut radius = vec![0.0; cfg.seasons as usize];
                let mut r = uniform(&mut rng, cfg.plant_radius_range);
                let g = &cfg.growth_model;
                for s in season..cfg.seasons {
                    if s > season {
                        let m = (g.multiplier_mean + gauss(&mut rng, g.multiplier_sd))
                            .clamp(g.multiplier_range[0], g.multiplier_range[1]);
                        r = (r * m).min(cfg.max_plant_radius);
                    }
                    if death.is_none_or(|d| s < d) {
                        radius[s as usize] = r;
                    }
                }
                plants.push(PlantTruth {
                    plant_id: next_plant,
                    plot: plot.index,
                    species,
                    position: p,
                    geo: frame.local_to_geo(&p)?,
                    birth_season: season,
                    death_season: death,
                    radius,
                    orientation,
                    color,
                });
                next_plant += 1;
            }
        }

        let mut sites: Vec<LocalPoint> = Vec::new();
        for _ in 0..poisson(&mut rng, cfg.microsite_density * area) {
            let kind = [MicrositeKind::Crack, MicrositeKind::Dip, MicrositeKind::Litter][rng.random_range(0..3)];
            let radius = uniform(&mut rng, cfg.microsite_radius_range);
            let ok = |p: &LocalPoint| {
                sites.iter().all(|q| hdist(q, p) >= 0.3)
                    && anchors.iter().all(|a| hdist(a, p) >= conmod_r + 0.15)
                    && shrubs.iter().all(|(s, r)| hdist(s, p) >= r + 0.15)
            };
            let Some(center) = place(&mut rng, plot, cfg.microsite_radius_range[1] + 0.05, 50, |_| None, ok) else {
                continue;
            };
            sites.push(center);
            microsites.push(MicrositeTruth {
                microsite_id: microsites.len() as u64 + 1,
                plot: plot.index,
                kind,
                center,
                radius,
                orientation: rng.random_range(0.0..PI),
            });
        }
    }
    Ok(GroundTruth { config: cfg.clone(), frame, plots, plants, conmods, microsites })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "id")]
pub enum MaskSource {
    Plant(u64),
    Conmod(u64),
    Microsite(u64),
    False,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskTruth {
    pub frame_id: u64,
    pub mask_id: u32,
    pub source: MaskSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseErrorRecord {
    pub frame_id: u64,
    pub east: f64,
    pub north: f64,
}

/// Sidecar truth for one simulated session; never read by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionTruth {
    pub session_id: String,
    pub season: u32,
    pub masks: Vec<MaskTruth>,
    pub pose_errors: Vec<PoseErrorRecord>,
}

impl SessionTruth {
    pub fn source_index(&self) -> BTreeMap<(u64, u32), MaskSource> {
        self.masks.iter().map(|m| ((m.frame_id, m.mask_id), m.source)).collect()
    }

    pub fn max_pose_error(&self) -> f64 {
        self.pose_errors.iter().map(|e| e.east.hypot(e.north)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSession {
    pub session: Session,
    pub truth: SessionTruth,
}

pub fn session_id(season: u32) -> String {
    format!("season-{season}")
}

/// Alternating fall and spring deployments starting in fall 2021.
pub fn season_tag(season: u32) -> String {
    let year = 2021 + (season + 1) / 2;
    let half = if season % 2 == 0 { "fall" } else { "spring" };
    format!("{year}-{half}")
}

#[derive(Debug, Clone, Copy)]
enum Footprint {
    Disc { r: f64 },
    Ellipse { a: f64, b: f64, theta: f64 },
}

#[derive(Debug, Clone, Copy)]
struct GroundObject {
    source: MaskSource,
    center: LocalPoint,
    shape: Footprint,
    color: [f64; 3],
    texture: f64,
}

impl GroundObject {
    fn extent(&self) -> f64 {
        match self.shape {
            Footprint::Disc { r } => r,
            Footprint::Ellipse { a, b, .. } => a.max(b),
        }
    }

    fn contains(&self, e: f64, n: f64) -> bool {
        let (de, dn) = (e - self.center.east, n - self.center.north);
        match self.shape {
            Footprint::Disc { r } => de * de + dn * dn <= r * r,
            Footprint::Ellipse { a, b, theta } => {
                let (s, c) = theta.sin_cos();
                let x = c * de + s * dn;
                let y = -s * de + c * dn;
                (x / a).powi(2) + (y / b).powi(2) <= 1.0
            }
        }
    }
}

fn ground_objects(world: &GroundTruth, plot: usize, season: u32) -> Vec<GroundObject> {
    let cfg = &world.config;
    let mut out = Vec::new();
    for c in world.conmods.iter().filter(|c| c.plot == plot) {
        out.push(GroundObject {
            source: MaskSource::Conmod(c.conmod_id),
            center: c.position,
            shape: Footprint::Disc { r: cfg.conmod_diameter / 2.0 },
            color: [0.58, 0.58, 0.57],
            texture: 0.004,
        });
    }
    for p in world.plants.iter().filter(|p| p.plot == plot && p.alive(season) && p.species != Species::Shrub) {
        let r = p.radius[season as usize];
        let shape = match p.species {
            Species::Grass => {
                let k = cfg.grass_elongation.sqrt();
                Footprint::Ellipse { a: r * k, b: r / k, theta: p.orientation }
            }
            _ => Footprint::Disc { r },
        };
        out.push(GroundObject { source: MaskSource::Plant(p.plant_id), center: p.position, shape, color: p.color, texture: 0.003 });
    }
    for m in world.microsites.iter().filter(|m| m.plot == plot) {
        let shape = match m.kind {
            MicrositeKind::Crack => Footprint::Ellipse { a: m.radius, b: m.radius / 8.0, theta: m.orientation },
            _ => Footprint::Disc { r: m.radius },
        };
        out.push(GroundObject {
            source: MaskSource::Microsite(m.microsite_id),
            center: m.center,
            shape,
            color: m.kind.color(),
            texture: 0.002,
        });
    }
    out
}

fn noisy_color(rng: &mut ChaCha8Rng, c: [f64; 3], sigma: f64) -> [f64; 3] {
    let mut out = c;
    for x in &mut out {
        *x = (*x + gauss(rng, sigma)).clamp(0.0, 1.0);
    }
    out
}

/// Pixel rectangle `[u0, u1] x [v0, v1]` covering the projections of
/// `corners`, or `None` if any corner is behind the camera or the
/// rectangle reaches the image border.
fn inner_bbox(k: &CameraIntrinsics, pose: &CameraPose, corners: &[Vector3<f64>]) -> Option<(u32, u32, u32, u32)> {
    let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in corners {
        let q = pose.to_camera(&LocalPoint::from_vector(c));
        if q.z <= 1e-6 {
            return None;
        }
        let (u, v) = (k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
    }
    let (u0, v0) = (u0.floor() - 1.0, v0.floor() - 1.0);
    let (u1, v1) = (u1.ceil() + 1.0, v1.ceil() + 1.0);
    if u0 < 1.0 || v0 < 1.0 || u1 > f64::from(k.width) - 2.0 || v1 > f64::from(k.height) - 2.0 {
        return None;
    }
    Some((u0 as u32, u1 as u32, v0 as u32, v1 as u32))
}

fn rasterize(
    bbox: (u32, u32, u32, u32),
    k: &CameraIntrinsics,
    pose: &CameraPose,
    inside: impl Fn(&Vector3<f64>, &Vector3<f64>) -> bool,
) -> Vec<Span> {
    let r = pose.rotation();
    let c = pose.position.to_vector();
    let mut spans = Vec::new();
    for v in bbox.2..=bbox.3 {
        let mut start: Option<u32> = None;
        for u in bbox.0..=bbox.1 + 1 {
            let hit = u <= bbox.1 && {
                let d = r * Vector3::new((f64::from(u) - k.cx) / k.fx, (f64::from(v) - k.cy) / k.fy, 1.0);
                inside(&c, &d)
            };
            match (hit, start) {
                (true, None) => start = Some(u),
                (false, Some(s)) => {
                    spans.push(Span { row: v, start: s, len: u - s });
                    start = None;
                }
                _ => {}
            }
        }
    }
    spans
}

fn render_ground(k: &CameraIntrinsics, pose: &CameraPose, obj: &GroundObject) -> Option<Vec<Span>> {
    let e = obj.extent();
    let o = obj.center.to_vector();
    let corners: Vec<Vector3<f64>> =
        [(-e, -e), (e, -e), (e, e), (-e, e)].iter().map(|(x, y)| o + Vector3::new(*x, *y, 0.0)).collect();
    let bbox = inner_bbox(k, pose, &corners)?;
    let spans = rasterize(bbox, k, pose, |c, d| {
        if d.z >= 0.0 {
            return false;
        }
        let s = -c.z / d.z;
        obj.contains(c.x + d.x * s, c.y + d.y * s)
    });
    (!spans.is_empty()).then_some(spans)
}

/// First ray parameter at which `c + t d` (unit `d`) enters the sphere.
fn sphere_entry(c: &Vector3<f64>, d: &Vector3<f64>, center: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = c - center;
    let b = oc.dot(d);
    let disc = b * b - (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 0.0).then_some(t)
}

fn hemisphere_hit(c: &Vector3<f64>, d: &Vector3<f64>, center: &Vector3<f64>, r: f64) -> Option<f64> {
    let dn = d.normalize();
    let t = sphere_entry(c, &dn, center, r)?;
    ((c + dn * t).z >= 0.0).then_some(t)
}

fn render_shrub(k: &CameraIntrinsics, pose: &CameraPose, center: &LocalPoint, r: f64) -> Option<Vec<Span>> {
    let o = center.to_vector();
    let mut corners = Vec::with_capacity(8);
    for x in [-r, r] {
        for y in [-r, r] {
            for z in [0.0, r] {
                corners.push(o + Vector3::new(x, y, z));
            }
        }
    }
    let bbox = inner_bbox(k, pose, &corners)?;
    let spans = rasterize(bbox, k, pose, |c, d| hemisphere_hit(c, d, &o, r).is_some());
    (!spans.is_empty()).then_some(spans)
}

/// Range returns from shrubs and the ground ring around them, as seen
/// from `origin` (true coordinates).
fn scan_points(origin: &Vector3<f64>, shrubs: &[(LocalPoint, f64)], f: &FrontCameraParams) -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    let visible = |p: &Vector3<f64>| {
        let d = p - origin;
        let len = d.norm();
        shrubs.iter().all(|(s, r)| {
            hemisphere_hit(origin, &d, &s.to_vector(), *r).is_none_or(|t| t >= len - 1e-6)
        })
    };
    for (s, r) in shrubs {
        let c = s.to_vector();
        if (c - origin).xy().norm() > f.max_range {
            continue;
        }
        let rings = ((PI / 2.0 * r) / f.surface_spacing).ceil().max(1.0) as usize;
        for i in 0..rings {
            let elev = (i as f64 + 0.5) / rings as f64 * PI / 2.0;
            let ring_r = r * elev.cos();
            let n = ((2.0 * PI * ring_r) / f.surface_spacing).ceil().max(1.0) as usize;
            for j in 0..n {
                let az = j as f64 / n as f64 * 2.0 * PI;
                let p = c + Vector3::new(ring_r * az.cos(), ring_r * az.sin(), r * elev.sin());
                if visible(&p) {
                    pts.push(p);
                }
            }
        }
        let step = 0.15;
        let outer = r + 0.6;
        let cells = (outer / step).ceil() as i32;
        for i in -cells..=cells {
            for j in -cells..=cells {
                let (x, y) = (f64::from(i) * step, f64::from(j) * step);
                let rho = x.hypot(y);
                if rho < r + 0.05 || rho > outer {
                    continue;
                }
                let p = c + Vector3::new(x, y, 0.0);
                if visible(&p) {
                    pts.push(p);
                }
            }
        }
    }
    pts
}

struct SimFrame {
    t: f64,
    camera: &'static str,
    pose: CameraPose,
    error: [f64; 2],
    masks: Vec<(SegmentMask, MaskSource)>,
}

struct SimScan {
    t: f64,
    origin: LocalPoint,
    points: Vec<LocalPoint>,
}

struct PlotSurvey {
    frames: Vec<SimFrame>,
    scans: Vec<SimScan>,
    duration: f64,
}

fn survey_plot(
    world: &GroundTruth,
    plot: &PlotTruth,
    season: u32,
    noise: &NoiseModel,
    traj: &TrajectoryParams,
) -> PlotSurvey {
    let mut rng = ChaCha8Rng::seed_from_u64(world.config.rng_seed);
    rng.set_stream((u64::from(season) + 1) << 32 | plot.index as u64);
    let objects = ground_objects(world, plot.index, season);
    let shrubs: Vec<(LocalPoint, f64)> = world
        .plants
        .iter()
        .filter(|p| p.plot == plot.index && p.species == Species::Shrub && p.alive(season))
        .map(|p| (p.position, p.radius[season as usize]))
        .collect();
    let (row_sigma, frame_sigma) = noise.local_sigmas();
    let bound = noise.bound();
    let drift = [gauss(&mut rng, noise.pose_noise_sigma), gauss(&mut rng, noise.pose_noise_sigma)];

    let k = &traj.down_intrinsics;
    let half_w = f64::from(k.width) / 2.0 * traj.down_height / k.fx;
    let half_h = f64::from(k.height) / 2.0 * traj.down_height / k.fy;
    let span = plot.size + 2.0 * traj.edge_margin;
    let n_rows = (span / traj.row_spacing).floor() as usize + 1;
    let n_cols = (span / traj.frame_spacing).floor() as usize + 1;
    let dt = traj.frame_spacing / traj.speed;

    let mut frames = Vec::new();
    let mut scans = Vec::new();
    let mut t = 0.0;
    for row in 0..n_rows {
        let north = plot.origin.north - traj.edge_margin + row as f64 * traj.row_spacing;
        let row_dev = [gauss(&mut rng, row_sigma), gauss(&mut rng, row_sigma)];
        let eastward = row % 2 == 0;
        for col in 0..n_cols {
            let step = if eastward { col } else { n_cols - 1 - col };
            let east = plot.origin.east - traj.edge_margin + step as f64 * traj.frame_spacing;
            let mut e = [
                drift[0] + row_dev[0] + gauss(&mut rng, frame_sigma),
                drift[1] + row_dev[1] + gauss(&mut rng, frame_sigma),
            ];
            let mag = e[0].hypot(e[1]);
            if mag > bound {
                e = [e[0] * bound / mag, e[1] * bound / mag];
            }
            let offset = Vector3::new(e[0], e[1], 0.0);
            let yaw = if eastward { 0.0 } else { 180.0 };
            let true_pose = CameraPose::nadir(LocalPoint::new(east, north, traj.down_height), yaw);
            let reported = CameraPose::new(
                LocalPoint::from_vector(&(true_pose.position.to_vector() + offset)),
                true_pose.orientation,
            );

            let mut masks = Vec::new();
            for obj in &objects {
                let reach = obj.extent();
                if (obj.center.east - east).abs() > half_w + reach || (obj.center.north - north).abs() > half_h + reach {
                    continue;
                }
                let missed = rng.random::<f64>() < noise.detection_miss_rate;
                let color = noisy_color(&mut rng, obj.color, noise.descriptor_noise_sigma);
                if missed {
                    continue;
                }
                if let Some(spans) = render_ground(k, &true_pose, obj) {
                    let mut m = SegmentMask::from_spans(0, 0, k.width, k.height, &spans);
                    m.color_mean = color;
                    m.color_var = [obj.texture; 3];
                    masks.push((m, obj.source));
                }
            }
            for _ in 0..poisson(&mut rng, noise.false_positive_rate) {
                let r = rng.random_range(0.02..0.05);
                let fe = east + rng.random_range(-(half_w - r - 0.05)..(half_w - r - 0.05));
                let fn_ = north + rng.random_range(-(half_h - r - 0.05)..(half_h - r - 0.05));
                let obj = GroundObject {
                    source: MaskSource::False,
                    center: LocalPoint::new(fe, fn_, 0.0),
                    shape: Footprint::Disc { r },
                    color: noisy_color(&mut rng, Species::Forb.base_color(), 0.03),
                    texture: 0.003,
                };
                if let Some(spans) = render_ground(k, &true_pose, &obj) {
                    let mut m = SegmentMask::from_spans(0, 0, k.width, k.height, &spans);
                    m.color_mean = obj.color;
                    m.color_var = [obj.texture; 3];
                    masks.push((m, MaskSource::False));
                }
            }
            frames.push(SimFrame { t, camera: "down", pose: reported, error: e, masks });

            if let Some(f) = &traj.front {
                if col % f.every == 0 {
                    let azimuth = if eastward { 90.0 } else { 270.0 };
                    let true_front = CameraPose::forward(LocalPoint::new(east, north, f.height), azimuth, f.pitch_deg);
                    let mut masks = Vec::new();
                    for (i, (s, r)) in shrubs.iter().enumerate() {
                        if (s.to_vector() - true_front.position.to_vector()).xy().norm() > f.max_range {
                            continue;
                        }
                        let missed = rng.random::<f64>() < noise.detection_miss_rate;
                        let color = noisy_color(&mut rng, Species::Shrub.base_color(), noise.descriptor_noise_sigma);
                        if missed {
                            continue;
                        }
                        if let Some(spans) = render_shrub(&f.intrinsics, &true_front, s, *r) {
                            let mut m = SegmentMask::from_spans(0, 0, f.intrinsics.width, f.intrinsics.height, &spans);
                            m.color_mean = color;
                            m.color_var = [0.004; 3];
                            let id = world
                                .plants
                                .iter()
                                .filter(|p| p.plot == plot.index && p.species == Species::Shrub && p.alive(season))
                                .nth(i)
                                .map(|p| p.plant_id)
                                .expect("shrub index");
                            masks.push((m, MaskSource::Plant(id)));
                        }
                    }
                    let reported_front = CameraPose::new(
                        LocalPoint::from_vector(&(true_front.position.to_vector() + offset)),
                        true_front.orientation,
                    );
                    frames.push(SimFrame { t: t + 0.01, camera: "front", pose: reported_front, error: e, masks });
                    let lidar = Vector3::new(east, north, f.lidar_height);
                    let pts = scan_points(&lidar, &shrubs, f);
                    if !pts.is_empty() {
                        scans.push(SimScan {
                            t: t + 0.01,
                            origin: LocalPoint::from_vector(&(lidar + offset)),
                            points: pts.iter().map(|p| LocalPoint::from_vector(&(p + offset))).collect(),
                        });
                    }
                }
            }
            t += dt;
        }
    }
    PlotSurvey { frames, scans, duration: t }
}

/// One survey of every plot in `season`: down-facing masks of ConMods,
/// plants and microsites (only masks that lie fully inside the image),
/// front-facing shrub masks with range scans, and reported poses carrying
/// the noise model's error. Masks leave the class label empty for the
/// classifier.
pub fn simulate_deployment(
    world: &GroundTruth,
    season: u32,
    noise: &NoiseModel,
    traj: &TrajectoryParams,
) -> Result<SimulatedSession, SimError> {
    if season >= world.config.seasons {
        return Err(SimError::SeasonOutOfRange { season, seasons: world.config.seasons });
    }
    noise.validate()?;
    traj.validate()?;
    let surveys: Vec<PlotSurvey> = world.plots.par_iter().map(|p| survey_plot(world, p, season, noise, traj)).collect();

    let id = session_id(season);
    let mut frames = Vec::new();
    let mut all_masks = Vec::new();
    let mut truth = SessionTruth { session_id: id.clone(), season, masks: Vec::new(), pose_errors: Vec::new() };
    let mut scans = Vec::new();
    let mut base = 0.0;
    let mut next_frame = 1u64;
    for survey in surveys {
        for f in survey.frames {
            let frame_id = next_frame;
            next_frame += 1;
            for (mask_id, (mut m, source)) in f.masks.into_iter().enumerate() {
                m.frame_id = frame_id;
                m.mask_id = mask_id as u32;
                truth.masks.push(MaskTruth { frame_id, mask_id: m.mask_id, source });
                all_masks.push(m);
            }
            truth.pose_errors.push(PoseErrorRecord { frame_id, east: f.error[0], north: f.error[1] });
            let var = noise.horizontal_variance();
            let mut cov = Matrix6::zeros();
            cov[(0, 0)] = var;
            cov[(1, 1)] = var;
            frames.push(FrameRecord {
                frame_id,
                timestamp: base + f.t,
                camera_id: f.camera.into(),
                pose: f.pose,
                pose_covariance: cov,
                ground_height: 0.0,
            });
        }
        for s in survey.scans {
            scans.push(ScanRecord { scan_id: scans.len() as u64 + 1, timestamp: base + s.t, origin: s.origin, points: s.points });
        }
        base += survey.duration + traj.transit_time;
    }
    let mut cameras =
        vec![CameraCalibration { camera_id: "down".into(), kind: CameraKind::DownFacing, intrinsics: traj.down_intrinsics }];
    if let Some(f) = &traj.front {
        cameras.push(CameraCalibration { camera_id: "front".into(), kind: CameraKind::FrontFacing, intrinsics: f.intrinsics });
    }
    let manifest = SessionManifest {
        session_id: id,
        season_tag: season_tag(season),
        season_time: f64::from(season),
        origin: world.frame.origin,
        cameras,
        frames,
        files: DataFiles::default(),
    };
    Ok(SimulatedSession { session: Session { manifest, masks: all_masks, scans }, truth })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub matches: usize,
    pub correct: usize,
    /// Both sides are plants, but different ones.
    pub wrong_plant: usize,
    /// At least one side has no plant as its majority source.
    pub non_plant: usize,
    /// Plants that are the majority source of an instance in both maps.
    pub persisting: usize,
    /// Persisting plants with a correct match.
    pub recovered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No matches were made; precision is reported as 1.
    pub precision_undefined: bool,
    /// No plant persisted; recall is reported as 1.
    pub recall_undefined: bool,
    pub confusion: Confusion,
}

impl AssociationMetrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let precision_undefined = c.matches == 0;
        let recall_undefined = c.persisting == 0;
        let precision = if precision_undefined { 1.0 } else { c.correct as f64 / c.matches as f64 };
        let recall = if recall_undefined { 1.0 } else { c.recovered as f64 / c.persisting as f64 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1, precision_undefined, recall_undefined, confusion: c }
    }
}

/// Majority mask source of an instance; ties go to the smallest source.
pub fn majority_source(
    inst: &crate::season_map::LandmarkInstance,
    sources: &BTreeMap<(u64, u32), MaskSource>,
    session: &str,
) -> Result<MaskSource, SimError> {
    let mut counts: BTreeMap<MaskSource, usize> = BTreeMap::new();
    for o in &inst.observations {
        let s = sources.get(&(o.frame_id, o.mask_id)).ok_or_else(|| SimError::UnknownMask {
            session: session.into(),
            frame: o.frame_id,
            mask: o.mask_id,
        })?;
        *counts.entry(*s).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    Ok(counts.into_iter().find(|(_, c)| *c == best).map(|(s, _)| s).unwrap_or(MaskSource::False))
}

fn plant_sources(
    map: &SeasonMap,
    truth: &SessionTruth,
    classes: &BTreeSet<ClassLabel>,
) -> Result<BTreeMap<u64, MaskSource>, SimError> {
    let index = truth.source_index();
    map.all_instances()
        .filter(|i| classes.contains(&i.class_label))
        .map(|i| Ok((i.instance_id, majority_source(i, &index, &map.session_id)?)))
        .collect()
}

/// Scores matches between `map_a` and `map_b` against the simulator's
/// truth. A match is correct when both instances have the same plant as
/// their majority source; recall is over plants that are the majority
/// source of some instance of `classes` in both maps.
pub fn evaluate_association(
    matches: &[CrossSeasonMatch],
    map_a: &SeasonMap,
    map_b: &SeasonMap,
    truth_a: &SessionTruth,
    truth_b: &SessionTruth,
    classes: &[ClassLabel],
) -> Result<AssociationMetrics, SimError> {
    let classes: BTreeSet<ClassLabel> = classes.iter().copied().collect();
    let src_a = plant_sources(map_a, truth_a, &classes)?;
    let src_b = plant_sources(map_b, truth_b, &classes)?;
    let plants = |m: &BTreeMap<u64, MaskSource>| -> BTreeSet<u64> {
        m.values().filter_map(|s| if let MaskSource::Plant(p) = s { Some(*p) } else { None }).collect()
    };
    let persisting: BTreeSet<u64> = plants(&src_a).intersection(&plants(&src_b)).copied().collect();
    let lookup = |map: &SeasonMap, src: &BTreeMap<u64, MaskSource>, id: u64| -> Result<MaskSource, SimError> {
        if let Some(s) = src.get(&id) {
            return Ok(*s);
        }
        let inst = map
            .instance(id)
            .ok_or_else(|| SimError::UnknownInstance { session: map.session_id.clone(), instance: id })?;
        let other_truth = if std::ptr::eq(map, map_a) { truth_a } else { truth_b };
        majority_source(inst, &other_truth.source_index(), &map.session_id)
    };
    let mut c = Confusion { matches: matches.len(), persisting: persisting.len(), ..Default::default() };
    let mut recovered = BTreeSet::new();
    for m in matches {
        let a = lookup(map_a, &src_a, m.instance_a_id)?;
        let b = lookup(map_b, &src_b, m.instance_b_id)?;
        match (a, b) {
            (MaskSource::Plant(x), MaskSource::Plant(y)) if x == y => {
                c.correct += 1;
                if persisting.contains(&x) {
                    recovered.insert(x);
                }
            }
            (MaskSource::Plant(_), MaskSource::Plant(_)) => c.wrong_plant += 1,
            _ => c.non_plant += 1,
        }
    }
    c.recovered = recovered.len();
    Ok(AssociationMetrics::from_confusion(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::MatchMode;
    use crate::perception::{mask_shape, LandmarkObservation};
    use crate::season_map::LandmarkInstance;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn small_world(seed: u64) -> WorldConfig {
        WorldConfig {
            plot_count: 3,
            plots_per_treatment: 1,
            plot_size: 4.0,
            conmod_grid: 2,
            rng_seed: seed,
            ..Default::default()
        }
    }

    fn fast_traj() -> TrajectoryParams {
        TrajectoryParams { front: None, ..Default::default() }
    }

    #[test]
    fn default_world_layout() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(w.plots.len(), 18);
        for t in [Treatment::DrillSeeded, Treatment::Conmod, Treatment::Control] {
            assert_eq!(w.plots.iter().filter(|p| p.treatment == t).count(), 6);
        }
        assert_eq!(w.conmods.len(), 6 * 9);
        for p in &w.plants {
            let plot = &w.plots[p.plot];
            assert!(plot.contains(&p.position));
            assert!(p.death_season.is_none_or(|d| d >= p.birth_season));
        }
        for m in &w.microsites {
            assert!(w.plots[m.plot].contains(&m.center));
        }
        // plots do not overlap: 5 m gaps
        for a in &w.plots {
            for b in &w.plots {
                if a.index < b.index {
                    let de = (a.origin.east - b.origin.east).abs();
                    let dn = (a.origin.north - b.origin.north).abs();
                    assert!(de >= 15.0 - 1e-9 || dn >= 15.0 - 1e-9);
                }
            }
        }
        let n = w.plants.iter().filter(|p| p.species != Species::Shrub).count() as f64;
        assert!((n / (18.0 * 100.0) - 1.0).abs() < 0.1, "density {n}");
    }

    #[test]
    fn zero_density_keeps_conmods_and_microsites() {
        let w = generate_world(&WorldConfig { plant_density: 0.0, shrub_density: 0.0, ..small_world(1) }).unwrap();
        assert!(w.plants.is_empty());
        assert_eq!(w.conmods.len(), 4);
        assert!(!w.microsites.is_empty());
    }

    #[test]
    fn world_is_deterministic() {
        let a = generate_world(&small_world(9)).unwrap();
        let b = generate_world(&small_world(9)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_world(&small_world(10)).unwrap();
        assert_ne!(a.plants, c.plants);
    }

    #[test]
    fn plant_spacing_holds() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        for a in &w.plants {
            for b in &w.plants {
                if a.plant_id < b.plant_id && a.plot == b.plot && a.species != Species::Shrub && b.species != Species::Shrub {
                    assert!(hdist(&a.position, &b.position) >= 0.3);
                }
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_world(&WorldConfig { plot_count: 17, ..Default::default() }).is_err());
        assert!(generate_world(&WorldConfig { hazard_rate: -1.0, ..Default::default() }).is_err());
        assert!(NoiseModel { pose_noise_sigma: 1.0, pose_noise_max: 0.5, ..NoiseModel::noiseless() }.validate().is_err());
    }

    #[test]
    fn no_recruitment_means_non_increasing_counts() {
        let w = generate_world(&WorldConfig { hazard_rate: 0.5, ..Default::default() }).unwrap();
        let counts: Vec<usize> = (0..4).map(|s| w.plants_alive(s).count()).collect();
        assert!(counts.windows(2).all(|c| c[1] <= c[0]), "{counts:?}");
        assert!(counts[3] < counts[0]);
    }

    #[test]
    fn noiseless_survey_sees_every_alive_plant() {
        let w = generate_world(&small_world(3)).unwrap();
        let s = simulate_deployment(&w, 0, &NoiseModel::noiseless(), &TrajectoryParams::default()).unwrap();
        s.session.validate().unwrap();
        let seen: BTreeSet<MaskSource> = s.truth.masks.iter().map(|m| m.source).collect();
        for p in w.plants_alive(0) {
            assert!(seen.contains(&MaskSource::Plant(p.plant_id)), "plant {} unseen", p.plant_id);
        }
        for c in &w.conmods {
            assert!(seen.contains(&MaskSource::Conmod(c.conmod_id)));
        }
        assert_eq!(s.truth.masks.len(), s.session.masks.len());
        assert!(s.truth.max_pose_error() == 0.0);
        for m in &s.session.masks {
            let shape = mask_shape(m).unwrap();
            assert!(shape.bbox.u_min > 0 && shape.bbox.v_min > 0);
            assert!(shape.bbox.u_max < m.width - 1 && shape.bbox.v_max < m.height - 1);
        }
    }

    #[test]
    fn full_miss_rate_leaves_only_false_masks() {
        let w = generate_world(&small_world(4)).unwrap();
        let noise = NoiseModel { detection_miss_rate: 1.0, false_positive_rate: 0.2, ..NoiseModel::noiseless() };
        let s = simulate_deployment(&w, 0, &noise, &fast_traj()).unwrap();
        assert!(!s.truth.masks.is_empty());
        assert!(s.truth.masks.iter().all(|m| m.source == MaskSource::False));
    }

    #[test]
    fn max_pose_error_near_one_meter() {
        let w = generate_world(&WorldConfig { plant_density: 0.0, microsite_density: 0.0, ..Default::default() }).unwrap();
        let s = simulate_deployment(&w, 0, &NoiseModel::for_max_error(1.0), &fast_traj()).unwrap();
        let max = s.truth.max_pose_error();
        assert!((0.8..=1.2).contains(&max), "max error {max}");
    }

    #[test]
    fn conmods_static_across_seasons() {
        let w = generate_world(&small_world(5)).unwrap();
        let pos = |season| {
            let s = simulate_deployment(&w, season, &NoiseModel::noiseless(), &fast_traj()).unwrap();
            s.truth.masks.iter().filter(|m| matches!(m.source, MaskSource::Conmod(_))).count()
        };
        assert_eq!(pos(0), pos(1));
        assert!(simulate_deployment(&w, 4, &NoiseModel::noiseless(), &fast_traj()).is_err());
    }

    #[test]
    fn deployment_is_deterministic() {
        let w = generate_world(&small_world(6)).unwrap();
        let noise = NoiseModel { false_positive_rate: 0.1, ..NoiseModel::default() };
        let a = simulate_deployment(&w, 1, &noise, &TrajectoryParams::default()).unwrap();
        let b = simulate_deployment(&w, 1, &noise, &TrajectoryParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn season_tags_alternate() {
        assert_eq!(season_tag(0), "2021-fall");
        assert_eq!(season_tag(1), "2022-spring");
        assert_eq!(season_tag(2), "2022-fall");
    }

    fn obs(frame: u64, mask: u32) -> LandmarkObservation {
        LandmarkObservation {
            frame_id: frame,
            mask_id: mask,
            timestamp: 0.0,
            class_label: ClassLabel::Vegetation,
            confidence: 1.0,
            position: LocalPoint::ORIGIN,
            position_covariance: Matrix3::zeros(),
            descriptor: vec![0.0; DESCRIPTOR_LEN],
            geo: GeoCoordinate::new(38.0, -109.0, 0.0).unwrap(),
        }
    }

    fn synthetic(id: &str, sources: &[Vec<MaskSource>]) -> (SeasonMap, SessionTruth) {
        let mut truth = SessionTruth { session_id: id.into(), season: 0, masks: vec![], pose_errors: vec![] };
        let mut instances = Vec::new();
        let mut frame = 1;
        for (i, srcs) in sources.iter().enumerate() {
            let mut observations = Vec::new();
            for s in srcs {
                truth.masks.push(MaskTruth { frame_id: frame, mask_id: 0, source: *s });
                observations.push(obs(frame, 0));
                frame += 1;
            }
            instances.push(LandmarkInstance {
                instance_id: i as u64 + 1,
                class_label: ClassLabel::Vegetation,
                mean_position: LocalPoint::ORIGIN,
                mean_geo: observations[0].geo,
                position_spread: Matrix3::zeros(),
                descriptor_mean: vec![0.0; DESCRIPTOR_LEN],
                observations,
                anchor_offsets: vec![],
            });
        }
        let map = SeasonMap {
            session_id: id.into(),
            season_tag: id.into(),
            season_time: 0.0,
            frame: LocalFrame::new(GeoCoordinate::new(38.0, -109.0, 0.0).unwrap()).unwrap(),
            instances,
            static_anchors: vec![],
            trajectory: vec![],
        };
        (map, truth)
    }

    fn m(a: u64, b: u64) -> CrossSeasonMatch {
        CrossSeasonMatch {
            instance_a_id: a,
            instance_b_id: b,
            class_label: ClassLabel::Vegetation,
            mahalanobis_distance: 0.0,
            descriptor_distance: 0.0,
            method: MatchMode::LocationOnly,
        }
    }

    #[test]
    fn perfect_and_empty_matchings() {
        use MaskSource::Plant;
        let (a, ta) = synthetic("a", &[vec![Plant(1)], vec![Plant(2)]]);
        let (b, tb) = synthetic("b", &[vec![Plant(2)], vec![Plant(1)]]);
        let classes = [ClassLabel::Vegetation];
        let r = evaluate_association(&[m(1, 2), m(2, 1)], &a, &b, &ta, &tb, &classes).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = evaluate_association(&[], &a, &b, &ta, &tb, &classes).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 0.0));
        assert!(r.precision_undefined);
        assert!(matches!(
            evaluate_association(&[m(1, 9)], &a, &b, &ta, &tb, &classes),
            Err(SimError::UnknownInstance { instance: 9, .. })
        ));
    }

    #[test]
    fn majority_breaks_ties_low() {
        use MaskSource::*;
        let (a, ta) = synthetic("a", &[vec![Plant(3), Plant(2), False, Plant(2), Plant(3)]]);
        let got = majority_source(&a.instances[0], &ta.source_index(), "a").unwrap();
        assert_eq!(got, Plant(2));
    }

    fn source_strategy() -> impl Strategy<Value = Vec<Vec<MaskSource>>> {
        let src = prop_oneof![(1u64..6).prop_map(MaskSource::Plant), Just(MaskSource::False)];
        prop::collection::vec(prop::collection::vec(src, 1..4), 1..7)
    }

    proptest! {
        #[test]
        fn metrics_match_hand_count(sa in source_strategy(), sb in source_strategy(), picks in prop::collection::vec((0usize..7, 0usize..7), 0..7)) {
            let (a, ta) = synthetic("a", &sa);
            let (b, tb) = synthetic("b", &sb);
            // one-to-one matches from the picks
            let mut used_a = BTreeSet::new();
            let mut used_b = BTreeSet::new();
            let mut matches = Vec::new();
            for (i, j) in picks {
                if i < sa.len() && j < sb.len() && used_a.insert(i) && used_b.insert(j) {
                    matches.push(m(i as u64 + 1, j as u64 + 1));
                }
            }
            let r = evaluate_association(&matches, &a, &b, &ta, &tb, &[ClassLabel::Vegetation]).unwrap();

            let majority = |srcs: &Vec<MaskSource>| {
                let mut best = (0usize, MaskSource::False);
                let mut uniq: Vec<MaskSource> = srcs.clone();
                uniq.sort();
                uniq.dedup();
                for s in uniq {
                    let n = srcs.iter().filter(|x| **x == s).count();
                    if n > best.0 { best = (n, s); }
                }
                best.1
            };
            let ma: Vec<MaskSource> = sa.iter().map(majority).collect();
            let mb: Vec<MaskSource> = sb.iter().map(majority).collect();
            let mut persisting = 0;
            for p in 1..6 {
                if ma.contains(&MaskSource::Plant(p)) && mb.contains(&MaskSource::Plant(p)) { persisting += 1; }
            }
            let mut correct = 0;
            let mut recovered = BTreeSet::new();
            for x in &matches {
                let (s, t) = (ma[x.instance_a_id as usize - 1], mb[x.instance_b_id as usize - 1]);
                if let (MaskSource::Plant(p), MaskSource::Plant(q)) = (s, t) {
                    if p == q { correct += 1; recovered.insert(p); }
                }
            }
            prop_assert_eq!(r.confusion.correct, correct);
            prop_assert_eq!(r.confusion.persisting, persisting);
            let precision = if matches.is_empty() { 1.0 } else { correct as f64 / matches.len() as f64 };
            let recall = if persisting == 0 { 1.0 } else { recovered.len() as f64 / persisting as f64 };
            prop_assert!((r.precision - precision).abs() < 1e-12);
            prop_assert!((r.recall - recall).abs() < 1e-12);
        }
    }
}

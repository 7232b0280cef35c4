//! End-to-end stages over an output directory, plus in-memory runs used
//! by the reporter's noise sweep and by tests.
//!
//! Directory layout under the output root:
//!
//! ```text
//! truth/world.json            ground truth (sidecar, never read by map/associate)
//! truth/<session>.json        per-session mask sources and pose errors
//! sessions/<session>/         manifest.json, masks.json, scans.json
//! maps/<session>.map.json     season map
//! maps/<session>.stats.json   mapping counters
//! maps/<session>.octree       binary occupancy dump (sessions with scans)
//! association/association.json, association/matches.csv
//! evaluation/metrics.json, evaluation/metrics.csv
//! report/*.csv, report/*.svg
//! ```

use crate::association::{associate_seasons, AssociationError, AssociationResult, MatchMode};
use crate::config::{ConfigError, PipelineConfig};
use crate::io::{self, Artifact, IoError};
use crate::report;
use crate::season_map::{build_season_map, MapOutput, SeasonMap, SeasonMapError};
use crate::session::Session;
use crate::simulator::{
    evaluate_association, generate_world, simulate_deployment, AssociationMetrics, GroundTruth, NoiseModel, SessionTruth,
    SimError, SimulatedSession,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("mapping session {session}: {source}")]
    Map { session: String, source: SeasonMapError },
    #[error(transparent)]
    Association(#[from] AssociationError),
    #[error("no {what} found under {path}")]
    NothingToDo { what: &'static str, path: PathBuf },
    #[error("session id mismatch: expected '{expected}', found '{found}'")]
    SessionMismatch { expected: String, found: String },
    #[error("csv output: {0}")]
    Csv(String),
}

impl PipelineError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Io(e) => e.kind(),
            PipelineError::Sim(_) => "simulator",
            PipelineError::Map { .. } => "mapping",
            PipelineError::Association(_) => "association",
            PipelineError::NothingToDo { .. } => "missing_input",
            PipelineError::SessionMismatch { .. } => "session_mismatch",
            PipelineError::Csv(_) => "csv",
        }
    }
}

fn csv_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Csv(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub session_a: String,
    pub session_b: String,
    pub metrics: AssociationMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: MatchMode,
    pub pairs: Vec<PairMetrics>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
}

impl Artifact for EvaluationReport {
    const KIND: &'static str = "metrics";
}

/// Paths of every artifact under one output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn world_truth(&self) -> PathBuf {
        self.root.join("truth/world.json")
    }
    pub fn session_truth(&self, id: &str) -> PathBuf {
        self.root.join(format!("truth/{id}.json"))
    }
    pub fn sessions_dir(&self) -> PathBuf {
        self.root.join("sessions")
    }
    pub fn maps_dir(&self) -> PathBuf {
        self.root.join("maps")
    }
    pub fn map(&self, id: &str) -> PathBuf {
        self.maps_dir().join(format!("{id}.map.json"))
    }
    pub fn map_stats(&self, id: &str) -> PathBuf {
        self.maps_dir().join(format!("{id}.stats.json"))
    }
    pub fn octree(&self, id: &str) -> PathBuf {
        self.maps_dir().join(format!("{id}.octree"))
    }
    pub fn association(&self) -> PathBuf {
        self.root.join("association/association.json")
    }
    pub fn matches_csv(&self) -> PathBuf {
        self.root.join("association/matches.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("evaluation/metrics.json")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("evaluation/metrics.csv")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// World plus simulated sessions for `seasons`.
pub fn simulate(cfg: &PipelineConfig, seasons: std::ops::Range<u32>) -> Result<(GroundTruth, Vec<SimulatedSession>), PipelineError> {
    let world = generate_world(&cfg.world_config())?;
    let sessions = seasons
        .map(|s| simulate_deployment(&world, s, &cfg.noise, &cfg.trajectory))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((world, sessions))
}

pub fn map_session(cfg: &PipelineConfig, session: &Session) -> Result<MapOutput, PipelineError> {
    build_season_map(session, &cfg.map_config(), &cfg.classifier)
        .map_err(|source| PipelineError::Map { session: session.manifest.session_id.clone(), source })
}

/// Scores every season pair against the truth sidecars. Each map's truth
/// must carry the same session id.
pub fn evaluate_result(
    cfg: &PipelineConfig,
    result: &AssociationResult,
    maps: &BTreeMap<String, SeasonMap>,
    truths: &BTreeMap<String, SessionTruth>,
) -> Result<EvaluationReport, PipelineError> {
    let lookup = |id: &str| -> Result<(&SeasonMap, &SessionTruth), PipelineError> {
        let map = maps.get(id).ok_or_else(|| PipelineError::SessionMismatch {
            expected: id.into(),
            found: maps.keys().cloned().collect::<Vec<_>>().join(", "),
        })?;
        let truth = truths.get(id).ok_or_else(|| PipelineError::SessionMismatch {
            expected: id.into(),
            found: truths.keys().cloned().collect::<Vec<_>>().join(", "),
        })?;
        if truth.session_id != map.session_id {
            return Err(PipelineError::SessionMismatch { expected: map.session_id.clone(), found: truth.session_id.clone() });
        }
        Ok((map, truth))
    };
    let mut pairs = Vec::new();
    for p in &result.pairs {
        let (ma, ta) = lookup(&p.session_a)?;
        let (mb, tb) = lookup(&p.session_b)?;
        let metrics = evaluate_association(&p.matches, ma, mb, ta, tb, &cfg.evaluation.classes)?;
        pairs.push(PairMetrics { session_a: p.session_a.clone(), session_b: p.session_b.clone(), metrics });
    }
    let n = pairs.len().max(1) as f64;
    let mean = |f: fn(&AssociationMetrics) -> f64| pairs.iter().map(|p| f(&p.metrics)).sum::<f64>() / n;
    Ok(EvaluationReport {
        mode: cfg.association.matching.mode,
        mean_precision: mean(|m| m.precision),
        mean_recall: mean(|m| m.recall),
        mean_f1: mean(|m| m.f1),
        pairs,
    })
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub world: GroundTruth,
    pub sessions: Vec<SimulatedSession>,
    pub maps: Vec<SeasonMap>,
    pub association: AssociationResult,
    pub evaluation: EvaluationReport,
}

/// Simulate, map, associate and evaluate `seasons` without touching disk.
pub fn run_experiment(cfg: &PipelineConfig, seasons: std::ops::Range<u32>) -> Result<Experiment, PipelineError> {
    let (world, sessions) = simulate(cfg, seasons)?;
    let maps = sessions.iter().map(|s| map_session(cfg, &s.session).map(|o| o.map)).collect::<Result<Vec<_>, _>>()?;
    let association = associate_seasons(&maps, &cfg.association)?;
    let by_id: BTreeMap<String, SeasonMap> = maps.iter().map(|m| (m.session_id.clone(), m.clone())).collect();
    let truths: BTreeMap<String, SessionTruth> =
        sessions.iter().map(|s| (s.truth.session_id.clone(), s.truth.clone())).collect();
    let evaluation = evaluate_result(cfg, &association, &by_id, &truths)?;
    Ok(Experiment { world, sessions, maps, association, evaluation })
}

/// `generate`: world truth, sessions and their truth sidecars.
pub fn generate(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<String>, PipelineError> {
    let (world, sessions) = simulate(cfg, 0..cfg.world.seasons)?;
    io::write_artifact(&layout.world_truth(), &world)?;
    let mut ids = Vec::new();
    for s in &sessions {
        let id = &s.session.manifest.session_id;
        io::save_session(&layout.sessions_dir().join(id), &s.session)?;
        io::write_artifact(&layout.session_truth(id), &s.truth)?;
        ids.push(id.clone());
    }
    Ok(ids)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let rd = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(IoError::Io { path: dir.to_path_buf(), source }.into()),
    };
    let mut out = Vec::new();
    for e in rd {
        let e = e.map_err(|source| IoError::Io { path: dir.to_path_buf(), source })?;
        out.push(e.path());
    }
    out.sort();
    Ok(out)
}

/// `map`: one season map per session directory.
pub fn map(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<String>, PipelineError> {
    let manifests: Vec<PathBuf> =
        sorted_entries(&layout.sessions_dir())?.into_iter().map(|d| d.join("manifest.json")).filter(|p| p.is_file()).collect();
    if manifests.is_empty() {
        return Err(PipelineError::NothingToDo { what: "sessions", path: layout.sessions_dir() });
    }
    let mut ids = Vec::new();
    for m in manifests {
        let session = io::load_session(&m)?;
        let out = map_session(cfg, &session)?;
        let id = out.map.session_id.clone();
        io::write_artifact(&layout.map(&id), &out.map)?;
        io::write_artifact(&layout.map_stats(&id), &out.stats)?;
        if let Some(tree) = &out.octree {
            let mut buf = Vec::new();
            tree.write_dump(&mut buf).map_err(|e| PipelineError::Map { session: id.clone(), source: e.into() })?;
            io::write_atomic(&layout.octree(&id), &buf)?;
        }
        ids.push(id);
    }
    Ok(ids)
}

pub fn load_maps(layout: &Layout) -> Result<Vec<SeasonMap>, PipelineError> {
    let paths: Vec<PathBuf> = sorted_entries(&layout.maps_dir())?
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(".map.json")))
        .collect();
    if paths.is_empty() {
        return Err(PipelineError::NothingToDo { what: "season maps", path: layout.maps_dir() });
    }
    paths.iter().map(|p| io::read_artifact(p).map_err(Into::into)).collect()
}

/// Final persistence posterior per `(session, instance)` member of a track.
fn posteriors(result: &AssociationResult) -> BTreeMap<(String, u64), f64> {
    result
        .tracks
        .iter()
        .flat_map(|t| t.members.iter().map(move |m| (m.clone(), t.belief.survival_posterior)))
        .collect()
}

pub fn matches_csv(result: &AssociationResult) -> Result<Vec<u8>, PipelineError> {
    let post = posteriors(result);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "session_a",
        "session_b",
        "instance_a",
        "instance_b",
        "class",
        "mahalanobis_d2",
        "descriptor_distance",
        "method",
        "posterior",
    ])
    .map_err(csv_err)?;
    for p in &result.pairs {
        for m in &p.matches {
            let posterior = post.get(&(p.session_b.clone(), m.instance_b_id)).copied().unwrap_or(f64::NAN);
            w.write_record([
                p.session_a.clone(),
                p.session_b.clone(),
                m.instance_a_id.to_string(),
                m.instance_b_id.to_string(),
                m.class_label.to_string(),
                format!("{:.6}", m.mahalanobis_distance),
                format!("{:.6}", m.descriptor_distance),
                m.method.to_string(),
                format!("{posterior:.6}"),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(csv_err)
}

/// `associate`: cross-season matches and persistence tracks.
pub fn associate(cfg: &PipelineConfig, layout: &Layout) -> Result<AssociationResult, PipelineError> {
    let maps = load_maps(layout)?;
    let result = associate_seasons(&maps, &cfg.association)?;
    io::write_artifact(&layout.association(), &result)?;
    io::write_atomic(&layout.matches_csv(), &matches_csv(&result)?)?;
    Ok(result)
}

fn metrics_csv(report: &EvaluationReport) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["session_a", "session_b", "mode", "precision", "recall", "f1", "matches", "correct", "persisting"])
        .map_err(csv_err)?;
    for p in &report.pairs {
        let m = &p.metrics;
        w.write_record([
            p.session_a.clone(),
            p.session_b.clone(),
            report.mode.to_string(),
            format!("{:.6}", m.precision),
            format!("{:.6}", m.recall),
            format!("{:.6}", m.f1),
            m.confusion.matches.to_string(),
            m.confusion.correct.to_string(),
            m.confusion.persisting.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

/// `evaluate`: precision, recall and F1 per season pair.
pub fn evaluate(cfg: &PipelineConfig, layout: &Layout) -> Result<EvaluationReport, PipelineError> {
    let result: AssociationResult = io::read_artifact(&layout.association())?;
    let maps: BTreeMap<String, SeasonMap> = load_maps(layout)?.into_iter().map(|m| (m.session_id.clone(), m)).collect();
    let mut truths = BTreeMap::new();
    for id in maps.keys() {
        let t: SessionTruth = io::read_artifact(&layout.session_truth(id))?;
        truths.insert(id.clone(), t);
    }
    let mut report = evaluate_result(cfg, &result, &maps, &truths)?;
    // the mode that produced the matches, not the one in the current config
    if let Some(m) = result.pairs.iter().flat_map(|p| &p.matches).next() {
        report.mode = m.method;
    }
    io::write_artifact(&layout.metrics(), &report)?;
    io::write_atomic(&layout.metrics_csv(), &metrics_csv(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma: f64,
    pub mode: MatchMode,
    pub mean_f1: f64,
}

/// Mean F1 of both matching modes over seasons 0 and 1 for each drift
/// sigma in `sigmas`.
pub fn noise_sweep(cfg: &PipelineConfig, sigmas: &[f64]) -> Result<Vec<SweepPoint>, PipelineError> {
    let mut out = Vec::new();
    let seasons = 0..cfg.world.seasons.min(2);
    for &sigma in sigmas {
        let noise = NoiseModel { pose_noise_sigma: sigma, pose_noise_max: 2.0 * sigma, ..cfg.noise.clone() };
        let mut sums = BTreeMap::new();
        for k in 0..cfg.report.sweep_seeds {
            let run = PipelineConfig { noise: noise.clone(), ..cfg.clone() }.with_seed(cfg.seed + k);
            let (_, sessions) = simulate(&run, seasons.clone())?;
            let maps =
                sessions.iter().map(|s| map_session(&run, &s.session).map(|o| o.map)).collect::<Result<Vec<_>, _>>()?;
            let by_id: BTreeMap<String, SeasonMap> = maps.iter().map(|m| (m.session_id.clone(), m.clone())).collect();
            let truths: BTreeMap<String, SessionTruth> =
                sessions.iter().map(|s| (s.truth.session_id.clone(), s.truth.clone())).collect();
            for mode in [MatchMode::LocationOnly, MatchMode::AnchorRelative] {
                let mc = run.clone().with_mode(mode);
                let f1 = match associate_seasons(&maps, &mc.association) {
                    Ok(r) => evaluate_result(&mc, &r, &by_id, &truths)?.mean_f1,
                    // too few anchors to match anything
                    Err(AssociationError::InsufficientAnchors { .. }) => 0.0,
                    Err(e) => return Err(e.into()),
                };
                *sums.entry(mode).or_insert(0.0) += f1;
            }
        }
        for (mode, s) in sums {
            out.push(SweepPoint { sigma, mode, mean_f1: s / cfg.report.sweep_seeds as f64 });
        }
    }
    Ok(out)
}

/// `report`: match tables, distance histogram and the F1-vs-noise sweep.
pub fn report(cfg: &PipelineConfig, layout: &Layout, sweep: Option<&[f64]>) -> Result<Vec<PathBuf>, PipelineError> {
    let dir = layout.report_dir();
    let result: AssociationResult = io::read_artifact(&layout.association())?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<(), PipelineError> {
        let p = dir.join(name);
        io::write_atomic(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("matches.csv", &matches_csv(&result)?)?;
    let d2: Vec<f64> = result.pairs.iter().flat_map(|p| p.matches.iter().map(|m| m.mahalanobis_distance)).collect();
    let svg = report::histogram_svg(
        &d2,
        cfg.report.histogram_bins,
        "Cross-season match distances",
        "squared Mahalanobis distance",
    );
    put("match_distance_histogram.svg", svg.as_bytes())?;
    if layout.metrics().is_file() {
        let m: EvaluationReport = io::read_artifact(&layout.metrics())?;
        put("metrics.csv", &metrics_csv(&m)?)?;
    }

    let sigmas = sweep.unwrap_or(&cfg.report.noise_sweep);
    if !sigmas.is_empty() {
        let points = noise_sweep(cfg, sigmas)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sigma", "mode", "mean_f1"]).map_err(csv_err)?;
        for p in &points {
            w.write_record([format!("{:.6}", p.sigma), p.mode.to_string(), format!("{:.6}", p.mean_f1)]).map_err(csv_err)?;
        }
        put("f1_vs_noise.csv", &w.into_inner().map_err(csv_err)?)?;
        let series: Vec<(String, Vec<(f64, f64)>)> = [MatchMode::LocationOnly, MatchMode::AnchorRelative]
            .iter()
            .map(|mode| {
                let pts = points.iter().filter(|p| p.mode == *mode).map(|p| (p.sigma, p.mean_f1)).collect();
                (mode.to_string(), pts)
            })
            .collect();
        let svg = report::line_plot_svg(&series, "Association F1 vs pose drift", "drift sigma (m)", "F1");
        put("f1_vs_noise.svg", svg.as_bytes())?;
    }
    Ok(written)
}

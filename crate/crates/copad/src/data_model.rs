//! Canonical in-memory and on-disk representation of scenes, tracks, maps,
//! and predictions.
//!
//! Scene files are newline-delimited JSON, one scene per line, with
//! coordinates as number pairs and validity masks as arrays of 0/1. All types
//! are immutable after construction and validated on load.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of agent classes (order pinned for one-hot encodings).
pub const CLASS_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Vehicle,
    Pedestrian,
    Cyclist,
    Other,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Vehicle => 0,
            ClassLabel::Pedestrian => 1,
            ClassLabel::Cyclist => 2,
            ClassLabel::Other => 3,
        }
    }

    pub fn one_hot(self) -> [f64; CLASS_COUNT] {
        let mut v = [0.0; CLASS_COUNT];
        v[self.index()] = 1.0;
        v
    }
}

/// Which sensor view produced a track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrackSource {
    #[default]
    VehicleView,
    InfrastructureView,
    Fused,
}

/// Parent lineage of a track in a fused track set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    VehicleOnly { vehicle_id: u32 },
    InfraOnly { infra_id: u32 },
    Fused { vehicle_id: u32, infra_id: u32 },
}

impl Provenance {
    pub fn vehicle_parent(&self) -> Option<u32> {
        match *self {
            Provenance::VehicleOnly { vehicle_id } | Provenance::Fused { vehicle_id, .. } => {
                Some(vehicle_id)
            }
            Provenance::InfraOnly { .. } => None,
        }
    }

    pub fn infra_parent(&self) -> Option<u32> {
        match *self {
            Provenance::InfraOnly { infra_id } | Provenance::Fused { infra_id, .. } => {
                Some(infra_id)
            }
            Provenance::VehicleOnly { .. } => None,
        }
    }
}

/// One observed trajectory over `t_h` history timesteps in a shared world
/// frame. Positions at timesteps with `valid == false` carry no meaning and
/// are ignored by every consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedTrack {
    pub track_id: u32,
    pub class_label: ClassLabel,
    pub positions: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    pub source: TrackSource,
    pub provenance: Option<Provenance>,
}

impl ObservedTrack {
    pub fn history_len(&self) -> usize {
        self.positions.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn first_valid(&self) -> Option<usize> {
        self.valid.iter().position(|&v| v)
    }

    pub fn last_valid(&self) -> Option<usize> {
        self.valid.iter().rposition(|&v| v)
    }

    /// Position at `t` if that timestep is valid.
    pub fn valid_position(&self, t: usize) -> Option<[f64; 2]> {
        if t < self.valid.len() && self.valid[t] {
            Some(self.positions[t])
        } else {
            None
        }
    }

    fn validate(&self, t_h: usize, ctx: &str) -> Result<()> {
        if self.positions.len() != t_h {
            return Err(Error::Validation(format!(
                "{ctx} track {}: positions length {} != t_h {}",
                self.track_id,
                self.positions.len(),
                t_h
            )));
        }
        if self.valid.len() != t_h {
            return Err(Error::Validation(format!(
                "{ctx} track {}: valid mask length {} != t_h {}",
                self.track_id,
                self.valid.len(),
                t_h
            )));
        }
        if !self.valid.iter().any(|&v| v) {
            return Err(Error::Validation(format!(
                "{ctx} track {}: no valid timestep",
                self.track_id
            )));
        }
        for (t, (p, &v)) in self.positions.iter().zip(&self.valid).enumerate() {
            if v && !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::Validation(format!(
                    "{ctx} track {}: non-finite position at valid timestep {t}",
                    self.track_id
                )));
            }
        }
        Ok(())
    }
}

/// A set of tracks from one source sharing history length and sampling
/// interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<ObservedTrack>,
    pub history_len: usize,
    pub dt: f64,
}

impl TrackSet {
    pub fn new(tracks: Vec<ObservedTrack>, history_len: usize, dt: f64) -> Self {
        TrackSet {
            tracks,
            history_len,
            dt,
        }
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn track_by_id(&self, id: u32) -> Option<&ObservedTrack> {
        self.tracks.iter().find(|t| t.track_id == id)
    }

    fn validate(&self, ctx: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for track in &self.tracks {
            track.validate(self.history_len, ctx)?;
            if !seen.insert(track.track_id) {
                return Err(Error::Validation(format!(
                    "{ctx}: duplicate track_id {}",
                    track.track_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalState {
    None,
    Green,
    Yellow,
    Red,
}

impl SignalState {
    pub fn one_hot(self) -> [f64; 4] {
        let idx = match self {
            SignalState::None => 0,
            SignalState::Green => 1,
            SignalState::Yellow => 2,
            SignalState::Red => 3,
        };
        let mut v = [0.0; 4];
        v[idx] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnFlag {
    Straight,
    Left,
    Right,
    StraightOrTurn,
}

impl TurnFlag {
    pub fn one_hot(self) -> [f64; 4] {
        let idx = match self {
            TurnFlag::Straight => 0,
            TurnFlag::Left => 1,
            TurnFlag::Right => 2,
            TurnFlag::StraightOrTurn => 3,
        };
        let mut v = [0.0; 4];
        v[idx] = 1.0;
        v
    }
}

/// One lane segment: two endpoints plus signal and turn attributes.
/// Consecutive segments sharing a `lane_id` form a polyline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub lane_id: u32,
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub signal: SignalState,
    pub turn: TurnFlag,
}

impl LaneSegment {
    pub fn midpoint(&self) -> [f64; 2] {
        [
            0.5 * (self.start[0] + self.end[0]),
            0.5 * (self.start[1] + self.end[1]),
        ]
    }

    pub fn length(&self) -> f64 {
        let dx = self.end[0] - self.start[0];
        let dy = self.end[1] - self.start[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// Unit direction from start to end; zero for degenerate segments.
    pub fn direction(&self) -> [f64; 2] {
        let len = self.length();
        if len > 0.0 {
            [
                (self.end[0] - self.start[0]) / len,
                (self.end[1] - self.start[1]) / len,
            ]
        } else {
            [0.0, 0.0]
        }
    }

    /// Euclidean distance from a point to this segment.
    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        let vx = self.end[0] - self.start[0];
        let vy = self.end[1] - self.start[1];
        let wx = p[0] - self.start[0];
        let wy = p[1] - self.start[1];
        let len2 = vx * vx + vy * vy;
        let t = if len2 > 0.0 {
            ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let dx = wx - t * vx;
        let dy = wy - t * vy;
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorMap {
    pub segments: Vec<LaneSegment>,
}

impl VectorMap {
    fn validate(&self) -> Result<()> {
        for (i, seg) in self.segments.iter().enumerate() {
            let finite = seg
                .start
                .iter()
                .chain(seg.end.iter())
                .all(|c| c.is_finite());
            if !finite {
                return Err(Error::Validation(format!(
                    "map segment {i} (lane {}): non-finite endpoint",
                    seg.lane_id
                )));
            }
        }
        Ok(())
    }
}

/// Ground-truth future for one agent: `t_f` points plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFuture {
    pub points: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

/// Maps view-local track ids to global agent ids (synthetic scenes only).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GtIdentity {
    pub vehicle: BTreeMap<u32, u32>,
    pub infra: BTreeMap<u32, u32>,
}

/// One complete scene: both observation views, the vector map, ground-truth
/// futures keyed by global agent id, and the focal agents to score.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub dt: f64,
    pub history_len: usize,
    pub future_len: usize,
    pub vehicle_tracks: TrackSet,
    pub infra_tracks: TrackSet,
    pub map: VectorMap,
    pub futures: BTreeMap<u32, AgentFuture>,
    pub gt_identity: Option<GtIdentity>,
    pub focal_ids: Vec<u32>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 {
            return Err(Error::Validation("t_h must be >= 1".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Validation(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.vehicle_tracks.history_len != self.history_len
            || self.infra_tracks.history_len != self.history_len
        {
            return Err(Error::Validation("track sets disagree on t_h".into()));
        }
        if self.vehicle_tracks.dt != self.infra_tracks.dt {
            return Err(Error::Validation("track sets disagree on dt".into()));
        }
        self.vehicle_tracks.validate("vehicle_tracks")?;
        self.infra_tracks.validate("infra_tracks")?;
        self.map.validate()?;
        for (agent, fut) in &self.futures {
            if fut.points.len() != self.future_len || fut.valid.len() != self.future_len {
                return Err(Error::Validation(format!(
                    "future for agent {agent}: length != t_f {}",
                    self.future_len
                )));
            }
            for (t, (p, &v)) in fut.points.iter().zip(&fut.valid).enumerate() {
                if v && !(p[0].is_finite() && p[1].is_finite()) {
                    return Err(Error::Validation(format!(
                        "future for agent {agent}: non-finite point at valid step {t}"
                    )));
                }
            }
        }
        for id in &self.focal_ids {
            if !self.futures.contains_key(id) {
                return Err(Error::Validation(format!(
                    "focal agent {id} has no ground-truth future"
                )));
            }
        }
        if let Some(gt) = &self.gt_identity {
            for tid in gt.vehicle.keys() {
                if self.vehicle_tracks.track_by_id(*tid).is_none() {
                    return Err(Error::Validation(format!(
                        "gt_identity references unknown vehicle track {tid}"
                    )));
                }
            }
            for tid in gt.infra.keys() {
                if self.infra_tracks.track_by_id(*tid).is_none() {
                    return Err(Error::Validation(format!(
                        "gt_identity references unknown infra track {tid}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Multi-modal predictions: `F x N x t_f x 2` world-frame trajectories plus
/// per-agent mode scores on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub num_modes: usize,
    pub num_agents: usize,
    pub future_len: usize,
    /// Flattened `[mode][agent][step][xy]`.
    pub trajectories: Vec<f64>,
    /// Flattened `[agent][mode]`.
    pub scores: Vec<f64>,
}

impl PredictionSet {
    pub fn new(
        num_modes: usize,
        num_agents: usize,
        future_len: usize,
        trajectories: Vec<f64>,
        scores: Vec<f64>,
    ) -> Result<Self> {
        let set = PredictionSet {
            num_modes,
            num_agents,
            future_len,
            trajectories,
            scores,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn point(&self, mode: usize, agent: usize, step: usize) -> [f64; 2] {
        let base = ((mode * self.num_agents + agent) * self.future_len + step) * 2;
        [self.trajectories[base], self.trajectories[base + 1]]
    }

    pub fn score(&self, agent: usize, mode: usize) -> f64 {
        self.scores[agent * self.num_modes + mode]
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.num_modes * self.num_agents * self.future_len * 2;
        if self.trajectories.len() != want {
            return Err(Error::Validation(format!(
                "prediction trajectories length {} != {}",
                self.trajectories.len(),
                want
            )));
        }
        if self.scores.len() != self.num_agents * self.num_modes {
            return Err(Error::Validation(format!(
                "prediction scores length {} != {}",
                self.scores.len(),
                self.num_agents * self.num_modes
            )));
        }
        if self.trajectories.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("prediction contains NaN/Inf".into()));
        }
        if self.scores.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(
                "prediction scores must be finite and nonnegative".into(),
            ));
        }
        for agent in 0..self.num_agents {
            let sum: f64 = (0..self.num_modes).map(|m| self.score(agent, m)).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "scores for agent {agent} sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// On-disk schema
// ---------------------------------------------------------------------------

mod mask_serde {
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(mask: &[bool], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(mask.iter().map(|&b| u8::from(b)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<bool>, D::Error> {
        let raw: Vec<u8> = Vec::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(D::Error::custom(format!(
                    "mask entry must be 0 or 1, got {other}"
                ))),
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    track_id: u32,
    class_label: ClassLabel,
    positions: Vec<[f64; 2]>,
    #[serde(with = "mask_serde")]
    valid: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct FutureRecord {
    points: Vec<[f64; 2]>,
    #[serde(with = "mask_serde")]
    valid: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    scene_id: u64,
    dt: f64,
    t_h: usize,
    t_f: usize,
    vehicle_tracks: Vec<TrackRecord>,
    infra_tracks: Vec<TrackRecord>,
    map: Vec<LaneSegment>,
    futures: BTreeMap<u32, FutureRecord>,
    gt_identity: Option<GtIdentity>,
    focal_ids: Vec<u32>,
}

fn track_to_record(t: &ObservedTrack) -> TrackRecord {
    TrackRecord {
        track_id: t.track_id,
        class_label: t.class_label,
        positions: t.positions.clone(),
        valid: t.valid.clone(),
        provenance: t.provenance,
    }
}

fn record_to_track(r: TrackRecord, slot_source: TrackSource) -> ObservedTrack {
    let source = match r.provenance {
        Some(Provenance::Fused { .. }) => TrackSource::Fused,
        Some(Provenance::VehicleOnly { .. }) => TrackSource::VehicleView,
        Some(Provenance::InfraOnly { .. }) => TrackSource::InfrastructureView,
        None => slot_source,
    };
    ObservedTrack {
        track_id: r.track_id,
        class_label: r.class_label,
        positions: r.positions,
        valid: r.valid,
        source,
        provenance: r.provenance,
    }
}

fn scene_to_record(scene: &Scene) -> SceneRecord {
    SceneRecord {
        scene_id: scene.scene_id,
        dt: scene.dt,
        t_h: scene.history_len,
        t_f: scene.future_len,
        vehicle_tracks: scene
            .vehicle_tracks
            .tracks
            .iter()
            .map(track_to_record)
            .collect(),
        infra_tracks: scene
            .infra_tracks
            .tracks
            .iter()
            .map(track_to_record)
            .collect(),
        map: scene.map.segments.clone(),
        futures: scene
            .futures
            .iter()
            .map(|(k, f)| {
                (
                    *k,
                    FutureRecord {
                        points: f.points.clone(),
                        valid: f.valid.clone(),
                    },
                )
            })
            .collect(),
        gt_identity: scene.gt_identity.clone(),
        focal_ids: scene.focal_ids.clone(),
    }
}

fn record_to_scene(r: SceneRecord) -> Scene {
    Scene {
        scene_id: r.scene_id,
        dt: r.dt,
        history_len: r.t_h,
        future_len: r.t_f,
        vehicle_tracks: TrackSet::new(
            r.vehicle_tracks
                .into_iter()
                .map(|t| record_to_track(t, TrackSource::VehicleView))
                .collect(),
            r.t_h,
            r.dt,
        ),
        infra_tracks: TrackSet::new(
            r.infra_tracks
                .into_iter()
                .map(|t| record_to_track(t, TrackSource::InfrastructureView))
                .collect(),
            r.t_h,
            r.dt,
        ),
        map: VectorMap { segments: r.map },
        futures: r
            .futures
            .into_iter()
            .map(|(k, f)| {
                (
                    k,
                    AgentFuture {
                        points: f.points,
                        valid: f.valid,
                    },
                )
            })
            .collect(),
        gt_identity: r.gt_identity,
        focal_ids: r.focal_ids,
    }
}

/// Reads scenes from a newline-delimited JSON file, validating every
/// invariant. Errors carry the 1-based line number.
pub fn read_scenes<P: AsRef<Path>>(path: P) -> Result<Vec<Scene>> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut scenes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let record: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let scene = record_to_scene(record);
        scene.validate().map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {line_no}: {msg}")),
            other => other,
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Writes scenes as newline-delimited JSON. Output bytes are deterministic
/// for identical input.
pub fn write_scenes<P: AsRef<Path>>(scenes: &[Scene], path: P) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    for scene in scenes {
        scene.validate()?;
        let record = scene_to_record(scene);
        let json = serde_json::to_string(&record)
            .map_err(|e| Error::Runtime(format!("scene serialization failed: {e}")))?;
        writer.write_all(json.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Serializes scenes to an in-memory buffer (used for determinism checks).
pub fn scenes_to_bytes(scenes: &[Scene]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for scene in scenes {
        let record = scene_to_record(scene);
        let json = serde_json::to_string(&record)
            .map_err(|e| Error::Runtime(format!("scene serialization failed: {e}")))?;
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

//! Seeded synthetic V2X scene generator.
//!
//! True trajectories follow lanes with constant-velocity or constant-turn
//! motion; each view observes them through iid Gaussian noise, per-timestep
//! dropout, and an optional angular occlusion sector. Ground-truth identities
//! and noiseless futures are emitted so fusion and prediction are verifiable.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{
    write_scenes, AgentFuture, ClassLabel, GtIdentity, LaneSegment, ObservedTrack, Scene,
    SignalState, TrackSet, TrackSource, TurnFlag, VectorMap,
};
use crate::{Error, Result};

/// Angular blind zone relative to a view's sensor origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionSector {
    pub center_deg: f64,
    pub width_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneLayout {
    StraightRoad,
    FourWayIntersection,
}

fn default_num_agents() -> [usize; 2] {
    [2, 5]
}
fn default_speed() -> [f64; 2] {
    [2.0, 8.0]
}
fn default_layout() -> LaneLayout {
    LaneLayout::StraightRoad
}
fn default_noise() -> f64 {
    0.2
}
fn default_dropout() -> f64 {
    0.1
}
fn default_t_h() -> usize {
    10
}
fn default_t_f() -> usize {
    10
}
fn default_dt() -> f64 {
    0.1
}
fn default_seed() -> u64 {
    7
}
fn default_vehicle_sensor() -> [f64; 2] {
    [0.0, -20.0]
}
fn default_infra_sensor() -> [f64; 2] {
    [0.0, 20.0]
}

/// Generator configuration; also the `synth` section of the run-config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Inclusive range of agents per scene (default [2, 5]).
    #[serde(default = "default_num_agents")]
    pub num_agents: [usize; 2],
    /// Vehicle speed range in m/s (default [2, 8]); pedestrians and cyclists
    /// move at a fraction of a draw from this range.
    #[serde(default = "default_speed")]
    pub speed: [f64; 2],
    #[serde(default = "default_layout")]
    pub layout: LaneLayout,
    /// Observation noise sigma per view, meters (default 0.2 each).
    #[serde(default = "default_noise")]
    pub noise_vehicle: f64,
    #[serde(default = "default_noise")]
    pub noise_infra: f64,
    /// Per-timestep dropout probability per view (default 0.1 each). The
    /// first timestep of every track bypasses dropout in each view.
    #[serde(default = "default_dropout")]
    pub dropout_vehicle: f64,
    #[serde(default = "default_dropout")]
    pub dropout_infra: f64,
    #[serde(default)]
    pub occlusion_vehicle: Option<OcclusionSector>,
    #[serde(default)]
    pub occlusion_infra: Option<OcclusionSector>,
    #[serde(default = "default_t_h")]
    pub t_h: usize,
    #[serde(default = "default_t_f")]
    pub t_f: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Minimum pairwise distance between true trajectories over the whole
    /// horizon; 0 disables the constraint (default 0).
    #[serde(default)]
    pub min_separation_m: f64,
    #[serde(default = "default_vehicle_sensor")]
    pub vehicle_sensor: [f64; 2],
    #[serde(default = "default_infra_sensor")]
    pub infra_sensor: [f64; 2],
}

impl Default for WorldConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_agents[0] == 0 || self.num_agents[0] > self.num_agents[1] {
            return Err(Error::Config(format!(
                "num_agents range invalid: {:?}",
                self.num_agents
            )));
        }
        if !(self.speed[0] > 0.0 && self.speed[0] <= self.speed[1]) {
            return Err(Error::Config(format!(
                "speed range invalid: {:?}",
                self.speed
            )));
        }
        for (name, v) in [
            ("dropout_vehicle", self.dropout_vehicle),
            ("dropout_infra", self.dropout_infra),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.noise_vehicle < 0.0 || self.noise_infra < 0.0 {
            return Err(Error::Config("noise sigmas must be nonnegative".into()));
        }
        if self.t_h == 0 || self.t_f == 0 {
            return Err(Error::Config("t_h and t_f must be >= 1".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.min_separation_m < 0.0 {
            return Err(Error::Config("min_separation_m must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Noiseless per-agent history positions, for oracle tests.
#[derive(Debug, Clone)]
pub struct SceneTruth {
    pub history: BTreeMap<u32, Vec<[f64; 2]>>,
}

// ---------------------------------------------------------------------------
// Route geometry
// ---------------------------------------------------------------------------

enum PathSeg {
    Line {
        a: [f64; 2],
        b: [f64; 2],
    },
    Arc {
        center: [f64; 2],
        radius: f64,
        a0: f64,
        a1: f64,
    },
}

impl PathSeg {
    fn len(&self) -> f64 {
        match self {
            PathSeg::Line { a, b } => ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt(),
            PathSeg::Arc { radius, a0, a1, .. } => radius * (a1 - a0).abs(),
        }
    }

    fn pos_at(&self, s: f64) -> [f64; 2] {
        match self {
            PathSeg::Line { a, b } => {
                let len = self.len();
                let t = if len > 0.0 {
                    (s / len).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
            }
            PathSeg::Arc {
                center,
                radius,
                a0,
                a1,
            } => {
                let sweep = a1 - a0;
                let t = if self.len() > 0.0 {
                    (s / self.len()).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let ang = a0 + t * sweep;
                [
                    center[0] + radius * ang.cos(),
                    center[1] + radius * ang.sin(),
                ]
            }
        }
    }
}

struct RoutePath {
    segs: Vec<PathSeg>,
}

impl RoutePath {
    fn len(&self) -> f64 {
        self.segs.iter().map(PathSeg::len).sum()
    }

    fn pos_at(&self, mut s: f64) -> [f64; 2] {
        s = s.max(0.0);
        for (i, seg) in self.segs.iter().enumerate() {
            let l = seg.len();
            if s <= l || i == self.segs.len() - 1 {
                return seg.pos_at(s);
            }
            s -= l;
        }
        [0.0, 0.0]
    }

    fn rotated(self, quarter_turns: u32) -> RoutePath {
        let theta = quarter_turns as f64 * PI / 2.0;
        let (c, sn) = (theta.cos(), theta.sin());
        let rot = |p: [f64; 2]| [c * p[0] - sn * p[1], sn * p[0] + c * p[1]];
        RoutePath {
            segs: self
                .segs
                .into_iter()
                .map(|seg| match seg {
                    PathSeg::Line { a, b } => PathSeg::Line {
                        a: rot(a),
                        b: rot(b),
                    },
                    PathSeg::Arc {
                        center,
                        radius,
                        a0,
                        a1,
                    } => PathSeg::Arc {
                        center: rot(center),
                        radius,
                        a0: a0 + theta,
                        a1: a1 + theta,
                    },
                })
                .collect(),
        }
    }
}

const ROAD_HALF_LEN: f64 = 60.0;
const BOX_HALF: f64 = 6.0;
const LANE_OFF: f64 = 1.75;

enum Maneuver {
    Straight,
    Left,
    Right,
}

/// Canonical eastbound route (right-hand lane y = -1.75), rotated for the
/// other approaches.
fn intersection_route(approach: u32, maneuver: Maneuver) -> RoutePath {
    let l = ROAD_HALF_LEN;
    let b = BOX_HALF;
    let base = match maneuver {
        Maneuver::Straight => RoutePath {
            segs: vec![PathSeg::Line {
                a: [-l, -LANE_OFF],
                b: [l, -LANE_OFF],
            }],
        },
        Maneuver::Left => RoutePath {
            segs: vec![
                PathSeg::Line {
                    a: [-l, -LANE_OFF],
                    b: [-b, -LANE_OFF],
                },
                PathSeg::Arc {
                    center: [-b, b],
                    radius: b + LANE_OFF,
                    a0: -PI / 2.0,
                    a1: 0.0,
                },
                PathSeg::Line {
                    a: [LANE_OFF, b],
                    b: [LANE_OFF, l],
                },
            ],
        },
        Maneuver::Right => RoutePath {
            segs: vec![
                PathSeg::Line {
                    a: [-l, -LANE_OFF],
                    b: [-b, -LANE_OFF],
                },
                PathSeg::Arc {
                    center: [-b, -b],
                    radius: b - LANE_OFF,
                    a0: PI / 2.0,
                    a1: 0.0,
                },
                PathSeg::Line {
                    a: [-LANE_OFF, -b],
                    b: [-LANE_OFF, -l],
                },
            ],
        },
    };
    base.rotated(approach)
}

fn straight_road_lane_y(lane: usize) -> f64 {
    lane as f64 * 3.5
}

fn segment_polyline(
    lane_id: u32,
    from: [f64; 2],
    to: [f64; 2],
    signal: SignalState,
    turn: TurnFlag,
    out: &mut Vec<LaneSegment>,
) {
    let step = 10.0;
    let len = ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2)).sqrt();
    let n = (len / step).ceil().max(1.0) as usize;
    for k in 0..n {
        let t0 = k as f64 / n as f64;
        let t1 = (k + 1) as f64 / n as f64;
        out.push(LaneSegment {
            lane_id,
            start: [
                from[0] + t0 * (to[0] - from[0]),
                from[1] + t0 * (to[1] - from[1]),
            ],
            end: [
                from[0] + t1 * (to[0] - from[0]),
                from[1] + t1 * (to[1] - from[1]),
            ],
            signal,
            turn,
        });
    }
}

fn build_map(layout: LaneLayout) -> VectorMap {
    let mut segments = Vec::new();
    match layout {
        LaneLayout::StraightRoad => {
            for lane in 0..3u32 {
                let y = straight_road_lane_y(lane as usize);
                segment_polyline(
                    lane,
                    [-ROAD_HALF_LEN, y],
                    [ROAD_HALF_LEN, y],
                    SignalState::None,
                    TurnFlag::Straight,
                    &mut segments,
                );
            }
        }
        LaneLayout::FourWayIntersection => {
            let l = ROAD_HALF_LEN;
            // east-west road has the green, north-south holds at red
            segment_polyline(
                0,
                [-l, -LANE_OFF],
                [l, -LANE_OFF],
                SignalState::Green,
                TurnFlag::StraightOrTurn,
                &mut segments,
            );
            segment_polyline(
                1,
                [l, LANE_OFF],
                [-l, LANE_OFF],
                SignalState::Green,
                TurnFlag::StraightOrTurn,
                &mut segments,
            );
            segment_polyline(
                2,
                [LANE_OFF, -l],
                [LANE_OFF, l],
                SignalState::Red,
                TurnFlag::Straight,
                &mut segments,
            );
            segment_polyline(
                3,
                [-LANE_OFF, l],
                [-LANE_OFF, -l],
                SignalState::Red,
                TurnFlag::Straight,
                &mut segments,
            );
        }
    }
    VectorMap { segments }
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

struct TrueAgent {
    class: ClassLabel,
    positions: Vec<[f64; 2]>,
}

fn sample_agent(cfg: &WorldConfig, rng: &mut ChaCha8Rng, total_steps: usize) -> TrueAgent {
    let class = match rng.gen_range(0..10) {
        0 => ClassLabel::Pedestrian,
        1 => ClassLabel::Cyclist,
        _ => ClassLabel::Vehicle,
    };
    let base_speed = rng.gen_range(cfg.speed[0]..=cfg.speed[1]);
    let speed = match class {
        ClassLabel::Pedestrian => (base_speed * 0.2).clamp(0.5, 2.0),
        ClassLabel::Cyclist => base_speed * 0.6,
        _ => base_speed,
    };
    let route = match cfg.layout {
        LaneLayout::StraightRoad => {
            if class == ClassLabel::Pedestrian {
                RoutePath {
                    segs: vec![PathSeg::Line {
                        a: [-ROAD_HALF_LEN, -3.0],
                        b: [ROAD_HALF_LEN, -3.0],
                    }],
                }
            } else {
                let lane = rng.gen_range(0..3usize);
                let y = straight_road_lane_y(lane);
                RoutePath {
                    segs: vec![PathSeg::Line {
                        a: [-ROAD_HALF_LEN, y],
                        b: [ROAD_HALF_LEN, y],
                    }],
                }
            }
        }
        LaneLayout::FourWayIntersection => {
            if class == ClassLabel::Pedestrian {
                RoutePath {
                    segs: vec![PathSeg::Line {
                        a: [-ROAD_HALF_LEN, -(BOX_HALF + 2.0)],
                        b: [ROAD_HALF_LEN, -(BOX_HALF + 2.0)],
                    }],
                }
            } else {
                let approach = rng.gen_range(0..4u32);
                let maneuver = match rng.gen_range(0..10) {
                    0..=5 => Maneuver::Straight,
                    6..=7 => Maneuver::Left,
                    _ => Maneuver::Right,
                };
                intersection_route(approach, maneuver)
            }
        }
    };
    let travel = speed * cfg.dt * total_steps as f64;
    let slack = (route.len() - travel - 2.0).max(1.0);
    let s0 = rng.gen_range(0.0..slack);
    let positions = (0..total_steps)
        .map(|t| route.pos_at(s0 + speed * cfg.dt * t as f64))
        .collect();
    TrueAgent { class, positions }
}

fn occluded(sector: &Option<OcclusionSector>, sensor: [f64; 2], p: [f64; 2]) -> bool {
    match sector {
        None => false,
        Some(s) => {
            let bearing = (p[1] - sensor[1]).atan2(p[0] - sensor[0]).to_degrees();
            let mut diff = (bearing - s.center_deg) % 360.0;
            if diff > 180.0 {
                diff -= 360.0;
            }
            if diff < -180.0 {
                diff += 360.0;
            }
            diff.abs() <= s.width_deg / 2.0
        }
    }
}

struct ViewSpec {
    sigma: f64,
    dropout: f64,
    sensor: [f64; 2],
    occlusion: Option<OcclusionSector>,
}

/// Observes the true agents through one view. Returns per-agent optional
/// (positions, mask): `None` when the agent has no valid step in this view.
#[allow(clippy::type_complexity)]
fn observe_view(
    agents: &[TrueAgent],
    view: &ViewSpec,
    t_h: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<(Vec<[f64; 2]>, Vec<bool>)>> {
    let normal = Normal::new(0.0, view.sigma.max(1e-12)).unwrap();
    agents
        .iter()
        .map(|agent| {
            let mut positions = Vec::with_capacity(t_h);
            let mut valid = Vec::with_capacity(t_h);
            for t in 0..t_h {
                let truth = agent.positions[t];
                // draw noise unconditionally so the stream is mask-independent
                let nx = if view.sigma > 0.0 {
                    normal.sample(rng)
                } else {
                    0.0
                };
                let ny = if view.sigma > 0.0 {
                    normal.sample(rng)
                } else {
                    0.0
                };
                let dropped = t != 0 && rng.gen::<f64>() < view.dropout;
                let hidden = occluded(&view.occlusion, view.sensor, truth);
                if dropped || hidden {
                    positions.push([0.0, 0.0]);
                    valid.push(false);
                } else {
                    positions.push([truth[0] + nx, truth[1] + ny]);
                    valid.push(true);
                }
            }
            if valid.iter().any(|&v| v) {
                Some((positions, valid))
            } else {
                None
            }
        })
        .collect()
}

fn min_pairwise_separation(agents: &[TrueAgent]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            for t in 0..agents[i].positions.len() {
                let a = agents[i].positions[t];
                let b = agents[j].positions[t];
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
    }
    best
}

fn try_generate(cfg: &WorldConfig, scene_id: u64, seed: u64) -> Option<(Scene, SceneTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_steps = cfg.t_h + cfg.t_f;
    let n = rng.gen_range(cfg.num_agents[0]..=cfg.num_agents[1]);
    let mut agents = Vec::with_capacity(n);
    for _ in 0..n {
        // per-agent placement retries keep the attempt cheap
        let mut placed = false;
        for _ in 0..40 {
            let cand = sample_agent(cfg, &mut rng, total_steps);
            let ok = cfg.min_separation_m <= 0.0
                || agents.is_empty()
                || agents.iter().all(|other: &TrueAgent| {
                    (0..total_steps).all(|t| {
                        let a = cand.positions[t];
                        let b = other.positions[t];
                        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
                            >= cfg.min_separation_m
                    })
                });
            if ok {
                agents.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    debug_assert!(
        cfg.min_separation_m <= 0.0 || min_pairwise_separation(&agents) >= cfg.min_separation_m
    );

    let vehicle_view = ViewSpec {
        sigma: cfg.noise_vehicle,
        dropout: cfg.dropout_vehicle,
        sensor: cfg.vehicle_sensor,
        occlusion: cfg.occlusion_vehicle,
    };
    let infra_view = ViewSpec {
        sigma: cfg.noise_infra,
        dropout: cfg.dropout_infra,
        sensor: cfg.infra_sensor,
        occlusion: cfg.occlusion_infra,
    };
    let vehicle_obs = observe_view(&agents, &vehicle_view, cfg.t_h, &mut rng);
    let infra_obs = observe_view(&agents, &infra_view, cfg.t_h, &mut rng);

    // every agent must be visible somewhere
    for (v, i) in vehicle_obs.iter().zip(&infra_obs) {
        if v.is_none() && i.is_none() {
            return None;
        }
    }

    let build_set = |obs: Vec<Option<(Vec<[f64; 2]>, Vec<bool>)>>,
                     source: TrackSource,
                     rng: &mut ChaCha8Rng|
     -> (TrackSet, BTreeMap<u32, u32>) {
        let mut present: Vec<(u32, Vec<[f64; 2]>, Vec<bool>)> = obs
            .into_iter()
            .enumerate()
            .filter_map(|(global, o)| o.map(|(p, v)| (global as u32, p, v)))
            .collect();
        // view-local ids are shuffled so matching is nontrivial
        present.shuffle(rng);
        let mut identity = BTreeMap::new();
        let mut tracks = Vec::with_capacity(present.len());
        for (local, (global, positions, valid)) in present.into_iter().enumerate() {
            identity.insert(local as u32, global);
            tracks.push(ObservedTrack {
                track_id: local as u32,
                class_label: agents[global as usize].class,
                positions,
                valid,
                source,
                provenance: None,
            });
        }
        tracks.sort_by_key(|t| t.track_id);
        (TrackSet::new(tracks, cfg.t_h, cfg.dt), identity)
    };

    let (vehicle_tracks, vehicle_identity) =
        build_set(vehicle_obs, TrackSource::VehicleView, &mut rng);
    let (infra_tracks, infra_identity) =
        build_set(infra_obs, TrackSource::InfrastructureView, &mut rng);

    let futures: BTreeMap<u32, AgentFuture> = agents
        .iter()
        .enumerate()
        .map(|(global, agent)| {
            (
                global as u32,
                AgentFuture {
                    points: agent.positions[cfg.t_h..].to_vec(),
                    valid: vec![true; cfg.t_f],
                },
            )
        })
        .collect();

    let truth = SceneTruth {
        history: agents
            .iter()
            .enumerate()
            .map(|(global, agent)| (global as u32, agent.positions[..cfg.t_h].to_vec()))
            .collect(),
    };

    let scene = Scene {
        scene_id,
        dt: cfg.dt,
        history_len: cfg.t_h,
        future_len: cfg.t_f,
        vehicle_tracks,
        infra_tracks,
        map: build_map(cfg.layout),
        futures,
        gt_identity: Some(GtIdentity {
            vehicle: vehicle_identity,
            infra: infra_identity,
        }),
        focal_ids: (0..agents.len() as u32).collect(),
    };
    Some((scene, truth))
}

/// Generates one scene plus its noiseless history truth. Deterministic per
/// seed; constraint violations resample with an incremented seed.
pub fn generate_scene_detailed(cfg: &WorldConfig) -> Result<(Scene, SceneTruth)> {
    generate_with_seed(cfg, cfg.seed, cfg.seed)
}

fn generate_with_seed(cfg: &WorldConfig, scene_id: u64, seed: u64) -> Result<(Scene, SceneTruth)> {
    cfg.validate()?;
    for attempt in 0..200u64 {
        let s = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        if let Some((scene, truth)) = try_generate(cfg, scene_id, s) {
            scene.validate()?;
            return Ok((scene, truth));
        }
    }
    Err(Error::Runtime(format!(
        "scene generation failed after 200 attempts (seed {seed}); constraints too tight"
    )))
}

/// Generates one scene (see [`generate_scene_detailed`]).
pub fn generate_scene(cfg: &WorldConfig) -> Result<Scene> {
    generate_scene_detailed(cfg).map(|(scene, _)| scene)
}

/// Generates `count` scenes with per-scene seeds `seed + index`.
pub fn generate_scenes(cfg: &WorldConfig, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            generate_with_seed(cfg, i as u64, cfg.seed.wrapping_add(i as u64))
                .map(|(scene, _)| scene)
        })
        .collect()
}

/// Writes `count` scenes to a newline-delimited JSON file.
pub fn generate_dataset<P: AsRef<Path>>(cfg: &WorldConfig, count: usize, path: P) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("count must be >= 1".into()));
    }
    let scenes = generate_scenes(cfg, count)?;
    write_scenes(&scenes, path)
}

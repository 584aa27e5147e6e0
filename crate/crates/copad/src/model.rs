//! End-to-end model: input-regime preparation (view selection and fusion
//! variant), the temporal encoder loop, mode expansion and attention, anchor
//! prediction, decoding, loss assembly, and the training/evaluation drivers
//! shared by the CLI and the test suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchor_decoder::{
    decode_trajectories, init_decoder_params, make_frame, predict_anchors, DecodeOutput,
    DecoderConfig, RotationFrame,
};
use crate::config::{FusionVariant, ModelSection, RegMode, TrainSection, ViewMode};
use crate::data_model::{AgentFuture, ObservedTrack, PredictionSet, Scene, TrackSet, TrackSource};
use crate::diffcore::{cosine_lr, xavier_param, zeros_param, ParamStore, Tensor};
use crate::fusion::{build_cost_matrix, early_fuse, hungarian_assign, KalmanConfig, MatchResult};
use crate::mode_attention::{expand_modes, init_mode_params, mode_gat, ModalEmbedding};
use crate::objective::{
    anchor_loss, best_mode, cls_loss, laplace_reg_loss, total_loss, AnchorTargets, LossBreakdown,
    RegTargets,
};
use crate::scene_encoder::{
    build_graph, encode_timestep, init_encoder_params, pta, PastCache, RadiusConfig,
};
use crate::{Error, Result};

/// Per-view track slots for the intermediate-fusion ablation baselines.
/// Slots absent from a view hold an all-invalid stand-in so the encoder
/// emits its placeholder row there.
pub struct IntermediateViews {
    pub vehicle: TrackSet,
    pub infra: TrackSet,
}

/// Model inputs for one scene under a chosen view and fusion regime.
pub struct PreparedInputs {
    /// Representative track per slot (fused tracks under `kf`).
    pub slots: TrackSet,
    pub intermediate: Option<IntermediateViews>,
    /// Global agent id per slot, where resolvable.
    pub global_ids: Vec<Option<u32>>,
    pub match_result: Option<MatchResult>,
}

fn invalid_stand_in(reference: &ObservedTrack, slot: u32) -> ObservedTrack {
    ObservedTrack {
        track_id: slot,
        class_label: reference.class_label,
        positions: vec![[0.0, 0.0]; reference.positions.len()],
        valid: vec![false; reference.valid.len()],
        source: reference.source,
        provenance: None,
    }
}

fn resolve_id(scene: &Scene, source: TrackSource, track_id: u32) -> Option<u32> {
    let gt = scene.gt_identity.as_ref()?;
    match source {
        TrackSource::VehicleView => gt.vehicle.get(&track_id).copied(),
        TrackSource::InfrastructureView => gt.infra.get(&track_id).copied(),
        TrackSource::Fused => None,
    }
}

/// Selects the observation regime and applies the fusion variant. Slot
/// ordering is deterministic.
pub fn prepare_inputs(
    scene: &Scene,
    view: ViewMode,
    variant: FusionVariant,
    kcfg: &KalmanConfig,
) -> Result<PreparedInputs> {
    match view {
        ViewMode::VehicleOnly | ViewMode::InfraOnly => {
            let set = if view == ViewMode::VehicleOnly {
                &scene.vehicle_tracks
            } else {
                &scene.infra_tracks
            };
            let source = if view == ViewMode::VehicleOnly {
                TrackSource::VehicleView
            } else {
                TrackSource::InfrastructureView
            };
            let mut tracks = set.tracks.clone();
            let global_ids = tracks
                .iter()
                .map(|t| resolve_id(scene, source, t.track_id))
                .collect();
            for (i, t) in tracks.iter_mut().enumerate() {
                t.track_id = i as u32;
            }
            Ok(PreparedInputs {
                slots: TrackSet::new(tracks, scene.history_len, scene.dt),
                intermediate: None,
                global_ids,
                match_result: None,
            })
        }
        ViewMode::Cooperative => match variant {
            FusionVariant::Kf => {
                let fused = early_fuse(scene, kcfg)?;
                let global_ids = fused
                    .set
                    .tracks
                    .iter()
                    .map(|t| {
                        t.provenance.and_then(|p| {
                            p.vehicle_parent()
                                .and_then(|v| resolve_id(scene, TrackSource::VehicleView, v))
                                .or_else(|| {
                                    p.infra_parent().and_then(|i| {
                                        resolve_id(scene, TrackSource::InfrastructureView, i)
                                    })
                                })
                        })
                    })
                    .collect();
                Ok(PreparedInputs {
                    slots: fused.set,
                    intermediate: None,
                    global_ids,
                    match_result: None,
                })
            }
            FusionVariant::None => {
                let mut tracks = Vec::new();
                let mut global_ids = Vec::new();
                for t in &scene.vehicle_tracks.tracks {
                    global_ids.push(resolve_id(scene, TrackSource::VehicleView, t.track_id));
                    tracks.push(t.clone());
                }
                for t in &scene.infra_tracks.tracks {
                    global_ids.push(resolve_id(
                        scene,
                        TrackSource::InfrastructureView,
                        t.track_id,
                    ));
                    tracks.push(t.clone());
                }
                for (i, t) in tracks.iter_mut().enumerate() {
                    t.track_id = i as u32;
                }
                Ok(PreparedInputs {
                    slots: TrackSet::new(tracks, scene.history_len, scene.dt),
                    intermediate: None,
                    global_ids,
                    match_result: None,
                })
            }
            FusionVariant::IntermediateAdd | FusionVariant::IntermediateConcat => {
                let matrix = build_cost_matrix(&scene.vehicle_tracks, &scene.infra_tracks)?;
                let matches = hungarian_assign(&matrix, kcfg.gate_m)?;
                let mut reps = Vec::new();
                let mut vehicle_slots = Vec::new();
                let mut infra_slots = Vec::new();
                let mut global_ids = Vec::new();
                let mut push_slot =
                    |v: Option<&ObservedTrack>, i: Option<&ObservedTrack>, gid: Option<u32>| {
                        let slot = reps.len() as u32;
                        let rep = match (v, i) {
                            (Some(v), Some(i)) => {
                                if i.valid_count() > v.valid_count() {
                                    i
                                } else {
                                    v
                                }
                            }
                            (Some(v), None) => v,
                            (None, Some(i)) => i,
                            (None, None) => unreachable!("slot with no parent"),
                        };
                        let mut rep = rep.clone();
                        rep.track_id = slot;
                        reps.push(rep);
                        let mk = |t: Option<&ObservedTrack>| match t {
                            Some(t) => {
                                let mut t = t.clone();
                                t.track_id = slot;
                                t
                            }
                            None => invalid_stand_in(&reps[slot as usize], slot),
                        };
                        vehicle_slots.push(mk(v));
                        infra_slots.push(mk(i));
                        global_ids.push(gid);
                    };
                for &(v_id, i_id) in &matches.pairs {
                    let v = scene.vehicle_tracks.track_by_id(v_id);
                    let i = scene.infra_tracks.track_by_id(i_id);
                    let gid = resolve_id(scene, TrackSource::VehicleView, v_id)
                        .or_else(|| resolve_id(scene, TrackSource::InfrastructureView, i_id));
                    push_slot(v, i, gid);
                }
                for &v_id in &matches.unmatched_vehicle {
                    let v = scene.vehicle_tracks.track_by_id(v_id);
                    push_slot(v, None, resolve_id(scene, TrackSource::VehicleView, v_id));
                }
                for &i_id in &matches.unmatched_infra {
                    let i = scene.infra_tracks.track_by_id(i_id);
                    push_slot(
                        None,
                        i,
                        resolve_id(scene, TrackSource::InfrastructureView, i_id),
                    );
                }
                Ok(PreparedInputs {
                    slots: TrackSet::new(reps, scene.history_len, scene.dt),
                    intermediate: Some(IntermediateViews {
                        vehicle: TrackSet::new(vehicle_slots, scene.history_len, scene.dt),
                        infra: TrackSet::new(infra_slots, scene.history_len, scene.dt),
                    }),
                    global_ids,
                    match_result: Some(matches),
                })
            }
        },
    }
}

/// Full forward result for one scene.
pub struct ModelForward {
    pub frames: Vec<RotationFrame>,
    pub modal: ModalEmbedding,
    pub anchors: Option<Tensor>,
    pub decode: DecodeOutput,
}

/// The CoPAD model: architecture section plus named parameters.
pub struct CopadModel {
    pub cfg: ModelSection,
    pub store: ParamStore,
}

impl CopadModel {
    /// Deterministic parameter initialization from a seed.
    pub fn new(cfg: ModelSection, seed: u64) -> Result<CopadModel> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_encoder_params(
            &mut store,
            "enc",
            cfg.hidden_dim,
            cfg.num_gat_layers,
            cfg.pta,
            &mut rng,
        )?;
        init_mode_params(
            &mut store,
            "mode",
            cfg.hidden_dim,
            cfg.num_modes,
            cfg.mode_attention,
            &mut rng,
        )?;
        let dec_cfg = DecoderConfig {
            hidden_dim: cfg.hidden_dim,
            t_f: cfg.t_f,
            mixer_blocks: cfg.mixer_blocks,
            num_anchors: cfg.num_anchors,
            dropout: 0.0,
        };
        init_decoder_params(&mut store, "dec", &dec_cfg, &mut rng)?;
        if cfg.fusion == FusionVariant::IntermediateConcat {
            store.insert(
                "fuse_ic.w",
                xavier_param(2 * cfg.hidden_dim, cfg.hidden_dim, &mut rng),
            )?;
            store.insert("fuse_ic.b", zeros_param(&[1, cfg.hidden_dim]))?;
        }
        Ok(CopadModel { cfg, store })
    }

    pub fn from_parts(cfg: ModelSection, store: ParamStore) -> Result<CopadModel> {
        cfg.validate()?;
        Ok(CopadModel { cfg, store })
    }

    fn radii(&self) -> RadiusConfig {
        RadiusConfig {
            vehicle_m: self.cfg.radius_vehicle_m,
            pedestrian_m: self.cfg.radius_pedestrian_m,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_view(
        &self,
        tracks: &TrackSet,
        map: &crate::data_model::VectorMap,
        frames: &[RotationFrame],
        t: usize,
        dropout: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let graph = build_graph(tracks, map, t, &self.radii())?;
        let local = graph.localized(frames)?;
        encode_timestep(
            &local,
            &self.store,
            "enc",
            self.cfg.num_gat_layers,
            self.cfg.num_heads,
            dropout,
            train,
            rng,
        )
    }

    /// Runs the full pipeline on prepared inputs. `dropout` only applies in
    /// training mode.
    pub fn forward(
        &self,
        inputs: &PreparedInputs,
        map: &crate::data_model::VectorMap,
        dropout: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelForward> {
        let t_h = inputs.slots.history_len;
        let frames: Vec<RotationFrame> = inputs
            .slots
            .tracks
            .iter()
            .map(make_frame)
            .collect::<Result<_>>()?;

        let mut cache = PastCache::new(self.cfg.k_p)?;
        let mut last = None;
        for t in 0..t_h {
            let d_t = match &inputs.intermediate {
                None => self.encode_view(&inputs.slots, map, &frames, t, dropout, train, rng)?,
                Some(views) => {
                    let d_v =
                        self.encode_view(&views.vehicle, map, &frames, t, dropout, train, rng)?;
                    let d_i =
                        self.encode_view(&views.infra, map, &frames, t, dropout, train, rng)?;
                    match self.cfg.fusion {
                        FusionVariant::IntermediateAdd => d_v.add(&d_i)?,
                        FusionVariant::IntermediateConcat => Tensor::concat(1, &[d_v, d_i])?
                            .linear(self.store.get("fuse_ic.w")?, self.store.get("fuse_ic.b")?)?,
                        _ => {
                            return Err(Error::State(
                                "intermediate views prepared for a non-intermediate variant".into(),
                            ))
                        }
                    }
                }
            };
            let e_t = if self.cfg.pta {
                pta(
                    &d_t,
                    &mut cache,
                    self.cfg.num_heads,
                    &self.store,
                    "enc",
                    self.cfg.pta_query,
                    dropout,
                    train,
                    rng,
                )?
            } else {
                d_t
            };
            last = Some(e_t);
        }
        let summary = last.ok_or_else(|| Error::State("scene has no timesteps".into()))?;

        let mut modal = expand_modes(&summary, self.cfg.num_modes, &self.store, "mode")?;
        if self.cfg.mode_attention {
            modal = mode_gat(
                &modal,
                self.cfg.mode_attn_heads,
                &self.store,
                "mode",
                dropout,
                train,
                rng,
            )?;
        }
        let anchors = if self.cfg.num_anchors > 0 {
            Some(predict_anchors(
                &modal,
                &self.store,
                "dec",
                self.cfg.num_anchors,
            )?)
        } else {
            None
        };
        let dec_cfg = DecoderConfig {
            hidden_dim: self.cfg.hidden_dim,
            t_f: self.cfg.t_f,
            mixer_blocks: self.cfg.mixer_blocks,
            num_anchors: self.cfg.num_anchors,
            dropout,
        };
        let decode = decode_trajectories(
            &modal,
            anchors.as_ref(),
            &frames,
            &self.store,
            "dec",
            &dec_cfg,
            train,
            rng,
        )?;
        Ok(ModelForward {
            frames,
            modal,
            anchors,
            decode,
        })
    }

    /// Assembles the composite loss against slot-aligned futures. Slots
    /// without a valid future step are excluded from every component.
    pub fn loss(
        &self,
        fwd: &ModelForward,
        futures: &[AgentFuture],
        reg_mode: RegMode,
        alpha: f64,
    ) -> Result<(Tensor, LossBreakdown, usize)> {
        let best = best_mode(&fwd.decode.prediction, futures)?;
        let reg_targets = RegTargets::from_futures(futures, &fwd.frames, self.cfg.t_f)?;
        let reg = laplace_reg_loss(
            &fwd.decode.mu_x,
            &fwd.decode.mu_y,
            &fwd.decode.scale,
            &reg_targets,
            &best,
            reg_mode,
            Some(&fwd.decode.scores),
        )?;
        let (cls, clamped) = cls_loss(&fwd.decode.scores, &best)?;
        let anchor = match &fwd.anchors {
            Some(anchors) => {
                let targets = AnchorTargets::from_futures(
                    futures,
                    &fwd.frames,
                    self.cfg.t_f,
                    self.cfg.num_anchors,
                )?;
                Some(anchor_loss(anchors, &targets, &best)?)
            }
            None => None,
        };
        let (tensor, parts) = total_loss(&cls, &reg, anchor.as_ref(), alpha)?;
        Ok((tensor, parts, clamped))
    }
}

/// Futures aligned to slots; slots without ground truth get an all-invalid
/// future so they drop out of losses and metrics.
pub fn aligned_futures(inputs: &PreparedInputs, scene: &Scene) -> Vec<AgentFuture> {
    inputs
        .global_ids
        .iter()
        .map(|gid| {
            gid.and_then(|g| scene.futures.get(&g).cloned())
                .unwrap_or_else(|| AgentFuture {
                    points: vec![[0.0, 0.0]; scene.future_len],
                    valid: vec![false; scene.future_len],
                })
        })
        .collect()
}

/// One training-log record per optimizer step.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepLog {
    pub step: u64,
    pub scene_id: u64,
    pub lr: f64,
    pub cls: f64,
    pub reg: f64,
    pub anchor: f64,
    pub total: f64,
    pub clamped_scores: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub steps: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trains in place: one optimizer step per scene per epoch with the cosine
/// schedule. Deterministic given the seed. Aborts on divergence.
pub fn train_model(
    model: &mut CopadModel,
    scenes: &[Scene],
    kcfg: &KalmanConfig,
    tcfg: &TrainSection,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Validation(
            "training needs at least one scene".into(),
        ));
    }
    let view = ViewMode::Cooperative;
    let prepared: Vec<(PreparedInputs, Vec<AgentFuture>, u64)> = scenes
        .iter()
        .map(|scene| {
            let inputs = prepare_inputs(scene, view, model.cfg.fusion, kcfg)?;
            let futures = aligned_futures(&inputs, scene);
            Ok((inputs, futures, scene.scene_id))
        })
        .collect::<Result<_>>()?;
    let total_steps = (tcfg.epochs * scenes.len()) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5EED_0F_7EA1);
    let mut log = Vec::new();
    let mut step = 0u64;
    for _epoch in 0..tcfg.epochs {
        for ((inputs, futures, scene_id), scene) in prepared.iter().zip(scenes) {
            let fwd = model.forward(inputs, &scene.map, tcfg.dropout, true, &mut rng)?;
            let (loss, parts, clamped) = model.loss(&fwd, futures, tcfg.reg_mode, tcfg.alpha)?;
            if !parts.total.is_finite() {
                return Err(Error::Runtime(format!(
                    "training diverged at step {step} (loss {})",
                    parts.total
                )));
            }
            loss.backward()?;
            model.store.backfill_zero_grads();
            let lr = cosine_lr(step, total_steps, tcfg.lr0);
            model
                .store
                .adamw_step(lr, tcfg.weight_decay, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;
            log.push(StepLog {
                step,
                scene_id: *scene_id,
                lr,
                cls: parts.cls,
                reg: parts.reg,
                anchor: parts.anchor,
                total: parts.total,
                clamped_scores: clamped,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { log, steps: step })
}

/// Restricts a prediction set to the chosen agent slots (in order).
pub fn select_prediction_slots(pred: &PredictionSet, slots: &[usize]) -> Result<PredictionSet> {
    let t_f = pred.future_len;
    let mut trajectories = Vec::with_capacity(pred.num_modes * slots.len() * t_f * 2);
    for f in 0..pred.num_modes {
        for &n in slots {
            if n >= pred.num_agents {
                return Err(Error::State(format!("slot {n} out of range")));
            }
            for t in 0..t_f {
                let p = pred.point(f, n, t);
                trajectories.push(p[0]);
                trajectories.push(p[1]);
            }
        }
    }
    let mut scores = Vec::with_capacity(slots.len() * pred.num_modes);
    for &n in slots {
        for f in 0..pred.num_modes {
            scores.push(pred.score(n, f));
        }
    }
    PredictionSet::new(pred.num_modes, slots.len(), t_f, trajectories, scores)
}

/// Per-scene evaluation selection: for every focal agent, the slot with the
/// most valid history steps (earlier slot wins ties). Returns the selected
/// slots with their futures, plus how many focal agents had no slot at all.
pub fn select_focal_slots(
    inputs: &PreparedInputs,
    scene: &Scene,
) -> (Vec<usize>, Vec<AgentFuture>, usize) {
    let mut slots = Vec::new();
    let mut futures = Vec::new();
    let mut missing = 0usize;
    for focal in &scene.focal_ids {
        let mut best: Option<(usize, usize)> = None;
        for (slot, gid) in inputs.global_ids.iter().enumerate() {
            if *gid == Some(*focal) {
                let count = inputs.slots.tracks[slot].valid_count();
                if best.map(|(_, c)| count > c).unwrap_or(true) {
                    best = Some((slot, count));
                }
            }
        }
        match (best, scene.futures.get(focal)) {
            (Some((slot, _)), Some(fut)) => {
                slots.push(slot);
                futures.push(fut.clone());
            }
            _ => missing += 1,
        }
    }
    (slots, futures, missing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, WorldConfig};

    fn toy_model_cfg() -> ModelSection {
        ModelSection {
            hidden_dim: 16,
            num_gat_layers: 1,
            num_heads: 2,
            k_p: 4,
            num_modes: 3,
            mode_attn_heads: 2,
            num_anchors: 2,
            mixer_blocks: 1,
            t_f: 10,
            ..Default::default()
        }
    }

    fn toy_scene() -> Scene {
        generate_scene(&WorldConfig {
            num_agents: [2, 3],
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let scene = toy_scene();
        let model = CopadModel::new(toy_model_cfg(), 11).unwrap();
        let kcfg = KalmanConfig::default();
        let inputs =
            prepare_inputs(&scene, ViewMode::Cooperative, FusionVariant::Kf, &kcfg).unwrap();
        let n = inputs.slots.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model
            .forward(&inputs, &scene.map, 0.0, false, &mut rng)
            .unwrap();
        assert_eq!(fwd.decode.prediction.num_agents, n);
        assert_eq!(fwd.decode.prediction.num_modes, 3);
        fwd.decode.prediction.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let again = model
            .forward(&inputs, &scene.map, 0.0, false, &mut rng)
            .unwrap();
        assert_eq!(
            fwd.decode.prediction.trajectories,
            again.decode.prediction.trajectories
        );
    }

    #[test]
    fn loss_is_finite_and_backward_runs() {
        let scene = toy_scene();
        let mut model = CopadModel::new(toy_model_cfg(), 13).unwrap();
        let kcfg = KalmanConfig::default();
        let inputs =
            prepare_inputs(&scene, ViewMode::Cooperative, FusionVariant::Kf, &kcfg).unwrap();
        let futures = aligned_futures(&inputs, &scene);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model
            .forward(&inputs, &scene.map, 0.0, true, &mut rng)
            .unwrap();
        let (loss, parts, _) = model.loss(&fwd, &futures, RegMode::Wta, 0.5).unwrap();
        assert!(parts.total.is_finite());
        loss.backward().unwrap();
        model.store.backfill_zero_grads();
        model
            .store
            .adamw_step(3e-4, 1e-4, 0.9, 0.999, 1e-8)
            .unwrap();
    }

    #[test]
    fn all_fusion_variants_run() {
        let scene = toy_scene();
        let kcfg = KalmanConfig::default();
        for variant in [
            FusionVariant::Kf,
            FusionVariant::None,
            FusionVariant::IntermediateAdd,
            FusionVariant::IntermediateConcat,
        ] {
            let cfg = ModelSection {
                fusion: variant,
                ..toy_model_cfg()
            };
            let model = CopadModel::new(cfg, 17).unwrap();
            let inputs = prepare_inputs(&scene, ViewMode::Cooperative, variant, &kcfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let fwd = model
                .forward(&inputs, &scene.map, 0.0, false, &mut rng)
                .unwrap();
            fwd.decode.prediction.validate().unwrap();
            assert!(fwd.decode.prediction.num_agents > 0);
        }
    }

    #[test]
    fn single_view_modes_run() {
        let scene = toy_scene();
        let kcfg = KalmanConfig::default();
        let model = CopadModel::new(toy_model_cfg(), 19).unwrap();
        for view in [ViewMode::VehicleOnly, ViewMode::InfraOnly] {
            let inputs = prepare_inputs(&scene, view, FusionVariant::Kf, &kcfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let fwd = model
                .forward(&inputs, &scene.map, 0.0, false, &mut rng)
                .unwrap();
            fwd.decode.prediction.validate().unwrap();
        }
    }

    #[test]
    fn pta_and_mode_attention_toggles_change_param_set() {
        let cfg_off = ModelSection {
            pta: false,
            mode_attention: false,
            ..toy_model_cfg()
        };
        let off = CopadModel::new(cfg_off, 23).unwrap();
        assert!(!off.store.contains("enc.pta.wq"));
        assert!(!off.store.contains("mode.gat.wq"));
        let on = CopadModel::new(toy_model_cfg(), 23).unwrap();
        assert!(on.store.contains("enc.pta.wq"));
        assert!(on.store.contains("mode.gat.wq"));
        // forward still works with both disabled
        let scene = toy_scene();
        let kcfg = KalmanConfig::default();
        let model = CopadModel::new(
            ModelSection {
                pta: false,
                mode_attention: false,
                num_anchors: 0,
                ..toy_model_cfg()
            },
            29,
        )
        .unwrap();
        let inputs =
            prepare_inputs(&scene, ViewMode::Cooperative, FusionVariant::Kf, &kcfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model
            .forward(&inputs, &scene.map, 0.0, false, &mut rng)
            .unwrap();
        assert!(fwd.anchors.is_none());
        fwd.decode.prediction.validate().unwrap();
    }

    #[test]
    fn short_training_reduces_loss() {
        let scenes: Vec<Scene> = (0..2)
            .map(|i| {
                generate_scene(&WorldConfig {
                    num_agents: [2, 2],
                    seed: 40 + i,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect();
        let mut model = CopadModel::new(toy_model_cfg(), 31).unwrap();
        let tcfg = TrainSection {
            epochs: 10,
            dropout: 0.0,
            ..Default::default()
        };
        let outcome = train_model(&mut model, &scenes, &KalmanConfig::default(), &tcfg).unwrap();
        assert_eq!(outcome.steps, 20);
        let first = outcome.log.first().unwrap().total;
        let last = outcome.log.last().unwrap().total;
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn nan_parameters_abort_training() {
        let scene = toy_scene();
        let mut model = CopadModel::new(toy_model_cfg(), 37).unwrap();
        // poison only the Laplace-scale bias: trajectories stay finite but
        // the regression loss turns NaN
        let b = model.store.get("dec.out.b").unwrap();
        let mut poisoned = b.to_vec();
        poisoned[2] = f64::NAN;
        b.set_data(poisoned).unwrap();
        let tcfg = TrainSection {
            epochs: 1,
            ..Default::default()
        };
        let err = train_model(&mut model, &[scene], &KalmanConfig::default(), &tcfg).unwrap_err();
        assert!(matches!(err, Error::Runtime(_)), "{err}");
        assert!(err.to_string().contains("diverged"));
    }

    #[test]
    fn focal_selection_prefers_denser_tracks() {
        let scene = toy_scene();
        let kcfg = KalmanConfig::default();
        let inputs =
            prepare_inputs(&scene, ViewMode::Cooperative, FusionVariant::None, &kcfg).unwrap();
        let (slots, futures, missing) = select_focal_slots(&inputs, &scene);
        assert_eq!(slots.len(), futures.len());
        assert_eq!(missing, 0);
        assert_eq!(slots.len(), scene.focal_ids.len());
    }
}

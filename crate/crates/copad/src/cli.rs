//! Command-line entry points: scene generation, fusion, training,
//! evaluation, ablation sweeps, and SVG plots.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error,
//! 3 runtime failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{FusionVariant, RunConfig, ViewMode};
use crate::data_model::{
    read_scenes, write_scenes, AgentFuture, GtIdentity, PredictionSet, Scene, TrackSet,
};
use crate::diffcore::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::fusion::{build_cost_matrix, fuse_with_matches, hungarian_assign};
use crate::model::{
    prepare_inputs, select_focal_slots, select_prediction_slots, train_model, CopadModel,
    PreparedInputs,
};
use crate::objective::{evaluate, MetricsReport};
use crate::plot::render_svg;
use crate::synth::generate_dataset;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "copad",
    version,
    about = "Cooperative trajectory prediction toolkit",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ViewArg {
    Cooperative,
    VehicleOnly,
    InfraOnly,
}

impl From<ViewArg> for ViewMode {
    fn from(v: ViewArg) -> ViewMode {
        match v {
            ViewArg::Cooperative => ViewMode::Cooperative,
            ViewArg::VehicleOnly => ViewMode::VehicleOnly,
            ViewArg::InfraOnly => ViewMode::InfraOnly,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FusionArg {
    Kf,
    None,
    IntermediateAdd,
    IntermediateConcat,
}

impl From<FusionArg> for FusionVariant {
    fn from(v: FusionArg) -> FusionVariant {
        match v {
            FusionArg::Kf => FusionVariant::Kf,
            FusionArg::None => FusionVariant::None,
            FusionArg::IntermediateAdd => FusionVariant::IntermediateAdd,
            FusionArg::IntermediateConcat => FusionVariant::IntermediateConcat,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Early-fuse both views of every scene and write fused scenes.
    Fuse {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Fusion report (JSON); defaults next to the output file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a scene file.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        view: Option<ViewArg>,
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Injects ground-truth futures as predictions (pipeline check).
        #[arg(long)]
        debug_oracle: bool,
    },
    /// Train/evaluate over the ablation grid and emit a table.
    Ablate {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated fusion variants (default: all four).
        #[arg(long, value_delimiter = ',', value_enum)]
        fusion_axis: Option<Vec<FusionArg>>,
        /// Comma-separated booleans for PTA (default: true,false).
        #[arg(long, value_delimiter = ',')]
        pta_axis: Option<Vec<bool>>,
        /// Comma-separated booleans for mode attention (default: true,false).
        #[arg(long, value_delimiter = ',')]
        ma_axis: Option<Vec<bool>>,
        /// Comma-separated anchor counts (default: 0,1,2,3).
        #[arg(long, value_delimiter = ',')]
        anchors_axis: Option<Vec<usize>>,
    },
    /// Render a scene (and optional predictions) as SVG.
    Plot {
        #[arg(long)]
        scenes: PathBuf,
        /// Scene to draw (defaults to the first in the file).
        #[arg(long)]
        scene_id: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses arguments and runs the selected command, returning the process
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            config,
            count,
            out,
            seed,
        } => cmd_generate(&config, count, &out, seed),
        Command::Fuse {
            scenes,
            config,
            out,
            report,
        } => cmd_fuse(&scenes, config.as_deref(), &out, report.as_deref()).map(|_| ()),
        Command::Train {
            scenes,
            config,
            out,
            log,
            seed,
        } => cmd_train(&scenes, config.as_deref(), &out, log.as_deref(), seed),
        Command::Eval {
            scenes,
            checkpoint,
            config,
            view,
            fusion,
            out,
            debug_oracle,
        } => cmd_eval(
            &scenes,
            &checkpoint,
            config.as_deref(),
            view.map(Into::into),
            fusion.map(Into::into),
            out.as_deref(),
            debug_oracle,
        )
        .map(|_| ()),
        Command::Ablate {
            scenes,
            config,
            out,
            fusion_axis,
            pta_axis,
            ma_axis,
            anchors_axis,
        } => {
            let axes = AblationAxes {
                fusion: fusion_axis
                    .map(|v| v.into_iter().map(Into::into).collect())
                    .unwrap_or_else(|| {
                        vec![
                            FusionVariant::Kf,
                            FusionVariant::None,
                            FusionVariant::IntermediateAdd,
                            FusionVariant::IntermediateConcat,
                        ]
                    }),
                pta: pta_axis.unwrap_or_else(|| vec![true, false]),
                mode_attention: ma_axis.unwrap_or_else(|| vec![true, false]),
                anchors: anchors_axis.unwrap_or_else(|| vec![0, 1, 2, 3]),
            };
            cmd_ablate(&scenes, config.as_deref(), &axes, out.as_deref()).map(|_| ())
        }
        Command::Plot {
            scenes,
            scene_id,
            checkpoint,
            config,
            out,
        } => cmd_plot(
            &scenes,
            scene_id,
            checkpoint.as_deref(),
            config.as_deref(),
            &out,
        ),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json<P: AsRef<Path>, T: Serialize>(path: P, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Runtime(format!("json encode: {e}")))?;
    let mut file = BufWriter::new(File::create(path.as_ref())?);
    file.write_all(&bytes)?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

/// `generate`: writes `count` scenes drawn from the config's synth section.
pub fn cmd_generate(config: &Path, count: usize, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut synth = cfg.synth;
    if let Some(seed) = seed {
        synth.seed = seed;
    }
    generate_dataset(&synth, count, out)?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

/// Aggregate association quality across a scene file.
#[derive(Debug, Clone, Serialize)]
pub struct FusionReport {
    pub scenes: usize,
    pub matched: usize,
    pub unmatched_vehicle: usize,
    pub unmatched_infra: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

/// `fuse`: matches and fuses each scene, writing fused scenes (fused tracks
/// in the vehicle slot, with provenance) plus a JSON report.
pub fn cmd_fuse(
    scenes_path: &Path,
    config: Option<&Path>,
    out: &Path,
    report_path: Option<&Path>,
) -> Result<FusionReport> {
    let cfg = load_config(config)?;
    let scenes = read_scenes(scenes_path)?;
    let mut fused_scenes = Vec::with_capacity(scenes.len());
    let mut report = FusionReport {
        scenes: scenes.len(),
        matched: 0,
        unmatched_vehicle: 0,
        unmatched_infra: 0,
        precision: None,
        recall: None,
    };
    let mut correct = 0usize;
    let mut gt_pairs = 0usize;
    let mut any_gt = false;
    for scene in &scenes {
        let matrix = build_cost_matrix(&scene.vehicle_tracks, &scene.infra_tracks)?;
        let matches = hungarian_assign(&matrix, cfg.fusion.gate_m)?;
        report.matched += matches.pairs.len();
        report.unmatched_vehicle += matches.unmatched_vehicle.len();
        report.unmatched_infra += matches.unmatched_infra.len();
        if let Some(gt) = &scene.gt_identity {
            any_gt = true;
            for &(v, i) in &matches.pairs {
                if let (Some(gv), Some(gi)) = (gt.vehicle.get(&v), gt.infra.get(&i)) {
                    if gv == gi {
                        correct += 1;
                    }
                }
            }
            let infra_ids: std::collections::BTreeSet<u32> = gt.infra.values().copied().collect();
            gt_pairs += gt
                .vehicle
                .values()
                .filter(|g| infra_ids.contains(g))
                .count();
        }
        let fused = fuse_with_matches(scene, &cfg.fusion, &matches)?;
        let identity = scene.gt_identity.as_ref().map(|gt| {
            let mut vehicle = std::collections::BTreeMap::new();
            for track in &fused.set.tracks {
                let gid = track.provenance.and_then(|p| {
                    p.vehicle_parent()
                        .and_then(|v| gt.vehicle.get(&v).copied())
                        .or_else(|| p.infra_parent().and_then(|i| gt.infra.get(&i).copied()))
                });
                if let Some(gid) = gid {
                    vehicle.insert(track.track_id, gid);
                }
            }
            GtIdentity {
                vehicle,
                infra: Default::default(),
            }
        });
        fused_scenes.push(Scene {
            scene_id: scene.scene_id,
            dt: scene.dt,
            history_len: scene.history_len,
            future_len: scene.future_len,
            vehicle_tracks: fused.set,
            infra_tracks: TrackSet::new(vec![], scene.history_len, scene.dt),
            map: scene.map.clone(),
            futures: scene.futures.clone(),
            gt_identity: identity,
            focal_ids: scene.focal_ids.clone(),
        });
    }
    if any_gt {
        report.precision = Some(if report.matched == 0 {
            1.0
        } else {
            correct as f64 / report.matched as f64
        });
        report.recall = Some(if gt_pairs == 0 {
            1.0
        } else {
            correct as f64 / gt_pairs as f64
        });
    }
    write_scenes(&fused_scenes, out)?;
    if let Some(path) = report_path {
        write_json(path, &report)?;
    }
    println!(
        "fused {} scenes: {} matched, {} vehicle-only, {} infra-only",
        report.scenes, report.matched, report.unmatched_vehicle, report.unmatched_infra
    );
    Ok(report)
}

/// `train`: fits a model on the scene file and writes a checkpoint plus an
/// optional JSON-lines loss log.
pub fn cmd_train(
    scenes_path: &Path,
    config: Option<&Path>,
    out: &Path,
    log_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let mut tcfg = cfg.train.clone();
    if let Some(seed) = seed {
        tcfg.seed = seed;
    }
    let scenes = read_scenes(scenes_path)?;
    for scene in &scenes {
        if scene.future_len != cfg.model.t_f {
            return Err(Error::Config(format!(
                "scene {} has t_f {} but model.t_f is {}",
                scene.scene_id, scene.future_len, cfg.model.t_f
            )));
        }
    }
    let mut model = CopadModel::new(cfg.model.clone(), tcfg.seed)?;
    let outcome = train_model(&mut model, &scenes, &cfg.fusion, &tcfg)?;
    save_checkpoint(&model.store, &model.cfg, out)?;
    if let Some(path) = log_path {
        let mut file = BufWriter::new(File::create(path)?);
        for entry in &outcome.log {
            let line = serde_json::to_string(entry)
                .map_err(|e| Error::Runtime(format!("log encode: {e}")))?;
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
    }
    match (outcome.log.first(), outcome.log.last()) {
        (Some(first), Some(last)) => println!(
            "trained {} steps: loss {:.4} -> {:.4}; checkpoint at {}",
            outcome.steps,
            first.total,
            last.total,
            out.display()
        ),
        _ => println!("wrote initial checkpoint to {}", out.display()),
    }
    Ok(())
}

fn fusion_compatible(ckpt: FusionVariant, requested: FusionVariant) -> bool {
    use FusionVariant::*;
    ckpt == requested || matches!((ckpt, requested), (Kf | None, Kf | None))
}

/// Evaluation report with the regime it was computed under.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub view: String,
    pub fusion: String,
    /// Focal agents with no track in the selected view.
    pub missing_focal: usize,
}

/// Pools focal-agent predictions across scenes and evaluates them in one
/// pass. Shared by `eval`, `ablate`, and the acceptance suite.
pub fn evaluate_model(
    model: &CopadModel,
    scenes: &[Scene],
    kcfg: &crate::fusion::KalmanConfig,
    view: ViewMode,
    variant: FusionVariant,
    oracle: bool,
) -> Result<EvalReport> {
    let f_modes = model.cfg.num_modes;
    let t_f = model.cfg.t_f;
    let mut trajectories_per_mode: Vec<Vec<f64>> = vec![Vec::new(); f_modes];
    let mut scores = Vec::new();
    let mut futures_all: Vec<AgentFuture> = Vec::new();
    let mut missing = 0usize;
    for scene in scenes {
        if scene.future_len != t_f {
            return Err(Error::Config(format!(
                "scene {} has t_f {} but the checkpoint expects {}",
                scene.scene_id, scene.future_len, t_f
            )));
        }
        let inputs = prepare_inputs(scene, view, variant, kcfg)?;
        if inputs.slots.is_empty() {
            missing += scene.focal_ids.len();
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model.forward(&inputs, &scene.map, 0.0, false, &mut rng)?;
        let (slots, futures, scene_missing) = select_focal_slots(&inputs, scene);
        missing += scene_missing;
        if slots.is_empty() {
            continue;
        }
        let selected = select_prediction_slots(&fwd.decode.prediction, &slots)?;
        for (i, fut) in futures.iter().enumerate() {
            for f in 0..f_modes {
                for t in 0..t_f {
                    let p = if oracle {
                        fut.points.get(t).copied().unwrap_or([0.0, 0.0])
                    } else {
                        selected.point(f, i, t)
                    };
                    trajectories_per_mode[f].push(p[0]);
                    trajectories_per_mode[f].push(p[1]);
                }
            }
            for f in 0..f_modes {
                scores.push(if oracle {
                    1.0 / f_modes as f64
                } else {
                    selected.score(i, f)
                });
            }
        }
        futures_all.extend(futures);
    }
    if futures_all.is_empty() {
        return Err(Error::Validation(
            "evaluation selected no focal agents".into(),
        ));
    }
    let trajectories: Vec<f64> = trajectories_per_mode.into_iter().flatten().collect();
    let pred = PredictionSet::new(f_modes, futures_all.len(), t_f, trajectories, scores)?;
    let metrics = evaluate(&pred, &futures_all)?;
    Ok(EvalReport {
        metrics,
        view: view.as_str().to_string(),
        fusion: variant.as_str().to_string(),
        missing_focal: missing,
    })
}

/// `eval`: runs a checkpoint over a scene file under the selected view and
/// fusion regime.
pub fn cmd_eval(
    scenes_path: &Path,
    checkpoint: &Path,
    config: Option<&Path>,
    view: Option<ViewMode>,
    fusion: Option<FusionVariant>,
    out: Option<&Path>,
    oracle: bool,
) -> Result<EvalReport> {
    let (store, model_cfg) = load_checkpoint(checkpoint)?;
    let cfg = load_config(config)?;
    if config.is_some() && cfg.model != model_cfg {
        return Err(Error::Config(
            "checkpoint model section does not match --config model section".into(),
        ));
    }
    let view = view.unwrap_or(cfg.eval.view);
    let variant = fusion.unwrap_or(model_cfg.fusion);
    if !fusion_compatible(model_cfg.fusion, variant) {
        return Err(Error::Config(format!(
            "checkpoint was trained with fusion {:?}; cannot evaluate as {:?}",
            model_cfg.fusion, variant
        )));
    }
    let model = CopadModel::from_parts(model_cfg, store)?;
    let scenes = read_scenes(scenes_path)?;
    let report = evaluate_model(&model, &scenes, &cfg.fusion, view, variant, oracle)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Runtime(format!("json encode: {e}")))?;
    match out {
        Some(path) => {
            std::fs::write(path, format!("{json}\n"))?;
        }
        None => println!("{json}"),
    }
    println!(
        "view={} fusion={} minADE={:.4} minFDE={:.4} MR={:.4} agents={}",
        report.view,
        report.fusion,
        report.metrics.min_ade,
        report.metrics.min_fde,
        report.metrics.miss_rate,
        report.metrics.num_agents
    );
    Ok(report)
}

pub struct AblationAxes {
    pub fusion: Vec<FusionVariant>,
    pub pta: Vec<bool>,
    pub mode_attention: Vec<bool>,
    pub anchors: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub fusion: String,
    pub pta: bool,
    pub mode_attention: bool,
    pub anchors: usize,
    #[serde(rename = "minADE")]
    pub min_ade: f64,
    #[serde(rename = "minFDE")]
    pub min_fde: f64,
    #[serde(rename = "MR")]
    pub miss_rate: f64,
}

/// `ablate`: trains one model per grid point (shared seed) and evaluates it
/// on the same scenes, emitting a table.
pub fn cmd_ablate(
    scenes_path: &Path,
    config: Option<&Path>,
    axes: &AblationAxes,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let cfg = load_config(config)?;
    let scenes = read_scenes(scenes_path)?;
    let mut rows = Vec::new();
    for &fusion in &axes.fusion {
        for &pta in &axes.pta {
            for &mode_attention in &axes.mode_attention {
                for &anchors in &axes.anchors {
                    let mut model_cfg = cfg.model.clone();
                    model_cfg.fusion = fusion;
                    model_cfg.pta = pta;
                    model_cfg.mode_attention = mode_attention;
                    model_cfg.num_anchors = anchors;
                    let mut model = CopadModel::new(model_cfg, cfg.train.seed)?;
                    train_model(&mut model, &scenes, &cfg.fusion, &cfg.train)?;
                    let report = evaluate_model(
                        &model,
                        &scenes,
                        &cfg.fusion,
                        ViewMode::Cooperative,
                        fusion,
                        false,
                    )?;
                    rows.push(AblationRow {
                        fusion: fusion.as_str().to_string(),
                        pta,
                        mode_attention,
                        anchors,
                        min_ade: report.metrics.min_ade,
                        min_fde: report.metrics.min_fde,
                        miss_rate: report.metrics.miss_rate,
                    });
                }
            }
        }
    }
    println!("fusion              pta    ma     anchors  minADE   minFDE   MR");
    for row in &rows {
        println!(
            "{:<19} {:<6} {:<6} {:<8} {:<8.4} {:<8.4} {:.4}",
            row.fusion,
            row.pta,
            row.mode_attention,
            row.anchors,
            row.min_ade,
            row.min_fde,
            row.miss_rate
        );
    }
    if let Some(path) = out {
        write_json(path, &rows)?;
    }
    Ok(rows)
}

/// `plot`: renders one scene (fused histories, ground truth, and optional
/// checkpoint predictions) to SVG.
pub fn cmd_plot(
    scenes_path: &Path,
    scene_id: Option<u64>,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let scenes = read_scenes(scenes_path)?;
    let scene = match scene_id {
        Some(id) => scenes
            .iter()
            .find(|s| s.scene_id == id)
            .ok_or_else(|| Error::Validation(format!("scene {id} not found")))?,
        None => scenes
            .first()
            .ok_or_else(|| Error::Validation("scene file is empty".into()))?,
    };

    let (model, variant) = match checkpoint {
        Some(path) => {
            let (store, model_cfg) = load_checkpoint(path)?;
            let variant = model_cfg.fusion;
            (Some(CopadModel::from_parts(model_cfg, store)?), variant)
        }
        None => (None, FusionVariant::Kf),
    };
    let inputs: PreparedInputs =
        prepare_inputs(scene, ViewMode::Cooperative, variant, &cfg.fusion)?;
    let (slots, futures, _) = select_focal_slots(&inputs, scene);
    for focal in &scene.focal_ids {
        let found = inputs.global_ids.iter().any(|gid| *gid == Some(*focal));
        if !found && scene.gt_identity.is_some() {
            return Err(Error::Validation(format!(
                "agent {focal} has no track in the fused scene"
            )));
        }
    }
    let selection: Vec<(&crate::data_model::ObservedTrack, &AgentFuture)> = slots
        .iter()
        .zip(&futures)
        .map(|(&slot, fut)| (&inputs.slots.tracks[slot], fut))
        .collect();
    let prediction = match &model {
        Some(model) => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let fwd = model.forward(&inputs, &scene.map, 0.0, false, &mut rng)?;
            Some(select_prediction_slots(&fwd.decode.prediction, &slots)?)
        }
        None => None,
    };
    let svg = render_svg(scene, &selection, prediction.as_ref())?;
    std::fs::write(out, svg)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Reads a checkpoint and re-serializes it (used by determinism checks).
pub fn checkpoint_bytes(path: &Path) -> Result<Vec<u8>> {
    let (store, model_cfg) = load_checkpoint(path)?;
    Checkpoint::from_store(&store, &model_cfg).to_bytes()
}

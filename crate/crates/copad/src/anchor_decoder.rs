//! Anchor prediction and trajectory decoding.
//!
//! Each agent gets a rotation frame at its last observed position; a small
//! MLP predicts sparse anchors (midpoint/endpoint by default) per mode in
//! that frame, and an MLP-Mixer head conditioned on the anchors emits
//! per-step increments, a Laplace scale, and mode scores. Increments are
//! integrated to agent-frame offsets and mapped back to the world frame.

use rand_chacha::ChaCha8Rng;

use crate::data_model::{ObservedTrack, PredictionSet};
use crate::diffcore::{filled_param, xavier_param, zeros_param, ParamStore, Tensor};
use crate::mode_attention::ModalEmbedding;
use crate::{Error, Result};

/// Width of the sinusoidal time encoding appended to every decoder token.
pub const TIME_ENC_DIM: usize = 8;

/// Laplace scale floor added after softplus.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Agent-centric frame: origin at the last observed position, x-axis along
/// the recent heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationFrame {
    pub origin: [f64; 2],
    pub heading: f64,
}

impl RotationFrame {
    /// World point into the agent frame: `R^T (p - origin)`.
    pub fn to_frame(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.origin[0];
        let dy = p[1] - self.origin[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Agent-frame point back to the world: `origin + R q`.
    pub fn from_frame(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [
            self.origin[0] + c * q[0] - s * q[1],
            self.origin[1] + s * q[0] + c * q[1],
        ]
    }

    /// Rotates a world-frame displacement into this frame (no translation).
    pub fn rotate_into(&self, d: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
    }
}

/// Frame from a track: origin at the last valid position, heading from the
/// displacement between the last two valid positions (zero displacement or a
/// single valid step give heading 0).
pub fn make_frame(track: &ObservedTrack) -> Result<RotationFrame> {
    let last = track
        .last_valid()
        .ok_or_else(|| Error::Validation(format!("track {} has no valid step", track.track_id)))?;
    let origin = track.positions[last];
    let prev = (0..last).rev().find(|&t| track.valid[t]);
    let heading = match prev {
        Some(p) => {
            let dx = origin[0] - track.positions[p][0];
            let dy = origin[1] - track.positions[p][1];
            if dx == 0.0 && dy == 0.0 {
                0.0
            } else {
                dy.atan2(dx)
            }
        }
        None => 0.0,
    };
    Ok(RotationFrame { origin, heading })
}

/// Predicted anchor points per agent-mode, agent-frame meters, flattened
/// `[mode][agent][anchor][xy]`.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub num_modes: usize,
    pub num_agents: usize,
    pub num_anchors: usize,
    pub values: Vec<f64>,
}

impl AnchorSet {
    pub fn point(&self, mode: usize, agent: usize, anchor: usize) -> [f64; 2] {
        let base = ((mode * self.num_agents + agent) * self.num_anchors + anchor) * 2;
        [self.values[base], self.values[base + 1]]
    }
}

/// 0-based future-step indices anchored for a given anchor count:
/// 1 anchors the endpoint, 2 the midpoint and endpoint, 3 the two thirds
/// and the endpoint.
pub fn anchor_steps(t_f: usize, num_anchors: usize) -> Vec<usize> {
    let ceil_div = |num: usize, den: usize| num.div_ceil(den);
    match num_anchors {
        0 => vec![],
        1 => vec![t_f - 1],
        2 => vec![ceil_div(t_f, 2) - 1, t_f - 1],
        _ => vec![ceil_div(t_f, 3) - 1, ceil_div(2 * t_f, 3) - 1, t_f - 1],
    }
}

/// Decoder hyperparameters (fixed at parameter-creation time).
#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    pub hidden_dim: usize,
    pub t_f: usize,
    pub mixer_blocks: usize,
    pub num_anchors: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    fn token_width(&self) -> usize {
        self.hidden_dim + TIME_ENC_DIM + 2 * self.num_anchors
    }
}

/// Creates the decoder's learned tensors under `prefix`. Output heads start
/// at zero so initial trajectories sit at each agent's origin with uniform
/// scores.
pub fn init_decoder_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &DecoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = cfg.hidden_dim;
    if cfg.num_anchors > 0 {
        store.insert(&format!("{prefix}.anchor.w1"), xavier_param(d, d, rng))?;
        store.insert(&format!("{prefix}.anchor.b1"), zeros_param(&[1, d]))?;
        store.insert(
            &format!("{prefix}.anchor.w2"),
            zeros_param(&[d, 2 * cfg.num_anchors]),
        )?;
        store.insert(
            &format!("{prefix}.anchor.b2"),
            zeros_param(&[1, 2 * cfg.num_anchors]),
        )?;
    }
    store.insert(
        &format!("{prefix}.in.w"),
        xavier_param(cfg.token_width(), d, rng),
    )?;
    store.insert(&format!("{prefix}.in.b"), zeros_param(&[1, d]))?;
    for m in 0..cfg.mixer_blocks {
        let p = format!("{prefix}.mix{m}");
        store.insert(&format!("{p}.ln1_g"), filled_param(&[1, d], 1.0))?;
        store.insert(&format!("{p}.ln1_b"), zeros_param(&[1, d]))?;
        store.insert(&format!("{p}.tok_w1"), xavier_param(cfg.t_f, cfg.t_f, rng))?;
        store.insert(&format!("{p}.tok_b1"), zeros_param(&[1, cfg.t_f]))?;
        store.insert(&format!("{p}.tok_w2"), xavier_param(cfg.t_f, cfg.t_f, rng))?;
        store.insert(&format!("{p}.tok_b2"), zeros_param(&[1, cfg.t_f]))?;
        store.insert(&format!("{p}.ln2_g"), filled_param(&[1, d], 1.0))?;
        store.insert(&format!("{p}.ln2_b"), zeros_param(&[1, d]))?;
        store.insert(&format!("{p}.ch_w1"), xavier_param(d, d, rng))?;
        store.insert(&format!("{p}.ch_b1"), zeros_param(&[1, d]))?;
        store.insert(&format!("{p}.ch_w2"), xavier_param(d, d, rng))?;
        store.insert(&format!("{p}.ch_b2"), zeros_param(&[1, d]))?;
    }
    store.insert(&format!("{prefix}.out.w"), zeros_param(&[d, 3]))?;
    store.insert(&format!("{prefix}.out.b"), zeros_param(&[1, 3]))?;
    store.insert(&format!("{prefix}.score.w"), zeros_param(&[d, 1]))?;
    store.insert(&format!("{prefix}.score.b"), zeros_param(&[1, 1]))?;
    Ok(())
}

/// Small MLP from each agent-mode embedding to the anchor coordinates
/// (agent frame). Returns an `(F*N) x 2A` tensor.
pub fn predict_anchors(
    modal: &ModalEmbedding,
    store: &ParamStore,
    prefix: &str,
    num_anchors: usize,
) -> Result<Tensor> {
    if num_anchors == 0 {
        return Err(Error::Config(
            "predict_anchors called with num_anchors = 0".into(),
        ));
    }
    let h = modal
        .tensor
        .linear(
            store.get(&format!("{prefix}.anchor.w1"))?,
            store.get(&format!("{prefix}.anchor.b1"))?,
        )?
        .relu();
    h.linear(
        store.get(&format!("{prefix}.anchor.w2"))?,
        store.get(&format!("{prefix}.anchor.b2"))?,
    )
}

pub fn anchor_set_from_tensor(anchors: &Tensor, modal: &ModalEmbedding) -> AnchorSet {
    let num_anchors = anchors.cols() / 2;
    AnchorSet {
        num_modes: modal.num_modes,
        num_agents: modal.num_agents,
        num_anchors,
        values: anchors.to_vec(),
    }
}

fn time_encoding(t_f: usize) -> Tensor {
    let mut data = Vec::with_capacity(t_f * TIME_ENC_DIM);
    for t in 0..t_f {
        let pos = (t + 1) as f64;
        for k in 0..TIME_ENC_DIM / 2 {
            let omega = 1.0 / 10f64.powf(k as f64 / 2.0);
            data.push((pos * omega).sin());
            data.push((pos * omega).cos());
        }
    }
    Tensor::constant(&[t_f, TIME_ENC_DIM], data).expect("shape matches")
}

fn mixer_block(
    h: &Tensor,
    store: &ParamStore,
    p: &str,
    dropout: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let g = |name: &str| store.get(&format!("{p}.{name}"));
    // token mixing across the step axis
    let normed = h.layer_norm(g("ln1_g")?, g("ln1_b")?)?;
    let tokens = normed
        .transpose()?
        .linear(g("tok_w1")?, g("tok_b1")?)?
        .relu()
        .dropout(dropout, train, rng)?
        .linear(g("tok_w2")?, g("tok_b2")?)?
        .transpose()?;
    let h = h.add(&tokens)?;
    // channel mixing across the feature axis
    let normed = h.layer_norm(g("ln2_g")?, g("ln2_b")?)?;
    let channels = normed
        .linear(g("ch_w1")?, g("ch_b1")?)?
        .relu()
        .dropout(dropout, train, rng)?
        .linear(g("ch_w2")?, g("ch_b2")?)?;
    h.add(&channels)
}

/// Full decode result: differentiable agent-frame trajectories and scales,
/// score distribution, and the plain world-frame prediction set.
pub struct DecodeOutput {
    /// `(F*N) x t_f` agent-frame x offsets.
    pub mu_x: Tensor,
    /// `(F*N) x t_f` agent-frame y offsets.
    pub mu_y: Tensor,
    /// `(F*N) x t_f` per-step Laplace scales (>= the scale floor).
    pub scale: Tensor,
    /// `N x F` scores on the simplex.
    pub scores: Tensor,
    pub prediction: PredictionSet,
}

/// Decodes multi-modal trajectories and scores. Builds `t_f` tokens per
/// agent-mode from the embedding, a sinusoidal time encoding, and broadcast
/// anchor features; mixer blocks alternate step and channel mixing; the
/// output head emits per-step increments plus a scale, and a separate score
/// head maps pooled tokens to mode probabilities.
#[allow(clippy::too_many_arguments)]
pub fn decode_trajectories(
    modal: &ModalEmbedding,
    anchors: Option<&Tensor>,
    frames: &[RotationFrame],
    store: &ParamStore,
    prefix: &str,
    cfg: &DecoderConfig,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DecodeOutput> {
    let (f_modes, n_agents) = (modal.num_modes, modal.num_agents);
    if frames.len() != n_agents {
        return Err(Error::Shape {
            op: "decode_trajectories",
            detail: format!("{} frames for {n_agents} agents", frames.len()),
        });
    }
    match anchors {
        Some(a) => {
            if a.shape() != [f_modes * n_agents, 2 * cfg.num_anchors] {
                return Err(Error::Shape {
                    op: "decode_trajectories",
                    detail: format!(
                        "anchors {:?} incompatible with F={f_modes}, N={n_agents}, A={}",
                        a.shape(),
                        cfg.num_anchors
                    ),
                });
            }
        }
        None => {
            if cfg.num_anchors != 0 {
                return Err(Error::Config(format!(
                    "decoder expects {} anchors but none were supplied",
                    cfg.num_anchors
                )));
            }
        }
    }

    let time_enc = time_encoding(cfg.t_f);
    let mut mu_x_rows = Vec::with_capacity(f_modes * n_agents);
    let mut mu_y_rows = Vec::with_capacity(f_modes * n_agents);
    let mut scale_rows = Vec::with_capacity(f_modes * n_agents);
    let mut pooled_rows = Vec::with_capacity(f_modes * n_agents);
    for row in 0..f_modes * n_agents {
        let emb = modal.tensor.gather_rows(&[row])?.repeat_rows(cfg.t_f)?;
        let mut parts = vec![emb, time_enc.clone()];
        if let Some(a) = anchors {
            parts.push(a.gather_rows(&[row])?.repeat_rows(cfg.t_f)?);
        }
        let tokens = Tensor::concat(1, &parts)?;
        let mut h = tokens.linear(
            store.get(&format!("{prefix}.in.w"))?,
            store.get(&format!("{prefix}.in.b"))?,
        )?;
        for m in 0..cfg.mixer_blocks {
            h = mixer_block(
                &h,
                store,
                &format!("{prefix}.mix{m}"),
                cfg.dropout,
                train,
                rng,
            )?;
        }
        let out = h.linear(
            store.get(&format!("{prefix}.out.w"))?,
            store.get(&format!("{prefix}.out.b"))?,
        )?;
        // per-step increments integrate to offsets from the frame origin
        let offsets = out.slice_cols(0, 2)?.cumsum_axis0()?;
        mu_x_rows.push(offsets.slice_cols(0, 1)?.transpose()?);
        mu_y_rows.push(offsets.slice_cols(1, 1)?.transpose()?);
        scale_rows.push(
            out.slice_cols(2, 1)?
                .transpose()?
                .softplus()
                .add_scalar(SCALE_FLOOR),
        );
        pooled_rows.push(h.mean_axis0()?);
    }
    let empty = |cols: usize| Tensor::zeros(&[0, cols]);
    let mu_x = if mu_x_rows.is_empty() {
        empty(cfg.t_f)
    } else {
        Tensor::concat(0, &mu_x_rows)?
    };
    let mu_y = if mu_y_rows.is_empty() {
        empty(cfg.t_f)
    } else {
        Tensor::concat(0, &mu_y_rows)?
    };
    let scale = if scale_rows.is_empty() {
        empty(cfg.t_f)
    } else {
        Tensor::concat(0, &scale_rows)?
    };

    let scores = if n_agents == 0 {
        Tensor::zeros(&[0, f_modes])
    } else {
        let pooled = Tensor::concat(0, &pooled_rows)?;
        let logits = pooled.linear(
            store.get(&format!("{prefix}.score.w"))?,
            store.get(&format!("{prefix}.score.b"))?,
        )?;
        logits
            .reshape(&[f_modes, n_agents])?
            .transpose()?
            .softmax(1)?
    };

    // world-frame prediction set from the detached values
    let mx = mu_x.to_vec();
    let my = mu_y.to_vec();
    let mut trajectories = Vec::with_capacity(f_modes * n_agents * cfg.t_f * 2);
    for f in 0..f_modes {
        for n in 0..n_agents {
            let row = f * n_agents + n;
            for t in 0..cfg.t_f {
                let p = frames[n].from_frame([mx[row * cfg.t_f + t], my[row * cfg.t_f + t]]);
                trajectories.push(p[0]);
                trajectories.push(p[1]);
            }
        }
    }
    let prediction = PredictionSet::new(f_modes, n_agents, cfg.t_f, trajectories, scores.to_vec())?;

    Ok(DecodeOutput {
        mu_x,
        mu_y,
        scale,
        scores,
        prediction,
    })
}

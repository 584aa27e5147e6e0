//! Training loss (winner-take-all Laplace regression, cross-entropy mode
//! classification, Huber anchor loss) and evaluation metrics (minADE,
//! minFDE, miss rate at 2.0 m).

use serde::Serialize;

use crate::anchor_decoder::{anchor_steps, RotationFrame};
use crate::config::RegMode;
use crate::data_model::{AgentFuture, PredictionSet};
use crate::diffcore::Tensor;
use crate::{Error, Result};

/// Endpoint miss threshold in meters.
pub const MISS_THRESHOLD_M: f64 = 2.0;
/// Huber transition point for the anchor loss.
pub const HUBER_DELTA: f64 = 1.0;
/// Probabilities below this are clamped before the log in the
/// classification loss.
pub const CLS_PROB_FLOOR: f64 = 1e-12;

/// Scalar loss components; `total = cls + reg + alpha * anchor`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub anchor: f64,
    pub total: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentMetrics {
    pub agent_index: usize,
    pub ade: f64,
    pub fde: f64,
    pub missed: bool,
}

/// Aggregate evaluation metrics.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    #[serde(rename = "minADE")]
    pub min_ade: f64,
    #[serde(rename = "minFDE")]
    pub min_fde: f64,
    #[serde(rename = "MR")]
    pub miss_rate: f64,
    pub num_agents: usize,
    pub num_modes: usize,
    /// Agents skipped for having no valid future step.
    pub excluded_agents: usize,
    pub per_agent: Vec<AgentMetrics>,
}

/// Per-agent best mode by mean L2 error over valid future steps (ties to the
/// lowest index). Agents with no valid step come back as `None`.
pub fn best_mode(pred: &PredictionSet, futures: &[AgentFuture]) -> Result<Vec<Option<usize>>> {
    if futures.len() != pred.num_agents {
        return Err(Error::Validation(format!(
            "best_mode: {} futures for {} agents",
            futures.len(),
            pred.num_agents
        )));
    }
    let mut out = Vec::with_capacity(pred.num_agents);
    for (n, fut) in futures.iter().enumerate() {
        let steps: Vec<usize> = (0..pred.future_len.min(fut.valid.len()))
            .filter(|&t| fut.valid[t])
            .collect();
        if steps.is_empty() {
            out.push(None);
            continue;
        }
        let mut best = 0usize;
        let mut best_err = f64::INFINITY;
        for f in 0..pred.num_modes {
            let mut acc = 0.0;
            for &t in &steps {
                let p = pred.point(f, n, t);
                let g = fut.points[t];
                acc += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
            }
            let err = acc / steps.len() as f64;
            if err < best_err {
                best_err = err;
                best = f;
            }
        }
        out.push(Some(best));
    }
    Ok(out)
}

/// minADE / minFDE / MR over index-aligned ground-truth futures. The miss
/// rate uses the minimum-FDE mode and the 2.0 m endpoint threshold. ADE
/// averages over valid steps; FDE uses the last valid step.
pub fn evaluate(pred: &PredictionSet, futures: &[AgentFuture]) -> Result<MetricsReport> {
    if futures.len() != pred.num_agents {
        return Err(Error::Validation(format!(
            "evaluate: {} futures for {} agents",
            futures.len(),
            pred.num_agents
        )));
    }
    if pred.num_agents == 0 {
        return Err(Error::Validation("evaluate: empty agent set".into()));
    }
    let mut per_agent = Vec::new();
    let mut excluded = 0usize;
    let (mut ade_sum, mut fde_sum, mut miss_sum) = (0.0, 0.0, 0.0);
    for (n, fut) in futures.iter().enumerate() {
        let steps: Vec<usize> = (0..pred.future_len.min(fut.valid.len()))
            .filter(|&t| fut.valid[t])
            .collect();
        let Some(&last) = steps.last() else {
            excluded += 1;
            continue;
        };
        let mut min_ade = f64::INFINITY;
        let mut min_fde = f64::INFINITY;
        for f in 0..pred.num_modes {
            let mut acc = 0.0;
            for &t in &steps {
                let p = pred.point(f, n, t);
                let g = fut.points[t];
                acc += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
            }
            min_ade = min_ade.min(acc / steps.len() as f64);
            let p = pred.point(f, n, last);
            let g = fut.points[last];
            min_fde = min_fde.min(((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt());
        }
        let missed = min_fde > MISS_THRESHOLD_M;
        ade_sum += min_ade;
        fde_sum += min_fde;
        miss_sum += if missed { 1.0 } else { 0.0 };
        per_agent.push(AgentMetrics {
            agent_index: n,
            ade: min_ade,
            fde: min_fde,
            missed,
        });
    }
    let counted = per_agent.len();
    if counted == 0 {
        return Err(Error::Validation(
            "evaluate: no agent has a valid future step".into(),
        ));
    }
    Ok(MetricsReport {
        min_ade: ade_sum / counted as f64,
        min_fde: fde_sum / counted as f64,
        miss_rate: miss_sum / counted as f64,
        num_agents: counted,
        num_modes: pred.num_modes,
        excluded_agents: excluded,
        per_agent,
    })
}

/// Agent-frame regression targets, row-major `agent x step`.
#[derive(Debug, Clone)]
pub struct RegTargets {
    pub gt_x: Vec<f64>,
    pub gt_y: Vec<f64>,
    pub valid: Vec<bool>,
    pub num_agents: usize,
    pub t_f: usize,
}

impl RegTargets {
    /// Transforms world-frame futures into each agent's frame.
    pub fn from_futures(
        futures: &[AgentFuture],
        frames: &[RotationFrame],
        t_f: usize,
    ) -> Result<RegTargets> {
        if futures.len() != frames.len() {
            return Err(Error::Validation(format!(
                "reg targets: {} futures vs {} frames",
                futures.len(),
                frames.len()
            )));
        }
        let n = futures.len();
        let mut gt_x = vec![0.0; n * t_f];
        let mut gt_y = vec![0.0; n * t_f];
        let mut valid = vec![false; n * t_f];
        for (i, (fut, frame)) in futures.iter().zip(frames).enumerate() {
            for t in 0..t_f.min(fut.points.len()) {
                if fut.valid[t] {
                    let q = frame.to_frame(fut.points[t]);
                    gt_x[i * t_f + t] = q[0];
                    gt_y[i * t_f + t] = q[1];
                    valid[i * t_f + t] = true;
                }
            }
        }
        Ok(RegTargets {
            gt_x,
            gt_y,
            valid,
            num_agents: n,
            t_f,
        })
    }
}

fn kept_agents(best: &[Option<usize>]) -> Vec<(usize, usize)> {
    best.iter()
        .enumerate()
        .filter_map(|(n, b)| b.map(|f| (n, f)))
        .collect()
}

/// Negative log Laplace likelihood of the agent-frame residuals, averaged
/// over agents and valid steps (both coordinates summed per step). With
/// `RegMode::Wta` only each agent's best mode contributes; with
/// `RegMode::Mixture` every mode contributes weighted by its score.
pub fn laplace_reg_loss(
    mu_x: &Tensor,
    mu_y: &Tensor,
    scale: &Tensor,
    targets: &RegTargets,
    best: &[Option<usize>],
    mode: RegMode,
    scores: Option<&Tensor>,
) -> Result<Tensor> {
    let n = targets.num_agents;
    let t_f = targets.t_f;
    if scale.to_vec().iter().any(|&b| b <= 0.0) {
        return Err(Error::Validation("laplace scale must be positive".into()));
    }
    let rows = mu_x.rows();
    if rows % n.max(1) != 0 {
        return Err(Error::Shape {
            op: "laplace_reg_loss",
            detail: format!("{rows} trajectory rows for {n} agents"),
        });
    }
    let kept = kept_agents(best);
    if kept.is_empty() {
        return Err(Error::Validation(
            "regression loss: no supervised agents".into(),
        ));
    }
    let denom: f64 = kept
        .iter()
        .map(|&(agent, _)| (0..t_f).filter(|&t| targets.valid[agent * t_f + t]).count() as f64)
        .sum();
    if denom == 0.0 {
        return Err(Error::Validation(
            "regression loss: no valid future steps".into(),
        ));
    }

    let nll_rows = |row_ids: &[usize], agent_ids: &[usize]| -> Result<Tensor> {
        let mx = mu_x.gather_rows(row_ids)?;
        let my = mu_y.gather_rows(row_ids)?;
        let b = scale.gather_rows(row_ids)?;
        let m = row_ids.len();
        let mut gx = Vec::with_capacity(m * t_f);
        let mut gy = Vec::with_capacity(m * t_f);
        let mut w = Vec::with_capacity(m * t_f);
        for &agent in agent_ids {
            for t in 0..t_f {
                gx.push(targets.gt_x[agent * t_f + t]);
                gy.push(targets.gt_y[agent * t_f + t]);
                w.push(if targets.valid[agent * t_f + t] {
                    1.0
                } else {
                    0.0
                });
            }
        }
        let gx = Tensor::constant(&[m, t_f], gx)?;
        let gy = Tensor::constant(&[m, t_f], gy)?;
        let w = Tensor::constant(&[m, t_f], w)?;
        // per step: 2 ln(2b) + (|dx| + |dy|) / b
        let l1 = mx.sub(&gx)?.abs().add(&my.sub(&gy)?.abs())?;
        let nll = b.scale(2.0).ln()?.scale(2.0).add(&l1.div(&b)?)?;
        nll.mul(&w)
    };

    match mode {
        RegMode::Wta => {
            let row_ids: Vec<usize> = kept.iter().map(|&(agent, f)| f * n + agent).collect();
            let agent_ids: Vec<usize> = kept.iter().map(|&(agent, _)| agent).collect();
            Ok(nll_rows(&row_ids, &agent_ids)?.sum_all().scale(1.0 / denom))
        }
        RegMode::Mixture => {
            let scores = scores.ok_or_else(|| {
                Error::Validation("mixture regression requires mode scores".into())
            })?;
            let f_modes = rows / n;
            let mut total: Option<Tensor> = None;
            for f in 0..f_modes {
                let row_ids: Vec<usize> = kept.iter().map(|&(agent, _)| f * n + agent).collect();
                let agent_ids: Vec<usize> = kept.iter().map(|&(agent, _)| agent).collect();
                let nll = nll_rows(&row_ids, &agent_ids)?;
                // score column f for the kept agents, broadcast across steps
                let score_rows: Vec<usize> = kept.iter().map(|&(agent, _)| agent).collect();
                let pi = scores
                    .gather_rows(&score_rows)?
                    .slice_cols(f, 1)?
                    .matmul(&Tensor::filled(&[1, t_f], 1.0))?;
                let term = nll.mul(&pi)?.sum_all();
                total = Some(match total {
                    Some(acc) => acc.add(&term)?,
                    None => term,
                });
            }
            Ok(total.expect("at least one mode").scale(1.0 / denom))
        }
    }
}

/// Cross-entropy of each agent's score at its best mode. Probabilities below
/// the floor are clamped; the number of clamped entries is returned.
pub fn cls_loss(scores: &Tensor, best: &[Option<usize>]) -> Result<(Tensor, usize)> {
    let (n, f_modes) = match scores.shape() {
        [n, f] => (*n, *f),
        other => {
            return Err(Error::Shape {
                op: "cls_loss",
                detail: format!("expected N x F scores, got {other:?}"),
            })
        }
    };
    if best.len() != n {
        return Err(Error::Shape {
            op: "cls_loss",
            detail: format!("{} best indices for {n} agents", best.len()),
        });
    }
    let kept = kept_agents(best);
    if kept.is_empty() {
        return Err(Error::Validation(
            "classification loss: no supervised agents".into(),
        ));
    }
    let flat = scores.reshape(&[n * f_modes, 1])?;
    let idx: Vec<usize> = kept.iter().map(|&(agent, f)| agent * f_modes + f).collect();
    let picked = flat.gather_rows(&idx)?;
    let clamped_count = picked
        .to_vec()
        .iter()
        .filter(|&&p| p < CLS_PROB_FLOOR)
        .count();
    let loss = picked
        .clamp_min(CLS_PROB_FLOOR)
        .ln()?
        .mean_all()?
        .scale(-1.0);
    Ok((loss, clamped_count))
}

/// Agent-frame anchor supervision: ground-truth positions at the anchored
/// steps, with a validity flag per anchor.
#[derive(Debug, Clone)]
pub struct AnchorTargets {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub num_agents: usize,
    pub num_anchors: usize,
}

impl AnchorTargets {
    pub fn from_futures(
        futures: &[AgentFuture],
        frames: &[RotationFrame],
        t_f: usize,
        num_anchors: usize,
    ) -> Result<AnchorTargets> {
        if futures.len() != frames.len() {
            return Err(Error::Validation(format!(
                "anchor targets: {} futures vs {} frames",
                futures.len(),
                frames.len()
            )));
        }
        let steps = anchor_steps(t_f, num_anchors);
        let n = futures.len();
        let mut values = vec![0.0; n * steps.len() * 2];
        let mut valid = vec![false; n * steps.len()];
        for (i, (fut, frame)) in futures.iter().zip(frames).enumerate() {
            for (a, &t) in steps.iter().enumerate() {
                if t < fut.points.len() && fut.valid[t] {
                    let q = frame.to_frame(fut.points[t]);
                    values[(i * steps.len() + a) * 2] = q[0];
                    values[(i * steps.len() + a) * 2 + 1] = q[1];
                    valid[i * steps.len() + a] = true;
                }
            }
        }
        Ok(AnchorTargets {
            values,
            valid,
            num_agents: n,
            num_anchors: steps.len(),
        })
    }
}

/// Mean Huber loss between best-mode anchors and their agent-frame targets.
/// Anchors whose ground-truth step is invalid are skipped.
pub fn anchor_loss(
    anchors: &Tensor,
    targets: &AnchorTargets,
    best: &[Option<usize>],
) -> Result<Tensor> {
    let n = targets.num_agents;
    let a = targets.num_anchors;
    if anchors.cols() != 2 * a {
        return Err(Error::Shape {
            op: "anchor_loss",
            detail: format!(
                "anchors have {} columns, expected {}",
                anchors.cols(),
                2 * a
            ),
        });
    }
    let kept = kept_agents(best);
    if kept.is_empty() {
        return Err(Error::Validation(
            "anchor loss: no supervised agents".into(),
        ));
    }
    let row_ids: Vec<usize> = kept.iter().map(|&(agent, f)| f * n + agent).collect();
    let picked = anchors.gather_rows(&row_ids)?;
    let m = kept.len();
    let mut gt = Vec::with_capacity(m * 2 * a);
    let mut w = Vec::with_capacity(m * 2 * a);
    let mut weight_sum = 0.0;
    for &(agent, _) in &kept {
        for anchor in 0..a {
            let ok = targets.valid[agent * a + anchor];
            let base = (agent * a + anchor) * 2;
            gt.push(targets.values[base]);
            gt.push(targets.values[base + 1]);
            let wv = if ok { 1.0 } else { 0.0 };
            w.push(wv);
            w.push(wv);
            weight_sum += 2.0 * wv;
        }
    }
    if weight_sum == 0.0 {
        // every anchored step invalid: nothing to supervise
        return Ok(Tensor::zeros(&[1]));
    }
    let gt = Tensor::constant(&[m, 2 * a], gt)?;
    let w = Tensor::constant(&[m, 2 * a], w)?;
    Ok(picked
        .sub(&gt)?
        .huber(HUBER_DELTA)
        .mul(&w)?
        .sum_all()
        .scale(1.0 / weight_sum))
}

/// Weighted sum `cls + reg + alpha * anchor` plus a plain-value snapshot.
pub fn total_loss(
    cls: &Tensor,
    reg: &Tensor,
    anchor: Option<&Tensor>,
    alpha: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let total = match anchor {
        Some(a) => cls.add(reg)?.add(&a.scale(alpha))?,
        None => cls.add(reg)?,
    };
    let breakdown = LossBreakdown {
        cls: cls.scalar()?,
        reg: reg.scalar()?,
        anchor: anchor.map(|a| a.scalar()).transpose()?.unwrap_or(0.0),
        total: total.scalar()?,
        alpha,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_future(points: Vec<[f64; 2]>) -> AgentFuture {
        let n = points.len();
        AgentFuture {
            points,
            valid: vec![true; n],
        }
    }

    fn pred_from(modes: Vec<Vec<Vec<[f64; 2]>>>, scores: Vec<f64>) -> PredictionSet {
        let f = modes.len();
        let n = modes[0].len();
        let t = modes[0][0].len();
        let mut traj = Vec::new();
        for mode in &modes {
            for agent in mode {
                for p in agent {
                    traj.push(p[0]);
                    traj.push(p[1]);
                }
            }
        }
        PredictionSet::new(f, n, t, traj, scores).unwrap()
    }

    #[test]
    fn single_mode_best_is_zero() {
        let pred = pred_from(vec![vec![vec![[0.0, 0.0]; 3]]], vec![1.0]);
        let fut = vec![constant_future(vec![[1.0, 0.0]; 3])];
        assert_eq!(best_mode(&pred, &fut).unwrap(), vec![Some(0)]);
    }

    #[test]
    fn exact_mode_wins() {
        let gt = vec![[1.0, 2.0], [2.0, 3.0]];
        let off: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 5.0, p[1]]).collect();
        let pred = pred_from(
            vec![
                vec![off.clone()],
                vec![off.clone()],
                vec![gt.clone()],
                vec![off.clone()],
            ],
            vec![0.25; 4],
        );
        let fut = vec![constant_future(gt)];
        assert_eq!(best_mode(&pred, &fut).unwrap(), vec![Some(2)]);
    }

    #[test]
    fn agent_without_valid_future_is_excluded() {
        let pred = pred_from(
            vec![vec![vec![[0.0, 0.0]; 2], vec![[0.0, 0.0]; 2]]],
            vec![1.0, 1.0],
        );
        let futures = vec![
            AgentFuture {
                points: vec![[0.0, 0.0]; 2],
                valid: vec![false, false],
            },
            constant_future(vec![[0.0, 0.0]; 2]),
        ];
        assert_eq!(best_mode(&pred, &futures).unwrap(), vec![None, Some(0)]);
        let report = evaluate(&pred, &futures).unwrap();
        assert_eq!(report.num_agents, 1);
        assert_eq!(report.excluded_agents, 1);
    }

    #[test]
    fn best_mode_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (f, n, t) = (6, rng.gen_range(1..5), rng.gen_range(1..8));
            let modes: Vec<Vec<Vec<[f64; 2]>>> = (0..f)
                .map(|_| {
                    (0..n)
                        .map(|_| {
                            (0..t)
                                .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)])
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let scores = vec![1.0 / f as f64; n * f];
            let pred = pred_from(modes.clone(), scores);
            let futures: Vec<AgentFuture> = (0..n)
                .map(|_| {
                    let mut valid: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.7)).collect();
                    if !valid.iter().any(|&v| v) {
                        valid[0] = true;
                    }
                    AgentFuture {
                        points: (0..t)
                            .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)])
                            .collect(),
                        valid,
                    }
                })
                .collect();
            let got = best_mode(&pred, &futures).unwrap();
            for (agent, fut) in futures.iter().enumerate() {
                let mut want = None;
                let mut best_err = f64::INFINITY;
                for mode in 0..f {
                    let steps: Vec<usize> = (0..t).filter(|&s| fut.valid[s]).collect();
                    let err: f64 = steps
                        .iter()
                        .map(|&s| {
                            let p = modes[mode][agent][s];
                            let g = fut.points[s];
                            ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()
                        })
                        .sum::<f64>()
                        / steps.len() as f64;
                    if err < best_err {
                        best_err = err;
                        want = Some(mode);
                    }
                }
                assert_eq!(got[agent], want);
            }
        }
    }

    #[test]
    fn laplace_zero_residual_values() {
        // per-coordinate NLL is ln(2b): zero at b = 1/2, ln 2 at b = 1
        let targets = RegTargets {
            gt_x: vec![1.0],
            gt_y: vec![-2.0],
            valid: vec![true],
            num_agents: 1,
            t_f: 1,
        };
        let mu_x = Tensor::constant(&[1, 1], vec![1.0]).unwrap();
        let mu_y = Tensor::constant(&[1, 1], vec![-2.0]).unwrap();
        let best = vec![Some(0)];
        let half = Tensor::constant(&[1, 1], vec![0.5]).unwrap();
        let loss = laplace_reg_loss(&mu_x, &mu_y, &half, &targets, &best, RegMode::Wta, None)
            .unwrap()
            .scalar()
            .unwrap();
        assert!(loss.abs() < 1e-12);
        let one = Tensor::constant(&[1, 1], vec![1.0]).unwrap();
        let loss = laplace_reg_loss(&mu_x, &mu_y, &one, &targets, &best, RegMode::Wta, None)
            .unwrap()
            .scalar()
            .unwrap();
        assert!((loss - 2.0 * (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn laplace_matches_pointwise_density_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.gen_range(1..4);
            let f = rng.gen_range(1..4);
            let t_f = rng.gen_range(1..5);
            let mu_x = Tensor::constant(
                &[f * n, t_f],
                (0..f * n * t_f).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            )
            .unwrap();
            let mu_y = Tensor::constant(
                &[f * n, t_f],
                (0..f * n * t_f).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            )
            .unwrap();
            let b = Tensor::constant(
                &[f * n, t_f],
                (0..f * n * t_f).map(|_| rng.gen_range(0.05..3.0)).collect(),
            )
            .unwrap();
            let mut valid: Vec<bool> = (0..n * t_f).map(|_| rng.gen_bool(0.8)).collect();
            for agent in 0..n {
                if !(0..t_f).any(|t| valid[agent * t_f + t]) {
                    valid[agent * t_f] = true;
                }
            }
            let targets = RegTargets {
                gt_x: (0..n * t_f).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                gt_y: (0..n * t_f).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                valid,
                num_agents: n,
                t_f,
            };
            let best: Vec<Option<usize>> = (0..n).map(|_| Some(rng.gen_range(0..f))).collect();
            let got = laplace_reg_loss(&mu_x, &mu_y, &b, &targets, &best, RegMode::Wta, None)
                .unwrap()
                .scalar()
                .unwrap();
            // direct pointwise density formula
            let (mxv, myv, bv) = (mu_x.to_vec(), mu_y.to_vec(), b.to_vec());
            let mut acc = 0.0;
            let mut count = 0.0;
            for agent in 0..n {
                let fm = best[agent].unwrap();
                for t in 0..t_f {
                    if targets.valid[agent * t_f + t] {
                        let row = fm * n + agent;
                        let dx = (mxv[row * t_f + t] - targets.gt_x[agent * t_f + t]).abs();
                        let dy = (myv[row * t_f + t] - targets.gt_y[agent * t_f + t]).abs();
                        let bb = bv[row * t_f + t];
                        acc += (2.0 * bb).ln() + dx / bb + (2.0 * bb).ln() + dy / bb;
                        count += 1.0;
                    }
                }
            }
            assert!((got - acc / count).abs() < 1e-9, "{got} vs {}", acc / count);
        }
    }

    #[test]
    fn mixture_mode_matches_score_weighted_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for _ in 0..30 {
            let (n, f, t_f) = (
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let mu_x = Tensor::constant(
                &[f * n, t_f],
                (0..f * n * t_f).map(|_| rng.gen_range(-4.0..4.0)).collect(),
            )
            .unwrap();
            let mu_y = Tensor::constant(
                &[f * n, t_f],
                (0..f * n * t_f).map(|_| rng.gen_range(-4.0..4.0)).collect(),
            )
            .unwrap();
            let b = Tensor::constant(
                &[f * n, t_f],
                (0..f * n * t_f).map(|_| rng.gen_range(0.1..2.0)).collect(),
            )
            .unwrap();
            let mut score_rows = Vec::new();
            for _ in 0..n {
                let raw: Vec<f64> = (0..f).map(|_| rng.gen_range(0.05..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                score_rows.extend(raw.into_iter().map(|v| v / sum));
            }
            let scores = Tensor::constant(&[n, f], score_rows.clone()).unwrap();
            let targets = RegTargets {
                gt_x: (0..n * t_f).map(|_| rng.gen_range(-4.0..4.0)).collect(),
                gt_y: (0..n * t_f).map(|_| rng.gen_range(-4.0..4.0)).collect(),
                valid: vec![true; n * t_f],
                num_agents: n,
                t_f,
            };
            let best: Vec<Option<usize>> = (0..n).map(|_| Some(0)).collect();
            let got = laplace_reg_loss(
                &mu_x,
                &mu_y,
                &b,
                &targets,
                &best,
                RegMode::Mixture,
                Some(&scores),
            )
            .unwrap()
            .scalar()
            .unwrap();
            // direct oracle: per (agent, step), sum over modes of score * nll
            let (mxv, myv, bv) = (mu_x.to_vec(), mu_y.to_vec(), b.to_vec());
            let mut acc = 0.0;
            for agent in 0..n {
                for t in 0..t_f {
                    for mode in 0..f {
                        let row = mode * n + agent;
                        let dx = (mxv[row * t_f + t] - targets.gt_x[agent * t_f + t]).abs();
                        let dy = (myv[row * t_f + t] - targets.gt_y[agent * t_f + t]).abs();
                        let bb = bv[row * t_f + t];
                        acc +=
                            score_rows[agent * f + mode] * (2.0 * (2.0 * bb).ln() + (dx + dy) / bb);
                    }
                }
            }
            let want = acc / (n * t_f) as f64;
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn nonpositive_scale_is_a_domain_error() {
        let targets = RegTargets {
            gt_x: vec![0.0],
            gt_y: vec![0.0],
            valid: vec![true],
            num_agents: 1,
            t_f: 1,
        };
        let mu = Tensor::constant(&[1, 1], vec![0.0]).unwrap();
        let bad = Tensor::constant(&[1, 1], vec![0.0]).unwrap();
        let err =
            laplace_reg_loss(&mu, &mu, &bad, &targets, &[Some(0)], RegMode::Wta, None).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn cls_loss_uniform_and_exact() {
        let uniform = Tensor::constant(&[2, 6], vec![1.0 / 6.0; 12]).unwrap();
        let best = vec![Some(3), Some(0)];
        let (loss, clamped) = cls_loss(&uniform, &best).unwrap();
        assert!((loss.scalar().unwrap() - (6.0f64).ln()).abs() < 1e-12);
        assert_eq!(clamped, 0);
        let mut perfect = vec![0.0; 6];
        perfect[2] = 1.0;
        let scores = Tensor::constant(&[1, 6], perfect).unwrap();
        let (loss, _) = cls_loss(&scores, &[Some(2)]).unwrap();
        assert!(loss.scalar().unwrap().abs() < 1e-12);
    }

    #[test]
    fn cls_loss_clamps_zero_probability() {
        let mut scores = vec![0.0; 4];
        scores[1] = 1.0;
        let t = Tensor::constant(&[1, 4], scores).unwrap();
        let (loss, clamped) = cls_loss(&t, &[Some(0)]).unwrap();
        assert_eq!(clamped, 1);
        assert!((loss.scalar().unwrap() - (-(CLS_PROB_FLOOR.ln()))).abs() < 1e-9);
    }

    #[test]
    fn cls_matches_direct_formula_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let (n, f) = (rng.gen_range(1..5), rng.gen_range(1..7));
            let mut rows = Vec::new();
            for _ in 0..n {
                let raw: Vec<f64> = (0..f).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                rows.extend(raw.into_iter().map(|v| v / sum));
            }
            let scores = Tensor::constant(&[n, f], rows.clone()).unwrap();
            let best: Vec<Option<usize>> = (0..n).map(|_| Some(rng.gen_range(0..f))).collect();
            let (loss, _) = cls_loss(&scores, &best).unwrap();
            let want: f64 = best
                .iter()
                .enumerate()
                .map(|(i, b)| -rows[i * f + b.unwrap()].ln())
                .sum::<f64>()
                / n as f64;
            assert!((loss.scalar().unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_loss_branch_values() {
        let targets = AnchorTargets {
            values: vec![0.0, 0.0],
            valid: vec![true],
            num_agents: 1,
            num_anchors: 1,
        };
        let exact = Tensor::constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let loss = anchor_loss(&exact, &targets, &[Some(0)]).unwrap();
        assert_eq!(loss.scalar().unwrap(), 0.0);
        // quadratic branch: 0.5 * 0.5^2 per coordinate
        let inside = Tensor::constant(&[1, 2], vec![0.5, 0.5]).unwrap();
        let loss = anchor_loss(&inside, &targets, &[Some(0)]).unwrap();
        assert!((loss.scalar().unwrap() - 0.125).abs() < 1e-12);
        // linear branch: delta * (|x| - delta/2) = 2.5 per coordinate
        let outside = Tensor::constant(&[1, 2], vec![3.0, 3.0]).unwrap();
        let loss = anchor_loss(&outside, &targets, &[Some(0)]).unwrap();
        assert!((loss.scalar().unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_anchor_steps_are_skipped() {
        let targets = AnchorTargets {
            values: vec![0.0, 0.0, 7.0, 7.0],
            valid: vec![false, true],
            num_agents: 1,
            num_anchors: 2,
        };
        let anchors = Tensor::constant(&[1, 4], vec![100.0, 100.0, 7.5, 7.5]).unwrap();
        let loss = anchor_loss(&anchors, &targets, &[Some(0)]).unwrap();
        // only the second anchor contributes: quadratic 0.5 * 0.25 per coord
        assert!((loss.scalar().unwrap() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighted_sum_and_gradients() {
        let cls = Tensor::param(&[1], vec![1.0]).unwrap();
        let reg = Tensor::param(&[1], vec![2.0]).unwrap();
        let anchor = Tensor::param(&[1], vec![4.0]).unwrap();
        let (total, parts) = total_loss(&cls, &reg, Some(&anchor), 0.5).unwrap();
        assert!((parts.total - 5.0).abs() < 1e-12);
        assert!((parts.total - (parts.cls + parts.reg + parts.alpha * parts.anchor)).abs() < 1e-9);
        total.backward().unwrap();
        assert_eq!(cls.grad().unwrap(), vec![1.0]);
        assert_eq!(reg.grad().unwrap(), vec![1.0]);
        assert_eq!(anchor.grad().unwrap(), vec![0.5]);
        let zero = Tensor::constant(&[1], vec![0.0]).unwrap();
        let (_, parts) = total_loss(&zero, &zero, Some(&zero), 0.5).unwrap();
        assert_eq!(parts.total, 0.0);
    }

    #[test]
    fn evaluate_three_four_five() {
        // constant offset (3,4): ADE = FDE = 5, missed at the 2 m threshold
        let gt: Vec<[f64; 2]> = (0..4).map(|t| [t as f64, 0.0]).collect();
        let off: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        let pred = pred_from(vec![vec![off]], vec![1.0]);
        let report = evaluate(&pred, &[constant_future(gt)]).unwrap();
        assert!((report.min_fde - 5.0).abs() < 1e-12);
        assert!((report.min_ade - 5.0).abs() < 1e-12);
        assert_eq!(report.miss_rate, 1.0);
    }

    #[test]
    fn evaluate_perfect_prediction() {
        let gt: Vec<[f64; 2]> = (0..5).map(|t| [t as f64, t as f64]).collect();
        let pred = pred_from(vec![vec![gt.clone()]], vec![1.0]);
        let report = evaluate(&pred, &[constant_future(gt)]).unwrap();
        assert_eq!(report.min_ade, 0.0);
        assert_eq!(report.min_fde, 0.0);
        assert_eq!(report.miss_rate, 0.0);
    }

    fn random_batch(rng: &mut ChaCha8Rng) -> (PredictionSet, Vec<AgentFuture>) {
        let (f, n, t) = (6, rng.gen_range(1..6), rng.gen_range(1..10));
        let modes: Vec<Vec<Vec<[f64; 2]>>> = (0..f)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        (0..t)
                            .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)])
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut scores = Vec::new();
        for _ in 0..n {
            let raw: Vec<f64> = (0..f).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            scores.extend(raw.into_iter().map(|v| v / sum));
        }
        let pred = pred_from(modes, scores);
        let futures: Vec<AgentFuture> = (0..n)
            .map(|_| {
                let mut valid: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.8)).collect();
                if !valid.iter().any(|&v| v) {
                    valid[rng.gen_range(0..t)] = true;
                }
                AgentFuture {
                    points: (0..t)
                        .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)])
                        .collect(),
                    valid,
                }
            })
            .collect();
        (pred, futures)
    }

    /// Independent metric computation with plain loops.
    fn brute_force_metrics(pred: &PredictionSet, futures: &[AgentFuture]) -> (f64, f64, f64) {
        let mut ades = Vec::new();
        let mut fdes = Vec::new();
        let mut misses = Vec::new();
        for (n, fut) in futures.iter().enumerate() {
            let steps: Vec<usize> = (0..fut.valid.len()).filter(|&t| fut.valid[t]).collect();
            if steps.is_empty() {
                continue;
            }
            let last = *steps.last().unwrap();
            let mut best_ade = f64::INFINITY;
            let mut best_fde = f64::INFINITY;
            for f in 0..pred.num_modes {
                let mut total = 0.0;
                for &t in &steps {
                    let p = pred.point(f, n, t);
                    let g = fut.points[t];
                    total += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
                }
                best_ade = best_ade.min(total / steps.len() as f64);
                let p = pred.point(f, n, last);
                let g = fut.points[last];
                best_fde = best_fde.min(((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt());
            }
            ades.push(best_ade);
            fdes.push(best_fde);
            misses.push(best_fde > 2.0);
        }
        let n = ades.len() as f64;
        (
            ades.iter().sum::<f64>() / n,
            fdes.iter().sum::<f64>() / n,
            misses.iter().filter(|&&m| m).count() as f64 / n,
        )
    }

    #[test]
    fn evaluate_matches_brute_force_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let (pred, futures) = random_batch(&mut rng);
            let report = evaluate(&pred, &futures).unwrap();
            let (ade, fde, mr) = brute_force_metrics(&pred, &futures);
            assert!((report.min_ade - ade).abs() < 1e-9);
            assert!((report.min_fde - fde).abs() < 1e-9);
            assert!((report.miss_rate - mr).abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_invariant_under_joint_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (pred, futures) = random_batch(&mut rng);
        let report = evaluate(&pred, &futures).unwrap();
        let shift = [13.0, -7.5];
        let mut moved = pred.clone();
        for v in moved.trajectories.chunks_mut(2) {
            v[0] += shift[0];
            v[1] += shift[1];
        }
        let moved_futures: Vec<AgentFuture> = futures
            .iter()
            .map(|f| AgentFuture {
                points: f
                    .points
                    .iter()
                    .map(|p| [p[0] + shift[0], p[1] + shift[1]])
                    .collect(),
                valid: f.valid.clone(),
            })
            .collect();
        let report2 = evaluate(&moved, &moved_futures).unwrap();
        assert!((report.min_ade - report2.min_ade).abs() < 1e-9);
        assert!((report.min_fde - report2.min_fde).abs() < 1e-9);
        assert_eq!(report.miss_rate, report2.miss_rate);
    }

    #[test]
    fn adding_a_mode_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let (pred, futures) = random_batch(&mut rng);
            // drop the last mode and renormalize scores
            let f = pred.num_modes;
            let (n, t) = (pred.num_agents, pred.future_len);
            let shorter = PredictionSet::new(
                f - 1,
                n,
                t,
                pred.trajectories[..(f - 1) * n * t * 2].to_vec(),
                (0..n)
                    .flat_map(|agent| {
                        let sum: f64 = (0..f - 1).map(|m| pred.score(agent, m)).sum();
                        (0..f - 1)
                            .map(|m| pred.score(agent, m) / sum)
                            .collect::<Vec<_>>()
                    })
                    .collect(),
            )
            .unwrap();
            let full = evaluate(&pred, &futures).unwrap();
            let partial = evaluate(&shorter, &futures).unwrap();
            assert!(full.min_ade <= partial.min_ade + 1e-12);
            assert!(full.min_fde <= partial.min_fde + 1e-12);
        }
    }

    #[test]
    fn empty_agent_set_is_an_error() {
        let pred = PredictionSet::new(1, 0, 1, vec![], vec![]).unwrap();
        assert!(evaluate(&pred, &[]).is_err());
    }
}

//! SVG rendering of scenes and predictions: lanes in gray, focal histories
//! in green, ground-truth futures in red, predicted modes in blue with
//! opacity proportional to the mode score.

use crate::data_model::{AgentFuture, ObservedTrack, PredictionSet, Scene};
use crate::{Error, Result};

const MARGIN_M: f64 = 8.0;

struct Bounds {
    min_x: f64,
    min_y: f64,
    max_x: f64,
    max_y: f64,
}

impl Bounds {
    fn new() -> Bounds {
        Bounds {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        }
    }

    fn include(&mut self, p: [f64; 2]) {
        self.min_x = self.min_x.min(p[0]);
        self.min_y = self.min_y.min(-p[1]);
        self.max_x = self.max_x.max(p[0]);
        self.max_y = self.max_y.max(-p[1]);
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

fn polyline(points: &[[f64; 2]], class: &str, color: &str, width: f64, opacity: f64) -> String {
    let pts: Vec<String> = points
        .iter()
        .map(|p| format!("{},{}", fmt(p[0]), fmt(-p[1])))
        .collect();
    format!(
        "<polyline class=\"{class}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{}\" stroke-opacity=\"{}\"/>",
        pts.join(" "),
        fmt(width),
        fmt(opacity)
    )
}

/// Renders one scene. `selection` pairs each focal agent's history track
/// with its ground-truth future; `predictions`, when given, is aligned with
/// `selection` and contributes F blue polylines per agent.
pub fn render_svg(
    scene: &Scene,
    selection: &[(&ObservedTrack, &AgentFuture)],
    predictions: Option<&PredictionSet>,
) -> Result<String> {
    if let Some(pred) = predictions {
        if pred.num_agents != selection.len() {
            return Err(Error::Validation(format!(
                "plot: {} predicted agents for {} selected",
                pred.num_agents,
                selection.len()
            )));
        }
    }
    let mut bounds = Bounds::new();
    for seg in &scene.map.segments {
        bounds.include(seg.start);
        bounds.include(seg.end);
    }
    for (track, future) in selection {
        for t in 0..track.valid.len() {
            if track.valid[t] {
                bounds.include(track.positions[t]);
            }
        }
        for (t, p) in future.points.iter().enumerate() {
            if future.valid[t] {
                bounds.include(*p);
            }
        }
    }
    if let Some(pred) = predictions {
        for f in 0..pred.num_modes {
            for n in 0..pred.num_agents {
                for t in 0..pred.future_len {
                    bounds.include(pred.point(f, n, t));
                }
            }
        }
    }
    if !bounds.min_x.is_finite() {
        bounds = Bounds {
            min_x: -1.0,
            min_y: -1.0,
            max_x: 1.0,
            max_y: 1.0,
        };
    }

    let width = bounds.max_x - bounds.min_x + 2.0 * MARGIN_M;
    let height = bounds.max_y - bounds.min_y + 2.0 * MARGIN_M;
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"{} {} {} {}\">\n",
        fmt(bounds.min_x - MARGIN_M),
        fmt(bounds.min_y - MARGIN_M),
        fmt(width),
        fmt(height)
    ));
    out.push_str(&format!(
        "<title>scene {} ({} focal agents)</title>\n",
        scene.scene_id,
        selection.len()
    ));

    for seg in &scene.map.segments {
        out.push_str(&format!(
            "<line class=\"lane\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#9e9e9e\" stroke-width=\"0.4\"/>\n",
            fmt(seg.start[0]),
            fmt(-seg.start[1]),
            fmt(seg.end[0]),
            fmt(-seg.end[1])
        ));
    }

    for (track, future) in selection {
        let hist: Vec<[f64; 2]> = (0..track.valid.len())
            .filter(|&t| track.valid[t])
            .map(|t| track.positions[t])
            .collect();
        out.push_str(&polyline(&hist, "history", "#2e7d32", 0.6, 1.0));
        out.push('\n');
        let gt: Vec<[f64; 2]> = future
            .points
            .iter()
            .zip(&future.valid)
            .filter(|(_, &v)| v)
            .map(|(p, _)| *p)
            .collect();
        out.push_str(&polyline(&gt, "future-gt", "#c62828", 0.6, 1.0));
        out.push('\n');
    }

    if let Some(pred) = predictions {
        for n in 0..pred.num_agents {
            for f in 0..pred.num_modes {
                let pts: Vec<[f64; 2]> =
                    (0..pred.future_len).map(|t| pred.point(f, n, t)).collect();
                let opacity = pred.score(n, f).clamp(0.0, 1.0);
                out.push_str(&polyline(&pts, "pred", "#1565c0", 0.5, opacity));
                out.push('\n');
            }
        }
    }

    out.push_str("</svg>\n");
    Ok(out)
}

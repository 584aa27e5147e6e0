//! Scene encoding: per-timestep graph attention over agents and lanes, and
//! past-time attention (PTA) that interacts the current embedding with a
//! cached window of past embeddings.

mod graph;

pub use graph::{
    build_graph, AgentNode, GraphEdge, LaneNode, NodeRef, RadiusConfig, SceneGraph, AGENT_FEAT,
    EDGE_FEAT, LANE_FEAT,
};

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use crate::config::PtaQuery;
use crate::diffcore::{
    filled_param, multi_head_attention, normal_param, xavier_param, zeros_param, AttnParams,
    ParamStore, Tensor,
};
use crate::{Error, Result};

/// Creates encoder parameters under `prefix`: input projections per node
/// type, a placeholder row for temporally absent agents, the graph-attention
/// stack, and (when enabled) the PTA attention and fallback MLP.
pub fn init_encoder_params(
    store: &mut ParamStore,
    prefix: &str,
    hidden_dim: usize,
    num_gat_layers: usize,
    with_pta: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = hidden_dim;
    store.insert(
        &format!("{prefix}.agent_in.w"),
        xavier_param(AGENT_FEAT, d, rng),
    )?;
    store.insert(&format!("{prefix}.agent_in.b"), zeros_param(&[1, d]))?;
    store.insert(
        &format!("{prefix}.lane_in.w"),
        xavier_param(LANE_FEAT, d, rng),
    )?;
    store.insert(&format!("{prefix}.lane_in.b"), zeros_param(&[1, d]))?;
    store.insert(
        &format!("{prefix}.placeholder"),
        normal_param(&[1, d], 0.02, rng),
    )?;
    for l in 0..num_gat_layers {
        let p = format!("{prefix}.gat{l}");
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}.{name}"), xavier_param(d, d, rng))?;
        }
        store.insert(&format!("{p}.we"), xavier_param(EDGE_FEAT, d, rng))?;
        store.insert(&format!("{p}.wf"), xavier_param(EDGE_FEAT, d, rng))?;
        store.insert(&format!("{p}.bo"), zeros_param(&[1, d]))?;
        store.insert(&format!("{p}.ln_g"), filled_param(&[1, d], 1.0))?;
        store.insert(&format!("{p}.ln_b"), zeros_param(&[1, d]))?;
    }
    if with_pta {
        let p = format!("{prefix}.pta");
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}.{name}"), xavier_param(d, d, rng))?;
        }
        for name in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("{p}.{name}"), zeros_param(&[1, d]))?;
        }
        store.insert(&format!("{p}.mlp.w1"), xavier_param(d, d, rng))?;
        store.insert(&format!("{p}.mlp.b1"), zeros_param(&[1, d]))?;
        store.insert(&format!("{p}.mlp.w2"), xavier_param(d, d, rng))?;
        store.insert(&format!("{p}.mlp.b2"), zeros_param(&[1, d]))?;
    }
    Ok(())
}

fn node_row(g: &SceneGraph, node: NodeRef) -> usize {
    match node {
        NodeRef::Agent(i) => i,
        NodeRef::Lane(l) => g.agent_nodes.len() + l,
    }
}

/// One graph-attention layer: per destination agent, attention over its
/// in-neighbors with keys and values conditioned on edge attributes, then a
/// residual connection and layer norm. Nodes without in-edges (including all
/// lane nodes) pass through the residual path.
#[allow(clippy::too_many_arguments)]
pub fn graph_attention_layer(
    g: &SceneGraph,
    feats: &Tensor,
    heads: usize,
    store: &ParamStore,
    prefix: &str,
    dropout: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let num_nodes = g.num_nodes();
    if feats.rows() != num_nodes {
        return Err(Error::Shape {
            op: "graph_attention_layer",
            detail: format!("feats rows {} != node count {num_nodes}", feats.rows()),
        });
    }
    let d = feats.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "graph attention width {d} not divisible by {heads} heads"
        )));
    }
    let p = |name: &str| store.get(&format!("{prefix}.{name}"));
    let ln_g = p("ln_g")?;
    let ln_b = p("ln_b")?;
    if num_nodes == 0 {
        return feats.layer_norm(ln_g, ln_b);
    }
    let (wq, wk, wv, we, wf, wo, bo) = (
        p("wq")?,
        p("wk")?,
        p("wv")?,
        p("we")?,
        p("wf")?,
        p("wo")?,
        p("bo")?,
    );
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut delta_rows: Vec<Tensor> = Vec::with_capacity(num_nodes);
    for i in 0..g.agent_nodes.len() {
        let in_edges: Vec<&GraphEdge> = g.edges.iter().filter(|e| e.dst == i).collect();
        if in_edges.is_empty() {
            delta_rows.push(Tensor::zeros(&[1, d]));
            continue;
        }
        let src_rows: Vec<usize> = in_edges.iter().map(|e| node_row(g, e.src)).collect();
        let mut edge_vals = Vec::with_capacity(in_edges.len() * EDGE_FEAT);
        for e in &in_edges {
            edge_vals.extend_from_slice(&e.features);
        }
        let edge_feats = Tensor::constant(&[in_edges.len(), EDGE_FEAT], edge_vals)?;
        let src_feats = feats.gather_rows(&src_rows)?;
        let q = feats.gather_rows(&[i])?.matmul(wq)?;
        let k = src_feats.matmul(wk)?.add(&edge_feats.matmul(we)?)?;
        let v = src_feats.matmul(wv)?.add(&edge_feats.matmul(wf)?)?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice_cols(h * head_dim, head_dim)?;
            let kh = k.slice_cols(h * head_dim, head_dim)?;
            let vh = v.slice_cols(h * head_dim, head_dim)?;
            let weights = qh.matmul(&kh.transpose()?)?.scale(scale).softmax(1)?;
            head_outs.push(weights.matmul(&vh)?);
        }
        let merged = Tensor::concat(1, &head_outs)?
            .matmul(wo)?
            .add_rowvec(bo)?
            .dropout(dropout, train, rng)?;
        delta_rows.push(merged);
    }
    if !g.lane_nodes.is_empty() {
        delta_rows.push(Tensor::zeros(&[g.lane_nodes.len(), d]));
    }
    let delta = Tensor::concat(0, &delta_rows)?;
    feats.add(&delta)?.layer_norm(ln_g, ln_b)
}

/// Encodes one (localized) timestep graph into a `num_slots x D` embedding:
/// per-type input projections, the graph-attention stack, then scattering
/// agent rows into track slots with a learned placeholder row for agents
/// absent at this timestep.
#[allow(clippy::too_many_arguments)]
pub fn encode_timestep(
    g: &SceneGraph,
    store: &ParamStore,
    prefix: &str,
    num_gat_layers: usize,
    heads: usize,
    dropout: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let d = store.get(&format!("{prefix}.agent_in.w"))?.cols();
    let n_agents = g.agent_nodes.len();
    let n_lanes = g.lane_nodes.len();

    let mut parts = Vec::new();
    if n_agents > 0 {
        let mut vals = Vec::with_capacity(n_agents * AGENT_FEAT);
        for node in &g.agent_nodes {
            vals.extend_from_slice(&node.features);
        }
        let agent_feats = Tensor::constant(&[n_agents, AGENT_FEAT], vals)?;
        parts.push(agent_feats.linear(
            store.get(&format!("{prefix}.agent_in.w"))?,
            store.get(&format!("{prefix}.agent_in.b"))?,
        )?);
    }
    if n_lanes > 0 {
        let mut vals = Vec::with_capacity(n_lanes * LANE_FEAT);
        for node in &g.lane_nodes {
            vals.extend_from_slice(&node.features);
        }
        let lane_feats = Tensor::constant(&[n_lanes, LANE_FEAT], vals)?;
        parts.push(lane_feats.linear(
            store.get(&format!("{prefix}.lane_in.w"))?,
            store.get(&format!("{prefix}.lane_in.b"))?,
        )?);
    }
    let mut x = match parts.len() {
        0 => Tensor::zeros(&[0, d]),
        1 => parts.pop().expect("one part"),
        _ => Tensor::concat(0, &parts)?,
    };
    for l in 0..num_gat_layers {
        x = graph_attention_layer(
            g,
            &x,
            heads,
            store,
            &format!("{prefix}.gat{l}"),
            dropout,
            train,
            rng,
        )?;
    }

    // scatter agent rows into slots; absent slots take the placeholder row
    let placeholder = store.get(&format!("{prefix}.placeholder"))?;
    let source = if n_agents > 0 {
        Tensor::concat(
            0,
            &[
                x.gather_rows(&(0..n_agents).collect::<Vec<_>>())?,
                placeholder.clone(),
            ],
        )?
    } else {
        placeholder.clone()
    };
    let placeholder_row = if n_agents > 0 { n_agents } else { 0 };
    let mut slot_rows = vec![placeholder_row; g.num_slots];
    for (node_idx, node) in g.agent_nodes.iter().enumerate() {
        slot_rows[node.slot] = node_idx;
    }
    source.gather_rows(&slot_rows)
}

/// Ring buffer of the last `window` per-timestep embeddings, oldest first.
pub struct PastCache {
    window: usize,
    entries: VecDeque<Tensor>,
    steps_seen: usize,
}

impl PastCache {
    pub fn new(window: usize) -> Result<PastCache> {
        if window == 0 {
            return Err(Error::Config("PTA window k_p must be >= 1".into()));
        }
        Ok(PastCache {
            window,
            entries: VecDeque::new(),
            steps_seen: 0,
        })
    }

    /// Rebuilds a cache from explicit entries (mainly for tests); `pta`
    /// rejects caches whose length disagrees with the step count.
    pub fn from_entries(
        window: usize,
        entries: Vec<Tensor>,
        steps_seen: usize,
    ) -> Result<PastCache> {
        if window == 0 {
            return Err(Error::Config("PTA window k_p must be >= 1".into()));
        }
        Ok(PastCache {
            window,
            entries: entries.into(),
            steps_seen,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn steps_seen(&self) -> usize {
        self.steps_seen
    }

    fn push(&mut self, d_t: Tensor) {
        if self.entries.len() == self.window {
            self.entries.pop_front();
        }
        self.entries.push_back(d_t);
        self.steps_seen += 1;
    }
}

/// Past-time attention. With a full window (`t >= k_p`) the current
/// embedding is replicated to the window length and cross-attends the
/// concatenated past embeddings (query side per `query_mode`), the result is
/// mean-pooled over the window and fused with `d_t` by residual; before the
/// window fills, an MLP encodes `d_t` directly. `d_t` is pushed into the
/// cache after the output is computed.
#[allow(clippy::too_many_arguments)]
pub fn pta(
    d_t: &Tensor,
    cache: &mut PastCache,
    heads: usize,
    store: &ParamStore,
    prefix: &str,
    query_mode: PtaQuery,
    dropout: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if cache.entries.len() != cache.steps_seen.min(cache.window) {
        return Err(Error::State(format!(
            "past cache holds {} entries but has seen {} steps (window {})",
            cache.entries.len(),
            cache.steps_seen,
            cache.window
        )));
    }
    let (n, d) = match d_t.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(Error::Shape {
                op: "pta",
                detail: format!("expected N x D embedding, got {other:?}"),
            })
        }
    };
    let out = if cache.steps_seen >= cache.window {
        let k_p = cache.window;
        let past_parts: Vec<Tensor> = cache.entries.iter().cloned().collect();
        let past = Tensor::concat(0, &past_parts)?;
        let tiled = d_t.repeat_rows(k_p)?;
        let p = |name: &str| store.get(&format!("{prefix}.pta.{name}"));
        let params = AttnParams {
            wq: p("wq")?,
            bq: p("bq")?,
            wk: p("wk")?,
            bk: p("bk")?,
            wv: p("wv")?,
            bv: p("bv")?,
            wo: p("wo")?,
            bo: p("bo")?,
        };
        let attn = match query_mode {
            PtaQuery::Current => multi_head_attention(&tiled, &past, heads, &params, None)?,
            PtaQuery::Past => multi_head_attention(&past, &tiled, heads, &params, None)?,
        };
        let pooled = attn
            .reshape(&[k_p, n * d])?
            .mean_axis0()?
            .reshape(&[n, d])?
            .dropout(dropout, train, rng)?;
        d_t.add(&pooled)?
    } else {
        let p = |name: &str| store.get(&format!("{prefix}.pta.mlp.{name}"));
        d_t.linear(p("w1")?, p("b1")?)?
            .relu()
            .dropout(dropout, train, rng)?
            .linear(p("w2")?, p("b2")?)?
    };
    cache.push(d_t.clone());
    Ok(out)
}

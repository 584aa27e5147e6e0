//! Per-timestep heterogeneous scene graphs: agent nodes for tracks valid at
//! the timestep, lane nodes for every map segment, agent-agent edges inside a
//! symmetric per-class radius, and agent-lane edges from each agent to nearby
//! segments. Edge attributes carry the relative displacement (antisymmetric
//! under endpoint swap) plus signal state for lane edges.

use crate::anchor_decoder::RotationFrame;
use crate::data_model::{ClassLabel, LaneSegment, SignalState, TrackSet, TurnFlag, VectorMap};
use crate::{Error, Result};

/// Width of the numeric feature vector on agent nodes:
/// position (2) + class one-hot (4) + valid flag (1).
pub const AGENT_FEAT: usize = 7;
/// Width on lane nodes: signal one-hot (4) + turn one-hot (4) + length (1).
pub const LANE_FEAT: usize = 9;
/// Width on edges: displacement (2) + lane direction (2) + signal one-hot (4)
/// + lane-edge flag (1).
pub const EDGE_FEAT: usize = 9;

#[derive(Debug, Clone)]
pub struct AgentNode {
    /// Index of the track in the originating track set.
    pub slot: usize,
    pub track_id: u32,
    pub class_label: ClassLabel,
    pub position: [f64; 2],
    pub features: [f64; AGENT_FEAT],
}

#[derive(Debug, Clone)]
pub struct LaneNode {
    pub lane_id: u32,
    pub segment_index: usize,
    pub midpoint: [f64; 2],
    pub direction: [f64; 2],
    pub length: f64,
    pub signal: SignalState,
    pub turn: TurnFlag,
    pub features: [f64; LANE_FEAT],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Agent(usize),
    Lane(usize),
}

#[derive(Debug, Clone)]
pub struct GraphEdge {
    pub src: NodeRef,
    /// Destination agent node index (messages flow into agents).
    pub dst: usize,
    /// Source minus destination position, world frame.
    pub delta: [f64; 2],
    pub signal: Option<SignalState>,
    pub features: [f64; EDGE_FEAT],
}

/// Heterogeneous graph for one timestep.
#[derive(Debug, Clone)]
pub struct SceneGraph {
    pub timestep: usize,
    /// Total track slots in the originating set (absent agents included).
    pub num_slots: usize,
    pub agent_nodes: Vec<AgentNode>,
    pub lane_nodes: Vec<LaneNode>,
    pub edges: Vec<GraphEdge>,
}

/// Per-class interaction radii; the pairwise test uses the smaller of the
/// two endpoints' radii so the relation stays symmetric.
#[derive(Debug, Clone, Copy)]
pub struct RadiusConfig {
    pub vehicle_m: f64,
    pub pedestrian_m: f64,
}

impl RadiusConfig {
    pub fn for_class(&self, class: ClassLabel) -> f64 {
        match class {
            ClassLabel::Vehicle | ClassLabel::Other => self.vehicle_m,
            ClassLabel::Pedestrian | ClassLabel::Cyclist => self.pedestrian_m,
        }
    }
}

fn agent_features(position: [f64; 2], class: ClassLabel) -> [f64; AGENT_FEAT] {
    let onehot = class.one_hot();
    [
        position[0],
        position[1],
        onehot[0],
        onehot[1],
        onehot[2],
        onehot[3],
        1.0,
    ]
}

fn lane_features(seg: &LaneSegment) -> [f64; LANE_FEAT] {
    let sig = seg.signal.one_hot();
    let turn = seg.turn.one_hot();
    [
        sig[0],
        sig[1],
        sig[2],
        sig[3],
        turn[0],
        turn[1],
        turn[2],
        turn[3],
        seg.length(),
    ]
}

fn edge_features(
    delta: [f64; 2],
    direction: [f64; 2],
    signal: Option<SignalState>,
) -> [f64; EDGE_FEAT] {
    let sig = signal.map(SignalState::one_hot).unwrap_or([0.0; 4]);
    let lane_flag = if signal.is_some() { 1.0 } else { 0.0 };
    [
        delta[0],
        delta[1],
        direction[0],
        direction[1],
        sig[0],
        sig[1],
        sig[2],
        sig[3],
        lane_flag,
    ]
}

/// Builds the graph at timestep `t`: nodes for agents valid at `t`, plus all
/// lane segments; agent-agent edges inside the symmetric radius (no self
/// loops); agent-lane edges from each agent to segments within its class
/// radius. Node and edge ordering is deterministic (by track id, then
/// segment index).
pub fn build_graph(
    tracks: &TrackSet,
    map: &VectorMap,
    t: usize,
    radii: &RadiusConfig,
) -> Result<SceneGraph> {
    if t >= tracks.history_len {
        return Err(Error::Validation(format!(
            "graph timestep {t} out of range (t_h = {})",
            tracks.history_len
        )));
    }
    let mut agent_nodes = Vec::new();
    for (slot, track) in tracks.tracks.iter().enumerate() {
        if let Some(position) = track.valid_position(t) {
            agent_nodes.push(AgentNode {
                slot,
                track_id: track.track_id,
                class_label: track.class_label,
                position,
                features: agent_features(position, track.class_label),
            });
        }
    }
    agent_nodes.sort_by_key(|n| n.track_id);

    let lane_nodes: Vec<LaneNode> = map
        .segments
        .iter()
        .enumerate()
        .map(|(idx, seg)| LaneNode {
            lane_id: seg.lane_id,
            segment_index: idx,
            midpoint: seg.midpoint(),
            direction: seg.direction(),
            length: seg.length(),
            signal: seg.signal,
            turn: seg.turn,
            features: lane_features(seg),
        })
        .collect();

    let mut edges = Vec::new();
    for (i, dst) in agent_nodes.iter().enumerate() {
        let r_dst = radii.for_class(dst.class_label);
        for (j, src) in agent_nodes.iter().enumerate() {
            if i == j {
                continue;
            }
            let radius = r_dst.min(radii.for_class(src.class_label));
            let dx = src.position[0] - dst.position[0];
            let dy = src.position[1] - dst.position[1];
            if (dx * dx + dy * dy).sqrt() <= radius {
                edges.push(GraphEdge {
                    src: NodeRef::Agent(j),
                    dst: i,
                    delta: [dx, dy],
                    signal: None,
                    features: edge_features([dx, dy], [0.0, 0.0], None),
                });
            }
        }
        for (l, (lane, seg)) in lane_nodes.iter().zip(&map.segments).enumerate() {
            if seg.distance_to(dst.position) <= r_dst {
                let delta = [
                    lane.midpoint[0] - dst.position[0],
                    lane.midpoint[1] - dst.position[1],
                ];
                edges.push(GraphEdge {
                    src: NodeRef::Lane(l),
                    dst: i,
                    delta,
                    signal: Some(lane.signal),
                    features: edge_features(delta, lane.direction, Some(lane.signal)),
                });
            }
        }
    }

    Ok(SceneGraph {
        timestep: t,
        num_slots: tracks.len(),
        agent_nodes,
        lane_nodes,
        edges,
    })
}

impl SceneGraph {
    pub fn num_nodes(&self) -> usize {
        self.agent_nodes.len() + self.lane_nodes.len()
    }

    /// Rewrites node and edge feature vectors into per-agent frames so the
    /// encoder sees rotation-invariant geometry: agent positions become
    /// own-frame displacements from the frame origin, and edge displacements
    /// and lane directions rotate into the destination agent's frame.
    /// `frames` is indexed by track slot.
    pub fn localized(&self, frames: &[RotationFrame]) -> Result<SceneGraph> {
        let mut out = self.clone();
        for node in &mut out.agent_nodes {
            let frame = frames.get(node.slot).ok_or_else(|| Error::Shape {
                op: "localized",
                detail: format!("no frame for slot {}", node.slot),
            })?;
            let local = frame.to_frame(node.position);
            node.features = agent_features(local, node.class_label);
        }
        for edge in &mut out.edges {
            let slot = self.agent_nodes[edge.dst].slot;
            let frame = &frames[slot];
            let delta = frame.rotate_into(edge.delta);
            let direction = match edge.src {
                NodeRef::Lane(l) => frame.rotate_into(self.lane_nodes[l].direction),
                NodeRef::Agent(_) => [0.0, 0.0],
            };
            edge.features = edge_features(delta, direction, edge.signal);
        }
        Ok(out)
    }
}

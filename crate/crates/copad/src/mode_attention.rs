//! Mode expansion and cross-mode attention.
//!
//! Agent embeddings are broadcast to F modes by adding learned mode
//! embeddings; one graph-attention layer then runs over each agent's fully
//! connected (self-loop included) mode graph. The agent axis is folded into
//! the batch axis with a block mask so a single attention call covers all
//! agents.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    filled_param, multi_head_attention, normal_param, xavier_param, zeros_param, AttnMask,
    AttnParams, ParamStore, Tensor,
};
use crate::{Error, Result};

/// Per-mode, per-agent embeddings stored mode-major: row `f * num_agents + n`.
#[derive(Debug, Clone)]
pub struct ModalEmbedding {
    pub tensor: Tensor,
    pub num_modes: usize,
    pub num_agents: usize,
}

impl ModalEmbedding {
    pub fn new(tensor: Tensor, num_modes: usize, num_agents: usize) -> Result<ModalEmbedding> {
        if tensor.shape().len() != 2 || tensor.shape()[0] != num_modes * num_agents {
            return Err(Error::Shape {
                op: "modal_embedding",
                detail: format!(
                    "tensor {:?} does not hold {num_modes} modes x {num_agents} agents",
                    tensor.shape()
                ),
            });
        }
        Ok(ModalEmbedding {
            tensor,
            num_modes,
            num_agents,
        })
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// Creates the learned tensors for this module under `prefix`.
pub fn init_mode_params(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    num_modes: usize,
    with_attention: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert(
        &format!("{prefix}.embed"),
        normal_param(&[num_modes, width], 0.1, rng),
    )?;
    if with_attention {
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(
                &format!("{prefix}.gat.{name}"),
                xavier_param(width, width, rng),
            )?;
        }
        for name in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("{prefix}.gat.{name}"), zeros_param(&[1, width]))?;
        }
        store.insert(
            &format!("{prefix}.gat.ln_g"),
            filled_param(&[1, width], 1.0),
        )?;
        store.insert(&format!("{prefix}.gat.ln_b"), zeros_param(&[1, width]))?;
    }
    Ok(())
}

/// Expands `N x D` agent embeddings to `F` modes:
/// `out[f, n] = e[n] + mode_embedding[f]`.
pub fn expand_modes(
    embeddings: &Tensor,
    num_modes: usize,
    store: &ParamStore,
    prefix: &str,
) -> Result<ModalEmbedding> {
    let (num_agents, width) = match embeddings.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(Error::Shape {
                op: "expand_modes",
                detail: format!("expected N x D embeddings, got {other:?}"),
            })
        }
    };
    let embed = store.get(&format!("{prefix}.embed"))?;
    if embed.shape() != [num_modes, width] {
        return Err(Error::Shape {
            op: "expand_modes",
            detail: format!(
                "mode embedding {:?} incompatible with F={num_modes}, D={width}",
                embed.shape()
            ),
        });
    }
    let tiled = embeddings.repeat_rows(num_modes)?;
    // mode f's embedding row, repeated once per agent
    let idx: Vec<usize> = (0..num_modes)
        .flat_map(|f| std::iter::repeat(f).take(num_agents))
        .collect();
    let mode_rows = embed.gather_rows(&idx)?;
    ModalEmbedding::new(tiled.add(&mode_rows)?, num_modes, num_agents)
}

/// One attention layer over each agent's fully connected mode graph
/// (attribute-free edges, self-loops included), with residual + layer norm.
/// All agents are handled by one masked attention call.
pub fn mode_gat(
    modal: &ModalEmbedding,
    heads: usize,
    store: &ParamStore,
    prefix: &str,
    dropout: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ModalEmbedding> {
    let p = |name: &str| store.get(&format!("{prefix}.gat.{name}"));
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
    let rows = modal.num_modes * modal.num_agents;
    if rows == 0 {
        return Ok(modal.clone());
    }
    // rows are mode-major, so same-agent rows share a residue mod N
    let mask = AttnMask::same_residue(rows, modal.num_agents);
    let attn = multi_head_attention(&modal.tensor, &modal.tensor, heads, &params, Some(&mask))?;
    let attn = attn.dropout(dropout, train, rng)?;
    let out = modal
        .tensor
        .add(&attn)?
        .layer_norm(p("ln_g")?, p("ln_b")?)?;
    ModalEmbedding::new(out, modal.num_modes, modal.num_agents)
}

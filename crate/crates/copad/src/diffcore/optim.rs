//! Named parameter store with AdamW moment buffers, the cosine learning-rate
//! schedule, and a versioned JSON checkpoint container.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::config::ModelSection;
use crate::{Error, Result};

const CHECKPOINT_FORMAT: &str = "copad-checkpoint-v1";

/// Named parameters plus per-parameter AdamW first/second moment buffers and
/// a global step counter. Mutation is single-writer.
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore {
            params: BTreeMap::new(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if !tensor.requires_grad() {
            return Err(Error::State(format!(
                "parameter {name} must require gradients"
            )));
        }
        if self.params.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        let n = tensor.numel();
        self.params.insert(name.to_string(), tensor);
        self.moments
            .insert(name.to_string(), (vec![0.0; n], vec![0.0; n]));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&self) {
        for p in self.params.values() {
            p.zero_grad();
        }
    }

    /// Gives parameters untouched by the last graph an exact zero gradient
    /// (a parameter that does not influence the loss has zero gradient).
    pub fn backfill_zero_grads(&self) {
        for p in self.params.values() {
            if p.grad().is_none() {
                p.accumulate_grad(&vec![0.0; p.numel()]);
            }
        }
    }

    /// Decoupled weight-decay AdamW update over all parameters. Every
    /// parameter must hold a gradient; gradients are zeroed afterwards.
    pub fn adamw_step(
        &mut self,
        lr: f64,
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        let t = self.step + 1;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for (name, param) in &self.params {
            let grad = param
                .grad()
                .ok_or_else(|| Error::State(format!("parameter {name} has no gradient")))?;
            let (m, v) = self.moments.get_mut(name).expect("moments exist");
            let mut values = param.to_vec();
            for i in 0..values.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * values[i]);
            }
            param.set_data(values)?;
            param.zero_grad();
        }
        self.step = t;
        Ok(())
    }
}

/// Cosine annealing: `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = (step.min(total_steps) as f64) / (total_steps as f64);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MomentRecord {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Self-describing checkpoint: format tag, model configuration, parameter
/// tensors, optimizer moments, and the step counter.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    step: u64,
    pub model: ModelSection,
    params: BTreeMap<String, TensorRecord>,
    moments: BTreeMap<String, MomentRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, model: &ModelSection) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            step: store.step,
            model: model.clone(),
            params: store
                .params
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        TensorRecord {
                            shape: t.shape().to_vec(),
                            values: t.to_vec(),
                        },
                    )
                })
                .collect(),
            moments: store
                .moments
                .iter()
                .map(|(k, (m, v))| {
                    (
                        k.clone(),
                        MomentRecord {
                            m: m.clone(),
                            v: v.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn into_store(self) -> Result<(ParamStore, ModelSection)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format tag {:?}",
                self.format
            )));
        }
        let mut store = ParamStore::new();
        for (name, rec) in self.params {
            let tensor = Tensor::param(&rec.shape, rec.values)?;
            store.insert(&name, tensor)?;
        }
        for (name, rec) in self.moments {
            let slot = store.moments.get_mut(&name).ok_or_else(|| {
                Error::Validation(format!("moments for unknown parameter {name}"))
            })?;
            if rec.m.len() != slot.0.len() || rec.v.len() != slot.1.len() {
                return Err(Error::Validation(format!(
                    "moment buffers for {name} do not match parameter shape"
                )));
            }
            *slot = (rec.m, rec.v);
        }
        store.step = self.step;
        Ok((store, self.model))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::Runtime(format!("checkpoint encode: {e}")))
    }
}

pub fn save_checkpoint<P: AsRef<Path>>(
    store: &ParamStore,
    model: &ModelSection,
    path: P,
) -> Result<()> {
    let ckpt = Checkpoint::from_store(store, model);
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    writer.write_all(&ckpt.to_bytes()?)?;
    writer.flush()?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<(ParamStore, ModelSection)> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let ckpt: Checkpoint = serde_json::from_reader(reader)
        .map_err(|e| Error::Validation(format!("checkpoint decode: {e}")))?;
    ckpt.into_store()
}

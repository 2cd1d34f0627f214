use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gnn::{ENCODER_HIDDEN, ENCODER_OUT};
use super::{ModelConfig, ModelError, ModelKind, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)), fans taken from the 2-D shape.
    Glorot,
    Zeros,
    Ones,
    /// LSTM bias: zero except the forget-gate quarter, set to +1.
    ForgetBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn glorot_limit(&self) -> f64 {
        let (fan_in, fan_out) = (self.shape[0], self.shape[self.shape.len() - 1]);
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }
}

fn linear(specs: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    specs.push(ParamSpec::new(format!("{prefix}.w"), &[fan_in, fan_out], Init::Glorot));
    specs.push(ParamSpec::new(format!("{prefix}.b"), &[fan_out], Init::Zeros));
}

fn layer_norm(specs: &mut Vec<ParamSpec>, prefix: &str, width: usize) {
    specs.push(ParamSpec::new(format!("{prefix}.g"), &[width], Init::Ones));
    specs.push(ParamSpec::new(format!("{prefix}.b"), &[width], Init::Zeros));
}

/// Every parameter the configured architecture reads, in creation order.
pub fn param_specs(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let o = config.n_organs;
    let d = config.descriptor_len;
    let mut s = Vec::new();
    match config.kind {
        ModelKind::Mlp => {
            let w = config.mlp_width;
            linear(&mut s, "mlp.in", config.mlp_input_len(), w);
            layer_norm(&mut s, "mlp.in.ln", w);
            for k in 0..config.mlp_blocks {
                linear(&mut s, &format!("mlp.block{k}"), w, w);
                layer_norm(&mut s, &format!("mlp.block{k}.ln"), w);
            }
            linear(&mut s, "mlp.out", w, o);
        }
        ModelKind::Lstm => {
            let h = config.lstm_hidden;
            s.push(ParamSpec::new("lstm.w_ih", &[o + d, 4 * h], Init::Glorot));
            s.push(ParamSpec::new("lstm.w_hh", &[h, 4 * h], Init::Glorot));
            s.push(ParamSpec::new("lstm.b", &[4 * h], Init::ForgetBias));
            linear(&mut s, "lstm.out", h, o);
        }
        ModelKind::Gnn => {
            let h = config.gnn_hidden;
            let hd = h / config.gat_heads;
            linear(&mut s, "enc.l1", d, ENCODER_HIDDEN);
            layer_norm(&mut s, "enc.ln1", ENCODER_HIDDEN);
            linear(&mut s, "enc.l2", ENCODER_HIDDEN, ENCODER_OUT);
            layer_norm(&mut s, "enc.ln2", ENCODER_OUT);
            linear(&mut s, "lift", 1, h);
            for (layer, fan_in) in [("gat1", h + 1), ("gat2", h)] {
                s.push(ParamSpec::new(format!("{layer}.w"), &[fan_in, h], Init::Glorot));
                s.push(ParamSpec::new(format!("{layer}.a_src"), &[config.gat_heads, hd], Init::Glorot));
                s.push(ParamSpec::new(format!("{layer}.a_dst"), &[config.gat_heads, hd], Init::Glorot));
            }
            for gate in ["z", "r", "h"] {
                s.push(ParamSpec::new(format!("gru.w_{gate}"), &[h + ENCODER_OUT, h], Init::Glorot));
                s.push(ParamSpec::new(format!("gru.u_{gate}"), &[h, h], Init::Glorot));
                s.push(ParamSpec::new(format!("gru.b_{gate}"), &[h], Init::Zeros));
            }
            for proj in ["w_q", "w_k", "w_v"] {
                s.push(ParamSpec::new(format!("temporal.{proj}"), &[h, h], Init::Glorot));
            }
            linear(&mut s, "readout.l1", 2 * h, config.readout_hidden);
            linear(&mut s, "readout.l2", config.readout_hidden, 1);
        }
    }
    Ok(s)
}

/// Named parameters with a deterministic (sorted) iteration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet {
    pub seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParameterSet {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Checks names and shapes against the architecture.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let specs = param_specs(config)?;
        if specs.len() != self.tensors.len() {
            return Err(ModelError::Config(format!(
                "parameter set holds {} tensors, architecture needs {}",
                self.tensors.len(),
                specs.len()
            )));
        }
        for spec in specs {
            let t = self.get(&spec.name).ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name,
                    expected: spec.shape,
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Records every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    pub fn to_entries_json(&self) -> serde_json::Value {
        let entries: Vec<ParamEntry> = self
            .tensors
            .iter()
            .map(|(k, v)| ParamEntry {
                name: k.clone(),
                shape: v.shape().to_vec(),
                values: v.data().to_vec(),
            })
            .collect();
        serde_json::to_value(entries).expect("parameter entries serialize")
    }

    pub fn from_entries_json(value: serde_json::Value, seed: u64) -> Result<Self> {
        let entries: Vec<ParamEntry> =
            serde_json::from_value(value).map_err(|e| ModelError::Config(format!("parameter entries: {e}")))?;
        let mut set = Self::new(seed);
        for e in entries {
            let t = Tensor::new(e.shape, e.values)?;
            if set.tensors.insert(e.name.clone(), t).is_some() {
                return Err(ModelError::Config(format!("duplicate parameter `{}`", e.name)));
            }
        }
        Ok(set)
    }
}

/// Glorot-uniform weights, zero biases, unit LayerNorm gains; one seeded
/// stream consumed in spec order.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    let specs = param_specs(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParameterSet::new(seed);
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Glorot => {
                let limit = spec.glorot_limit();
                (0..n).map(|_| rng.gen_range(-limit..=limit)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::ForgetBias => {
                let h = n / 4;
                (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect()
            }
        };
        set.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(set)
}

/// Parameters recorded on one tape.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients gathered from `tape`; parameters the loss never reached
    /// get zeros.
    pub fn grads(&self, tape: &Tape) -> ParameterSet {
        let mut out = ParameterSet::new(0);
        for (name, &v) in &self.vars {
            let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            out.insert(name.clone(), g);
        }
        out
    }
}

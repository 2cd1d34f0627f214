//! The three predictors, written as pure functions of a [`ParameterSet`]
//! and their inputs on a [`Tape`].

mod gnn;
mod lstm;
mod mlp;
mod params;

pub use gnn::{
    drug_encoder, dyngnn_forward, dyngnn_sequence, gat_layer, graph_gru_step, temporal_attention, Adjacency,
    GatOutput, ENCODER_HIDDEN, ENCODER_OUT,
};
pub use lstm::{lstm_forward, lstm_hidden_states, lstm_inputs, lstm_sequence};
pub use mlp::{mlp_forward, mlp_input_row, mlp_sequence};
pub use params::{init_params, param_specs, BoundParams, Init, ParamSpec, ParameterSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pbpk::{DrugSequence, DESCRIPTOR_LEN};
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Lstm,
    Gnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Lstm => "lstm",
            ModelKind::Gnn => "gnn",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "lstm" => Ok(ModelKind::Lstm),
            "gnn" => Ok(ModelKind::Gnn),
            other => Err(ModelError::Config(format!("unknown model kind `{other}` (expected mlp, lstm or gnn)"))),
        }
    }
}

/// Architecture hyperparameters. Fields that do not apply to `kind` are
/// ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_organs: usize,
    pub descriptor_len: usize,
    pub mlp_width: usize,
    pub mlp_blocks: usize,
    /// Number of most recent concentration rows the MLP sees.
    pub mlp_window: usize,
    pub lstm_hidden: usize,
    /// Per-organ node state size.
    pub gnn_hidden: usize,
    pub gat_heads: usize,
    pub temporal_heads: usize,
    pub readout_hidden: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Gnn,
            n_organs: 10,
            descriptor_len: DESCRIPTOR_LEN,
            mlp_width: 128,
            mlp_blocks: 2,
            mlp_window: 1,
            lstm_hidden: 64,
            gnn_hidden: 32,
            gat_heads: 4,
            temporal_heads: 4,
            readout_hidden: 32,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind, n_organs: usize) -> Self {
        Self {
            kind,
            n_organs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n_organs == 0 {
            return err("n_organs must be ≥ 1".into());
        }
        if self.descriptor_len != DESCRIPTOR_LEN {
            return err(format!("descriptor_len must be {DESCRIPTOR_LEN}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return err("layer_norm_eps must be > 0".into());
        }
        match self.kind {
            ModelKind::Mlp if self.mlp_width == 0 => err("mlp_width must be ≥ 1".into()),
            ModelKind::Lstm if self.lstm_hidden == 0 => err("lstm_hidden must be ≥ 1".into()),
            ModelKind::Gnn => {
                if self.gnn_hidden == 0 || self.readout_hidden == 0 {
                    return err("gnn_hidden and readout_hidden must be ≥ 1".into());
                }
                for (what, heads) in [("gat_heads", self.gat_heads), ("temporal_heads", self.temporal_heads)] {
                    if heads == 0 || self.gnn_hidden % heads != 0 {
                        return err(format!(
                            "gnn_hidden {} is not divisible by {what} {heads}",
                            self.gnn_hidden
                        ));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Width of one MLP input row.
    pub fn mlp_input_len(&self) -> usize {
        self.descriptor_len + self.mlp_window * self.n_organs + 1
    }
}

/// Everything a forward pass needs besides parameters.
pub struct ForwardCtx<'a> {
    pub config: &'a ModelConfig,
    pub adjacency: &'a Adjacency,
    /// `Some` enables dropout with this RNG stream.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

/// Teacher-forced next-step predictions for a whole trajectory.
///
/// Returns a `(T−1)×O` node whose row `t−1` predicts row `t` from rows
/// `0..t`. For every model this equals running the single-pair forward on
/// each history separately.
pub fn predict_sequence(tape: &mut Tape, params: &BoundParams, ctx: &mut ForwardCtx<'_>, seq: &DrugSequence) -> Result<Var> {
    if seq.n_organs != ctx.config.n_organs {
        return Err(ModelError::Input(format!(
            "sequence has {} organs, model expects {}",
            seq.n_organs, ctx.config.n_organs
        )));
    }
    if seq.n_times < 2 {
        return Err(ModelError::Input("sequence needs at least 2 time steps".into()));
    }
    match ctx.config.kind {
        ModelKind::Mlp => mlp_sequence(tape, params, ctx.config, seq, ctx.dropout_rng.as_deref_mut()),
        ModelKind::Lstm => lstm_sequence(tape, params, ctx.config, seq),
        ModelKind::Gnn => dyngnn_sequence(tape, params, ctx.config, seq, ctx.adjacency),
    }
}

/// `x·W + b` with parameters `{prefix}.w` and `{prefix}.b`.
pub(crate) fn linear(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let xw = tape.matmul(x, w)?;
    Ok(tape.add(xw, b)?)
}

/// LayerNorm with parameters `{prefix}.g` and `{prefix}.b`.
pub(crate) fn layer_norm(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = p.get(&format!("{prefix}.g"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(tape.layer_norm(x, g, b, eps)?)
}

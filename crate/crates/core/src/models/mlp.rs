use rand_chacha::ChaCha8Rng;

use super::{layer_norm, linear, BoundParams, ModelConfig, ModelError, Result};
use crate::pbpk::DrugSequence;
use crate::tensor::{Tape, Tensor, Var};

/// `concat(descriptor, last `window` rows of history, t_norm)`.
///
/// Missing rows at the start of a trajectory are zero-filled (the oldest
/// slot first).
pub fn mlp_input_row(descriptor: &[f64], history: &[f64], n_organs: usize, window: usize, t_norm: f64) -> Vec<f64> {
    let mut row = Vec::with_capacity(descriptor.len() + window * n_organs + 1);
    row.extend_from_slice(descriptor);
    let available = history.len() / n_organs;
    for k in (1..=window).rev() {
        if k <= available {
            let start = (available - k) * n_organs;
            row.extend_from_slice(&history[start..start + n_organs]);
        } else {
            row.extend(std::iter::repeat(0.0).take(n_organs));
        }
    }
    row.push(t_norm);
    row
}

/// Forward pass over a batch of input rows, returning one `O`-row each.
///
/// Linear → GELU → LayerNorm, then residual blocks
/// `x + dropout(LayerNorm(GELU(Linear(x))))`, then a linear head.
pub fn mlp_forward(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    input: Var,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if tape.value(input).cols() != cfg.mlp_input_len() {
        return Err(ModelError::Input(format!(
            "mlp input has width {}, expected {}",
            tape.value(input).cols(),
            cfg.mlp_input_len()
        )));
    }
    let eps = cfg.layer_norm_eps;
    let h = linear(tape, p, "mlp.in", input)?;
    let h = tape.gelu(h);
    let mut x = layer_norm(tape, p, "mlp.in.ln", h, eps)?;
    for k in 0..cfg.mlp_blocks {
        let y = linear(tape, p, &format!("mlp.block{k}"), x)?;
        let y = tape.gelu(y);
        let y = layer_norm(tape, p, &format!("mlp.block{k}.ln"), y, eps)?;
        let y = match dropout_rng.as_deref_mut() {
            Some(rng) => tape.dropout(y, cfg.dropout, rng, true)?,
            None => y,
        };
        x = tape.add(x, y)?;
    }
    linear(tape, p, "mlp.out", x)
}

/// Predictions for targets `1..T` of one trajectory, `(T−1)×O`.
pub fn mlp_sequence(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    seq: &DrugSequence,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let denom = (seq.n_times - 1) as f64;
    let rows: Vec<Vec<f64>> = (1..seq.n_times)
        .map(|t| mlp_input_row(&seq.descriptor, seq.history(t), seq.n_organs, cfg.mlp_window, t as f64 / denom))
        .collect();
    let input = tape.constant(Tensor::from_rows(&rows)?);
    mlp_forward(tape, p, cfg, input, dropout_rng)
}

use super::{linear, BoundParams, ModelConfig, ModelError, Result};
use crate::pbpk::DrugSequence;
use crate::tensor::{Tape, Tensor, Var};

/// Runs the LSTM over the rows of `inputs` (`T'×(O+6)`) from `h₀ = c₀ = 0`
/// and returns `h_1..h_{T'}`, each `1×H`.
///
/// Gate columns of `lstm.w_ih`, `lstm.w_hh` and `lstm.b` are ordered input,
/// forget, candidate, output.
pub fn lstm_hidden_states(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, inputs: Var) -> Result<Vec<Var>> {
    let steps = tape.value(inputs).rows();
    if tape.value(inputs).is_empty() || steps == 0 {
        return Err(ModelError::Input("lstm needs a non-empty sequence".into()));
    }
    let h = cfg.lstm_hidden;
    let w_ih = p.get("lstm.w_ih")?;
    let w_hh = p.get("lstm.w_hh")?;
    let b = p.get("lstm.b")?;
    // input projections for every step at once
    let xw = tape.matmul(inputs, w_ih)?;
    let xw = tape.add(xw, b)?;

    let mut hidden = tape.constant(Tensor::zeros(&[1, h]));
    let mut cell = tape.constant(Tensor::zeros(&[1, h]));
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = tape.slice_rows(xw, t, t + 1)?;
        let hw = tape.matmul(hidden, w_hh)?;
        let pre = tape.add(x_t, hw)?;
        let i = tape.slice_cols(pre, 0, h)?;
        let f = tape.slice_cols(pre, h, 2 * h)?;
        let g = tape.slice_cols(pre, 2 * h, 3 * h)?;
        let o = tape.slice_cols(pre, 3 * h, 4 * h)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, cell)?;
        let write = tape.mul(i, g)?;
        cell = tape.add(keep, write)?;
        let tc = tape.tanh(cell);
        hidden = tape.mul(o, tc)?;
        states.push(hidden);
    }
    Ok(states)
}

/// Prediction for the step after `inputs`: `Linear(h_{T'})`, `1×O`.
pub fn lstm_forward(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, inputs: Var) -> Result<Var> {
    let states = lstm_hidden_states(tape, p, cfg, inputs)?;
    let last = *states.last().expect("non-empty");
    linear(tape, p, "lstm.out", last)
}

fn input_rows(seq: &DrugSequence, steps: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = (0..steps)
        .map(|t| {
            let mut r = seq.row(t).to_vec();
            r.extend_from_slice(&seq.descriptor);
            r
        })
        .collect();
    Ok(Tensor::from_rows(&rows)?)
}

/// Predictions for targets `1..T` of one trajectory, `(T−1)×O`. One unroll
/// over rows `0..T−1` yields every prefix's final hidden state.
pub fn lstm_sequence(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, seq: &DrugSequence) -> Result<Var> {
    let inputs = tape.constant(input_rows(seq, seq.n_times - 1)?);
    let states = lstm_hidden_states(tape, p, cfg, inputs)?;
    let stacked = tape.concat_rows(&states)?;
    linear(tape, p, "lstm.out", stacked)
}

/// `T'×(O+6)` input rows built from the first `steps` rows of `seq`.
pub fn lstm_inputs(seq: &DrugSequence, steps: usize) -> Result<Tensor> {
    input_rows(seq, steps)
}

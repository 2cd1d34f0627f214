//! Dynamic graph network: GAT message passing feeding a GraphGRU cell,
//! a descriptor encoder, temporal self-attention over past node states, a
//! persistence skip and a per-organ readout.

use super::{layer_norm, linear, BoundParams, ModelConfig, ModelError, Result};
use crate::pbpk::{DrugSequence, OrganGraph};
use crate::tensor::{Tape, Tensor, Var};

pub const ENCODER_HIDDEN: usize = 32;
pub const ENCODER_OUT: usize = 16;

/// Row-major `O×O` neighbor mask; `mask[i*O + j]` means node `i` attends
/// to node `j`. Always contains the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    n: usize,
    mask: Vec<bool>,
}

impl Adjacency {
    /// Adds self-loops to `mask`.
    pub fn new(n: usize, mut mask: Vec<bool>) -> Result<Self> {
        if mask.len() != n * n {
            return Err(ModelError::Input(format!("adjacency has {} entries, expected {}", mask.len(), n * n)));
        }
        for i in 0..n {
            mask[i * n + i] = true;
        }
        Ok(Self { n, mask })
    }

    pub fn from_graph(graph: &OrganGraph) -> Self {
        Self::new(graph.len(), graph.adjacency()).expect("graph adjacency is square")
    }

    /// Self-loops only.
    pub fn identity(n: usize) -> Self {
        Self::new(n, vec![false; n * n]).expect("square")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.mask[i * self.n + j])
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut mask = vec![false; n * n];
        for a in 0..n {
            for b in 0..n {
                mask[a * n + b] = self.mask[perm[a] * n + perm[b]];
            }
        }
        Self { n, mask }
    }
}

pub struct GatOutput {
    pub out: Var,
    /// One `O×O` attention matrix per head.
    pub attention: Vec<Var>,
}

/// One multi-head graph attention layer with parameters `{prefix}.w`,
/// `{prefix}.a_src` and `{prefix}.a_dst`.
///
/// Per head: `score(i,j) = LeakyReLU(a_srcᵀ·W s_i + a_dstᵀ·W s_j)` over the
/// neighbors of `i`, softmax-normalized, then `Σ_j α_ij·W s_j`. Heads are
/// concatenated and passed through GELU.
pub fn gat_layer(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    nodes: Var,
    adj: &Adjacency,
) -> Result<GatOutput> {
    let n = tape.value(nodes).rows();
    if n != adj.n() {
        return Err(ModelError::Input(format!(
            "{n} node states but adjacency covers {} nodes",
            adj.n()
        )));
    }
    let w = p.get(&format!("{prefix}.w"))?;
    let a_src = p.get(&format!("{prefix}.a_src"))?;
    let a_dst = p.get(&format!("{prefix}.a_dst"))?;
    let heads = cfg.gat_heads;
    let z = tape.matmul(nodes, w)?;
    let width = tape.value(z).cols();
    let hd = width / heads;
    let ones_col = tape.constant(Tensor::ones(&[n, 1]));
    let ones_row = tape.constant(Tensor::ones(&[1, n]));

    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for k in 0..heads {
        let zk = tape.slice_cols(z, k * hd, (k + 1) * hd)?;
        let src = tape.slice_rows(a_src, k, k + 1)?;
        let src = tape.transpose(src);
        let dst = tape.slice_rows(a_dst, k, k + 1)?;
        let dst = tape.transpose(dst);
        let e_src = tape.matmul(zk, src)?; // n×1
        let e_dst = tape.matmul(zk, dst)?; // n×1
        let e_dst_t = tape.transpose(e_dst); // 1×n
        let rows = tape.matmul(e_src, ones_row)?;
        let cols = tape.matmul(ones_col, e_dst_t)?;
        let scores = tape.add(rows, cols)?;
        let scores = tape.leaky_relu(scores, cfg.leaky_slope);
        let alpha = tape.masked_softmax(scores, Some(adj.mask()))?;
        outs.push(tape.matmul(alpha, zk)?);
        attention.push(alpha);
    }
    let cat = tape.concat_cols(&outs)?;
    Ok(GatOutput {
        out: tape.gelu(cat),
        attention,
    })
}

/// GraphGRU update of the node states.
///
/// `u = [message ‖ drug_embed]`, `z = σ(uW_z + sU_z + b_z)`,
/// `r = σ(uW_r + sU_r + b_r)`, `s̃ = tanh(uW_h + (r⊙s)U_h + b_h)`,
/// `s' = (1−z)⊙s + z⊙s̃`.
pub fn graph_gru_step(
    tape: &mut Tape,
    p: &BoundParams,
    _cfg: &ModelConfig,
    state: Var,
    message: Var,
    drug_embed: Var,
) -> Result<Var> {
    let n = tape.value(state).rows();
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    let embed = tape.matmul(ones, drug_embed)?;
    let u = tape.concat_cols(&[message, embed])?;

    let gate = |tape: &mut Tape, g: &str, recur: Var| -> Result<Var> {
        let uw = tape.matmul(u, p.get(&format!("gru.w_{g}"))?)?;
        let su = tape.matmul(recur, p.get(&format!("gru.u_{g}"))?)?;
        let sum = tape.add(uw, su)?;
        Ok(tape.add(sum, p.get(&format!("gru.b_{g}"))?)?)
    };
    let z = gate(tape, "z", state)?;
    let z = tape.sigmoid(z);
    let r = gate(tape, "r", state)?;
    let r = tape.sigmoid(r);
    let rs = tape.mul(r, state)?;
    let cand = gate(tape, "h", rs)?;
    let cand = tape.tanh(cand);
    // s + z⊙(s̃ − s)
    let delta = tape.sub(cand, state)?;
    let step = tape.mul(z, delta)?;
    Ok(tape.add(state, step)?)
}

/// Descriptor encoder 6 → 32 → 16, each layer Linear → GELU → LayerNorm.
pub fn drug_encoder(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, drug: Var) -> Result<Var> {
    let eps = cfg.layer_norm_eps;
    let h = linear(tape, p, "enc.l1", drug)?;
    let h = tape.gelu(h);
    let h = layer_norm(tape, p, "enc.ln1", h, eps)?;
    let h = linear(tape, p, "enc.l2", h)?;
    let h = tape.gelu(h);
    layer_norm(tape, p, "enc.ln2", h, eps)
}

/// Multi-head scaled dot-product self-attention over the rows of
/// `history` (`T'×h`). With `causal`, row `t` only attends to rows `0..=t`,
/// so every row is the summary of its own prefix. Returns the `T'×h`
/// outputs and one `T'×T'` weight matrix per head.
pub fn temporal_attention(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    history: Var,
    causal: bool,
) -> Result<(Var, Vec<Var>)> {
    let steps = tape.value(history).rows();
    let heads = cfg.temporal_heads;
    let q = tape.matmul(history, p.get("temporal.w_q")?)?;
    let k = tape.matmul(history, p.get("temporal.w_k")?)?;
    let v = tape.matmul(history, p.get("temporal.w_v")?)?;
    let hd = tape.value(q).cols() / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mask: Option<Vec<bool>> =
        causal.then(|| (0..steps * steps).map(|i| i % steps <= i / steps).collect());

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * hd, (head + 1) * hd)?;
        let kh = tape.slice_cols(k, head * hd, (head + 1) * hd)?;
        let vh = tape.slice_cols(v, head * hd, (head + 1) * hd)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.masked_softmax(scores, mask.as_deref())?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    Ok((tape.concat_cols(&outs)?, weights))
}

/// Unrolls the recurrent graph cell over the first `n_obs` rows of
/// `values` and returns `n_obs×O` predictions; row `k` predicts row `k+1`
/// from rows `0..=k`.
fn unroll_predictions(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    values: &[f64],
    n_organs: usize,
    n_obs: usize,
    descriptor: &[f64],
    adj: &Adjacency,
) -> Result<Var> {
    if n_obs == 0 {
        return Err(ModelError::Input("dynamic GNN needs at least one observation".into()));
    }
    if values.len() < n_obs * n_organs {
        return Err(ModelError::Input(format!(
            "{} values cannot hold {n_obs} rows of {n_organs} organs",
            values.len()
        )));
    }
    if adj.n() != n_organs || cfg.n_organs != n_organs {
        return Err(ModelError::Input(format!(
            "organ count mismatch: data {n_organs}, adjacency {}, model {}",
            adj.n(),
            cfg.n_organs
        )));
    }
    let h = cfg.gnn_hidden;
    let obs = |t: usize| Tensor::new(vec![n_organs, 1], values[t * n_organs..(t + 1) * n_organs].to_vec());

    let drug = tape.constant(Tensor::row(descriptor));
    let embed = drug_encoder(tape, p, cfg, drug)?;

    let c0 = tape.constant(obs(0)?);
    let mut state = linear(tape, p, "lift", c0)?;
    let mut states = Vec::with_capacity(n_obs);
    for t in 0..n_obs {
        let c = tape.constant(obs(t)?);
        let x = tape.concat_cols(&[state, c])?;
        let m1 = gat_layer(tape, p, cfg, "gat1", x, adj)?.out;
        let m2 = gat_layer(tape, p, cfg, "gat2", m1, adj)?.out;
        state = graph_gru_step(tape, p, cfg, state, m2, embed)?;
        states.push(state);
    }

    // selector[t*O + o, t] = 1 broadcasts per-step rows to that step's nodes
    let mut sel = vec![0.0; n_obs * n_organs * n_obs];
    for t in 0..n_obs {
        for o in 0..n_organs {
            sel[(t * n_organs + o) * n_obs + t] = 1.0;
        }
    }
    let selector = Tensor::new(vec![n_obs * n_organs, n_obs], sel)?;
    let mut avg = vec![0.0; n_obs * n_obs * n_organs];
    for t in 0..n_obs {
        for o in 0..n_organs {
            avg[t * n_obs * n_organs + t * n_organs + o] = 1.0 / n_organs as f64;
        }
    }
    let averager = tape.constant(Tensor::new(vec![n_obs, n_obs * n_organs], avg)?);
    let selector = tape.constant(selector);

    let all_states = tape.concat_rows(&states)?; // (n_obs·O)×h
    let pooled = tape.matmul(averager, all_states)?; // n_obs×h
    let (summary, _) = temporal_attention(tape, p, cfg, pooled, true)?;
    let summary_nodes = tape.matmul(selector, summary)?; // (n_obs·O)×h
    let modulated = tape.add(all_states, summary_nodes)?;
    let readout_in = tape.concat_cols(&[modulated, summary_nodes])?;
    debug_assert_eq!(tape.value(readout_in).cols(), 2 * h);
    let r = linear(tape, p, "readout.l1", readout_in)?;
    let r = tape.gelu(r);
    let r = linear(tape, p, "readout.l2", r)?; // (n_obs·O)×1
    let delta = tape.reshape(r, vec![n_obs, n_organs])?;
    let last_obs = tape.constant(Tensor::new(vec![n_obs, n_organs], values[..n_obs * n_organs].to_vec())?);
    Ok(tape.add(last_obs, delta)?)
}

/// Prediction for the step after `history` (`T'×O` row-major), `1×O`.
pub fn dyngnn_forward(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    history: &[f64],
    n_organs: usize,
    descriptor: &[f64],
    adj: &Adjacency,
) -> Result<Var> {
    if n_organs == 0 || history.len() % n_organs != 0 {
        return Err(ModelError::Input(format!(
            "history of {} values is not a whole number of {n_organs}-organ rows",
            history.len()
        )));
    }
    let n_obs = history.len() / n_organs;
    let preds = unroll_predictions(tape, p, cfg, history, n_organs, n_obs, descriptor, adj)?;
    if n_obs == 1 {
        return Ok(preds);
    }
    Ok(tape.slice_rows(preds, n_obs - 1, n_obs)?)
}

/// Predictions for targets `1..T` of one trajectory, `(T−1)×O`.
pub fn dyngnn_sequence(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    seq: &DrugSequence,
    adj: &Adjacency,
) -> Result<Var> {
    unroll_predictions(
        tape,
        p,
        cfg,
        &seq.values,
        seq.n_organs,
        seq.n_times - 1,
        &seq.descriptor,
        adj,
    )
}

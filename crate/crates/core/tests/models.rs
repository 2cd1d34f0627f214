use pbpk_core::models::{
    drug_encoder, dyngnn_forward, gat_layer, graph_gru_step, init_params, lstm_forward, lstm_inputs, mlp_forward,
    mlp_input_row, predict_sequence, temporal_attention, Adjacency, ForwardCtx, ModelConfig, ModelKind,
    ParameterSet,
};
use pbpk_core::pbpk::{generate_dataset, split_dataset, DatagenConfig, DrugSequence, NormMode, NormStats, OrganGraph};
use pbpk_core::tensor::{gelu, matmul, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn zeros(cfg: &ModelConfig) -> ParameterSet {
    init_params(cfg, 0).unwrap().zeros_like()
}

fn sequences(n_organs_check: usize) -> Vec<DrugSequence> {
    let data = generate_dataset(
        &DatagenConfig {
            n_drugs: 10,
            t_steps: 8,
            t_end_h: 4.0,
            ..DatagenConfig::default()
        },
        &OrganGraph::default(),
    )
    .unwrap();
    assert_eq!(data.n_organs(), n_organs_check);
    let split = split_dataset(10, 3).unwrap();
    let norm = NormStats::fit(&data, &split.train, NormMode::PerOrgan).unwrap();
    norm.sequences(&data, &[0, 1])
}

#[test]
fn mlp_zero_params_give_zero_output() {
    let cfg = ModelConfig::new(ModelKind::Mlp, 10);
    let params = zeros(&cfg);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(random(&mut ChaCha8Rng::seed_from_u64(1), &[4, cfg.mlp_input_len()], 2.0));
    let y = mlp_forward(&mut tape, &p, &cfg, x, None).unwrap();
    assert_eq!(tape.shape(y), &[4, 10]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_zero_params_and_inputs_give_zero_prediction() {
    let cfg = ModelConfig::new(ModelKind::Lstm, 10);
    let params = zeros(&cfg);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[5, 16]));
    let y = lstm_forward(&mut tape, &p, &cfg, x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let empty = tape.constant(Tensor::zeros(&[0, 16]));
    assert!(lstm_forward(&mut tape, &p, &cfg, empty).is_err());
}

#[test]
fn gat_with_only_self_loops_is_gelu_of_projection() {
    let cfg = ModelConfig::new(ModelKind::Gnn, 4);
    let params = init_params(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random(&mut rng, &[4, cfg.gnn_hidden], 1.0);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let nodes = tape.constant(s.clone());
    let out = gat_layer(&mut tape, &p, &cfg, "gat2", nodes, &Adjacency::identity(4)).unwrap();
    let expected = matmul(&s, params.get("gat2.w").unwrap()).unwrap();
    for (a, z) in tape.value(out.out).data().iter().zip(expected.data()) {
        assert!((a - gelu(*z)).abs() < 1e-12);
    }
    for alpha in &out.attention {
        let a = tape.value(*alpha);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn gat_is_permutation_equivariant() {
    let cfg = ModelConfig::new(ModelKind::Gnn, 5);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, seed).unwrap();
        let adj = Adjacency::new(5, (0..25).map(|_| rng.gen_bool(0.4)).collect()).unwrap();
        let s = random(&mut rng, &[5, cfg.gnn_hidden], 1.0);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&k| s.row_slice(k).to_vec()).collect();
        let s_perm = Tensor::from_rows(&rows).unwrap();

        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let a = tape.constant(s);
        let b = tape.constant(s_perm);
        let out = gat_layer(&mut tape, &p, &cfg, "gat2", a, &adj).unwrap();
        let out_perm = gat_layer(&mut tape, &p, &cfg, "gat2", b, &adj.permuted(&perm)).unwrap();
        let (o, op) = (tape.value(out.out), tape.value(out_perm.out));
        for (k, &src) in perm.iter().enumerate() {
            for (x, y) in op.row_slice(k).iter().zip(o.row_slice(src)) {
                assert!((x - y).abs() <= 1e-9, "seed {seed}");
            }
        }
        for alpha in &out.attention {
            let a = tape.value(*alpha);
            for i in 0..5 {
                let sum: f64 = a.row_slice(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for j in 0..5 {
                    if !adj.mask()[i * 5 + j] {
                        assert_eq!(a.get(i, j), 0.0);
                    }
                }
            }
        }
    }
}

fn zero_out(params: &mut ParameterSet, names: &[&str]) {
    for name in names {
        let shape = params.get(name).unwrap().shape().to_vec();
        params.insert(*name, Tensor::zeros(&shape));
    }
}

fn gru_case(bias: f64, zero: &[&str]) -> (Tensor, Tensor) {
    let cfg = ModelConfig::new(ModelKind::Gnn, 4);
    let mut params = init_params(&cfg, 9).unwrap();
    let h = cfg.gnn_hidden;
    params.insert("gru.b_z", Tensor::full(&[1, h], bias));
    zero_out(&mut params, zero);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = random(&mut rng, &[4, h], 0.5);
    let m = random(&mut rng, &[4, h], 0.5);
    let d = random(&mut rng, &[1, 6], 1.0);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let (sv, mv, dv) = (tape.constant(s.clone()), tape.constant(m), tape.constant(d));
    let e = drug_encoder(&mut tape, &p, &cfg, dv).unwrap();
    let out = graph_gru_step(&mut tape, &p, &cfg, sv, mv, e).unwrap();
    (s, tape.value(out).clone())
}

#[test]
fn gru_closed_update_gate_keeps_state() {
    // z = σ(−10) with the gate inputs zeroed
    let (s, out) = gru_case(-10.0, &["gru.w_z", "gru.u_z"]);
    for (a, b) in s.data().iter().zip(out.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn gru_open_gate_with_zero_candidate_resets_state() {
    let (_, out) = gru_case(10.0, &["gru.w_h", "gru.u_h", "gru.b_h"]);
    assert!(out.data().iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn drug_encoder_shape_and_zero_params() {
    let cfg = ModelConfig::new(ModelKind::Gnn, 10);
    let mut tape = Tape::new();
    let params = init_params(&cfg, 1).unwrap();
    let p = params.bind(&mut tape, false);
    let d = tape.constant(Tensor::row(&[0.1, -0.3, 1.2, 0.0, 0.5, 1.0]));
    let e = drug_encoder(&mut tape, &p, &cfg, d).unwrap();
    assert_eq!(tape.shape(e), &[1, 16]);
    let z = zeros(&cfg);
    let pz = z.bind(&mut tape, false);
    let e = drug_encoder(&mut tape, &pz, &cfg, d).unwrap();
    assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn temporal_attention_single_step_and_uniform_weights() {
    let cfg = ModelConfig::new(ModelKind::Gnn, 10);
    let h = cfg.gnn_hidden;
    let mut params = init_params(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let one = random(&mut rng, &[1, h], 1.0);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(one.clone());
    let (out, weights) = temporal_attention(&mut tape, &p, &cfg, x, true).unwrap();
    assert!(weights.iter().all(|w| tape.value(*w).data() == [1.0]));
    let v = matmul(&one, params.get("temporal.w_v").unwrap()).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(v.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    params.insert("temporal.w_q", Tensor::zeros(&[h, h]));
    params.insert("temporal.w_k", Tensor::zeros(&[h, h]));
    let hist = random(&mut rng, &[5, h], 1.0);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(hist.clone());
    let (out, weights) = temporal_attention(&mut tape, &p, &cfg, x, false).unwrap();
    for w in &weights {
        assert!(tape.value(*w).data().iter().all(|&a| (a - 0.2).abs() < 1e-15));
    }
    let v = matmul(&hist, params.get("temporal.w_v").unwrap()).unwrap();
    let last = tape.value(out).row_slice(4);
    for c in 0..h {
        let mean = (0..5).map(|r| v.get(r, c)).sum::<f64>() / 5.0;
        assert!((last[c] - mean).abs() < 1e-12);
    }
}

#[test]
fn zero_readout_is_persistence() {
    let cfg = ModelConfig::new(ModelKind::Gnn, 10);
    let mut params = init_params(&cfg, 4).unwrap();
    let names: Vec<String> = params.names().filter(|n| n.starts_with("readout.")).cloned().collect();
    for n in names {
        let shape = params.get(&n).unwrap().shape().to_vec();
        params.insert(n, Tensor::zeros(&shape));
    }
    let adj = Adjacency::from_graph(&OrganGraph::default());
    for seq in sequences(10) {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let mut ctx = ForwardCtx {
            config: &cfg,
            adjacency: &adj,
            dropout_rng: None,
        };
        let pred = predict_sequence(&mut tape, &p, &mut ctx, &seq).unwrap();
        let pred = tape.value(pred);
        for t in 1..seq.n_times {
            assert_eq!(pred.row_slice(t - 1), seq.row(t - 1));
        }
    }
}

#[test]
fn sequence_rows_equal_single_pair_forwards() {
    let adj = Adjacency::from_graph(&OrganGraph::default());
    for kind in [ModelKind::Mlp, ModelKind::Lstm, ModelKind::Gnn] {
        let cfg = ModelConfig::new(kind, 10);
        let params = init_params(&cfg, 8).unwrap();
        for seq in sequences(10) {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let mut ctx = ForwardCtx {
                config: &cfg,
                adjacency: &adj,
                dropout_rng: None,
            };
            let all = predict_sequence(&mut tape, &p, &mut ctx, &seq).unwrap();
            let all = tape.value(all).clone();
            for t in 1..seq.n_times {
                let single = match kind {
                    ModelKind::Mlp => {
                        let row = mlp_input_row(
                            &seq.descriptor,
                            seq.history(t),
                            10,
                            cfg.mlp_window,
                            t as f64 / (seq.n_times - 1) as f64,
                        );
                        let x = tape.constant(Tensor::row(&row));
                        mlp_forward(&mut tape, &p, &cfg, x, None).unwrap()
                    }
                    ModelKind::Lstm => {
                        let x = tape.constant(lstm_inputs(&seq, t).unwrap());
                        lstm_forward(&mut tape, &p, &cfg, x).unwrap()
                    }
                    ModelKind::Gnn => {
                        dyngnn_forward(&mut tape, &p, &cfg, seq.history(t), 10, &seq.descriptor, &adj).unwrap()
                    }
                };
                for (a, b) in tape.value(single).data().iter().zip(all.row_slice(t - 1)) {
                    assert!((a - b).abs() < 1e-12, "{kind} t {t}: {a} vs {b}");
                }
            }
        }
    }
}

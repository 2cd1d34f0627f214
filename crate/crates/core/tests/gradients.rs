//! Central finite-difference checks of every differentiable op and of each
//! architecture.

use pbpk_core::models::{
    drug_encoder, dyngnn_forward, gat_layer, graph_gru_step, init_params, lstm_forward, mlp_forward,
    temporal_attention, Adjacency, BoundParams, ModelConfig, ModelKind, ParameterSet,
};
use pbpk_core::gradcheck::check_gradients;
use pbpk_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const OP_SEEDS: std::ops::RangeInclusive<u64> = 1..=20;

fn max_rel_error<F>(params: &ParameterSet, f: F) -> f64
where
    F: Fn(&mut Tape, &BoundParams) -> Var,
{
    check_gradients(params, STEP, f).max_rel_error
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values at least 0.05 away from zero, for ops with a kink there.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn set(tensors: Vec<Tensor>) -> ParameterSet {
    let mut p = ParameterSet::new(0);
    for (i, t) in tensors.into_iter().enumerate() {
        p.insert(format!("x{i}"), t);
    }
    p
}

fn x(p: &BoundParams, i: usize) -> Var {
    p.get(&format!("x{i}")).unwrap()
}

fn assert_op<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &BoundParams) -> Var + Copy,
{
    for seed in OP_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = set(make(&mut rng));
        let err = max_rel_error(&params, f);
        assert!(err <= TOL, "{name} seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn matmul_grad() {
    assert_op(
        "matmul",
        |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)],
        |t, p| t.matmul(x(p, 0), x(p, 1)).unwrap(),
    );
}

#[test]
fn elementwise_binary_grads() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], 0.5, 2.0)];
    assert_op("add", make, |t, p| t.add(x(p, 0), x(p, 1)).unwrap());
    assert_op("sub", make, |t, p| t.sub(x(p, 0), x(p, 1)).unwrap());
    assert_op("mul", make, |t, p| t.mul(x(p, 0), x(p, 1)).unwrap());
    assert_op("div", make, |t, p| t.div(x(p, 0), x(p, 1)).unwrap());
}

#[test]
fn broadcast_row_grads() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[1, 4], 0.5, 2.0)];
    assert_op("add row", make, |t, p| t.add(x(p, 0), x(p, 1)).unwrap());
    assert_op("sub row", make, |t, p| t.sub(x(p, 0), x(p, 1)).unwrap());
    assert_op("mul row", make, |t, p| t.mul(x(p, 0), x(p, 1)).unwrap());
    assert_op("div row", make, |t, p| t.div(x(p, 0), x(p, 1)).unwrap());
}

#[test]
fn unary_grads() {
    let smooth = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4], -2.0, 2.0)];
    let kinked = |r: &mut ChaCha8Rng| vec![off_kink(r, &[3, 4])];
    let positive = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4], 0.2, 3.0)];
    assert_op("neg", smooth, |t, p| t.neg(x(p, 0)));
    assert_op("exp", smooth, |t, p| t.exp(x(p, 0)));
    assert_op("log", positive, |t, p| t.log(x(p, 0)));
    assert_op("tanh", smooth, |t, p| t.tanh(x(p, 0)));
    assert_op("sigmoid", smooth, |t, p| t.sigmoid(x(p, 0)));
    assert_op("gelu", smooth, |t, p| t.gelu(x(p, 0)));
    assert_op("relu", kinked, |t, p| t.relu(x(p, 0)));
    assert_op("leaky_relu", kinked, |t, p| t.leaky_relu(x(p, 0), 0.2));
    assert_op("scale", smooth, |t, p| t.scale(x(p, 0), -1.7));
}

#[test]
fn softmax_grads() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, &[4, 5], -2.0, 2.0)];
    assert_op("softmax rows", make, |t, p| t.softmax(x(p, 0), 1).unwrap());
    assert_op("softmax cols", make, |t, p| t.softmax(x(p, 0), 0).unwrap());
    assert_op("masked_softmax", make, |t, p| {
        let mask: Vec<bool> = (0..20).map(|i| i % 5 <= i / 5 || i % 3 == 0).collect();
        t.masked_softmax(x(p, 0), Some(&mask)).unwrap()
    });
}

#[test]
fn layer_norm_grad() {
    assert_op(
        "layer_norm",
        |r| {
            vec![
                random(r, &[3, 6], -2.0, 2.0),
                random(r, &[1, 6], 0.5, 1.5),
                random(r, &[1, 6], -0.5, 0.5),
            ]
        },
        |t, p| t.layer_norm(x(p, 0), x(p, 1), x(p, 2), 1e-5).unwrap(),
    );
}

#[test]
fn dropout_grad_with_fixed_mask() {
    assert_op(
        "dropout",
        |r| vec![random(r, &[4, 6], -1.0, 1.0)],
        |t, p| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            t.dropout(x(p, 0), 0.3, &mut rng, true).unwrap()
        },
    );
}

#[test]
fn reduction_and_shape_grads() {
    let make = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 2], -1.0, 1.0)];
    assert_op("sum", make, |t, p| t.sum(x(p, 0)));
    assert_op("mean", make, |t, p| t.mean(x(p, 0)));
    assert_op("mean_rows", make, |t, p| t.mean_rows(x(p, 0)));
    assert_op("transpose", make, |t, p| t.transpose(x(p, 0)));
    assert_op("reshape", make, |t, p| t.reshape(x(p, 0), vec![2, 6]).unwrap());
    assert_op("concat_cols", make, |t, p| t.concat_cols(&[x(p, 0), x(p, 1)]).unwrap());
    assert_op("concat_rows", make, |t, p| {
        let b = t.transpose(x(p, 1));
        let b = t.slice_cols(b, 0, 3).unwrap();
        let b = t.reshape(b, vec![1, 6]).unwrap();
        let b = t.slice_cols(b, 0, 4).unwrap();
        t.concat_rows(&[x(p, 0), b]).unwrap()
    });
    assert_op("slice_cols", make, |t, p| t.slice_cols(x(p, 0), 1, 3).unwrap());
    assert_op("slice_rows", make, |t, p| t.slice_rows(x(p, 0), 1, 3).unwrap());
}

#[test]
fn loss_grads() {
    let make = |r: &mut ChaCha8Rng| {
        let pred = random(r, &[4, 3], -2.0, 2.0);
        // keep |pred − target| away from the SmoothL1 switch at 1
        let offsets = off_kink(r, &[4, 3]);
        let target: Vec<f64> = pred
            .data()
            .iter()
            .zip(offsets.data())
            .map(|(p, o)| p + if o.abs() > 0.95 && o.abs() < 1.05 { 1.2 * o.signum() } else { *o })
            .collect();
        vec![pred, Tensor::new(vec![4, 3], target).unwrap()]
    };
    assert_op("mse", make, |t, p| t.mse(x(p, 0), x(p, 1)).unwrap());
    assert_op("smooth_l1", make, |t, p| t.smooth_l1(x(p, 0), x(p, 1), 1.0).unwrap());
}

fn small_config(kind: ModelKind, n_organs: usize) -> ModelConfig {
    ModelConfig {
        mlp_width: 8,
        lstm_hidden: 6,
        gnn_hidden: 8,
        readout_hidden: 6,
        ..ModelConfig::new(kind, n_organs)
    }
}

fn random_adjacency(rng: &mut ChaCha8Rng, n: usize) -> Adjacency {
    Adjacency::new(n, (0..n * n).map(|_| rng.gen_bool(0.5)).collect()).unwrap()
}

/// Overwrites every parameter with non-degenerate random values so that
/// zero-initialized biases and LayerNorm gains are exercised too.
fn randomize(params: &mut ParameterSet, rng: &mut ChaCha8Rng) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
}

#[test]
fn mlp_architecture_grad() {
    for seed in SEEDS {
        let cfg = small_config(ModelKind::Mlp, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(&cfg, seed).unwrap();
        randomize(&mut params, &mut rng);
        let input = random(&mut rng, &[3, cfg.mlp_input_len()], -1.0, 1.0);
        let err = max_rel_error(&params, |t, p| {
            let inp = t.constant(input.clone());
            let mut drop = ChaCha8Rng::seed_from_u64(seed);
            mlp_forward(t, p, &cfg, inp, Some(&mut drop)).unwrap()
        });
        assert!(err <= TOL, "mlp seed {seed}: {err:e}");
    }
}

#[test]
fn lstm_architecture_grad_five_steps() {
    for seed in SEEDS {
        let cfg = small_config(ModelKind::Lstm, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(&cfg, seed).unwrap();
        randomize(&mut params, &mut rng);
        let input = random(&mut rng, &[5, 4 + 6], -1.0, 1.0);
        let err = max_rel_error(&params, |t, p| {
            let inp = t.constant(input.clone());
            lstm_forward(t, p, &cfg, inp).unwrap()
        });
        assert!(err <= TOL, "lstm seed {seed}: {err:e}");
    }
}

#[test]
fn dynamic_gnn_architecture_grad() {
    for seed in SEEDS {
        let cfg = small_config(ModelKind::Gnn, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(&cfg, seed).unwrap();
        randomize(&mut params, &mut rng);
        let adj = random_adjacency(&mut rng, 4);
        let history = random(&mut rng, &[3, 4], -1.0, 1.0).into_data();
        let descriptor = random(&mut rng, &[1, 6], -1.0, 1.0).into_data();
        let err = max_rel_error(&params, |t, p| {
            dyngnn_forward(t, p, &cfg, &history, 4, &descriptor, &adj).unwrap()
        });
        assert!(err <= TOL, "gnn seed {seed}: {err:e}");
    }
}

#[test]
fn gnn_component_grads() {
    for seed in SEEDS {
        let cfg = small_config(ModelKind::Gnn, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(&cfg, seed).unwrap();
        randomize(&mut params, &mut rng);
        let adj = random_adjacency(&mut rng, 5);
        let nodes = random(&mut rng, &[5, cfg.gnn_hidden + 1], -1.0, 1.0);
        let state = random(&mut rng, &[5, cfg.gnn_hidden], -1.0, 1.0);
        let history = random(&mut rng, &[4, cfg.gnn_hidden], -1.0, 1.0);
        let drug = random(&mut rng, &[1, 6], -1.0, 1.0);

        let gat = max_rel_error(&params, |t, p| {
            let n = t.constant(nodes.clone());
            gat_layer(t, p, &cfg, "gat1", n, &adj).unwrap().out
        });
        assert!(gat <= TOL, "gat seed {seed}: {gat:e}");

        let gru = max_rel_error(&params, |t, p| {
            let s = t.constant(state.clone());
            let m = t.constant(state.clone());
            let d = t.constant(drug.clone());
            let e = drug_encoder(t, p, &cfg, d).unwrap();
            graph_gru_step(t, p, &cfg, s, m, e).unwrap()
        });
        assert!(gru <= TOL, "gru seed {seed}: {gru:e}");

        let attn = max_rel_error(&params, |t, p| {
            let h = t.constant(history.clone());
            temporal_attention(t, p, &cfg, h, true).unwrap().0
        });
        assert!(attn <= TOL, "temporal attention seed {seed}: {attn:e}");
    }
}

#[test]
fn checker_refines_step_near_a_kink() {
    let p = set(vec![Tensor::new(vec![1, 3], vec![3e-6, -0.4, 0.7]).unwrap()]);
    let c = check_gradients(&p, STEP, |t, p| t.leaky_relu(x(p, 0), 0.2));
    assert!(c.max_rel_error <= TOL, "{c:?}");
    assert_eq!(c.n_refined, 1);
}

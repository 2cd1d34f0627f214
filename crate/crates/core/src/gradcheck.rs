//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::models::{BoundParams, ParameterSet};
use crate::tensor::{Tape, Tensor, Var};

/// Relative errors below this magnitude floor are measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub const REFINE_ABOVE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
    /// Coordinates that needed a smaller step to agree.
    pub n_refined: usize,
}

/// `Σ w ⊙ out` with fixed pseudo-random weights in (−1, 1).
pub fn weighted_sum(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(shape, w).expect("length matches shape"));
    let prod = tape.mul(out, w).expect("same shape");
    tape.sum(prod)
}

fn objective<F>(params: &ParameterSet, f: &F) -> f64
where
    F: Fn(&mut Tape, &BoundParams) -> Var,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = f(&mut tape, &bound);
    let loss = weighted_sum(&mut tape, out);
    tape.value(loss).data()[0]
}

/// Compares the reverse-mode gradient of `weighted_sum(f(params))` with
/// `(L(θ+h) − L(θ−h)) / 2h` for every coordinate of every parameter.
///
/// A coordinate within `step` of a ReLU-family kink makes the central
/// difference straddle it. Coordinates off by more than [`REFINE_ABOVE`]
/// are retried at `step/10` and `step/100`, keeping the best agreement.
///
/// Panics if the backward pass fails.
pub fn check_gradients<F>(params: &ParameterSet, step: f64, f: F) -> GradCheck
where
    F: Fn(&mut Tape, &BoundParams) -> Var,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let out = f(&mut tape, &bound);
    let loss = weighted_sum(&mut tape, out);
    tape.backward(loss).expect("backward");
    let grads = bound.grads(&tape);

    let mut probe = params.clone();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        n_checked: 0,
        n_refined: 0,
    };
    for (name, value) in params.iter() {
        for i in 0..value.len() {
            let x = value.data()[i];
            let analytic = grads.get(name).expect("same names").data()[i];
            let mut rel = f64::INFINITY;
            for (k, h) in [step, step / 10.0, step / 100.0].into_iter().enumerate() {
                probe.get_mut(name).expect("cloned").data_mut()[i] = x + h;
                let up = objective(&probe, &f);
                probe.get_mut(name).expect("cloned").data_mut()[i] = x - h;
                let down = objective(&probe, &f);
                probe.get_mut(name).expect("cloned").data_mut()[i] = x;
                let numeric = (up - down) / (2.0 * h);
                let r = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
                if r.is_nan() {
                    rel = r;
                    break;
                }
                rel = rel.min(r);
                if rel <= REFINE_ABOVE {
                    break;
                }
                if k == 0 {
                    result.n_refined += 1;
                }
            }
            result.n_checked += 1;
            if rel > result.max_rel_error || rel.is_nan() {
                result.max_rel_error = rel;
                result.worst = Some((name.clone(), i));
            }
        }
    }
    result
}

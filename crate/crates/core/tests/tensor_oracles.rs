use pbpk_core::tensor::{gelu, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Maclaurin series of erf, summed until terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0.0;
    loop {
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
        n += 1.0;
        term *= -x * x / n;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_one_matches_series_cdf() {
    let phi = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((gelu(1.0) - phi).abs() < 1e-12);
    assert!((gelu(1.0) - 0.841345).abs() < 1e-6);
}

#[test]
fn softmax_matches_direct_formula() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(&[1.0, 2.0, 3.0]));
    let s = tape.softmax(x, 1).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in tape.value(s).data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
    let shifted = tape.constant(Tensor::row(&[101.0, 102.0, 103.0]));
    let s2 = tape.softmax(shifted, 1).unwrap();
    for (a, b) in tape.value(s).data().iter().zip(tape.value(s2).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_centers_and_scales() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.5, 9.0]]).unwrap());
    let g = tape.constant(Tensor::ones(&[1, 3]));
    let b = tape.constant(Tensor::zeros(&[1, 3]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    for r in 0..2 {
        let row = tape.value(y).row_slice(r);
        let mean = row.iter().sum::<f64>() / 3.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn dropout_statistics() {
    let n = 100_000;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, n], 2.0));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y = tape.dropout(x, 0.5, &mut rng, true).unwrap();
    let out = tape.value(y).data();
    let kept = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    let mean = out.iter().sum::<f64>() / n as f64;
    assert!((kept - 0.5).abs() < 0.01, "kept {kept}");
    assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    assert!(out.iter().all(|&v| v == 0.0 || v == 4.0));
}

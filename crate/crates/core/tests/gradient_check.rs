//! BPTT gradients against central finite differences of an independently
//! evaluated loss (per-step reference forward pass, hand-written log-softmax).

use condsynth_core::codec::MuLawCode;
use condsynth_core::corpus::{ConditionedSequence, ParamPoint};
use condsynth_core::network::{backward, forward_step, run_batch, run_sequence, HiddenState, NetworkDims, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims() -> NetworkDims {
    NetworkDims {
        input_size: 4,
        hidden_size: 5,
        num_layers: 2,
        output_size: 256,
    }
}

fn sequence(len: usize, seed: u64) -> ConditionedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = (0..=len).map(|_| MuLawCode::new(rng.random())).collect();
    let p = ParamPoint::new(rng.random(), rng.random(), rng.random()).unwrap();
    ConditionedSequence::new(codes, p).unwrap()
}

fn oracle_loss(w: &Weights<f64>, seq: &ConditionedSequence) -> f64 {
    let mut state = HiddenState::zeros(w.dims);
    let mut total = 0.0;
    for (x, target) in seq.inputs().iter().zip(seq.targets()) {
        let (logits, next) = forward_step(w, x, &state).unwrap();
        state = next;
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[target.index()];
    }
    total / seq.len() as f64
}

/// Relative error with a denominator floor. Central differences at
/// eps = 1e-5 on a loss of about 5.5 carry roughly 1e-10 of f64 roundoff,
/// so below 1e-5 the comparison becomes absolute (1e-9).
pub const REL_ERR_FLOOR: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_gradient_error(seed: u64) -> (f64, usize) {
    let mut w = Weights::<f64>::init(dims(), seed).unwrap();
    // non-zero biases so their gradients are exercised away from symmetry
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in w.tensors_mut() {
        for x in t.iter_mut() {
            if *x == 0.0 {
                *x = rng.random_range(-0.3..0.3);
            }
        }
    }
    let seq = sequence(8, seed);
    let (trace, _) = run_sequence(&w, &seq, &HiddenState::zeros(w.dims)).unwrap();
    let grads = backward(&w, &trace).unwrap();
    let analytic: Vec<f64> = grads.tensors().concat();

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut k = 0;
    let n_tensors = w.tensors().len();
    for ti in 0..n_tensors {
        let len = w.tensors()[ti].len();
        for i in 0..len {
            let orig = w.tensors()[ti][i];
            w.tensors_mut()[ti][i] = orig + eps;
            let up = oracle_loss(&w, &seq);
            w.tensors_mut()[ti][i] = orig - eps;
            let down = oracle_loss(&w, &seq);
            w.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[k], numeric));
            k += 1;
        }
    }
    (worst, k)
}

#[test]
fn every_parameter_matches_finite_differences() {
    for seed in [1, 2] {
        let (worst, count) = max_relative_gradient_error(seed);
        assert_eq!(count, Weights::<f64>::zeros(dims()).param_count());
        assert!(worst < 1e-4, "seed {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn batch_gradient_is_mean_of_sequence_gradients() {
    let w = Weights::<f64>::init(dims(), 4).unwrap();
    let seqs: Vec<_> = (0..5).map(|s| sequence(12, 50 + s)).collect();
    let (trace, _) = run_batch(&w, &seqs, None).unwrap();
    let batch: Vec<f64> = backward(&w, &trace).unwrap().tensors().concat();
    let mut mean = vec![0.0; batch.len()];
    for s in &seqs {
        let (t, _) = run_sequence(&w, s, &HiddenState::zeros(w.dims)).unwrap();
        for (m, g) in mean.iter_mut().zip(backward(&w, &t).unwrap().tensors().concat()) {
            *m += g / seqs.len() as f64;
        }
    }
    for (a, b) in batch.iter().zip(&mean) {
        assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-12), "{a} vs {b}");
    }
}

#[test]
fn unused_output_rows_follow_softmax_mass() {
    // Strongly negative bias on a code that never occurs: its gradient is
    // just its (tiny) mean softmax probability.
    let mut w = Weights::<f64>::init(dims(), 8).unwrap();
    w.b_out[200] = -40.0;
    let codes = (0..=8).map(|i| MuLawCode::new(10 + i as u8)).collect();
    let seq = ConditionedSequence::new(codes, ParamPoint::new(0.5, 0.5, 0.0).unwrap()).unwrap();
    let (trace, _) = run_sequence(&w, &seq, &HiddenState::zeros(w.dims)).unwrap();
    let g = backward(&w, &trace).unwrap();
    assert!(g.b_out[200] > 0.0 && g.b_out[200] < 1e-15);
    assert!(g.w_out.row(200).iter().all(|x| x.abs() < 1e-15));
}

//! A single hand-set GRU cell against values computed independently at
//! 50-digit precision.
#![allow(clippy::excessive_precision)]

use condsynth_core::network::{forward_step, HiddenState, NetworkDims, Weights};
use ndarray::{arr1, arr2, Array2};

const H_NEXT: f64 = 0.239_605_700_259_897_486_124_138_6;
/// `(k, logit_k)` for `w_out[k] = (k - 128) / 128`, `b_out[k] = k / 1000`.
const LOGITS: [(usize, f64); 4] = [
    (0, -0.239_605_700_259_897_486_124_138_6),
    (77, -0.018_467_896_197_302_904_627_586_48),
    (128, 0.128),
    (255, 0.492_733_780_726_617_037_013_793_8),
];

/// Largest absolute error over the new hidden value and the sampled logits.
pub fn single_cell_max_error() -> f64 {
    let dims = NetworkDims {
        input_size: 4,
        hidden_size: 1,
        num_layers: 1,
        output_size: 256,
    };
    let mut w = Weights::<f64>::zeros(dims);
    w.w_in = arr2(&[[0.1, -0.2, 0.3, 0.4]]);
    w.b_in = arr1(&[0.05]);
    // gate rows stacked z, r, candidate
    w.layers[0].w = arr2(&[[0.6], [-0.4], [0.9]]);
    w.layers[0].u = arr2(&[[0.3], [0.7], [-0.5]]);
    w.layers[0].b = arr1(&[0.1, -0.2, 0.05]);
    w.w_out = Array2::from_shape_fn((256, 1), |(k, _)| (k as f64 - 128.0) / 128.0);
    w.b_out = (0..256).map(|k| k as f64 * 0.001).collect();
    let state = HiddenState {
        h: arr2(&[[0.2]]),
    };
    let (logits, next) = forward_step(&w, &[0.5, 0.25, -0.5, 1.0], &state).unwrap();
    let mut worst = (next.h[[0, 0]] - H_NEXT).abs();
    for (k, v) in LOGITS {
        worst = worst.max((logits[k] - v).abs());
    }
    worst
}

#[test]
fn hand_set_cell_matches_reference() {
    let err = single_cell_max_error();
    assert!(err < 1e-12, "{err:e}");
}

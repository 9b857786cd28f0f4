//! Shared oracle helpers for the integration suites: central finite
//! differences and a family of small random model instances.

// Each suite uses its own subset of the helpers.
#![allow(dead_code)]

use metafew::backbone::{BackboneConfig, InputKind, LabeledBatch, Precision};
use metafew::rngutil::{hash_str, stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central finite difference of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Passes when |a - b| <= max(floor, tol * max(|a|, |b|)).
pub fn close(a: f64, b: f64, tol: f64, floor: f64) -> bool {
    (a - b).abs() <= floor.max(tol * a.abs().max(b.abs()))
}

pub fn assert_grad_close(got: &[f64], want: &[f64], tol: f64, floor: f64, context: &str) {
    assert_eq!(got.len(), want.len(), "{context}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            close(*g, *w, tol, floor),
            "{context}: coordinate {i}: got {g}, finite difference {w}"
        );
    }
}

/// Small architectures (all under 200 parameters, float64) spanning the
/// logistic head, deep MLPs, and both conv depths, with and without
/// batchnorm.
pub fn small_configs() -> Vec<BackboneConfig> {
    let mut configs = Vec::new();
    let vector_cases: &[(usize, &[usize])] = &[
        (1, &[]),
        (3, &[]),
        (4, &[3]),
        (2, &[4, 3]),
        (5, &[2, 2]),
        (6, &[4]),
        (3, &[5]),
        (7, &[]),
    ];
    for &(dim, hidden) in vector_cases {
        for bn in [false, true] {
            // Batchnorm on a zero-hidden-layer head is a no-op config.
            if bn && hidden.is_empty() {
                continue;
            }
            let mut cfg = BackboneConfig::vector(dim);
            cfg.conv_channels = hidden.to_vec();
            cfg.use_batchnorm = bn;
            cfg.precision = Precision::F64;
            configs.push(cfg);
        }
    }
    let image_cases: &[(usize, usize, usize, &[usize])] = &[
        (4, 4, 1, &[2]),
        (5, 4, 1, &[2, 3]),
        (6, 5, 2, &[2]),
        (4, 5, 2, &[2, 2]),
    ];
    for &(h, w, c, channels) in image_cases {
        for bn in [false, true] {
            let mut cfg = BackboneConfig::image(h, w, c);
            cfg.conv_channels = channels.to_vec();
            cfg.kernel_size = 3;
            cfg.pool_size = 2;
            cfg.use_batchnorm = bn;
            cfg.precision = Precision::F64;
            configs.push(cfg);
        }
    }
    configs
}

/// Balanced-ish random batch with at least one example of each class.
pub fn random_batch(kind: InputKind, n: usize, seed: u64) -> LabeledBatch {
    let mut rng: ChaCha8Rng = stream(seed, &[hash_str("test.batch")]);
    let len = kind.len();
    let mut inputs = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        for _ in 0..len {
            inputs.push(rng.gen_range(-1.5..1.5));
        }
        labels.push(if i < 2 { i as u8 } else { u8::from(rng.gen_bool(0.5)) });
    }
    LabeledBatch::from_flat(inputs, len, labels).unwrap()
}

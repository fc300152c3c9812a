//! Shared helpers for the integration suites: dataset discovery, synthetic
//! samples, and straight-line 64-bit oracles that do not touch the crate's
//! numeric kernels.

#![allow(dead_code)]

use std::path::PathBuf;

use specbp::mnist_io::{self, Dataset};
use specbp::network::NetworkParams;
use specbp::{ImageSample, Prng};

/// `$MNIST_DIR`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn load_mnist() -> Dataset {
    let dir = mnist_dir();
    mnist_io::load_mnist_dir(&dir).unwrap_or_else(|e| {
        panic!(
            "MNIST not available at {} ({e}); run scripts/fetch_mnist.sh or set MNIST_DIR",
            dir.display()
        )
    })
}

/// Random 784-pixel samples with labels cycling through `labels`.
pub fn synthetic(n: usize, seed: u64, labels: &[u8]) -> Vec<ImageSample> {
    let mut rng = Prng::new(seed);
    (0..n)
        .map(|i| ImageSample {
            pixels: (0..784).map(|_| rng.next_f64() as f32).collect(),
            label: labels[i % labels.len()],
        })
        .collect()
}

/// Plain-loop forward pass in f64 returning the softmax output.
pub fn oracle_probs(params: &NetworkParams<f64>, x: &[f64]) -> Vec<f64> {
    fn layer(w: &specbp::Matrix<f64>, b: &[f64], input: &[f64], leaky: bool) -> Vec<f64> {
        b.iter()
            .enumerate()
            .map(|(r, &bias)| {
                let s = input.iter().enumerate().fold(bias, |s, (c, &v)| s + w.get(r, c) * v);
                if leaky && s <= 0.0 {
                    0.01 * s
                } else {
                    s
                }
            })
            .collect()
    }
    let h1 = layer(&params.w1, &params.b1, x, true);
    let h2 = layer(&params.w2, &params.b2, &h1, true);
    let logits = layer(&params.w3, &params.b3, &h2, false);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn oracle_loss(params: &NetworkParams<f64>, x: &[f64], label: usize) -> f64 {
    -oracle_probs(params, x)[label].ln()
}

/// Central finite differences of [`oracle_loss`] for every parameter, in
/// canonical order (W1, b1, W2, b2, W3, b3).
pub fn finite_difference_gradient(params: &NetworkParams<f64>, x: &[f64], label: usize, h: f64) -> Vec<f64> {
    let mut probe = params.clone();
    let sizes: Vec<usize> = params.parts().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (part, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.parts()[part][i];
            probe.parts_mut()[part][i] = orig + h;
            let up = oracle_loss(&probe, x, label);
            probe.parts_mut()[part][i] = orig - h;
            let down = oracle_loss(&probe, x, label);
            probe.parts_mut()[part][i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// Widen an f32 parameter set to f64, element by element.
pub fn widen(p: &NetworkParams<f32>) -> NetworkParams<f64> {
    let mut wide = NetworkParams::<f64>::zeros(p.layout());
    for (dst, src) in wide.parts_mut().into_iter().zip(p.parts()) {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s as f64;
        }
    }
    wide
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub parameters: usize,
}

pub const GRADCHECK_SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

/// Backward (f64) vs. central differences on a 20-8-8-10 net with random
/// weights, input, and label per seed.
pub fn gradient_check(seeds: &[u64]) -> GradCheck {
    use specbp::network::{backward, forward, init_params, Layout};
    let layout = Layout {
        input: 20,
        hidden1: 8,
        hidden2: 8,
        output: 10,
    };
    let mut worst = 0.0f64;
    let mut parameters = 0;
    for &seed in seeds {
        let mut params: NetworkParams<f64> = init_params(layout, seed);
        let mut rng = Prng::new(seed ^ 0xABCD);
        // nonzero biases exercise the bias paths
        for b in [&mut params.b1, &mut params.b2, &mut params.b3] {
            for v in b.iter_mut() {
                *v = rng.uniform_symmetric(0.5);
            }
        }
        let x: Vec<f64> = (0..layout.input).map(|_| rng.next_f64()).collect();
        let label = rng.next_below(10) as usize;

        let analytic: Vec<f64> = backward(&params, &forward(&params, &x).unwrap(), label)
            .unwrap()
            .iter()
            .collect();
        let numeric = finite_difference_gradient(&params, &x, label, 1e-4);
        assert_eq!(analytic.len(), numeric.len());
        parameters += analytic.len();
        for (a, n) in analytic.iter().zip(&numeric) {
            let scale = a.abs().max(n.abs());
            let rel = if scale == 0.0 { 0.0 } else { (a - n).abs() / scale };
            worst = worst.max(rel);
        }
    }
    GradCheck {
        max_rel_error: worst,
        parameters,
    }
}

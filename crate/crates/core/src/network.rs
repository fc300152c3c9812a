//! The three-layer perceptron: forward pass, backpropagation under softmax
//! cross-entropy, clipping, accumulation, and the batched weight update.
//!
//! Everything is generic over [`Real`] so the gradient check can run the
//! exact same code in `f64`.

use crate::error::{Error, Result};
use crate::math::{self, leaky_relu, leaky_relu_deriv, Matrix, Prng, Real};
use crate::mnist_io::ImageSample;

/// Layer widths: input, two hidden layers, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output: usize,
}

impl Layout {
    pub const MNIST: Layout = Layout {
        input: 784,
        hidden1: 16,
        hidden2: 16,
        output: 10,
    };

    pub fn parameter_count(&self) -> usize {
        self.hidden1 * (self.input + 1) + self.hidden2 * (self.hidden1 + 1) + self.output * (self.hidden2 + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    pub w3: Matrix<T>,
    pub b3: Vec<T>,
}

/// Per-parameter gradients, shape-congruent with [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T = f32> {
    pub dw1: Matrix<T>,
    pub db1: Vec<T>,
    pub dw2: Matrix<T>,
    pub db2: Vec<T>,
    pub dw3: Matrix<T>,
    pub db3: Vec<T>,
}

macro_rules! tensor_views {
    ($ty:ident, $w1:ident, $b1:ident, $w2:ident, $b2:ident, $w3:ident, $b3:ident) => {
        impl<T: Real> $ty<T> {
            pub fn zeros(layout: Layout) -> Self {
                Self {
                    $w1: Matrix::zeros(layout.hidden1, layout.input),
                    $b1: vec![T::zero(); layout.hidden1],
                    $w2: Matrix::zeros(layout.hidden2, layout.hidden1),
                    $b2: vec![T::zero(); layout.hidden2],
                    $w3: Matrix::zeros(layout.output, layout.hidden2),
                    $b3: vec![T::zero(); layout.output],
                }
            }

            pub fn layout(&self) -> Layout {
                Layout {
                    input: self.$w1.cols(),
                    hidden1: self.$w1.rows(),
                    hidden2: self.$w2.rows(),
                    output: self.$w3.rows(),
                }
            }

            /// The six tensors in canonical order (W1, b1, W2, b2, W3, b3).
            pub fn parts(&self) -> [&[T]; 6] {
                [
                    self.$w1.as_slice(),
                    &self.$b1,
                    self.$w2.as_slice(),
                    &self.$b2,
                    self.$w3.as_slice(),
                    &self.$b3,
                ]
            }

            pub fn parts_mut(&mut self) -> [&mut [T]; 6] {
                [
                    self.$w1.as_mut_slice(),
                    &mut self.$b1,
                    self.$w2.as_mut_slice(),
                    &mut self.$b2,
                    self.$w3.as_mut_slice(),
                    &mut self.$b3,
                ]
            }

            pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
                self.parts().into_iter().flat_map(|p| p.iter().copied())
            }

            pub fn len(&self) -> usize {
                self.parts().iter().map(|p| p.len()).sum()
            }

            pub fn is_empty(&self) -> bool {
                self.len() == 0
            }

            pub fn congruent_with(&self, layout: Layout) -> bool {
                self.layout() == layout
                    && self.$b1.len() == layout.hidden1
                    && self.$b2.len() == layout.hidden2
                    && self.$b3.len() == layout.output
            }

            pub fn fill_zero(&mut self) {
                for p in self.parts_mut() {
                    p.fill(T::zero());
                }
            }
        }
    };
}

tensor_views!(NetworkParams, w1, b1, w2, b2, w3, b3);
tensor_views!(GradientSet, dw1, db1, dw2, db2, dw3, db3);

impl<T: Real> NetworkParams<T> {
    /// Order-stable FNV-1a checksum over the bit patterns of every parameter.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.iter() {
            for byte in v.to_f64().to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Uniform He-style initialization: each weight is drawn from
/// `[-sqrt(6 / fan_in), sqrt(6 / fan_in))`, consuming the generator in the
/// order W1 (row-major), W2, W3. Biases start at zero and draw nothing.
pub fn init_params<T: Real>(layout: Layout, seed: u64) -> NetworkParams<T> {
    let mut rng = Prng::new(seed);
    let mut params = NetworkParams::zeros(layout);
    for w in [&mut params.w1, &mut params.w2, &mut params.w3] {
        let bound = (6.0 / w.cols() as f64).sqrt();
        for v in w.as_mut_slice() {
            *v = T::from_f64(rng.uniform_symmetric(bound));
        }
    }
    params
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T = f32> {
    pub x: Vec<T>,
    pub z1: Vec<T>,
    pub a1: Vec<T>,
    pub z2: Vec<T>,
    pub a2: Vec<T>,
    pub z3: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            x: vec![T::zero(); layout.input],
            z1: vec![T::zero(); layout.hidden1],
            a1: vec![T::zero(); layout.hidden1],
            z2: vec![T::zero(); layout.hidden2],
            a2: vec![T::zero(); layout.hidden2],
            z3: vec![T::zero(); layout.output],
            probs: vec![T::zero(); layout.output],
        }
    }

    pub fn predicted(&self) -> usize {
        math::argmax(&self.probs)
    }
}

pub fn forward_into<T: Real>(params: &NetworkParams<T>, x: &[T], trace: &mut ForwardTrace<T>) -> Result<()> {
    let layout = params.layout();
    if x.len() != layout.input {
        return Err(Error::shape(format!(
            "input has {} features, network expects {}",
            x.len(),
            layout.input
        )));
    }
    if trace.z1.len() != layout.hidden1 || trace.z2.len() != layout.hidden2 || trace.z3.len() != layout.output {
        *trace = ForwardTrace::zeros(layout);
    }
    trace.x.clear();
    trace.x.extend_from_slice(x);

    math::affine_into(&params.w1, x, &params.b1, &mut trace.z1)?;
    for (a, &z) in trace.a1.iter_mut().zip(&trace.z1) {
        *a = leaky_relu(z);
    }
    math::affine_into(&params.w2, &trace.a1, &params.b2, &mut trace.z2)?;
    for (a, &z) in trace.a2.iter_mut().zip(&trace.z2) {
        *a = leaky_relu(z);
    }
    math::affine_into(&params.w3, &trace.a2, &params.b3, &mut trace.z3)?;
    math::softmax_into(&trace.z3, &mut trace.probs);
    Ok(())
}

pub fn forward<T: Real>(params: &NetworkParams<T>, x: &[T]) -> Result<ForwardTrace<T>> {
    let mut trace = ForwardTrace::zeros(params.layout());
    forward_into(params, x, &mut trace)?;
    Ok(trace)
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::Domain {
            label: label as u32,
            classes,
        });
    }
    Ok(())
}

/// `delta_in[c] = (sum_r W[r][c] * delta_out[r]) * leaky_relu'(z[c])`
fn backprop_delta<T: Real>(w: &Matrix<T>, delta_out: &[T], z: &[T]) -> Vec<T> {
    let mut delta_in = vec![T::zero(); w.cols()];
    for (r, &d) in delta_out.iter().enumerate() {
        for (acc, &wv) in delta_in.iter_mut().zip(w.row(r)) {
            *acc = *acc + wv * d;
        }
    }
    for (d, &zv) in delta_in.iter_mut().zip(z) {
        *d = *d * leaky_relu_deriv(zv);
    }
    delta_in
}

fn outer_into<T: Real>(delta: &[T], input: &[T], out: &mut Matrix<T>) {
    for (r, &d) in delta.iter().enumerate() {
        for (o, &v) in out.row_mut(r).iter_mut().zip(input) {
            *o = d * v;
        }
    }
}

/// Cross-entropy gradients of one sample, written into `grads` (unclipped).
pub fn backward_into<T: Real>(
    params: &NetworkParams<T>,
    trace: &ForwardTrace<T>,
    label: usize,
    grads: &mut GradientSet<T>,
) -> Result<()> {
    let layout = params.layout();
    check_label(label, layout.output)?;
    if !grads.congruent_with(layout) {
        *grads = GradientSet::zeros(layout);
    }

    let mut delta3 = trace.probs.clone();
    delta3[label] = delta3[label] - T::one();
    outer_into(&delta3, &trace.a2, &mut grads.dw3);
    grads.db3.copy_from_slice(&delta3);

    let delta2 = backprop_delta(&params.w3, &delta3, &trace.z2);
    outer_into(&delta2, &trace.a1, &mut grads.dw2);
    grads.db2.copy_from_slice(&delta2);

    let delta1 = backprop_delta(&params.w2, &delta2, &trace.z1);
    outer_into(&delta1, &trace.x, &mut grads.dw1);
    grads.db1.copy_from_slice(&delta1);
    Ok(())
}

pub fn backward<T: Real>(params: &NetworkParams<T>, trace: &ForwardTrace<T>, label: usize) -> Result<GradientSet<T>> {
    let mut grads = GradientSet::zeros(params.layout());
    backward_into(params, trace, label, &mut grads)?;
    Ok(grads)
}

impl<T: Real> GradientSet<T> {
    /// Clamps every component into `[-bound, bound]` in place.
    pub fn clip(&mut self, bound: T) {
        let lo = -bound;
        for p in self.parts_mut() {
            for v in p.iter_mut() {
                *v = v.max(lo).min(bound);
            }
        }
    }

    pub fn clipped(mut self, bound: T) -> Self {
        self.clip(bound);
        self
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &GradientSet<T>) {
        debug_assert_eq!(self.layout(), other.layout());
        for (dst, src) in self.parts_mut().into_iter().zip(other.parts()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// `param -= learning_rate * acc / n_samples` for every weight and bias.
pub fn apply_update<T: Real>(
    params: &mut NetworkParams<T>,
    acc: &GradientSet<T>,
    learning_rate: T,
    n_samples: usize,
) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::usage("apply_update called with zero accumulated samples"));
    }
    if params.layout() != acc.layout() {
        return Err(Error::shape("gradient set does not match parameter shapes"));
    }
    let scale = learning_rate / T::from_f64(n_samples as f64);
    for (dst, src) in params.parts_mut().into_iter().zip(acc.parts()) {
        for (p, &g) in dst.iter_mut().zip(src) {
            *p = *p - scale * g;
        }
    }
    Ok(())
}

/// `-ln(probs[label])` with the probability floored at 1e-12.
pub fn loss<T: Real>(probs: &[T], label: usize) -> T {
    let p = probs[label].max(T::from_f64(1e-12));
    -p.ln()
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(params: &NetworkParams<f32>, samples: &[ImageSample]) -> Result<f64> {
    evaluate_with(params, samples, |_| {})
}

/// [`evaluate`], handing every trace to `inspect` before it is scored.
pub fn evaluate_with(
    params: &NetworkParams<f32>,
    samples: &[ImageSample],
    mut inspect: impl FnMut(&ForwardTrace<f32>),
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty set"));
    }
    let mut trace = ForwardTrace::zeros(params.layout());
    let mut correct = 0usize;
    for s in samples {
        forward_into(params, &s.pixels, &mut trace)?;
        inspect(&trace);
        if trace.predicted() == s.label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: Layout = Layout {
        input: 20,
        hidden1: 8,
        hidden2: 8,
        output: 10,
    };

    fn random_input(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = Prng::new(seed);
        (0..n).map(|_| rng.next_f64() as f32).collect()
    }

    #[test]
    fn mnist_layout_counts() {
        assert_eq!(Layout::MNIST.parameter_count(), 13_002);
        let p: NetworkParams = NetworkParams::zeros(Layout::MNIST);
        assert_eq!(p.len(), 13_002);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a: NetworkParams = init_params(Layout::MNIST, 42);
        let b: NetworkParams = init_params(Layout::MNIST, 42);
        let c: NetworkParams = init_params(Layout::MNIST, 43);
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a, c);
        assert_ne!(a.digest(), c.digest());

        let bound = (6.0f64 / 784.0).sqrt() as f32;
        assert!(a.w1.as_slice().iter().all(|w| w.abs() <= bound));
        assert!(a.b1.iter().chain(&a.b2).chain(&a.b3).all(|&b| b == 0.0));
        let bound3 = (6.0f64 / 16.0).sqrt() as f32;
        assert!(a.w3.as_slice().iter().all(|w| w.abs() <= bound3));
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let p: NetworkParams = NetworkParams::zeros(Layout::MNIST);
        let t = forward(&p, &random_input(784, 1)).unwrap();
        for &q in &t.probs {
            assert!((q - 0.1).abs() < 1e-7);
        }
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let p: NetworkParams = NetworkParams::zeros(SMALL);
        assert!(matches!(forward(&p, &[0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn trace_invariants_on_random_draws() {
        for seed in 0..1000u64 {
            let p: NetworkParams = init_params(SMALL, seed);
            let t = forward(&p, &random_input(SMALL.input, seed + 7)).unwrap();
            let sum: f64 = t.probs.iter().map(|&q| q as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(t.probs.iter().all(|&q| q > 0.0));
            for (a, z) in t.a1.iter().zip(&t.z1).chain(t.a2.iter().zip(&t.z2)) {
                assert_eq!(*a, leaky_relu(*z));
            }
        }
    }

    #[test]
    fn output_bias_gradient_is_probs_minus_onehot() {
        let p: NetworkParams = init_params(SMALL, 3);
        let t = forward(&p, &random_input(SMALL.input, 4)).unwrap();
        let g = backward(&p, &t, 6).unwrap();
        for j in 0..10 {
            let expect = if j == 6 { t.probs[j] - 1.0 } else { t.probs[j] };
            assert_eq!(g.db3[j], expect);
        }
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_gradient() {
        let p: NetworkParams = init_params(SMALL, 9);
        let t = forward(&p, &[0.0; 20]).unwrap();
        let g = backward(&p, &t, 1).unwrap();
        assert!(g.dw1.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.db1.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_rejects_bad_label() {
        let p: NetworkParams = init_params(SMALL, 9);
        let t = forward(&p, &[0.0; 20]).unwrap();
        assert!(matches!(backward(&p, &t, 10), Err(Error::Domain { label: 10, .. })));
    }

    #[test]
    fn clip_examples() {
        let mut g: GradientSet = GradientSet::zeros(SMALL);
        g.db3[0] = 7.0;
        g.db3[1] = -9.0;
        g.db3[2] = 1.5;
        g.dw1.as_mut_slice()[3] = -4.99;
        let once = g.clone().clipped(5.0);
        assert_eq!(once.db3[0], 5.0);
        assert_eq!(once.db3[1], -5.0);
        assert_eq!(once.db3[2], 1.5);
        assert_eq!(once.dw1.as_slice()[3], -4.99);
        assert_eq!(once.clone().clipped(5.0), once);
        assert_eq!(once.max_abs(), 5.0);
    }

    #[test]
    fn accumulate_examples() {
        let p: NetworkParams = init_params(SMALL, 1);
        let ga = backward(&p, &forward(&p, &random_input(20, 2)).unwrap(), 3).unwrap();
        let gb = backward(&p, &forward(&p, &random_input(20, 3)).unwrap(), 8).unwrap();

        let mut acc = GradientSet::zeros(SMALL);
        acc.accumulate(&ga);
        assert_eq!(acc, ga);

        let mut ab = ga.clone();
        ab.accumulate(&gb);
        let mut ba = gb.clone();
        ba.accumulate(&ga);
        assert_eq!(ab, ba);

        let mut fifteen = GradientSet::zeros(SMALL);
        for _ in 0..15 {
            fifteen.accumulate(&ga);
        }
        for (s, g) in fifteen.iter().zip(ga.iter()) {
            let expect = 15.0 * g;
            assert!((s - expect).abs() <= 1e-6 * expect.abs().max(1e-30) + 1e-12);
        }
    }

    #[test]
    fn apply_update_examples() {
        let mut p: NetworkParams = NetworkParams::zeros(SMALL);
        p.w1.as_mut_slice()[0] = 1.0;
        let mut acc = GradientSet::zeros(SMALL);
        acc.dw1.as_mut_slice()[0] = 15.0;
        apply_update(&mut p, &acc, 0.01, 15).unwrap();
        assert!((p.w1.as_slice()[0] - 0.99).abs() < 1e-7);

        let before = p.clone();
        apply_update(&mut p, &GradientSet::zeros(SMALL), 0.01, 15).unwrap();
        assert_eq!(p, before);

        assert!(matches!(apply_update(&mut p, &acc, 0.01, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn split_update_matches_single_update_in_f64() {
        // lr*(a/n) + lr*(b/n) == lr*((a+b)/n) up to rounding; the algebra only
        // holds with the same n on both sides.
        let p0: NetworkParams<f64> = init_params(SMALL, 5);
        let t = forward(&p0, &[0.5; 20]).unwrap();
        let a = backward(&p0, &t, 1).unwrap();
        let b = backward(&p0, &t, 2).unwrap();
        let mut ab = a.clone();
        ab.accumulate(&b);

        let mut split = p0.clone();
        apply_update(&mut split, &a, 0.01, 15).unwrap();
        apply_update(&mut split, &b, 0.01, 15).unwrap();
        let mut joint = p0.clone();
        apply_update(&mut joint, &ab, 0.01, 15).unwrap();
        for (x, y) in split.iter().zip(joint.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_examples() {
        let mut probs = [0.0f64; 10];
        probs[4] = 1.0;
        assert_eq!(loss(&probs, 4), 0.0);
        assert!((loss(&[0.1f64; 10], 0) - 10f64.ln()).abs() < 1e-12);
        assert!(loss(&[0.2f64, 0.8], 0) > loss(&[0.3f64, 0.7], 0));
        assert!(loss(&probs, 0).is_finite());
    }

    fn samples_from(labels: &[u8]) -> Vec<ImageSample> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| ImageSample {
                pixels: random_input(784, i as u64),
                label,
            })
            .collect()
    }

    #[test]
    fn evaluate_zero_params_predicts_class_zero() {
        let p: NetworkParams = NetworkParams::zeros(Layout::MNIST);
        let set = samples_from(&[0, 1, 2, 0, 5]);
        assert!((evaluate(&p, &set).unwrap() - 0.4).abs() < 1e-12);
        let one = samples_from(&[3]);
        assert_eq!(evaluate(&p, &one).unwrap(), 0.0);
        assert!(evaluate(&p, &[]).is_err());
    }

    #[test]
    fn evaluate_permutation_invariant() {
        let p: NetworkParams = init_params(Layout::MNIST, 11);
        let mut set = samples_from(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 1, 1]);
        let a = evaluate(&p, &set).unwrap();
        math::shuffle(&mut set, &mut Prng::new(3));
        assert_eq!(evaluate(&p, &set).unwrap(), a);
    }
}

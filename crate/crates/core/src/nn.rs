//! Fully-connected equalizer network.
//!
//! Hidden layers use ReLU, the output layer softmax. Every hidden layer has the
//! same width, so an architecture is described by four numbers: input
//! dimension, hidden width, total layer count (input and output included) and
//! class count. Weights are stored row-major with shape `(out_dim, in_dim)`.
//!
//! Backpropagation is hand-written. Both passes accept a [`MultCounter`] that
//! is advanced by the number of floating-point multiplications the pass
//! performs, so the closed-form counts in [`Architecture::forward_mults`] and
//! [`Architecture::backward_mults`] can be checked against real executions.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape, usage, Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    #[serde(rename = "R")]
    pub hidden_width: usize,
    #[serde(rename = "l_NN")]
    pub num_layers: usize,
    #[serde(rename = "M")]
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden_width: usize,
        num_layers: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_width,
            num_layers,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.num_classes == 0 {
            return Err(usage(format!("architecture has a zero-sized layer: {self:?}")));
        }
        if self.num_layers < 3 {
            return Err(usage(format!(
                "need at least 3 layers (input, hidden, output), got {}",
                self.num_layers
            )));
        }
        Ok(())
    }

    /// `[input_dim, R, ..., R, M]`, `num_layers` entries.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.num_layers);
        sizes.push(self.input_dim);
        sizes.extend(std::iter::repeat(self.hidden_width).take(self.num_layers - 2));
        sizes.push(self.num_classes);
        sizes
    }

    /// Multiplications in one forward pass:
    /// `input_dim·R + (l_NN − 3)·R² + R·M`.
    pub fn forward_mults(&self) -> u64 {
        let r = self.hidden_width as u64;
        self.input_dim as u64 * r
            + (self.num_layers as u64 - 3) * r * r
            + r * self.num_classes as u64
    }

    /// Multiplications in one backward pass: `2·k_fwd + (l_NN − 2)·R + M`.
    pub fn backward_mults(&self) -> u64 {
        2 * self.forward_mults()
            + (self.num_layers as u64 - 2) * self.hidden_width as u64
            + self.num_classes as u64
    }

    /// Total trainable scalars.
    pub fn num_params(&self) -> usize {
        self.layer_sizes()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Running count of floating-point multiplications.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MultCounter(u64);

impl MultCounter {
    pub fn new() -> Self {
        Self(0)
    }

    pub fn count(&self) -> u64 {
        self.0
    }

    #[inline]
    fn add(&mut self, n: usize) {
        self.0 += n as u64;
    }
}

/// One dense layer, or a gradient / optimizer accumulator with the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols` entries.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Sum of absolute values of the weight entries.
    pub fn weight_abs_sum(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }
}

fn zero_layers(arch: &Architecture) -> Vec<Layer> {
    arch.layer_sizes()
        .windows(2)
        .map(|w| Layer::zeros(w[1], w[0]))
        .collect()
}

fn check_congruent(a: &[Layer], b: &[Layer], what: &str) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| !x.same_shape(y)) {
        return Err(shape(format!("{what}: layer shapes differ")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Architecture,
    layers: Vec<Layer>,
}

/// Parameter gradients, shape-congruent with the [`Mlp`] they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            layers: zero_layers(arch),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(|w| *w *= factor);
            layer.bias.iter_mut().for_each(|b| *b *= factor);
        }
    }

    /// `self += other`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        check_congruent(&self.layers, &other.layers, "gradient accumulation")?;
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.weights
                .iter_mut()
                .zip(&src.weights)
                .for_each(|(d, s)| *d += s);
            dst.bias.iter_mut().zip(&src.bias).for_each(|(d, s)| *d += s);
        }
        Ok(())
    }

    /// All entries, layer by layer, weights before biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// `h_0 .. h_{l-2}`: the input to each layer; `inputs[0]` is the feature vector.
    pub inputs: Vec<Vec<f64>>,
    /// `a_1 .. a_{l-1}`: pre-activations of each layer; the last entry holds the logits.
    pub pre_activations: Vec<Vec<f64>>,
    /// Softmax of the logits.
    pub output: Vec<f64>,
}

impl ForwardCache {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.output)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Numerically stable softmax (the maximum logit is subtracted first).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `−Σ y_j ln o_j` with `o_j` floored at [`LOG_FLOOR`].
pub fn cross_entropy(output: &[f64], target: &[f64]) -> f64 {
    -output
        .iter()
        .zip(target)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&o, &y)| y * o.max(LOG_FLOOR).ln())
        .sum::<f64>()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(class: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[class] = 1.0;
    v
}

impl Mlp {
    /// Build a network from explicit layers. Shapes must chain as the
    /// architecture dictates and every entry must be finite.
    pub fn from_layers(arch: Architecture, layers: Vec<Layer>) -> Result<Self> {
        arch.validate()?;
        check_congruent(&zero_layers(&arch), &layers, "layers do not match architecture")?;
        for layer in &layers {
            if layer.weights.len() != layer.rows * layer.cols || layer.bias.len() != layer.rows {
                return Err(shape("layer buffer length does not match its shape"));
            }
            if !layer.weights.iter().chain(&layer.bias).all(|x| x.is_finite()) {
                return Err(Error::Degenerate("non-finite parameter".into()));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            layers: zero_layers(&arch),
        })
    }

    /// He initialization: weights drawn from `N(0, 2 / fan_in)`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut mlp.layers {
            let std = (2.0 / layer.cols as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is finite and positive");
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = normal.sample(&mut rng));
        }
        Ok(mlp)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn check_gradients(&self, grads: &Gradients) -> Result<()> {
        check_congruent(&self.layers, &grads.layers, "gradients do not match network")
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardCache> {
        self.forward_counted(input, &mut MultCounter::new())
    }

    pub fn forward_counted(&self, input: &[f64], counter: &mut MultCounter) -> Result<ForwardCache> {
        if input.len() != self.arch.input_dim {
            return Err(shape(format!(
                "feature vector has length {}, network expects {}",
                input.len(),
                self.arch.input_dim
            )));
        }
        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre_activations = Vec::with_capacity(depth);
        let mut h = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let a = matvec(layer, &h, counter);
            let next: Vec<f64> = if k + 1 < depth {
                a.iter().map(|&x| relu(x)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre_activations.push(a);
        }
        let output = softmax(pre_activations.last().expect("at least two layers"));
        Ok(ForwardCache {
            inputs,
            pre_activations,
            output,
        })
    }

    /// Class with the highest output probability.
    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        Ok(self.forward(input)?.predicted_class())
    }

    /// Gradients of the cross-entropy between `target` (a probability vector,
    /// one-hot for hard labels) and the softmax output.
    pub fn backward(&self, cache: &ForwardCache, target: &[f64]) -> Result<Gradients> {
        self.backward_counted(cache, target, &mut MultCounter::new())
    }

    pub fn backward_counted(
        &self,
        cache: &ForwardCache,
        target: &[f64],
        counter: &mut MultCounter,
    ) -> Result<Gradients> {
        let mut grads = Gradients::zeros(&self.arch);
        self.backward_into(cache, target, Some(&mut grads), counter)?;
        Ok(grads)
    }

    /// Gradient of the same loss with respect to the network input.
    pub fn input_gradient(&self, cache: &ForwardCache, target: &[f64]) -> Result<Vec<f64>> {
        self.backward_into(cache, target, None, &mut MultCounter::new())
    }

    /// Backpropagate the fused softmax/cross-entropy gradient `o − target`.
    ///
    /// Parameter gradients are *added* to `sink` when one is supplied (the
    /// weight-gradient products are skipped otherwise). Returns the gradient
    /// with respect to the input vector.
    pub(crate) fn backward_into(
        &self,
        cache: &ForwardCache,
        target: &[f64],
        mut sink: Option<&mut Gradients>,
        counter: &mut MultCounter,
    ) -> Result<Vec<f64>> {
        let m = self.arch.num_classes;
        if target.len() != m || cache.output.len() != m {
            return Err(shape(format!(
                "target/output length must be {m}, got {}/{}",
                target.len(),
                cache.output.len()
            )));
        }
        if cache.inputs.len() != self.layers.len()
            || cache
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(h, l)| h.len() != l.cols)
        {
            return Err(shape("forward cache was not produced by this network"));
        }
        if let Some(sink) = sink.as_deref() {
            self.check_gradients(sink)?;
        }

        // Output layer: softmax and log differentiated together; the
        // elementwise activation-derivative product is one multiply per class.
        let mut g: Vec<f64> = cache.output.iter().zip(target).map(|(o, y)| o - y).collect();
        counter.add(m);

        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k + 1 < self.layers.len() {
                // ReLU subgradient, 0 at exactly 0.
                for (gi, &a) in g.iter_mut().zip(&cache.pre_activations[k]) {
                    if a <= 0.0 {
                        *gi = 0.0;
                    }
                }
                counter.add(layer.rows);
            }
            let h_prev = &cache.inputs[k];
            if let Some(sink) = sink.as_deref_mut() {
                let dst = &mut sink.layers[k];
                for (r, &gr) in g.iter().enumerate() {
                    dst.bias[r] += gr;
                    let row = &mut dst.weights[r * layer.cols..(r + 1) * layer.cols];
                    for (d, &h) in row.iter_mut().zip(h_prev) {
                        *d += gr * h;
                    }
                }
                counter.add(layer.rows * layer.cols);
            }
            let mut prev = vec![0.0; layer.cols];
            for (r, &gr) in g.iter().enumerate() {
                let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += w * gr;
                }
            }
            counter.add(layer.rows * layer.cols);
            g = prev;
        }
        Ok(g)
    }

    /// Scalar cross-entropy of the network output against `target`.
    pub fn loss(&self, input: &[f64], target: &[f64]) -> Result<f64> {
        Ok(cross_entropy(&self.forward(input)?.output, target))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: self.arch,
            weights: self
                .layers
                .iter()
                .map(|l| l.weights.chunks(l.cols).map(<[f64]>::to_vec).collect())
                .collect(),
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        if ckpt.weights.len() != ckpt.biases.len() {
            return Err(Error::Format("weights and biases disagree on layer count".into()));
        }
        let layers = ckpt
            .weights
            .into_iter()
            .zip(ckpt.biases)
            .map(|(rows, bias)| {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != cols) {
                    return Err(Error::Format("ragged weight matrix".into()));
                }
                Ok(Layer {
                    rows: rows.len(),
                    cols,
                    weights: rows.into_iter().flatten().collect(),
                    bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(ckpt.arch, layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

/// On-disk model representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: Architecture,
    /// Per layer, row-major nested arrays.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

fn matvec(layer: &Layer, x: &[f64], counter: &mut MultCounter) -> Vec<f64> {
    let out = layer
        .weights
        .chunks_exact(layer.cols)
        .zip(&layer.bias)
        .map(|(row, &b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    counter.add(layer.rows * layer.cols);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const PAPER_ARCH: Architecture = Architecture {
        input_dim: 44,
        hidden_width: 10,
        num_layers: 6,
        num_classes: 4,
    };

    #[test]
    fn relu_values() {
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(0.0), 0.0);
        assert_eq!(relu(2.5), 2.5);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let s = softmax(&[1000.0, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-300 && s[1] >= 0.0);
        let s = softmax(&[1f64.ln(), 3f64.ln()]);
        assert!((s[0] - 0.25).abs() < 1e-12);
        assert!((s[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        let e = (-1f64).exp();
        assert!((cross_entropy(&[1.0 - e, e], &[0.0, 1.0]) - 1.0).abs() < 1e-12);
        let ce = cross_entropy(&[0.25; 4], &one_hot(2, 4));
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        // The floor keeps a zero probability finite.
        assert!((cross_entropy(&[1.0, 0.0], &[0.0, 1.0]) - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mult_count_formulas() {
        assert_eq!(PAPER_ARCH.forward_mults(), 780);
        assert_eq!(PAPER_ARCH.backward_mults(), 1604);
        let ratio = PAPER_ARCH.backward_mults() as f64 / PAPER_ARCH.forward_mults() as f64;
        assert!(ratio > 2.0 && ratio < 2.1);
        let small = Architecture::new(2, 3, 3, 2).unwrap();
        assert_eq!(small.forward_mults(), 12);
        assert_eq!(small.backward_mults(), 29);
        let tiny = Architecture::new(1, 1, 3, 1).unwrap();
        assert_eq!(tiny.forward_mults(), 2);
    }

    #[test]
    fn counters_match_paper_arch() {
        let mlp = Mlp::init(PAPER_ARCH, 3).unwrap();
        let v = vec![0.1; 44];
        let mut c = MultCounter::new();
        let cache = mlp.forward_counted(&v, &mut c).unwrap();
        assert_eq!(c.count(), 780);
        let mut c = MultCounter::new();
        mlp.backward_counted(&cache, &one_hot(1, 4), &mut c).unwrap();
        assert_eq!(c.count(), 1604);
    }

    #[test]
    fn invalid_architectures() {
        assert!(Architecture::new(4, 3, 2, 2).is_err());
        assert!(Architecture::new(0, 3, 3, 2).is_err());
    }

    #[test]
    fn layer_sizes_chain() {
        assert_eq!(PAPER_ARCH.layer_sizes(), vec![44, 10, 10, 10, 10, 4]);
        let mlp = Mlp::zeros(PAPER_ARCH).unwrap();
        assert_eq!(mlp.layers().len(), 5);
        assert_eq!((mlp.layers()[0].rows, mlp.layers()[0].cols), (10, 44));
        assert_eq!((mlp.layers()[4].rows, mlp.layers()[4].cols), (4, 10));
    }

    #[test]
    fn zero_network_outputs_uniform() {
        let mlp = Mlp::zeros(PAPER_ARCH).unwrap();
        let cache = mlp.forward(&[0.7; 44]).unwrap();
        assert_eq!(cache.output, vec![0.25; 4]);
    }

    #[test]
    fn hand_evaluated_two_two_two_net() {
        // W1 = [[1, 0], [0, -1]], b1 = [0, 0.5]; W2 = [[1, 1], [2, 0]], b2 = [0, -1]
        // v = [0.3, 0.2]: a1 = [0.3, 0.3], h1 = [0.3, 0.3], a2 = [0.6, -0.4]
        let arch = Architecture::new(2, 2, 3, 2).unwrap();
        let mlp = Mlp::from_layers(
            arch,
            vec![
                Layer {
                    rows: 2,
                    cols: 2,
                    weights: vec![1.0, 0.0, 0.0, -1.0],
                    bias: vec![0.0, 0.5],
                },
                Layer {
                    rows: 2,
                    cols: 2,
                    weights: vec![1.0, 1.0, 2.0, 0.0],
                    bias: vec![0.0, -1.0],
                },
            ],
        )
        .unwrap();
        let cache = mlp.forward(&[0.3, 0.2]).unwrap();
        let expected0 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((cache.pre_activations[1][0] - 0.6).abs() < 1e-15);
        assert!((cache.pre_activations[1][1] + 0.4).abs() < 1e-15);
        assert!((cache.output[0] - expected0).abs() < 1e-12);
        assert!((cache.output[1] - (1.0 - expected0)).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let mlp = Mlp::zeros(PAPER_ARCH).unwrap();
        assert!(matches!(mlp.forward(&[0.0; 43]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let a = Mlp::init(PAPER_ARCH, 1).unwrap();
        let b = Mlp::init(Architecture::new(8, 10, 6, 4).unwrap(), 1).unwrap();
        let cache = b.forward(&[0.0; 8]).unwrap();
        assert!(matches!(a.backward(&cache, &one_hot(0, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let mlp = Mlp::init(PAPER_ARCH, 5).unwrap();
        let cache = mlp.forward(&[0.2; 44]).unwrap();
        let target = cache.output.clone();
        let grads = mlp.backward(&cache, &target).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    /// Central finite differences of `cross_entropy ∘ forward` w.r.t. every parameter.
    fn finite_difference(mlp: &Mlp, v: &[f64], y: &[f64], step: f64) -> Vec<f64> {
        let n = mlp.params().count();
        (0..n)
            .map(|idx| {
                let mut plus = mlp.clone();
                let mut minus = mlp.clone();
                *plus.params_mut().nth(idx).unwrap() += step;
                *minus.params_mut().nth(idx).unwrap() -= step;
                (plus.loss(v, y).unwrap() - minus.loss(v, y).unwrap()) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let arch = Architecture::new(5, 6, 3 + trial % 3, 3).unwrap();
            let mlp = Mlp::init(arch, trial as u64).unwrap();
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = one_hot(trial % 3, 3);
            let analytic: Vec<f64> = mlp
                .backward(&mlp.forward(&v).unwrap(), &y)
                .unwrap()
                .iter()
                .copied()
                .collect();
            let numeric = finite_difference(&mlp, &v, &y, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!((a - n).abs() / denom < 1e-4, "analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let arch = Architecture::new(4, 5, 4, 3).unwrap();
        let mlp = Mlp::init(arch, 2).unwrap();
        let v = vec![0.3, -0.5, 0.8, 0.1];
        let y = [0.2, 0.5, 0.3];
        let g = mlp.input_gradient(&mlp.forward(&v).unwrap(), &y).unwrap();
        for i in 0..4 {
            let mut p = v.clone();
            let mut m = v.clone();
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let n = (mlp.loss(&p, &y).unwrap() - mlp.loss(&m, &y).unwrap()) / 2e-5;
            assert!((g[i] - n).abs() / g[i].abs().max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn init_is_deterministic_he_scaled() {
        let a = Mlp::init(PAPER_ARCH, 42).unwrap();
        let b = Mlp::init(PAPER_ARCH, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));

        let wide = Mlp::init(Architecture::new(1000, 50, 3, 2).unwrap(), 9).unwrap();
        let w = &wide.layers()[0].weights;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var - 0.002).abs() < 0.2 * 0.002, "variance {var}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mlp = Mlp::init(PAPER_ARCH, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        mlp.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"l_NN\"") && text.contains("\"R\""));
        assert_eq!(Mlp::load(&path).unwrap(), mlp);
    }

    #[test]
    fn checkpoint_rejects_bad_shapes() {
        let mut ckpt = Mlp::init(PAPER_ARCH, 1).unwrap().to_checkpoint();
        ckpt.weights[2].pop();
        assert!(Mlp::from_checkpoint(ckpt).is_err());
    }
}

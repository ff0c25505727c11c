//! Pseudo-label losses for unlabeled online fine-tuning.
//!
//! All losses share the cross-entropy form `−(1/N_b) Σ ln o_ŷ`; they differ in
//! where the pseudo-label `ŷ` comes from and on which input the trained
//! output `o` is evaluated:
//!
//! | kind          | pseudo-label from         | loss evaluated on |
//! |---------------|---------------------------|-------------------|
//! | self_training | NN(v)                     | NN(v)             |
//! | pi_model      | NN(g_σ(v))                | NN(g_σ(v)), independent noise |
//! | vat           | NN(v + r_vadv)            | NN(v)             |
//! | aug_vat       | NN(g_σ(v) + r_vadv)       | NN(g_σ(v))        |
//!
//! `g_σ` adds `N(0, σ²I)` noise; `r_vadv` is the virtual adversarial
//! perturbation from one power-iteration step on the output KL divergence.
//! For `aug_vat` a single noise draw per sample is shared by every forward
//! pass of that sample.
//!
//! Randomness is drawn from per-sample substreams keyed by one value taken
//! from the caller's generator, so results do not depend on whether samples
//! run in parallel.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape, usage, Error, Result};
use crate::nn::{argmax, one_hot, Gradients, Mlp, LOG_FLOOR};
use crate::parallel;
use crate::pipeline::Batch;
use crate::rng::substream;

/// Gradient norms below this trigger the random-direction fallback.
pub const ZERO_GRADIENT_NORM: f64 = 1e-12;

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Supervised; the only kind that reads true labels.
    CrossEntropy,
    SelfTraining,
    PiModel,
    Vat,
    AugVat,
}

impl LossKind {
    pub fn uses_labels(self) -> bool {
        matches!(self, LossKind::CrossEntropy)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::SelfTraining => "self_training",
            LossKind::PiModel => "pi_model",
            LossKind::Vat => "vat",
            LossKind::AugVat => "aug_vat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    /// Augmentation noise standard deviation.
    pub sigma: f64,
    /// Length of the adversarial perturbation.
    pub epsilon: f64,
    /// Finite-difference step of the power iteration.
    pub xi: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            epsilon: 0.0,
            xi: 0.1,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(usage(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(usage(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(usage(format!("xi must be > 0, got {}", self.xi)));
        }
        Ok(())
    }
}

/// Loss selection as it appears in run configs:
/// `{"loss": "aug_vat", "sigma": 0.15, "epsilon": 0.3, "xi": 0.1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub loss: LossKind,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
}

fn default_xi() -> f64 {
    0.1
}

impl LossConfig {
    pub fn new(loss: LossKind, ssl: SslConfig) -> Self {
        Self {
            loss,
            sigma: ssl.sigma,
            epsilon: ssl.epsilon,
            xi: ssl.xi,
        }
    }

    pub fn plain(loss: LossKind) -> Self {
        Self::new(loss, SslConfig::default())
    }

    pub fn aug_vat(sigma: f64, epsilon: f64) -> Self {
        Self::new(
            LossKind::AugVat,
            SslConfig {
                sigma,
                epsilon,
                xi: default_xi(),
            },
        )
    }

    pub fn ssl(&self) -> SslConfig {
        SslConfig {
            sigma: self.sigma,
            epsilon: self.epsilon,
            xi: self.xi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ssl().validate()
    }

    /// Short human-readable tag, e.g. `aug_vat(sigma=0.15,epsilon=0.3)`.
    pub fn label(&self) -> String {
        match self.loss {
            LossKind::CrossEntropy | LossKind::SelfTraining => self.loss.name().to_string(),
            LossKind::PiModel => format!("pi_model(sigma={})", self.sigma),
            LossKind::Vat => format!("vat(epsilon={})", self.epsilon),
            LossKind::AugVat => format!("aug_vat(sigma={},epsilon={})", self.sigma, self.epsilon),
        }
    }
}

/// One-hot label at the argmax of a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub class: usize,
    pub one_hot: Vec<f64>,
}

pub fn pseudo_label(probs: &[f64]) -> PseudoLabel {
    let class = argmax(probs);
    PseudoLabel {
        class,
        one_hot: one_hot(class, probs.len()),
    }
}

/// `v + η`, `η ~ N(0, σ²I)`. Returns `v` unchanged when `σ = 0`.
pub fn augment<R: Rng + ?Sized>(v: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return v.to_vec();
    }
    v.iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            x + sigma * z
        })
        .collect()
}

/// `Σ p_j ln(p_j / q_j)`, with `q` floored at 1e-12 and `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape(format!(
            "KL divergence of vectors with lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| pj * (pj / qj.max(LOG_FLOOR)).ln())
        .sum();
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub vector: Vec<f64>,
    /// The KL gradient vanished and a random direction was used instead.
    pub fallback: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scaled_to(v: &[f64], length: f64) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| length * (x / n)).collect()
}

/// One power-iteration step around `x`, whose network output is `output`.
fn perturbation_at<R: Rng + ?Sized>(
    mlp: &Mlp,
    x: &[f64],
    output: &[f64],
    cfg: &SslConfig,
    rng: &mut R,
) -> Result<Perturbation> {
    if cfg.epsilon == 0.0 {
        return Ok(Perturbation {
            vector: vec![0.0; x.len()],
            fallback: false,
        });
    }
    let mut d: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
    if norm(&d) == 0.0 {
        d[0] = 1.0;
    }
    let d = scaled_to(&d, 1.0);
    let probe: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + cfg.xi * di).collect();
    let probe_cache = mlp.forward(&probe)?;
    // ∇_r KL(o ‖ o') backpropagates o' − o from the probe's logits.
    let grad = mlp.input_gradient(&probe_cache, output)?;
    if norm(&grad) < ZERO_GRADIENT_NORM {
        return Ok(Perturbation {
            vector: d.iter().map(|di| cfg.epsilon * di).collect(),
            fallback: true,
        });
    }
    Ok(Perturbation {
        vector: scaled_to(&grad, cfg.epsilon),
        fallback: false,
    })
}

/// Virtual adversarial perturbation of length `ε` for input `v`.
///
/// With `apply_aug`, one noise draw `η` is made and both the reference and
/// the probe pass see `v + η`.
pub fn virtual_adversarial_perturbation<R: Rng + ?Sized>(
    mlp: &Mlp,
    v: &[f64],
    cfg: &SslConfig,
    apply_aug: bool,
    rng: &mut R,
) -> Result<Perturbation> {
    cfg.validate()?;
    let x = if apply_aug {
        augment(v, cfg.sigma, rng)
    } else {
        v.to_vec()
    };
    let reference = mlp.forward(&x)?;
    perturbation_at(mlp, &x, &reference.output, cfg, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// Mean pseudo-label (or true-label) cross-entropy over the batch.
    pub loss: f64,
    /// Gradient of `loss`.
    pub grads: Gradients,
    /// Argmax of the clean, unperturbed forward pass for each sample.
    pub predictions: Vec<u8>,
    /// Samples whose perturbation took the zero-gradient fallback.
    pub fallbacks: usize,
}

struct ChunkResult {
    loss: f64,
    grads: Gradients,
    predictions: Vec<u8>,
    fallbacks: usize,
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Loss, parameter gradients and clean predictions for one batch.
pub fn batch_loss_and_grads<R: RngCore + ?Sized>(
    mlp: &Mlp,
    batch: &Batch,
    loss: &LossConfig,
    rng: &mut R,
) -> Result<BatchOutcome> {
    loss.validate()?;
    let n = batch.len();
    if n == 0 {
        return Err(usage("empty batch"));
    }
    if batch.dim() != mlp.arch().input_dim {
        return Err(shape(format!(
            "batch features have dimension {}, network expects {}",
            batch.dim(),
            mlp.arch().input_dim
        )));
    }
    let labels = if loss.loss.uses_labels() {
        Some(
            batch
                .labels()
                .ok_or_else(|| usage("cross-entropy training needs labelled batches"))?,
        )
    } else {
        None
    };

    let key = rng.next_u64();
    let cfg = loss.ssl();
    let m = mlp.arch().num_classes;
    let n_chunks = n.div_ceil(CHUNK);

    let chunks = parallel::map_indexed(n_chunks, |c| -> Result<ChunkResult> {
        let mut out = ChunkResult {
            loss: 0.0,
            grads: Gradients::zeros(mlp.arch()),
            predictions: Vec::with_capacity(CHUNK),
            fallbacks: 0,
        };
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let v = batch.feature(i);
            let mut rng = substream(key, &[i as u64]);
            // (cache the loss is evaluated on, pseudo-label, clean prediction)
            let (cache, target, prediction) = match loss.loss {
                LossKind::CrossEntropy => {
                    let cache = mlp.forward(v)?;
                    let label = labels.expect("checked above")[i] as usize;
                    if label >= m {
                        return Err(usage(format!("label {label} out of range for {m} classes")));
                    }
                    let p = cache.predicted_class();
                    (cache, label, p)
                }
                LossKind::SelfTraining => {
                    let cache = mlp.forward(v)?;
                    let label = pseudo_label(&cache.output).class;
                    (cache, label, label)
                }
                LossKind::PiModel => {
                    let labeller = mlp.forward(&augment(v, cfg.sigma, &mut rng))?;
                    let label = pseudo_label(&labeller.output).class;
                    let cache = mlp.forward(&augment(v, cfg.sigma, &mut rng))?;
                    let p = if cfg.sigma == 0.0 {
                        cache.predicted_class()
                    } else {
                        mlp.predict(v)?
                    };
                    (cache, label, p)
                }
                LossKind::Vat => {
                    let cache = mlp.forward(v)?;
                    let r = perturbation_at(mlp, v, &cache.output, &cfg, &mut rng)?;
                    out.fallbacks += r.fallback as usize;
                    let label = mlp.predict(&add(v, &r.vector))?;
                    let p = cache.predicted_class();
                    (cache, label, p)
                }
                LossKind::AugVat => {
                    let x = augment(v, cfg.sigma, &mut rng);
                    let cache = mlp.forward(&x)?;
                    let r = perturbation_at(mlp, &x, &cache.output, &cfg, &mut rng)?;
                    out.fallbacks += r.fallback as usize;
                    let label = mlp.predict(&add(&x, &r.vector))?;
                    let p = if cfg.sigma == 0.0 {
                        cache.predicted_class()
                    } else {
                        mlp.predict(v)?
                    };
                    (cache, label, p)
                }
            };
            out.loss -= cache.output[target].max(LOG_FLOOR).ln();
            mlp.backward_into(
                &cache,
                &one_hot(target, m),
                Some(&mut out.grads),
                &mut Default::default(),
            )?;
            out.predictions.push(prediction as u8);
        }
        Ok(out)
    });

    let mut total = BatchOutcome {
        loss: 0.0,
        grads: Gradients::zeros(mlp.arch()),
        predictions: Vec::with_capacity(n),
        fallbacks: 0,
    };
    for chunk in chunks {
        let chunk = chunk?;
        total.loss += chunk.loss;
        total.grads.accumulate(&chunk.grads)?;
        total.predictions.extend(chunk.predictions);
        total.fallbacks += chunk.fallbacks;
    }
    let scale = 1.0 / n as f64;
    total.loss *= scale;
    total.grads.scale(scale);
    if !total.loss.is_finite() {
        return Err(Error::Degenerate("batch loss is not finite".into()));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, Layer};
    use crate::rng::seeded;

    fn random_batch(n: usize, dim: usize, seed: u64, labels: bool) -> Batch {
        let mut rng = seeded(seed);
        let features: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let labels = labels.then(|| (0..n).map(|_| rng.random_range(0..4u8)).collect());
        Batch::new(dim, features, (0..n).collect(), labels).unwrap()
    }

    #[test]
    fn augment_zero_sigma_is_identity() {
        let v = vec![0.3, -1.0, 2.0];
        assert_eq!(augment(&v, 0.0, &mut seeded(1)), v);
        assert_eq!(augment(&v, 0.2, &mut seeded(1)), augment(&v, 0.2, &mut seeded(1)));
    }

    #[test]
    fn augment_noise_variance() {
        let sigma = 0.3;
        let v = vec![0.0; 100];
        let mut rng = seeded(5);
        let samples: Vec<f64> = (0..1000).flat_map(|_| augment(&v, sigma, &mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        assert!((var - sigma * sigma).abs() < 0.05 * sigma * sigma, "var {var}");
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-12);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn pseudo_label_examples() {
        assert_eq!(pseudo_label(&[0.1, 0.7, 0.15, 0.05]).class, 1);
        assert_eq!(pseudo_label(&[0.5, 0.5]).class, 0);
        let oh = [0.0, 0.0, 1.0, 0.0];
        assert_eq!(pseudo_label(&oh).one_hot, oh.to_vec());
    }

    #[test]
    fn perturbation_has_length_epsilon() {
        let arch = Architecture::new(12, 8, 4, 4).unwrap();
        let mut rng = seeded(3);
        for s in 0..50 {
            let mlp = Mlp::init(arch, s).unwrap();
            let v: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cfg = SslConfig {
                sigma: 0.1,
                epsilon: 0.3,
                xi: 0.1,
            };
            let r = virtual_adversarial_perturbation(&mlp, &v, &cfg, s % 2 == 0, &mut rng).unwrap();
            assert!(!r.fallback);
            assert!((norm(&r.vector) - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_epsilon_gives_zero_vector() {
        let mlp = Mlp::init(Architecture::new(4, 4, 3, 2).unwrap(), 0).unwrap();
        let cfg = SslConfig {
            sigma: 0.0,
            epsilon: 0.0,
            xi: 0.1,
        };
        let r = virtual_adversarial_perturbation(&mlp, &[1.0; 4], &cfg, false, &mut seeded(0)).unwrap();
        assert_eq!(r.vector, vec![0.0; 4]);
    }

    #[test]
    fn constant_network_takes_fallback() {
        let mlp = Mlp::zeros(Architecture::new(6, 4, 4, 3).unwrap()).unwrap();
        let cfg = SslConfig {
            sigma: 0.0,
            epsilon: 0.5,
            xi: 0.1,
        };
        let r = virtual_adversarial_perturbation(&mlp, &[0.4; 6], &cfg, false, &mut seeded(9)).unwrap();
        assert!(r.fallback);
        assert!((norm(&r.vector) - 0.5).abs() < 1e-12);
    }

    /// Two inputs, two classes; only the first input matters and the
    /// decision boundary is the line x₀ = 0.
    fn boundary_net(input_dim: usize) -> Mlp {
        let arch = Architecture::new(input_dim, 2, 3, 2).unwrap();
        let mut first = Layer::zeros(2, input_dim);
        first.weights[0] = 1.0;
        first.weights[input_dim] = -1.0;
        Mlp::from_layers(
            arch,
            vec![
                first,
                Layer {
                    rows: 2,
                    cols: 2,
                    weights: vec![2.0, -2.0, -2.0, 2.0],
                    bias: vec![0.0, 0.0],
                },
            ],
        )
        .unwrap()
    }

    fn max_prob(mlp: &Mlp, x: &[f64]) -> f64 {
        let o = mlp.forward(x).unwrap().output;
        o[0].max(o[1])
    }

    #[test]
    fn perturbation_follows_the_boundary_normal() {
        let mlp = boundary_net(1);
        // Brute-force scan: the boundary is where the max probability is smallest.
        let boundary = (-2000..=2000)
            .map(|i| i as f64 * 1e-3)
            .min_by(|a, b| max_prob(&mlp, &[*a]).total_cmp(&max_prob(&mlp, &[*b])))
            .unwrap();
        assert!(boundary.abs() < 1e-3);

        let cfg = SslConfig {
            sigma: 0.0,
            epsilon: 0.2,
            xi: 0.1,
        };
        // One power-iteration step fixes the direction only up to sign, so
        // check the member of ±r that faces the boundary.
        for &x in &[-1.3, -0.6, 0.5, 1.1] {
            let r = virtual_adversarial_perturbation(&mlp, &[x], &cfg, false, &mut seeded(4)).unwrap();
            let toward = if (boundary - x) * r.vector[0] > 0.0 { r.vector[0] } else { -r.vector[0] };
            assert!(max_prob(&mlp, &[x + toward]) < max_prob(&mlp, &[x]));
            assert!(max_prob(&mlp, &[x - toward]) > max_prob(&mlp, &[x]));
        }

        // With a second, irrelevant input the perturbation lines up with the
        // boundary normal rather than the random start direction.
        let mlp = boundary_net(2);
        for s in 0..20 {
            let r = virtual_adversarial_perturbation(&mlp, &[0.4, -0.7], &cfg, false, &mut seeded(s)).unwrap();
            assert!(r.vector[0].abs() / norm(&r.vector) > 1.0 - 1e-9);
        }
    }

    #[test]
    fn degenerate_losses_match_self_training_bitwise() {
        let mlp = Mlp::init(Architecture::new(8, 6, 4, 4).unwrap(), 12).unwrap();
        let batch = random_batch(150, 8, 1, false);
        let st = batch_loss_and_grads(&mlp, &batch, &LossConfig::plain(LossKind::SelfTraining), &mut seeded(2)).unwrap();
        let av = batch_loss_and_grads(&mlp, &batch, &LossConfig::aug_vat(0.0, 0.0), &mut seeded(3)).unwrap();
        let pi = batch_loss_and_grads(
            &mlp,
            &batch,
            &LossConfig::new(LossKind::PiModel, SslConfig::default()),
            &mut seeded(4),
        )
        .unwrap();
        assert_eq!(st, av);
        assert_eq!(st, pi);
    }

    #[test]
    fn confident_network_has_tiny_self_training_loss() {
        // Huge logit gap for every input: class 0 always wins by ≥ 40.
        let arch = Architecture::new(2, 2, 3, 2).unwrap();
        let mlp = Mlp::from_layers(
            arch,
            vec![
                Layer::zeros(2, 2),
                Layer {
                    rows: 2,
                    cols: 2,
                    weights: vec![0.0; 4],
                    bias: vec![20.0, -20.0],
                },
            ],
        )
        .unwrap();
        let batch = random_batch(32, 2, 8, false);
        let out = batch_loss_and_grads(&mlp, &batch, &LossConfig::plain(LossKind::SelfTraining), &mut seeded(0)).unwrap();
        assert!(out.loss < 1e-5);
        assert!(out.predictions.iter().all(|&p| p == 0));
    }

    #[test]
    fn empty_batch_and_missing_labels_are_rejected() {
        let mlp = Mlp::init(Architecture::new(3, 4, 3, 4).unwrap(), 0).unwrap();
        let empty = Batch::new(3, vec![], vec![], None).unwrap();
        let cfg = LossConfig::plain(LossKind::SelfTraining);
        assert!(matches!(
            batch_loss_and_grads(&mlp, &empty, &cfg, &mut seeded(0)),
            Err(Error::Usage(_))
        ));
        let unlabeled = random_batch(4, 3, 0, false);
        let ce = LossConfig::plain(LossKind::CrossEntropy);
        assert!(batch_loss_and_grads(&mlp, &unlabeled, &ce, &mut seeded(0)).is_err());
    }

    #[test]
    fn pseudo_label_losses_ignore_true_labels() {
        let mlp = Mlp::init(Architecture::new(5, 6, 4, 4).unwrap(), 3).unwrap();
        let with = random_batch(40, 5, 2, true);
        let without = Batch::new(5, with.features().to_vec(), with.indices().to_vec(), None).unwrap();
        let scrambled = Batch::new(
            5,
            with.features().to_vec(),
            with.indices().to_vec(),
            Some(with.labels().unwrap().iter().map(|l| (l + 1) % 4).collect()),
        )
        .unwrap();
        for cfg in [
            LossConfig::plain(LossKind::SelfTraining),
            LossConfig::new(LossKind::PiModel, SslConfig { sigma: 0.2, ..Default::default() }),
            LossConfig::new(LossKind::Vat, SslConfig { epsilon: 0.3, ..Default::default() }),
            LossConfig::aug_vat(0.15, 0.3),
        ] {
            let a = batch_loss_and_grads(&mlp, &with, &cfg, &mut seeded(6)).unwrap();
            let b = batch_loss_and_grads(&mlp, &without, &cfg, &mut seeded(6)).unwrap();
            let c = batch_loss_and_grads(&mlp, &scrambled, &cfg, &mut seeded(6)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
            assert!(a.loss >= 0.0);
        }
    }
}

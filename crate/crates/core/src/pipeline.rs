//! Equalizer pipeline: feature windows, batching, offline training, the
//! online adaptation loop and the BER bookkeeping around it.
//!
//! The feature vector of symbol `i` concatenates the samples of symbols
//! `i−L ..= i+L`, so only interior symbols (at least `L` away from either end
//! of a stream) are equalized. Online batches are consecutive,
//! non-overlapping groups of `N_b` interior symbols; a trailing partial group
//! is dropped.
//!
//! Online scoring is predict-then-update: a batch's BER is measured with the
//! parameters in force *before* that batch's gradient step.

use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::chansim::{Modulation, SymbolStream};
use crate::error::{shape, usage, Error, Result};
use crate::nn::{Gradients, Mlp};
use crate::optim::{step_in_place, OptimizerConfig, OptimizerState};
use crate::parallel;
use crate::rng::{derive_seed, seeded};
use crate::ssl::{batch_loss_and_grads, LossConfig, LossKind};

/// A group of feature vectors processed together.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    features: Vec<f64>,
    indices: Vec<usize>,
    labels: Option<Vec<u8>>,
}

impl Batch {
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        indices: Vec<usize>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        if dim == 0 || features.len() != dim * indices.len() {
            return Err(shape(format!(
                "{} feature values do not form {} vectors of dimension {dim}",
                features.len(),
                indices.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(usage("batch indices must be strictly increasing"));
        }
        if labels.as_ref().is_some_and(|l| l.len() != indices.len()) {
            return Err(shape("label count differs from sample count"));
        }
        Ok(Self {
            dim,
            features,
            indices,
            labels,
        })
    }

    /// Feature vectors of the symbols in `range`, with labels attached.
    pub fn from_stream(stream: &SymbolStream, range: Range<usize>, half_window: usize) -> Result<Self> {
        let dim = stream.symbol_width() * (2 * half_window + 1);
        let mut features = Vec::with_capacity(dim * range.len());
        for i in range.clone() {
            features.extend_from_slice(feature_slice(stream, i, half_window)?);
        }
        let labels = stream.labels[range.clone()].to_vec();
        Self::new(dim, features, range.collect(), Some(labels))
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// The same batch with its true labels removed.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Split off the labels, leaving an unlabeled batch.
    pub fn into_parts(self) -> (Self, Option<Vec<u8>>) {
        let labels = self.labels;
        (
            Self {
                labels: None,
                ..self
            },
            labels,
        )
    }
}

fn feature_slice(stream: &SymbolStream, i: usize, half_window: usize) -> Result<&[f64]> {
    let n = stream.n_seq();
    if i < half_window || i + half_window >= n {
        return Err(Error::Boundary {
            index: i,
            half_width: half_window,
            len: n,
        });
    }
    let w = stream.symbol_width();
    Ok(&stream.samples[(i - half_window) * w..(i + half_window + 1) * w])
}

/// Samples of symbols `i−L ..= i+L`, length `Γ(2L+1)` per real component.
pub fn build_feature(stream: &SymbolStream, i: usize, half_window: usize) -> Result<Vec<f64>> {
    feature_slice(stream, i, half_window).map(<[f64]>::to_vec)
}

/// Symbols that have a complete feature window.
pub fn interior(n_seq: usize, half_window: usize) -> Range<usize> {
    half_window..n_seq.saturating_sub(half_window).max(half_window)
}

/// Index ranges of the full batches of a stream, in chronological order.
pub fn batch_ranges(n_seq: usize, half_window: usize, batch_size: usize) -> Result<Vec<Range<usize>>> {
    if batch_size == 0 {
        return Err(usage("batch size must be at least 1"));
    }
    let inner = interior(n_seq, half_window);
    let count = inner.len() / batch_size;
    if count == 0 {
        return Err(usage(format!(
            "stream of {n_seq} symbols holds no full batch of {batch_size} (half window {half_window})"
        )));
    }
    Ok((0..count)
        .map(|b| inner.start + b * batch_size..inner.start + (b + 1) * batch_size)
        .collect())
}

pub fn collect_batches(stream: &SymbolStream, half_window: usize, batch_size: usize) -> Result<Vec<Batch>> {
    batch_ranges(stream.n_seq(), half_window, batch_size)?
        .into_iter()
        .map(|r| Batch::from_stream(stream, r, half_window))
        .collect()
}

/// Settings for one training stage (offline or online).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Feature window half-width `L`, in symbols.
    pub half_window: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_smoothing")]
    pub smoothing_window: usize,
    #[serde(default = "default_threshold")]
    pub ber_threshold: f64,
    /// Offline passes over the training data.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// When false, the online loop only equalizes.
    #[serde(default = "default_adaptive")]
    pub adaptive: bool,
}

fn default_smoothing() -> usize {
    8
}
fn default_threshold() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    200
}
fn default_adaptive() -> bool {
    true
}

impl RunConfig {
    /// Aug-VAT (σ = 0.15, ε = 0.3) with Adam, α = 0.01.
    pub fn online_default(half_window: usize, batch_size: usize) -> Self {
        Self {
            half_window,
            batch_size,
            loss: LossConfig::aug_vat(0.15, 0.3),
            optimizer: OptimizerConfig::online_default(),
            smoothing_window: default_smoothing(),
            ber_threshold: default_threshold(),
            epochs: 1,
            seed: 0,
            adaptive: true,
        }
    }

    /// Supervised cross-entropy with momentum SGD.
    pub fn offline_default(half_window: usize, batch_size: usize, epochs: usize) -> Self {
        Self {
            loss: LossConfig::plain(LossKind::CrossEntropy),
            optimizer: OptimizerConfig::offline_default(),
            epochs,
            ..Self::online_default(half_window, batch_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(usage("batch_size must be at least 1"));
        }
        if self.smoothing_window == 0 {
            return Err(usage("smoothing_window must be at least 1"));
        }
        if !(self.ber_threshold > 0.0) {
            return Err(usage("ber_threshold must be positive"));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

/// Bits in error between two class sequences under the Gray labelling.
pub fn bit_errors(truth: &[u8], decided: &[u8], modulation: Modulation) -> u64 {
    truth
        .iter()
        .zip(decided)
        .map(|(&t, &d)| (modulation.gray_bits(t) ^ modulation.gray_bits(d)).count_ones() as u64)
        .sum()
}

/// Bit error rate of a sequence of symbol decisions.
pub fn symbol_errors_to_ber(truth: &[u8], decided: &[u8], modulation: Modulation) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    bit_errors(truth, decided, modulation) as f64 / (truth.len() * modulation.bits_per_symbol()) as f64
}

/// Clean-pass predictions for every sample of a batch.
pub fn predict_batch(mlp: &Mlp, batch: &Batch) -> Result<Vec<u8>> {
    if batch.dim() != mlp.arch().input_dim {
        return Err(shape(format!(
            "batch features have dimension {}, network expects {}",
            batch.dim(),
            mlp.arch().input_dim
        )));
    }
    const CHUNK: usize = 256;
    let n = batch.len();
    let chunks = parallel::map_indexed(n.div_ceil(CHUNK), |c| {
        (c * CHUNK..((c + 1) * CHUNK).min(n))
            .map(|i| mlp.predict(batch.feature(i)).map(|p| p as u8))
            .collect::<Result<Vec<u8>>>()
    });
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Bit errors and bits over the symbols in `range` of a stream.
pub fn evaluate(mlp: &Mlp, stream: &SymbolStream, range: Range<usize>, half_window: usize) -> Result<(u64, u64)> {
    const STEP: usize = 8192;
    let mut errors = 0;
    let mut start = range.start;
    while start < range.end {
        let end = (start + STEP).min(range.end);
        let batch = Batch::from_stream(stream, start..end, half_window)?;
        let predictions = predict_batch(mlp, &batch)?;
        errors += bit_errors(batch.labels().expect("stream batches carry labels"), &predictions, stream.modulation());
        start = end;
    }
    Ok((errors, (range.len() * stream.modulation().bits_per_symbol()) as u64))
}

/// Interior symbols used for offline training: the first `fraction` of them.
pub fn training_range(n_seq: usize, half_window: usize, fraction: f64) -> Result<Range<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(usage(format!("training fraction must lie in (0, 1], got {fraction}")));
    }
    let inner = interior(n_seq, half_window);
    let count = (inner.len() as f64 * fraction).floor() as usize;
    if count == 0 {
        return Err(usage("training fraction selects no symbols"));
    }
    Ok(inner.start..inner.start + count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineReport {
    /// Mean cross-entropy over each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_range: Range<usize>,
}

/// Supervised mini-batch training on the first `fraction` of a stream.
///
/// Samples are reshuffled every epoch with a permutation derived from
/// `cfg.seed` and the epoch number; the last mini-batch of an epoch may be
/// short.
pub fn train_offline(
    mlp: &Mlp,
    stream: &SymbolStream,
    fraction: f64,
    cfg: &RunConfig,
) -> Result<(Mlp, OfflineReport)> {
    cfg.validate()?;
    let range = training_range(stream.n_seq(), cfg.half_window, fraction)?;
    let data = Batch::from_stream(stream, range.clone(), cfg.half_window)?;
    if data.dim() != mlp.arch().input_dim {
        return Err(shape(format!(
            "features have dimension {}, network expects {}",
            data.dim(),
            mlp.arch().input_dim
        )));
    }
    let labels = data.labels().expect("stream batches carry labels");
    let loss = LossConfig::plain(LossKind::CrossEntropy);

    let mut model = mlp.clone();
    let mut state = OptimizerState::new(model.arch());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(derive_seed(cfg.seed, &[0x0ff1, epoch as u64])));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut sorted = chunk.to_vec();
            sorted.sort_unstable();
            let mut features = Vec::with_capacity(sorted.len() * data.dim());
            for &i in &sorted {
                features.extend_from_slice(data.feature(i));
            }
            let batch = Batch::new(
                data.dim(),
                features,
                sorted.iter().map(|&i| data.indices()[i]).collect(),
                Some(sorted.iter().map(|&i| labels[i]).collect()),
            )?;
            let mut rng = seeded(derive_seed(cfg.seed, &[epoch as u64, b as u64]));
            let outcome = batch_loss_and_grads(&model, &batch, &loss, &mut rng)?;
            total += outcome.loss * batch.len() as f64;
            step_in_place(&mut state, &mut model, &outcome.grads, &cfg.optimizer)?;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok((
        model,
        OfflineReport {
            epoch_losses,
            train_range: range,
        },
    ))
}

/// One line of a BER trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub batch_index: usize,
    /// 1 for the first stream, 2 for the second.
    pub segment: u8,
    /// Bit errors in the batch.
    pub errors: u64,
    pub symbols: u64,
    pub raw_ber: f64,
    pub smoothed_ber: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BerTrace {
    pub rows: Vec<TraceRow>,
    /// Row index of the first second-segment batch.
    pub set2_start: usize,
    pub bits_per_symbol: u64,
    pub smoothing_window: usize,
}

/// Mean of the trailing `window` entries at every position.
pub fn smoothed_ber(raw: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..raw.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            raw[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64
        })
        .collect()
}

impl BerTrace {
    pub fn new(bits_per_symbol: u64, smoothing_window: usize) -> Self {
        Self {
            rows: Vec::new(),
            set2_start: 0,
            bits_per_symbol,
            smoothing_window: smoothing_window.max(1),
        }
    }

    /// Append a batch result; the smoothed value covers the trailing window.
    pub fn push(&mut self, segment: u8, errors: u64, symbols: u64) {
        if segment == 2 && self.rows.iter().all(|r| r.segment != 2) {
            self.set2_start = self.rows.len();
        }
        let raw_ber = errors as f64 / (symbols * self.bits_per_symbol) as f64;
        let batch_index = self.rows.len();
        self.rows.push(TraceRow {
            batch_index,
            segment,
            errors,
            symbols,
            raw_ber,
            smoothed_ber: 0.0,
        });
        let lo = (batch_index + 1).saturating_sub(self.smoothing_window);
        let window = &self.rows[lo..];
        let smoothed = window.iter().map(|r| r.raw_ber).sum::<f64>() / window.len() as f64;
        self.rows[batch_index].smoothed_ber = smoothed;
    }

    pub fn raw(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.raw_ber).collect()
    }

    /// Copy of the trace smoothed with a different window.
    pub fn resmoothed(&self, window: usize) -> Self {
        let smoothed = smoothed_ber(&self.raw(), window);
        let mut out = self.clone();
        out.smoothing_window = window.max(1);
        for (row, s) in out.rows.iter_mut().zip(smoothed) {
            row.smoothed_ber = s;
        }
        out
    }

    pub fn has_set2(&self) -> bool {
        self.rows.iter().any(|r| r.segment == 2)
    }

    fn segment_rows(&self, segment: u8) -> Vec<&TraceRow> {
        self.rows.iter().filter(|r| r.segment == segment).collect()
    }

    /// BER over the last `smoothing_window` batches of a segment.
    pub fn final_ber(&self, segment: u8) -> Option<f64> {
        let rows = self.segment_rows(segment);
        if rows.is_empty() {
            return None;
        }
        let tail = &rows[rows.len().saturating_sub(self.smoothing_window)..];
        Some(tail.iter().map(|r| r.raw_ber).sum::<f64>() / tail.len() as f64)
    }

    /// BER pooled over every batch of a segment.
    pub fn overall_ber(&self, segment: u8) -> Option<f64> {
        let rows = self.segment_rows(segment);
        let bits: u64 = rows.iter().map(|r| r.symbols * self.bits_per_symbol).sum();
        (bits > 0).then(|| rows.iter().map(|r| r.errors).sum::<u64>() as f64 / bits as f64)
    }

    pub fn convergence_time(&self, threshold: f64) -> Option<usize> {
        if !self.has_set2() {
            return None;
        }
        convergence_time(self, threshold, self.set2_start, self.smoothing_window)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch_index,segment,errors,symbols,raw_ber,smoothed_ber\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.batch_index, r.segment, r.errors, r.symbols, r.raw_ber, r.smoothed_ber
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Batches after the second segment starts until both the mean BER of the
/// last `window` batches and the pooled BER of the second segment so far
/// fall below `threshold`.
///
/// Only positions with `window` second-segment batches behind them are
/// evaluated, so the earliest possible answer is `window`.
pub fn convergence_time(trace: &BerTrace, threshold: f64, set2_start: usize, window: usize) -> Option<usize> {
    let window = window.max(1);
    let rows = trace.rows.get(set2_start..)?;
    let mut errors = 0u64;
    let mut bits = 0u64;
    for (k, row) in rows.iter().enumerate() {
        errors += row.errors;
        bits += row.symbols * trace.bits_per_symbol;
        let count = k + 1;
        if count < window {
            continue;
        }
        let recent = rows[count - window..count].iter().map(|r| r.raw_ber).sum::<f64>() / window as f64;
        let pooled = errors as f64 / bits as f64;
        if recent < threshold && pooled < threshold {
            return Some(count);
        }
    }
    None
}

/// Headline numbers of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub method: String,
    pub loss_kind: String,
    pub adaptive: bool,
    pub final_ber_set1: Option<f64>,
    pub final_ber_set2: Option<f64>,
    pub overall_ber_set2: Option<f64>,
    /// `None` when the run did not converge.
    pub convergence_batches: Option<usize>,
    pub converged: bool,
    pub batches: usize,
    pub config_hash: String,
}

impl TraceSummary {
    pub fn from_trace(method: &str, loss_kind: &str, adaptive: bool, trace: &BerTrace, threshold: f64) -> Self {
        let convergence = trace.convergence_time(threshold);
        Self {
            method: method.to_string(),
            loss_kind: loss_kind.to_string(),
            adaptive,
            final_ber_set1: trace.final_ber(1),
            final_ber_set2: trace.final_ber(2),
            overall_ber_set2: trace.overall_ber(2),
            convergence_batches: convergence,
            converged: convergence.is_some(),
            batches: trace.rows.len(),
            config_hash: String::new(),
        }
    }
}

/// Result of an online run.
#[derive(Debug, Clone)]
pub struct OnlineOutcome {
    pub trace: BerTrace,
    pub initial: Mlp,
    pub final_model: Mlp,
    /// Perturbations that used the zero-gradient fallback.
    pub fallbacks: usize,
    pub updates: usize,
}

/// Stateful online equalizer: one call per batch.
#[derive(Debug, Clone)]
pub struct OnlineSession {
    model: Mlp,
    state: OptimizerState,
    cfg: RunConfig,
    rng: rand_chacha::ChaCha8Rng,
    pub fallbacks: usize,
    pub updates: usize,
}

impl OnlineSession {
    pub fn new(mlp: &Mlp, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: mlp.clone(),
            state: OptimizerState::new(mlp.arch()),
            cfg: cfg.clone(),
            rng: seeded(derive_seed(cfg.seed, &[0x0a1e])),
            fallbacks: 0,
            updates: 0,
        })
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    /// Predict every symbol of `batch` with the current parameters, then
    /// (when `update`) take one optimizer step on the batch loss.
    ///
    /// True labels reach the loss only for the supervised cross-entropy kind.
    pub fn process(&mut self, batch: &Batch, update: bool) -> Result<Vec<u8>> {
        if !update {
            return predict_batch(&self.model, batch);
        }
        let unlabeled;
        let training_batch = if self.cfg.loss.loss.uses_labels() {
            batch
        } else {
            unlabeled = batch.without_labels();
            &unlabeled
        };
        let outcome = batch_loss_and_grads(&self.model, training_batch, &self.cfg.loss, &mut self.rng)?;
        self.fallbacks += outcome.fallbacks;
        step_in_place(&mut self.state, &mut self.model, &outcome.grads, &self.cfg.optimizer)?;
        self.updates += 1;
        Ok(outcome.predictions)
    }
}

/// Shape error unless `mlp` takes this stream's features and emits its classes.
pub fn check_fits(mlp: &Mlp, stream: &SymbolStream, half_window: usize) -> Result<()> {
    let arch = mlp.arch();
    let dim = stream.symbol_width() * (2 * half_window + 1);
    let classes = stream.modulation().num_classes();
    if arch.input_dim != dim || arch.num_classes != classes {
        return Err(shape(format!(
            "network maps {} inputs to {} classes, data has {dim} features and {classes} classes",
            arch.input_dim, arch.num_classes
        )));
    }
    Ok(())
}

/// Process the first stream and then the second, batch by batch.
pub fn run_online(mlp: &Mlp, set1: &SymbolStream, set2: &SymbolStream, cfg: &RunConfig) -> Result<OnlineOutcome> {
    if set1.modulation() != set2.modulation() {
        return Err(usage("streams use different modulations"));
    }
    check_fits(mlp, set1, cfg.half_window)?;
    check_fits(mlp, set2, cfg.half_window)?;
    let mut session = OnlineSession::new(mlp, cfg)?;
    let modulation = set1.modulation();
    let mut trace = BerTrace::new(modulation.bits_per_symbol() as u64, cfg.smoothing_window);
    for (segment, stream) in [(1u8, set1), (2u8, set2)] {
        for range in batch_ranges(stream.n_seq(), cfg.half_window, cfg.batch_size)? {
            let (batch, labels) = Batch::from_stream(stream, range, cfg.half_window)?.into_parts();
            let labels = labels.expect("stream batches carry labels");
            let batch = if cfg.loss.loss.uses_labels() {
                Batch::new(batch.dim, batch.features, batch.indices, Some(labels.clone()))?
            } else {
                batch
            };
            let predictions = session.process(&batch, cfg.adaptive)?;
            trace.push(segment, bit_errors(&labels, &predictions, modulation), batch.len() as u64);
        }
    }
    Ok(OnlineOutcome {
        trace,
        initial: mlp.clone(),
        fallbacks: session.fallbacks,
        updates: session.updates,
        final_model: session.model,
    })
}

/// Per-layer weight movement between two snapshots of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightChange {
    /// 1-based layer index.
    pub k: usize,
    pub s_init: f64,
    pub s_delta: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightChangeReport {
    pub layers: Vec<WeightChange>,
}

impl WeightChangeReport {
    /// Ratios from precomputed absolute sums.
    pub fn from_sums(sums: &[(f64, f64)]) -> Result<Self> {
        let layers = sums
            .iter()
            .enumerate()
            .map(|(i, &(s_init, s_delta))| {
                if !(s_init > 0.0) {
                    return Err(Error::Degenerate(format!("layer {} has an all-zero weight matrix", i + 1)));
                }
                Ok(WeightChange {
                    k: i + 1,
                    s_init,
                    s_delta,
                    ratio: s_delta / s_init,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,S_init,S_delta,r_k\n");
        for l in &self.layers {
            writeln!(out, "{},{},{},{}", l.k, l.s_init, l.s_delta, l.ratio).expect("writing to a String");
        }
        out
    }
}

/// `r_k = Σ|W_final − W_init| / Σ|W_init|` for each weight matrix.
pub fn weight_change_ratios(init: &Mlp, final_model: &Mlp) -> Result<WeightChangeReport> {
    if init.arch() != final_model.arch() {
        return Err(shape("weight snapshots come from different architectures"));
    }
    let sums: Vec<(f64, f64)> = init
        .layers()
        .iter()
        .zip(final_model.layers())
        .map(|(a, b)| {
            let delta: f64 = a.weights.iter().zip(&b.weights).map(|(x, y)| (y - x).abs()).sum();
            (a.weight_abs_sum(), delta)
        })
        .collect();
    WeightChangeReport::from_sums(&sums)
}

/// Average of several gradient sets; used by tests and diagnostics.
pub fn mean_gradients(all: &[Gradients]) -> Option<Gradients> {
    let (first, rest) = all.split_first()?;
    let mut acc = first.clone();
    for g in rest {
        acc.accumulate(g).ok()?;
    }
    acc.scale(1.0 / all.len() as f64);
    Some(acc)
}

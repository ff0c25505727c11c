//! Supervised reference systems: MLSE with an LMS-tracked linear channel
//! estimate, and network fine-tuning on a short labeled training sequence.
//!
//! MLSE runs at symbol rate on the center sample of each symbol. An estimate
//! with `l_ch` taps models the center sample of symbol `t − D`, with
//! `D = (l_ch − 1)/2`, as `Σ_j h_j s_{t−j}`, so `D` pre- and post-cursors are
//! covered. Complex formats are handled per real component.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::chansim::{SymbolStream, PAM4_LEVELS};
use crate::error::{shape, usage, Result};
use crate::nn::Mlp;
use crate::optim::{step_in_place, OptimizerState};
use crate::pipeline::{batch_ranges, bit_errors, predict_batch, Batch, BerTrace, RunConfig};
use crate::rng::seeded;
use crate::ssl::{batch_loss_and_grads, LossConfig, LossKind};

/// Channel memory lengths compared against the network.
pub const MLSE_MEMORY_LENGTHS: [usize; 4] = [1, 3, 5, 7];
pub const DEFAULT_LMS_STEP: f64 = 0.01;
/// Passes over the training sequence in [`supervised_finetune`].
pub const FINETUNE_ITERATIONS: usize = 100;

/// Symbol-rate FIR estimate tracked by LMS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmsChannel {
    taps: Vec<f64>,
    step: f64,
}

impl LmsChannel {
    /// All-zero estimate with `l_ch` taps.
    pub fn new(l_ch: usize, step: f64) -> Result<Self> {
        Self::with_taps(vec![0.0; l_ch], step)
    }

    pub fn with_taps(taps: Vec<f64>, step: f64) -> Result<Self> {
        if taps.len() % 2 == 0 || taps.len() > 7 {
            return Err(usage(format!("channel memory must be 1, 3, 5 or 7, got {}", taps.len())));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(usage(format!("LMS step must be positive, got {step}")));
        }
        if !taps.iter().all(|h| h.is_finite()) {
            return Err(usage("channel taps must be finite"));
        }
        Ok(Self { taps, step })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn memory(&self) -> usize {
        self.taps.len()
    }

    /// Symbols between a symbol and the observation its main tap lands in.
    pub fn delay(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    fn update_in_place(&mut self, recent: &[f64], observed: f64) {
        let e = observed - dot(&self.taps, recent);
        for (h, s) in self.taps.iter_mut().zip(recent) {
            *h += self.step * e * s;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One LMS step: `h ← h + μ·(observed − h·s)·s`.
///
/// `recent` holds `s_t, s_{t−1}, …` in tap order.
pub fn lms_update(ch: &LmsChannel, recent: &[f64], observed: f64) -> Result<LmsChannel> {
    if recent.len() != ch.memory() {
        return Err(shape(format!(
            "LMS update needs {} recent symbols, got {}",
            ch.memory(),
            recent.len()
        )));
    }
    let mut next = ch.clone();
    next.update_in_place(recent, observed);
    Ok(next)
}

/// `Σ_j h_j x_{t−j}` for `j ≥ 1`, where `x` before the block comes from
/// `history` (most recent first, zero beyond its end) and inside the block
/// from the candidate symbols `path`.
fn past_contribution(taps: &[f64], levels: &[f64], path: &[u8], t: usize, history: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, h) in taps.iter().enumerate().skip(1) {
        let x = if i <= t {
            levels[path[t - i] as usize]
        } else {
            history.get(i - t - 1).copied().unwrap_or(0.0)
        };
        acc += h * x;
    }
    acc
}

fn branch_metric(observed: f64, h0: f64, level: f64, past: f64) -> f64 {
    let e = observed - (h0 * level + past);
    e * e
}

/// Viterbi sequence detection under a linear channel hypothesis.
///
/// `samples[t]` is modeled as `Σ_j h_j s_{t−j}` plus white Gaussian noise;
/// symbols before the block are the values in `history` (most recent first,
/// zero when missing). Returns one level index per sample. Ties resolve to
/// the lowest-numbered state.
pub fn mlse_detect(samples: &[f64], ch: &LmsChannel, levels: &[f64], history: &[f64]) -> Result<Vec<u8>> {
    let m = levels.len();
    if m == 0 || m > u8::MAX as usize {
        return Err(usage("alphabet must have between 1 and 255 levels"));
    }
    let taps = ch.taps();
    let l = taps.len();
    let n = samples.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if l == 1 {
        return Ok(samples
            .iter()
            .map(|&y| {
                (0..m)
                    .map(|a| branch_metric(y, taps[0], levels[a], 0.0))
                    .enumerate()
                    .fold((0, f64::INFINITY), |best, (a, d)| if d < best.1 { (a, d) } else { best })
                    .0 as u8
            })
            .collect());
    }

    // A state holds the previous l−1 symbols, newest in the lowest digit.
    let top = m.pow(l as u32 - 2);
    let num_states = top * m;
    let contrib: Vec<f64> = (0..num_states)
        .map(|state| {
            let mut digits = state;
            let mut acc = 0.0;
            for h in &taps[1..] {
                acc += h * levels[digits % m];
                digits /= m;
            }
            acc
        })
        .collect();

    let mut metric = vec![f64::INFINITY; num_states];
    let mut next = vec![f64::INFINITY; num_states];
    metric[0] = 0.0;
    // Dropped oldest digit per (time, state); the newest digit is the decision.
    let mut dropped = vec![0u8; n * num_states];
    let mut path_digits = vec![0u8; l];
    for (t, &y) in samples.iter().enumerate() {
        next.fill(f64::INFINITY);
        let row = &mut dropped[t * num_states..(t + 1) * num_states];
        for (state, &pm) in metric.iter().enumerate() {
            if pm == f64::INFINITY {
                continue;
            }
            let past = if t + 1 >= l {
                contrib[state]
            } else {
                // Early steps mix state digits with the known history.
                let mut digits = state;
                for d in path_digits.iter_mut().take(t) {
                    *d = (digits % m) as u8;
                    digits /= m;
                }
                // path_digits[k] is s_{t−1−k}; past_contribution wants s in time order.
                let ordered: Vec<u8> = path_digits[..t].iter().rev().copied().collect();
                past_contribution(taps, levels, &ordered, t, history)
            };
            let base = (state % top) * m;
            let oldest = (state / top) as u8;
            for (a, &level) in levels.iter().enumerate() {
                let candidate = pm + branch_metric(y, taps[0], level, past);
                let ns = base + a;
                if candidate < next[ns] {
                    next[ns] = candidate;
                    row[ns] = oldest;
                }
            }
        }
        std::mem::swap(&mut metric, &mut next);
    }

    let mut state = metric
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (s, &d)| if d < best.1 { (s, d) } else { best })
        .0;
    let mut out = vec![0u8; n];
    for t in (0..n).rev() {
        out[t] = (state % m) as u8;
        state = state / m + top * dropped[t * num_states + state] as usize;
    }
    Ok(out)
}

/// Brute-force maximum-likelihood detection over all `M^N` sequences.
///
/// Same model as [`mlse_detect`]; among exactly tied sequences the
/// lexicographically smallest wins, which need not be Viterbi's choice.
/// Intended for short blocks only.
pub fn exhaustive_ml(samples: &[f64], taps: &[f64], levels: &[f64], history: &[f64]) -> Vec<u8> {
    fn search(
        t: usize,
        acc: f64,
        path: &mut Vec<u8>,
        best: &mut (f64, Vec<u8>),
        samples: &[f64],
        taps: &[f64],
        levels: &[f64],
        history: &[f64],
    ) {
        if acc >= best.0 {
            return;
        }
        if t == samples.len() {
            *best = (acc, path.clone());
            return;
        }
        let past = past_contribution(taps, levels, path, t, history);
        for (a, &level) in levels.iter().enumerate() {
            path.push(a as u8);
            let m = acc + branch_metric(samples[t], taps[0], level, past);
            search(t + 1, m, path, best, samples, taps, levels, history);
            path.pop();
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    search(0, 0.0, &mut Vec::with_capacity(samples.len()), &mut best, samples, taps, levels, history);
    best.1
}

/// Settings of the MLSE baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlseConfig {
    /// Channel memory `l_ch`.
    pub memory: usize,
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_step() -> f64 {
    DEFAULT_LMS_STEP
}

/// Per-batch MLSE: detect with the current taps, record the BER, then run
/// LMS over the batch with the true symbols. Taps carry over from the first
/// stream to the second; batch boundaries match the network's.
pub fn run_mlse_baseline(
    set1: &SymbolStream,
    set2: &SymbolStream,
    mlse: &MlseConfig,
    run: &RunConfig,
) -> Result<BerTrace> {
    if set1.modulation() != set2.modulation() {
        return Err(usage("streams use different modulations"));
    }
    let modulation = set1.modulation();
    let comps = modulation.components();
    let mut channels = vec![LmsChannel::new(mlse.memory, mlse.step)?; comps];
    let mut trace = BerTrace::new(modulation.bits_per_symbol() as u64, run.smoothing_window);
    let levels = &PAM4_LEVELS[..];
    for (segment, stream) in [(1u8, set1), (2u8, set2)] {
        let n = stream.n_seq();
        let component_labels: Vec<Vec<u8>> = (0..comps)
            .map(|c| stream.labels.iter().map(|&y| modulation.level_indices(y)[c]).collect())
            .collect();
        // Previous batch decisions, most recent first, per component.
        let mut history: Vec<Vec<f64>> = vec![Vec::new(); comps];
        for range in batch_ranges(n, run.half_window, run.batch_size)? {
            let mut per_component = Vec::with_capacity(comps);
            for c in 0..comps {
                let ch = &channels[c];
                let d = ch.delay();
                // Decide past the batch end until its last symbol has been fully observed.
                let end = (range.end + 2 * d).min(n + d);
                let obs: Vec<f64> = (range.start..end).map(|t| observation(stream, t, d, c)).collect();
                let mut decisions = mlse_detect(&obs, ch, levels, &history[c])?;
                decisions.truncate(range.len());
                per_component.push(decisions);
            }
            let predicted: Vec<u8> = (0..range.len())
                .map(|k| match comps {
                    1 => per_component[0][k],
                    _ => 4 * per_component[0][k] + per_component[1][k],
                })
                .collect();
            trace.push(
                segment,
                bit_errors(&stream.labels[range.clone()], &predicted, modulation),
                range.len() as u64,
            );
            for c in 0..comps {
                history[c] = per_component[c].iter().rev().map(|&a| levels[a as usize]).take(6).collect();
                train_lms(&mut channels[c], stream, &component_labels[c], range.clone(), c);
            }
        }
    }
    Ok(trace)
}

/// Center sample of symbol `t − delay`, or zero outside the stream.
fn observation(stream: &SymbolStream, t: usize, delay: usize, component: usize) -> f64 {
    match t.checked_sub(delay) {
        Some(k) if k < stream.n_seq() => stream.center_sample(k, component),
        _ => 0.0,
    }
}

fn train_lms(ch: &mut LmsChannel, stream: &SymbolStream, levels_idx: &[u8], range: Range<usize>, c: usize) {
    let d = ch.delay();
    let l = ch.memory();
    let mut recent = vec![0.0; l];
    for t in range {
        for (j, r) in recent.iter_mut().enumerate() {
            *r = t.checked_sub(j).map_or(0.0, |i| PAM4_LEVELS[levels_idx[i] as usize]);
        }
        ch.update_in_place(&recent, observation(stream, t, d, c));
    }
}

/// Result of the training-sequence baseline.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub trace: BerTrace,
    pub final_model: Mlp,
    /// Labeled symbols used at the start of each stream.
    pub training_symbols: [usize; 2],
}

/// Training-sequence baseline.
///
/// At the start of each stream the network is trained with true labels on
/// the first `γ` of that stream's batched symbols for `iterations` passes
/// (mini-batches of `N_b`, fresh optimizer state, cross-entropy), then every
/// batch of the stream is equalized without further updates.
pub fn supervised_finetune(
    mlp: &Mlp,
    set1: &SymbolStream,
    set2: &SymbolStream,
    gamma: f64,
    iterations: usize,
    cfg: &RunConfig,
) -> Result<FinetuneOutcome> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(usage(format!("training fraction γ must lie in (0, 1], got {gamma}")));
    }
    if set1.modulation() != set2.modulation() {
        return Err(usage("streams use different modulations"));
    }
    cfg.validate()?;
    let modulation = set1.modulation();
    let loss = LossConfig::plain(LossKind::CrossEntropy);
    let mut model = mlp.clone();
    let mut trace = BerTrace::new(modulation.bits_per_symbol() as u64, cfg.smoothing_window);
    let mut training_symbols = [0; 2];
    for (k, (segment, stream)) in [(1u8, set1), (2u8, set2)].into_iter().enumerate() {
        let ranges = batch_ranges(stream.n_seq(), cfg.half_window, cfg.batch_size)?;
        let start = ranges[0].start;
        let total = ranges.len() * cfg.batch_size;
        let count = ((total as f64 * gamma).round() as usize).clamp(1, total);
        training_symbols[k] = count;
        let train: Vec<Batch> = (start..start + count)
            .step_by(cfg.batch_size)
            .map(|a| Batch::from_stream(stream, a..(a + cfg.batch_size).min(start + count), cfg.half_window))
            .collect::<Result<_>>()?;
        let mut state = OptimizerState::new(model.arch());
        let mut rng = seeded(cfg.seed);
        for _ in 0..iterations {
            for batch in &train {
                let outcome = batch_loss_and_grads(&model, batch, &loss, &mut rng)?;
                step_in_place(&mut state, &mut model, &outcome.grads, &cfg.optimizer)?;
            }
        }
        for range in ranges {
            let batch = Batch::from_stream(stream, range, cfg.half_window)?;
            let predicted = predict_batch(&model, &batch)?;
            let labels = batch.labels().expect("stream batches carry labels");
            trace.push(segment, bit_errors(labels, &predicted, modulation), batch.len() as u64);
        }
    }
    Ok(FinetuneOutcome {
        trace,
        final_model: model,
        training_symbols,
    })
}

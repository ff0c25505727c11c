//! Synthetic drifting link.
//!
//! Symbols are drawn by taking the sign of a Gaussian sequence to get bits
//! and Gray-mapping groups of bits onto amplitude levels `{−3, −1, +1, +3}`
//! (per quadrature for 16QAM). The channel holds each level for `Γ` samples
//! (rectangular pulse), convolves with a sample-rate FIR, applies the
//! memoryless polynomial `c1·x + c2·x² + c3·x³` and adds white Gaussian
//! noise. Finally the waveform is shifted to zero mean and scaled to unit RMS.
//!
//! Complex streams are stored as interleaved `I, Q` reals, so one symbol
//! occupies `2Γ` values.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::rng::{derive_seed, seeded};

pub const STREAM_FORMAT_VERSION: u32 = 1;

/// Amplitude of each PAM4 level index.
pub const PAM4_LEVELS: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];

/// Gray label of each level index: adjacent levels differ in one bit.
const GRAY_OF_LEVEL: [u8; 4] = [0b00, 0b01, 0b11, 0b10];

fn level_of_gray(bits: u8) -> u8 {
    GRAY_OF_LEVEL
        .iter()
        .position(|&g| g == bits)
        .expect("two-bit value") as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    Pam4,
    Qam16,
}

impl Modulation {
    pub fn num_classes(self) -> usize {
        match self {
            Modulation::Pam4 => 4,
            Modulation::Qam16 => 16,
        }
    }

    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Pam4 => 2,
            Modulation::Qam16 => 4,
        }
    }

    /// Real components per sample: 1 for PAM4, 2 (I and Q) for 16QAM.
    pub fn components(self) -> usize {
        match self {
            Modulation::Pam4 => 1,
            Modulation::Qam16 => 2,
        }
    }

    /// Gray bit label of a class index.
    pub fn gray_bits(self, class: u8) -> u8 {
        match self {
            Modulation::Pam4 => GRAY_OF_LEVEL[class as usize],
            Modulation::Qam16 => {
                (GRAY_OF_LEVEL[(class / 4) as usize] << 2) | GRAY_OF_LEVEL[(class % 4) as usize]
            }
        }
    }

    /// Per-component PAM4 level index of a class (`[I, Q]` for 16QAM).
    pub fn level_indices(self, class: u8) -> Vec<u8> {
        match self {
            Modulation::Pam4 => vec![class],
            Modulation::Qam16 => vec![class / 4, class % 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub modulation: Modulation,
    /// FIR taps at the sample rate, `isi_taps[0]` applied to the current sample.
    pub isi_taps: Vec<f64>,
    /// `(c1, c2, c3)` of `y = c1·x + c2·x² + c3·x³`.
    pub nl_coeffs: [f64; 3],
    pub noise_std: f64,
    /// Samples per symbol.
    #[serde(default = "default_gamma")]
    pub gamma: usize,
    /// Seed of the additive noise.
    #[serde(default)]
    pub seed: u64,
}

fn default_gamma() -> usize {
    4
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.isi_taps.is_empty() {
            return Err(usage("isi_taps must not be empty"));
        }
        if self.nl_coeffs[0] == 0.0 {
            return Err(usage("linear coefficient c1 must be nonzero"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(usage(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.gamma == 0 {
            return Err(usage("gamma must be positive"));
        }
        if !self.isi_taps.iter().chain(&self.nl_coeffs).all(|x| x.is_finite()) {
            return Err(usage("channel coefficients must be finite"));
        }
        Ok(())
    }

    /// Identity FIR, linear, noiseless.
    pub fn ideal(modulation: Modulation) -> Self {
        Self {
            modulation,
            isi_taps: vec![1.0],
            nl_coeffs: [1.0, 0.0, 0.0],
            noise_std: 0.0,
            gamma: default_gamma(),
            seed: 0,
        }
    }

    /// Reference link before the drift: mild bandwidth limitation and a weak
    /// asymmetric nonlinearity.
    pub fn default_set1() -> Self {
        Self {
            modulation: Modulation::Pam4,
            isi_taps: vec![0.2, 1.0, 0.3],
            nl_coeffs: [1.0, 0.02, -0.005],
            noise_std: 0.35,
            gamma: default_gamma(),
            seed: 0,
        }
    }

    /// The same link after the drift: heavier ISI and a stronger nonlinearity.
    pub fn default_set2() -> Self {
        Self {
            isi_taps: vec![0.25, 1.0, 0.35],
            nl_coeffs: [1.0, 0.04, -0.012],
            ..Self::default_set1()
        }
    }
}

/// Transmitted symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct Symbols {
    /// Class index per symbol.
    pub labels: Vec<u8>,
    /// Level amplitudes, `components` values per symbol.
    pub amplitudes: Vec<f64>,
}

/// Draw `n` symbols: `sign(N(0,1))` bits, Gray-mapped onto amplitude levels.
pub fn generate_symbols(n: usize, modulation: Modulation, seed: u64) -> Result<Symbols> {
    if n == 0 {
        return Err(usage("symbol count must be positive"));
    }
    let mut rng = seeded(seed);
    let mut bit = || -> u8 {
        let g: f64 = StandardNormal.sample(&mut rng);
        (g > 0.0) as u8
    };
    let mut pair = || (bit() << 1) | bit();
    let mut labels = Vec::with_capacity(n);
    let mut amplitudes = Vec::with_capacity(n * modulation.components());
    for _ in 0..n {
        match modulation {
            Modulation::Pam4 => {
                let level = level_of_gray(pair());
                labels.push(level);
                amplitudes.push(PAM4_LEVELS[level as usize]);
            }
            Modulation::Qam16 => {
                let i = level_of_gray(pair());
                let q = level_of_gray(pair());
                labels.push(4 * i + q);
                amplitudes.push(PAM4_LEVELS[i as usize]);
                amplitudes.push(PAM4_LEVELS[q as usize]);
            }
        }
    }
    Ok(Symbols { labels, amplitudes })
}

/// Hold, filter, distort, add noise. Output has `Γ·components` values per symbol.
pub fn apply_channel(amplitudes: &[f64], spec: &ChannelSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let comps = spec.modulation.components();
    if amplitudes.len() % comps != 0 {
        return Err(usage("amplitude count is not a multiple of the component count"));
    }
    let mut rng = seeded(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
    let per_component: Vec<Vec<f64>> = (0..comps)
        .map(|c| {
            let held: Vec<f64> = amplitudes
                .iter()
                .skip(c)
                .step_by(comps)
                .flat_map(|&a| std::iter::repeat(a).take(spec.gamma))
                .collect();
            let mut filtered = convolve(&held, &spec.isi_taps);
            filtered.truncate(held.len());
            filtered.iter().map(|&x| nonlinearity(x, &spec.nl_coeffs)).collect()
        })
        .collect();
    let n = per_component[0].len();
    let mut out = Vec::with_capacity(n * comps);
    for k in 0..n {
        for comp in &per_component {
            let eta = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            out.push(comp[k] + eta);
        }
    }
    Ok(out)
}

/// Full linear convolution, length `x.len() + h.len() − 1`.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let mut y = vec![0.0; x.len() + h.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        for (j, &hj) in h.iter().enumerate() {
            y[i + j] += xi * hj;
        }
    }
    y
}

fn nonlinearity(x: f64, c: &[f64; 3]) -> f64 {
    c[0] * x + c[1] * x * x + c[2] * x * x * x
}

/// Subtract the mean and divide by the RMS of the residual.
pub fn normalize(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(usage("cannot normalize an empty sequence"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let centered: Vec<f64> = samples.iter().map(|x| x - mean).collect();
    let rms = (centered.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    if !(rms > 0.0) || !rms.is_finite() {
        return Err(Error::Degenerate("sequence has zero variance".into()));
    }
    Ok(centered.into_iter().map(|x| x / rms).collect())
}

/// Received, normalized waveform plus the transmitted labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolStream {
    pub labels: Vec<u8>,
    pub samples: Vec<f64>,
    pub spec: ChannelSpec,
    pub normalized: bool,
}

impl SymbolStream {
    pub fn n_seq(&self) -> usize {
        self.labels.len()
    }

    pub fn modulation(&self) -> Modulation {
        self.spec.modulation
    }

    /// Real values per symbol.
    pub fn symbol_width(&self) -> usize {
        self.spec.gamma * self.spec.modulation.components()
    }

    /// All values belonging to symbol `i`.
    pub fn symbol_samples(&self, i: usize) -> &[f64] {
        let w = self.symbol_width();
        &self.samples[i * w..(i + 1) * w]
    }

    /// Middle sample of symbol `i` for one real component.
    pub fn center_sample(&self, i: usize, component: usize) -> f64 {
        let comps = self.spec.modulation.components();
        self.samples[(i * self.spec.gamma + self.spec.gamma / 2) * comps + component]
    }
}

/// Generate, transmit and normalize `n` symbols.
pub fn simulate_stream(n: usize, spec: &ChannelSpec, symbol_seed: u64) -> Result<SymbolStream> {
    let symbols = generate_symbols(n, spec.modulation, symbol_seed)?;
    let raw = apply_channel(&symbols.amplitudes, spec)?;
    Ok(SymbolStream {
        labels: symbols.labels,
        samples: normalize(&raw)?,
        spec: spec.clone(),
        normalized: true,
    })
}

/// Two independently drawn and independently normalized segments.
pub fn make_drift_scenario(
    spec1: &ChannelSpec,
    spec2: &ChannelSpec,
    n1: usize,
    n2: usize,
    seed: u64,
) -> Result<(SymbolStream, SymbolStream)> {
    if spec1.modulation != spec2.modulation || spec1.gamma != spec2.gamma {
        return Err(usage("both segments must share modulation and gamma"));
    }
    let segment = |k: u64, spec: &ChannelSpec, n: usize| {
        let spec = ChannelSpec {
            seed: derive_seed(seed, &[k, 1, spec.seed]),
            ..spec.clone()
        };
        simulate_stream(n, &spec, derive_seed(seed, &[k, 0]))
    };
    Ok((segment(1, spec1, n1)?, segment(2, spec2, n2)?))
}

/// JSON sidecar describing a stream on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSidecar {
    pub format_version: u32,
    pub n_seq: usize,
    pub gamma: usize,
    pub modulation: Modulation,
    pub samples_file: String,
    pub labels_file: String,
    pub channel_spec: ChannelSpec,
    pub normalization_applied: bool,
}

/// Write `<name>.f64` (little-endian samples), `<name>.labels.u8` and
/// `<name>.json` into `dir`. Returns the sidecar path.
pub fn write_stream(dir: &Path, name: &str, stream: &SymbolStream) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let samples_file = format!("{name}.f64");
    let labels_file = format!("{name}.labels.u8");
    let bytes: Vec<u8> = stream.samples.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(dir.join(&samples_file), bytes)?;
    fs::write(dir.join(&labels_file), &stream.labels)?;
    let sidecar = StreamSidecar {
        format_version: STREAM_FORMAT_VERSION,
        n_seq: stream.n_seq(),
        gamma: stream.spec.gamma,
        modulation: stream.spec.modulation,
        samples_file,
        labels_file,
        channel_spec: stream.spec.clone(),
        normalization_applied: stream.normalized,
    };
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(path)
}

/// Read a stream back from its sidecar.
pub fn read_stream(sidecar_path: &Path) -> Result<SymbolStream> {
    let sidecar: StreamSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path)?)?;
    if sidecar.format_version != STREAM_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported stream format_version {}",
            sidecar.format_version
        )));
    }
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&sidecar.samples_file))?;
    let labels = fs::read(dir.join(&sidecar.labels_file))?;
    let width = sidecar.gamma * sidecar.modulation.components();
    if bytes.len() != sidecar.n_seq * width * 8 || labels.len() != sidecar.n_seq {
        return Err(Error::Format(format!(
            "{}: file sizes do not match n_seq = {}",
            sidecar_path.display(),
            sidecar.n_seq
        )));
    }
    let m = sidecar.modulation.num_classes() as u8;
    if labels.iter().any(|&l| l >= m) {
        return Err(Error::Format("label out of range".into()));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(SymbolStream {
        labels,
        samples,
        spec: sidecar.channel_spec,
        normalized: sidecar.normalization_applied,
    })
}

/// Symbols per class, for diagnostics.
pub fn class_histogram(labels: &[u8], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for &l in labels {
        h[l as usize] += 1;
    }
    h
}

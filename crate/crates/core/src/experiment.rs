//! End-to-end runs: scenario generation, offline training and the method
//! comparison behind the `compare` command.
//!
//! One [`ExperimentConfig`] drives every stage so a single JSON file
//! describes a run completely.

use serde::{Deserialize, Serialize};

use crate::baselines::{run_mlse_baseline, supervised_finetune, MlseConfig, DEFAULT_LMS_STEP, FINETUNE_ITERATIONS};
use crate::chansim::{make_drift_scenario, ChannelSpec, SymbolStream};
use crate::error::{usage, Result};
use crate::nn::{Architecture, Mlp};
use crate::optim::OptimizerConfig;
use crate::parallel;
use crate::pipeline::{
    check_fits, evaluate, interior, run_online, train_offline, BerTrace, OfflineReport, RunConfig, TraceSummary,
    WeightChangeReport, weight_change_ratios,
};
use crate::rng::derive_seed;
use crate::ssl::{LossConfig, LossKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub set1: ChannelSpec,
    pub set2: ChannelSpec,
    /// Symbols per set.
    pub n_seq: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    /// The default PAM4 drift at desk scale.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            set1: ChannelSpec::default_set1(),
            set2: ChannelSpec::default_set2(),
            n_seq: 1 << 17,
            seed,
        }
    }

    pub fn generate(&self) -> Result<(SymbolStream, SymbolStream)> {
        make_drift_scenario(&self.set1, &self.set2, self.n_seq, self.n_seq, self.seed)
    }
}

/// Hidden-layer shape; the input and output sizes follow from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(rename = "R")]
    pub hidden_width: usize,
    #[serde(rename = "l_NN")]
    pub num_layers: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_width: 10,
            num_layers: 6,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn architecture(&self, stream: &SymbolStream, half_window: usize) -> Result<Architecture> {
        Architecture::new(
            stream.symbol_width() * (2 * half_window + 1),
            self.hidden_width,
            self.num_layers,
            stream.modulation().num_classes(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    /// Leading share of set1 used for training.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "OptimizerConfig::offline_default")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_fraction() -> f64 {
    0.25
}

impl OfflineConfig {
    fn run_config(&self, half_window: usize) -> RunConfig {
        RunConfig {
            optimizer: self.optimizer.clone(),
            seed: self.seed,
            ..RunConfig::offline_default(half_window, self.batch_size, self.epochs)
        }
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub network: NetworkConfig,
    pub offline: OfflineConfig,
    pub online: RunConfig,
    /// Extra pseudo-label losses to run next to `online.loss`.
    #[serde(default)]
    pub loss_variants: Vec<LossConfig>,
    #[serde(default = "default_memories")]
    pub mlse_memories: Vec<usize>,
    #[serde(default = "default_step")]
    pub lms_step: f64,
    /// Training-sequence fractions for the fine-tuning baseline.
    #[serde(default)]
    pub gammas: Vec<f64>,
    #[serde(default = "default_iterations")]
    pub finetune_iterations: usize,
    /// Online batch sizes for the batch-size study.
    #[serde(default)]
    pub batch_sizes: Vec<usize>,
}

fn default_memories() -> Vec<usize> {
    crate::baselines::MLSE_MEMORY_LENGTHS.to_vec()
}
fn default_step() -> f64 {
    DEFAULT_LMS_STEP
}
fn default_iterations() -> usize {
    FINETUNE_ITERATIONS
}

impl ExperimentConfig {
    /// Desk-scale defaults: 2¹⁷ symbols per set, `N_b = 2048`, Aug-VAT with a
    /// self-training variant alongside.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            scenario: ScenarioConfig::desk_scale(seed),
            network: NetworkConfig::default(),
            offline: OfflineConfig {
                fraction: default_fraction(),
                epochs: 60,
                batch_size: 256,
                optimizer: OptimizerConfig::offline_default(),
                seed,
            },
            online: RunConfig {
                seed,
                ..RunConfig::online_default(5, 2048)
            },
            loss_variants: vec![LossConfig::plain(LossKind::SelfTraining)],
            mlse_memories: default_memories(),
            lms_step: DEFAULT_LMS_STEP,
            gammas: vec![1.0 / 128.0, 1.0 / 32.0, 1.0 / 8.0],
            finetune_iterations: FINETUNE_ITERATIONS,
            batch_sizes: vec![32, 512, 8192],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario.n_seq == 0 {
            return Err(usage("scenario.n_seq must be positive"));
        }
        self.scenario.set1.validate()?;
        self.scenario.set2.validate()?;
        self.online.validate()?;
        self.offline.run_config(self.online.half_window).validate()?;
        for l in &self.loss_variants {
            l.validate()?;
        }
        for &m in &self.mlse_memories {
            MlseConfig { memory: m, step: self.lms_step }.channel()?;
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && **g <= 1.0)) {
            return Err(usage(format!("gammas must lie in (0, 1], got {g}")));
        }
        if self.batch_sizes.contains(&0) {
            return Err(usage("batch_sizes must be positive"));
        }
        Ok(())
    }
}

impl MlseConfig {
    fn channel(&self) -> Result<crate::baselines::LmsChannel> {
        crate::baselines::LmsChannel::new(self.memory, self.step)
    }
}

#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    pub model: Mlp,
    pub report: OfflineReport,
    /// BER on the set1 interior symbols not used for training.
    pub held_out_ber: f64,
}

/// Fresh network trained on the leading share of set1.
pub fn offline_stage(cfg: &ExperimentConfig, set1: &SymbolStream) -> Result<OfflineOutcome> {
    let half_window = cfg.online.half_window;
    let arch = cfg.network.architecture(set1, half_window)?;
    let init = Mlp::init(arch, derive_seed(cfg.network.init_seed, &[cfg.scenario.seed]))?;
    let (model, report) = train_offline(&init, set1, cfg.offline.fraction, &cfg.offline.run_config(half_window))?;
    let held_out = report.train_range.end..interior(set1.n_seq(), half_window).end;
    let held_out_ber = if held_out.is_empty() {
        0.0
    } else {
        let (errors, bits) = evaluate(&model, set1, held_out, half_window)?;
        errors as f64 / bits as f64
    };
    Ok(OfflineOutcome {
        model,
        report,
        held_out_ber,
    })
}

/// One compared system.
#[derive(Debug, Clone)]
pub struct MethodResult {
    /// File-name-safe identifier, unique within a report.
    pub name: String,
    pub summary: TraceSummary,
    pub trace: BerTrace,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub methods: Vec<MethodResult>,
    /// Weight movement of the main AdaNN run.
    pub weights: WeightChangeReport,
}

impl CompareReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// One row per method.
    pub fn table_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
        let mut out = String::from(
            "method,loss_kind,adaptive,batches,final_ber_set1,final_ber_set2,overall_ber_set2,convergence_batches,converged\n",
        );
        for m in &self.methods {
            let s = &m.summary;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                m.name,
                s.loss_kind,
                s.adaptive,
                s.batches,
                opt(s.final_ber_set1),
                opt(s.final_ber_set2),
                opt(s.overall_ber_set2),
                s.convergence_batches.map_or_else(|| "DNC".to_string(), |c| c.to_string()),
                s.converged
            ));
        }
        out
    }
}

/// Identifier for a γ value, e.g. `1_128` for 1/128.
pub fn gamma_label(gamma: f64) -> String {
    let inverse = 1.0 / gamma;
    if (inverse - inverse.round()).abs() < 1e-9 {
        format!("1_{}", inverse.round() as u64)
    } else {
        format!("{gamma}").replace('.', "p")
    }
}

/// Filename-safe form of a method name: runs of other characters become one `_`.
pub fn slug(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

enum Job {
    Adann(String, RunConfig, bool),
    Mlse(usize),
    Finetune(f64),
}

/// Run every configured method on the same data and model.
///
/// Methods are independent and may run concurrently; results come back in
/// a fixed order.
pub fn compare(cfg: &ExperimentConfig, model: &Mlp, set1: &SymbolStream, set2: &SymbolStream) -> Result<CompareReport> {
    cfg.validate()?;
    check_fits(model, set1, cfg.online.half_window)?;
    check_fits(model, set2, cfg.online.half_window)?;
    let threshold = cfg.online.ber_threshold;
    let mut jobs = vec![
        Job::Adann("adann".into(), cfg.online.clone(), true),
        Job::Adann(
            "non_adaptive".into(),
            RunConfig {
                adaptive: false,
                ..cfg.online.clone()
            },
            false,
        ),
    ];
    for loss in &cfg.loss_variants {
        jobs.push(Job::Adann(
            slug(&format!("adann_{}", loss.label())),
            RunConfig {
                loss: loss.clone(),
                ..cfg.online.clone()
            },
            false,
        ));
    }
    jobs.extend(cfg.mlse_memories.iter().map(|&m| Job::Mlse(m)));
    jobs.extend(cfg.gammas.iter().map(|&g| Job::Finetune(g)));
    for &nb in &cfg.batch_sizes {
        jobs.push(Job::Adann(
            format!("adann_nb{nb}"),
            RunConfig {
                batch_size: nb,
                ..cfg.online.clone()
            },
            false,
        ));
    }

    let results = parallel::map_indexed(jobs.len(), |i| -> Result<(MethodResult, Option<WeightChangeReport>)> {
        match &jobs[i] {
            Job::Adann(name, run, keep_weights) => {
                let outcome = run_online(model, set1, set2, run)?;
                let summary = TraceSummary::from_trace(name, run.loss.loss.name(), run.adaptive, &outcome.trace, threshold);
                let weights = if *keep_weights {
                    Some(weight_change_ratios(&outcome.initial, &outcome.final_model)?)
                } else {
                    None
                };
                Ok((
                    MethodResult {
                        name: name.clone(),
                        summary,
                        trace: outcome.trace,
                    },
                    weights,
                ))
            }
            Job::Mlse(memory) => {
                let mlse = MlseConfig {
                    memory: *memory,
                    step: cfg.lms_step,
                };
                let trace = run_mlse_baseline(set1, set2, &mlse, &cfg.online)?;
                let name = format!("mlse_l{memory}");
                let summary = TraceSummary::from_trace(&name, "mlse", true, &trace, threshold);
                Ok((MethodResult { name, summary, trace }, None))
            }
            Job::Finetune(gamma) => {
                let out = supervised_finetune(model, set1, set2, *gamma, cfg.finetune_iterations, &cfg.online)?;
                let name = format!("finetune_gamma_{}", gamma_label(*gamma));
                let summary = TraceSummary::from_trace(&name, LossKind::CrossEntropy.name(), false, &out.trace, threshold);
                Ok((
                    MethodResult {
                        name,
                        summary,
                        trace: out.trace,
                    },
                    None,
                ))
            }
        }
    });

    let mut methods = Vec::with_capacity(results.len());
    let mut weights = None;
    for r in results {
        let (method, w) = r?;
        weights = weights.or(w);
        methods.push(method);
    }
    Ok(CompareReport {
        methods,
        weights: weights.expect("the main adaptive run is always scheduled"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk_scale(3);
        cfg.scenario.n_seq = 6_000;
        cfg.offline.epochs = 2;
        cfg.online.batch_size = 500;
        cfg.gammas = vec![0.25];
        cfg.mlse_memories = vec![1, 3];
        cfg.batch_sizes = vec![1000];
        cfg.loss_variants = vec![LossConfig::plain(LossKind::SelfTraining)];
        cfg.finetune_iterations = 2;
        cfg
    }

    #[test]
    fn compare_produces_one_row_per_method() {
        let cfg = small();
        let (s1, s2) = cfg.scenario.generate().unwrap();
        let offline = offline_stage(&cfg, &s1).unwrap();
        let report = compare(&cfg, &offline.model, &s1, &s2).unwrap();
        let names: Vec<&str> = report.methods.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "adann",
                "non_adaptive",
                "adann_self_training",
                "mlse_l1",
                "mlse_l3",
                "finetune_gamma_1_4",
                "adann_nb1000"
            ]
        );
        assert_eq!(report.table_csv().lines().count(), 8);
        let boundaries: Vec<Vec<u64>> = report.methods[..6]
            .iter()
            .map(|m| m.trace.rows.iter().map(|r| r.symbols).collect())
            .collect();
        assert!(boundaries.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(report.weights.layers.len(), 5);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = small();
        cfg.gammas = vec![0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.mlse_memories = vec![4];
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.batch_sizes = vec![0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gamma_labels() {
        assert_eq!(gamma_label(1.0 / 128.0), "1_128");
        assert_eq!(gamma_label(1.0), "1_1");
        assert_eq!(gamma_label(0.3), "0p3");
        assert_eq!(slug("adann_aug_vat(sigma=0.15,epsilon=0.3)"), "adann_aug_vat_sigma_0_15_epsilon_0_3");
        assert_eq!(slug("adann_self_training"), "adann_self_training");
    }
}

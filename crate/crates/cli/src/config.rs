//! Loading, overriding and hashing the run config.

use std::fs;
use std::path::Path;

use adann::experiment::ExperimentConfig;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Parse a config file. Errors name the offending field and its position.
pub fn load(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text).map_err(|msg| CliError::Config(format!("{}: {msg}", path.display())))
}

pub fn parse(text: &str) -> Result<ExperimentConfig, String> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        if field == "." {
            e.into_inner().to_string()
        } else {
            format!("at `{field}`: {}", e.into_inner())
        }
    })
}

/// Apply `--seed`: every stage that draws randomness follows it.
pub fn apply_seed(cfg: &mut ExperimentConfig, seed: Option<u64>) {
    if let Some(seed) = seed {
        cfg.scenario.seed = seed;
        cfg.offline.seed = seed;
        cfg.online.seed = seed;
    }
}

pub fn validate(cfg: &ExperimentConfig) -> CliResult<()> {
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))
}

/// Key-sorted compact JSON; equal configs give equal text.
pub fn canonical_json(cfg: &ExperimentConfig) -> String {
    let value = serde_json::to_value(cfg).expect("config serializes");
    serde_json::to_string(&value).expect("value serializes")
}

/// Lower-case hex SHA-256 of [`canonical_json`].
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(canonical_json(cfg).as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_desk_config_is_the_library_default() {
        let text = include_str!("../../../configs/desk_scale.json");
        assert_eq!(parse(text).unwrap(), ExperimentConfig::desk_scale(0));
        parse(include_str!("../../../configs/smoke.json")).unwrap().validate().unwrap();
    }

    #[test]
    fn hash_follows_content_not_formatting() {
        let cfg = ExperimentConfig::desk_scale(1);
        let pretty = serde_json::to_string_pretty(&cfg).unwrap();
        let reparsed = parse(&pretty).unwrap();
        assert_eq!(config_hash(&reparsed), config_hash(&cfg));
        let mut other = cfg.clone();
        other.online.batch_size += 1;
        assert_ne!(config_hash(&other), config_hash(&cfg));
        assert_eq!(config_hash(&cfg).len(), 64);
    }

    #[test]
    fn missing_field_is_named() {
        let mut v = serde_json::to_value(ExperimentConfig::desk_scale(0)).unwrap();
        v["scenario"].as_object_mut().unwrap().remove("n_seq");
        let err = parse(&serde_json::to_string_pretty(&v).unwrap()).unwrap_err();
        assert!(err.contains("n_seq"), "{err}");
        assert!(err.contains("scenario"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::desk_scale(0)).unwrap();
        v["online"]["learning_rate"] = 0.1.into();
        let err = parse(&v.to_string()).unwrap_err();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let mut cfg = ExperimentConfig::desk_scale(0);
        apply_seed(&mut cfg, Some(9));
        assert_eq!((cfg.scenario.seed, cfg.offline.seed, cfg.online.seed), (9, 9, 9));
    }
}

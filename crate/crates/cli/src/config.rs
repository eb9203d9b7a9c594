use std::path::Path;

use attconv::attention::MatchMethod;
use attconv::{ContextMode, ModelConfig, SelfMode, TrainConfig, Variant};
use serde::Deserialize;

use crate::CliError;

/// Environment fallback for `--seed`.
pub const SEED_ENV: &str = "ATTCONV_SEED";

/// Flat JSON config with the model and training field names. Everything is
/// optional here; required fields are checked when building the configs.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ConfigFile {
    pub variant: Option<Variant>,
    pub context_mode: Option<ContextMode>,
    pub d: Option<usize>,
    pub num_classes: Option<usize>,
    pub match_method: Option<MatchMethod>,
    pub self_mode: Option<SelfMode>,
    pub seed: Option<u64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub adagrad_epsilon: Option<f64>,
    pub eval_every: Option<usize>,
    pub fine_tune_embeddings: Option<bool>,
    /// Accepted only as 3.
    pub filter_width: Option<usize>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        if let Some(w) = cfg.filter_width {
            if w != 3 {
                return Err(CliError::Config(format!("filter-width is fixed at 3, got {w}")));
            }
        }
        Ok(cfg)
    }

    /// `num_classes` fills in a missing `num-classes`.
    pub fn model_config(&self, num_classes: Option<usize>, seed: u64) -> Result<ModelConfig, CliError> {
        let variant = self
            .variant
            .ok_or_else(|| CliError::Config("config is missing \"variant\"".into()))?;
        let context_mode = self
            .context_mode
            .ok_or_else(|| CliError::Config("config is missing \"context-mode\"".into()))?;
        let d = self
            .d
            .ok_or_else(|| CliError::Config("config is missing \"d\"".into()))?;
        let num_classes = match (self.num_classes, num_classes) {
            (Some(k), Some(data)) if k != data => {
                return Err(CliError::Config(format!(
                    "config num-classes is {k} but the training data has {data} labels"
                )))
            }
            (Some(k), _) | (None, Some(k)) => k,
            (None, None) => return Err(CliError::Config("config is missing \"num-classes\"".into())),
        };
        let cfg = ModelConfig {
            variant,
            context_mode,
            d,
            num_classes,
            match_method: self.match_method.unwrap_or_default(),
            self_mode: self.self_mode.unwrap_or_default(),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            adagrad_epsilon: self.adagrad_epsilon.unwrap_or(d.adagrad_epsilon),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
            fine_tune_embeddings: self.fine_tune_embeddings.unwrap_or(d.fine_tune_embeddings),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `--seed`, then `ATTCONV_SEED`, then the config file, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            return v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")));
        }
        Ok(self.seed.unwrap_or(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ConfigFile, serde_json::Error> {
        serde_json::from_str(s)
    }

    #[test]
    fn full_config() {
        let c = parse(
            r#"{"variant":"advanced","context-mode":"multi-wise","d":8,"num-classes":3,
                "match-method":"bilinear","self-mode":"exclude-self","seed":4,
                "learning-rate":0.05,"batch-size":10,"epochs":3,"adagrad-epsilon":1e-6,
                "eval-every":2,"filter-width":3}"#,
        )
        .unwrap();
        let m = c.model_config(None, 4).unwrap();
        assert_eq!(m.variant, Variant::Advanced);
        assert_eq!(m.match_method, MatchMethod::Bilinear);
        let t = c.train_config().unwrap();
        assert_eq!((t.batch_size, t.epochs, t.eval_every), (10, 3, 2));
    }

    #[test]
    fn defaults_and_inference() {
        let c = parse(r#"{"variant":"light","context-mode":"intra","d":4}"#).unwrap();
        assert_eq!(c.model_config(Some(2), 0).unwrap().num_classes, 2);
        assert!(c.model_config(None, 0).is_err());
        let t = c.train_config().unwrap();
        assert_eq!(t, TrainConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(parse(r#"{"varient":"light"}"#).is_err());
        assert!(parse(r#"{"variant":"heavy"}"#).is_err());
        let c = parse(r#"{"variant":"light","context-mode":"intra","d":4,"num-classes":3}"#).unwrap();
        assert!(c.model_config(Some(2), 0).is_err());
        let c = parse(r#"{"learning-rate":-1}"#).unwrap();
        assert!(c.train_config().is_err());
    }
}

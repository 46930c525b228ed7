//! Plain-text key-value configuration files.
//!
//! Schema: one `key = value` pair per line; `#` starts a comment; blank
//! lines are ignored; keys are snake_case. Model files carry a `model` key
//! naming the variant plus its hyperparameters; training files carry the
//! optimizer block. Both may live in the same file.
//!
//! ```text
//! model = temporal_cnn
//! nb_conv_layers = 3
//! nb_conv_units = 128
//! nb_fc_units = 256
//! filter_size = 5
//! dropout = 0.2
//!
//! optimizer = adam
//! learning_rate = 0.001
//! weight_decay = 1e-6
//! batch_size = 128
//! max_epochs = 200
//! loss = cross_entropy
//! early_stopping = on
//! patience = 10
//! restore_best = true
//! lr_plateau = off
//! seed = 0
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::models::{
    InceptionTimeConfig, McdcnnConfig, ModelConfig, ModelVariant, RnnConfig, TemporalCnnConfig,
    TimeCnnConfig, TransformerConfig,
};
use crate::training::{
    EarlyStoppingConfig, LossKind, OptimizerKind, PlateauConfig, TrainingConfig,
};

/// Ordered key-value pairs from one config source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn new() -> Self {
        KvConfig::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::DataFormat {
                path: "<config>".into(),
                row: i + 1,
                message: format!("expected 'key = value', found '{raw}'"),
            })?;
            entries.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(KvConfig { entries })
    }

    pub fn parse_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        if let Some(entry) = self.entries.iter_mut().find(|(k, _)| k == key) {
            entry.1 = value.to_string();
        } else {
            self.entries.push((key.to_string(), value.to_string()));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("key '{key}': '{v}' is not a number")))
            })
            .transpose()
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("key '{key}': '{v}' is not a non-negative integer")))
            })
            .transpose()
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| Error::Config(format!("key '{key}': '{v}' is not a non-negative integer")))
            })
            .transpose()
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                other => Err(Error::Config(format!("key '{key}': '{other}' is not a boolean"))),
            })
            .transpose()
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        self.get_f64(key)?
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        self.get_usize(key)?
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

// ---- model configs ------------------------------------------------------------

pub fn model_config_to_kv(cfg: &ModelConfig) -> KvConfig {
    let mut kv = KvConfig::new();
    kv.set("model", cfg.variant().name());
    match cfg {
        ModelConfig::TemporalCnn(c) => {
            kv.set("nb_conv_layers", c.nb_conv_layers);
            kv.set("nb_conv_units", c.nb_conv_units);
            kv.set("nb_fc_units", c.nb_fc_units);
            kv.set("filter_size", c.filter_size);
            kv.set("dropout", c.dropout);
        }
        ModelConfig::Mcdcnn(c) => kv.set("dropout", c.dropout),
        ModelConfig::TimeCnn(c) => kv.set("dropout", c.dropout),
        ModelConfig::Rnn(c) => {
            kv.set("layers", c.layers);
            kv.set("hidden", c.hidden);
            kv.set("fc_units", c.fc_units);
            kv.set("dropout", c.dropout);
        }
        ModelConfig::InceptionTime(c) => {
            kv.set("modules", c.modules);
            kv.set("filters", c.filters);
            kv.set("dropout", c.dropout);
        }
        ModelConfig::Transformer(c) => {
            kv.set("heads", c.heads);
            kv.set("encoder_layers", c.encoder_layers);
            kv.set("d_model", c.d_model);
            kv.set("d_inner", c.d_inner);
            kv.set("dropout", c.dropout);
        }
    }
    kv
}

pub fn model_config_from_kv(kv: &KvConfig) -> Result<ModelConfig> {
    let variant = ModelVariant::from_name(kv.require("model")?)?;
    let dropout = kv.require_f64("dropout")?;
    let cfg = match variant {
        ModelVariant::TemporalCnn => ModelConfig::TemporalCnn(TemporalCnnConfig {
            nb_conv_layers: kv.require_usize("nb_conv_layers")?,
            nb_conv_units: kv.require_usize("nb_conv_units")?,
            nb_fc_units: kv.require_usize("nb_fc_units")?,
            filter_size: kv.require_usize("filter_size")?,
            dropout,
        }),
        ModelVariant::Mcdcnn => ModelConfig::Mcdcnn(McdcnnConfig { dropout }),
        ModelVariant::TimeCnn => ModelConfig::TimeCnn(TimeCnnConfig { dropout }),
        ModelVariant::Rnn => ModelConfig::Rnn(RnnConfig {
            layers: kv.require_usize("layers")?,
            hidden: kv.require_usize("hidden")?,
            fc_units: kv.require_usize("fc_units")?,
            dropout,
        }),
        ModelVariant::InceptionTime => ModelConfig::InceptionTime(InceptionTimeConfig {
            modules: kv.require_usize("modules")?,
            filters: kv.require_usize("filters")?,
            dropout,
        }),
        ModelVariant::Transformer => ModelConfig::Transformer(TransformerConfig {
            heads: kv.require_usize("heads")?,
            encoder_layers: kv.require_usize("encoder_layers")?,
            d_model: kv.require_usize("d_model")?,
            d_inner: kv.require_usize("d_inner")?,
            dropout,
        }),
    };
    cfg.validate()?;
    Ok(cfg)
}

// ---- training configs ------------------------------------------------------------

pub fn training_config_to_kv(cfg: &TrainingConfig) -> KvConfig {
    let mut kv = KvConfig::new();
    kv.set("optimizer", cfg.optimizer.name());
    kv.set("learning_rate", cfg.learning_rate);
    kv.set("weight_decay", cfg.weight_decay);
    kv.set("batch_size", cfg.batch_size);
    kv.set("max_epochs", cfg.max_epochs);
    kv.set("loss", cfg.loss.name());
    match &cfg.early_stopping {
        Some(es) => {
            kv.set("early_stopping", "on");
            kv.set("patience", es.patience);
            kv.set("restore_best", es.restore_best);
        }
        None => kv.set("early_stopping", "off"),
    }
    match &cfg.lr_plateau {
        Some(p) => {
            kv.set("lr_plateau", "on");
            kv.set("plateau_factor", p.factor);
            kv.set("plateau_patience", p.patience_epochs);
            kv.set("plateau_min_lr", p.min_lr);
        }
        None => kv.set("lr_plateau", "off"),
    }
    kv.set("seed", cfg.seed);
    kv
}

/// Read training settings; absent keys fall back to the defaults of
/// [`TrainingConfig::default`].
pub fn training_config_from_kv(kv: &KvConfig) -> Result<TrainingConfig> {
    let defaults = TrainingConfig::default();
    let early_stopping = match kv.get_bool("early_stopping")? {
        Some(false) => None,
        Some(true) | None => Some(EarlyStoppingConfig {
            patience: kv.get_usize("patience")?.unwrap_or(10),
            restore_best: kv.get_bool("restore_best")?.unwrap_or(true),
        }),
    };
    let lr_plateau = match kv.get_bool("lr_plateau")? {
        Some(true) => Some(PlateauConfig {
            factor: kv.get_f64("plateau_factor")?.unwrap_or(0.5),
            patience_epochs: kv.get_usize("plateau_patience")?.unwrap_or(50),
            min_lr: kv.get_f64("plateau_min_lr")?.unwrap_or(1e-4),
        }),
        Some(false) | None => None,
    };
    let cfg = TrainingConfig {
        optimizer: kv
            .get("optimizer")
            .map(OptimizerKind::from_name)
            .transpose()?
            .unwrap_or(defaults.optimizer),
        learning_rate: kv.get_f64("learning_rate")?.unwrap_or(defaults.learning_rate),
        weight_decay: kv.get_f64("weight_decay")?.unwrap_or(defaults.weight_decay),
        batch_size: kv.get_usize("batch_size")?.unwrap_or(defaults.batch_size),
        max_epochs: kv.get_usize("max_epochs")?.unwrap_or(defaults.max_epochs),
        early_stopping,
        lr_plateau,
        loss: kv
            .get("loss")
            .map(LossKind::from_name)
            .transpose()?
            .unwrap_or(defaults.loss),
        seed: kv.get_u64("seed")?.unwrap_or(defaults.seed),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_reports_line_numbers() {
        let err = KvConfig::parse("a = 1\nbroken line\n").unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let kv = KvConfig::parse("# header\n\nmodel = rnn # trailing\n").unwrap();
        assert_eq!(kv.get("model"), Some("rnn"));
    }

    #[test]
    fn model_config_round_trips() {
        let configs = vec![
            ModelConfig::TemporalCnn(TemporalCnnConfig {
                nb_conv_layers: 3,
                nb_conv_units: 128,
                nb_fc_units: 256,
                filter_size: 5,
                dropout: 0.2,
            }),
            ModelConfig::Mcdcnn(McdcnnConfig { dropout: 0.182 }),
            ModelConfig::TimeCnn(TimeCnnConfig { dropout: 0.15 }),
            ModelConfig::Rnn(RnnConfig {
                layers: 3,
                hidden: 256,
                fc_units: 512,
                dropout: 0.25,
            }),
            ModelConfig::InceptionTime(InceptionTimeConfig {
                modules: 4,
                filters: 128,
                dropout: 0.0,
            }),
            ModelConfig::Transformer(TransformerConfig {
                heads: 2,
                encoder_layers: 10,
                d_model: 128,
                d_inner: 256,
                dropout: 0.03,
            }),
        ];
        for cfg in configs {
            let text = model_config_to_kv(&cfg).to_text();
            let parsed = model_config_from_kv(&KvConfig::parse(&text).unwrap()).unwrap();
            assert_eq!(parsed, cfg, "round trip failed for {text}");
        }
    }

    #[test]
    fn training_config_round_trips() {
        let cfg = TrainingConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            weight_decay: 0.0005,
            batch_size: 64,
            max_epochs: 33,
            early_stopping: Some(EarlyStoppingConfig {
                patience: 7,
                restore_best: false,
            }),
            lr_plateau: Some(PlateauConfig {
                factor: 0.5,
                patience_epochs: 50,
                min_lr: 1e-4,
            }),
            loss: LossKind::CrossEntropy,
            seed: 99,
        };
        let text = training_config_to_kv(&cfg).to_text();
        let parsed = training_config_from_kv(&KvConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let kv = KvConfig::parse("model = temporal_cnn\ndropout = 0.9\nnb_conv_layers = 3\nnb_conv_units = 8\nnb_fc_units = 8\nfilter_size = 5\n").unwrap();
        assert!(model_config_from_kv(&kv).is_err());

        let kv = KvConfig::parse("learning_rate = -1\n").unwrap();
        assert!(training_config_from_kv(&kv).is_err());

        let kv = KvConfig::parse("model = nonexistent\ndropout = 0.1\n").unwrap();
        assert!(matches!(model_config_from_kv(&kv), Err(Error::UnknownName { .. })));
    }
}

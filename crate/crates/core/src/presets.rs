//! Committed configuration presets.
//!
//! The `presets/` tree at the repository root is the source of truth; the
//! files are embedded here so a built binary carries them. Each entry pairs
//! an architecture configuration with its training recipe and a dataset tag.

use crate::config::{model_config_from_kv, training_config_from_kv, KvConfig};
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::training::TrainingConfig;

/// Dataset a preset was tuned for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetTag {
    Tiselac,
    SitsTsi,
    Synthetic,
}

impl DatasetTag {
    pub fn name(self) -> &'static str {
        match self {
            DatasetTag::Tiselac => "tiselac",
            DatasetTag::SitsTsi => "sits_tsi",
            DatasetTag::Synthetic => "synthetic",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tiselac" => Ok(DatasetTag::Tiselac),
            "sits_tsi" | "sits-tsi" => Ok(DatasetTag::SitsTsi),
            "synthetic" | "synth" => Ok(DatasetTag::Synthetic),
            other => Err(Error::UnknownName {
                name: other.into(),
                known: "tiselac, sits_tsi, synthetic".into(),
            }),
        }
    }
}

const CATALOG: &[(&str, &str)] = &[
    ("temporal_cnn/tiselac", include_str!("../../../presets/temporal_cnn/tiselac.cfg")),
    ("temporal_cnn/sits_tsi", include_str!("../../../presets/temporal_cnn/sits_tsi.cfg")),
    ("time_cnn/tiselac", include_str!("../../../presets/time_cnn/tiselac.cfg")),
    ("time_cnn/sits_tsi", include_str!("../../../presets/time_cnn/sits_tsi.cfg")),
    ("mcdcnn/tiselac", include_str!("../../../presets/mcdcnn/tiselac.cfg")),
    ("mcdcnn/sits_tsi", include_str!("../../../presets/mcdcnn/sits_tsi.cfg")),
    ("rnn/tiselac", include_str!("../../../presets/rnn/tiselac.cfg")),
    ("rnn/tiselac_alt_lr", include_str!("../../../presets/rnn/tiselac_alt_lr.cfg")),
    ("rnn/sits_tsi", include_str!("../../../presets/rnn/sits_tsi.cfg")),
    ("rnn/sits_tsi_alt_lr", include_str!("../../../presets/rnn/sits_tsi_alt_lr.cfg")),
    ("inception_time/tiselac", include_str!("../../../presets/inception_time/tiselac.cfg")),
    ("inception_time/sits_tsi", include_str!("../../../presets/inception_time/sits_tsi.cfg")),
    ("transformer/tiselac", include_str!("../../../presets/transformer/tiselac.cfg")),
    ("transformer/sits_tsi", include_str!("../../../presets/transformer/sits_tsi.cfg")),
];

/// All preset names, in catalog order.
pub fn preset_names() -> Vec<&'static str> {
    CATALOG.iter().map(|(name, _)| *name).collect()
}

/// Raw config text of one preset.
pub fn preset_text(name: &str) -> Result<&'static str> {
    CATALOG
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| Error::UnknownName {
            name: name.into(),
            known: preset_names().join(", "),
        })
}

/// Resolve a preset to its model and training configurations.
pub fn lookup(name: &str) -> Result<(ModelConfig, TrainingConfig)> {
    let kv = KvConfig::parse(preset_text(name)?)?;
    Ok((model_config_from_kv(&kv)?, training_config_from_kv(&kv)?))
}

/// Dataset tag of a preset.
pub fn preset_dataset(name: &str) -> Result<DatasetTag> {
    let kv = KvConfig::parse(preset_text(name)?)?;
    DatasetTag::from_name(kv.require("dataset")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Model, ModelVariant};
    use crate::training::{LossKind, OptimizerKind};

    #[test]
    fn every_preset_parses_and_builds() {
        for name in preset_names() {
            let (model_cfg, train_cfg) = lookup(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            model_cfg.validate().unwrap();
            train_cfg.validate().unwrap();
            let tag = preset_dataset(name).unwrap();
            let (t, c, k) = match tag {
                DatasetTag::Tiselac => (23, 10, 9),
                DatasetTag::SitsTsi => (46, 1, 24),
                DatasetTag::Synthetic => (23, 10, 5),
            };
            Model::build(&model_cfg, t, c, k, 0).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_preset_lists_catalog() {
        let err = lookup("nope").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("temporal_cnn/tiselac") && text.contains("transformer/sits_tsi"));
    }

    /// Frozen transcription audit: any edit to a preset file that changes a
    /// committed value fails here.
    #[test]
    fn preset_values_are_frozen() {
        use crate::models::ModelConfig::*;

        let (m, t) = lookup("temporal_cnn/tiselac").unwrap();
        match m {
            TemporalCnn(c) => {
                assert_eq!(
                    (c.nb_conv_layers, c.nb_conv_units, c.nb_fc_units, c.filter_size, c.dropout),
                    (3, 128, 256, 5, 0.2)
                );
            }
            _ => panic!("wrong variant"),
        }
        assert_eq!(t.optimizer, OptimizerKind::Adam);
        assert_eq!((t.learning_rate, t.weight_decay, t.batch_size), (1e-3, 1e-6, 128));

        let (m, t) = lookup("temporal_cnn/sits_tsi").unwrap();
        match m {
            TemporalCnn(c) => assert_eq!((c.filter_size, c.dropout), (7, 0.2)),
            _ => panic!("wrong variant"),
        }
        assert_eq!(t.batch_size, 256);

        let (m, t) = lookup("time_cnn/tiselac").unwrap();
        match m {
            TimeCnn(c) => assert_eq!(c.dropout, 0.15),
            _ => panic!("wrong variant"),
        }
        assert_eq!((t.loss, t.learning_rate, t.weight_decay), (LossKind::Mse, 1e-3, 0.0));

        let (m, _) = lookup("time_cnn/sits_tsi").unwrap();
        match m {
            TimeCnn(c) => assert_eq!(c.dropout, 0.3),
            _ => panic!("wrong variant"),
        }

        let (m, t) = lookup("mcdcnn/tiselac").unwrap();
        match m {
            Mcdcnn(c) => assert_eq!(c.dropout, 0.182),
            _ => panic!("wrong variant"),
        }
        assert_eq!(
            (t.optimizer, t.learning_rate, t.weight_decay),
            (OptimizerKind::Sgd, 0.01, 0.0005)
        );

        let (m, _) = lookup("mcdcnn/sits_tsi").unwrap();
        match m {
            Mcdcnn(c) => assert_eq!(c.dropout, 0.4),
            _ => panic!("wrong variant"),
        }

        let (m, t) = lookup("rnn/tiselac").unwrap();
        match m {
            Rnn(c) => assert_eq!((c.layers, c.hidden, c.fc_units, c.dropout), (3, 256, 512, 0.25)),
            _ => panic!("wrong variant"),
        }
        assert_eq!((t.learning_rate, t.weight_decay), (1e-3, 0.0));
        let (_, t_alt) = lookup("rnn/tiselac_alt_lr").unwrap();
        assert_eq!(t_alt.learning_rate, 1e-6);

        let (m, _) = lookup("rnn/sits_tsi").unwrap();
        match m {
            Rnn(c) => assert_eq!((c.layers, c.hidden, c.fc_units, c.dropout), (3, 128, 256, 0.2)),
            _ => panic!("wrong variant"),
        }

        let (m, t) = lookup("inception_time/tiselac").unwrap();
        match m {
            InceptionTime(c) => assert_eq!((c.modules, c.filters), (4, 128)),
            _ => panic!("wrong variant"),
        }
        assert_eq!((t.learning_rate, t.weight_decay), (0.01, 2e-6));
        let plateau = t.lr_plateau.expect("plateau schedule");
        assert_eq!(
            (plateau.factor, plateau.patience_epochs, plateau.min_lr),
            (0.5, 50, 1e-4)
        );

        let (m, _) = lookup("inception_time/sits_tsi").unwrap();
        match m {
            InceptionTime(c) => assert_eq!((c.modules, c.filters), (6, 256)),
            _ => panic!("wrong variant"),
        }

        for name in ["transformer/tiselac", "transformer/sits_tsi"] {
            let (m, t) = lookup(name).unwrap();
            match m {
                Transformer(c) => assert_eq!(
                    (c.heads, c.encoder_layers, c.d_model, c.d_inner, c.dropout),
                    (2, 10, 128, 256, 0.03)
                ),
                _ => panic!("wrong variant"),
            }
            assert_eq!((t.learning_rate, t.weight_decay), (1.31e-3, 5.52e-8));
        }

        // One preset per variant/dataset pair, plus the two alternates.
        assert_eq!(preset_names().len(), 14);
        for variant in ModelVariant::all() {
            for ds in ["tiselac", "sits_tsi"] {
                assert!(preset_names().contains(&format!("{}/{ds}", variant.name()).as_str()));
            }
        }
    }
}

use std::fs;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::TrainingHyperParams;

/// Training regime plus the architecture of freshly built encoders. Text
/// form is flat `key=value`, one per line, `#` starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub hyper: TrainingHyperParams,
    pub encoder: EncoderConfig,
}

pub const PRESETS: [&str; 6] = ["nli", "kd", "mt", "desk-nli", "desk-kd", "desk-mt"];

fn desk_encoder() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 64,
        num_layers: 1,
        num_heads: 4,
        ffn_dim: 128,
        ..EncoderConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("desk-nli").expect("built-in preset")
    }
}

impl RunConfig {
    /// `nli`, `kd` and `mt` carry the published hyper-parameters; the
    /// `desk-` variants raise the learning rate for training from scratch
    /// and shorten the schedule where needed. All use the desk encoder.
    pub fn preset(name: &str) -> Option<Self> {
        let hyper = match name {
            "nli" => TrainingHyperParams::paper_nli(),
            "kd" => TrainingHyperParams::paper_kd(),
            "mt" => TrainingHyperParams::paper_mt(),
            "desk-nli" => TrainingHyperParams {
                epochs: 8,
                learning_rate: 1e-3,
                accumulation_step: 1,
                ..TrainingHyperParams::paper_nli()
            },
            "desk-kd" => TrainingHyperParams {
                learning_rate: 1e-3,
                ..TrainingHyperParams::paper_kd()
            },
            "desk-mt" => TrainingHyperParams {
                learning_rate: 1e-3,
                epsilon: 1e-8,
                ..TrainingHyperParams::paper_mt()
            },
            _ => return None,
        };
        let mut cfg = Self {
            hyper,
            encoder: desk_encoder(),
        };
        cfg.sync_lengths();
        Some(cfg)
    }

    fn sync_lengths(&mut self) {
        self.encoder.max_tokens_length = self.hyper.max_tokens_length;
        self.encoder.max_sentence_length = self.hyper.max_sentence_length;
    }

    /// Applies the assignments in `text` on top of `base`.
    pub fn parse(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Config(format!("line {}: {m}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|e| err(format!("{key}: {e}")))
            };
            let real = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let h = &mut cfg.hyper;
            let e = &mut cfg.encoder;
            match key {
                "batch_size" => h.batch_size = int()?,
                "max_sentence_length" => h.max_sentence_length = int()?,
                "max_tokens_length" => h.max_tokens_length = int()?,
                "epochs" => h.epochs = int()?,
                "learning_rate" => h.learning_rate = real()?,
                "epsilon" => h.epsilon = real()?,
                "weight_decay" => h.weight_decay = real()?,
                "accumulation_step" => h.accumulation_step = int()?,
                "embed_dim" => e.embed_dim = int()?,
                "num_layers" => e.num_layers = int()?,
                "num_heads" => e.num_heads = int()?,
                "ffn_dim" => e.ffn_dim = int()?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.sync_lengths();
        cfg.hyper.validate()?;
        cfg.encoder.validate()?;
        Ok(cfg)
    }

    /// A preset name, or a file parsed over the `desk-nli` preset.
    pub fn resolve(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let path = Path::new(spec);
        if !path.exists() {
            return Err(Error::Config(format!(
                "{spec:?} is neither a config file nor a preset ({})",
                PRESETS.join(", ")
            )));
        }
        Self::parse(&fs::read_to_string(path)?, Self::default())
    }

    pub fn to_text(&self) -> String {
        let h = &self.hyper;
        let e = &self.encoder;
        format!(
            "batch_size={}\nmax_sentence_length={}\nmax_tokens_length={}\nepochs={}\n\
             learning_rate={:e}\nepsilon={:e}\nweight_decay={:e}\naccumulation_step={}\n\
             embed_dim={}\nnum_layers={}\nnum_heads={}\nffn_dim={}\n",
            h.batch_size,
            h.max_sentence_length,
            h.max_tokens_length,
            h.epochs,
            h.learning_rate,
            h.epsilon,
            h.weight_decay,
            h.accumulation_step,
            e.embed_dim,
            e.num_layers,
            e.num_heads,
            e.ffn_dim
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_published_values() {
        assert_eq!(
            RunConfig::preset("nli").unwrap().hyper,
            TrainingHyperParams::paper_nli()
        );
        assert_eq!(
            RunConfig::preset("kd").unwrap().hyper,
            TrainingHyperParams::paper_kd()
        );
        assert_eq!(
            RunConfig::preset("mt").unwrap().hyper,
            TrainingHyperParams::paper_mt()
        );
        assert_eq!(
            RunConfig::preset("mt").unwrap().encoder.max_tokens_length,
            256
        );
        assert_eq!(RunConfig::preset("desk-kd").unwrap().hyper.epochs, 6);
        assert!(RunConfig::preset("nope").is_none());
    }

    #[test]
    fn parses_appendix_keys() {
        let text = "# distillation\nbatch_size = 24\nmax_sentence_length=256\nmax_tokens_length=128\n\
                    epochs=6\nlearning_rate=2e-5\nepsilon=1e-6\nweight_decay=1e-2\naccumulation_step=4\n";
        let cfg = RunConfig::parse(text, RunConfig::default()).unwrap();
        assert_eq!(cfg.hyper, TrainingHyperParams::paper_kd());
    }

    #[test]
    fn text_round_trip() {
        for name in PRESETS {
            let cfg = RunConfig::preset(name).unwrap();
            assert_eq!(
                RunConfig::parse(&cfg.to_text(), RunConfig::default()).unwrap(),
                cfg,
                "{name}"
            );
        }
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("epochs=2\nbogus=1\n", RunConfig::default()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(RunConfig::parse("epochs=two", RunConfig::default()).is_err());
        assert!(RunConfig::parse("batch_size=0", RunConfig::default()).is_err());
        assert!(RunConfig::parse("num_heads=3", RunConfig::default()).is_err());
        assert!(RunConfig::resolve("/no/such/file").is_err());
    }
}

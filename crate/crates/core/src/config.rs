//! Flat `key=value` run configuration shared by every command.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! unparsable values are configuration errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::corrector::CorrectorConfig;
use crate::error::{Error, Result};
use crate::eval::{Averaging, EvalConfig};
use crate::model::ModelConfig;
use crate::policy::PolicyConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub policy_dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(0);
        ModelSection {
            layers: m.layers,
            hidden: m.hidden,
            heads: m.heads,
            ffn: m.ffn,
            max_len: m.max_len,
            dropout: m.dropout,
            policy_dropout: m.policy_dropout,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vs: usize) -> Result<ModelConfig> {
        let c = ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            max_len: self.max_len,
            vs,
            dropout: self.dropout,
            policy_dropout: self.policy_dropout,
        };
        c.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub corrector: CorrectorConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
    /// Sentences generated when no corpus file is given.
    pub corpus_size: usize,
    /// Held-out pairs generated when no pair file is given.
    pub heldout_size: usize,
    /// Clean sentences used to build policy supervision.
    pub policy_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            corrector: CorrectorConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalConfig::default(),
            corpus_size: 20_000,
            heldout_size: 1_000,
            policy_samples: 2_000,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {v:?} for {key}"))),
    }
}

fn opt_usize(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "none" || v.is_empty() {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, p, e) = (
            &mut self.model,
            &mut self.train,
            &mut self.policy,
            &mut self.eval,
        );
        match key {
            "layers" => m.layers = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "ffn" => m.ffn = parse(key, v)?,
            "max_len" => m.max_len = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "policy_dropout" => m.policy_dropout = parse(key, v)?,
            "ct" => t.ct = parse(key, v)?,
            "pos_threshold" => t.pos_threshold = parse(key, v)?,
            "s_g" => t.s_g = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "mask_ratio" => {
                t.mask_ratio = parse(key, v)?;
                e.mask_ratio = t.mask_ratio;
            }
            "epochs" => t.epochs = parse(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "seed" => {
                t.seed = parse(key, v)?;
                p.seed = t.seed;
                e.seed = t.seed;
            }
            "phase" => t.phase = v.parse()?,
            "max_steps" => t.max_steps = opt_usize(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "clamp_wg_nonneg" => t.clamp_wg_nonneg = parse_bool(key, v)?,
            "eq8_post_sigmoid" => t.eq8_post_sigmoid = parse_bool(key, v)?,
            "width" => self.corrector.width = parse(key, v)?,
            "depth" => self.corrector.depth = parse(key, v)?,
            "include_identity" => self.corrector.include_identity = parse_bool(key, v)?,
            "policy.epochs" => p.epochs = parse(key, v)?,
            "policy.batch" => p.batch = parse(key, v)?,
            "policy.lr" => p.lr = parse(key, v)?,
            "policy.target" => p.target = v.parse()?,
            "policy.strict_end_bounds" => p.strict_end_bounds = parse_bool(key, v)?,
            "topk" => e.topk = parse(key, v)?,
            "averaging" => {
                e.averaging = match v {
                    "macro" => Averaging::Macro,
                    "micro" => Averaging::Micro,
                    _ => return Err(Error::Config(format!("invalid value {v:?} for {key}"))),
                }
            }
            "eval.correct_limit" => e.correct_limit = opt_usize(key, v)?,
            "corpus_size" => self.corpus_size = parse(key, v)?,
            "heldout_size" => self.heldout_size = parse(key, v)?,
            "policy.samples" => self.policy_samples = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.policy.validate()?;
        self.model.model_config(8)?;
        if self.eval.topk == 0 {
            return Err(Error::Config("topk must be at least 1".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let (m, t, p, e) = (&self.model, &self.train, &self.policy, &self.eval);
        let kv: Vec<(&str, String)> = vec![
            ("layers", m.layers.to_string()),
            ("hidden", m.hidden.to_string()),
            ("heads", m.heads.to_string()),
            ("ffn", m.ffn.to_string()),
            ("max_len", m.max_len.to_string()),
            ("dropout", m.dropout.to_string()),
            ("policy_dropout", m.policy_dropout.to_string()),
            ("ct", t.ct.to_string()),
            ("pos_threshold", t.pos_threshold.to_string()),
            ("s_g", t.s_g.to_string()),
            ("lr", t.lr.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("mask_ratio", t.mask_ratio.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch", t.batch.to_string()),
            ("seed", t.seed.to_string()),
            ("phase", t.phase.to_string()),
            ("max_steps", show_opt(&t.max_steps)),
            ("weight_decay", t.weight_decay.to_string()),
            ("clamp_wg_nonneg", t.clamp_wg_nonneg.to_string()),
            ("eq8_post_sigmoid", t.eq8_post_sigmoid.to_string()),
            ("width", self.corrector.width.to_string()),
            ("depth", self.corrector.depth.to_string()),
            (
                "include_identity",
                self.corrector.include_identity.to_string(),
            ),
            ("policy.epochs", p.epochs.to_string()),
            ("policy.batch", p.batch.to_string()),
            ("policy.lr", p.lr.to_string()),
            ("policy.target", p.target.to_string()),
            ("policy.strict_end_bounds", p.strict_end_bounds.to_string()),
            ("topk", e.topk.to_string()),
            (
                "averaging",
                match e.averaging {
                    Averaging::Macro => "macro".into(),
                    Averaging::Micro => "micro".into(),
                },
            ),
            ("eval.correct_limit", show_opt(&e.correct_limit)),
            ("corpus_size", self.corpus_size.to_string()),
            ("heldout_size", self.heldout_size.to_string()),
            ("policy.samples", self.policy_samples.to_string()),
        ];
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Phase;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(c.train.lr, 2e-5);
        assert_eq!(c.corrector.width, 2);
        assert_eq!(c.eval.topk, 4);
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::from_text("# small\nhidden = 32\nphase=mtl\n\nmax_steps=50\nseed=9\n")
            .unwrap();
        assert_eq!(c.model.hidden, 32);
        assert_eq!(c.train.phase, Phase::Mtl);
        assert_eq!(c.train.max_steps, Some(50));
        assert_eq!(c.policy.seed, 9);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in [
            "nope=1",
            "hidden",
            "lr=fast",
            "ct=0.5",
            "phase=both",
            "heads=3",
        ] {
            assert!(
                matches!(RunConfig::from_text(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}

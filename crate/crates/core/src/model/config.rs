use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::selection::Strategy;

/// Architecture and selection hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Active heads per layer (`H`).
    pub heads: usize,
    /// Candidate heads per selective layer (`H'`).
    pub candidates: usize,
    pub strategy: Strategy,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub dropout: f64,
    pub select_in_encoder: bool,
    pub select_in_decoder: bool,
    /// Bottleneck width used when adapters are attached.
    pub adapter_dim: Option<usize>,
    /// Number of distinct task keys the selection logits are indexed by.
    pub task_keys: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            ffn: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            candidates: 8,
            strategy: Strategy::Group,
            vocab_src: 40,
            vocab_tgt: 40,
            dropout: 0.1,
            select_in_encoder: true,
            select_in_decoder: true,
            adapter_dim: None,
            task_keys: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.ffn == 0 || self.heads == 0 {
            return fail("widths and head count must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by H={}", self.d_model, self.heads));
        }
        if self.candidates < self.heads {
            return fail(format!("H'={} smaller than H={}", self.candidates, self.heads));
        }
        match self.strategy {
            Strategy::Shared if self.candidates != self.heads => {
                return fail("shared strategy requires H' == H".into())
            }
            Strategy::Group if !self.candidates.is_multiple_of(self.heads) => {
                return fail(format!(
                    "group strategy requires H' divisible by H (H'={}, H={})",
                    self.candidates, self.heads
                ))
            }
            _ => {}
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("need at least one encoder and one decoder layer".into());
        }
        if self.vocab_src == 0 || self.vocab_tgt == 0 || self.task_keys == 0 {
            return fail("vocabularies and task key count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.adapter_dim == Some(0) {
            return fail("adapter_dim must be positive".into());
        }
        Ok(())
    }

    pub fn encoder_selective(&self) -> bool {
        self.strategy != Strategy::Shared && self.select_in_encoder
    }

    pub fn decoder_selective(&self) -> bool {
        self.strategy != Strategy::Shared && self.select_in_decoder
    }

    /// Number of self-attention layers that carry selection logits.
    pub fn selective_layers(&self) -> usize {
        let enc = if self.encoder_selective() { self.enc_layers } else { 0 };
        let dec = if self.decoder_selective() { self.dec_layers } else { 0 };
        enc + dec
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("d_model", self.d_model.to_string()),
            ("ffn", self.ffn.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("candidates", self.candidates.to_string()),
            ("strategy", self.strategy.to_string()),
            ("vocab_src", self.vocab_src.to_string()),
            ("vocab_tgt", self.vocab_tgt.to_string()),
            ("dropout", self.dropout.to_string()),
            ("select_in_encoder", self.select_in_encoder.to_string()),
            ("select_in_decoder", self.select_in_decoder.to_string()),
            ("task_keys", self.task_keys.to_string()),
        ];
        if let Some(a) = self.adapter_dim {
            v.push(("adapter_dim", a.to_string()));
        }
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Reads the keys written by [`ModelConfig::to_pairs`]; missing keys keep
    /// their default, unknown keys are ignored.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Sets one field from its text form. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::config(format!("bad value `{value}` for `{key}`"));
        let num = || value.parse::<usize>().map_err(|_| bad());
        let flag = || value.parse::<bool>().map_err(|_| bad());
        match key {
            "d_model" => self.d_model = num()?,
            "ffn" => self.ffn = num()?,
            "enc_layers" => self.enc_layers = num()?,
            "dec_layers" => self.dec_layers = num()?,
            "heads" => self.heads = num()?,
            "candidates" | "hprime" => self.candidates = num()?,
            "strategy" => self.strategy = value.parse()?,
            "vocab_src" => self.vocab_src = num()?,
            "vocab_tgt" => self.vocab_tgt = num()?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad())?,
            "select_in_encoder" => self.select_in_encoder = flag()?,
            "select_in_decoder" => self.select_in_decoder = flag()?,
            "task_keys" => self.task_keys = num()?,
            "adapter_dim" => self.adapter_dim = Some(num()?),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_laws() {
        assert!(ModelConfig::default().validate().is_ok());
        let c = ModelConfig {
            d_model: 30,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            candidates: 6,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            candidates: 6,
            strategy: Strategy::Subset,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_ok());
        let c = ModelConfig {
            strategy: Strategy::Shared,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_flags_control_selective_layers() {
        let mut c = ModelConfig {
            enc_layers: 3,
            dec_layers: 2,
            ..ModelConfig::default()
        };
        assert_eq!(c.selective_layers(), 5);
        c.select_in_decoder = false;
        assert_eq!(c.selective_layers(), 3);
        c.select_in_encoder = false;
        c.select_in_decoder = true;
        assert_eq!(c.selective_layers(), 2);
    }

    #[test]
    fn pairs_round_trip() {
        let c = ModelConfig {
            adapter_dim: Some(16),
            strategy: Strategy::Subset,
            dropout: 0.25,
            ..ModelConfig::default()
        };
        let map = c.to_pairs().into_iter().collect();
        assert_eq!(ModelConfig::from_pairs(&map).unwrap(), c);
    }
}

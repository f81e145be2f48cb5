use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::Mechanism;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    #[default]
    Pre,
    Post,
}

impl FromStr for NormPlacement {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pre" => Ok(NormPlacement::Pre),
            "post" => Ok(NormPlacement::Post),
            other => Err(LabError::InvalidConfig(format!("unknown norm placement '{other}'"))),
        }
    }
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        })
    }
}

/// Shape and initialisation of a decoder stack.
///
/// Config files use one `key = value` pair per line with `#` comments; keys
/// are the field names below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub mechanism: Mechanism,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub lambdas_trainable: bool,
    pub norm_placement: NormPlacement,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            d_ff: 128,
            d_qk: 16,
            d_v: 32,
            n_heads: 2,
            vocab_size: 16,
            mechanism: Mechanism::Conventional,
            lambda_pos: 0.0,
            lambda_neg: 0.0,
            lambdas_trainable: false,
            norm_placement: NormPlacement::Pre,
            seed: 0,
            init_std: 0.02,
        }
    }
}

impl StackConfig {
    /// Widths of the larger language-model configuration: 15 layers, four
    /// heads of width 64, feed-forward width 2100.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 15,
            d_model: 256,
            d_ff: 2100,
            d_qk: 64,
            d_v: 64,
            n_heads: 4,
            ..Self::default()
        }
    }

    pub fn with_mechanism(mut self, mechanism: Mechanism, lambda_pos: f64, lambda_neg: f64) -> Self {
        self.mechanism = mechanism;
        self.lambda_pos = lambda_pos;
        self.lambda_neg = lambda_neg;
        self
    }

    /// Trainable lambdas start at `(1, 1)`.
    pub fn with_trainable_lambdas(mut self) -> Self {
        self.mechanism = Mechanism::Dagpam;
        self.lambdas_trainable = true;
        self.lambda_pos = 1.0;
        self.lambda_neg = 1.0;
        self
    }

    pub fn sigma_sum(&self) -> f64 {
        match self.mechanism {
            Mechanism::Conventional => 1.0,
            Mechanism::Dagpam => 1.0 + self.lambda_pos - self.lambda_neg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidConfig(msg));
        if [self.n_layers, self.d_model, self.d_ff, self.d_qk, self.d_v, self.n_heads, self.vocab_size].contains(&0) {
            return bad("all sizes must be positive".into());
        }
        if self.n_heads * self.d_v != self.d_model {
            return bad(format!("n_heads * d_v = {} but d_model = {}", self.n_heads * self.d_v, self.d_model));
        }
        if self.d_qk > self.d_model {
            return bad(format!("d_qk = {} exceeds d_model = {}", self.d_qk, self.d_model));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!("init_std = {} must be finite and nonnegative", self.init_std));
        }
        if !(self.lambda_pos.is_finite() && self.lambda_neg.is_finite()) {
            return bad("lambdas must be finite".into());
        }
        if self.lambdas_trainable && self.mechanism != Mechanism::Dagpam {
            return bad("trainable lambdas need the dagpam mechanism".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| LabError::InvalidConfig(format!("bad value '{v}' for {key}")))
        }
        let v = value.trim();
        match key.trim() {
            "n_layers" => self.n_layers = num(key, v)?,
            "d_model" => self.d_model = num(key, v)?,
            "d_ff" => self.d_ff = num(key, v)?,
            "d_qk" => self.d_qk = num(key, v)?,
            "d_v" => self.d_v = num(key, v)?,
            "n_heads" => self.n_heads = num(key, v)?,
            "vocab_size" => self.vocab_size = num(key, v)?,
            "mechanism" => self.mechanism = v.parse()?,
            "lambda_pos" => self.lambda_pos = num(key, v)?,
            "lambda_neg" => self.lambda_neg = num(key, v)?,
            "lambdas_trainable" => self.lambdas_trainable = num(key, v)?,
            "norm_placement" => self.norm_placement = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "init_std" => self.init_std = num(key, v)?,
            other => return Err(LabError::InvalidConfig(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of `base`. Unknown keys are errors.
    pub fn parse_onto(base: StackConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for StackConfig {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        StackConfig::parse_onto(StackConfig::default(), s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        StackConfig::default().validate().unwrap();
        StackConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn parses_key_values() {
        let cfg: StackConfig = "# desk run\nn_layers = 15\nmechanism = dagpam\nlambda_pos=1\nlambda_neg = 2.0 # sigma 0\nnorm_placement = post\n"
            .parse()
            .unwrap();
        assert_eq!(cfg.n_layers, 15);
        assert_eq!(cfg.mechanism, Mechanism::Dagpam);
        assert_eq!(cfg.sigma_sum(), 0.0);
        assert_eq!(cfg.norm_placement, NormPlacement::Post);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!("d_v = 16".parse::<StackConfig>().is_err());
        assert!("colour = red".parse::<StackConfig>().is_err());
        assert!("n_layers".parse::<StackConfig>().is_err());
        assert!("d_qk = 128".parse::<StackConfig>().is_err());
        assert!("lambdas_trainable = true".parse::<StackConfig>().is_err());
    }
}

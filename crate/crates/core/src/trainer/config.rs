use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::{ModelConfig, TokenVocab};
use crate::miest::MimConfig;
use crate::objectives::LossWeights;
use crate::trainer::optim::AdamWConfig;
use crate::{Error, Result};

/// Every training hyperparameter. The config file format is one
/// `field = value` per line using these field names; `#` starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_hidden: usize,
    pub num_paths: usize,
    pub prefix_len: usize,
    pub lambda_mim: f64,
    pub lambda_con: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Constant estimator learning rate; `None` uses `peak_lr`.
    pub estimator_lr: Option<f64>,
    /// Estimator updates per training step.
    pub estimator_steps: usize,
    /// Estimator hidden width; 0 means `4 · d_model`.
    pub estimator_hidden: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// JSON Lines training pairs; `None` trains on the default synthetic corpus.
    pub dataset: Option<String>,
    /// Checkpoint every this many steps (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
    /// Run the eval hook every this many steps (0 disables it).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        Self {
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            max_len: m.max_len,
            ffn_hidden: m.ffn_hidden,
            num_paths: m.num_paths,
            prefix_len: m.prefix_len,
            lambda_mim: w.lambda_mim,
            lambda_con: w.lambda_con,
            tau: w.tau,
            batch_size: 32,
            total_steps: 2000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            estimator_lr: None,
            estimator_steps: 1,
            estimator_hidden: 0,
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
            dataset: None,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: TokenVocab::SIZE,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len,
            num_paths: self.num_paths,
            prefix_len: self.prefix_len,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { tau: self.tau, lambda_con: self.lambda_con, lambda_mim: self.lambda_mim }
    }

    pub fn mim(&self) -> MimConfig {
        match self.estimator_hidden {
            0 => MimConfig::for_dim(self.d_model),
            h => MimConfig { hidden: h },
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    pub fn estimator_lr(&self) -> f64 {
        self.estimator_lr.unwrap_or(self.peak_lr)
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.loss_weights().validate()?;
        self.mim().validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return fail("warmup_steps must be below total_steps");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        let negative = |x: f64| x.is_nan() || x < 0.0;
        if negative(self.peak_lr) || self.peak_lr == 0.0 || negative(self.estimator_lr()) || negative(self.weight_decay)
        {
            return fail("peak_lr must be positive; estimator_lr and weight_decay nonnegative");
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected key = value, got `{line}`") })?;
            c.set(key.trim(), value.trim()).map_err(|message| Error::Parse { line: i + 1, message })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for {key}"))
        }
        match key {
            "d_model" => self.d_model = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "ffn_hidden" => self.ffn_hidden = num(key, value)?,
            "num_paths" => self.num_paths = num(key, value)?,
            "prefix_len" => self.prefix_len = num(key, value)?,
            "lambda_mim" => self.lambda_mim = num(key, value)?,
            "lambda_con" => self.lambda_con = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "peak_lr" => self.peak_lr = num(key, value)?,
            "estimator_lr" => self.estimator_lr = Some(num(key, value)?),
            "estimator_steps" => self.estimator_steps = num(key, value)?,
            "estimator_hidden" => self.estimator_hidden = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dataset" => self.dataset = (!value.is_empty()).then(|| value.to_string()),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("d_model", self.d_model.to_string());
        put("layers", self.layers.to_string());
        put("heads", self.heads.to_string());
        put("max_len", self.max_len.to_string());
        put("ffn_hidden", self.ffn_hidden.to_string());
        put("num_paths", self.num_paths.to_string());
        put("prefix_len", self.prefix_len.to_string());
        put("lambda_mim", self.lambda_mim.to_string());
        put("lambda_con", self.lambda_con.to_string());
        put("tau", self.tau.to_string());
        put("batch_size", self.batch_size.to_string());
        put("total_steps", self.total_steps.to_string());
        put("warmup_steps", self.warmup_steps.to_string());
        put("peak_lr", self.peak_lr.to_string());
        if let Some(lr) = self.estimator_lr {
            put("estimator_lr", lr.to_string());
        }
        put("estimator_steps", self.estimator_steps.to_string());
        put("estimator_hidden", self.estimator_hidden.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("seed", self.seed.to_string());
        if let Some(d) = &self.dataset {
            put("dataset", d.clone());
        }
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("eval_every", self.eval_every.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig { lambda_mim: 3.5e-5, estimator_lr: Some(0.1), seed: 9, ..Default::default() };
        c.dataset = Some("data/pairs.jsonl".into());
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(TrainConfig::parse(&TrainConfig::default().to_text()).unwrap(), TrainConfig::default());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = TrainConfig::parse("# toy\n\nnum_paths = 4 # four paths\nprefix_len=10\n").unwrap();
        assert_eq!((c.num_paths, c.prefix_len), (4, 10));
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        assert!(matches!(TrainConfig::parse("num_path = 2"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(TrainConfig::parse("seed = 1\nbatch_size"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(TrainConfig::parse("tau = fast"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn invariants_are_checked() {
        assert!(TrainConfig::parse("warmup_steps = 2000").is_err());
        assert!(TrainConfig::parse("batch_size = 1").is_err());
        assert!(TrainConfig::parse("tau = 0").is_err());
        assert!(TrainConfig::parse("heads = 5").is_err());
    }

    #[test]
    fn estimator_lr_follows_peak_lr_unless_set() {
        let c = TrainConfig::parse("peak_lr = 0.005").unwrap();
        assert_eq!(c.estimator_lr(), 0.005);
        let c = TrainConfig::parse("peak_lr = 0.005\nestimator_lr = 0.01").unwrap();
        assert_eq!(c.estimator_lr(), 0.01);
    }
}

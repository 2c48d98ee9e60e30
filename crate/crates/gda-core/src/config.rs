//! Hyperparameter types, validation, and the `key = value` text format used
//! both for user config files and for checkpoint headers.
//!
//! Head bookkeeping in one place: with `heads` total heads and a signal to
//! noise ratio of `ratio:1`, the noise group holds `heads / (ratio + 1)`
//! heads (the divisibility is validated) and the signal group holds the
//! rest, so signal = ratio * noise always. Key/value projections are shared:
//! `n_kv` units serve the signal group, so `n_kv` must divide the signal
//! count for the contiguous assignment to be well formed.

use crate::error::{GdaError, Result};
use crate::tensor::Precision;
use std::collections::BTreeMap;

/// Byte-level vocabulary: 256 byte values plus two sentinels.
pub const BYTE_VOCAB_SIZE: usize = 258;
pub const BOS_ID: u32 = 256;
pub const EOS_ID: u32 = 257;

/// Norm eps used by every normalization site in the model.
pub const NORM_EPS: f64 = 1e-6;

/// How the per-layer baseline subtraction weight is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaInit {
    /// Depth-dependent default: `0.8 - 0.6 * exp(-0.3 * (layer - 1))` with
    /// 1-based layers, rising from 0.2 toward 0.8 with depth.
    Schedule,
    /// The same fixed value at every layer. Must lie in `[0, 1)`.
    Fixed(f64),
}

impl LambdaInit {
    pub fn for_layer(self, layer: usize) -> f64 {
        match self {
            LambdaInit::Schedule => lambda_init_schedule(layer),
            LambdaInit::Fixed(v) => v,
        }
    }
}

/// Depth schedule for the initial subtraction weight, 1-based `layer`.
pub fn lambda_init_schedule(layer: usize) -> f64 {
    assert!(layer >= 1, "layers are 1-based");
    0.8 - 0.6 * (-0.3 * (layer as f64 - 1.0)).exp()
}

/// Attention-stack geometry shared by every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GdaConfig {
    pub d_model: usize,
    pub n_layers: usize,
    /// Total head count H; split into signal and noise groups.
    pub heads: usize,
    /// Signal to noise ratio G in "G:1".
    pub ratio: usize,
    pub d_head: usize,
    /// Shared key/value units serving the signal group.
    pub n_kv: usize,
    pub rope_theta: f64,
    pub max_seq_len: usize,
    pub lambda_init: LambdaInit,
    pub precision: Precision,
}

impl GdaConfig {
    pub fn noise_heads(&self) -> usize {
        self.heads / (self.ratio + 1)
    }

    pub fn signal_heads(&self) -> usize {
        self.heads - self.noise_heads()
    }

    /// Signal heads per ratio group (the group width in Figure terms).
    pub fn group_width(&self) -> usize {
        self.noise_heads()
    }

    /// Signal heads per key/value unit.
    pub fn kv_group(&self) -> usize {
        self.signal_heads() / self.n_kv
    }

    /// Group index of signal head `i`: consecutive blocks of `noise_heads`
    /// signal heads form one group per ratio unit.
    pub fn head_group_index(&self, i: usize) -> Result<usize> {
        let s = self.signal_heads();
        if i >= s {
            return Err(GdaError::IndexOutOfRange {
                what: "signal head",
                index: i,
                bound: s,
            });
        }
        Ok(i / self.noise_heads())
    }

    /// Noise head subtracted from signal head `i`. The assignment is strided:
    /// head `i` uses noise head `i mod noise_heads`, so each noise head
    /// serves exactly `ratio` signal heads, one per group.
    pub fn noise_partner(&self, i: usize) -> Result<usize> {
        let s = self.signal_heads();
        if i >= s {
            return Err(GdaError::IndexOutOfRange {
                what: "signal head",
                index: i,
                bound: s,
            });
        }
        Ok(i % self.noise_heads())
    }

    /// Key/value unit serving signal head `i`: contiguous blocks of
    /// `signal_heads / n_kv` heads share one unit.
    pub fn kv_partner(&self, i: usize) -> Result<usize> {
        let s = self.signal_heads();
        if i >= s {
            return Err(GdaError::IndexOutOfRange {
                what: "signal head",
                index: i,
                bound: s,
            });
        }
        Ok(i / self.kv_group())
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(GdaError::Config(format!("{name} must be positive")));
            }
            Ok(())
        }
        positive("d_model", self.d_model)?;
        positive("n_layers", self.n_layers)?;
        positive("heads", self.heads)?;
        positive("ratio", self.ratio)?;
        positive("d_head", self.d_head)?;
        positive("n_kv", self.n_kv)?;
        positive("max_seq_len", self.max_seq_len)?;
        if self.d_head % 2 != 0 {
            return Err(GdaError::Config(format!(
                "d_head must be even for rotary encoding, got {}",
                self.d_head
            )));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(GdaError::Config(format!(
                "rope_theta must be finite and positive, got {}",
                self.rope_theta
            )));
        }
        if self.heads % (self.ratio + 1) != 0 {
            return Err(GdaError::Config(format!(
                "ratio {}:1 needs (ratio + 1) to divide heads, but {} % {} != 0",
                self.ratio,
                self.heads,
                self.ratio + 1
            )));
        }
        let s = self.signal_heads();
        if self.n_kv > s || s % self.n_kv != 0 {
            return Err(GdaError::Config(format!(
                "n_kv must divide the signal head count ({s}), got n_kv = {}",
                self.n_kv
            )));
        }
        if let LambdaInit::Fixed(v) = self.lambda_init {
            if !(0.0..1.0).contains(&v) || !v.is_finite() {
                return Err(GdaError::Config(format!(
                    "fixed lambda_init must lie in [0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }

    /// The published 48-head allocation: d_model 1536, head width 32, 12
    /// key/value units, 24 layers. Valid as a runnable model only where 12
    /// divides the signal count (ratios 1 and 3 among the published rows);
    /// the other rows still work for parameter/flop accounting.
    pub fn preset_48(ratio: usize) -> GdaConfig {
        GdaConfig {
            d_model: 1536,
            n_layers: 24,
            heads: 48,
            ratio,
            d_head: 32,
            n_kv: 12,
            rope_theta: 10_000.0,
            max_seq_len: 4096,
            lambda_init: LambdaInit::Schedule,
            precision: Precision::F32,
        }
    }
}

/// Full language-model shape: attention stack plus embedding and MLP sizing.
#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub gda: GdaConfig,
    pub vocab_size: usize,
    pub mlp_hidden: usize,
    /// Output projection reuses the embedding matrix (transposed) when set.
    pub tie_embeddings: bool,
}

/// Gated-MLP hidden width default: two thirds of `4 * d_model`, rounded up
/// to a multiple of 64.
pub fn default_mlp_hidden(d_model: usize) -> usize {
    let num = 8 * d_model; // 4 * d_model * 2 as an exact integer over 3
    let mult = num.div_ceil(3 * 64);
    mult.max(1) * 64
}

impl LmConfig {
    pub fn with_defaults(gda: GdaConfig) -> LmConfig {
        let mlp_hidden = default_mlp_hidden(gda.d_model);
        LmConfig {
            gda,
            vocab_size: BYTE_VOCAB_SIZE,
            mlp_hidden,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gda.validate()?;
        if self.vocab_size < 2 {
            return Err(GdaError::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(GdaError::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Optimization hyperparameters. Defaults mirror the training recipe the
/// model family was tuned with: AdamW(0.9, 0.95), weight decay 0.1, warmup
/// over the first 5% of steps, linear decay over the last 10%.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Fraction of total steps spent in the final linear decay.
    pub decay_frac: f64,
    pub total_steps: u64,
    pub batch_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling applied before the optimizer step.
    pub grad_clip: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            warmup_frac: 0.05,
            decay_frac: 0.10,
            total_steps: 1000,
            batch_sequences: 16,
            seq_len: 128,
            seed: 0,
            grad_clip: 1.0,
            eval_every: 200,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        fn unit_interval(name: &str, v: f64) -> Result<()> {
            if !(0.0..1.0).contains(&v) {
                return Err(GdaError::Config(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
            Ok(())
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(GdaError::Config(format!(
                "peak_lr must be finite and positive, got {}",
                self.peak_lr
            )));
        }
        unit_interval("beta1", self.beta1)?;
        unit_interval("beta2", self.beta2)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(GdaError::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        unit_interval("warmup_frac", self.warmup_frac)?;
        unit_interval("decay_frac", self.decay_frac)?;
        if self.warmup_frac + self.decay_frac > 1.0 {
            return Err(GdaError::Config(
                "warmup_frac + decay_frac must not exceed 1".into(),
            ));
        }
        if self.total_steps == 0 {
            return Err(GdaError::Config("total_steps must be positive".into()));
        }
        if self.batch_sequences == 0 {
            return Err(GdaError::Config("batch_sequences must be positive".into()));
        }
        if self.seq_len == 0 {
            return Err(GdaError::Config("seq_len must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(GdaError::Config(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            )));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(GdaError::Config(
                "eval_every and checkpoint_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Parsed `key = value` text. Lines are trimmed; blank lines and lines
/// starting with `#` are ignored; keys must be unique.
#[derive(Clone, Debug, Default)]
pub struct KvFile {
    pairs: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<KvFile> {
        let mut pairs = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                GdaError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    idx + 1
                ))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(GdaError::Config(format!("line {}: empty key", idx + 1)));
            }
            if pairs.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(GdaError::Config(format!("duplicate config key `{key}`")));
            }
        }
        Ok(KvFile { pairs })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| GdaError::MissingKey(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(String::as_str)
    }

    /// Reject keys outside the allowed vocabulary; typos should fail loudly
    /// instead of silently falling back to a default.
    pub fn check_known(&self, allowed: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !allowed.contains(&k) {
                return Err(GdaError::UnknownKey(k.to_string()));
            }
        }
        Ok(())
    }

    fn parse_with<T>(&self, key: &str, what: &str) -> Result<Option<T>>
    where
        T: std::str::FromStr,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| GdaError::BadValue {
                key: key.to_string(),
                msg: format!("`{raw}` is not a valid {what}"),
            }),
        }
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parse_with(key, "non-negative integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.parse_with(key, "non-negative integer")
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parse_with(key, "number")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some("true") => Ok(Some(true)),
            Some("false") => Ok(Some(false)),
            Some(raw) => Err(GdaError::BadValue {
                key: key.to_string(),
                msg: format!("`{raw}` is not `true` or `false`"),
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.get_usize(key)?.unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.get_u64(key)?.unwrap_or(default))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.get_f64(key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        Ok(self.get_bool(key)?.unwrap_or(default))
    }
}

/// Model-shape keys accepted in config files and checkpoint headers.
pub const LM_KEYS: &[&str] = &[
    "d_model",
    "n_layers",
    "heads",
    "ratio",
    "d_head",
    "n_kv",
    "rope_theta",
    "max_seq_len",
    "lambda_init_mode",
    "lambda_init_value",
    "precision",
    "vocab_size",
    "mlp_hidden",
    "tie_embeddings",
];

/// Training keys accepted in config files.
pub const TRAIN_KEYS: &[&str] = &[
    "corpus",
    "peak_lr",
    "beta1",
    "beta2",
    "weight_decay",
    "warmup_frac",
    "decay_frac",
    "total_steps",
    "batch_sequences",
    "seq_len",
    "seed",
    "grad_clip",
    "eval_every",
    "checkpoint_every",
];

fn parse_precision(kv: &KvFile) -> Result<Precision> {
    match kv.get("precision") {
        None => Ok(Precision::F32),
        Some("f32") => Ok(Precision::F32),
        Some("f64") => Ok(Precision::F64),
        Some(raw) => Err(GdaError::BadValue {
            key: "precision".into(),
            msg: format!("`{raw}` is not `f32` or `f64`"),
        }),
    }
}

fn parse_lambda_init(kv: &KvFile) -> Result<LambdaInit> {
    match kv.get("lambda_init_mode") {
        None | Some("schedule") => {
            if kv.get("lambda_init_value").is_some() {
                return Err(GdaError::BadValue {
                    key: "lambda_init_value".into(),
                    msg: "only meaningful with lambda_init_mode = fixed".into(),
                });
            }
            Ok(LambdaInit::Schedule)
        }
        Some("fixed") => {
            let v = kv
                .get_f64("lambda_init_value")?
                .ok_or_else(|| GdaError::MissingKey("lambda_init_value".into()))?;
            Ok(LambdaInit::Fixed(v))
        }
        Some(raw) => Err(GdaError::BadValue {
            key: "lambda_init_mode".into(),
            msg: format!("`{raw}` is not `schedule` or `fixed`"),
        }),
    }
}

/// Build a model config from parsed keys. `d_model`, `heads` and `n_layers`
/// are required; everything else has a documented default (`d_head` derives
/// from `d_model / heads`, `n_kv` defaults to one unit per signal head).
pub fn lm_config_from_kv(kv: &KvFile) -> Result<LmConfig> {
    let d_model = kv
        .get_usize("d_model")?
        .ok_or_else(|| GdaError::MissingKey("d_model".into()))?;
    let heads = kv
        .get_usize("heads")?
        .ok_or_else(|| GdaError::MissingKey("heads".into()))?;
    let n_layers = kv
        .get_usize("n_layers")?
        .ok_or_else(|| GdaError::MissingKey("n_layers".into()))?;
    let ratio = kv.usize_or("ratio", 1)?;
    let d_head = match kv.get_usize("d_head")? {
        Some(v) => v,
        None => {
            if heads == 0 || d_model % heads != 0 {
                return Err(GdaError::BadValue {
                    key: "d_head".into(),
                    msg: format!(
                        "cannot default to d_model / heads ({d_model} / {heads}); set d_head explicitly"
                    ),
                });
            }
            d_model / heads
        }
    };
    let noise = if ratio + 1 > 0 { heads / (ratio + 1) } else { 0 };
    let signal = heads.saturating_sub(noise);
    let n_kv = kv.usize_or("n_kv", signal.max(1))?;
    let gda = GdaConfig {
        d_model,
        n_layers,
        heads,
        ratio,
        d_head,
        n_kv,
        rope_theta: kv.f64_or("rope_theta", 10_000.0)?,
        max_seq_len: kv.usize_or("max_seq_len", 4096)?,
        lambda_init: parse_lambda_init(kv)?,
        precision: parse_precision(kv)?,
    };
    let cfg = LmConfig {
        vocab_size: kv.usize_or("vocab_size", BYTE_VOCAB_SIZE)?,
        mlp_hidden: kv.usize_or("mlp_hidden", default_mlp_hidden(gda.d_model))?,
        tie_embeddings: kv.bool_or("tie_embeddings", true)?,
        gda,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Render a model config as header lines. `{:?}` on f64 prints the shortest
/// string that parses back to the same bits, so render/parse round-trips
/// exactly.
pub fn lm_config_to_kv(cfg: &LmConfig) -> String {
    let mut out = String::new();
    let g = &cfg.gda;
    out.push_str(&format!("d_model = {}\n", g.d_model));
    out.push_str(&format!("n_layers = {}\n", g.n_layers));
    out.push_str(&format!("heads = {}\n", g.heads));
    out.push_str(&format!("ratio = {}\n", g.ratio));
    out.push_str(&format!("d_head = {}\n", g.d_head));
    out.push_str(&format!("n_kv = {}\n", g.n_kv));
    out.push_str(&format!("rope_theta = {:?}\n", g.rope_theta));
    out.push_str(&format!("max_seq_len = {}\n", g.max_seq_len));
    match g.lambda_init {
        LambdaInit::Schedule => out.push_str("lambda_init_mode = schedule\n"),
        LambdaInit::Fixed(v) => {
            out.push_str("lambda_init_mode = fixed\n");
            out.push_str(&format!("lambda_init_value = {v:?}\n"));
        }
    }
    out.push_str(&format!("precision = {}\n", g.precision));
    out.push_str(&format!("vocab_size = {}\n", cfg.vocab_size));
    out.push_str(&format!("mlp_hidden = {}\n", cfg.mlp_hidden));
    out.push_str(&format!("tie_embeddings = {}\n", cfg.tie_embeddings));
    out
}

/// Training config from parsed keys; every key is optional and falls back
/// to `TrainConfig::default()`.
pub fn train_config_from_kv(kv: &KvFile) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        peak_lr: kv.f64_or("peak_lr", d.peak_lr)?,
        beta1: kv.f64_or("beta1", d.beta1)?,
        beta2: kv.f64_or("beta2", d.beta2)?,
        weight_decay: kv.f64_or("weight_decay", d.weight_decay)?,
        warmup_frac: kv.f64_or("warmup_frac", d.warmup_frac)?,
        decay_frac: kv.f64_or("decay_frac", d.decay_frac)?,
        total_steps: kv.u64_or("total_steps", d.total_steps)?,
        batch_sequences: kv.usize_or("batch_sequences", d.batch_sequences)?,
        seq_len: kv.usize_or("seq_len", d.seq_len)?,
        seed: kv.u64_or("seed", d.seed)?,
        grad_clip: kv.f64_or("grad_clip", d.grad_clip)?,
        eval_every: kv.u64_or("eval_every", d.eval_every)?,
        checkpoint_every: kv.u64_or("checkpoint_every", d.checkpoint_every)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_gda() -> GdaConfig {
        GdaConfig {
            d_model: 16,
            n_layers: 1,
            heads: 4,
            ratio: 3,
            d_head: 4,
            n_kv: 1,
            rope_theta: 10_000.0,
            max_seq_len: 64,
            lambda_init: LambdaInit::Schedule,
            precision: Precision::F64,
        }
    }

    #[test]
    fn lambda_schedule_reference_values() {
        // Layer 1: 0.8 - 0.6 * e^0 = 0.2.
        assert!((lambda_init_schedule(1) - 0.2).abs() < 1e-12);
        // Layer 2: 0.8 - 0.6 * e^{-0.3}.
        let want = 0.8 - 0.6 * (-0.3f64).exp();
        assert!((lambda_init_schedule(2) - want).abs() < 1e-15);
        assert!((lambda_init_schedule(2) - 0.355_509_067_590_969).abs() < 1e-12);
        // Deep layers approach 0.8 from below and never reach it.
        assert!((lambda_init_schedule(200) - 0.8).abs() < 1e-12);
        for l in 1..50 {
            assert!(lambda_init_schedule(l) < lambda_init_schedule(l + 1));
            assert!(lambda_init_schedule(l) >= 0.2 && lambda_init_schedule(l) < 0.8);
        }
    }

    #[test]
    fn head_bookkeeping_matches_published_allocation() {
        // 48 heads: ratio -> (signal, noise) follows H * G/(G+1), H/(G+1).
        for (ratio, signal, noise) in [
            (1usize, 24usize, 24usize),
            (2, 32, 16),
            (3, 36, 12),
            (5, 40, 8),
            (11, 44, 4),
        ] {
            let cfg = GdaConfig::preset_48(ratio);
            assert_eq!(cfg.signal_heads(), signal, "ratio {ratio}");
            assert_eq!(cfg.noise_heads(), noise, "ratio {ratio}");
            assert_eq!(cfg.signal_heads() + cfg.noise_heads(), 48);
        }
        // Published preset is a runnable config where 12 | signal.
        assert!(GdaConfig::preset_48(1).validate().is_ok());
        assert!(GdaConfig::preset_48(3).validate().is_ok());
        // Elsewhere the fixed 12 kv units conflict with the signal count;
        // the preset still serves for accounting but cannot be instantiated.
        assert!(GdaConfig::preset_48(2).validate().is_err());
        assert!(GdaConfig::preset_48(5).validate().is_err());
    }

    #[test]
    fn partner_maps_reference_values() {
        let cfg = GdaConfig::preset_48(3); // signal 36, noise 12, kv 12
        assert_eq!(cfg.head_group_index(0).unwrap(), 0);
        assert_eq!(cfg.head_group_index(13).unwrap(), 1);
        assert_eq!(cfg.head_group_index(35).unwrap(), 2);
        assert!(cfg.head_group_index(36).is_err());

        assert_eq!(cfg.noise_partner(0).unwrap(), 0);
        assert_eq!(cfg.noise_partner(12).unwrap(), 0);
        assert_eq!(cfg.noise_partner(35).unwrap(), 11);
        assert!(cfg.noise_partner(36).is_err());

        // kv_group = 36 / 12 = 3 heads per unit.
        assert_eq!(cfg.kv_partner(0).unwrap(), 0);
        assert_eq!(cfg.kv_partner(2).unwrap(), 0);
        assert_eq!(cfg.kv_partner(3).unwrap(), 1);
        assert_eq!(cfg.kv_partner(35).unwrap(), 11);

        // ratio 1: each noise head pairs with exactly one signal head.
        let even = GdaConfig::preset_48(1);
        for i in 0..24 {
            assert_eq!(even.noise_partner(i).unwrap(), i);
        }
    }

    #[test]
    fn noise_partner_fan_in_is_exactly_ratio() {
        let cfg = toy_gda(); // signal 3, noise 1
        let mut counts = vec![0usize; cfg.noise_heads()];
        for i in 0..cfg.signal_heads() {
            counts[cfg.noise_partner(i).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c == cfg.ratio));

        let cfg = GdaConfig::preset_48(3);
        let mut counts = vec![0usize; cfg.noise_heads()];
        for i in 0..cfg.signal_heads() {
            counts[cfg.noise_partner(i).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c == 3));
    }

    #[test]
    fn validate_rejects_bad_geometry() {
        let mut cfg = toy_gda();
        cfg.heads = 5; // (3 + 1) does not divide 5
        assert!(cfg.validate().is_err());

        let mut cfg = toy_gda();
        cfg.d_head = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = toy_gda();
        cfg.n_kv = 2; // does not divide 3 signal heads
        assert!(cfg.validate().is_err());

        let mut cfg = toy_gda();
        cfg.lambda_init = LambdaInit::Fixed(1.0);
        assert!(cfg.validate().is_err());
        cfg.lambda_init = LambdaInit::Fixed(0.0);
        assert!(cfg.validate().is_ok());

        let mut cfg = toy_gda();
        cfg.rope_theta = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mlp_hidden_default_rounds_up_to_64() {
        assert_eq!(default_mlp_hidden(128), 384); // 341.3 -> 384
        assert_eq!(default_mlp_hidden(1536), 4096); // exactly 4096
        assert_eq!(default_mlp_hidden(64), 192); // 170.7 -> 192
        assert_eq!(default_mlp_hidden(1), 64);
    }

    #[test]
    fn kv_parser_accepts_comments_and_rejects_malformed_lines() {
        let kv = KvFile::parse("# comment\n\n a = 1 \nb = two words\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("two words"));

        assert!(KvFile::parse("no equals sign").is_err());
        assert!(KvFile::parse("a = 1\na = 2").is_err());
        assert!(KvFile::parse("= 1").is_err());
    }

    #[test]
    fn kv_typed_getters_name_the_key_on_bad_values() {
        let kv = KvFile::parse("steps = soon").unwrap();
        let err = kv.get_u64("steps").unwrap_err();
        assert!(err.to_string().contains("steps"), "{err}");
        assert!(kv.get_u64("missing").unwrap().is_none());
        let err = kv.require("missing").unwrap_err();
        assert!(matches!(err, GdaError::MissingKey(k) if k == "missing"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let kv = KvFile::parse("d_model = 8\nheds = 4").unwrap();
        let err = kv.check_known(LM_KEYS).unwrap_err();
        assert!(matches!(err, GdaError::UnknownKey(k) if k == "heds"));
    }

    #[test]
    fn lm_config_parse_requires_core_keys_and_defaults_the_rest() {
        let kv = KvFile::parse("d_model = 16\nheads = 4\nn_layers = 1\nratio = 3\nn_kv = 1").unwrap();
        let cfg = lm_config_from_kv(&kv).unwrap();
        assert_eq!(cfg.gda.d_head, 4); // d_model / heads
        assert_eq!(cfg.vocab_size, BYTE_VOCAB_SIZE);
        assert_eq!(cfg.mlp_hidden, default_mlp_hidden(16));
        assert!(cfg.tie_embeddings);
        assert_eq!(cfg.gda.lambda_init, LambdaInit::Schedule);

        let kv = KvFile::parse("heads = 4\nn_layers = 1").unwrap();
        let err = lm_config_from_kv(&kv).unwrap_err();
        assert!(matches!(err, GdaError::MissingKey(k) if k == "d_model"));
    }

    #[test]
    fn lm_config_render_parse_roundtrip_is_exact() {
        let mut cfg = LmConfig::with_defaults(toy_gda());
        cfg.gda.rope_theta = 123.456789012345;
        cfg.gda.lambda_init = LambdaInit::Fixed(0.31);
        cfg.tie_embeddings = false;
        let text = lm_config_to_kv(&cfg);
        let kv = KvFile::parse(&text).unwrap();
        kv.check_known(LM_KEYS).unwrap();
        let back = lm_config_from_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn lambda_init_value_requires_fixed_mode() {
        let kv = KvFile::parse(
            "d_model = 16\nheads = 4\nn_layers = 1\nratio = 3\nn_kv = 1\nlambda_init_value = 0.5",
        )
        .unwrap();
        assert!(lm_config_from_kv(&kv).is_err());

        let kv = KvFile::parse(
            "d_model = 16\nheads = 4\nn_layers = 1\nratio = 3\nn_kv = 1\nlambda_init_mode = fixed",
        )
        .unwrap();
        let err = lm_config_from_kv(&kv).unwrap_err();
        assert!(matches!(err, GdaError::MissingKey(k) if k == "lambda_init_value"));
    }

    #[test]
    fn train_config_defaults_mirror_recipe() {
        let d = TrainConfig::default();
        assert_eq!(d.peak_lr, 5e-4);
        assert_eq!(d.beta1, 0.9);
        assert_eq!(d.beta2, 0.95);
        assert_eq!(d.weight_decay, 0.1);
        assert_eq!(d.warmup_frac, 0.05);
        assert_eq!(d.decay_frac, 0.10);
        assert!(d.validate().is_ok());

        let kv = KvFile::parse("total_steps = 2000\npeak_lr = 1e-3").unwrap();
        let cfg = train_config_from_kv(&kv).unwrap();
        assert_eq!(cfg.total_steps, 2000);
        assert_eq!(cfg.peak_lr, 1e-3);
        assert_eq!(cfg.beta2, 0.95);
    }

    #[test]
    fn train_config_rejects_inconsistent_phases() {
        let mut cfg = TrainConfig::default();
        cfg.warmup_frac = 0.7;
        cfg.decay_frac = 0.5;
        assert!(cfg.validate().is_err());
        cfg.warmup_frac = -0.1;
        assert!(cfg.validate().is_err());
    }
}

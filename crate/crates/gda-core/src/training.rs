//! Desk-scale pretraining loop: AdamW with decoupled weight decay, a
//! warmup-stable-decay learning-rate schedule, global gradient clipping,
//! byte-level corpus windows, and bit-reproducible checkpoint/resume.
//!
//! Design decisions:
//! - The schedule is linear 0 -> peak over the warmup span, flat at peak,
//!   then linear peak -> 0 over the decay span. `lr(step) = peak * step / W`
//!   during warmup, so step 0 runs at lr 0 (a pure moment-accumulation
//!   step); the midpoint identities in the tests pin this choice.
//! - Weight decay skips RMSNorm gains (including the per-head gains) and the
//!   reparameterization vectors of the differential weight: shrinking those
//!   multiplicatively would fight their role as scales rather than features.
//! - Window order is a seeded Fisher-Yates permutation, redrawn per epoch via
//!   the generator's stream id. The window for global batch index k is a
//!   pure function of (seed, k), which is what makes resume bit-exact
//!   without replaying history.
//! - Optimizer moments live in the checkpoint tensor table under `optim.m.`
//!   and `optim.v.` prefixes, so a mid-run checkpoint is the complete loop
//!   state.
//! - The last windows of the corpus are held out for perplexity evaluation
//!   (about 5%, at least one window when the corpus allows it); training
//!   never touches them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{TrainConfig, BOS_ID, EOS_ID};
use crate::error::{GdaError, Result};
use crate::lm::{byte_tokenize, Model};
use crate::tensor::{Scalar, Tensor};

/// Warmup-stable-decay learning rate for `step` in `0..total_steps`.
pub fn wsd_lr(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.total_steps {
        return Err(GdaError::IndexOutOfRange {
            what: "schedule step",
            index: step as usize,
            bound: cfg.total_steps as usize,
        });
    }
    let total = cfg.total_steps as f64;
    let warmup = (cfg.warmup_frac * total).round();
    let decay = (cfg.decay_frac * total).round();
    let s = step as f64;
    if s < warmup {
        Ok(cfg.peak_lr * s / warmup)
    } else if s >= total - decay {
        Ok(cfg.peak_lr * (total - s) / decay)
    } else {
        Ok(cfg.peak_lr)
    }
}

/// Parameters whose decoupled weight decay is skipped: norm gains (layer,
/// final, and per-head) and the lambda reparameterization vectors.
pub fn decay_exempt(name: &str) -> bool {
    name.ends_with("norm.gain")
        || name.ends_with("head_gains")
        || name.ends_with(".lq1")
        || name.ends_with(".lk1")
        || name.ends_with(".lq2")
        || name.ends_with(".lk2")
}

/// One AdamW update over a flat slice. `t` is the 1-based step count used
/// for bias correction; `wd` must already be zeroed for exempt parameters.
pub fn adamw_update_slice<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    wd: f64,
) {
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one_m_b1 = T::from_f64(1.0 - beta1);
    let one_m_b2 = T::from_f64(1.0 - beta2);
    let corr1 = T::from_f64(1.0 / (1.0 - beta1.powi(t as i32)));
    let corr2 = T::from_f64(1.0 / (1.0 - beta2.powi(t as i32)));
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);
    let wd_t = T::from_f64(wd);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + one_m_b1 * g;
        v[i] = b2 * v[i] + one_m_b2 * g * g;
        let m_hat = m[i] * corr1;
        let v_hat = v[i] * corr2;
        param[i] = param[i] - lr_t * (m_hat / (v_hat.sqrt() + eps_t) + wd_t * param[i]);
    }
}

pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments, keyed by parameter name like the checkpoint
/// tensor table.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    /// Completed optimizer steps (drives bias correction).
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn fresh(model: &Model<T>) -> AdamState<T> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        model.visit_params(|name, t| {
            m.insert(name.to_string(), Tensor::zeros(t.shape()));
            v.insert(name.to_string(), Tensor::zeros(t.shape()));
        });
        AdamState { t: 0, m, v }
    }

    /// Restore from `optim.m.*` / `optim.v.*` tensors if the checkpoint has
    /// them (a mid-run save), otherwise start cold.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>, model: &Model<T>) -> Result<AdamState<T>> {
        let mut state = AdamState::fresh(model);
        if !ckpt.has_optimizer_state() {
            return Ok(state);
        }
        state.t = ckpt.step;
        let mut err = None;
        for (name, slot) in state.m.iter_mut() {
            match ckpt.require(&format!("optim.m.{name}")) {
                Ok(t) if t.shape() == slot.shape() => *slot = t.clone(),
                Ok(t) => {
                    err = Some(GdaError::Format(format!(
                        "optim.m.{name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
                Err(e) => err = Some(e),
            }
            if err.is_some() {
                break;
            }
        }
        if err.is_none() {
            for (name, slot) in state.v.iter_mut() {
                match ckpt.require(&format!("optim.v.{name}")) {
                    Ok(t) if t.shape() == slot.shape() => *slot = t.clone(),
                    Ok(t) => {
                        err = Some(GdaError::Format(format!(
                            "optim.v.{name} has shape {:?}, expected {:?}",
                            t.shape(),
                            slot.shape()
                        )))
                    }
                    Err(e) => err = Some(e),
                }
                if err.is_some() {
                    break;
                }
            }
        }
        match err {
            Some(e) => Err(e),
            None => Ok(state),
        }
    }

    pub fn store(&self, ckpt: &mut Checkpoint<T>) {
        for (name, t) in &self.m {
            ckpt.insert(format!("optim.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            ckpt.insert(format!("optim.v.{name}"), t.clone());
        }
    }
}

/// Apply one AdamW step to every model parameter. Increments `state.t`.
pub fn adamw_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let mut err = None;
    model.visit_params_mut(|name, param| {
        if err.is_some() {
            return;
        }
        let (Some(g), Some(m), Some(v)) = (
            grads.get(name),
            state.m.get_mut(name),
            state.v.get_mut(name),
        ) else {
            err = Some(GdaError::Config(format!(
                "optimizer is missing state or gradient for `{name}`"
            )));
            return;
        };
        if g.shape() != param.shape() {
            err = Some(GdaError::ShapeMismatch {
                op: "adamw_step",
                lhs: g.shape().to_vec(),
                rhs: param.shape().to_vec(),
            });
            return;
        }
        let wd = if decay_exempt(name) {
            0.0
        } else {
            cfg.weight_decay
        };
        adamw_update_slice(
            param.data_mut(),
            g.data(),
            m.data_mut(),
            v.data_mut(),
            t,
            lr,
            cfg.beta1,
            cfg.beta2,
            ADAM_EPS,
            wd,
        );
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let mut sum_sq = 0.0f64;
    for t in grads.values() {
        sum_sq += t.sum_sq_f64();
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for t in grads.values_mut() {
            t.scale_in_place(scale);
        }
    }
    norm
}

/// Tokenized corpus with deterministic windowing: documents are wrapped in
/// BOS/EOS and concatenated; window `w` spans tokens
/// `[w * seq_len, w * seq_len + seq_len]`, sharing one boundary token with
/// its neighbor so every position is both input and target exactly once.
#[derive(Debug, Clone)]
pub struct CorpusStream {
    tokens: Vec<u32>,
    seq_len: usize,
    seed: u64,
    n_windows: usize,
    n_train: usize,
}

impl CorpusStream {
    pub fn from_documents(docs: &[&[u8]], seq_len: usize, seed: u64) -> Result<CorpusStream> {
        if docs.is_empty() {
            return Err(GdaError::Config("corpus has no documents".into()));
        }
        if seq_len == 0 {
            return Err(GdaError::Config("seq_len must be positive".into()));
        }
        let mut tokens = Vec::new();
        for doc in docs {
            tokens.push(BOS_ID);
            tokens.extend(byte_tokenize(doc));
            tokens.push(EOS_ID);
        }
        let n_windows = (tokens.len() - 1) / seq_len;
        if n_windows == 0 {
            return Err(GdaError::CorpusTooSmall {
                needed: seq_len + 1,
                got: tokens.len(),
            });
        }
        // Hold out about 5% of windows (at least one) for eval; a one-window
        // corpus trains on everything and has no eval slice.
        let n_eval = if n_windows >= 2 {
            (n_windows / 20).max(1)
        } else {
            0
        };
        Ok(CorpusStream {
            tokens,
            seq_len,
            seed,
            n_windows,
            n_train: n_windows - n_eval,
        })
    }

    /// Read files as raw bytes, one document per path.
    pub fn ingest(paths: &[PathBuf], seq_len: usize, seed: u64) -> Result<CorpusStream> {
        if paths.is_empty() {
            return Err(GdaError::Config("no corpus files given".into()));
        }
        let mut docs = Vec::with_capacity(paths.len());
        for p in paths {
            docs.push(fs::read(p)?);
        }
        let views: Vec<&[u8]> = docs.iter().map(|d| d.as_slice()).collect();
        CorpusStream::from_documents(&views, seq_len, seed)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn n_train_windows(&self) -> usize {
        self.n_train
    }

    pub fn n_eval_windows(&self) -> usize {
        self.n_windows - self.n_train
    }

    /// Window `w` as `seq_len + 1` token ids (inputs plus trailing target).
    pub fn window(&self, w: usize) -> Result<&[u32]> {
        if w >= self.n_windows {
            return Err(GdaError::IndexOutOfRange {
                what: "corpus window",
                index: w,
                bound: self.n_windows,
            });
        }
        let start = w * self.seq_len;
        Ok(&self.tokens[start..start + self.seq_len + 1])
    }

    /// Training window for global batch index `k`: epoch `k / n_train`
    /// selects a fresh seeded permutation, so the mapping is a pure function
    /// of `(seed, k)` with no iteration history.
    pub fn train_window_id(&self, k: u64) -> usize {
        let epoch = k / self.n_train as u64;
        let within = (k % self.n_train as u64) as usize;
        self.epoch_permutation(epoch)[within]
    }

    fn epoch_permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_add(1));
        let mut idx: Vec<usize> = (0..self.n_train).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    pub fn eval_window_ids(&self) -> std::ops::Range<usize> {
        self.n_train..self.n_windows
    }
}

/// Teacher-forced perplexity `exp(mean NLL)` over the held-out windows.
pub fn eval_perplexity<T: Scalar>(model: &Model<T>, corpus: &CorpusStream) -> Result<f64> {
    perplexity_over(model, corpus, corpus.eval_window_ids())
}

fn perplexity_over<T: Scalar>(
    model: &Model<T>,
    corpus: &CorpusStream,
    windows: std::ops::Range<usize>,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(GdaError::EmptySplit("perplexity evaluation"));
    }
    let mut total_nll = 0.0f64;
    let mut total_tokens = 0usize;
    for w in windows {
        let window = corpus.window(w)?;
        let inputs = &window[..window.len() - 1];
        let targets = &window[1..];
        let logits = model.forward(inputs)?;
        let loss = crate::lm::cross_entropy(&logits, targets)?;
        total_nll += loss * targets.len() as f64;
        total_tokens += targets.len();
    }
    Ok((total_nll / total_tokens as f64).exp())
}

/// One metrics line. Only the first four fields are deterministic;
/// throughput and wall time depend on the machine.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub tokens_per_sec: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    /// Full log line; float formatting round-trips exactly, so equality of
    /// lines is equality of values.
    pub fn to_line(&self) -> String {
        format!(
            "step={} lr={:?} loss={:?} grad_norm={:?} tokens_per_sec={:.1} wall_ms={:.1}",
            self.step, self.lr, self.loss, self.grad_norm, self.tokens_per_sec, self.wall_ms
        )
    }

    /// The machine-independent prefix of the line, for determinism checks.
    pub fn deterministic_fields(&self) -> String {
        format!(
            "step={} lr={:?} loss={:?} grad_norm={:?}",
            self.step, self.lr, self.loss, self.grad_norm
        )
    }

    pub fn parse(line: &str) -> Result<StepRecord> {
        let mut map = BTreeMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| GdaError::Format(format!("bad metrics field `{part}`")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<f64> {
            map.get(k)
                .ok_or_else(|| GdaError::Format(format!("metrics line missing `{k}`")))?
                .parse()
                .map_err(|_| GdaError::Format(format!("metrics field `{k}` is not a number")))
        };
        Ok(StepRecord {
            step: get("step")? as u64,
            lr: get("lr")?,
            loss: get("loss")?,
            grad_norm: get("grad_norm")?,
            tokens_per_sec: get("tokens_per_sec")?,
            wall_ms: get("wall_ms")?,
        })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub records: Vec<StepRecord>,
    /// `(step, perplexity)` pairs from the held-out slice.
    pub evals: Vec<(u64, f64)>,
}

/// Run the loop from the checkpoint's step to `cfg.total_steps`. Writes
/// `metrics.log`, periodic `ckpt-step-N.gda` saves, and `ckpt-final.gda`
/// under `out_dir`. Deterministic given seed, config, and precision.
pub fn train<T: Scalar>(
    ckpt: &Checkpoint<T>,
    corpus: &CorpusStream,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.seq_len != cfg.seq_len {
        return Err(GdaError::Config(format!(
            "corpus windows are {} tokens, train config wants seq_len {}",
            corpus.seq_len, cfg.seq_len
        )));
    }
    if cfg.seq_len > ckpt.config.gda.max_seq_len {
        return Err(GdaError::Config(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            cfg.seq_len, ckpt.config.gda.max_seq_len
        )));
    }
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.log");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;

    let mut model = Model::from_checkpoint(ckpt)?;
    let mut state = AdamState::from_checkpoint(ckpt, &model)?;
    let start_step = ckpt.step;
    if state.t != start_step {
        return Err(GdaError::Config(format!(
            "optimizer step {} disagrees with checkpoint step {start_step}",
            state.t
        )));
    }

    let save = |model: &Model<T>, state: &AdamState<T>, step: u64, path: &Path| -> Result<()> {
        let mut out = model.to_checkpoint(step, ckpt.seed);
        out.step = step;
        state.store(&mut out);
        out.save(path)
    };

    let mut records = Vec::new();
    let mut evals = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let batch = cfg.batch_sequences;
    for step in start_step..cfg.total_steps {
        let start = Instant::now();
        let lr = wsd_lr(step, cfg)?;

        // Zeroed accumulators, then sum gradients over the batch windows in
        // their deterministic order and average.
        let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        model.visit_params(|name, t| {
            acc.insert(name.to_string(), Tensor::zeros(t.shape()));
        });
        let mut loss_sum = 0.0f64;
        for b in 0..batch {
            let k = step * batch as u64 + b as u64;
            let w = corpus.train_window_id(k);
            let window = corpus.window(w)?;
            let inputs = &window[..window.len() - 1];
            let targets = &window[1..];
            // Overflow inside the forward pass is the same event as a
            // non-finite loss: abort pointing at the last good checkpoint.
            let (loss, grads) = match model.loss_and_grads(inputs, targets) {
                Ok(v) => v,
                Err(GdaError::NonFinite { .. }) => {
                    return Err(GdaError::NonFiniteLoss {
                        step,
                        last_good: last_good.clone(),
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss;
            let mut err = None;
            grads.visit(|name, g| {
                if err.is_none() {
                    err = acc.get_mut(name).expect("walks share names").add_assign(g).err();
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        let loss = loss_sum / batch as f64;
        if !loss.is_finite() {
            return Err(GdaError::NonFiniteLoss {
                step,
                last_good: last_good.clone(),
            });
        }
        let inv_b = T::from_f64(1.0 / batch as f64);
        for g in acc.values_mut() {
            g.scale_in_place(inv_b);
        }
        let grad_norm = clip_gradients(&mut acc, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(GdaError::NonFiniteLoss {
                step,
                last_good: last_good.clone(),
            });
        }
        adamw_step(&mut model, &acc, &mut state, lr, cfg)?;

        let wall = start.elapsed().as_secs_f64();
        let record = StepRecord {
            step,
            lr,
            loss,
            grad_norm,
            tokens_per_sec: (batch * cfg.seq_len) as f64 / wall.max(1e-9),
            wall_ms: wall * 1e3,
        };
        writeln!(metrics, "{}", record.to_line())?;
        records.push(record);
        let done = step + 1;

        if done % cfg.eval_every == 0 && corpus.n_eval_windows() > 0 {
            let ppl = eval_perplexity(&model, corpus)?;
            writeln!(metrics, "eval step={done} perplexity={ppl:?}")?;
            evals.push((done, ppl));
        }
        if done % cfg.checkpoint_every == 0 && done < cfg.total_steps {
            let path = out_dir.join(format!("ckpt-step-{done}.gda"));
            save(&model, &state, done, &path)?;
            last_good = Some(path);
        }
    }

    let final_path = out_dir.join("ckpt-final.gda");
    save(&model, &state, cfg.total_steps, &final_path)?;
    metrics.flush()?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        metrics_path,
        records,
        evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GdaConfig, LambdaInit, LmConfig};
    use crate::tensor::Precision;

    fn toy_lm() -> LmConfig {
        LmConfig::with_defaults(GdaConfig {
            d_model: 16,
            n_layers: 1,
            heads: 4,
            ratio: 1,
            d_head: 4,
            n_kv: 2,
            rope_theta: 10_000.0,
            max_seq_len: 16,
            lambda_init: LambdaInit::Schedule,
            precision: Precision::F64,
        })
    }

    fn toy_train(total: u64) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            batch_sequences: 2,
            seq_len: 16,
            eval_every: 4,
            checkpoint_every: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn wsd_matches_the_three_closed_form_points() {
        let cfg = TrainConfig {
            total_steps: 1000,
            ..TrainConfig::default()
        };
        // Warmup is 50 steps: midpoint is exactly half peak.
        assert_eq!(wsd_lr(25, &cfg).unwrap(), 0.5 * cfg.peak_lr);
        assert_eq!(wsd_lr(500, &cfg).unwrap(), cfg.peak_lr);
        // Decay covers the last 100 steps: 950 is its midpoint.
        assert_eq!(wsd_lr(950, &cfg).unwrap(), 0.5 * cfg.peak_lr);
        assert!(wsd_lr(1000, &cfg).is_err());
    }

    #[test]
    fn wsd_is_continuous_at_phase_boundaries() {
        let cfg = TrainConfig {
            total_steps: 1000,
            ..TrainConfig::default()
        };
        let warmup = 50u64;
        let decay_start = 900u64;
        let max_inc = cfg.peak_lr / 50.0;
        for step in [warmup - 1, warmup, decay_start - 1, decay_start] {
            let a = wsd_lr(step, &cfg).unwrap();
            let b = wsd_lr(step + 1, &cfg).unwrap();
            assert!((a - b).abs() <= max_inc + 1e-15, "jump at {step}");
        }
        assert_eq!(wsd_lr(0, &cfg).unwrap(), 0.0);
        assert_eq!(wsd_lr(1, &cfg).unwrap(), cfg.peak_lr / 50.0);
        assert_eq!(wsd_lr(999, &cfg).unwrap(), cfg.peak_lr / 100.0);
    }

    #[test]
    fn adamw_first_step_matches_hand_evaluation() {
        let mut param = [0.0f64];
        let grad = [1.0f64];
        let (mut m, mut v) = ([0.0f64], [0.0f64]);
        adamw_update_slice(&mut param, &grad, &mut m, &mut v, 1, 0.1, 0.9, 0.95, 1e-8, 0.0);
        // m_hat = v_hat = 1 exactly after bias correction.
        let want = -0.1 / (1.0 + 1e-8);
        assert!((param[0] - want).abs() < 1e-10, "got {}", param[0]);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_gradient_is_identity_or_pure_shrink() {
        let mut param = [2.0f64];
        let (mut m, mut v) = ([0.0f64], [0.0f64]);
        adamw_update_slice(&mut param, &[0.0], &mut m, &mut v, 1, 0.1, 0.9, 0.95, 1e-8, 0.0);
        assert_eq!(param[0], 2.0);
        adamw_update_slice(&mut param, &[0.0], &mut m, &mut v, 2, 0.1, 0.9, 0.95, 1e-8, 0.5);
        assert!((param[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn adamw_constant_gradient_steps_are_sign_consistent_and_bounded() {
        let mut param = [0.3f64];
        let (mut m, mut v) = ([0.0f64], [0.0f64]);
        let lr = 0.02;
        let mut prev = param[0];
        for t in 1..=20 {
            adamw_update_slice(&mut param, &[0.7], &mut m, &mut v, t, lr, 0.9, 0.95, 1e-8, 0.0);
            let delta = param[0] - prev;
            assert!(delta < 0.0, "positive gradient must push the value down");
            assert!(delta.abs() <= lr * (1.0 + 1e-6));
            prev = param[0];
        }
    }

    #[test]
    fn decay_exemption_covers_gains_and_lambda_vectors() {
        assert!(decay_exempt("layers.3.attn_norm.gain"));
        assert!(decay_exempt("final_norm.gain"));
        assert!(decay_exempt("layers.0.attn.head_gains"));
        assert!(decay_exempt("layers.0.attn.lq1"));
        assert!(decay_exempt("layers.7.attn.lk2"));
        assert!(!decay_exempt("embed"));
        assert!(!decay_exempt("layers.0.attn.wq1"));
        assert!(!decay_exempt("layers.0.mlp.w_down"));
        assert!(!decay_exempt("lm_head"));
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::new(vec![2], vec![3.0f64, 0.0]).unwrap());
        grads.insert("b".to_string(), Tensor::new(vec![1], vec![4.0f64]).unwrap());
        let norm = clip_gradients(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let after: f64 = grads.values().map(|t| t.sum_sq_f64()).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-12);
        assert!((after - 1.0).abs() < 1e-12);

        // Under the ceiling: untouched, bit for bit.
        let mut small = BTreeMap::new();
        small.insert("a".to_string(), Tensor::new(vec![1], vec![0.5f64]).unwrap());
        let norm = clip_gradients(&mut small, 1.0);
        assert_eq!(norm, 0.5);
        assert_eq!(small["a"].data(), &[0.5]);
    }

    #[test]
    fn ingest_wraps_documents_in_sentinels() {
        let corpus = CorpusStream::from_documents(&[b"AB"], 3, 0).unwrap();
        assert_eq!(corpus.tokens(), &[BOS_ID, 65, 66, EOS_ID]);
        assert_eq!(corpus.n_windows(), 1);
        assert_eq!(corpus.window(0).unwrap(), &[BOS_ID, 65, 66, EOS_ID]);

        let two = CorpusStream::from_documents(&[b"A", b"B"], 2, 0).unwrap();
        assert_eq!(two.tokens(), &[BOS_ID, 65, EOS_ID, BOS_ID, 66, EOS_ID]);

        assert!(matches!(
            CorpusStream::from_documents(&[b""], 4, 0),
            Err(GdaError::CorpusTooSmall { needed: 5, got: 2 })
        ));
        assert!(CorpusStream::from_documents(&[], 4, 0).is_err());
    }

    #[test]
    fn window_order_is_seeded_and_reshuffles_per_epoch() {
        let data = vec![7u8; 1000];
        let corpus = CorpusStream::from_documents(&[&data], 10, 42).unwrap();
        assert_eq!(corpus.n_windows(), 100);
        assert_eq!(corpus.n_eval_windows(), 5);
        let n = corpus.n_train_windows() as u64;

        let first: Vec<usize> = (0..n).map(|k| corpus.train_window_id(k)).collect();
        let again: Vec<usize> = (0..n).map(|k| corpus.train_window_id(k)).collect();
        assert_eq!(first, again, "same seed, same order");

        let mut sorted = first.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n as usize).collect::<Vec<_>>());
        assert_ne!(first, (0..n as usize).collect::<Vec<_>>(), "order is shuffled");

        let second_epoch: Vec<usize> = (n..2 * n).map(|k| corpus.train_window_id(k)).collect();
        assert_ne!(first, second_epoch, "epochs reshuffle");

        let other = CorpusStream::from_documents(&[&data], 10, 43).unwrap();
        let other_first: Vec<usize> = (0..n).map(|k| other.train_window_id(k)).collect();
        assert_ne!(first, other_first, "different seed, different order");
    }

    #[test]
    fn perplexity_of_a_zeroed_model_is_the_vocab_size() {
        let cfg = toy_lm();
        let mut model = Model::<f64>::init(&cfg, 0).unwrap();
        model.embed = Tensor::zeros(model.embed.shape());
        let data: Vec<u8> = (0..400).map(|i| (i % 251) as u8).collect();
        let corpus = CorpusStream::from_documents(&[&data], 16, 0).unwrap();
        let ppl = eval_perplexity(&model, &corpus).unwrap();
        assert!((ppl - 258.0).abs() < 1.0, "got {ppl}");
    }

    #[test]
    fn fresh_model_first_loss_is_near_uniform() {
        let cfg = toy_lm();
        let model = Model::<f64>::init(&cfg, 1).unwrap();
        let data: Vec<u8> = (0..600).map(|i| (i * 31 % 181) as u8).collect();
        let corpus = CorpusStream::from_documents(&[&data], 16, 1).unwrap();
        let dir = test_dir("fresh-loss");
        let out = train(
            &model.to_checkpoint(0, 1),
            &corpus,
            &toy_train(1),
            &dir,
        )
        .unwrap();
        let first = out.records[0].loss;
        assert!((first - 258.0f64.ln()).abs() < 0.2, "step-0 loss {first}");
        fs::remove_dir_all(&dir).unwrap();
    }

    fn test_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("gda-train-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn two_identical_runs_are_bit_identical_and_resume_matches() {
        let cfg = toy_lm();
        let model = Model::<f64>::init(&cfg, 5).unwrap();
        let data: Vec<u8> = (0..800).map(|i| (i * 17 % 200) as u8).collect();
        let corpus = CorpusStream::from_documents(&[&data], 16, 5).unwrap();
        let tcfg = toy_train(8);

        let dir_a = test_dir("det-a");
        let dir_b = test_dir("det-b");
        let out_a = train(&model.to_checkpoint(0, 5), &corpus, &tcfg, &dir_a).unwrap();
        let out_b = train(&model.to_checkpoint(0, 5), &corpus, &tcfg, &dir_b).unwrap();

        let bytes_a = fs::read(&out_a.final_checkpoint).unwrap();
        let bytes_b = fs::read(&out_b.final_checkpoint).unwrap();
        assert_eq!(bytes_a, bytes_b, "full-run determinism");
        for (ra, rb) in out_a.records.iter().zip(&out_b.records) {
            assert_eq!(ra.deterministic_fields(), rb.deterministic_fields());
        }

        // Resume from the step-4 checkpoint and rejoin run A exactly.
        let mid = Checkpoint::<f64>::load(&dir_a.join("ckpt-step-4.gda")).unwrap();
        assert_eq!(mid.step, 4);
        assert!(mid.has_optimizer_state());
        let dir_c = test_dir("det-c");
        let out_c = train(&mid, &corpus, &tcfg, &dir_c).unwrap();
        assert_eq!(out_c.records.len(), 4);
        for (rc, ra) in out_c.records.iter().zip(&out_a.records[4..]) {
            assert_eq!(rc.deterministic_fields(), ra.deterministic_fields());
        }
        let bytes_c = fs::read(&out_c.final_checkpoint).unwrap();
        assert_eq!(bytes_a, bytes_c, "resumed run converges to the same bytes");

        for d in [dir_a, dir_b, dir_c] {
            fs::remove_dir_all(&d).unwrap();
        }
    }

    #[test]
    fn training_reduces_loss_and_learns_a_period_two_pattern() {
        let cfg = toy_lm();
        let model = Model::<f64>::init(&cfg, 7).unwrap();
        let data: Vec<u8> = b"ab".iter().cycle().take(2000).cloned().collect();
        let corpus = CorpusStream::from_documents(&[&data], 16, 7).unwrap();
        let tcfg = TrainConfig {
            peak_lr: 1e-2,
            total_steps: 60,
            batch_sequences: 4,
            seq_len: 16,
            eval_every: 30,
            checkpoint_every: 1000,
            ..TrainConfig::default()
        };
        let dir = test_dir("abab");
        let out = train(&model.to_checkpoint(0, 7), &corpus, &tcfg, &dir).unwrap();
        let first = out.records[0].loss;
        let last = out.records.last().unwrap().loss;
        assert!(last < first * 0.5, "loss {first} -> {last}");
        assert!(!out.evals.is_empty());

        // The trained model continues "abab..." greedily.
        let trained =
            Model::from_checkpoint(&Checkpoint::<f64>::load(&out.final_checkpoint).unwrap())
                .unwrap();
        let prompt = byte_tokenize(b"abababab");
        let continued = trained.generate(&prompt, 6, 0.0, 0).unwrap();
        let text = crate::lm::byte_detokenize(&continued);
        assert_eq!(&text[8..], b"ababab", "got {:?}", &text[8..]);

        // Training slice perplexity beats the untrained model.
        let untrained_ppl = perplexity_over(&model, &corpus, 0..4).unwrap();
        let trained_ppl = perplexity_over(&trained, &corpus, 0..4).unwrap();
        assert!(trained_ppl < untrained_ppl);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn metrics_lines_parse_back() {
        let r = StepRecord {
            step: 3,
            lr: 2.5e-4,
            loss: 5.5,
            grad_norm: 0.75,
            tokens_per_sec: 1234.5,
            wall_ms: 110.0,
        };
        let back = StepRecord::parse(&r.to_line()).unwrap();
        assert_eq!(back.step, 3);
        assert_eq!(back.lr, 2.5e-4);
        assert_eq!(back.loss, 5.5);
        assert_eq!(back.grad_norm, 0.75);
        assert!(StepRecord::parse("step=1 loss=2").is_err());
    }

    #[test]
    fn train_rejects_mismatched_window_length() {
        let cfg = toy_lm();
        let model = Model::<f64>::init(&cfg, 0).unwrap();
        let data = vec![0u8; 600];
        let corpus = CorpusStream::from_documents(&[&data], 8, 0).unwrap();
        let err = train(
            &model.to_checkpoint(0, 0),
            &corpus,
            &toy_train(1),
            &test_dir("mismatch"),
        );
        assert!(matches!(err, Err(GdaError::Config(_))));
    }
}

//! Function-preserving model expansion: uniform hypercloning (hidden width
//! and every head group scale by the same integer) and group-differentiated
//! growth (signal heads replicate, noise heads stay put).
//!
//! Design decisions:
//! - Clone layout is copy-major/strided: target head `t` carries source head
//!   `t mod S_src`, so clones of source head `s` sit at `s, s + S_src, ...`.
//!   With the canonical partner maps this preserves noise partnerships for
//!   any replication factors, which is what makes exact preservation
//!   possible at all.
//! - KV units replicate with the signal factor. Keeping the source KV count
//!   while striding clones would force one target unit to serve clones of
//!   two different source heads, which no weight assignment can satisfy.
//! - Output-projection rows of each clone are scaled by 1/r instead of
//!   scaling values anywhere else; attention maps of clones then stay
//!   identical to their source head, which the audits check directly.
//! - Growth consumes model tensors only: optimizer state does not survive
//!   (its shapes are invalid after expansion) while step/seed metadata does.
//! - Literal clones have permanently tied gradients, so the plan carries an
//!   optional symmetry-breaking sigma (default 0 = exact preservation) that
//!   perturbs the Q1 columns of non-first clones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{GdaConfig, LmConfig};
use crate::error::{GdaError, Result};
use crate::lm::{LayerParams, Model};
use crate::tensor::{randn, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct GrowthPlan {
    pub source: LmConfig,
    pub target: LmConfig,
    /// Hidden-width factor n: d_model and mlp_hidden scale by this.
    pub hidden_factor: usize,
    /// Signal-head replication r; KV units replicate with it.
    pub signal_factor: usize,
    /// Noise-head replication: equals `hidden_factor` for uniform cloning,
    /// fixed at 1 for group-differentiated growth.
    pub noise_factor: usize,
    /// Std-dev of the optional perturbation on non-first clones; 0 keeps
    /// growth exactly function-preserving.
    pub symmetry_break_sigma: f64,
    pub symmetry_seed: u64,
}

impl GrowthPlan {
    /// Classic hypercloning: everything scales by `n`, ratio unchanged.
    pub fn uniform(source: &LmConfig, n: usize) -> Result<GrowthPlan> {
        Self::build(source, n, n, n)
    }

    /// Replicate signal heads `r` times at hidden factor `n`; noise heads
    /// keep their count, so the ratio goes from G to r*G.
    pub fn group_differentiated(source: &LmConfig, n: usize, r: usize) -> Result<GrowthPlan> {
        Self::build(source, n, r, 1)
    }

    fn build(source: &LmConfig, n: usize, rs: usize, rn: usize) -> Result<GrowthPlan> {
        let plan = GrowthPlan {
            source: source.clone(),
            target: derive_target(source, n, rs, rn)?,
            hidden_factor: n,
            signal_factor: rs,
            noise_factor: rn,
            symmetry_break_sigma: 0.0,
            symmetry_seed: 0,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Target signal-head indices carrying each source head, in clone order.
    pub fn clone_layout(&self) -> Vec<Vec<usize>> {
        let s_src = self.source.gda.signal_heads();
        let s_tgt = self.target.gda.signal_heads();
        (0..s_src)
            .map(|s| (s..s_tgt).step_by(s_src).collect())
            .collect()
    }

    /// Every structural precondition, checked before any weight is written.
    pub fn validate(&self) -> Result<()> {
        if self.hidden_factor == 0 || self.signal_factor == 0 || self.noise_factor == 0 {
            return Err(GdaError::Plan("growth factors must be >= 1".into()));
        }
        if !(self.noise_factor == 1 || self.noise_factor == self.signal_factor) {
            return Err(GdaError::Plan(format!(
                "noise factor {} must be 1 (group-differentiated) or equal the signal factor {}",
                self.noise_factor, self.signal_factor
            )));
        }
        if self.symmetry_break_sigma < 0.0 || !self.symmetry_break_sigma.is_finite() {
            return Err(GdaError::Plan(
                "symmetry-break sigma must be finite and >= 0".into(),
            ));
        }
        self.source.validate()?;
        self.target.validate()?;
        let want = derive_target(
            &self.source,
            self.hidden_factor,
            self.signal_factor,
            self.noise_factor,
        )?;
        if self.target != want {
            return Err(GdaError::Plan(
                "target config does not match the one derived from the factors".into(),
            ));
        }

        // Partnership preservation under the strided layout: the canonical
        // maps of the target must route every clone to a clone of its
        // source's partner. This holds by construction; the loop is the
        // before-writing gate the growth contract promises.
        let (src, tgt) = (&self.source.gda, &self.target.gda);
        let (s_src, h_src, kv_src) = (src.signal_heads(), src.noise_heads(), src.n_kv);
        for t in 0..tgt.signal_heads() {
            let s = t % s_src;
            if tgt.noise_partner(t)? % h_src != src.noise_partner(s)? {
                return Err(GdaError::Plan(format!(
                    "clone layout breaks the noise partnership of target head {t}"
                )));
            }
            if tgt.kv_partner(t)? % kv_src != src.kv_partner(s)? {
                return Err(GdaError::Plan(format!(
                    "clone layout breaks the KV partnership of target head {t}"
                )));
            }
        }
        Ok(())
    }
}

fn derive_target(source: &LmConfig, n: usize, rs: usize, rn: usize) -> Result<LmConfig> {
    let g = &source.gda;
    let s = g.signal_heads() * rs;
    let h = g.noise_heads() * rn;
    if s % h != 0 {
        return Err(GdaError::Plan(format!(
            "target would have {s} signal and {h} noise heads, a non-integer ratio"
        )));
    }
    let gda = GdaConfig {
        d_model: n * g.d_model,
        n_layers: g.n_layers,
        heads: s + h,
        ratio: s / h,
        d_head: g.d_head,
        n_kv: rs * g.n_kv,
        rope_theta: g.rope_theta,
        max_seq_len: g.max_seq_len,
        lambda_init: g.lambda_init,
        precision: g.precision,
    };
    let target = LmConfig {
        gda,
        vocab_size: source.vocab_size,
        mlp_hidden: n * source.mlp_hidden,
        tie_embeddings: source.tie_embeddings,
    };
    target.validate()?;
    Ok(target)
}

/// Block tiling of `W / n_in`: if the input grows to `n_in` concatenated
/// copies of x, the output becomes `n_out` concatenated copies of the
/// original product.
pub fn hyperclone_linear<T: Scalar>(
    w: &Tensor<T>,
    n_in: usize,
    n_out: usize,
) -> Result<Tensor<T>> {
    if n_in == 0 || n_out == 0 {
        return Err(GdaError::Plan("tiling factors must be >= 1".into()));
    }
    let (din, dout) = w.dims2("hyperclone_linear")?;
    let scale = T::from_f64(1.0 / n_in as f64);
    let mut out = Tensor::zeros(&[n_in * din, n_out * dout]);
    for i in 0..n_in {
        for a in 0..din {
            let src = w.row(a);
            let dst = out.row_mut(i * din + a);
            for j in 0..n_out {
                for b in 0..dout {
                    dst[j * dout + b] = src[b] * scale;
                }
            }
        }
    }
    Ok(out)
}

/// Head-blocked projection growth: `w` is `d x (units * width)` with one
/// column block per head/unit; target unit `u` copies source `u mod units`,
/// and the hidden axis tiles vertically with the 1/n input scaling.
fn grow_head_blocks<T: Scalar>(
    w: &Tensor<T>,
    units: usize,
    width: usize,
    rep: usize,
    n: usize,
) -> Result<Tensor<T>> {
    let (d, cols) = w.dims2("grow_head_blocks")?;
    if cols != units * width {
        return Err(GdaError::Plan(format!(
            "projection has {cols} columns, expected {units} x {width}"
        )));
    }
    let scale = T::from_f64(1.0 / n as f64);
    let mut out = Tensor::zeros(&[n * d, rep * units * width]);
    for tu in 0..rep * units {
        let su = tu % units;
        for i in 0..n {
            for a in 0..d {
                let src = w.row(a);
                let dst = out.row_mut(i * d + a);
                for b in 0..width {
                    dst[tu * width + b] = src[su * width + b] * scale;
                }
            }
        }
    }
    Ok(out)
}

/// Output-projection growth: row blocks follow the clone layout with the
/// 1/rep scaling, and the model axis tiles horizontally (duplicated output).
fn grow_output_rows<T: Scalar>(
    w: &Tensor<T>,
    units: usize,
    width: usize,
    rep: usize,
    n: usize,
) -> Result<Tensor<T>> {
    let (rows, d) = w.dims2("grow_output_rows")?;
    if rows != units * width {
        return Err(GdaError::Plan(format!(
            "output projection has {rows} rows, expected {units} x {width}"
        )));
    }
    let scale = T::from_f64(1.0 / rep as f64);
    let mut out = Tensor::zeros(&[rep * units * width, n * d]);
    for tu in 0..rep * units {
        let su = tu % units;
        for ch in 0..width {
            let src = w.row(su * width + ch);
            let dst = out.row_mut(tu * width + ch);
            for j in 0..n {
                for b in 0..d {
                    dst[j * d + b] = src[b] * scale;
                }
            }
        }
    }
    Ok(out)
}

/// Row duplication in clone order, no scaling (per-head gains).
fn dup_rows<T: Scalar>(g: &Tensor<T>, rep: usize) -> Result<Tensor<T>> {
    let (rows, cols) = g.dims2("dup_rows")?;
    let mut out = Tensor::zeros(&[rep * rows, cols]);
    for tu in 0..rep * rows {
        out.row_mut(tu).copy_from_slice(g.row(tu % rows));
    }
    Ok(out)
}

/// Rank-1 gain duplication along the hidden axis, no scaling.
fn dup_gain<T: Scalar>(g: &Tensor<T>, n: usize) -> Tensor<T> {
    let d = g.numel();
    let mut out = Tensor::zeros(&[n * d]);
    for i in 0..n {
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(g.data());
    }
    out
}

/// Expand a model per the plan. Pure: the source is untouched.
pub fn grow_model<T: Scalar>(model: &Model<T>, plan: &GrowthPlan) -> Result<Model<T>> {
    plan.validate()?;
    if model.config != plan.source {
        return Err(GdaError::Plan(
            "model config does not match the plan's source config".into(),
        ));
    }
    let (n, rs, rn) = (plan.hidden_factor, plan.signal_factor, plan.noise_factor);
    let src = &plan.source.gda;
    let (dh, s_src, h_src, kv_src) = (src.d_head, src.signal_heads(), src.noise_heads(), src.n_kv);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.symmetry_seed);

    let embed = hyperclone_linear(&model.embed, 1, n)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let a = &layer.attn;
        let mut wq1 = grow_head_blocks(&a.wq1, s_src, dh, rs, n)?;
        if plan.symmetry_break_sigma > 0.0 {
            // Perturb only the non-first clones (target heads >= S_src), so
            // the layout's head identities stay readable in the weights.
            let noise: Tensor<T> = randn(wq1.shape(), plan.symmetry_break_sigma, &mut rng);
            let cols = wq1.shape()[1];
            let first_copy = s_src * dh;
            for r in 0..wq1.shape()[0] {
                let (row, nrow) = (wq1.row_mut(r), noise.row(r));
                for c in first_copy..cols {
                    row[c] = row[c] + nrow[c];
                }
            }
        }
        let mut attn = a.clone();
        attn.wq1 = wq1;
        attn.wk1 = grow_head_blocks(&a.wk1, kv_src, dh, rs, n)?;
        attn.wv = grow_head_blocks(&a.wv, kv_src, 2 * dh, rs, n)?;
        attn.wq2 = grow_head_blocks(&a.wq2, h_src, dh, rn, n)?;
        attn.wk2 = grow_head_blocks(&a.wk2, h_src, dh, rn, n)?;
        attn.wo = grow_output_rows(&a.wo, s_src, 2 * dh, rs, n)?;
        attn.head_gains = dup_rows(&a.head_gains, rs)?;
        // lambda vectors are d_head wide and d_head never changes.

        layers.push(LayerParams {
            attn_norm_gain: dup_gain(&layer.attn_norm_gain, n),
            attn,
            mlp_norm_gain: dup_gain(&layer.mlp_norm_gain, n),
            w_gate: hyperclone_linear(&layer.w_gate, n, n)?,
            w_up: hyperclone_linear(&layer.w_up, n, n)?,
            w_down: hyperclone_linear(&layer.w_down, n, n)?,
        });
    }

    // Tied output head: the duplicated embedding would multiply logits by n,
    // so the 1/n lands in the final norm gain, whose only consumer is the
    // head projection.
    let mut final_norm_gain = dup_gain(&model.final_norm_gain, n);
    let lm_head = match &model.lm_head {
        Some(head) => Some(hyperclone_linear(head, n, 1)?),
        None => {
            final_norm_gain.scale_in_place(T::from_f64(1.0 / n as f64));
            None
        }
    };

    let grown = Model {
        config: plan.target.clone(),
        embed,
        layers,
        final_norm_gain,
        lm_head,
    };
    for layer in &grown.layers {
        layer.attn.validate(&plan.target.gda)?;
    }
    Ok(grown)
}

/// Uniform expansion of a checkpoint by factor `n`; `n = 1` is the identity
/// on the model tensors. Optimizer state is dropped (its shapes no longer
/// apply); step and seed metadata survive.
pub fn hyperclone_model<T: Scalar>(ckpt: &Checkpoint<T>, n: usize) -> Result<Checkpoint<T>> {
    let plan = GrowthPlan::uniform(&ckpt.config, n)?;
    grow_checkpoint(ckpt, &plan)
}

/// Group-differentiated expansion of a checkpoint.
pub fn group_diff_grow<T: Scalar>(ckpt: &Checkpoint<T>, plan: &GrowthPlan) -> Result<Checkpoint<T>> {
    grow_checkpoint(ckpt, plan)
}

fn grow_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, plan: &GrowthPlan) -> Result<Checkpoint<T>> {
    if ckpt.config != plan.source {
        return Err(GdaError::Plan(
            "checkpoint config does not match the plan's source config".into(),
        ));
    }
    let model = Model::from_checkpoint(ckpt)?;
    let grown = grow_model(&model, plan)?;
    let mut out = grown.to_checkpoint(ckpt.step, ckpt.seed);
    out.step = ckpt.step;
    Ok(out)
}

/// Logit-preservation audit between two checkpoints over seeded random
/// inputs, with per-depth localization: entry `k` of `per_layer` is the max
/// absolute logit difference when only the first `k + 1` layers run.
#[derive(Debug, Clone)]
pub struct PreservationReport {
    pub n_samples: usize,
    pub seed: u64,
    pub tol: f64,
    /// Max abs logit diff of the full models.
    pub max_abs_diff: f64,
    /// Max abs logit diff at each prefix depth 1..=n_layers.
    pub per_layer: Vec<f64>,
    pub passed: bool,
}

impl PreservationReport {
    /// First depth whose prefix already exceeds the tolerance, 0-based.
    pub fn first_drift_layer(&self) -> Option<usize> {
        self.per_layer.iter().position(|&d| d > self.tol)
    }
}

pub fn verify_preservation<T: Scalar>(
    a: &Checkpoint<T>,
    b: &Checkpoint<T>,
    n_samples: usize,
    seed: u64,
    tol: f64,
) -> Result<PreservationReport> {
    if a.config.vocab_size != b.config.vocab_size {
        return Err(GdaError::VocabMismatch {
            a: a.config.vocab_size,
            b: b.config.vocab_size,
        });
    }
    if a.config.gda.n_layers != b.config.gda.n_layers {
        return Err(GdaError::Config(format!(
            "cannot compare {}-layer and {}-layer models per depth",
            a.config.gda.n_layers, b.config.gda.n_layers
        )));
    }
    let model_a = Model::from_checkpoint(a)?;
    let model_b = Model::from_checkpoint(b)?;
    let n_layers = a.config.gda.n_layers;
    let seq = a.config.gda.max_seq_len.min(b.config.gda.max_seq_len);
    let vocab = a.config.vocab_size as u32;

    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_layer = vec![0.0f64; n_layers];
    for _ in 0..n_samples {
        let tokens: Vec<u32> = (0..seq).map(|_| rng.gen_range(0..vocab)).collect();
        for k in 1..=n_layers {
            let la = model_a.forward_prefix(&tokens, k)?;
            let lb = model_b.forward_prefix(&tokens, k)?;
            let d = la.max_abs_diff(&lb)?;
            if d > per_layer[k - 1] {
                per_layer[k - 1] = d;
            }
        }
    }
    let max_abs_diff = per_layer[n_layers - 1];
    Ok(PreservationReport {
        n_samples,
        seed,
        tol,
        max_abs_diff,
        per_layer,
        passed: max_abs_diff <= tol,
    })
}

//! Byte-level decoder language model built around the grouped differential
//! attention layer: pre-norm residual blocks, RMSNorm, gated SiLU MLP, and a
//! transpose-tied output head by default.
//!
//! Design decisions:
//! - Tokens are raw bytes (ids 0..=255) plus BOS = 256 and EOS = 257. There
//!   is no learned tokenizer state; corpus handling decides where the
//!   sentinel ids go.
//! - The initialization draw order is frozen: embedding, then per layer the
//!   attention parameters followed by w_gate, w_up, w_down, then the untied
//!   head if present. Norm gains start at one and consume no randomness.
//!   Changing this order would silently break seed reproducibility.
//! - The backward pass is hand-derived, like the attention kernel, and is
//!   audited against central differences in the tests.
//! - Cross-entropy and its logit gradient accumulate in 64-bit regardless of
//!   model precision; activations and parameters stay in model precision.
//! - No inference-time KV cache: `generate` re-runs the full forward per
//!   token and slides a `max_seq_len` window over long continuations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_maps, gda_backward, gda_forward, gda_forward_cached, AttentionGrads,
    AttentionMaps, AttentionParams, AttnCache,
};
use crate::checkpoint::{Checkpoint, OPTIM_PREFIX};
use crate::config::{LmConfig, NORM_EPS};
use crate::error::{GdaError, Result};
use crate::tensor::{randn_clipped, rms_backward_row, Scalar, Tensor};

/// Identity byte tokenizer: each input byte is its own id.
pub fn byte_tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of `byte_tokenize`; BOS/EOS (and any other non-byte id) are
/// dropped rather than invented as bytes.
pub fn byte_detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect()
}

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub attn_norm_gain: Tensor<T>,
    pub attn: AttentionParams<T>,
    pub mlp_norm_gain: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: LmConfig,
    /// `vocab_size x d_model`; doubles as the output head when tied.
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm_gain: Tensor<T>,
    /// `d_model x vocab_size`, present only when embeddings are untied.
    pub lm_head: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub attn_norm_gain: Tensor<T>,
    pub attn: AttentionGrads<T>,
    pub mlp_norm_gain: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads<T: Scalar> {
    pub embed: Tensor<T>,
    pub layers: Vec<LayerGrads<T>>,
    pub final_norm_gain: Tensor<T>,
    pub lm_head: Option<Tensor<T>>,
}

/// Per-layer activations kept for the backward pass.
struct LayerTrace<T> {
    /// Residual stream entering the layer (pre attention-norm). The normed
    /// copy lives in `attn.x`.
    x_in: Tensor<T>,
    attn: AttnCache<T>,
    /// Residual stream after the attention add (pre MLP-norm).
    x_mid: Tensor<T>,
    h2: Tensor<T>,
    z_gate: Tensor<T>,
    up: Tensor<T>,
    /// `silu(z_gate) .* up`, the input of the down projection.
    gated: Tensor<T>,
}

struct Trace<T> {
    tokens: Vec<u32>,
    layers: Vec<LayerTrace<T>>,
    /// Residual stream after the last layer (pre final-norm).
    x_final: Tensor<T>,
    /// Post final-norm activations feeding the output head.
    xf: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: &LmConfig, seed: u64) -> Result<Model<T>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.gda.d_model;
        let w = |shape: &[usize], rng: &mut ChaCha8Rng| randn_clipped::<T, _>(shape, 0.02, 3.0, rng);

        let embed = w(&[config.vocab_size, d], &mut rng);
        let mut layers = Vec::with_capacity(config.gda.n_layers);
        for l in 0..config.gda.n_layers {
            let attn = AttentionParams::init(&config.gda, l + 1, &mut rng);
            let w_gate = w(&[d, config.mlp_hidden], &mut rng);
            let w_up = w(&[d, config.mlp_hidden], &mut rng);
            let w_down = w(&[config.mlp_hidden, d], &mut rng);
            layers.push(LayerParams {
                attn_norm_gain: Tensor::filled(&[d], T::one()),
                attn,
                mlp_norm_gain: Tensor::filled(&[d], T::one()),
                w_gate,
                w_up,
                w_down,
            });
        }
        let lm_head = if config.tie_embeddings {
            None
        } else {
            Some(w(&[d, config.vocab_size], &mut rng))
        };
        Ok(Model {
            config: config.clone(),
            embed,
            layers,
            final_norm_gain: Tensor::filled(&[d], T::one()),
            lm_head,
        })
    }

    fn gather_embed(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        if tokens.is_empty() {
            return Err(GdaError::Config("empty token sequence".into()));
        }
        if tokens.len() > self.config.gda.max_seq_len {
            return Err(GdaError::OverLength {
                len: tokens.len(),
                max: self.config.gda.max_seq_len,
            });
        }
        let d = self.config.gda.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &id in tokens {
            if id as usize >= self.config.vocab_size {
                return Err(GdaError::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
            data.extend_from_slice(self.embed.row(id as usize));
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    /// Gated MLP: `silu(h w_gate) .* (h w_up)` projected back down. Returns
    /// every intermediate so the trace path can reuse the same code.
    fn mlp_forward(
        &self,
        h2: &Tensor<T>,
        layer: &LayerParams<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
        let z_gate = h2.matmul(&layer.w_gate)?;
        let up = h2.matmul(&layer.w_up)?;
        let mut gated = up.clone();
        for (g, &z) in gated.data_mut().iter_mut().zip(z_gate.data()) {
            *g = *g * silu(z);
        }
        let out = gated.matmul(&layer.w_down)?;
        Ok((z_gate, up, gated, out))
    }

    fn project_logits(&self, xf: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.lm_head {
            Some(head) => xf.matmul(head),
            None => xf.matmul(&self.embed.transposed()?),
        }
    }

    /// Logits `N x vocab_size` for a token sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        self.forward_prefix(tokens, self.layers.len())
    }

    /// Logits with only the first `k` layers active (`k = n_layers` is the
    /// full model); lets audits localize divergence to a depth.
    pub fn forward_prefix(&self, tokens: &[u32], k: usize) -> Result<Tensor<T>> {
        if k > self.layers.len() {
            return Err(GdaError::IndexOutOfRange {
                what: "layer prefix",
                index: k,
                bound: self.layers.len() + 1,
            });
        }
        let mut x = self.gather_embed(tokens)?;
        for layer in &self.layers[..k] {
            let h = x.rms_norm(&layer.attn_norm_gain, NORM_EPS)?;
            let a = gda_forward(&h, &layer.attn, &self.config.gda)?;
            x.add_assign(&a)?;
            let h2 = x.rms_norm(&layer.mlp_norm_gain, NORM_EPS)?;
            let (_, _, _, m) = self.mlp_forward(&h2, layer)?;
            x.add_assign(&m)?;
        }
        let xf = x.rms_norm(&self.final_norm_gain, NORM_EPS)?;
        self.project_logits(&xf)
    }

    /// Score maps of every layer for `tokens`, in layer order. Inspection
    /// path: each layer's attention is computed once for the maps and once
    /// to advance the residual stream, so this costs about two forwards.
    pub fn layer_attention_maps(&self, tokens: &[u32]) -> Result<Vec<AttentionMaps<T>>> {
        let mut x = self.gather_embed(tokens)?;
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = x.rms_norm(&layer.attn_norm_gain, NORM_EPS)?;
            maps.push(attention_maps(&h, &layer.attn, &self.config.gda)?);
            let a = gda_forward(&h, &layer.attn, &self.config.gda)?;
            x.add_assign(&a)?;
            let h2 = x.rms_norm(&layer.mlp_norm_gain, NORM_EPS)?;
            let (_, _, _, m) = self.mlp_forward(&h2, layer)?;
            x.add_assign(&m)?;
        }
        Ok(maps)
    }

    fn forward_trace(&self, tokens: &[u32]) -> Result<(Tensor<T>, Trace<T>)> {
        let mut x = self.gather_embed(tokens)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x_in = x.clone();
            let h = x.rms_norm(&layer.attn_norm_gain, NORM_EPS)?;
            let (a, attn) = gda_forward_cached(&h, &layer.attn, &self.config.gda)?;
            x.add_assign(&a)?;
            let x_mid = x.clone();
            let h2 = x.rms_norm(&layer.mlp_norm_gain, NORM_EPS)?;
            let (z_gate, up, gated, m) = self.mlp_forward(&h2, layer)?;
            x.add_assign(&m)?;
            layers.push(LayerTrace {
                x_in,
                attn,
                x_mid,
                h2,
                z_gate,
                up,
                gated,
            });
        }
        let xf = x.rms_norm(&self.final_norm_gain, NORM_EPS)?;
        let logits = self.project_logits(&xf)?;
        Ok((
            logits,
            Trace {
                tokens: tokens.to_vec(),
                layers,
                x_final: x,
                xf,
            },
        ))
    }

    /// Mean next-token cross-entropy and gradients for every parameter.
    /// `targets[t]` is the label for position `t`.
    pub fn loss_and_grads(&self, tokens: &[u32], targets: &[u32]) -> Result<(f64, ModelGrads<T>)> {
        let (logits, trace) = self.forward_trace(tokens)?;
        let (loss, dlogits) = cross_entropy_grads(&logits, targets)?;
        let grads = self.backward(&trace, &dlogits)?;
        Ok((loss, grads))
    }

    fn backward(&self, trace: &Trace<T>, dlogits: &Tensor<T>) -> Result<ModelGrads<T>> {
        let mut d_embed = Tensor::zeros(self.embed.shape());

        // Output head. Tied: logits = xf E^T, so the embedding collects a
        // second gradient term besides the gather rows.
        let (mut dx, d_lm_head) = match &self.lm_head {
            Some(head) => {
                let d_head = trace.xf.transposed()?.matmul(dlogits)?;
                (dlogits.matmul(&head.transposed()?)?, Some(d_head))
            }
            None => {
                d_embed.add_assign(&dlogits.transposed()?.matmul(&trace.xf)?)?;
                (dlogits.matmul(&self.embed)?, None)
            }
        };

        let mut d_final_gain = Tensor::zeros(self.final_norm_gain.shape());
        dx = rms_backward(&trace.x_final, &self.final_norm_gain, &dx, &mut d_final_gain)?;

        let mut layer_grads: Vec<LayerGrads<T>> = Vec::with_capacity(self.layers.len());
        for (layer, lt) in self.layers.iter().zip(&trace.layers).rev() {
            // MLP block: x_out = x_mid + gated(norm(x_mid)) w_down.
            let d_wdown = lt.gated.transposed()?.matmul(&dx)?;
            let d_gated = dx.matmul(&layer.w_down.transposed()?)?;
            let mut dz_gate = d_gated.clone();
            let mut d_up = d_gated;
            for ((dz, du), (&z, &u)) in dz_gate
                .data_mut()
                .iter_mut()
                .zip(d_up.data_mut())
                .zip(lt.z_gate.data().iter().zip(lt.up.data()))
            {
                let g = *dz;
                *dz = g * u * silu_prime(z);
                *du = g * silu(z);
            }
            let d_wgate = lt.h2.transposed()?.matmul(&dz_gate)?;
            let d_wup = lt.h2.transposed()?.matmul(&d_up)?;
            let mut dh2 = dz_gate.matmul(&layer.w_gate.transposed()?)?;
            dh2.add_assign(&d_up.matmul(&layer.w_up.transposed()?)?)?;

            let mut d_mlp_gain = Tensor::zeros(layer.mlp_norm_gain.shape());
            let through_norm =
                rms_backward(&lt.x_mid, &layer.mlp_norm_gain, &dh2, &mut d_mlp_gain)?;
            dx.add_assign(&through_norm)?;

            // Attention block: x_mid = x_in + attn(norm(x_in)).
            let (dh, attn_grads) = gda_backward(&lt.attn, &layer.attn, &self.config.gda, &dx)?;
            let mut d_attn_gain = Tensor::zeros(layer.attn_norm_gain.shape());
            let through_norm = rms_backward(&lt.x_in, &layer.attn_norm_gain, &dh, &mut d_attn_gain)?;
            dx.add_assign(&through_norm)?;

            layer_grads.push(LayerGrads {
                attn_norm_gain: d_attn_gain,
                attn: attn_grads,
                mlp_norm_gain: d_mlp_gain,
                w_gate: d_wgate,
                w_up: d_wup,
                w_down: d_wdown,
            });
        }
        layer_grads.reverse();

        // Embedding gather: dE[token_t] += dx[t].
        let d = self.config.gda.d_model;
        for (t, &id) in trace.tokens.iter().enumerate() {
            let src = dx.row(t).to_vec();
            let dst = d_embed.row_mut(id as usize);
            for j in 0..d {
                dst[j] = dst[j] + src[j];
            }
        }

        Ok(ModelGrads {
            embed: d_embed,
            layers: layer_grads,
            final_norm_gain: d_final_gain,
            lm_head: d_lm_head,
        })
    }

    /// Autoregressive continuation. Temperature 0 is greedy argmax (lowest id
    /// wins ties); otherwise logits are divided by the temperature and
    /// sampled with a seeded generator. Contexts longer than `max_seq_len`
    /// slide: only the trailing window feeds the forward pass.
    pub fn generate(
        &self,
        prompt: &[u32],
        n_tokens: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<u32>> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(GdaError::Config(format!(
                "temperature must be finite and >= 0, got {temperature}"
            )));
        }
        let mut seq = prompt.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_tokens {
            let start = seq.len().saturating_sub(self.config.gda.max_seq_len);
            let logits = self.forward(&seq[start..])?;
            let last = logits.row(logits.shape()[0] - 1);
            let next = if temperature == 0.0 {
                argmax(last)
            } else {
                sample_scaled(last, temperature, &mut rng)
            };
            seq.push(next as u32);
        }
        Ok(seq)
    }

    /// Walk every trainable tensor in declaration order with its checkpoint
    /// name. The same names come out of `ModelGrads::visit`, which is what
    /// lets the optimizer pair parameters with gradients.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        f("embed", &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.attn_norm.gain"), &l.attn_norm_gain);
            f(&format!("layers.{i}.attn.wq1"), &l.attn.wq1);
            f(&format!("layers.{i}.attn.wk1"), &l.attn.wk1);
            f(&format!("layers.{i}.attn.wq2"), &l.attn.wq2);
            f(&format!("layers.{i}.attn.wk2"), &l.attn.wk2);
            f(&format!("layers.{i}.attn.wv"), &l.attn.wv);
            f(&format!("layers.{i}.attn.wo"), &l.attn.wo);
            f(&format!("layers.{i}.attn.lq1"), &l.attn.lambda.lq1);
            f(&format!("layers.{i}.attn.lk1"), &l.attn.lambda.lk1);
            f(&format!("layers.{i}.attn.lq2"), &l.attn.lambda.lq2);
            f(&format!("layers.{i}.attn.lk2"), &l.attn.lambda.lk2);
            f(&format!("layers.{i}.attn.head_gains"), &l.attn.head_gains);
            f(&format!("layers.{i}.mlp_norm.gain"), &l.mlp_norm_gain);
            f(&format!("layers.{i}.mlp.w_gate"), &l.w_gate);
            f(&format!("layers.{i}.mlp.w_up"), &l.w_up);
            f(&format!("layers.{i}.mlp.w_down"), &l.w_down);
        }
        f("final_norm.gain", &self.final_norm_gain);
        if let Some(head) = &self.lm_head {
            f("lm_head", head);
        }
    }

    /// Mutable twin of `visit_params`; must emit identical names in
    /// identical order (asserted by tests).
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        f("embed", &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.attn_norm.gain"), &mut l.attn_norm_gain);
            f(&format!("layers.{i}.attn.wq1"), &mut l.attn.wq1);
            f(&format!("layers.{i}.attn.wk1"), &mut l.attn.wk1);
            f(&format!("layers.{i}.attn.wq2"), &mut l.attn.wq2);
            f(&format!("layers.{i}.attn.wk2"), &mut l.attn.wk2);
            f(&format!("layers.{i}.attn.wv"), &mut l.attn.wv);
            f(&format!("layers.{i}.attn.wo"), &mut l.attn.wo);
            f(&format!("layers.{i}.attn.lq1"), &mut l.attn.lambda.lq1);
            f(&format!("layers.{i}.attn.lk1"), &mut l.attn.lambda.lk1);
            f(&format!("layers.{i}.attn.lq2"), &mut l.attn.lambda.lq2);
            f(&format!("layers.{i}.attn.lk2"), &mut l.attn.lambda.lk2);
            f(&format!("layers.{i}.attn.head_gains"), &mut l.attn.head_gains);
            f(&format!("layers.{i}.mlp_norm.gain"), &mut l.mlp_norm_gain);
            f(&format!("layers.{i}.mlp.w_gate"), &mut l.w_gate);
            f(&format!("layers.{i}.mlp.w_up"), &mut l.w_up);
            f(&format!("layers.{i}.mlp.w_down"), &mut l.w_down);
        }
        f("final_norm.gain", &mut self.final_norm_gain);
        if let Some(head) = &mut self.lm_head {
            f("lm_head", head);
        }
    }

    pub fn param_total(&self) -> usize {
        let mut total = 0;
        self.visit_params(|_, t| total += t.numel());
        total
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint<T> {
        let mut ckpt = Checkpoint::new(self.config.clone(), seed);
        ckpt.step = step;
        self.visit_params(|name, t| ckpt.insert(name, t.clone()));
        ckpt
    }

    /// Strict reconstruction: every architectural tensor must be present
    /// with its exact shape, and nothing but those tensors (plus optimizer
    /// state) may be in the table.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Model<T>> {
        let config = ckpt.config.clone();
        config.validate()?;
        let template = Model::<T>::init(&config, 0)?;

        let mut expected: Vec<String> = Vec::new();
        template.visit_params(|name, _| expected.push(name.to_string()));
        for name in ckpt.names() {
            if !name.starts_with(OPTIM_PREFIX) && !expected.iter().any(|e| e == name) {
                return Err(GdaError::Format(format!(
                    "unexpected tensor `{name}` for this architecture"
                )));
            }
        }

        let mut model = template;
        let mut err = None;
        model.visit_params_mut(|name, t| {
            if err.is_some() {
                return;
            }
            match ckpt.require(name) {
                Ok(loaded) if loaded.shape() == t.shape() => *t = loaded.clone(),
                Ok(loaded) => {
                    err = Some(GdaError::Format(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        loaded.shape(),
                        t.shape()
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        for (l, layer) in model.layers.iter().enumerate() {
            layer.attn.validate(&config.gda)?;
            debug_assert_eq!(
                layer.attn.lambda.lambda_init,
                config.gda.lambda_init.for_layer(l + 1)
            );
        }
        Ok(model)
    }
}

/// Forward a token sequence through a checkpointed model.
pub fn lm_forward<T: Scalar>(tokens: &[u32], ckpt: &Checkpoint<T>) -> Result<Tensor<T>> {
    Model::from_checkpoint(ckpt)?.forward(tokens)
}

fn silu<T: Scalar>(z: T) -> T {
    z / (T::one() + (-z).exp())
}

/// d silu / dz = sigma(z) (1 + z (1 - sigma(z))).
fn silu_prime<T: Scalar>(z: T) -> T {
    let sig = T::one() / (T::one() + (-z).exp());
    sig * (T::one() + z * (T::one() - sig))
}

/// RMSNorm backward over all rows; returns dx and accumulates dgain. The
/// inverse RMS is recomputed exactly as the forward computed it (same
/// summation order), so the backward sees bit-identical statistics.
fn rms_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    dy: &Tensor<T>,
    dgain: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("rms backward")?;
    if dy.shape() != x.shape() {
        return Err(GdaError::ShapeMismatch {
            op: "rms backward",
            lhs: dy.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let eps = T::from_f64(NORM_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = Tensor::zeros(x.shape());
    for r in 0..n {
        let xr = x.row(r);
        let mut ss = T::zero();
        for &v in xr {
            ss = ss + v * v;
        }
        let inv = T::one() / (ss * inv_d + eps).sqrt();
        rms_backward_row(
            xr,
            gain.data(),
            inv,
            T::one(),
            dy.row(r),
            dx.row_mut(r),
            dgain.data_mut(),
        );
    }
    Ok(dx)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn sample_scaled<T: Scalar>(row: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    let scaled: Vec<f64> = row.iter().map(|&v| v.to_f64() / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &v in &scaled {
        denom += (v - m).exp();
    }
    let r: f64 = rng.gen::<f64>() * denom;
    let mut cum = 0.0;
    for (j, &v) in scaled.iter().enumerate() {
        cum += (v - m).exp();
        if cum > r {
            return j;
        }
    }
    scaled.len() - 1
}

/// Mean next-token cross-entropy in log-space with 64-bit accumulation.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<f64> {
    Ok(cross_entropy_impl(logits, targets, false)?.0)
}

/// Loss plus `d loss / d logits` (already divided by the number of
/// positions); the gradient is materialized in model precision.
pub fn cross_entropy_grads<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
) -> Result<(f64, Tensor<T>)> {
    let (loss, grads) = cross_entropy_impl(logits, targets, true)?;
    Ok((loss, grads.expect("grads requested")))
}

fn cross_entropy_impl<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    want_grads: bool,
) -> Result<(f64, Option<Tensor<T>>)> {
    let (n, v) = logits.dims2("cross_entropy")?;
    if targets.len() != n {
        return Err(GdaError::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![n, v],
            rhs: vec![targets.len()],
        });
    }
    let mut grads = want_grads.then(|| Tensor::<T>::zeros(logits.shape()));
    let mut total = 0.0f64;
    for (t, &target) in targets.iter().enumerate() {
        if target as usize >= v {
            return Err(GdaError::TokenOutOfRange {
                id: target,
                vocab: v,
            });
        }
        let row = logits.row(t);
        let mut m = f64::NEG_INFINITY;
        for &l in row {
            m = m.max(l.to_f64());
        }
        let mut denom = 0.0f64;
        for &l in row {
            denom += (l.to_f64() - m).exp();
        }
        let lse = m + denom.ln();
        total += lse - row[target as usize].to_f64();
        if let Some(g) = grads.as_mut() {
            let out = g.row_mut(t);
            for (j, &l) in row.iter().enumerate() {
                let p = (l.to_f64() - m).exp() / denom;
                let delta = if j == target as usize { 1.0 } else { 0.0 };
                out[j] = T::from_f64((p - delta) / n as f64);
            }
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(GdaError::NonFinite {
            stage: "cross_entropy".to_string(),
        });
    }
    Ok((loss, grads))
}


impl<T: Scalar> ModelGrads<T> {
    /// Gradient walk with the same names and order as
    /// `Model::visit_params`.
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        f("embed", &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.attn_norm.gain"), &l.attn_norm_gain);
            f(&format!("layers.{i}.attn.wq1"), &l.attn.wq1);
            f(&format!("layers.{i}.attn.wk1"), &l.attn.wk1);
            f(&format!("layers.{i}.attn.wq2"), &l.attn.wq2);
            f(&format!("layers.{i}.attn.wk2"), &l.attn.wk2);
            f(&format!("layers.{i}.attn.wv"), &l.attn.wv);
            f(&format!("layers.{i}.attn.wo"), &l.attn.wo);
            f(&format!("layers.{i}.attn.lq1"), &l.attn.lq1);
            f(&format!("layers.{i}.attn.lk1"), &l.attn.lk1);
            f(&format!("layers.{i}.attn.lq2"), &l.attn.lq2);
            f(&format!("layers.{i}.attn.lk2"), &l.attn.lk2);
            f(&format!("layers.{i}.attn.head_gains"), &l.attn.head_gains);
            f(&format!("layers.{i}.mlp_norm.gain"), &l.mlp_norm_gain);
            f(&format!("layers.{i}.mlp.w_gate"), &l.w_gate);
            f(&format!("layers.{i}.mlp.w_up"), &l.w_up);
            f(&format!("layers.{i}.mlp.w_down"), &l.w_down);
        }
        f("final_norm.gain", &self.final_norm_gain);
        if let Some(head) = &self.lm_head {
            f("lm_head", head);
        }
    }
}

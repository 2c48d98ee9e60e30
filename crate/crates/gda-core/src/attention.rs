//! Grouped differential attention.
//!
//! The head budget `H` is split into `S` signal heads and `h = H/(ratio+1)`
//! noise heads. Every signal head computes a causal softmax map from its own
//! rotary-encoded query against a shared key/value unit; every noise head
//! computes one shared full-attention map. A signal head's effective map is
//! its own map minus `lambda` times its partner noise map, applied to the
//! shared value rows:
//!
//! `head_i = (softmax(Q1_i K1_u^T / sqrt(d)) - lambda * softmax(Q2_j K2_j^T / sqrt(d))) V_u`
//!
//! with `j = i mod h` (strided, one noise head per ratio group) and
//! `u = i / (S / n_kv)` (contiguous key/value blocks). `lambda` is one
//! layer-level scalar reparameterized through four learned `d_head` vectors,
//! `exp(lq1 . lk1) - exp(lq2 . lk2) + lambda_init`, and is deliberately
//! unclamped. Each head output is RMS-normalized over its `2 * d_head`
//! channels with a learned gain and scaled by `(1 - lambda_init)` before the
//! output projection.
//!
//! Weight layout (row-major, head blocks along the column axis):
//!
//! * `wq1`: `d_model x (S * d_head)`, signal head `i` owns columns
//!   `[i*d_head, (i+1)*d_head)`.
//! * `wk1`: `d_model x (n_kv * d_head)`, one key block per kv unit.
//! * `wq2`, `wk2`: `d_model x (h * d_head)`, one block per noise head.
//! * `wv`: `d_model x (n_kv * 2*d_head)`, value rows are twice head width.
//! * `wo`: `(2 * S * d_head) x d_model`, head `i` owns rows
//!   `[i*2*d_head, (i+1)*2*d_head)`.
//!
//! Everything here is deterministic and single-threaded; the backward pass
//! in this file is consumed by the gradient checker and the training loop.

use crate::config::{GdaConfig, LambdaInit, NORM_EPS};
use crate::error::{GdaError, Result};
use crate::tensor::{randn, randn_clipped, rms_backward_row, softmax_backward, Mask, Scalar, Tensor};
use rand::Rng;

/// Reparameterized subtraction weight: four learned vectors of `d_head`
/// entries plus the per-layer initialization constant.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaParams<T> {
    pub lq1: Tensor<T>,
    pub lk1: Tensor<T>,
    pub lq2: Tensor<T>,
    pub lk2: Tensor<T>,
    pub lambda_init: f64,
}

/// `exp(lq1 . lk1) - exp(lq2 . lk2) + lambda_init`. The two exponentials
/// keep each term positive, but their difference may be negative or exceed
/// one; no clamping is applied anywhere.
pub fn lambda_value<T: Scalar>(
    lq1: &Tensor<T>,
    lk1: &Tensor<T>,
    lq2: &Tensor<T>,
    lk2: &Tensor<T>,
    lambda_init: f64,
) -> Result<T> {
    let d = lq1.numel();
    for v in [lq1, lk1, lq2, lk2] {
        if v.rank() != 1 || v.numel() != d {
            return Err(GdaError::ShapeMismatch {
                op: "lambda_value",
                lhs: lq1.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
    }
    let dot = |a: &Tensor<T>, b: &Tensor<T>| {
        let mut s = T::zero();
        for (&x, &y) in a.data().iter().zip(b.data()) {
            s = s + x * y;
        }
        s
    };
    Ok(dot(lq1, lk1).exp() - dot(lq2, lk2).exp() + T::from_f64(lambda_init))
}

impl<T: Scalar> LambdaParams<T> {
    pub fn value(&self) -> Result<T> {
        lambda_value(&self.lq1, &self.lk1, &self.lq2, &self.lk2, self.lambda_init)
    }
}

/// One layer's attention parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq1: Tensor<T>,
    pub wk1: Tensor<T>,
    pub wq2: Tensor<T>,
    pub wk2: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub lambda: LambdaParams<T>,
    /// Per-head norm gains, `S x (2 * d_head)`.
    pub head_gains: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Fresh initialization: projections N(0, 0.02) truncated at three
    /// standard deviations, lambda vectors N(0, 0.1), gains at one.
    /// `layer` is 1-based and selects the lambda_init schedule point.
    pub fn init<R: Rng>(cfg: &GdaConfig, layer: usize, rng: &mut R) -> AttentionParams<T> {
        let (d, dh) = (cfg.d_model, cfg.d_head);
        let (s, h, kv) = (cfg.signal_heads(), cfg.noise_heads(), cfg.n_kv);
        let w = |shape: &[usize], rng: &mut R| randn_clipped::<T, R>(shape, 0.02, 3.0, rng);
        AttentionParams {
            wq1: w(&[d, s * dh], rng),
            wk1: w(&[d, kv * dh], rng),
            wq2: w(&[d, h * dh], rng),
            wk2: w(&[d, h * dh], rng),
            wv: w(&[d, kv * 2 * dh], rng),
            wo: w(&[2 * s * dh, d], rng),
            lambda: LambdaParams {
                lq1: randn(&[dh], 0.1, rng),
                lk1: randn(&[dh], 0.1, rng),
                lq2: randn(&[dh], 0.1, rng),
                lk2: randn(&[dh], 0.1, rng),
                lambda_init: cfg.lambda_init.for_layer(layer),
            },
            head_gains: Tensor::filled(&[s, 2 * dh], T::one()),
        }
    }

    /// Shape consistency against a config; used when loading checkpoints.
    pub fn validate(&self, cfg: &GdaConfig) -> Result<()> {
        let (d, dh) = (cfg.d_model, cfg.d_head);
        let (s, h, kv) = (cfg.signal_heads(), cfg.noise_heads(), cfg.n_kv);
        let expect = |name: &str, t: &Tensor<T>, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(GdaError::Config(format!(
                    "attention tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect("wq1", &self.wq1, &[d, s * dh])?;
        expect("wk1", &self.wk1, &[d, kv * dh])?;
        expect("wq2", &self.wq2, &[d, h * dh])?;
        expect("wk2", &self.wk2, &[d, h * dh])?;
        expect("wv", &self.wv, &[d, kv * 2 * dh])?;
        expect("wo", &self.wo, &[2 * s * dh, d])?;
        expect("lq1", &self.lambda.lq1, &[dh])?;
        expect("lk1", &self.lambda.lk1, &[dh])?;
        expect("lq2", &self.lambda.lq2, &[dh])?;
        expect("lk2", &self.lambda.lk2, &[dh])?;
        expect("head_gains", &self.head_gains, &[s, 2 * dh])?;
        if let LambdaInit::Fixed(v) = cfg.lambda_init {
            if self.lambda.lambda_init != v {
                return Err(GdaError::Config(format!(
                    "lambda_init {} disagrees with config value {v}",
                    self.lambda.lambda_init
                )));
            }
        }
        Ok(())
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub(crate) struct AttnCache<T> {
    pub x: Tensor<T>,
    /// Rotary-encoded per-head projections.
    pub q1: Vec<Tensor<T>>,
    pub k1: Vec<Tensor<T>>,
    pub q2: Vec<Tensor<T>>,
    pub k2: Vec<Tensor<T>>,
    /// Value rows per kv unit, width `2 * d_head`, no rotation.
    pub v: Vec<Tensor<T>>,
    pub a1: Vec<Tensor<T>>,
    pub a2: Vec<Tensor<T>>,
    /// Differential maps `a1[i] - lambda * a2[partner(i)]`.
    pub p: Vec<Tensor<T>>,
    /// Pre-norm head outputs, `n x 2 * d_head`.
    pub heads: Vec<Tensor<T>>,
    /// Post-norm concatenation, `n x (2 * S * d_head)`.
    pub concat: Tensor<T>,
    pub lambda: T,
    pub dot1: T,
    pub dot2: T,
}

/// Gradients for one layer's attention parameters, same shapes as
/// `AttentionParams`.
#[derive(Clone, Debug)]
pub struct AttentionGrads<T> {
    pub wq1: Tensor<T>,
    pub wk1: Tensor<T>,
    pub wq2: Tensor<T>,
    pub wk2: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub lq1: Tensor<T>,
    pub lk1: Tensor<T>,
    pub lq2: Tensor<T>,
    pub lk2: Tensor<T>,
    pub head_gains: Tensor<T>,
}

fn split_heads<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    units: usize,
    width: usize,
    rope: Option<(&[usize], f64)>,
) -> Result<Vec<Tensor<T>>> {
    let full = x.matmul(w)?;
    let mut out = Vec::with_capacity(units);
    for u in 0..units {
        let block = full.slice_cols(u * width, width)?;
        out.push(match rope {
            Some((pos, theta)) => block.apply_rope(pos, theta)?,
            None => block,
        });
    }
    Ok(out)
}

fn checked_input<T: Scalar>(x: &Tensor<T>, cfg: &GdaConfig) -> Result<usize> {
    let (n, d) = x.dims2("attention forward")?;
    if d != cfg.d_model {
        return Err(GdaError::ShapeMismatch {
            op: "attention forward",
            lhs: x.shape().to_vec(),
            rhs: vec![cfg.d_model],
        });
    }
    if n > cfg.max_seq_len {
        return Err(GdaError::OverLength {
            len: n,
            max: cfg.max_seq_len,
        });
    }
    Ok(n)
}

fn forward_impl<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &GdaConfig,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    let n = checked_input(x, cfg)?;
    params.validate(cfg)?;
    let dh = cfg.d_head;
    let (s, h, kv) = (cfg.signal_heads(), cfg.noise_heads(), cfg.n_kv);
    let positions: Vec<usize> = (0..n).collect();
    let rope = Some((positions.as_slice(), cfg.rope_theta));

    let q1 = split_heads(x, &params.wq1, s, dh, rope)?;
    let k1 = split_heads(x, &params.wk1, kv, dh, rope)?;
    let q2 = split_heads(x, &params.wq2, h, dh, rope)?;
    let k2 = split_heads(x, &params.wk2, h, dh, rope)?;
    let v = split_heads(x, &params.wv, kv, 2 * dh, None)?;

    let lam = &params.lambda;
    let dot = |a: &Tensor<T>, b: &Tensor<T>| {
        let mut acc = T::zero();
        for (&p, &q) in a.data().iter().zip(b.data()) {
            acc = acc + p * q;
        }
        acc
    };
    let dot1 = dot(&lam.lq1, &lam.lk1);
    let dot2 = dot(&lam.lq2, &lam.lk2);
    let lambda = dot1.exp() - dot2.exp() + T::from_f64(lam.lambda_init);

    let alpha = T::from_f64(1.0 / (dh as f64).sqrt());
    let maps = |q: &Tensor<T>, k: &Tensor<T>| -> Result<Tensor<T>> {
        q.matmul(&k.transposed()?)?
            .scale(alpha)
            .softmax_rows(Mask::Causal)
    };

    let a2: Vec<Tensor<T>> = (0..h)
        .map(|j| maps(&q2[j], &k2[j]))
        .collect::<Result<_>>()?;

    let norm_scale = T::from_f64(1.0 - lam.lambda_init);
    let mut a1 = Vec::with_capacity(s);
    let mut p = Vec::with_capacity(s);
    let mut heads = Vec::with_capacity(s);
    let mut normed = Vec::with_capacity(s);
    for i in 0..s {
        let u = cfg.kv_partner(i)?;
        let j = cfg.noise_partner(i)?;
        let a1_i = maps(&q1[i], &k1[u])?;
        let p_i = a1_i.sub(&a2[j].scale(lambda))?;
        let head_i = p_i.matmul(&v[u])?;
        let gain = Tensor::new(vec![2 * dh], params.head_gains.row(i).to_vec())?;
        normed.push(head_i.rms_norm(&gain, NORM_EPS)?.scale(norm_scale));
        a1.push(a1_i);
        p.push(p_i);
        heads.push(head_i);
    }

    let concat = Tensor::concat_cols(&normed.iter().collect::<Vec<_>>())?;
    let out = concat.matmul(&params.wo)?;
    out.assert_finite("attention output")?;

    Ok((
        out,
        AttnCache {
            x: x.clone(),
            q1,
            k1,
            q2,
            k2,
            v,
            a1,
            a2,
            p,
            heads,
            concat,
            lambda,
            dot1,
            dot2,
        },
    ))
}

/// Grouped differential attention forward: `n x d_model` in, same shape out.
pub fn gda_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &GdaConfig,
) -> Result<Tensor<T>> {
    Ok(forward_impl(x, params, cfg)?.0)
}

pub(crate) fn gda_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &GdaConfig,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    forward_impl(x, params, cfg)
}

/// Normalized per-head outputs (each `n x 2*d_head`), before the output
/// projection. Useful for locating which heads a parameter change touches.
pub fn gda_forward_heads<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &GdaConfig,
) -> Result<Vec<Tensor<T>>> {
    let (_, cache) = forward_impl(x, params, cfg)?;
    let dh2 = 2 * cfg.d_head;
    (0..cfg.signal_heads())
        .map(|i| cache.concat.slice_cols(i * dh2, dh2))
        .collect()
}

/// Ungrouped differential attention, the ratio 1:1 special case written as
/// its own straight-line pass: head `i` pairs with noise head `i` directly
/// and no map is shared across groups. This is the reduction baseline the
/// grouped path must reproduce at ratio 1.
pub fn diff_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &GdaConfig,
) -> Result<Tensor<T>> {
    if cfg.ratio != 1 {
        return Err(GdaError::Config(format!(
            "differential attention baseline requires ratio 1:1, got {}:1",
            cfg.ratio
        )));
    }
    let n = checked_input(x, cfg)?;
    params.validate(cfg)?;
    let dh = cfg.d_head;
    let s = cfg.signal_heads();
    let kv_group = cfg.kv_group();
    let positions: Vec<usize> = (0..n).collect();
    let rope = Some((positions.as_slice(), cfg.rope_theta));

    let q1 = split_heads(x, &params.wq1, s, dh, rope)?;
    let k1 = split_heads(x, &params.wk1, cfg.n_kv, dh, rope)?;
    let q2 = split_heads(x, &params.wq2, s, dh, rope)?;
    let k2 = split_heads(x, &params.wk2, s, dh, rope)?;
    let v = split_heads(x, &params.wv, cfg.n_kv, 2 * dh, None)?;

    let lambda = params.lambda.value()?;
    let alpha = T::from_f64(1.0 / (dh as f64).sqrt());
    let norm_scale = T::from_f64(1.0 - params.lambda.lambda_init);

    let mut normed = Vec::with_capacity(s);
    for i in 0..s {
        let u = i / kv_group;
        let a1 = q1[i]
            .matmul(&k1[u].transposed()?)?
            .scale(alpha)
            .softmax_rows(Mask::Causal)?;
        let a2 = q2[i]
            .matmul(&k2[i].transposed()?)?
            .scale(alpha)
            .softmax_rows(Mask::Causal)?;
        let head = a1.sub(&a2.scale(lambda))?.matmul(&v[u])?;
        let gain = Tensor::new(vec![2 * dh], params.head_gains.row(i).to_vec())?;
        normed.push(head.rms_norm(&gain, NORM_EPS)?.scale(norm_scale));
    }
    let concat = Tensor::concat_cols(&normed.iter().collect::<Vec<_>>())?;
    concat.matmul(&params.wo)
}

/// Post-softmax attention maps for inspection: the `S` signal maps, the `h`
/// shared noise maps, the partner assignment, and the layer's lambda.
pub struct AttentionMaps<T> {
    pub signal: Vec<Tensor<T>>,
    pub noise: Vec<Tensor<T>>,
    /// `noise_partner[i]` is the noise map subtracted from signal map `i`.
    pub noise_partner: Vec<usize>,
    pub lambda: T,
    pub lambda_init: f64,
}

impl<T: Scalar> AttentionMaps<T> {
    /// The effective map of signal head `i`: rows sum to `1 - lambda` over
    /// the visible prefix.
    pub fn differential(&self, i: usize) -> Result<Tensor<T>> {
        let j = *self.noise_partner.get(i).ok_or(GdaError::IndexOutOfRange {
            what: "signal head",
            index: i,
            bound: self.noise_partner.len(),
        })?;
        self.signal[i].sub(&self.noise[j].scale(self.lambda))
    }
}

pub fn attention_maps<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &GdaConfig,
) -> Result<AttentionMaps<T>> {
    let (_, cache) = forward_impl(x, params, cfg)?;
    let noise_partner = (0..cfg.signal_heads())
        .map(|i| cfg.noise_partner(i))
        .collect::<Result<_>>()?;
    Ok(AttentionMaps {
        signal: cache.a1,
        noise: cache.a2,
        noise_partner,
        lambda: cache.lambda,
        lambda_init: params.lambda.lambda_init,
    })
}

/// Reverse-mode gradients for one attention layer. `upstream` is the loss
/// gradient at the layer output; returns the input gradient and parameter
/// gradients. Shared structures accumulate: a noise head's gradient sums the
/// contributions of all `ratio` signal heads subtracting it, and a kv unit's
/// gradient sums over the heads reading it.
pub(crate) fn gda_backward<T: Scalar>(
    cache: &AttnCache<T>,
    params: &AttentionParams<T>,
    cfg: &GdaConfig,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionGrads<T>)> {
    let dh = cfg.d_head;
    let (s, h, kv) = (cfg.signal_heads(), cfg.noise_heads(), cfg.n_kv);
    let (n, _) = cache.x.dims2("attention backward")?;
    if upstream.shape() != [n, cfg.d_model] {
        return Err(GdaError::ShapeMismatch {
            op: "attention backward",
            lhs: upstream.shape().to_vec(),
            rhs: vec![n, cfg.d_model],
        });
    }
    let positions: Vec<usize> = (0..n).collect();
    let alpha = T::from_f64(1.0 / (dh as f64).sqrt());
    let norm_scale = T::from_f64(1.0 - params.lambda.lambda_init);
    let lambda = cache.lambda;

    // Output projection.
    let d_wo = cache.concat.transposed()?.matmul(upstream)?;
    let d_concat = upstream.matmul(&params.wo.transposed()?)?;

    let mut d_gains = Tensor::zeros(&[s, 2 * dh]);
    let mut d_lambda = T::zero();
    let mut d_q1: Vec<Tensor<T>> = Vec::with_capacity(s);
    let mut d_k1: Vec<Tensor<T>> = (0..kv).map(|_| Tensor::zeros(&[n, dh])).collect();
    let mut d_v: Vec<Tensor<T>> = (0..kv).map(|_| Tensor::zeros(&[n, 2 * dh])).collect();
    let mut d_a2: Vec<Tensor<T>> = (0..h).map(|_| Tensor::zeros(&[n, n])).collect();

    for i in 0..s {
        let u = cfg.kv_partner(i)?;
        let j = cfg.noise_partner(i)?;

        // Per-head norm backward; the forward scale (1 - lambda_init) folds in.
        let d_normed = d_concat.slice_cols(i * 2 * dh, 2 * dh)?;
        let head = &cache.heads[i];
        let gain_row = params.head_gains.row(i);
        let mut d_head = Tensor::zeros(&[n, 2 * dh]);
        for t in 0..n {
            let xr = head.row(t);
            let mut ss = T::zero();
            for &xv in xr {
                ss = ss + xv * xv;
            }
            let inv = T::one()
                / (ss * T::from_f64(1.0 / (2 * dh) as f64) + T::from_f64(NORM_EPS)).sqrt();
            let (dst, dg) = (d_head.row_mut(t), d_gains.row_mut(i));
            rms_backward_row(xr, gain_row, inv, norm_scale, d_normed.row(t), dst, dg);
        }

        // head = p . v[u]
        let d_p = d_head.matmul(&cache.v[u].transposed()?)?;
        d_v[u].add_assign(&cache.p[i].transposed()?.matmul(&d_head)?)?;

        // p = a1 - lambda * a2[j]
        for (&dp, &a2v) in d_p.data().iter().zip(cache.a2[j].data()) {
            d_lambda = d_lambda - dp * a2v;
        }
        d_a2[j].add_assign(&d_p.scale(T::zero() - lambda))?;

        // a1 = softmax(alpha * q1 k1^T), causal.
        let d_s1 = softmax_backward(&cache.a1[i], &d_p, Mask::Causal)?.scale(alpha);
        d_q1.push(d_s1.matmul(&cache.k1[u])?);
        d_k1[u].add_assign(&d_s1.transposed()?.matmul(&cache.q1[i])?)?;
    }

    let mut d_q2: Vec<Tensor<T>> = Vec::with_capacity(h);
    let mut d_k2: Vec<Tensor<T>> = Vec::with_capacity(h);
    for j in 0..h {
        let d_s2 = softmax_backward(&cache.a2[j], &d_a2[j], Mask::Causal)?.scale(alpha);
        d_q2.push(d_s2.matmul(&cache.k2[j])?);
        d_k2.push(d_s2.transposed()?.matmul(&cache.q2[j])?);
    }

    // Undo the rotation (orthogonal, so the inverse rotation is the
    // gradient rule), reassemble full-width projection gradients, then fold
    // into weight and input gradients.
    let mut d_x = Tensor::zeros(&[n, cfg.d_model]);
    let fold = |per_unit: &[Tensor<T>],
                    w: &Tensor<T>,
                    width: usize,
                    rope: bool,
                    d_x: &mut Tensor<T>|
     -> Result<Tensor<T>> {
        let mut full = Tensor::zeros(&[n, per_unit.len() * width]);
        for (u, g) in per_unit.iter().enumerate() {
            let g = if rope {
                g.apply_rope_inverse(&positions, cfg.rope_theta)?
            } else {
                g.clone()
            };
            full.add_into_cols(u * width, &g)?;
        }
        let d_w = cache.x.transposed()?.matmul(&full)?;
        d_x.add_assign(&full.matmul(&w.transposed()?)?)?;
        Ok(d_w)
    };

    let d_wq1 = fold(&d_q1, &params.wq1, dh, true, &mut d_x)?;
    let d_wk1 = fold(&d_k1, &params.wk1, dh, true, &mut d_x)?;
    let d_wq2 = fold(&d_q2, &params.wq2, dh, true, &mut d_x)?;
    let d_wk2 = fold(&d_k2, &params.wk2, dh, true, &mut d_x)?;
    let d_wv = fold(&d_v, &params.wv, 2 * dh, false, &mut d_x)?;

    // lambda = exp(dot1) - exp(dot2) + const.
    let e1 = cache.dot1.exp() * d_lambda;
    let e2 = cache.dot2.exp() * d_lambda;
    let lam = &params.lambda;
    let grads = AttentionGrads {
        wq1: d_wq1,
        wk1: d_wk1,
        wq2: d_wq2,
        wk2: d_wk2,
        wv: d_wv,
        wo: d_wo,
        lq1: lam.lk1.scale(e1),
        lk1: lam.lq1.scale(e1),
        lq2: lam.lk2.scale(T::zero() - e2),
        lk2: lam.lq2.scale(T::zero() - e2),
        head_gains: d_gains,
    };
    Ok((d_x, grads))
}

/// Parameter counts for one attention layer, split by tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub wq1: u64,
    pub wk1: u64,
    pub wq2: u64,
    pub wk2: u64,
    pub wv: u64,
    pub wo: u64,
    pub lambda: u64,
    pub head_norm: u64,
}

impl ParamCount {
    /// The six projection matrices only.
    pub fn projections(&self) -> u64 {
        self.wq1 + self.wk1 + self.wq2 + self.wk2 + self.wv + self.wo
    }

    pub fn per_layer(&self) -> u64 {
        self.projections() + self.lambda + self.head_norm
    }
}

/// Pure arithmetic on the config; intentionally does not require a runnable
/// geometry so that published allocations with incompatible kv counts can
/// still be audited.
pub fn param_count(cfg: &GdaConfig) -> ParamCount {
    let (d, dh) = (cfg.d_model as u64, cfg.d_head as u64);
    let s = cfg.signal_heads() as u64;
    let h = cfg.noise_heads() as u64;
    let kv = cfg.n_kv as u64;
    ParamCount {
        wq1: d * s * dh,
        wk1: d * kv * dh,
        wq2: d * h * dh,
        wk2: d * h * dh,
        wv: d * kv * 2 * dh,
        wo: 2 * s * dh * d,
        lambda: 4 * dh,
        head_norm: s * 2 * dh,
    }
}

/// Forward flop estimate for one attention layer at a given sequence length
/// (one multiply or one add counts as one flop; softmax transcendentals are
/// counted as one each).
#[derive(Clone, Debug)]
pub struct FlopsReport {
    pub seq_len: usize,
    pub stages: Vec<(&'static str, u64)>,
    /// Score maps materialized per layer: S signal + h noise = H.
    pub score_maps: usize,
}

impl FlopsReport {
    pub fn layer_total(&self) -> u64 {
        self.stages.iter().map(|(_, f)| f).sum()
    }
}

pub fn flops_estimate(cfg: &GdaConfig, seq_len: usize) -> FlopsReport {
    let n = seq_len as u64;
    let (d, dh) = (cfg.d_model as u64, cfg.d_head as u64);
    let s = cfg.signal_heads() as u64;
    let h = cfg.noise_heads() as u64;
    let kv = cfg.n_kv as u64;
    // Causal maps touch n*(n+1)/2 visible entries; estimates use the dense
    // n^2 upper bound for the products feeding them.
    let nn = n * n;
    let mm = |rows: u64, inner: u64, cols: u64| 2 * rows * inner * cols;
    let rope = |heads: u64| heads * n * (dh / 2) * 6;
    let stages = vec![
        ("project q1", mm(n, d, s * dh)),
        ("project k1", mm(n, d, kv * dh)),
        ("project q2", mm(n, d, h * dh)),
        ("project k2", mm(n, d, h * dh)),
        ("project v", mm(n, d, kv * 2 * dh)),
        ("rotary", rope(s) + rope(kv) + 2 * rope(h)),
        ("signal scores", s * (mm(n, dh, n) + nn)),
        ("noise scores", h * (mm(n, dh, n) + nn)),
        ("softmax", (s + h) * 5 * nn),
        ("differential combine", s * 2 * nn),
        ("value apply", s * mm(n, n, 2 * dh)),
        ("head norm", s * n * (3 * 2 * dh + 2)),
        ("output projection", mm(n, 2 * s * dh, d)),
    ];
    FlopsReport {
        seq_len,
        stages,
        score_maps: (s + h) as usize,
    }
}

/// One row of the head-allocation table for a given total head count.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocRow {
    pub ratio: usize,
    pub valid: bool,
    pub signal: usize,
    pub noise: usize,
    pub note: String,
}

/// Head split per candidate ratio. Invalid ratios (where `ratio + 1` does
/// not divide the head count) are flagged rather than skipped so a scan over
/// ratios shows exactly why a row is missing.
pub fn allocation_table(heads: usize, ratios: &[usize]) -> Vec<AllocRow> {
    ratios
        .iter()
        .map(|&ratio| {
            if ratio == 0 {
                return AllocRow {
                    ratio,
                    valid: false,
                    signal: 0,
                    noise: 0,
                    note: "ratio must be at least 1".into(),
                };
            }
            if heads % (ratio + 1) != 0 {
                return AllocRow {
                    ratio,
                    valid: false,
                    signal: 0,
                    noise: 0,
                    note: format!("{} does not divide {heads} heads", ratio + 1),
                };
            }
            let noise = heads / (ratio + 1);
            AllocRow {
                ratio,
                valid: true,
                signal: heads - noise,
                noise,
                note: String::new(),
            }
        })
        .collect()
}

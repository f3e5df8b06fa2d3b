//! Multi-head self- and cross-attention, residual fusion, and the
//! feed-forward unit used by every encoder block.
//!
//! The attention operations here are pure: no normalization and no residual
//! inside `mhsa`/`mhca`. Blocks compose them pre-norm style (norm before
//! attention/FFN, residual after); `mix_ffn` carries its own branch norm and
//! residual so that zero weights reduce it to the identity.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ForwardPass, ParamId, ParamStore};
use crate::tape::TensorId;
use crate::tensor::Real;

pub const LN_EPS: f64 = 1e-6;

/// Projection weights for one attention operation over width `dim`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl AttentionParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionParams {
            dim,
            heads,
            w_q: store.add_weight(format!("{prefix}.wq"), vec![dim, dim], rng),
            b_q: store.add_bias(format!("{prefix}.bq"), vec![dim]),
            w_k: store.add_weight(format!("{prefix}.wk"), vec![dim, dim], rng),
            b_k: store.add_bias(format!("{prefix}.bk"), vec![dim]),
            w_v: store.add_weight(format!("{prefix}.wv"), vec![dim, dim], rng),
            b_v: store.add_bias(format!("{prefix}.bv"), vec![dim]),
            w_o: store.add_weight(format!("{prefix}.wo"), vec![dim, dim], rng),
            b_o: store.add_bias(format!("{prefix}.bo"), vec![dim]),
        })
    }

    pub fn head_width(&self) -> usize {
        self.dim / self.heads
    }
}

/// Strided-conv spatial reduction for self-attention keys/values.
#[derive(Debug, Clone)]
pub struct SrParams {
    pub sr: usize,
    pub w: ParamId,
    pub b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

impl SrParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        dim: usize,
        sr: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SrParams {
            sr,
            w: store.add_weight(format!("{prefix}.w"), vec![dim, dim, sr, sr], rng),
            b: store.add_bias(format!("{prefix}.b"), vec![dim]),
            ln_g: store.add_gain(format!("{prefix}.ln_g"), vec![dim]),
            ln_b: store.add_bias(format!("{prefix}.ln_b"), vec![dim]),
        }
    }
}

/// Feed-forward unit: pre-norm, 4× expansion, depthwise 3×3 over the
/// spatial layout, GELU, projection back, residual.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub dim: usize,
    pub hidden: usize,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub dw: ParamId,
    pub db: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn init<F: Real>(store: &mut ParamStore<F>, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = dim * 4;
        FfnParams {
            dim,
            hidden,
            ln_g: store.add_gain(format!("{prefix}.ln_g"), vec![dim]),
            ln_b: store.add_bias(format!("{prefix}.ln_b"), vec![dim]),
            w1: store.add_weight(format!("{prefix}.w1"), vec![dim, hidden], rng),
            b1: store.add_bias(format!("{prefix}.b1"), vec![hidden]),
            dw: store.add_weight(format!("{prefix}.dw"), vec![hidden, 3, 3], rng),
            db: store.add_bias(format!("{prefix}.db"), vec![hidden]),
            w2: store.add_weight(format!("{prefix}.w2"), vec![hidden, dim], rng),
            b2: store.add_bias(format!("{prefix}.b2"), vec![dim]),
        }
    }
}

/// One transformer block's parameter set: self-attention with optional
/// spatial reduction, feed-forward, and the block norms.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub dim: usize,
    pub sr: usize,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub attn: AttentionParams,
    pub sr_red: Option<SrParams>,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        dim: usize,
        heads: usize,
        sr: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(BlockParams {
            dim,
            sr,
            ln1_g: store.add_gain(format!("{prefix}.ln1_g"), vec![dim]),
            ln1_b: store.add_bias(format!("{prefix}.ln1_b"), vec![dim]),
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), dim, heads, rng)?,
            sr_red: (sr > 1).then(|| SrParams::init(store, &format!("{prefix}.sr"), dim, sr, rng)),
            ffn: FfnParams::init(store, &format!("{prefix}.ffn"), dim, rng),
        })
    }
}

// ── layout helpers ──────────────────────────────────────────────────

/// [L,D] sequence → [D,H,W] image layout, L = H·W.
pub fn seq_to_chw<F: Real>(fp: &mut ForwardPass<F>, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
    let s = fp.tape.shape(x);
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::ShapeMismatch {
            op: "seq_to_chw",
            detail: format!("{s:?} vs {h}×{w}"),
        });
    }
    let d = s[1];
    let t = fp.tape.transpose2(x)?;
    fp.tape.reshape(t, vec![d, h, w])
}

/// [C,H,W] image layout → [H·W, C] sequence.
pub fn chw_to_seq<F: Real>(fp: &mut ForwardPass<F>, x: TensorId) -> Result<TensorId> {
    let s = fp.tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "chw_to_seq",
            detail: format!("{s:?} is not chw"),
        });
    }
    let flat = fp.tape.reshape(x, vec![s[0], s[1] * s[2]])?;
    fp.tape.transpose2(flat)
}

fn project<F: Real>(fp: &mut ForwardPass<F>, x: TensorId, w: ParamId, b: ParamId) -> Result<TensorId> {
    let wt = fp.param(w)?;
    let bt = fp.param(b)?;
    let y = fp.tape.matmul(x, wt)?;
    fp.tape.add_bias(y, bt)
}

/// Scaled dot-product attention per head: Softmax(Q·Kᵀ/√d_k)·V, heads
/// concatenated and projected by W_O.
fn multi_head<F: Real>(
    fp: &mut ForwardPass<F>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    p: &AttentionParams,
) -> Result<TensorId> {
    let dk = p.head_width();
    let scale = F::from_f64(1.0 / (dk as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = fp.tape.narrow(q, 1, h * dk, dk)?;
        let kh = fp.tape.narrow(k, 1, h * dk, dk)?;
        let vh = fp.tape.narrow(v, 1, h * dk, dk)?;
        let scores = fp.tape.matmul_nt(qh, kh)?;
        let scores = fp.tape.scale(scores, scale)?;
        let weights = fp.tape.softmax(scores, 1)?;
        let weights = fp.maybe_dropout(weights)?;
        head_outputs.push(fp.tape.matmul(weights, vh)?);
    }
    let merged = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        fp.tape.concat(&head_outputs, 1)?
    };
    project(fp, merged, p.w_o, p.b_o)
}

/// Multi-head self-attention with spatially reduced keys/values when the
/// block's reduction ratio exceeds 1. Pure attention: the caller owns the
/// norm and the residual.
pub fn mhsa<F: Real>(
    fp: &mut ForwardPass<F>,
    x: TensorId,
    p: &BlockParams,
    hw: (usize, usize),
) -> Result<TensorId> {
    let (h, w) = hw;
    let xs = fp.tape.shape(x);
    if xs.len() != 2 || xs[0] != h * w || xs[1] != p.dim {
        return Err(Error::ShapeMismatch {
            op: "mhsa",
            detail: format!("{xs:?} vs L = {h}×{w}, D = {}", p.dim),
        });
    }
    let q = project(fp, x, p.attn.w_q, p.attn.b_q)?;
    let kv_src = match &p.sr_red {
        Some(sr) => {
            if h % sr.sr != 0 || w % sr.sr != 0 {
                return Err(Error::ShapeMismatch {
                    op: "mhsa",
                    detail: format!("sr {} does not divide {h}×{w}", sr.sr),
                });
            }
            let chw = seq_to_chw(fp, x, h, w)?;
            let kernel = fp.param(sr.w)?;
            let reduced = fp.tape.conv2d(chw, kernel, sr.sr, 0)?;
            let bias = fp.param(sr.b)?;
            let reduced = fp.tape.add_chan_bias(reduced, bias)?;
            let seq = chw_to_seq(fp, reduced)?;
            let g = fp.param(sr.ln_g)?;
            let b = fp.param(sr.ln_b)?;
            fp.tape.layer_norm(seq, g, b, F::from_f64(LN_EPS))?
        }
        None => x,
    };
    let k = project(fp, kv_src, p.attn.w_k, p.attn.b_k)?;
    let v = project(fp, kv_src, p.attn.w_v, p.attn.b_v)?;
    multi_head(fp, q, k, v, &p.attn)
}

/// Multi-head cross-attention: queries from the primary feature, keys and
/// values from the auxiliary feature.
pub fn mhca<F: Real>(
    fp: &mut ForwardPass<F>,
    f_primary: TensorId,
    f_aux: TensorId,
    p: &AttentionParams,
) -> Result<TensorId> {
    if fp.tape.shape(f_primary) != fp.tape.shape(f_aux) {
        return Err(Error::ShapeMismatch {
            op: "mhca",
            detail: format!(
                "primary {:?} vs auxiliary {:?}",
                fp.tape.shape(f_primary),
                fp.tape.shape(f_aux)
            ),
        });
    }
    let q = project(fp, f_primary, p.w_q, p.b_q)?;
    let k = project(fp, f_aux, p.w_k, p.b_k)?;
    let v = project(fp, f_aux, p.w_v, p.b_v)?;
    multi_head(fp, q, k, v, p)
}

/// Residual fusion: elementwise sum of the self-attended feature and the
/// cross-modal feature.
pub fn residual_fuse<F: Real>(fp: &mut ForwardPass<F>, f_prime: TensorId, f_c: TensorId) -> Result<TensorId> {
    fp.tape.add(f_prime, f_c)
}

/// Feed-forward unit with its own pre-norm and residual: with zero weights
/// the output equals the input.
pub fn mix_ffn<F: Real>(
    fp: &mut ForwardPass<F>,
    x: TensorId,
    p: &FfnParams,
    hw: (usize, usize),
) -> Result<TensorId> {
    let (h, w) = hw;
    let xs = fp.tape.shape(x);
    if xs.len() != 2 || xs[0] != h * w || xs[1] != p.dim {
        return Err(Error::ShapeMismatch {
            op: "mix_ffn",
            detail: format!("{xs:?} vs L = {h}×{w}, D = {}", p.dim),
        });
    }
    let g = fp.param(p.ln_g)?;
    let b = fp.param(p.ln_b)?;
    let u = fp.tape.layer_norm(x, g, b, F::from_f64(LN_EPS))?;
    let expanded = project(fp, u, p.w1, p.b1)?;
    let chw = seq_to_chw(fp, expanded, h, w)?;
    let dw = fp.param(p.dw)?;
    let mixed = fp.tape.depthwise_conv2d(chw, dw)?;
    let db = fp.param(p.db)?;
    let mixed = fp.tape.add_chan_bias(mixed, db)?;
    let activated = fp.tape.gelu(mixed)?;
    let seq = chw_to_seq(fp, activated)?;
    let out = project(fp, seq, p.w2, p.b2)?;
    fp.tape.add(x, out)
}

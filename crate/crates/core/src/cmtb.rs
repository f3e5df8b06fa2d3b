//! Cross-modal transformer blocks and the four-stage multi-branch encoder.
//!
//! Each stage embeds every present modality with an overlapping patch
//! convolution, then runs `depth` blocks. Within a block, one modality is
//! primary: it is self-attended, while the other present modalities are
//! condensed by the self-query hub and the parallel pooling mixer into a
//! single auxiliary feature that is injected through cross-attention and a
//! residual add. Every modality takes the primary role once per block, all
//! branches reading the same input snapshot, so branches are symmetric and
//! order-independent.

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    chw_to_seq, mhca, mhsa, mix_ffn, residual_fuse, seq_to_chw, AttentionParams, BlockParams,
    LN_EPS,
};
use crate::error::{Error, Result};
use crate::kernels::conv_out_extent;
use crate::params::{ForwardPass, ParamId, ParamStore};
use crate::tape::TensorId;
use crate::tensor::{Real, Tensor};

/// Per-stage architecture knobs.
#[derive(Debug, Clone)]
pub struct StageConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub sr: usize,
    pub patch_stride: usize,
    pub patch_kernel: usize,
}

/// Runtime ablation switches for the block structure.
#[derive(Debug, Clone, Copy)]
pub struct CmtbSwitches {
    /// Replace the self-query hub with an arithmetic mean of auxiliaries.
    pub mean_hub: bool,
    /// Disable cross-attention entirely (auxiliary path skipped).
    pub cross_attention: bool,
    /// Keep the residual add of the cross-modal feature.
    pub residual_add: bool,
}

impl Default for CmtbSwitches {
    fn default() -> Self {
        CmtbSwitches {
            mean_hub: false,
            cross_attention: true,
            residual_add: true,
        }
    }
}

/// One sample's aligned modality maps in canonical slot order.
#[derive(Debug, Clone)]
pub struct ModalityBundle<F: Real> {
    pub maps: Vec<Option<Tensor<F>>>,
    pub names: Vec<String>,
}

impl<F: Real> ModalityBundle<F> {
    pub fn new(maps: Vec<Option<Tensor<F>>>, names: Vec<String>) -> Result<Self> {
        if maps.len() != names.len() {
            return Err(Error::InvalidArgument(
                "modality maps and names disagree in count".into(),
            ));
        }
        let mut hw: Option<(usize, usize)> = None;
        let mut any = false;
        for m in maps.iter().flatten() {
            let s = m.shape();
            if s.len() != 3 {
                return Err(Error::ShapeMismatch {
                    op: "bundle",
                    detail: format!("modality map {s:?} is not [C,H,W]"),
                });
            }
            let cur = (s[1], s[2]);
            if let Some(prev) = hw {
                if prev != cur {
                    return Err(Error::ShapeMismatch {
                        op: "bundle",
                        detail: format!("modality extents {prev:?} vs {cur:?}"),
                    });
                }
            }
            hw = Some(cur);
            any = true;
        }
        if !any {
            return Err(Error::InvalidArgument("no modality present".into()));
        }
        Ok(ModalityBundle { maps, names })
    }

    /// Build from arbitrarily ordered (name, map) pairs, normalizing to the
    /// canonical order so branch parameters stay tied to modality identity.
    pub fn from_named(pairs: Vec<(String, Tensor<F>)>, canonical: &[String]) -> Result<Self> {
        let mut maps: Vec<Option<Tensor<F>>> = vec![None; canonical.len()];
        for (name, map) in pairs {
            let slot = canonical
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {name}")))?;
            maps[slot] = Some(map);
        }
        ModalityBundle::new(maps, canonical.to_vec())
    }

    pub fn present(&self) -> Vec<bool> {
        self.maps.iter().map(|m| m.is_some()).collect()
    }

    pub fn present_count(&self) -> usize {
        self.maps.iter().filter(|m| m.is_some()).count()
    }

    pub fn hw(&self) -> (usize, usize) {
        let m = self.maps.iter().flatten().next().expect("validated non-empty");
        (m.shape()[1], m.shape()[2])
    }
}

/// Per-stage, per-modality encoder outputs bound on the current tape.
pub struct StageFeatures {
    /// features[stage][modality], `None` where the modality is absent.
    pub features: Vec<Vec<Option<TensorId>>>,
    pub hw: Vec<(usize, usize)>,
    pub dims: Vec<usize>,
    pub present: Vec<bool>,
}

// ── parameter containers ────────────────────────────────────────────

/// Learned per-position scorer for the self-query hub.
#[derive(Debug, Clone)]
pub struct HubParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl HubParams {
    fn init<F: Real>(store: &mut ParamStore<F>, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        HubParams {
            w: store.add_weight(format!("{prefix}.w"), vec![dim, 1], rng),
            b: store.add_bias(format!("{prefix}.b"), vec![1]),
        }
    }
}

/// Parallel pooling mixer: identity ∥ avg-pool ∥ max-pool, mixed back to D.
#[derive(Debug, Clone)]
pub struct PpxParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl PpxParams {
    fn init<F: Real>(store: &mut ParamStore<F>, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        PpxParams {
            w: store.add_weight(format!("{prefix}.w"), vec![3 * dim, dim], rng),
            b: store.add_bias(format!("{prefix}.b"), vec![dim]),
        }
    }
}

/// Full parameter set of one cross-modal block.
#[derive(Debug, Clone)]
pub struct CmtbParams {
    pub block: BlockParams,
    pub ln_q_g: ParamId,
    pub ln_q_b: ParamId,
    pub ln_kv_g: ParamId,
    pub ln_kv_b: ParamId,
    pub xattn: AttentionParams,
    pub hub: HubParams,
    pub ppx: PpxParams,
}

impl CmtbParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        dim: usize,
        heads: usize,
        sr: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(CmtbParams {
            block: BlockParams::init(store, prefix, dim, heads, sr, rng)?,
            ln_q_g: store.add_gain(format!("{prefix}.ln_q_g"), vec![dim]),
            ln_q_b: store.add_bias(format!("{prefix}.ln_q_b"), vec![dim]),
            ln_kv_g: store.add_gain(format!("{prefix}.ln_kv_g"), vec![dim]),
            ln_kv_b: store.add_bias(format!("{prefix}.ln_kv_b"), vec![dim]),
            xattn: AttentionParams::init(store, &format!("{prefix}.xattn"), dim, heads, rng)?,
            hub: HubParams::init(store, &format!("{prefix}.hub"), dim, rng),
            ppx: PpxParams::init(store, &format!("{prefix}.ppx"), dim, rng),
        })
    }
}

/// Overlapping patch embedding: strided conv then layer norm in sequence
/// layout.
#[derive(Debug, Clone)]
pub struct PatchEmbedParams {
    pub w: ParamId,
    pub b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub stride: usize,
    pub kernel: usize,
}

impl PatchEmbedParams {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        c_in: usize,
        dim: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        PatchEmbedParams {
            w: store.add_weight(format!("{prefix}.w"), vec![dim, c_in, kernel, kernel], rng),
            b: store.add_bias(format!("{prefix}.b"), vec![dim]),
            ln_g: store.add_gain(format!("{prefix}.ln_g"), vec![dim]),
            ln_b: store.add_bias(format!("{prefix}.ln_b"), vec![dim]),
            stride,
            kernel,
        }
    }
}

/// All encoder parameters: patch embeddings are always per-modality (input
/// channel counts differ); block parameters are per-modality unless
/// `share_branch_params` folds them into one set for the ablation.
pub struct EncoderParams {
    pub stages: Vec<StageConfig>,
    pub patch: Vec<Vec<PatchEmbedParams>>,
    pub blocks: Vec<Vec<Vec<CmtbParams>>>,
    pub modalities: usize,
}

impl EncoderParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        stages: &[StageConfig],
        modality_channels: &[usize],
        share_branch_params: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if stages.len() != 4 {
            return Err(Error::Config(format!(
                "encoder expects exactly 4 stages, got {}",
                stages.len()
            )));
        }
        let n = modality_channels.len();
        if n == 0 {
            return Err(Error::Config("at least one modality required".into()));
        }
        let mut patch = Vec::with_capacity(stages.len());
        let mut blocks = Vec::with_capacity(stages.len());
        for (si, sc) in stages.iter().enumerate() {
            if sc.depth == 0 {
                return Err(Error::Config(format!("stage {si} has zero depth")));
            }
            let mut stage_patch = Vec::with_capacity(n);
            let mut stage_blocks: Vec<Vec<CmtbParams>> = Vec::with_capacity(n);
            for m in 0..n {
                let c_in = if si == 0 {
                    modality_channels[m]
                } else {
                    stages[si - 1].embed_dim
                };
                stage_patch.push(PatchEmbedParams::init(
                    store,
                    &format!("enc.s{si}.m{m}.patch"),
                    c_in,
                    sc.embed_dim,
                    sc.patch_kernel,
                    sc.patch_stride,
                    rng,
                ));
                if share_branch_params && m > 0 {
                    stage_blocks.push(stage_blocks[0].clone());
                    continue;
                }
                let mut chain = Vec::with_capacity(sc.depth);
                for d in 0..sc.depth {
                    chain.push(CmtbParams::init(
                        store,
                        &format!("enc.s{si}.m{m}.b{d}"),
                        sc.embed_dim,
                        sc.heads,
                        sc.sr,
                        rng,
                    )?);
                }
                stage_blocks.push(chain);
            }
            patch.push(stage_patch);
            blocks.push(stage_blocks);
        }
        Ok(EncoderParams {
            stages: stages.to_vec(),
            patch,
            blocks,
            modalities: n,
        })
    }
}

// ── operations ──────────────────────────────────────────────────────

/// Self-query hub: learned per-position softmax gating across auxiliary
/// features. With a single auxiliary the output is that auxiliary, exactly.
pub fn sq_hub<F: Real>(fp: &mut ForwardPass<F>, aux: &[TensorId], p: &HubParams) -> Result<TensorId> {
    if aux.is_empty() {
        return Err(Error::InvalidArgument("sq_hub needs ≥ 1 auxiliary".into()));
    }
    let shape = fp.tape.shape(aux[0]).to_vec();
    for &a in &aux[1..] {
        if fp.tape.shape(a) != shape {
            return Err(Error::ShapeMismatch {
                op: "sq_hub",
                detail: format!("{:?} vs {shape:?}", fp.tape.shape(a)),
            });
        }
    }
    if aux.len() == 1 {
        return Ok(aux[0]);
    }
    let l = shape[0];
    // Score each auxiliary per position, softmax across auxiliaries.
    let mut score_rows = Vec::with_capacity(aux.len());
    for &a in aux {
        let w = fp.param(p.w)?;
        let s = fp.tape.matmul(a, w)?;
        let b = fp.param(p.b)?;
        let b_broadcast = fp.tape.add_bias(s, b)?;
        score_rows.push(fp.tape.transpose2(b_broadcast)?);
    }
    let stacked = fp.tape.concat(&score_rows, 0)?;
    let weights = fp.tape.softmax(stacked, 0)?;
    let mut acc: Option<TensorId> = None;
    for (m, &a) in aux.iter().enumerate() {
        let row = fp.tape.narrow(weights, 0, m, 1)?;
        let alpha = fp.tape.reshape(row, vec![l])?;
        let weighted = fp.tape.row_scale(a, alpha)?;
        acc = Some(match acc {
            Some(prev) => fp.tape.add(prev, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.expect("aux non-empty"))
}

/// Arithmetic-mean replacement for the hub (ablation switch).
pub fn mean_hub<F: Real>(fp: &mut ForwardPass<F>, aux: &[TensorId]) -> Result<TensorId> {
    if aux.is_empty() {
        return Err(Error::InvalidArgument("mean_hub needs ≥ 1 auxiliary".into()));
    }
    let mut acc = aux[0];
    for &a in &aux[1..] {
        acc = fp.tape.add(acc, a)?;
    }
    fp.tape.scale(acc, F::from_f64(1.0 / aux.len() as f64))
}

/// Parallel pooling mixer: 3×3 average and max pools over the spatial
/// layout, concatenated with the identity branch and mixed back to D.
pub fn ppx<F: Real>(
    fp: &mut ForwardPass<F>,
    x: TensorId,
    p: &PpxParams,
    hw: (usize, usize),
) -> Result<TensorId> {
    let (h, w) = hw;
    let xs = fp.tape.shape(x);
    if xs.len() != 2 || xs[0] != h * w {
        return Err(Error::ShapeMismatch {
            op: "ppx",
            detail: format!("{xs:?} vs L = {h}×{w}"),
        });
    }
    let chw = seq_to_chw(fp, x, h, w)?;
    let avg = fp.tape.avg_pool3(chw)?;
    let max = fp.tape.max_pool3(chw)?;
    let avg_seq = chw_to_seq(fp, avg)?;
    let max_seq = chw_to_seq(fp, max)?;
    let stacked = fp.tape.concat(&[x, avg_seq, max_seq], 1)?;
    let w_mix = fp.param(p.w)?;
    let mixed = fp.tape.matmul(stacked, w_mix)?;
    let b = fp.param(p.b)?;
    fp.tape.add_bias(mixed, b)
}

/// One cross-modal block over the primary feature with the present
/// auxiliaries. With an empty auxiliary list (or cross-attention switched
/// off) the block reduces to the pure self-attention path.
pub fn cmtb_stage<F: Real>(
    fp: &mut ForwardPass<F>,
    primary: TensorId,
    aux: &[TensorId],
    p: &CmtbParams,
    hw: (usize, usize),
    switches: CmtbSwitches,
) -> Result<TensorId> {
    let eps = F::from_f64(LN_EPS);
    let g1 = fp.param(p.block.ln1_g)?;
    let b1 = fp.param(p.block.ln1_b)?;
    let normed = fp.tape.layer_norm(primary, g1, b1, eps)?;
    let attended = mhsa(fp, normed, &p.block, hw)?;
    let f_prime = fp.tape.add(primary, attended)?;

    let fused = if !aux.is_empty() && switches.cross_attention {
        let hub_out = if switches.mean_hub {
            mean_hub(fp, aux)?
        } else {
            sq_hub(fp, aux, &p.hub)?
        };
        let f_aux = ppx(fp, hub_out, &p.ppx, hw)?;
        let gq = fp.param(p.ln_q_g)?;
        let bq = fp.param(p.ln_q_b)?;
        let q_in = fp.tape.layer_norm(f_prime, gq, bq, eps)?;
        let gkv = fp.param(p.ln_kv_g)?;
        let bkv = fp.param(p.ln_kv_b)?;
        let kv_in = fp.tape.layer_norm(f_aux, gkv, bkv, eps)?;
        let f_c = mhca(fp, q_in, kv_in, &p.xattn)?;
        if switches.residual_add {
            residual_fuse(fp, f_prime, f_c)?
        } else {
            f_c
        }
    } else {
        f_prime
    };

    mix_ffn(fp, fused, &p.block.ffn, hw)
}

fn patch_embed<F: Real>(
    fp: &mut ForwardPass<F>,
    x_chw: TensorId,
    p: &PatchEmbedParams,
) -> Result<(TensorId, (usize, usize))> {
    let xs = fp.tape.shape(x_chw).to_vec();
    let kernel = fp.param(p.w)?;
    let conv = fp.tape.conv2d(x_chw, kernel, p.stride, p.kernel / 2)?;
    let bias = fp.param(p.b)?;
    let conv = fp.tape.add_chan_bias(conv, bias)?;
    let oh = conv_out_extent(xs[1], p.kernel, p.stride, p.kernel / 2);
    let ow = conv_out_extent(xs[2], p.kernel, p.stride, p.kernel / 2);
    let seq = chw_to_seq(fp, conv)?;
    let g = fp.param(p.ln_g)?;
    let b = fp.param(p.ln_b)?;
    let normed = fp.tape.layer_norm(seq, g, b, F::from_f64(LN_EPS))?;
    Ok((normed, (oh, ow)))
}

/// Run the four-stage encoder over every present modality. Branches read
/// the same per-block input snapshot, in canonical modality order, so the
/// result is independent of how the bundle was assembled.
pub fn encoder_forward<F: Real>(
    fp: &mut ForwardPass<F>,
    bundle: &ModalityBundle<F>,
    enc: &EncoderParams,
    switches: CmtbSwitches,
) -> Result<StageFeatures> {
    if bundle.maps.len() != enc.modalities {
        return Err(Error::Config(format!(
            "bundle has {} modality slots, encoder expects {}",
            bundle.maps.len(),
            enc.modalities
        )));
    }
    let n = enc.modalities;
    let present = bundle.present();
    let mut features: Vec<Vec<Option<TensorId>>> = Vec::with_capacity(4);
    let mut hw_per_stage = Vec::with_capacity(4);
    let mut dims = Vec::with_capacity(4);

    // Stage inputs in chw layout; None for absent branches throughout.
    let mut inputs: Vec<Option<TensorId>> = bundle
        .maps
        .iter()
        .map(|m| m.as_ref().map(|t| fp.input(t)).transpose())
        .collect::<Result<_>>()?;

    let mut prev_hw: Option<(usize, usize)> = None;
    for (si, sc) in enc.stages.iter().enumerate() {
        // Patch embed each present branch.
        let mut cur: Vec<Option<TensorId>> = vec![None; n];
        let mut hw = (0, 0);
        for m in 0..n {
            let Some(x) = inputs[m] else { continue };
            let (seq, ohw) = patch_embed(fp, x, &enc.patch[si][m])?;
            cur[m] = Some(seq);
            hw = ohw;
        }
        if let Some((ph, pw)) = prev_hw {
            if hw.0 >= ph || hw.1 >= pw {
                return Err(Error::Config(format!(
                    "stage {si} extents {hw:?} do not strictly decrease from {:?}",
                    (ph, pw)
                )));
            }
        }
        if hw.0 == 0 || hw.1 == 0 {
            return Err(Error::Config(format!("stage {si} collapsed to zero extent")));
        }
        prev_hw = Some(hw);

        for d in 0..sc.depth {
            let snapshot = cur.clone();
            for m in 0..n {
                let Some(primary) = snapshot[m] else { continue };
                let aux: Vec<TensorId> = (0..n)
                    .filter(|&k| k != m)
                    .filter_map(|k| snapshot[k])
                    .collect();
                cur[m] = Some(cmtb_stage(
                    fp,
                    primary,
                    &aux,
                    &enc.blocks[si][m][d],
                    hw,
                    switches,
                )?);
            }
        }

        // Next stage consumes chw layouts of this stage's outputs.
        inputs = cur
            .iter()
            .map(|t| t.map(|id| seq_to_chw(fp, id, hw.0, hw.1)).transpose())
            .collect::<Result<_>>()?;
        features.push(cur);
        hw_per_stage.push(hw);
        dims.push(sc.embed_dim);
    }

    Ok(StageFeatures {
        features,
        hw: hw_per_stage,
        dims,
        present,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Profile;
    use crate::util::rng_from;

    fn tiny_stages() -> Vec<StageConfig> {
        vec![
            StageConfig { embed_dim: 8, depth: 1, heads: 1, sr: 2, patch_stride: 4, patch_kernel: 7 },
            StageConfig { embed_dim: 8, depth: 1, heads: 2, sr: 2, patch_stride: 2, patch_kernel: 3 },
            StageConfig { embed_dim: 8, depth: 1, heads: 4, sr: 1, patch_stride: 2, patch_kernel: 3 },
            StageConfig { embed_dim: 8, depth: 1, heads: 8, sr: 1, patch_stride: 2, patch_kernel: 3 },
        ]
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..c * h * w)
            .map(|_| crate::util::trunc_normal_f64(rng, 0.5))
            .collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn sq_hub_single_auxiliary_is_identity() {
        let mut rng = rng_from(1);
        let mut store = ParamStore::<f64>::new();
        let hub = HubParams::init(&mut store, "h", 4, &mut rng);
        let mut fp = ForwardPass::new(&store, Profile::Test, false);
        let a = fp
            .input(&Tensor::from_f64_slice(vec![2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap())
            .unwrap();
        let out = sq_hub(&mut fp, &[a], &hub).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn sq_hub_identical_auxiliaries_return_the_shared_feature() {
        let mut rng = rng_from(2);
        let mut store = ParamStore::<f64>::new();
        let hub = HubParams::init(&mut store, "h", 3, &mut rng);
        let mut fp = ForwardPass::new(&store, Profile::Test, false);
        let vals = [0.5, -1.0, 2.0, 0.25, 0.75, -0.5];
        let a = fp.input(&Tensor::from_f64_slice(vec![2, 3], &vals).unwrap()).unwrap();
        let b = fp.input(&Tensor::from_f64_slice(vec![2, 3], &vals).unwrap()).unwrap();
        let out = sq_hub(&mut fp, &[a, b], &hub).unwrap();
        assert_eq!(fp.tape.value(out), &vals);
    }

    #[test]
    fn sq_hub_rejects_empty_and_mismatched_aux() {
        let mut rng = rng_from(3);
        let mut store = ParamStore::<f64>::new();
        let hub = HubParams::init(&mut store, "h", 2, &mut rng);
        let mut fp = ForwardPass::new(&store, Profile::Test, false);
        assert!(sq_hub(&mut fp, &[], &hub).is_err());
        let a = fp.input(&Tensor::zeros(vec![2, 2])).unwrap();
        let b = fp.input(&Tensor::zeros(vec![3, 2])).unwrap();
        assert!(sq_hub(&mut fp, &[a, b], &hub).is_err());
    }

    #[test]
    fn ppx_preserves_shape_and_handles_constants() {
        let mut rng = rng_from(4);
        let mut store = ParamStore::<f64>::new();
        let p = PpxParams::init(&mut store, "p", 3, &mut rng);
        let mut fp = ForwardPass::new(&store, Profile::Test, false);
        let x = fp.input(&Tensor::full(vec![4, 3], 0.7)).unwrap();
        let out = ppx(&mut fp, x, &p, (2, 2)).unwrap();
        assert_eq!(fp.tape.shape(out), &[4, 3]);
        // Constant input: every branch is the same constant vector, so all
        // output positions coincide.
        let vals = fp.tape.value(out);
        for r in 1..4 {
            for c in 0..3 {
                assert!((vals[r * 3 + c] - vals[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_stage_resolutions_follow_stride_arithmetic() {
        let mut rng = rng_from(5);
        let mut store = ParamStore::<f64>::new();
        let enc = EncoderParams::init(&mut store, &tiny_stages(), &[3, 1], false, &mut rng).unwrap();
        let mut data_rng = rng_from(6);
        let bundle = ModalityBundle::new(
            vec![
                Some(random_map(&mut data_rng, 3, 64, 64)),
                Some(random_map(&mut data_rng, 1, 64, 64)),
            ],
            vec!["rgb".into(), "depth".into()],
        )
        .unwrap();
        let mut fp = ForwardPass::new(&store, Profile::Test, false);
        let feats = encoder_forward(&mut fp, &bundle, &enc, CmtbSwitches::default()).unwrap();
        assert_eq!(feats.hw, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert_eq!(fp.tape.shape(feats.features[0][0].unwrap()), &[256, 8]);
    }

    #[test]
    fn single_modality_bundle_runs_degenerate_path() {
        let mut rng = rng_from(7);
        let mut store = ParamStore::<f64>::new();
        let enc = EncoderParams::init(&mut store, &tiny_stages(), &[1], false, &mut rng).unwrap();
        let mut data_rng = rng_from(8);
        let bundle = ModalityBundle::new(
            vec![Some(random_map(&mut data_rng, 1, 32, 32))],
            vec!["depth".into()],
        )
        .unwrap();
        let mut fp = ForwardPass::new(&store, Profile::Test, false);
        let feats = encoder_forward(&mut fp, &bundle, &enc, CmtbSwitches::default()).unwrap();
        assert!(feats.features[3][0].is_some());
    }

    #[test]
    fn bundle_requires_at_least_one_modality() {
        assert!(ModalityBundle::<f64>::new(vec![None, None], vec!["a".into(), "b".into()]).is_err());
    }

    #[test]
    fn aux_empty_equals_cross_attention_off() {
        // A lone present modality and a full bundle with cross-attention
        // disabled must produce the same primary-branch computation.
        let mut rng = rng_from(9);
        let mut store = ParamStore::<f64>::new();
        let enc = EncoderParams::init(&mut store, &tiny_stages(), &[3, 1], false, &mut rng).unwrap();
        let mut data_rng = rng_from(10);
        let rgb = random_map(&mut data_rng, 3, 32, 32);
        let depth = random_map(&mut data_rng, 1, 32, 32);
        let names = vec!["rgb".to_string(), "depth".to_string()];

        let solo = ModalityBundle::new(vec![Some(rgb.clone()), None], names.clone()).unwrap();
        let mut fp1 = ForwardPass::new(&store, Profile::Test, false);
        let f1 = encoder_forward(&mut fp1, &solo, &enc, CmtbSwitches::default()).unwrap();

        let both = ModalityBundle::new(vec![Some(rgb), Some(depth)], names).unwrap();
        let off = CmtbSwitches {
            cross_attention: false,
            ..CmtbSwitches::default()
        };
        let mut fp2 = ForwardPass::new(&store, Profile::Test, false);
        let f2 = encoder_forward(&mut fp2, &both, &enc, off).unwrap();

        let a = fp1.tape.value(f1.features[3][0].unwrap());
        let b = fp2.tape.value(f2.features[3][0].unwrap());
        assert_eq!(a, b);
    }
}

//! The segmentation model: encoder + decode head, losses, the training
//! step, and prediction.
//!
//! A batch step runs each sample on its own tape (in parallel with the
//! `parallel` feature), sums the per-sample gradients in sample order,
//! scales by 1/batch, and applies one AdamW update. The self-guidance loss
//! is computed only when it can contribute (enabled, λ > 0, ≥ 2 modalities
//! present), so a λ = 0 run is bit-identical to a disabled one.

use serde::Serialize;

use crate::cmtb::{encoder_forward, EncoderParams, ModalityBundle, StageFeatures};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::Confusion;
use crate::optim::{AdamW, LrSchedule};
use crate::params::{read_checkpoint_into, write_checkpoint, ForwardPass, ParamId, ParamStore};
use crate::sgm::{assign_pairs_cosine, assign_pairs_over, build_prototypes, sgm_loss, Pairing};
use crate::tape::TensorId;
use crate::tensor::{Labels, Real};
use crate::util::{derive_seed, par_map_indexed, rng_from, stream};

use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Decode-head parameters: per-stage linear projections, the fusion mix,
/// and the category classifier.
pub struct HeadParams {
    pub proj: Vec<(ParamId, ParamId)>,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub decode_dim: usize,
    pub classes: usize,
}

impl HeadParams {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        stage_dims: &[usize],
        decode_dim: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let proj = stage_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                (
                    store.add_weight(format!("head.p{i}.w"), vec![d, decode_dim], rng),
                    store.add_bias(format!("head.p{i}.b"), vec![decode_dim]),
                )
            })
            .collect();
        HeadParams {
            proj,
            fuse_w: store.add_weight("head.fuse.w", vec![stage_dims.len() * decode_dim, decode_dim], rng),
            fuse_b: store.add_bias("head.fuse.b", vec![decode_dim]),
            ln_g: store.add_gain("head.ln_g", vec![decode_dim]),
            ln_b: store.add_bias("head.ln_b", vec![decode_dim]),
            cls_w: store.add_weight("head.cls.w", vec![decode_dim, classes], rng),
            cls_b: store.add_bias("head.cls.b", vec![classes]),
            decode_dim,
            classes,
        }
    }
}

/// Segmentation output: full-resolution logits plus the per-stage fused
/// features that produced them.
pub struct SegOutput {
    pub logits: TensorId,
    pub fused: Vec<TensorId>,
}

pub struct SegModel<F: Real> {
    pub store: ParamStore<F>,
    pub enc: EncoderParams,
    pub head: HeadParams,
    pub cfg: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_CE")]
    pub ce: f64,
    #[serde(rename = "L_s")]
    pub sgm: f64,
    pub lr: f64,
}

impl<F: Real> SegModel<F> {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(derive_seed(cfg.seed, &[stream::INIT]));
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(
            &mut store,
            &cfg.stage_configs(),
            &cfg.model.modality_channels,
            cfg.model.share_branch_params,
            &mut rng,
        )?;
        let head = HeadParams::init(
            &mut store,
            &cfg.model.embed_dims,
            cfg.model.decode_dim,
            cfg.data.classes,
            &mut rng,
        );
        Ok(SegModel {
            store,
            enc,
            head,
            cfg: cfg.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.cfg.to_toml()?, &self.store)
    }

    /// Rebuild the model recorded in a checkpoint (values cast to `F` if
    /// the stored dtype differs).
    pub fn load(path: &Path) -> Result<Self> {
        let header = crate::params::read_checkpoint_meta(path)?;
        let cfg = ExperimentConfig::from_toml(&header.meta)?;
        let mut model = SegModel::new(&cfg)?;
        read_checkpoint_into(path, &mut model.store)?;
        Ok(model)
    }

    fn sgm_active(&self) -> bool {
        self.cfg.sgm.enabled && self.cfg.sgm.lambda > 0.0
    }

    /// Mean over present modalities, per stage  — the reduction feeding the
    /// decode head. With one modality present this is exactly that
    /// modality's features.
    pub fn fuse_modalities(&self, fp: &mut ForwardPass<F>, feats: &StageFeatures) -> Result<Vec<TensorId>> {
        let mut fused = Vec::with_capacity(feats.features.len());
        for stage in &feats.features {
            let present: Vec<TensorId> = stage.iter().flatten().copied().collect();
            if present.is_empty() {
                return Err(Error::InvalidArgument("no modality present to fuse".into()));
            }
            let mut acc = present[0];
            for &t in &present[1..] {
                acc = fp.tape.add(acc, t)?;
            }
            fused.push(if present.len() > 1 {
                fp.tape.scale(acc, F::from_f64(1.0 / present.len() as f64))?
            } else {
                acc
            });
        }
        Ok(fused)
    }

    /// Per-stage projection to the decode width, upsample to stage-1
    /// resolution, concat, fuse, classify, upsample to the input
    /// resolution.
    pub fn decode_head(
        &self,
        fp: &mut ForwardPass<F>,
        fused: &[TensorId],
        hw: &[(usize, usize)],
        input_hw: (usize, usize),
    ) -> Result<TensorId> {
        if fused.len() != 4 || hw.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "decode head expects 4 stages, got {}",
                fused.len()
            )));
        }
        let (h1, w1) = hw[0];
        let mut planes = Vec::with_capacity(4);
        for (i, (&f, &(h, w))) in fused.iter().zip(hw).enumerate() {
            let (pw, pb) = self.head.proj[i];
            let wt = fp.param(pw)?;
            let proj = fp.tape.matmul(f, wt)?;
            let bt = fp.param(pb)?;
            let proj = fp.tape.add_bias(proj, bt)?;
            let chw = crate::attention::seq_to_chw(fp, proj, h, w)?;
            planes.push(if (h, w) == (h1, w1) {
                chw
            } else {
                fp.tape.bilinear_upsample(chw, h1, w1)?
            });
        }
        let stacked = fp.tape.concat(&planes, 0)?;
        let seq = crate::attention::chw_to_seq(fp, stacked)?;
        let fw = fp.param(self.head.fuse_w)?;
        let mixed = fp.tape.matmul(seq, fw)?;
        let fb = fp.param(self.head.fuse_b)?;
        let mixed = fp.tape.add_bias(mixed, fb)?;
        // Norm between the fusion projection and the activation, as in the
        // reference decode head; keeps the classifier input at unit scale.
        let lg = fp.param(self.head.ln_g)?;
        let lb = fp.param(self.head.ln_b)?;
        let mixed = fp.tape.layer_norm(mixed, lg, lb, F::from_f64(crate::attention::LN_EPS))?;
        let mixed = fp.tape.gelu(mixed)?;
        let cw = fp.param(self.head.cls_w)?;
        let logits = fp.tape.matmul(mixed, cw)?;
        let cb = fp.param(self.head.cls_b)?;
        let logits = fp.tape.add_bias(logits, cb)?;
        let logits_chw = crate::attention::seq_to_chw(fp, logits, h1, w1)?;
        fp.tape.bilinear_upsample(logits_chw, input_hw.0, input_hw.1)
    }

    /// Encoder → fusion → decode head.
    pub fn forward(
        &self,
        fp: &mut ForwardPass<F>,
        bundle: &ModalityBundle<F>,
    ) -> Result<(SegOutput, StageFeatures)> {
        let feats = encoder_forward(fp, bundle, &self.enc, self.cfg.cmtb_switches())?;
        let fused = self.fuse_modalities(fp, &feats)?;
        let logits = self.decode_head(fp, &fused, &feats.hw, bundle.hw())?;
        Ok((SegOutput { logits, fused }, feats))
    }

    /// Total loss L = L_CE + λ·L_s for one sample; the pairing policy
    /// decides how teacher/student roles are drawn when SGM contributes.
    pub fn sample_loss(
        &self,
        fp: &mut ForwardPass<F>,
        bundle: &ModalityBundle<F>,
        labels: &Labels,
        pairing: Option<&PairingPolicy>,
    ) -> Result<SampleLosses> {
        let (out, feats) = self.forward(fp, bundle)?;
        let ce = fp
            .tape
            .cross_entropy_mean(out.logits, &labels.data, self.cfg.data.ignore_id)?;
        let present_idx: Vec<usize> = feats
            .present
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| p.then_some(i))
            .collect();

        let mut ls_value = 0.0;
        let total = if self.sgm_active() && present_idx.len() >= 2 && pairing.is_some() {
            let policy = pairing.expect("checked");
            let ls = if self.cfg.ablation.prototype {
                let protos = build_prototypes(
                    fp,
                    &feats,
                    labels,
                    self.cfg.data.classes,
                    self.cfg.data.ignore_id,
                )?;
                let pairing = policy.draw(fp, &protos, &present_idx)?;
                let (ls, _warned) = sgm_loss(fp, &protos, &pairing, self.cfg.kl_axis())?;
                ls
            } else {
                // Prototype operation ablated: distill per-position channel
                // distributions of the raw stage features instead.
                let protos = build_prototypes(
                    fp,
                    &feats,
                    labels,
                    self.cfg.data.classes,
                    self.cfg.data.ignore_id,
                )?;
                let pairing = policy.draw(fp, &protos, &present_idx)?;
                feature_level_loss(fp, &feats, &pairing)?
            };
            ls_value = fp.tape.scalar_value(ls).as_f64();
            let weighted = fp.tape.scale(ls, F::from_f64(self.cfg.sgm.lambda))?;
            fp.tape.add(ce, weighted)?
        } else {
            ce
        };

        Ok(SampleLosses {
            total,
            ce_value: fp.tape.scalar_value(ce).as_f64(),
            sgm_value: ls_value,
        })
    }

    /// Argmax prediction, ties broken toward the lower category id.
    pub fn predict(&self, bundle: &ModalityBundle<F>) -> Result<Labels> {
        let mut fp = ForwardPass::new(&self.store, self.cfg.runtime_profile(), false);
        let (out, _) = self.forward(&mut fp, bundle)?;
        let shape = fp.tape.shape(out.logits).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let vals = fp.tape.value(out.logits);
        let plane = h * w;
        let mut data = Vec::with_capacity(plane);
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = vals[p];
            for ch in 1..c {
                let v = vals[ch * plane + p];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            data.push(best as i32);
        }
        Labels::new(vec![h, w], data)
    }

    /// One optimization step over a batch. Gradients are reduced in sample
    /// order and scaled by 1/batch before the AdamW update.
    pub fn train_step(
        &mut self,
        optimizer: &mut AdamW<F>,
        schedule: &LrSchedule,
        batch: &[(ModalityBundle<F>, Labels)],
        step: u64,
    ) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let policy = self.pairing_policy(step);
        let profile = self.cfg.runtime_profile();
        let dropout = self.cfg.model.attn_dropout;
        let store = &self.store;

        let results: Vec<(Vec<(ParamId, Vec<F>)>, f64, f64)> =
            par_map_indexed(batch, |idx, (bundle, labels)| {
                let mut fp = ForwardPass::new(store, profile, true);
                if dropout > 0.0 {
                    let dseed = derive_seed(self.cfg.seed, &[stream::DROPOUT, step, idx as u64]);
                    fp = fp.with_dropout(dropout, rng_from(dseed));
                }
                let losses = self.sample_loss(&mut fp, bundle, labels, policy.as_ref())?;
                let total_v = fp.tape.scalar_value(losses.total).as_f64();
                if !total_v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {step}, sample {idx}: ce={}, sgm={}",
                        losses.ce_value, losses.sgm_value
                    )));
                }
                fp.tape.backward(losses.total)?;
                Ok((fp.take_grads(), losses.ce_value, losses.sgm_value))
            })?;

        let inv = F::from_f64(1.0 / batch.len() as f64);
        let mut ce_sum = 0.0;
        let mut sgm_sum = 0.0;
        for (grads, ce, sgm) in &results {
            ce_sum += ce;
            sgm_sum += sgm;
            for (pid, g) in grads {
                let scaled: Vec<F> = g.iter().map(|&v| v * inv).collect();
                self.store.accumulate_grad(*pid, &scaled);
            }
        }
        let lr = schedule.lr_at(step);
        optimizer.step(&mut self.store, lr);
        self.store.zero_grads();

        let ce = ce_sum / batch.len() as f64;
        let sgm = sgm_sum / batch.len() as f64;
        Ok(StepMetrics {
            step,
            loss: ce + self.cfg.sgm.lambda * sgm,
            ce,
            sgm,
            lr,
        })
    }

    fn pairing_policy(&self, step: u64) -> Option<PairingPolicy> {
        if !self.sgm_active() {
            return None;
        }
        let seed = derive_seed(self.cfg.seed, &[stream::PAIRING, step]);
        Some(PairingPolicy {
            cosine: self.cfg.sgm.pairing_mode == "cosine",
            seed,
        })
    }

    /// Forward-only total loss value; used by finite-difference checks.
    pub fn loss_value(
        &self,
        bundle: &ModalityBundle<F>,
        labels: &Labels,
        pairing_step: u64,
    ) -> Result<f64> {
        let mut fp = ForwardPass::new(&self.store, self.cfg.runtime_profile(), false);
        let policy = self.pairing_policy(pairing_step);
        let losses = self.sample_loss(&mut fp, bundle, labels, policy.as_ref())?;
        Ok(fp.tape.scalar_value(losses.total).as_f64())
    }

    /// Full backward pass for one sample; gradients land in the store.
    pub fn accumulate_sample_grads(
        &mut self,
        bundle: &ModalityBundle<F>,
        labels: &Labels,
        pairing_step: u64,
    ) -> Result<()> {
        let policy = self.pairing_policy(pairing_step);
        let mut fp = ForwardPass::new(&self.store, self.cfg.runtime_profile(), true);
        let losses = self.sample_loss(&mut fp, bundle, labels, policy.as_ref())?;
        fp.tape.backward(losses.total)?;
        let grads = fp.take_grads();
        for (pid, g) in grads {
            self.store.accumulate_grad(pid, &g);
        }
        Ok(())
    }

    /// Dataset mIoU with per-category breakdown; samples evaluate in
    /// parallel and reduce in index order.
    pub fn evaluate(&self, samples: &[(ModalityBundle<F>, Labels)]) -> Result<(f64, Confusion)> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let confs: Vec<Confusion> = par_map_indexed(samples, |_i, (bundle, labels)| {
            let pred = self.predict(bundle)?;
            let mut conf = Confusion::new(self.cfg.data.classes);
            conf.update(&pred, labels, self.cfg.data.ignore_id)?;
            Ok::<Confusion, Error>(conf)
        })?;
        let mut total = Confusion::new(self.cfg.data.classes);
        for c in &confs {
            total.merge(c);
        }
        Ok((total.miou(), total))
    }
}

pub struct SampleLosses {
    pub total: TensorId,
    pub ce_value: f64,
    pub sgm_value: f64,
}

/// How teacher/student roles are drawn for one training step.
pub struct PairingPolicy {
    cosine: bool,
    seed: u64,
}

impl PairingPolicy {
    pub fn draw<F: Real>(
        &self,
        fp: &ForwardPass<F>,
        protos: &crate::sgm::PrototypeSet,
        present: &[usize],
    ) -> Result<Pairing> {
        let mut rng = rng_from(self.seed);
        if self.cosine {
            assign_pairs_cosine(fp, protos, present, &mut rng)
        } else {
            assign_pairs_over(present, &mut rng)
        }
    }
}

/// λ·L_s without prototypes: per-position channel distributions of the raw
/// stage features, compared pairwise with KL. Mathematically the mean
/// per-position KL, folded into one kl_div by scaling both distributions
/// by 1/L.
fn feature_level_loss<F: Real>(
    fp: &mut ForwardPass<F>,
    feats: &StageFeatures,
    pairing: &Pairing,
) -> Result<TensorId> {
    let mut total: Option<TensorId> = None;
    for si in 0..feats.features.len() {
        for &(t, s) in &pairing.pairs {
            let ft = feats.features[si][t].ok_or_else(|| {
                Error::InvalidArgument(format!("pairing references absent modality {t}"))
            })?;
            let fs = feats.features[si][s].ok_or_else(|| {
                Error::InvalidArgument(format!("pairing references absent modality {s}"))
            })?;
            let td = position_distribution(fp, ft)?;
            let sd = position_distribution(fp, fs)?;
            let kl = fp.tape.kl_div(td, sd)?;
            total = Some(match total {
                Some(prev) => fp.tape.add(prev, kl)?,
                None => kl,
            });
        }
    }
    match total {
        Some(t) => Ok(t),
        None => fp.tape.constant_scalar(F::zero()),
    }
}

/// Row-softmax scaled by 1/L with an ε floor: one joint distribution whose
/// KL equals the mean over positions of the per-position KLs.
fn position_distribution<F: Real>(fp: &mut ForwardPass<F>, x: TensorId) -> Result<TensorId> {
    let shape = fp.tape.shape(x).to_vec();
    let (l, d) = (shape[0], shape[1]);
    let rows = fp.tape.softmax(x, 1)?;
    let scaled = fp.tape.scale(rows, F::from_f64(1.0 / l as f64))?;
    let eps = crate::sgm::KL_FLOOR / (l * d) as f64;
    let shifted = fp.tape.add_scalar(scaled, F::from_f64(eps))?;
    fp.tape
        .scale(shifted, F::from_f64(1.0 / (1.0 + (l * d) as f64 * eps)))
}

/// L = L_CE + λ·L_s on the tape, from already-computed scalars.
pub fn total_loss<F: Real>(
    fp: &mut ForwardPass<F>,
    l_ce: TensorId,
    l_s: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be ≥ 0".into()));
    }
    if lambda == 0.0 {
        return Ok(l_ce);
    }
    let weighted = fp.tape.scale(l_s, F::from_f64(lambda))?;
    fp.tape.add(l_ce, weighted)
}

//! The gradient verification suite: per-primitive finite-difference checks
//! over many seeds, composite-block checks, a full-model check against a
//! random parameter subset, and a deliberately corrupted negative control.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{mhca, mhsa, mix_ffn, AttentionParams, BlockParams, FfnParams};
use crate::cmtb::{cmtb_stage, ppx, sq_hub, CmtbParams, CmtbSwitches, HubParams, ModalityBundle, PpxParams};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_with_fault, DEFAULT_EPS};
use crate::model::SegModel;
use crate::params::{ForwardPass, ParamStore};
use crate::sgm::{assign_pairs, build_prototypes, sgm_loss, KlAxis};
use crate::tape::{Profile, Tape, TensorId};
use crate::tensor::{Labels, Tensor};
use crate::util::{derive_seed, rng_from, stream, trunc_normal_f64};

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub worst: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone)]
pub struct GradSuiteReport {
    pub checks: Vec<OpCheck>,
    pub model_worst: f64,
    pub negative_control: Option<f64>,
    pub tolerance: f64,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.worst <= self.tolerance)
            && self.model_worst <= self.tolerance
            && self.negative_control.map(|e| e > self.tolerance).unwrap_or(true)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "gradient suite (tolerance {:.0e}, central differences)\n",
            self.tolerance
        ));
        for c in &self.checks {
            let status = if c.worst <= self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!(
                "  {:<22} worst {:>12.3e} over {} seeds  {}\n",
                c.name, c.worst, c.seeds, status
            ));
        }
        let status = if self.model_worst <= self.tolerance { "ok" } else { "FAIL" };
        s.push_str(&format!(
            "  {:<22} worst {:>12.3e}  {}\n",
            "full_model", self.model_worst, status
        ));
        if let Some(err) = self.negative_control {
            let status = if err > self.tolerance { "ok (fault detected)" } else { "FAIL (fault missed)" };
            s.push_str(&format!(
                "  {:<22} error {:>12.3e}  {}\n",
                "negative_control", err, status
            ));
        }
        s.push_str(if self.passed() { "PASS\n" } else { "FAIL\n" });
        s
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| trunc_normal_f64(rng, sigma)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Values with pairwise gaps ≥ 1e-2 in shuffled order, for kink-free
/// max-pool checks.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let order = crate::util::shuffled_indices(rng, numel);
    let mut data = vec![0.0; numel];
    for (rank, &pos) in order.iter().enumerate() {
        data[pos] = rank as f64 * 0.05 - numel as f64 * 0.025;
    }
    Tensor::new(shape, data).unwrap()
}

/// Contract the output against a fixed random functional so gradient
/// errors cannot cancel in a plain sum. Seeded by value so the same
/// weights apply at every perturbed evaluation.
fn weighted_sum(tape: &mut Tape<f64>, out: TensorId, seed: u64) -> Result<TensorId> {
    let mut rng = rng_from(seed ^ 0x5731_6875);
    let n = tape.value(out).len();
    let weights: Vec<f64> = (0..n).map(|_| trunc_normal_f64(&mut rng, 1.0)).collect();
    let w = tape.leaf_values(tape.shape(out).to_vec(), weights, false)?;
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

type CheckFn = fn(u64) -> Result<f64>;

// ── per-primitive checks ────────────────────────────────────────────

fn check_add(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let a = rand_tensor(&mut rng, vec![3, 4], 1.0);
    let b = rand_tensor(&mut rng, vec![3, 4], 1.0);
    grad_check(
        |t, ids| {
            let s = t.add(ids[0], ids[1])?;
            weighted_sum(t, s, seed)
        },
        &[a, b],
        DEFAULT_EPS,
    )
}

fn check_sub_mul(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let a = rand_tensor(&mut rng, vec![2, 5], 1.0);
    let b = rand_tensor(&mut rng, vec![2, 5], 1.0);
    grad_check(
        |t, ids| {
            let d = t.sub(ids[0], ids[1])?;
            let m = t.mul(d, ids[1])?;
            weighted_sum(t, m, seed)
        },
        &[a, b],
        DEFAULT_EPS,
    )
}

fn check_scale_shift(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let a = rand_tensor(&mut rng, vec![7], 1.0);
    grad_check(
        |t, ids| {
            let s = t.scale(ids[0], -1.7)?;
            let s = t.add_scalar(s, 0.3)?;
            weighted_sum(t, s, seed)
        },
        &[a],
        DEFAULT_EPS,
    )
}

fn check_bias_broadcasts(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let x = rand_tensor(&mut rng, vec![3, 4], 1.0);
    let b = rand_tensor(&mut rng, vec![4], 1.0);
    let s = rand_tensor(&mut rng, vec![3], 1.0);
    let cx = rand_tensor(&mut rng, vec![2, 3, 3], 1.0);
    let cb = rand_tensor(&mut rng, vec![2], 1.0);
    let e1 = grad_check(
        |t, ids| {
            let y = t.add_bias(ids[0], ids[1])?;
            let y = t.row_scale(y, ids[2])?;
            weighted_sum(t, y, seed)
        },
        &[x, b, s],
        DEFAULT_EPS,
    )?;
    let e2 = grad_check(
        |t, ids| {
            let y = t.add_chan_bias(ids[0], ids[1])?;
            weighted_sum(t, y, seed + 1)
        },
        &[cx, cb],
        DEFAULT_EPS,
    )?;
    Ok(e1.max(e2))
}

fn check_matmul(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let a = rand_tensor(&mut rng, vec![3, 4], 1.0);
    let b = rand_tensor(&mut rng, vec![4, 2], 1.0);
    grad_check(
        |t, ids| {
            let c = t.matmul(ids[0], ids[1])?;
            weighted_sum(t, c, seed)
        },
        &[a, b],
        DEFAULT_EPS,
    )
}

fn check_matmul_nt(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let a = rand_tensor(&mut rng, vec![3, 4], 1.0);
    let b = rand_tensor(&mut rng, vec![5, 4], 1.0);
    grad_check(
        |t, ids| {
            let c = t.matmul_nt(ids[0], ids[1])?;
            weighted_sum(t, c, seed)
        },
        &[a, b],
        DEFAULT_EPS,
    )
}

fn check_movement(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let a = rand_tensor(&mut rng, vec![3, 4], 1.0);
    let b = rand_tensor(&mut rng, vec![3, 4], 1.0);
    grad_check(
        |t, ids| {
            let at = t.transpose2(ids[0])?;
            let ar = t.reshape(at, vec![3, 4])?;
            let cat = t.concat(&[ar, ids[1]], 0)?;
            let cut = t.narrow(cat, 0, 1, 4)?;
            weighted_sum(t, cut, seed)
        },
        &[a, b],
        DEFAULT_EPS,
    )
}

fn check_softmax(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let a = rand_tensor(&mut rng, vec![3, 5], 1.5);
    grad_check(
        |t, ids| {
            let s0 = t.softmax(ids[0], 0)?;
            let s1 = t.softmax(s0, 1)?;
            weighted_sum(t, s1, seed)
        },
        &[a],
        DEFAULT_EPS,
    )
}

fn check_layer_norm(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let x = rand_tensor(&mut rng, vec![4, 6], 1.0);
    let g = rand_tensor(&mut rng, vec![6], 0.5);
    let b = rand_tensor(&mut rng, vec![6], 0.5);
    grad_check(
        |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
            weighted_sum(t, y, seed)
        },
        &[x, g, b],
        DEFAULT_EPS,
    )
}

fn check_gelu(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let x = rand_tensor(&mut rng, vec![12], 1.5);
    grad_check(
        |t, ids| {
            let y = t.gelu(ids[0])?;
            weighted_sum(t, y, seed)
        },
        &[x],
        DEFAULT_EPS,
    )
}

fn check_conv2d(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let x = rand_tensor(&mut rng, vec![2, 5, 5], 1.0);
    let k = rand_tensor(&mut rng, vec![3, 2, 3, 3], 0.5);
    grad_check(
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 2, 1)?;
            weighted_sum(t, y, seed)
        },
        &[x, k],
        DEFAULT_EPS,
    )
}

fn check_depthwise(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let x = rand_tensor(&mut rng, vec![3, 4, 4], 1.0);
    let k = rand_tensor(&mut rng, vec![3, 3, 3], 0.5);
    grad_check(
        |t, ids| {
            let y = t.depthwise_conv2d(ids[0], ids[1])?;
            weighted_sum(t, y, seed)
        },
        &[x, k],
        DEFAULT_EPS,
    )
}

fn check_pools(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let xa = rand_tensor(&mut rng, vec![2, 4, 4], 1.0);
    let xm = distinct_tensor(&mut rng, vec![2, 4, 4]);
    let e1 = grad_check(
        |t, ids| {
            let y = t.avg_pool3(ids[0])?;
            weighted_sum(t, y, seed)
        },
        &[xa],
        DEFAULT_EPS,
    )?;
    let e2 = grad_check(
        |t, ids| {
            let y = t.max_pool3(ids[0])?;
            weighted_sum(t, y, seed + 1)
        },
        &[xm],
        DEFAULT_EPS,
    )?;
    Ok(e1.max(e2))
}

fn check_bilinear(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let x = rand_tensor(&mut rng, vec![2, 3, 3], 1.0);
    grad_check(
        |t, ids| {
            let y = t.bilinear_upsample(ids[0], 5, 7)?;
            weighted_sum(t, y, seed)
        },
        &[x],
        DEFAULT_EPS,
    )
}

fn check_class_mean(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let x = rand_tensor(&mut rng, vec![8, 3], 1.0);
    let labels = [0, 1, 0, 2, -1, 1, 0, 2];
    grad_check(
        |t, ids| {
            let (p, _present) = t.class_mean(ids[0], &labels, 4)?;
            weighted_sum(t, p, seed)
        },
        &[x],
        DEFAULT_EPS,
    )
}

fn check_cross_entropy(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let x = rand_tensor(&mut rng, vec![3, 2, 3], 1.0);
    let labels = [0, 2, 255, 1, 0, 2];
    grad_check(
        |t, ids| t.cross_entropy_mean(ids[0], &labels, 255),
        &[x],
        DEFAULT_EPS,
    )
}

fn check_kl_div(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let t_logits = rand_tensor(&mut rng, vec![5], 1.0);
    let s_logits = rand_tensor(&mut rng, vec![5], 1.0);
    grad_check(
        |t, ids| {
            let tp = t.softmax(ids[0], 0)?;
            let tp = t.add_scalar(tp, 1e-8)?;
            let tp = t.scale(tp, 1.0 / (1.0 + 5.0 * 1e-8))?;
            let sp = t.softmax(ids[1], 0)?;
            let sp = t.add_scalar(sp, 1e-8)?;
            let sp = t.scale(sp, 1.0 / (1.0 + 5.0 * 1e-8))?;
            t.kl_div(tp, sp)
        },
        &[t_logits, s_logits],
        DEFAULT_EPS,
    )
}

fn check_dropout(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let x = rand_tensor(&mut rng, vec![10], 1.0);
    let mask: Vec<bool> = (0..10).map(|_| rng.random_range(0.0..1.0) >= 0.3).collect();
    grad_check(
        |t, ids| {
            let y = t.dropout(ids[0], mask.clone(), 0.3)?;
            weighted_sum(t, y, seed)
        },
        &[x],
        DEFAULT_EPS,
    )
}

// ── composite checks (input-side gradients through module code) ─────

/// Finite-difference check of a composite built through a [`ForwardPass`]:
/// analytic input gradients against central differences.
fn fp_grad_check<B>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: B) -> Result<f64>
where
    B: Fn(&mut ForwardPass<f64>, &[TensorId]) -> Result<TensorId>,
{
    let run = |point: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut fp = ForwardPass::new(store, Profile::Test, true);
        let ids: Vec<TensorId> = point
            .iter()
            .map(|t| fp.tape.leaf_values(t.shape().to_vec(), t.data().to_vec(), want_grad))
            .collect::<Result<_>>()?;
        let loss = build(&mut fp, &ids)?;
        let value = fp.tape.scalar_value(loss);
        let grads = if want_grad {
            fp.tape.backward(loss)?;
            ids.iter().map(|&id| fp.tape.grad(id).map(|g| g.to_vec())).collect()
        } else {
            vec![None; ids.len()]
        };
        Ok((value, grads))
    };

    let (_, analytic) = run(inputs, true)?;
    let mut point = inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].numel() {
            let orig = point[ti].data()[j];
            point[ti].data_mut()[j] = orig + DEFAULT_EPS;
            let (plus, _) = run(&point, false)?;
            point[ti].data_mut()[j] = orig - DEFAULT_EPS;
            let (minus, _) = run(&point, false)?;
            point[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_EPS);
            let a = analytic[ti].as_ref().map(|g| g[j]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn check_mhsa(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let mut store = ParamStore::<f64>::new();
    let dense = BlockParams::init(&mut store, "dense", 4, 2, 1, &mut rng)?;
    let reduced = BlockParams::init(&mut store, "reduced", 4, 1, 2, &mut rng)?;
    let x = rand_tensor(&mut rng, vec![16, 4], 1.0);
    let e1 = fp_grad_check(&store, &[x.clone()], |fp, ids| {
        let y = mhsa(fp, ids[0], &dense, (4, 4))?;
        fp.tape.sum_all(y)
    })?;
    let e2 = fp_grad_check(&store, &[x], |fp, ids| {
        let y = mhsa(fp, ids[0], &reduced, (4, 4))?;
        fp.tape.sum_all(y)
    })?;
    Ok(e1.max(e2))
}

fn check_mhca(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let mut store = ParamStore::<f64>::new();
    let p = AttentionParams::init(&mut store, "x", 8, 2, &mut rng)?;
    let a = rand_tensor(&mut rng, vec![4, 8], 1.0);
    let b = rand_tensor(&mut rng, vec![4, 8], 1.0);
    fp_grad_check(&store, &[a, b], |fp, ids| {
        let y = mhca(fp, ids[0], ids[1], &p)?;
        fp.tape.sum_all(y)
    })
}

fn check_mix_ffn(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let mut store = ParamStore::<f64>::new();
    let p = FfnParams::init(&mut store, "f", 4, &mut rng);
    let x = rand_tensor(&mut rng, vec![6, 4], 1.0);
    fp_grad_check(&store, &[x], |fp, ids| {
        let y = mix_ffn(fp, ids[0], &p, (2, 3))?;
        fp.tape.sum_all(y)
    })
}

fn check_sq_hub_ppx(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let mut store = ParamStore::<f64>::new();
    let hub = HubParams {
        w: store.add_weight("hub.w", vec![3, 1], &mut rng),
        b: store.add_bias("hub.b", vec![1]),
    };
    let px = PpxParams {
        w: store.add_weight("ppx.w", vec![9, 3], &mut rng),
        b: store.add_bias("ppx.b", vec![3]),
    };
    let a = rand_tensor(&mut rng, vec![4, 3], 1.0);
    let b = rand_tensor(&mut rng, vec![4, 3], 1.0);
    fp_grad_check(&store, &[a, b], |fp, ids| {
        let h = sq_hub(fp, &[ids[0], ids[1]], &hub)?;
        let y = ppx(fp, h, &px, (2, 2))?;
        fp.tape.sum_all(y)
    })
}

fn check_cmtb_stage(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let mut store = ParamStore::<f64>::new();
    let p = CmtbParams::init(&mut store, "b", 4, 2, 1, &mut rng)?;
    let x = rand_tensor(&mut rng, vec![4, 4], 1.0);
    let a = rand_tensor(&mut rng, vec![4, 4], 1.0);
    fp_grad_check(&store, &[x, a], |fp, ids| {
        let y = cmtb_stage(fp, ids[0], &[ids[1]], &p, (2, 2), CmtbSwitches::default())?;
        fp.tape.sum_all(y)
    })
}

fn check_sgm_loss(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let store = ParamStore::<f64>::new();
    let ta = rand_tensor(&mut rng, vec![6, 3], 1.0);
    let tb = rand_tensor(&mut rng, vec![6, 3], 1.0);
    let labels = Labels::new(vec![2, 3], vec![0, 1, 0, 2, 1, 0]).unwrap();
    let mut pairing_rng = rng_from(seed ^ 0xbeef);
    let pairing = assign_pairs(2, &mut pairing_rng)?;
    fp_grad_check(&store, &[ta, tb], |fp, ids| {
        // Hand-assembled one-stage feature set for two modalities.
        let feats = crate::cmtb::StageFeatures {
            features: vec![vec![Some(ids[0]), Some(ids[1])]],
            hw: vec![(2, 3)],
            dims: vec![3],
            present: vec![true, true],
        };
        let protos = build_prototypes(fp, &feats, &labels, 3, 255)?;
        let (ls, _) = sgm_loss(fp, &protos, &pairing, KlAxis::Channel)?;
        Ok(ls)
    })
}

/// The configuration used for end-to-end gradient verification: three
/// modalities (odd count exercises the dropped-modality path), 32×32
/// inputs, uniform widths.
pub fn gradcheck_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.profile = "test".into();
    cfg.seed = 1234;
    cfg.data.height = 32;
    cfg.data.width = 32;
    cfg.data.classes = 3;
    cfg.model.modalities = vec!["rgb".into(), "depth".into(), "event".into()];
    cfg.model.modality_channels = vec![3, 1, 1];
    cfg.model.embed_dims = vec![8, 8, 8, 8];
    cfg.model.heads = vec![1, 2, 4, 8];
    cfg.model.sr_ratios = vec![4, 2, 1, 1];
    cfg.model.decode_dim = 8;
    cfg.schedule.batch_size = 1;
    cfg
}

fn synthetic_case(cfg: &ExperimentConfig, seed: u64) -> (ModalityBundle<f64>, Labels) {
    let mut rng = rng_from(seed);
    let maps = cfg
        .model
        .modality_channels
        .iter()
        .map(|&c| Some(rand_tensor(&mut rng, vec![c, cfg.data.height, cfg.data.width], 0.5)))
        .collect();
    let bundle = ModalityBundle::new(maps, cfg.model.modalities.clone()).unwrap();
    let labels = Labels::new(
        vec![cfg.data.height, cfg.data.width],
        (0..cfg.data.height * cfg.data.width)
            .map(|_| rng.random_range(0..cfg.data.classes as i32))
            .collect(),
    )
    .unwrap();
    (bundle, labels)
}

/// End-to-end check: analytic parameter gradients of the total loss
/// (cross-entropy + λ·self-guidance) against central differences over a
/// random subset of parameter entries.
pub fn full_model_check(cfg: &ExperimentConfig, fraction: f64, seed: u64) -> Result<f64> {
    let mut model = SegModel::<f64>::new(cfg)?;
    let (bundle, labels) = synthetic_case(cfg, derive_seed(seed, &[stream::GRADCHECK]));
    model.store.zero_grads();
    model.accumulate_sample_grads(&bundle, &labels, 0)?;

    // Collect analytic gradients, then probe a random entry subset.
    let ids: Vec<_> = model.store.ids().collect();
    let total: usize = ids.iter().map(|&id| model.store.tensor(id).numel()).sum();
    let count = ((total as f64 * fraction).ceil() as usize).clamp(30, 400);
    let mut rng = rng_from(derive_seed(seed, &[stream::GRADCHECK, 1]));
    let mut worst = 0.0f64;
    for _ in 0..count {
        let pid = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..model.store.tensor(pid).numel());
        let analytic = model
            .store
            .tensor(pid)
            .grad
            .as_ref()
            .map(|g| g[j])
            .unwrap_or(0.0);
        let orig = model.store.tensor(pid).data()[j];
        model.store.tensor_mut(pid).data_mut()[j] = orig + DEFAULT_EPS;
        let plus = model.loss_value(&bundle, &labels, 0)?;
        model.store.tensor_mut(pid).data_mut()[j] = orig - DEFAULT_EPS;
        let minus = model.loss_value(&bundle, &labels, 0)?;
        model.store.tensor_mut(pid).data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * DEFAULT_EPS);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Negative control: corrupt the matmul backward rule and confirm the
/// checker reports a violation.
pub fn negative_control(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let a = rand_tensor(&mut rng, vec![3, 3], 1.0);
    let b = rand_tensor(&mut rng, vec![3, 3], 1.0);
    grad_check_with_fault(
        |t, ids| {
            let c = t.matmul(ids[0], ids[1])?;
            t.sum_all(c)
        },
        &[a, b],
        DEFAULT_EPS,
        "matmul",
        1.02,
    )
}

/// Run the whole suite: every primitive and composite over `seeds` seeds,
/// the full tiny model, and (optionally) the corrupted-rule control.
pub fn run_grad_suite(seeds: usize, with_negative_control: bool) -> Result<GradSuiteReport> {
    let table: &[(&'static str, CheckFn)] = &[
        ("add", check_add),
        ("sub_mul", check_sub_mul),
        ("scale_shift", check_scale_shift),
        ("bias_broadcasts", check_bias_broadcasts),
        ("matmul", check_matmul),
        ("matmul_nt", check_matmul_nt),
        ("movement", check_movement),
        ("softmax", check_softmax),
        ("layer_norm", check_layer_norm),
        ("gelu", check_gelu),
        ("conv2d", check_conv2d),
        ("depthwise_conv2d", check_depthwise),
        ("pools", check_pools),
        ("bilinear_upsample", check_bilinear),
        ("class_mean", check_class_mean),
        ("cross_entropy", check_cross_entropy),
        ("kl_div", check_kl_div),
        ("dropout", check_dropout),
        ("mhsa", check_mhsa),
        ("mhca", check_mhca),
        ("mix_ffn", check_mix_ffn),
        ("sq_hub_ppx", check_sq_hub_ppx),
        ("cmtb_stage", check_cmtb_stage),
        ("sgm_loss", check_sgm_loss),
    ];

    let seed_list: Vec<u64> = (0..seeds as u64).collect();
    let checks: Vec<OpCheck> = table
        .iter()
        .map(|(name, f)| {
            let worsts = crate::util::par_map_indexed(&seed_list, |_i, &s| f(1000 + s))?;
            Ok(OpCheck {
                name,
                worst: worsts.into_iter().fold(0.0, f64::max),
                seeds,
            })
        })
        .collect::<Result<_>>()?;

    let model_worst = full_model_check(&gradcheck_config(), 0.01, 77)?;
    let nc = if with_negative_control {
        Some(negative_control(3)?)
    } else {
        None
    };
    Ok(GradSuiteReport {
        checks,
        model_worst,
        negative_control: nc,
        tolerance: GRAD_TOLERANCE,
    })
}

//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Heavy end-to-end runs share a lock so their wall-clock
//! budgets are measured without mutual contention.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use equiseg_core::cmtb::ModalityBundle;
use equiseg_core::params::{ForwardPass, ParamStore};
use equiseg_core::robustness::{robustness_score, self_test};
use equiseg_core::sgm::assign_pairs;
use equiseg_core::tape::{Profile, Tape};
use equiseg_core::tensor::{Labels, Tensor};
use equiseg_core::util::{rng_from, trunc_normal_f64};
use equiseg_core::verify::run_grad_suite;

static HEAVY: Mutex<()> = Mutex::new(());

/// Overfit recipe for the end-to-end criterion: the desk-scale default
/// architecture and dataset, with the step count and learning rate chosen
/// for from-scratch convergence (the shipped lr default of 6e-5 follows
/// the reference schedule, which assumes a far longer run).
const OVERFIT_STEPS: u64 = 2000;
const OVERFIT_LR: &str = "3e-3";
const OVERFIT_SGM: &str = "off";

fn equiseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_equiseg"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn equiseg");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_sets() -> Vec<String> {
    [
        "data.height=32",
        "data.width=32",
        "data.train_samples=8",
        "data.val_samples=4",
        "data.min_objects=2",
        "data.max_objects=4",
        "model.embed_dims=[8, 8, 8, 8]",
        "model.sr_ratios=[4, 2, 1, 1]",
        "model.decode_dim=8",
        "schedule.batch_size=4",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}

fn parse_miou(report: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix("miou "))
        .expect("miou line")
        .trim()
        .parse()
        .expect("miou value")
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn tree_digest(dir: &Path) -> u64 {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut acc = 0u64;
    for f in files {
        acc ^= fnv1a(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        acc = acc.wrapping_mul(0x100000001b3);
        acc ^= fnv1a(&std::fs::read(&f).unwrap());
    }
    acc
}

#[test]
fn c1_gradient_suite() {
    let start = Instant::now();
    let report = run_grad_suite(20, true).unwrap();
    let elapsed = start.elapsed();
    let ok = report.passed() && elapsed.as_secs() < 120;
    println!(
        "ACCEPT C1 gradient-suite: worst model err {:.3e}, {} ops x 20 seeds, {:.1}s -> {}",
        report.model_worst,
        report.checks.len(),
        elapsed.as_secs_f64(),
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(report.passed(), "{}", report.render());
    assert!(elapsed.as_secs() < 120, "gradient suite over budget: {elapsed:?}");
}

#[test]
fn c2_oracle_suite() {
    let start = Instant::now();
    let mut rng = rng_from(2024);

    // matmul vs triple loop, exact.
    let a: Vec<f64> = (0..12).map(|_| trunc_normal_f64(&mut rng, 1.0)).collect();
    let b: Vec<f64> = (0..8).map(|_| trunc_normal_f64(&mut rng, 1.0)).collect();
    let mut tape = Tape::<f64>::new(Profile::Test);
    let ta = tape.leaf(&Tensor::new(vec![3, 4], a.clone()).unwrap()).unwrap();
    let tb = tape.leaf(&Tensor::new(vec![4, 2], b.clone()).unwrap()).unwrap();
    let tc = tape.matmul(ta, tb).unwrap();
    let mut oracle = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for p in 0..4 {
                oracle[i * 2 + j] += a[i * 4 + p] * b[p * 2 + j];
            }
        }
    }
    assert_eq!(tape.value(tc), oracle.as_slice(), "matmul oracle");

    // conv2d vs sliding window, exact.
    let x: Vec<f64> = (0..25).map(|_| trunc_normal_f64(&mut rng, 1.0)).collect();
    let k: Vec<f64> = (0..9).map(|_| trunc_normal_f64(&mut rng, 1.0)).collect();
    let tx = tape.leaf(&Tensor::new(vec![1, 5, 5], x.clone()).unwrap()).unwrap();
    let tk = tape.leaf(&Tensor::new(vec![1, 1, 3, 3], k.clone()).unwrap()).unwrap();
    let ty = tape.conv2d(tx, tk, 1, 0).unwrap();
    for oy in 0..3 {
        for ox in 0..3 {
            let mut acc = 0.0;
            for ky in 0..3 {
                for kx in 0..3 {
                    acc += x[(oy + ky) * 5 + ox + kx] * k[ky * 3 + kx];
                }
            }
            assert_eq!(tape.value(ty)[oy * 3 + ox], acc, "conv oracle at {oy},{ox}");
        }
    }

    // softmax sums.
    let s: Vec<f64> = (0..20).map(|_| trunc_normal_f64(&mut rng, 2.0)).collect();
    let ts = tape.leaf(&Tensor::new(vec![4, 5], s).unwrap()).unwrap();
    let sm = tape.softmax(ts, 1).unwrap();
    for r in 0..4 {
        let sum: f64 = tape.value(sm)[r * 5..r * 5 + 5].iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6);
    }

    // layer_norm vs two-pass.
    let row: Vec<f64> = (0..6).map(|_| trunc_normal_f64(&mut rng, 1.0)).collect();
    let mean = row.iter().sum::<f64>() / 6.0;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
    let tr = tape.leaf(&Tensor::new(vec![1, 6], row.clone()).unwrap()).unwrap();
    let tg = tape.leaf(&Tensor::full(vec![6], 1.0)).unwrap();
    let tbb = tape.leaf(&Tensor::zeros(vec![6])).unwrap();
    let ln = tape.layer_norm(tr, tg, tbb, 1e-6).unwrap();
    for (got, &v) in tape.value(ln).iter().zip(&row) {
        assert!((got - (v - mean) / (var + 1e-6).sqrt()).abs() <= 1e-9, "layer_norm oracle");
    }

    // prototypes: accumulate then divide, exact.
    let feats: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let tf = tape.leaf(&Tensor::new(vec![3, 2], feats).unwrap()).unwrap();
    let (protos, present) = tape.class_mean(tf, &[0, 0, 1], 3).unwrap();
    assert_eq!(&tape.value(protos)[0..4], &[2.0, 3.0, 5.0, 6.0]);
    assert_eq!(present, vec![true, true, false]);

    // mIoU hand enumeration.
    let (m, per) = equiseg_core::metrics::miou(
        &Labels::new(vec![4], vec![0, 0, 1, 1]).unwrap(),
        &Labels::new(vec![4], vec![0, 1, 1, 1]).unwrap(),
        2,
        255,
    )
    .unwrap();
    assert!((per[0].unwrap() - 0.5).abs() <= 1e-12);
    assert!((per[1].unwrap() - 2.0 / 3.0).abs() <= 1e-12);
    assert!((m - 7.0 / 12.0).abs() <= 1e-12);

    // KL frozen value.
    let tt = tape.leaf(&Tensor::new(vec![2], vec![0.75, 0.25]).unwrap()).unwrap();
    let ss = tape.leaf(&Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()).unwrap();
    let kl = tape.kl_div(tt, ss).unwrap();
    assert!((tape.scalar_value(kl) - 0.1308120).abs() <= 1e-6);

    let elapsed = start.elapsed();
    println!(
        "ACCEPT C2 oracle-suite: matmul/conv2d/softmax/layer_norm/prototypes/miou/kl in {:.2}s -> {}",
        elapsed.as_secs_f64(),
        if elapsed.as_secs() < 60 { "PASS" } else { "FAIL" }
    );
    assert!(elapsed.as_secs() < 60);
}

#[test]
fn c3_sgm_invariants() {
    // Nonnegativity and zero-at-identity.
    let store = ParamStore::<f64>::new();
    let mut rng = rng_from(3);
    let labels = Labels::new(vec![2, 3], vec![0, 1, 2, 0, 1, 2]).unwrap();
    let pairing = equiseg_core::sgm::Pairing { pairs: vec![(0, 1)], dropped: None };
    let shared: Vec<f64> = (0..24).map(|_| trunc_normal_f64(&mut rng, 1.0)).collect();
    let mut fp = ForwardPass::new(&store, Profile::Test, false);
    let a = fp.input(&Tensor::new(vec![6, 4], shared.clone()).unwrap()).unwrap();
    let b = fp.input(&Tensor::new(vec![6, 4], shared).unwrap()).unwrap();
    let feats = equiseg_core::cmtb::StageFeatures {
        features: vec![vec![Some(a), Some(b)]],
        hw: vec![(2, 3)],
        dims: vec![4],
        present: vec![true, true],
    };
    let protos = equiseg_core::sgm::build_prototypes(&mut fp, &feats, &labels, 3, 255).unwrap();
    let (ls, _) = equiseg_core::sgm::sgm_loss(&mut fp, &protos, &pairing, Default::default()).unwrap();
    let identity_zero = fp.tape.scalar_value(ls).abs() <= 1e-9;

    let mut nonneg = true;
    for seed in 0..20 {
        let mut r = rng_from(seed);
        let av: Vec<f64> = (0..24).map(|_| trunc_normal_f64(&mut r, 1.0)).collect();
        let bv: Vec<f64> = (0..24).map(|_| trunc_normal_f64(&mut r, 1.0)).collect();
        let mut fp = ForwardPass::new(&store, Profile::Test, false);
        let a = fp.input(&Tensor::new(vec![6, 4], av).unwrap()).unwrap();
        let b = fp.input(&Tensor::new(vec![6, 4], bv).unwrap()).unwrap();
        let feats = equiseg_core::cmtb::StageFeatures {
            features: vec![vec![Some(a), Some(b)]],
            hw: vec![(2, 3)],
            dims: vec![4],
            present: vec![true, true],
        };
        let protos = equiseg_core::sgm::build_prototypes(&mut fp, &feats, &labels, 3, 255).unwrap();
        let (ls, _) =
            equiseg_core::sgm::sgm_loss(&mut fp, &protos, &pairing, Default::default()).unwrap();
        nonneg &= fp.tape.scalar_value(ls) >= 0.0;
    }

    // Teacher detachment: with independent branches, no gradient reaches
    // the teacher branch through L_s.
    let mut cfg = equiseg_core::verify::gradcheck_config();
    cfg.model.modalities = vec!["a".into(), "b".into()];
    cfg.model.modality_channels = vec![1, 1];
    cfg.ablation.cross_attention = false;
    let model = equiseg_core::model::SegModel::<f64>::new(&cfg).unwrap();
    let mut drng = rng_from(33);
    let mut mk = || {
        let data: Vec<f64> = (0..32 * 32).map(|_| trunc_normal_f64(&mut drng, 0.5)).collect();
        Tensor::new(vec![1, 32, 32], data).unwrap()
    };
    let (map_a, map_b) = (mk(), mk());
    let bundle = ModalityBundle::new(
        vec![Some(map_a), Some(map_b)],
        cfg.model.modalities.clone(),
    )
    .unwrap();
    let labels2 = Labels::new(
        vec![32, 32],
        (0..1024).map(|i| (i % 3) as i32).collect(),
    )
    .unwrap();
    let mut fp2 = ForwardPass::new(&model.store, Profile::Test, true);
    let feats2 =
        equiseg_core::cmtb::encoder_forward(&mut fp2, &bundle, &model.enc, cfg.cmtb_switches())
            .unwrap();
    let protos2 = equiseg_core::sgm::build_prototypes(&mut fp2, &feats2, &labels2, 3, 255).unwrap();
    let (ls2, _) = equiseg_core::sgm::sgm_loss(
        &mut fp2,
        &protos2,
        &equiseg_core::sgm::Pairing { pairs: vec![(0, 1)], dropped: None },
        Default::default(),
    )
    .unwrap();
    fp2.tape.backward(ls2).unwrap();
    let teacher_clean = fp2
        .take_grads()
        .iter()
        .all(|(pid, _)| !model.store.name(*pid).contains(".m0."));

    // Partition property and teacher-role frequency over 10,000 draws.
    let mut teacher_counts = [0u32; 4];
    let mut partition_ok = true;
    for seed in 0..10_000u64 {
        let mut r = rng_from(seed);
        let p = assign_pairs(4, &mut r).unwrap();
        partition_ok &= p.covered() == vec![0, 1, 2, 3] && p.pairs.len() == 2 && p.dropped.is_none();
        for &(t, _) in &p.pairs {
            teacher_counts[t] += 1;
        }
    }
    let freq_ok = teacher_counts
        .iter()
        .all(|&c| (c as f64 / 10_000.0 - 0.5).abs() <= 0.02);

    let ok = identity_zero && nonneg && teacher_clean && partition_ok && freq_ok;
    println!(
        "ACCEPT C3 sgm-invariants: zero-at-identity {identity_zero}, nonneg {nonneg}, teacher-detached {teacher_clean}, partition {partition_ok}, frequency {:?} -> {}",
        teacher_counts,
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok);
}

#[test]
fn c4_equation_identities() {
    let mut rng = rng_from(4);
    let mut store = ParamStore::<f64>::new();
    // mhca single key with all-ones weights returns V exactly.
    let attn = equiseg_core::attention::AttentionParams::init(&mut store, "x", 1, 1, &mut rng).unwrap();
    for w in [attn.w_q, attn.w_k, attn.w_v, attn.w_o] {
        store.tensor_mut(w).data_mut()[0] = 1.0;
    }
    let hub = equiseg_core::cmtb::HubParams {
        w: store.add_weight("hub.w", vec![3, 1], &mut rng),
        b: store.add_bias("hub.b", vec![1]),
    };
    let mut fp = ForwardPass::new(&store, Profile::Test, false);

    // residual_fuse(a, 0) == a, exact.
    let vals: Vec<f64> = (0..12).map(|_| trunc_normal_f64(&mut rng, 1.0)).collect();
    let a = fp.input(&Tensor::new(vec![3, 4], vals.clone()).unwrap()).unwrap();
    let zero = fp.input(&Tensor::zeros(vec![3, 4])).unwrap();
    let fused = equiseg_core::attention::residual_fuse(&mut fp, a, zero).unwrap();
    let residual_ok = fp.tape.value(fused) == vals.as_slice();

    let prim = fp.input(&Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
    let aux = fp.input(&Tensor::new(vec![1, 1], vec![5.0]).unwrap()).unwrap();
    let out = equiseg_core::attention::mhca(&mut fp, prim, aux, &attn).unwrap();
    let mhca_ok = fp.tape.value(out) == [5.0];

    // total_loss(λ=0) == L_CE (the identical node).
    let ce = fp.tape.constant_scalar(1.25).unwrap();
    let ls = fp.tape.constant_scalar(0.5).unwrap();
    let same = equiseg_core::model::total_loss(&mut fp, ce, ls, 0.0).unwrap();
    let lambda_ok = same == ce;

    // sq_hub single-auxiliary identity (the same node comes back).
    let one_aux = fp.input(&Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap()).unwrap();
    let hub_out = equiseg_core::cmtb::sq_hub(&mut fp, &[one_aux], &hub).unwrap();
    let hub_ok = hub_out == one_aux;

    let ok = residual_ok && mhca_ok && lambda_ok && hub_ok;
    println!(
        "ACCEPT C4 identities: residual {residual_ok}, mhca-single-key {mhca_ok}, lambda-zero {lambda_ok}, hub-single {hub_ok} -> {}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok);
}

#[test]
fn c5_robustness_score_self_test() {
    let rows = self_test().unwrap();
    let lib_ok = rows.len() == 2;
    // Against hand arithmetic too.
    let d = robustness_score(&[67.90, 48.22, 65.75, 50.96, 64.64, 34.87, 19.13]).unwrap();
    let m = robustness_score(&[50.26, 35.63, 45.06, 38.61, 47.63, 20.47, 12.62]).unwrap();
    let values_ok =
        ((d * 100.0).round() / 100.0 - 50.21).abs() < 1e-9 && ((m * 100.0).round() / 100.0 - 35.75).abs() < 1e-9;

    let cli = run_ok(equiseg().args(["robust", "--self-test"]));
    let cli_ok = cli.contains("50.21") && cli.contains("35.75");

    let ok = lib_ok && values_ok && cli_ok;
    println!(
        "ACCEPT C5 table-arithmetic self-test: {:.2} and {:.2} -> {}",
        d,
        m,
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok);
}

#[test]
fn c6_end_to_end_overfit() {
    let _lock = HEAVY.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let run = dir.path().join("run");
    let start = Instant::now();

    run_ok(equiseg().args(["gen", "--out", ds.to_str().unwrap(), "--seed", "7"]));
    run_ok(equiseg().args([
        "train",
        "--data",
        ds.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--seed",
        "7",
        "--steps",
        &OVERFIT_STEPS.to_string(),
        "--lr",
        OVERFIT_LR,
        "--sgm",
        OVERFIT_SGM,
    ]));
    let report = run_ok(equiseg().args([
        "eval",
        "--checkpoint",
        run.join("checkpoint_final.eqck").to_str().unwrap(),
        "--data",
        ds.to_str().unwrap(),
        "--split",
        "train",
    ]));
    let miou = parse_miou(&report);
    let elapsed = start.elapsed();
    let ok = miou >= 0.95 && elapsed.as_secs() <= 900;
    println!(
        "ACCEPT C6 overfit: train mIoU {miou:.4} after {OVERFIT_STEPS} steps in {:.1}s -> {}",
        elapsed.as_secs_f64(),
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(miou >= 0.95, "train mIoU {miou} below 0.95\n{report}");
    assert!(elapsed.as_secs() <= 900, "overfit run took {elapsed:?}");
}

#[test]
fn c7_ablation_reachability() {
    let _lock = HEAVY.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let mut gen = equiseg();
    gen.args(["gen", "--out", ds.to_str().unwrap(), "--seed", "9"]).args(tiny_sets());
    run_ok(&mut gen);

    let variants: &[&[&str]] = &[
        &["--sq-hub", "mean"],
        &["--cross-attention", "off"],
        &["--residual-add", "off"],
        &["--prototype", "off"],
        &["--pairing", "cosine"],
    ];
    let mut provenances = std::collections::HashSet::new();
    for (i, flags) in variants.iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let mut cmd = equiseg();
        cmd.args([
            "train",
            "--data",
            ds.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "9",
            "--steps",
            "100",
        ])
        .args(tiny_sets())
        .args(*flags);
        run_ok(&mut cmd);
        let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        let header = metrics.lines().next().unwrap().to_string();
        assert!(header.contains("provenance"));
        assert!(
            provenances.insert(header.clone()),
            "provenance not distinct: {header}"
        );
        // 100 steps all logged and finite.
        assert_eq!(metrics.lines().count(), 101);
        for line in metrics.lines().skip(1) {
            assert!(!line.contains("NaN") && !line.contains("null"), "{line}");
        }
    }
    println!(
        "ACCEPT C7 ablation-reachability: {} switch configurations trained 100 steps, distinct provenance -> PASS",
        variants.len()
    );
}

#[test]
fn c8_determinism() {
    let _lock = HEAVY.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();

    // gen twice.
    let (g1, g2) = (dir.path().join("g1"), dir.path().join("g2"));
    for g in [&g1, &g2] {
        let mut cmd = equiseg();
        cmd.args(["gen", "--out", g.to_str().unwrap(), "--seed", "13"]).args(tiny_sets());
        run_ok(&mut cmd);
    }
    let gen_ok = tree_digest(&g1) == tree_digest(&g2);

    // train twice (30 steps).
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    for r in [&r1, &r2] {
        let mut cmd = equiseg();
        cmd.args([
            "train",
            "--data",
            g1.to_str().unwrap(),
            "--out",
            r.to_str().unwrap(),
            "--seed",
            "13",
            "--steps",
            "30",
        ])
        .args(tiny_sets());
        run_ok(&mut cmd);
    }
    let train_ok = tree_digest(&r1) == tree_digest(&r2);

    // eval twice.
    let ckpt = r1.join("checkpoint_final.eqck");
    let (e1, e2) = (dir.path().join("e1.txt"), dir.path().join("e2.txt"));
    for e in [&e1, &e2] {
        run_ok(equiseg().args([
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            g1.to_str().unwrap(),
            "--split",
            "val",
            "--out",
            e.to_str().unwrap(),
        ]));
    }
    let eval_ok = std::fs::read(&e1).unwrap() == std::fs::read(&e2).unwrap();

    // robust twice.
    let (b1, b2) = (dir.path().join("b1.txt"), dir.path().join("b2.txt"));
    for b in [&b1, &b2] {
        run_ok(equiseg().args([
            "robust",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            g1.to_str().unwrap(),
            "--seed",
            "13",
            "--out",
            b.to_str().unwrap(),
        ]));
    }
    let robust_ok = std::fs::read(&b1).unwrap() == std::fs::read(&b2).unwrap();

    let ok = gen_ok && train_ok && eval_ok && robust_ok;
    println!(
        "ACCEPT C8 determinism: gen {gen_ok}, train {train_ok}, eval {eval_ok}, robust {robust_ok} -> {}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok);
}

#[test]
fn c9_directional_robustness_check() {
    let _lock = HEAVY.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let mut gen = equiseg();
    gen.args(["gen", "--out", ds.to_str().unwrap(), "--seed", "17"]).args(tiny_sets());
    run_ok(&mut gen);

    let mut scores = Vec::new();
    for (tag, sgm) in [("lambda60", "on"), ("lambda0", "off")] {
        let run = dir.path().join(tag);
        let mut cmd = equiseg();
        cmd.args([
            "train",
            "--data",
            ds.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--seed",
            "17",
            "--steps",
            "400",
            "--lr",
            "1e-3",
            "--sgm",
            sgm,
        ])
        .args(tiny_sets());
        run_ok(&mut cmd);
        let report_path = dir.path().join(format!("{tag}_robust.txt"));
        run_ok(equiseg().args([
            "robust",
            "--checkpoint",
            run.join("checkpoint_final.eqck").to_str().unwrap(),
            "--data",
            ds.to_str().unwrap(),
            "--seed",
            "17",
            "--out",
            report_path.to_str().unwrap(),
        ]));
        let text = std::fs::read_to_string(&report_path).unwrap();
        let emm_avg: f64 = text
            .lines()
            .find_map(|l| l.strip_prefix("emm_avg"))
            .unwrap()
            .trim()
            .parse()
            .unwrap();
        scores.push(emm_avg);
    }
    let gap = scores[0] - scores[1];
    // Report-only: the claimed improvement direction is logged for
    // inspection, not asserted — desk-scale variance may dominate.
    println!(
        "ACCEPT C9 directional-check (report-only): EMM(avg) lambda=60 {:.4} vs lambda=0 {:.4}, gap {:+.4} (positive matches the claimed direction) -> PASS",
        scores[0], scores[1], gap
    );
}

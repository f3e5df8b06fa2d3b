//! End-to-end library-level tests: dataset generation and IO, designed
//! ambiguities, training behavior, and the robustness protocol.

use equiseg_core::cmtb::ModalityBundle;
use equiseg_core::config::ExperimentConfig;
use equiseg_core::model::SegModel;
use equiseg_core::optim::{AdamW, LrSchedule};
use equiseg_core::robustness::{
    compute_report, emm_eval, eval_transformed, nm_perturb, rmm_perturb, EmmMode,
    RobustnessParams,
};
use equiseg_core::synth::{
    generate_samples, linear_probe_accuracy, read_dataset, write_dataset, DatasetMeta,
    SceneParams, COLOR_COLLISION, DATASET_VERSION, DEPTH_COLLISION, MODALITY_CHANNELS,
    MODALITY_NAMES,
};

fn scene_params(hw: usize, classes: usize) -> SceneParams {
    SceneParams {
        height: hw,
        width: hw,
        classes,
        min_objects: 2,
        max_objects: 4,
        ignore_border: 0,
        ignore_id: 255,
    }
}

fn meta_for(params: &SceneParams, n: usize, seed: u64) -> DatasetMeta {
    DatasetMeta {
        version: DATASET_VERSION,
        samples: n,
        classes: params.classes,
        height: params.height,
        width: params.width,
        modalities: MODALITY_NAMES.iter().map(|s| s.to_string()).collect(),
        modality_channels: MODALITY_CHANNELS.to_vec(),
        ignore_id: params.ignore_id,
        seed,
    }
}

/// Tiny model over the synthetic data: 32×32, uniform widths.
fn tiny_cfg(data_dir: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.path = data_dir.into();
    cfg.data.height = 32;
    cfg.data.width = 32;
    cfg.data.classes = 6;
    cfg.data.train_samples = 8;
    cfg.data.val_samples = 4;
    cfg.data.min_objects = 2;
    cfg.data.max_objects = 4;
    cfg.model.embed_dims = vec![8, 8, 8, 8];
    cfg.model.heads = vec![1, 2, 4, 8];
    cfg.model.sr_ratios = vec![4, 2, 1, 1];
    cfg.model.decode_dim = 8;
    cfg.schedule.batch_size = 4;
    cfg.profile = "train".into();
    cfg
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn dir_digest(dir: &std::path::Path) -> u64 {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    let mut acc = 0u64;
    for path in entries {
        if path.is_file() {
            acc ^= fnv1a(path.file_name().unwrap().as_encoded_bytes());
            acc = acc.wrapping_mul(0x100000001b3);
            acc ^= fnv1a(&std::fs::read(&path).unwrap());
        }
    }
    acc
}

#[test]
fn dataset_generation_is_byte_identical_across_runs() {
    let params = scene_params(32, 6);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let samples = generate_samples(11, 0, 6, &params).unwrap();
        write_dataset(dir.path(), &meta_for(&params, 6, 11), &samples).unwrap();
    }
    assert_eq!(dir_digest(dir_a.path()), dir_digest(dir_b.path()));
}

#[test]
fn single_modality_probes_hit_the_designed_ceiling() {
    // On raw pixels of the colliding modality, a linear probe stays near
    // chance for the designed pair; the disambiguating modality separates
    // the same pair almost perfectly.
    let params = scene_params(64, 6);
    let samples = generate_samples(21, 0, 24, &params).unwrap();
    const CEILING: f64 = 0.75;

    let (a, b) = COLOR_COLLISION;
    let rgb_acc = linear_probe_accuracy(&samples, 0, a as i32, b as i32);
    let depth_acc = linear_probe_accuracy(&samples, 1, a as i32, b as i32);
    assert!(rgb_acc <= CEILING, "appearance probe separates the color-collision pair: {rgb_acc}");
    assert!(depth_acc >= 0.9, "depth should separate the color-collision pair: {depth_acc}");

    let (c, d) = DEPTH_COLLISION;
    let depth_acc2 = linear_probe_accuracy(&samples, 1, c as i32, d as i32);
    let rgb_acc2 = linear_probe_accuracy(&samples, 0, c as i32, d as i32);
    assert!(depth_acc2 <= CEILING, "depth probe separates the depth-collision pair: {depth_acc2}");
    assert!(rgb_acc2 >= 0.9, "appearance should separate the depth-collision pair: {rgb_acc2}");
}

fn build_tiny_dataset(dir: &std::path::Path, n_train: usize, n_val: usize, seed: u64) {
    let params = scene_params(32, 6);
    let train = generate_samples(seed, 0, n_train, &params).unwrap();
    write_dataset(&dir.join("train"), &meta_for(&params, n_train, seed), &train).unwrap();
    let val = generate_samples(seed, n_train, n_val, &params).unwrap();
    write_dataset(&dir.join("val"), &meta_for(&params, n_val, seed), &val).unwrap();
}

#[test]
fn loss_decreases_over_200_steps_on_a_fixed_set() {
    let dir = tempfile::tempdir().unwrap();
    build_tiny_dataset(dir.path(), 8, 2, 31);
    let mut cfg = tiny_cfg(dir.path().to_str().unwrap());
    cfg.schedule.steps = 200;
    cfg.schedule.lr = 5e-4;
    cfg.seed = 31;

    let ds = read_dataset::<f32>(&dir.path().join("train"), None).unwrap();
    let mut model = SegModel::<f32>::new(&cfg).unwrap();
    let mut opt = AdamW::new(&model.store, cfg.schedule.weight_decay);
    let schedule = LrSchedule::new(cfg.schedule.lr, 200, cfg.schedule.warmup_fraction, 0.9);

    let mut losses = Vec::new();
    for step in 0..200u64 {
        let batch: Vec<_> = (0..cfg.schedule.batch_size)
            .map(|i| ds.samples[(step as usize * cfg.schedule.batch_size + i) % 8].clone())
            .collect();
        let m = model.train_step(&mut opt, &schedule, &batch, step).unwrap();
        losses.push(m.loss);
    }
    // Window-10 smoothing, then require a clear monotone trend: the last
    // smoothed value far below the first, and no smoothed value above
    // 1.15× the running minimum after the warm-up window.
    let smoothed: Vec<f64> = losses
        .windows(10)
        .map(|w| w.iter().sum::<f64>() / 10.0)
        .collect();
    assert!(
        smoothed.last().unwrap() < &(0.7 * smoothed[0]),
        "smoothed loss did not decrease: {} -> {}",
        smoothed[0],
        smoothed.last().unwrap()
    );
    let mut running_min = f64::INFINITY;
    for (i, &v) in smoothed.iter().enumerate() {
        if i > 20 {
            assert!(
                v <= 1.15 * running_min,
                "smoothed loss regressed at window {i}: {v} vs min {running_min}"
            );
        }
        running_min = running_min.min(v);
    }
}

#[test]
fn emm_avg_over_two_modalities_is_the_mean_of_the_two_singles() {
    let dir = tempfile::tempdir().unwrap();
    build_tiny_dataset(dir.path(), 4, 2, 41);
    let mut cfg = tiny_cfg(dir.path().to_str().unwrap());
    cfg.model.modalities = vec!["rgb".into(), "depth".into()];
    cfg.model.modality_channels = vec![3, 1];
    let model = SegModel::<f32>::new(&cfg).unwrap();

    let ds = read_dataset::<f32>(&dir.path().join("val"), None).unwrap();
    // Drop the two unused modalities up front.
    let samples: Vec<_> = ds
        .samples
        .iter()
        .map(|(b, l)| {
            let maps = vec![b.maps[0].clone(), b.maps[1].clone()];
            (
                ModalityBundle::new(maps, cfg.model.modalities.clone()).unwrap(),
                l.clone(),
            )
        })
        .collect();

    let (avg, log) = emm_eval(&model, &samples, EmmMode::Avg, 1).unwrap();
    assert_eq!(log.len(), 2);
    let only_rgb = eval_transformed(&model, &samples, |_i, b| {
        equiseg_core::robustness::keep_subset(b, &[true, false])
    })
    .unwrap();
    let only_depth = eval_transformed(&model, &samples, |_i, b| {
        equiseg_core::robustness::keep_subset(b, &[false, true])
    })
    .unwrap();
    assert!((avg - (only_rgb + only_depth) / 2.0).abs() <= 1e-12);
}

#[test]
fn identity_perturbations_leave_miou_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    build_tiny_dataset(dir.path(), 4, 2, 51);
    let cfg = tiny_cfg(dir.path().to_str().unwrap());
    let model = SegModel::<f32>::new(&cfg).unwrap();
    let ds = read_dataset::<f32>(&dir.path().join("val"), None).unwrap();

    let clean = eval_transformed(&model, &ds.samples, |_i, b| Ok(b.clone())).unwrap();
    let rmm0 = eval_transformed(&model, &ds.samples, |i, b| rmm_perturb(b, 0.0, 16, 9, i)).unwrap();
    let nm0 = eval_transformed(&model, &ds.samples, |i, b| nm_perturb(b, 0.0, 9, i)).unwrap();
    let (emm_p0, _) = emm_eval(&model, &ds.samples, EmmMode::FixedP(0.0), 9).unwrap();
    assert_eq!(clean, rmm0);
    assert_eq!(clean, nm0);
    assert_eq!(clean, emm_p0);
}

#[test]
fn full_report_runs_and_counts_subsets() {
    let dir = tempfile::tempdir().unwrap();
    build_tiny_dataset(dir.path(), 4, 2, 61);
    let cfg = tiny_cfg(dir.path().to_str().unwrap());
    let model = SegModel::<f32>::new(&cfg).unwrap();
    let ds = read_dataset::<f32>(&dir.path().join("val"), None).unwrap();
    let params = RobustnessParams {
        rmm_grid: vec![0.3, 0.7],
        seed: 13,
        ..RobustnessParams::default()
    };
    let report = compute_report(&model, &ds.samples, &params).unwrap();
    // N = 4 → 2^4 − 2 = 14 subset evaluations.
    assert_eq!(report.emm_subsets.len(), 14);
    let expected = [
        report.miou_clean,
        report.emm_avg,
        report.emm_p,
        report.rmm_avg,
        report.rmm_p,
        report.nm_low,
        report.nm_mid,
    ]
    .iter()
    .sum::<f64>()
        / 7.0;
    assert!((report.mean - expected).abs() <= 1e-12);

    // Rendering is deterministic.
    assert_eq!(report.to_report_text(), report.to_report_text());
    let again = compute_report(&model, &ds.samples, &params).unwrap();
    assert_eq!(report.to_report_text(), again.to_report_text());
}

#[test]
fn training_is_bit_reproducible_for_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    build_tiny_dataset(dir.path(), 4, 2, 71);
    let mut cfg = tiny_cfg(dir.path().to_str().unwrap());
    cfg.schedule.steps = 5;
    cfg.seed = 71;

    let run = || {
        let ds = read_dataset::<f32>(&dir.path().join("train"), None).unwrap();
        let mut model = SegModel::<f32>::new(&cfg).unwrap();
        let mut opt = AdamW::new(&model.store, cfg.schedule.weight_decay);
        let schedule = LrSchedule::new(cfg.schedule.lr, 5, 0.0, 0.9);
        for step in 0..5u64 {
            let batch: Vec<_> = (0..4).map(|i| ds.samples[i % 4].clone()).collect();
            model.train_step(&mut opt, &schedule, &batch, step).unwrap();
        }
        let mut bytes = Vec::new();
        for id in model.store.ids() {
            for v in model.store.tensor(id).data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    };
    assert_eq!(run(), run());
}

#[test]
fn label_maps_respect_ignore_border() {
    let mut params = scene_params(32, 6);
    params.ignore_border = 2;
    let samples = generate_samples(81, 0, 2, &params).unwrap();
    for s in &samples {
        let w = 32;
        for x in 0..w {
            assert_eq!(s.label.data[x], 255);
            assert_eq!(s.label.data[31 * w + x], 255);
        }
    }
}

#[test]
fn checkpoint_cast_loads_across_profiles() {
    let dir = tempfile::tempdir().unwrap();
    build_tiny_dataset(dir.path(), 4, 2, 91);
    let cfg = tiny_cfg(dir.path().to_str().unwrap());
    let model = SegModel::<f32>::new(&cfg).unwrap();
    let path = dir.path().join("m.eqck");
    model.save(&path).unwrap();
    // Loading into the f64 profile casts values exactly.
    let as_f64 = SegModel::<f64>::load(&path).unwrap();
    let first_f32 = model.store.tensor(model.head.cls_w).data()[0] as f64;
    let first_f64 = as_f64.store.tensor(as_f64.head.cls_w).data()[0];
    assert_eq!(first_f32, first_f64);
}

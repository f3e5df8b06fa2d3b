//! Subcommand implementations. Every command resolves its configuration
//! through the same override pipeline (flags > file > defaults), honors the
//! global seed, and writes byte-reproducible artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;

use equiseg_core::config::{apply_overrides, ExperimentConfig, LAMBDA_PRESETS};
use equiseg_core::error::{Error, Result};
use equiseg_core::model::SegModel;
use equiseg_core::optim::{AdamW, LrSchedule};
use equiseg_core::params::read_checkpoint_meta;
use equiseg_core::robustness::{compute_report, self_test, RobustnessParams};
use equiseg_core::synth::{
    generate_samples, read_dataset, write_dataset, DatasetMeta, LoadedDataset, SceneParams,
    DATASET_VERSION, MODALITY_CHANNELS, MODALITY_NAMES,
};
use equiseg_core::tensor::{Dtype, Real};
use equiseg_core::util::{configure_threads, derive_seed, rng_from, shuffled_indices, stream};
use equiseg_core::verify::run_grad_suite;

use crate::{Command, ConfigArgs};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { common, out, force } => {
            let cfg = resolve_config(&common, Vec::new())?;
            setup_threads(&common, &cfg);
            cmd_gen(&cfg, &out, force)
        }
        Command::Train {
            common,
            data,
            out,
            steps,
            batch,
            lr,
            profile,
            sgm,
            lambda,
            lambda_preset,
            pairing,
            sq_hub,
            cross_attention,
            residual_add,
            prototype,
        } => {
            let mut extra: Vec<(String, String)> = Vec::new();
            push_opt(&mut extra, "schedule.steps", steps);
            push_opt(&mut extra, "schedule.batch_size", batch);
            push_opt(&mut extra, "schedule.lr", lr);
            push_opt(&mut extra, "profile", profile);
            push_opt(&mut extra, "sgm.enabled", sgm);
            if let Some(preset) = lambda_preset {
                if !LAMBDA_PRESETS.contains(&(preset as f64)) {
                    return Err(Error::Config(format!(
                        "lambda preset {preset} not in {LAMBDA_PRESETS:?}"
                    )));
                }
                extra.push(("sgm.lambda".into(), preset.to_string()));
            }
            push_opt(&mut extra, "sgm.lambda", lambda);
            push_opt(&mut extra, "sgm.pairing_mode", pairing);
            push_opt(&mut extra, "ablation.sq_hub", sq_hub);
            push_opt(&mut extra, "ablation.cross_attention", cross_attention);
            push_opt(&mut extra, "ablation.residual_add", residual_add);
            push_opt(&mut extra, "ablation.prototype", prototype);
            let cfg = resolve_config(&common, extra)?;
            setup_threads(&common, &cfg);
            match cfg.runtime_profile() {
                equiseg_core::Profile::Train => cmd_train::<f32>(&cfg, &data, &out),
                equiseg_core::Profile::Test => cmd_train::<f64>(&cfg, &data, &out),
            }
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            modalities,
            out,
        } => {
            let cfg = resolve_config(&common, Vec::new())?;
            setup_threads(&common, &cfg);
            let header = read_checkpoint_meta(&checkpoint)?;
            match header.dtype {
                Dtype::F32 => cmd_eval::<f32>(&checkpoint, &data, &split, &modalities, out.as_deref()),
                Dtype::F64 => cmd_eval::<f64>(&checkpoint, &data, &split, &modalities, out.as_deref()),
                Dtype::I32 => Err(Error::Format("checkpoint holds integer data".into())),
            }
        }
        Command::Robust {
            common,
            checkpoint,
            data,
            split,
            p,
            block,
            out,
            self_test: run_self_test,
        } => {
            if run_self_test {
                for (name, mean, expected) in self_test()? {
                    println!("self-test {name}: mean {:.2} (expected {expected})", mean);
                }
                println!("self-test ok");
                return Ok(());
            }
            let cfg = resolve_config(&common, Vec::new())?;
            setup_threads(&common, &cfg);
            let checkpoint = checkpoint
                .ok_or_else(|| Error::Config("--checkpoint required (or --self-test)".into()))?;
            let data = data.ok_or_else(|| Error::Config("--data required (or --self-test)".into()))?;
            let params = RobustnessParams {
                emm_p: p.unwrap_or(0.1),
                rmm_p: p.unwrap_or(0.1),
                rmm_block: block.unwrap_or(16),
                seed: cfg.seed,
                ..RobustnessParams::default()
            };
            let header = read_checkpoint_meta(&checkpoint)?;
            match header.dtype {
                Dtype::F32 => cmd_robust::<f32>(&checkpoint, &data, &split, &params, out.as_deref()),
                Dtype::F64 => cmd_robust::<f64>(&checkpoint, &data, &split, &params, out.as_deref()),
                Dtype::I32 => Err(Error::Format("checkpoint holds integer data".into())),
            }
        }
        Command::Gradcheck {
            common,
            seeds,
            negative_control,
        } => {
            let cfg = resolve_config(&common, Vec::new())?;
            setup_threads(&common, &cfg);
            let report = run_grad_suite(seeds, negative_control)?;
            print!("{}", report.render());
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Numeric("gradient suite failed".into()))
            }
        }
    }
}

fn push_opt<T: ToString>(extra: &mut Vec<(String, String)>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        extra.push((key.to_string(), v.to_string()));
    }
}

fn resolve_config(common: &ConfigArgs, mut extra: Vec<(String, String)>) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    overrides.append(&mut extra);
    for raw in &common.set {
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {raw}")))?;
        overrides.push((key.to_string(), value.to_string()));
    }
    apply_overrides(&base, &overrides)
}

fn setup_threads(common: &ConfigArgs, cfg: &ExperimentConfig) {
    let n = common
        .threads
        .or_else(|| std::env::var("EQUISEG_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(cfg.threads);
    configure_threads(n);
}

fn scene_params(cfg: &ExperimentConfig) -> SceneParams {
    SceneParams {
        height: cfg.data.height,
        width: cfg.data.width,
        classes: cfg.data.classes,
        min_objects: cfg.data.min_objects,
        max_objects: cfg.data.max_objects,
        ignore_border: cfg.data.ignore_border,
        ignore_id: cfg.data.ignore_id,
    }
}

fn cmd_gen(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} exists; pass --force to overwrite", out.display()),
            )));
        }
        fs::remove_dir_all(out)?;
    }
    let params = scene_params(cfg);
    let splits = [
        ("train", 0usize, cfg.data.train_samples),
        ("val", cfg.data.train_samples, cfg.data.val_samples),
    ];
    for (name, start, count) in splits {
        let samples = generate_samples(cfg.seed, start, count, &params)?;
        let meta = DatasetMeta {
            version: DATASET_VERSION,
            samples: count,
            classes: cfg.data.classes,
            height: cfg.data.height,
            width: cfg.data.width,
            modalities: MODALITY_NAMES.iter().map(|s| s.to_string()).collect(),
            modality_channels: MODALITY_CHANNELS.to_vec(),
            ignore_id: cfg.data.ignore_id,
            seed: cfg.seed,
        };
        write_dataset(&out.join(name), &meta, &samples)?;
        println!(
            "{name}: {count} samples, {} categories, {}x{}, modalities {}",
            cfg.data.classes,
            cfg.data.height,
            cfg.data.width,
            MODALITY_NAMES.join("+")
        );
    }
    Ok(())
}

fn validate_dataset(cfg: &ExperimentConfig, meta: &DatasetMeta) -> Result<()> {
    if meta.modalities != cfg.model.modalities {
        return Err(Error::Config(format!(
            "dataset modalities {:?} do not match model {:?}",
            meta.modalities, cfg.model.modalities
        )));
    }
    if meta.modality_channels != cfg.model.modality_channels {
        return Err(Error::Config("modality channel counts disagree".into()));
    }
    if meta.classes != cfg.data.classes {
        return Err(Error::Config(format!(
            "dataset has {} categories, config expects {}",
            meta.classes, cfg.data.classes
        )));
    }
    if (meta.height, meta.width) != (cfg.data.height, cfg.data.width) {
        return Err(Error::Config("dataset extents disagree with config".into()));
    }
    Ok(())
}

fn cmd_train<F: Real>(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let ds: LoadedDataset<F> = read_dataset(&data.join("train"), None)?;
    validate_dataset(cfg, &ds.meta)?;
    fs::create_dir_all(out)?;

    let mut model = SegModel::<F>::new(cfg)?;
    let mut optimizer = AdamW::new(&model.store, cfg.schedule.weight_decay);
    let schedule = LrSchedule::new(
        cfg.schedule.lr,
        cfg.schedule.steps,
        cfg.schedule.warmup_fraction,
        cfg.schedule.poly_exponent,
    );

    let mut metrics = fs::File::create(out.join("metrics.jsonl"))?;
    writeln!(
        metrics,
        "{}",
        serde_json::json!({ "provenance": cfg.provenance() })
    )?;

    // Epochs of shuffled sample indices, concatenated.
    let n = ds.samples.len();
    let need = cfg.schedule.steps as usize * cfg.schedule.batch_size;
    let mut order: Vec<usize> = Vec::with_capacity(need + n);
    let mut epoch = 0u64;
    while order.len() < need {
        let mut rng = rng_from(derive_seed(cfg.seed, &[stream::BATCH, epoch]));
        order.extend(shuffled_indices(&mut rng, n));
        epoch += 1;
    }

    let print_every = (cfg.schedule.steps / 10).max(1);
    for step in 0..cfg.schedule.steps {
        let base = step as usize * cfg.schedule.batch_size;
        let batch: Vec<_> = order[base..base + cfg.schedule.batch_size]
            .iter()
            .map(|&i| ds.samples[i].clone())
            .collect();
        let m = model.train_step(&mut optimizer, &schedule, &batch, step)?;
        writeln!(metrics, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
        if (step + 1) % print_every == 0 || step + 1 == cfg.schedule.steps {
            println!(
                "step {:>6}/{} L={:.4} L_CE={:.4} L_s={:.6} lr={:.2e}",
                step + 1,
                cfg.schedule.steps,
                m.loss,
                m.ce,
                m.sgm,
                m.lr
            );
        }
        if cfg.schedule.checkpoint_every > 0 && (step + 1) % cfg.schedule.checkpoint_every == 0 {
            model.save(&out.join(format!("checkpoint_{:06}.eqck", step + 1)))?;
        }
    }
    model.save(&out.join("checkpoint_final.eqck"))?;
    println!("wrote {}", out.join("checkpoint_final.eqck").display());
    Ok(())
}

fn cmd_eval<F: Real>(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    modalities: &[String],
    out: Option<&Path>,
) -> Result<()> {
    let model = SegModel::<F>::load(checkpoint)?;
    let filter: Option<&[String]> = if modalities.is_empty() {
        None
    } else {
        Some(modalities)
    };
    let ds: LoadedDataset<F> = read_dataset(&data.join(split), filter)?;
    validate_dataset(&model.cfg, &ds.meta)?;
    let (miou, confusion) = model.evaluate(&ds.samples)?;

    let mut report = String::new();
    report.push_str("# evaluation report v1\n");
    report.push_str(&format!("# flags: {}\n", model.cfg.provenance()));
    report.push_str(&format!("# split: {split} ({} samples)\n", ds.samples.len()));
    for (c, iou) in confusion.per_category_iou().iter().enumerate() {
        match iou {
            Some(v) => report.push_str(&format!("iou[{c}] {v:.6}\n")),
            None => report.push_str(&format!("iou[{c}] absent\n")),
        }
    }
    report.push_str(&format!("miou {miou:.6}\n"));
    print!("{report}");
    if let Some(path) = out {
        fs::write(path, &report)?;
    }
    Ok(())
}

fn cmd_robust<F: Real>(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    params: &RobustnessParams,
    out: Option<&Path>,
) -> Result<()> {
    let model = SegModel::<F>::load(checkpoint)?;
    let ds: LoadedDataset<F> = read_dataset(&data.join(split), None)?;
    validate_dataset(&model.cfg, &ds.meta)?;
    let report = compute_report(&model, &ds.samples, params)?;
    println!(
        "emm avg over {} subset evaluations",
        report.emm_subsets.len()
    );
    print!("{}", report.to_table_string());
    if let Some(path) = out {
        fs::write(path, report.to_report_text())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

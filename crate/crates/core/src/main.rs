//! Command-line operator surface: dataset synthesis, training, fine-tuning,
//! inference, evaluation, ablation sweeps, and report generation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use demosaicformer::baseline::BaselineKind;
use demosaicformer::codec::{read_defect, read_png, read_raw_bin, write_defect, write_gray_png, write_png, write_raw_bin};
use demosaicformer::config::{self, Config};
use demosaicformer::correction::FusionMode;
use demosaicformer::data::{synthesize_pair, DefectLibrary, SamplePair};
use demosaicformer::error::{Error, Result};
use demosaicformer::metrics::{evaluate_dir, psnr, residual_map, ssim, MetricReport};
use demosaicformer::model::{PipelineVariant, StageOrder};
use demosaicformer::pattern::PatternSpec;
use demosaicformer::schedule::{ProgressiveSchedule, Stage};
use demosaicformer::train::{
    finetune, load_inference_weights, train, Dataset, TrainConfig, TrainMode,
};
use demosaicformer::DemosaicFormer;

#[derive(Parser)]
#[command(name = "demosaicformer", about = "Coarse-to-fine HybridEVS raw-to-RGB pipeline")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Run-configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed fixing all stochastic behavior for this command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Allow clobbering existing output paths.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Compute device (only "cpu" is available).
    #[arg(long, global = true)]
    device: Option<String>,
    /// Config override, repeatable: --set key.path=value
    #[arg(long = "set", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Synthesize a raw/gt/defect dataset from clean RGB images.
    Synth,
    /// Train a model with the progressive schedule.
    Train,
    /// Fine-tune from a checkpoint without augmentation.
    Finetune,
    /// Run inference over a directory of raw mosaics.
    Infer,
    /// Evaluate predictions against ground truth.
    Eval,
    /// Run the (order, fusion) / training-strategy ablation sweep.
    Ablate,
    /// Write an evaluation report table plus a summary.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(failures) if failures == 0 => ExitCode::SUCCESS,
        Ok(failures) => {
            eprintln!("{failures} item(s) failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Returns the number of per-item failures.
fn run(cli: &Cli) -> Result<usize> {
    let device = cli
        .device
        .clone()
        .or_else(|| std::env::var("DEMOSAICFORMER_DEVICE").ok())
        .unwrap_or_else(|| "cpu".to_string());
    if device != "cpu" {
        return Err(Error::config(format!(
            "device '{device}' is not available; only 'cpu' is supported"
        )));
    }
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::empty(),
    };
    cfg.apply_overrides(&cli.set)?;
    let seed = match cli.seed {
        Some(s) => {
            let _ = cfg.get("seed"); // CLI wins; still mark as consumed
            s
        }
        None => cfg.get_parsed("seed", 0u64)?,
    };
    let failures = match cli.verb {
        Verb::Synth => run_synth(&cfg, seed, cli.overwrite)?,
        Verb::Train => run_train(&cfg, seed, cli.overwrite, false)?,
        Verb::Finetune => run_train(&cfg, seed, cli.overwrite, true)?,
        Verb::Infer => run_infer(&cfg, cli.overwrite)?,
        Verb::Eval => run_eval(&cfg, cli.overwrite)?,
        Verb::Ablate => run_ablate(&cfg, seed, cli.overwrite)?,
        Verb::Report => run_report(&cfg, cli.overwrite)?,
    };
    cfg.finish()?;
    Ok(failures)
}

fn ensure_fresh_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .map(|mut it| it.next().is_some())
            .unwrap_or(false);
        if occupied && !overwrite {
            return Err(Error::config(format!(
                "output directory {} is not empty; pass --overwrite to clobber",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))
}

fn ensure_fresh_file(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::config(format!(
            "output file {} exists; pass --overwrite to clobber",
            path.display()
        )));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
    }
    Ok(())
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("read dir {}", dir.display()), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(ext))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn load_defect_library(dir: Option<&Path>, pattern: &PatternSpec) -> Result<DefectLibrary> {
    let mut lib = DefectLibrary::default();
    if let Some(dir) = dir {
        for path in sorted_files(dir, "defect")? {
            lib.push(stem(&path), read_defect(&path, pattern)?);
        }
    }
    Ok(lib)
}

fn run_synth(cfg: &Config, seed: u64, overwrite: bool) -> Result<usize> {
    let gt_dir = PathBuf::from(cfg.require("synth.gt_dir")?);
    let out_dir = PathBuf::from(cfg.require("synth.out_dir")?);
    let pattern = config::pattern_spec(cfg)?;
    let augment = config::augment_config(cfg, seed)?;
    let tau: f64 = cfg.get_parsed("synth.tau", 0.02)?;
    let library = load_defect_library(
        cfg.get("synth.defects_dir").map(PathBuf::from).as_deref(),
        &pattern,
    )?;
    ensure_fresh_dir(&out_dir, overwrite)?;
    for sub in ["gt", "raw", "defects"] {
        std::fs::create_dir_all(out_dir.join(sub))
            .map_err(|e| Error::io(format!("create {}", out_dir.join(sub).display()), e))?;
    }
    let mut manifest = String::new();
    let mut failures = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for path in sorted_files(&gt_dir, "png")? {
        let id = stem(&path);
        let result = (|| -> Result<String> {
            let gt = read_png(&path)?;
            if gt.height() % 4 != 0 || gt.width() % 4 != 0 {
                return Err(Error::shape("dims not multiple of 4".to_string()));
            }
            let (pair, desc) = synthesize_pair(&gt, &augment, &library, &pattern, &mut rng)?;
            write_png(&pair.target, &out_dir.join("gt").join(format!("{id}.png")))?;
            write_raw_bin(&pair.input, &out_dir.join("raw").join(format!("{id}.bin")))?;
            let map = demosaicformer::data::extract_defect_map(&pair.input, &pair.target, &pattern, tau)?;
            write_defect(&map, &out_dir.join("defects").join(format!("{id}.defect")))?;
            Ok(desc.to_string())
        })();
        match result {
            Ok(desc) => manifest.push_str(&format!("{id}\t{seed}\t{desc}\n")),
            Err(e) => {
                eprintln!("synth: {id}: {e}");
                failures += 1;
            }
        }
    }
    std::fs::write(out_dir.join("manifest.tsv"), manifest)
        .map_err(|e| Error::io("write manifest".to_string(), e))?;
    Ok(failures)
}

fn load_val_pairs(cfg: &Config, pattern: &PatternSpec) -> Result<Vec<SamplePair>> {
    let (Some(raw_dir), Some(gt_dir)) = (
        cfg.get("data.val_raw_dir").map(PathBuf::from),
        cfg.get("data.val_gt_dir").map(PathBuf::from),
    ) else {
        return Ok(Vec::new());
    };
    let mut pairs = Vec::new();
    for raw_path in sorted_files(&raw_dir, "bin")? {
        let id = stem(&raw_path);
        let gt_path = gt_dir.join(format!("{id}.png"));
        if !gt_path.exists() {
            return Err(Error::Pairing {
                id,
                dir: gt_dir.clone(),
            });
        }
        pairs.push(SamplePair::new(
            read_raw_bin(&raw_path, pattern.clone())?,
            read_png(&gt_path)?,
        )?);
    }
    Ok(pairs)
}

fn load_dataset(cfg: &Config, pattern: &PatternSpec) -> Result<Dataset> {
    let gt_dir = PathBuf::from(cfg.require("data.gt_dir")?);
    let mut train_gts = Vec::new();
    for path in sorted_files(&gt_dir, "png")? {
        let gt = read_png(&path)?;
        if gt.height() % 4 != 0 || gt.width() % 4 != 0 {
            eprintln!("skipping {}: dims not multiple of 4", path.display());
            continue;
        }
        train_gts.push(gt);
    }
    let library = load_defect_library(
        cfg.get("data.defects_dir").map(PathBuf::from).as_deref(),
        pattern,
    )?;
    let val = load_val_pairs(cfg, pattern)?;
    Ok(Dataset {
        train_gts,
        library,
        val,
        pattern: pattern.clone(),
    })
}

fn run_train(cfg: &Config, seed: u64, overwrite: bool, is_finetune: bool) -> Result<usize> {
    let pattern = config::pattern_spec(cfg)?;
    let model_cfg = config::model_config(cfg)?;
    let train_cfg = config::train_config(cfg, is_finetune, seed)?;
    let dataset = load_dataset(cfg, &pattern)?;
    let out_dir = PathBuf::from(cfg.require("out.dir")?);
    let resume = cfg.get("train.resume").map(PathBuf::from);
    if resume.is_none() {
        ensure_fresh_dir(&out_dir, overwrite)?;
    }
    let mut model = DemosaicFormer::new(model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1111);
    model.randomize(&mut rng);
    let started = Instant::now();
    let outcome = if is_finetune {
        let init = PathBuf::from(cfg.require("finetune.init")?);
        finetune(&mut model, &dataset, &train_cfg, &init, Some(&out_dir))?
    } else {
        train(&mut model, &dataset, &train_cfg, Some(&out_dir), resume.as_deref())?
    };
    println!(
        "trained {} iterations in {:.1}s; best validation psnr {:.3} dB; {} checkpoint file(s) in {}",
        outcome.final_iter,
        started.elapsed().as_secs_f64(),
        outcome.best_psnr,
        outcome.checkpoints.len(),
        out_dir.display()
    );
    Ok(0)
}

fn run_infer(cfg: &Config, overwrite: bool) -> Result<usize> {
    let ckpt = PathBuf::from(cfg.require("infer.checkpoint")?);
    let raw_dir = PathBuf::from(cfg.require("infer.raw_dir")?);
    let out_dir = PathBuf::from(cfg.require("infer.out_dir")?);
    let threshold: usize = cfg.get_parsed("infer.tile_threshold", 1024)?;
    let tile: usize = cfg.get_parsed("infer.tile", 512)?;
    let overlap: usize = cfg.get_parsed("infer.overlap", 32)?;
    let pattern = config::pattern_spec(cfg)?;
    let model_cfg = config::model_config(cfg)?;
    ensure_fresh_dir(&out_dir, overwrite)?;
    let mut model = DemosaicFormer::new(model_cfg)?;
    load_inference_weights(&ckpt, &mut model)?;
    let started = Instant::now();
    let mut failures = 0usize;
    let mut count = 0usize;
    for path in sorted_files(&raw_dir, "bin")? {
        let id = stem(&path);
        let result = (|| -> Result<()> {
            let raw = read_raw_bin(&path, pattern.clone())?;
            let long_side = raw.height().max(raw.width());
            let pred = if long_side > threshold {
                model.forward_raw_tiled(&raw, tile, overlap)?
            } else {
                model.forward_raw(&raw)?
            };
            write_png(&pred, &out_dir.join(format!("{id}.png")))
        })();
        match result {
            Ok(()) => count += 1,
            Err(e) => {
                eprintln!("infer: {id}: {e}");
                failures += 1;
            }
        }
    }
    println!(
        "inferred {count} image(s) in {:.1}s",
        started.elapsed().as_secs_f64()
    );
    Ok(failures)
}

fn eval_report(cfg: &Config) -> Result<MetricReport> {
    let pred_dir = PathBuf::from(cfg.require("eval.pred_dir")?);
    let gt_dir = PathBuf::from(cfg.require("eval.gt_dir")?);
    let report = evaluate_dir(&pred_dir, &gt_dir)?;
    if let Some(raw_gain) = cfg.get("eval.residual_gain") {
        let gain: f32 = raw_gain
            .parse()
            .map_err(|_| Error::config("eval.residual_gain must be a number"))?;
        for (id, _, _) in &report.per_image {
            let p = read_png(&pred_dir.join(format!("{id}.png")))?;
            let g = read_png(&gt_dir.join(format!("{id}.png")))?;
            let map = residual_map(&p, &g, gain)?;
            write_gray_png(&map, &pred_dir.join(format!("{id}.residual.png")))?;
        }
    }
    Ok(report)
}

fn run_eval(cfg: &Config, _overwrite: bool) -> Result<usize> {
    let report = eval_report(cfg)?;
    print!("{}", report.to_table());
    Ok(0)
}

fn run_report(cfg: &Config, overwrite: bool) -> Result<usize> {
    let out = PathBuf::from(cfg.require("report.out")?);
    ensure_fresh_file(&out, overwrite)?;
    let report = eval_report(cfg)?;
    let mut text = report.to_table();
    text.push_str(&format!(
        "\n{} image(s); mean PSNR {:.4} dB, mean SSIM {:.6}\nconfig: {}\n",
        report.per_image.len(),
        report.mean_psnr,
        report.mean_ssim,
        report.config_snapshot
    ));
    std::fs::write(&out, &text).map_err(|e| Error::io(format!("write {}", out.display()), e))?;
    print!("{text}");
    Ok(0)
}

fn parse_variants(raw: &str) -> Result<Vec<(String, Option<PipelineVariant>, Option<TrainMode>)>> {
    let mut out: Vec<(String, Option<PipelineVariant>, Option<TrainMode>)> = Vec::new();
    for token in raw.split(',').map(|t| t.trim()).filter(|t| !t.is_empty()) {
        let entry = if let Some(mode) = token.strip_prefix("mode_") {
            (token.to_string(), None, Some(TrainMode::parse(mode)?))
        } else {
            let Some((order, fusion)) = token.split_once('+') else {
                return Err(Error::config(format!(
                    "ablation variant '{token}' must be order+fusion or mode_<a|b|c>"
                )));
            };
            let variant = PipelineVariant {
                order: StageOrder::parse(order)?,
                fusion: FusionMode::parse(fusion)?,
            };
            (token.to_string(), Some(variant), None)
        };
        if out.iter().any(|(name, _, _)| *name == entry.0) {
            return Err(Error::config(format!("duplicate ablation variant '{}'", entry.0)));
        }
        out.push(entry);
    }
    if out.is_empty() {
        return Err(Error::config("ablate.variants is empty"));
    }
    Ok(out)
}

fn eval_model_on_val(model: &mut DemosaicFormer, val: &[SamplePair]) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Err(Error::config("ablation needs validation pairs (data.val_*)"));
    }
    let (mut p_total, mut s_total) = (0.0, 0.0);
    for pair in val {
        let pred = model.forward_raw(&pair.input)?;
        p_total += psnr(&pred, &pair.target)?;
        s_total += ssim(&pred, &pair.target)?;
    }
    Ok((p_total / val.len() as f64, s_total / val.len() as f64))
}

fn run_ablate(cfg: &Config, seed: u64, overwrite: bool) -> Result<usize> {
    let pattern = config::pattern_spec(cfg)?;
    let dataset = load_dataset(cfg, &pattern)?;
    let base_model_cfg = config::model_config(cfg)?;
    let variants = parse_variants(&cfg.require("ablate.variants")?)?;
    let iterations: usize = cfg.get_parsed("ablate.iterations", 200)?;
    let patch: usize = cfg.get_parsed("ablate.patch", 64)?;
    let batch: usize = cfg.get_parsed("ablate.batch", 2)?;
    let n_seeds: u64 = cfg.get_parsed("ablate.seeds", 1)?;
    let out = cfg.get("ablate.out").map(PathBuf::from);
    if let Some(path) = &out {
        ensure_fresh_file(path, overwrite)?;
    }
    let baseline_kind = BaselineKind::parse(&cfg.get_or("ablate.baseline", "bilinear"))?;

    let mut table = String::from("variant\tpsnr_db\tssim\n");
    let mut failures = 0usize;
    for (name, variant, mode) in &variants {
        let mut psnr_acc = 0.0;
        let mut ssim_acc = 0.0;
        let mut ok = true;
        for s in 0..n_seeds {
            let result = (|| -> Result<(f64, f64)> {
                let mut model_cfg = base_model_cfg.clone();
                if let Some(v) = variant {
                    model_cfg.variant = *v;
                    model_cfg.correction.fusion_mode = v.fusion;
                }
                let mut model = DemosaicFormer::new(model_cfg)?;
                if iterations > 0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed + s);
                    model.randomize(&mut rng);
                    let train_cfg = TrainConfig {
                        mode: mode.unwrap_or(TrainMode::JointDefault),
                        schedule: ProgressiveSchedule {
                            stages: vec![Stage {
                                patch_size: patch,
                                batch_size: batch,
                                iterations,
                            }],
                            base_lr: cfg.get_parsed("ablate.lr", 2e-4)?,
                            final_lr: 1e-6,
                            flat_first_stage: false,
                        },
                        seed: seed + s,
                        val_interval: 0,
                        checkpoint_interval: 0,
                        ..TrainConfig::default()
                    };
                    train(&mut model, &dataset, &train_cfg, None, None)?;
                }
                eval_model_on_val(&mut model, &dataset.val)
            })();
            match result {
                Ok((p, q)) => {
                    psnr_acc += p;
                    ssim_acc += q;
                }
                Err(e) => {
                    table.push_str(&format!("{name}\tFAILED: {e}\t-\n"));
                    failures += 1;
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            table.push_str(&format!(
                "{name}\t{:.4}\t{:.6}\n",
                psnr_acc / n_seeds as f64,
                ssim_acc / n_seeds as f64
            ));
        }
    }
    // classical anchor row for context
    if !dataset.val.is_empty() {
        let (mut p_total, mut s_total) = (0.0, 0.0);
        for pair in &dataset.val {
            let pred = baseline_kind.apply(&pair.input);
            p_total += psnr(&pred, &pair.target)?;
            s_total += ssim(&pred, &pair.target)?;
        }
        table.push_str(&format!(
            "baseline\t{:.4}\t{:.6}\n",
            p_total / dataset.val.len() as f64,
            s_total / dataset.val.len() as f64
        ));
    }
    print!("{table}");
    if let Some(path) = &out {
        std::fs::write(path, &table).map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    Ok(failures)
}

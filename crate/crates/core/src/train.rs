//! Training engine: L1 loss, the progressive schedule, Adam + EMA, the
//! three training-object modes, checkpointing with exact resume, and the
//! fine-tune stage.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_params, store_params, Checkpoint};
use crate::data::{crop_aligned_patch, synthesize_pair, AugmentConfig, DefectLibrary, SamplePair};
use crate::error::{Error, Result};
use crate::image::{extend_to_rgb, mosaic, RgbImage};
use crate::metrics::psnr;
use crate::model::{rgb_to_tensor, DemosaicFormer, StageOrder};
use crate::nn::{Param, Tensor};
use crate::num::Scalar;
use crate::optim::{Adam, EmaState, OptimConfig};
use crate::pattern::PatternSpec;
use crate::schedule::ProgressiveSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// A: train the first stage alone, then fine-tune jointly.
    IndivThenJointFt,
    /// B: joint training with an auxiliary loss on the first-stage output.
    JointWithStage1Supervision,
    /// C (default): joint training with a single loss on the final output.
    JointDefault,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" | "A" | "indiv_then_joint_ft" => Ok(TrainMode::IndivThenJointFt),
            "b" | "B" | "joint_with_stage1_supervision" => Ok(TrainMode::JointWithStage1Supervision),
            "c" | "C" | "joint_default" => Ok(TrainMode::JointDefault),
            other => Err(Error::config(format!("unknown train mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::IndivThenJointFt => "indiv_then_joint_ft",
            TrainMode::JointWithStage1Supervision => "joint_with_stage1_supervision",
            TrainMode::JointDefault => "joint_default",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Weight of the stage-1 auxiliary loss (mode B only).
    pub stage1_loss_weight: f64,
    /// Fraction of total iterations spent on the stage-1-only phase (mode A).
    pub mode_a_stage1_fraction: f64,
    pub schedule: ProgressiveSchedule,
    pub optim: OptimConfig,
    pub ema_enabled: bool,
    pub ema_decay: f64,
    pub seed: u64,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    /// Validation cadence in iterations; 0 disables validation.
    pub val_interval: usize,
    /// Periodic checkpoint cadence in iterations; 0 keeps only last/best.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::JointDefault,
            stage1_loss_weight: 0.5,
            mode_a_stage1_fraction: 0.3,
            schedule: ProgressiveSchedule::default(),
            optim: OptimConfig::default(),
            ema_enabled: true,
            ema_decay: 0.999,
            seed: 0,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            val_interval: 2000,
            checkpoint_interval: 2000,
        }
    }
}

impl TrainConfig {
    /// Fine-tune configuration: single (192, 12, 20000) stage with cosine
    /// 1e-4 to 1e-7, no augmentation, EMA on.
    pub fn finetune() -> Self {
        TrainConfig {
            schedule: ProgressiveSchedule::finetune(),
            augment_enabled: false,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        if !(0.0..=1.0).contains(&self.mode_a_stage1_fraction) {
            return Err(Error::config("mode_a_stage1_fraction outside [0, 1]"));
        }
        if self.stage1_loss_weight < 0.0 {
            return Err(Error::config("stage1_loss_weight must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay outside [0, 1]"));
        }
        Ok(())
    }
}

/// Ground-truth images to synthesize from, the harvested defect library,
/// and a held-out validation split.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train_gts: Vec<RgbImage>,
    pub library: DefectLibrary,
    pub val: Vec<SamplePair>,
    pub pattern: PatternSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub patch: usize,
    pub batch: usize,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} loss={:.6} lr={:.6e} patch={} batch={}",
            self.iter, self.loss, self.lr, self.patch, self.batch
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub best_psnr: f64,
    pub final_iter: usize,
    /// Number of augmentation (synthesize_pair) invocations.
    pub augment_calls: u64,
    pub checkpoints: Vec<PathBuf>,
}

/// Mean absolute error over all entries.
pub fn l1_loss<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "l1_loss: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let n = pred.len() as f64;
    let sum: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(&a, &b)| (a - b).to_f64_().abs())
        .sum();
    Ok(sum / n)
}

/// Gradient of `l1_loss` with respect to `pred`: sign(pred - gt) / N.
pub fn l1_loss_grad<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Tensor<S> {
    let inv_n = S::from_f64(1.0 / pred.len() as f64);
    let mut g = pred.clone();
    ndarray::Zip::from(&mut g).and(gt).for_each(|g, &t| {
        let d = *g - t;
        *g = if d > S::zero() {
            inv_n
        } else if d < S::zero() {
            -inv_n
        } else {
            S::zero()
        };
    });
    g
}

struct TrainState<S: Scalar> {
    opt: Adam<S>,
    ema: EmaState<S>,
    rng: ChaCha8Rng,
    start_iter: usize,
    best_psnr: f64,
}

fn store_map<S: Scalar>(ckpt: &mut Checkpoint, prefix: &str, map: &BTreeMap<String, ArrayD<S>>) {
    for (k, v) in map {
        let data: Vec<f64> = v.iter().map(|x| x.to_f64_()).collect();
        if std::mem::size_of::<S>() == 4 {
            ckpt.put_array_f32(
                &format!("{prefix}.{k}"),
                v.shape(),
                data.iter().map(|&x| x as f32).collect(),
            );
        } else {
            ckpt.put_array_f64(&format!("{prefix}.{k}"), v.shape(), data);
        }
    }
}

fn load_map<S: Scalar>(ckpt: &Checkpoint, prefix: &str) -> BTreeMap<String, ArrayD<S>> {
    let pfx = format!("{prefix}.");
    let mut out = BTreeMap::new();
    for (k, v) in &ckpt.arrays {
        if let Some(name) = k.strip_prefix(&pfx) {
            let data: Vec<S> = v.to_f64_vec().into_iter().map(S::from_f64).collect();
            out.insert(
                name.to_string(),
                ArrayD::from_shape_vec(ndarray::IxDyn(v.shape()), data).unwrap(),
            );
        }
    }
    out
}

/// Serializes the full training state (model, optimizer, EMA, RNG position).
pub fn save_training_checkpoint<S: Scalar>(
    path: &Path,
    model: &mut DemosaicFormer<S>,
    state: &TrainStateView<'_, S>,
) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    store_params(&mut ckpt, "model", |f| model.visit_params("", f));
    store_map(&mut ckpt, "adam.m", &state.opt.m);
    store_map(&mut ckpt, "adam.v", &state.opt.v);
    store_map(&mut ckpt, "ema", &state.ema.shadow);
    ckpt.meta.insert("iter".into(), state.iter.to_string());
    ckpt.meta
        .insert("adam_step".into(), state.opt.step_count.to_string());
    ckpt.meta
        .insert("rng_word_pos".into(), state.rng_word_pos.to_string());
    ckpt.meta.insert("seed".into(), state.seed.to_string());
    ckpt.meta
        .insert("best_psnr".into(), format!("{:?}", state.best_psnr));
    ckpt.meta
        .insert("config".into(), state.config_snapshot.clone());
    ckpt.save(path)
}

/// Borrowed view of everything besides the model that a checkpoint records.
pub struct TrainStateView<'a, S: Scalar> {
    pub opt: &'a Adam<S>,
    pub ema: &'a EmaState<S>,
    pub iter: usize,
    pub rng_word_pos: u128,
    pub seed: u64,
    pub best_psnr: f64,
    pub config_snapshot: String,
}

/// Loads model weights (the `model.` keys) from a checkpoint, strictly.
pub fn load_model_weights<S: Scalar>(path: &Path, model: &mut DemosaicFormer<S>) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    load_params(&ckpt, "model", true, |f| model.visit_params("", f))
}

/// Loads EMA shadow weights into the model if present, else the raw weights.
pub fn load_inference_weights<S: Scalar>(path: &Path, model: &mut DemosaicFormer<S>) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let has_ema = ckpt.arrays.keys().any(|k| k.starts_with("ema."));
    if has_ema {
        load_params(&ckpt, "ema", true, |f| model.visit_params("", f))
    } else {
        load_params(&ckpt, "model", true, |f| model.visit_params("", f))
    }
}

fn restore_state<S: Scalar>(
    ckpt: &Checkpoint,
    model: &mut DemosaicFormer<S>,
    cfg: &TrainConfig,
) -> Result<TrainState<S>> {
    load_params(ckpt, "model", true, |f| model.visit_params("", f))?;
    let mut opt = Adam::<S>::new(cfg.optim.clone());
    opt.m = load_map(ckpt, "adam.m");
    opt.v = load_map(ckpt, "adam.v");
    opt.step_count = ckpt
        .meta
        .get("adam_step")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let mut ema = EmaState::<S>::new(cfg.ema_decay);
    ema.shadow = load_map(ckpt, "ema");
    let seed: u64 = ckpt
        .meta
        .get("seed")
        .and_then(|s| s.parse().ok())
        .unwrap_or(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(pos) = ckpt.meta.get("rng_word_pos").and_then(|s| s.parse::<u128>().ok()) {
        rng.set_word_pos(pos);
    }
    let start_iter = ckpt
        .meta
        .get("iter")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let best_psnr = ckpt
        .meta
        .get("best_psnr")
        .and_then(|s| s.parse().ok())
        .unwrap_or(f64::NEG_INFINITY);
    Ok(TrainState {
        opt,
        ema,
        rng,
        start_iter,
        best_psnr,
    })
}

fn assemble_batch<S: Scalar>(
    data: &Dataset,
    cfg: &TrainConfig,
    patch: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
    augment_calls: &mut u64,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut x = Array4::<S>::zeros((batch, 3, patch, patch));
    let mut y = Array4::<S>::zeros((batch, 3, patch, patch));
    for b in 0..batch {
        let idx = rng.gen_range(0..data.train_gts.len());
        let gt = &data.train_gts[idx];
        let pair = if cfg.augment_enabled {
            *augment_calls += 1;
            synthesize_pair(gt, &cfg.augment, &data.library, &data.pattern, rng)?.0
        } else {
            SamplePair::new(mosaic(gt, &data.pattern)?, gt.clone())?
        };
        let patch_pair = if patch < pair.input.height().min(pair.input.width()) {
            crop_aligned_patch(&pair, patch, rng)?
        } else if patch == pair.input.height() && patch == pair.input.width() {
            pair
        } else {
            return Err(Error::Bounds(format!(
                "patch {patch} does not fit training image {}x{}",
                pair.input.height(),
                pair.input.width()
            )));
        };
        let xt = rgb_to_tensor::<S>(&extend_to_rgb(&patch_pair.input));
        let yt = rgb_to_tensor::<S>(&patch_pair.target);
        x.index_axis_mut(ndarray::Axis(0), b)
            .assign(&xt.index_axis(ndarray::Axis(0), 0));
        y.index_axis_mut(ndarray::Axis(0), b)
            .assign(&yt.index_axis(ndarray::Axis(0), 0));
    }
    Ok((x, y))
}

/// Mean validation PSNR of the current weights over the held-out split.
pub fn validate<S: Scalar>(model: &mut DemosaicFormer<S>, val: &[SamplePair]) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for pair in val {
        let pred = model.forward_raw(&pair.input)?;
        total += psnr(&pred, &pair.target)?;
    }
    Ok(total / val.len() as f64)
}

fn validate_with_ema<S: Scalar>(
    model: &mut DemosaicFormer<S>,
    ema: &EmaState<S>,
    use_ema: bool,
    val: &[SamplePair],
) -> Result<f64> {
    if !use_ema || ema.shadow.is_empty() {
        return validate(model, val);
    }
    // swap in the EMA weights, evaluate, swap back
    let mut backup: BTreeMap<String, ArrayD<S>> = BTreeMap::new();
    model.visit_params("", &mut |name, p: &mut Param<S>| {
        backup.insert(name, p.value.clone());
    });
    ema.apply_to(|f| model.visit_params("", f))?;
    let result = validate(model, val);
    model.visit_params("", &mut |name, p: &mut Param<S>| {
        p.value.assign(&backup[&name]);
    });
    result
}

/// One optimization step at the given iteration. Returns the scalar loss.
fn train_step<S: Scalar>(
    model: &mut DemosaicFormer<S>,
    data: &Dataset,
    cfg: &TrainConfig,
    iter: usize,
    total_iters: usize,
    opt: &mut Adam<S>,
    ema: &mut EmaState<S>,
    rng: &mut ChaCha8Rng,
    augment_calls: &mut u64,
) -> Result<LogRecord> {
    let stage = cfg.schedule.stage_at(iter)?;
    let lr = cfg.schedule.lr_at(iter);
    let (x, y) = assemble_batch::<S>(data, cfg, stage.patch_size, stage.batch_size, rng, augment_calls)?;
    model.zero_grads();

    let stage1_only = matches!(cfg.mode, TrainMode::IndivThenJointFt)
        && iter < (cfg.mode_a_stage1_fraction * total_iters as f64) as usize;
    let loss = if stage1_only {
        // train the first stage alone against the ground truth
        let rest = match model.config.variant.order {
            StageOrder::CoarseFirst | StageOrder::Parallel => model.coarse.forward(&x),
            StageOrder::CorrectFirst => model.correction.forward(&x),
        };
        let loss = l1_loss(&rest, &y)?;
        let g = l1_loss_grad(&rest, &y);
        match model.config.variant.order {
            StageOrder::CoarseFirst | StageOrder::Parallel => {
                model.coarse.backward(&g);
            }
            StageOrder::CorrectFirst => {
                model.correction.backward(&g);
            }
        }
        loss
    } else {
        let (rest, out) = model.forward_train(&x);
        let mut loss = l1_loss(&out, &y)?;
        let g_out = l1_loss_grad(&out, &y);
        let g_rest = if matches!(cfg.mode, TrainMode::JointWithStage1Supervision) {
            loss += cfg.stage1_loss_weight * l1_loss(&rest, &y)?;
            let w = S::from_f64(cfg.stage1_loss_weight);
            Some(l1_loss_grad(&rest, &y).mapv(|v| v * w))
        } else {
            None
        };
        model.backward_train(&g_out, g_rest.as_ref());
        loss
    };

    if !loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {loss} at iteration {iter}"
        )));
    }
    opt.clip_gradients(|f| model.visit_params("", f));
    opt.step(lr, |f| model.visit_params("", f));
    if cfg.ema_enabled {
        ema.update(|f| model.visit_params("", f));
    }
    Ok(LogRecord {
        iter,
        loss,
        lr,
        patch: stage.patch_size,
        batch: stage.batch_size,
    })
}

/// Runs training from scratch, or resumes when `resume_from` names an
/// existing training checkpoint. Checkpoints and the metrics log land in
/// `out_dir` when given.
pub fn train<S: Scalar>(
    model: &mut DemosaicFormer<S>,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train_gts.is_empty() {
        return Err(Error::config("no training images"));
    }
    if cfg.augment_enabled
        && matches!(cfg.augment.defect_source, crate::data::DefectSource::Harvested)
        && data.library.is_empty()
        && cfg.augment.defect_overlay_prob > 0.0
    {
        return Err(Error::config(
            "defect_source = harvested but the defect library is empty",
        ));
    }
    let config_snapshot = format!(
        "variant={} mode={} seed={}",
        model.config.variant.name(),
        cfg.mode.name(),
        cfg.seed
    );
    let mut state = match resume_from {
        Some(path) => restore_state(&Checkpoint::load(path)?, model, cfg)?,
        None => TrainState {
            opt: Adam::new(cfg.optim.clone()),
            ema: EmaState::new(cfg.ema_decay),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            start_iter: 0,
            best_psnr: f64::NEG_INFINITY,
        },
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    }
    let total = cfg.schedule.total_iterations();
    let mut outcome = TrainOutcome::default();
    let mut log_lines = String::new();
    for iter in state.start_iter..total {
        let record = match train_step(
            model,
            data,
            cfg,
            iter,
            total,
            &mut state.opt,
            &mut state.ema,
            &mut state.rng,
            &mut outcome.augment_calls,
        ) {
            Ok(r) => r,
            Err(e) => {
                // abort with a diagnostics snapshot so the run is inspectable
                if let Some(dir) = out_dir {
                    let view = TrainStateView {
                        opt: &state.opt,
                        ema: &state.ema,
                        iter,
                        rng_word_pos: state.rng.get_word_pos(),
                        seed: cfg.seed,
                        best_psnr: state.best_psnr,
                        config_snapshot: config_snapshot.clone(),
                    };
                    let _ = save_training_checkpoint(&dir.join("abort.ckpt"), model, &view);
                }
                return Err(e);
            }
        };
        log_lines.push_str(&record.to_string());
        log_lines.push('\n');
        outcome.log.push(record);
        let done = iter + 1;

        let validate_now = cfg.val_interval > 0 && (done % cfg.val_interval == 0 || done == total);
        if validate_now && !data.val.is_empty() {
            let score = validate_with_ema(model, &state.ema, cfg.ema_enabled, &data.val)?;
            if score > state.best_psnr {
                state.best_psnr = score;
                if let Some(dir) = out_dir {
                    let view = TrainStateView {
                        opt: &state.opt,
                        ema: &state.ema,
                        iter: done,
                        rng_word_pos: state.rng.get_word_pos(),
                        seed: cfg.seed,
                        best_psnr: state.best_psnr,
                        config_snapshot: config_snapshot.clone(),
                    };
                    let path = dir.join("best.ckpt");
                    save_training_checkpoint(&path, model, &view)?;
                    if !outcome.checkpoints.contains(&path) {
                        outcome.checkpoints.push(path);
                    }
                }
            }
        }

        let periodic = cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0;
        if (periodic || done == total) && out_dir.is_some() {
            let dir = out_dir.unwrap();
            let view = TrainStateView {
                opt: &state.opt,
                ema: &state.ema,
                iter: done,
                rng_word_pos: state.rng.get_word_pos(),
                seed: cfg.seed,
                best_psnr: state.best_psnr,
                config_snapshot: config_snapshot.clone(),
            };
            let path = dir.join("last.ckpt");
            save_training_checkpoint(&path, model, &view)?;
            if !outcome.checkpoints.contains(&path) {
                outcome.checkpoints.push(path);
            }
            if periodic && done != total {
                let snap = dir.join(format!("iter_{done:06}.ckpt"));
                save_training_checkpoint(&snap, model, &view)?;
                outcome.checkpoints.push(snap);
            }
        }
    }
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("metrics.log"), &log_lines)
            .map_err(|e| Error::io(format!("write metrics log in {}", dir.display()), e))?;
    }
    outcome.best_psnr = state.best_psnr;
    outcome.final_iter = total;
    Ok(outcome)
}

/// Fine-tune stage: loads the initial weights strictly, then trains with the
/// single-stage schedule and augmentation disabled.
pub fn finetune<S: Scalar>(
    model: &mut DemosaicFormer<S>,
    data: &Dataset,
    cfg: &TrainConfig,
    init: &Path,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.augment_enabled {
        return Err(Error::config("finetune runs with augmentation disabled"));
    }
    load_model_weights(init, model)?;
    train(model, data, cfg, out_dir, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DemosaicFormerConfig, PipelineVariant};
    use crate::coarse::CoarseNetConfig;
    use crate::correction::CorrectionNetConfig;
    use crate::schedule::Stage;
    use ndarray::Array3;

    fn tiny_model() -> DemosaicFormer<f32> {
        let config = DemosaicFormerConfig {
            coarse: CoarseNetConfig {
                channels: 4,
                n_rrg: 1,
                n_dab: 1,
                ca_reduction: 2,
                sa_kernel: 3,
            },
            correction: CorrectionNetConfig {
                base_dim: 4,
                blocks_per_level: [1, 1, 1, 1],
                refinement_blocks: 1,
                heads_per_level: [1, 2, 2, 4],
                ffn_expansion: 2.0,
                fusion_mode: crate::correction::FusionMode::Msgm,
                sequential_gates: false,
            },
            variant: PipelineVariant::default(),
            pad_multiple: 8,
        };
        let mut model = DemosaicFormer::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        model.randomize(&mut rng);
        model
    }

    fn tiny_dataset(n_train: usize, n_val: usize, size: usize) -> Dataset {
        let pattern = PatternSpec::default_hybridevs();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gen = |rng: &mut ChaCha8Rng| {
            RgbImage::new(Array3::from_shape_fn((3, size, size), |_| rng.gen::<f32>())).unwrap()
        };
        let train_gts: Vec<RgbImage> = (0..n_train).map(|_| gen(&mut rng)).collect();
        let val: Vec<SamplePair> = (0..n_val)
            .map(|_| {
                let gt = gen(&mut rng);
                SamplePair::new(mosaic(&gt, &pattern).unwrap(), gt).unwrap()
            })
            .collect();
        Dataset {
            train_gts,
            library: DefectLibrary::default(),
            val,
            pattern,
        }
    }

    fn tiny_cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            schedule: ProgressiveSchedule {
                stages: vec![Stage {
                    patch_size: 16,
                    batch_size: 2,
                    iterations: iters,
                }],
                base_lr: 1e-3,
                final_lr: 1e-5,
                flat_first_stage: false,
            },
            val_interval: 0,
            checkpoint_interval: 0,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn l1_loss_examples() {
        let a = Array4::from_shape_vec((1, 1, 2, 1), vec![0.2f64, 0.6]).unwrap();
        let b = Array4::from_shape_vec((1, 1, 2, 1), vec![0.0f64, 1.0]).unwrap();
        assert!((l1_loss(&a, &b).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let c = b.mapv(|v| v + 0.1);
        assert!((l1_loss(&c, &b).unwrap() - 0.1).abs() < 1e-12);
        // gradient: sign / N
        let g = l1_loss_grad(&a, &b);
        assert_eq!(g[[0, 0, 0, 0]], 0.5);
        assert_eq!(g[[0, 0, 1, 0]], -0.5);
    }

    #[test]
    fn smoke_run_log_shape_and_lr() {
        let mut model = tiny_model();
        let data = tiny_dataset(4, 0, 16);
        let cfg = tiny_cfg(10);
        let out = train(&mut model, &data, &cfg, None, None).unwrap();
        assert_eq!(out.log.len(), 10);
        for (i, rec) in out.log.iter().enumerate() {
            assert_eq!(rec.iter, i);
            assert_eq!(rec.patch, 16);
            assert_eq!(rec.batch, 2);
            assert!((rec.lr - cfg.schedule.lr_at(i)).abs() < 1e-15);
            assert!(rec.loss.is_finite());
        }
        assert!(out.augment_calls > 0);
    }

    #[test]
    fn mode_b_weight_zero_equals_mode_c() {
        let data = tiny_dataset(4, 0, 16);
        let run = |mode: TrainMode, weight: f64| -> Vec<f64> {
            let mut model = tiny_model();
            let cfg = TrainConfig {
                mode,
                stage1_loss_weight: weight,
                ..tiny_cfg(5)
            };
            train(&mut model, &data, &cfg, None, None)
                .unwrap()
                .log
                .iter()
                .map(|r| r.loss)
                .collect()
        };
        let b = run(TrainMode::JointWithStage1Supervision, 0.0);
        let c = run(TrainMode::JointDefault, 0.0);
        assert_eq!(b, c);
    }

    #[test]
    fn resume_determinism_exact() {
        let data = tiny_dataset(4, 0, 16);
        let dir = tempfile::tempdir().unwrap();

        // one uninterrupted 8-iteration run
        let mut straight = tiny_model();
        let cfg8 = tiny_cfg(8);
        train(&mut straight, &data, &cfg8, None, None).unwrap();

        // 4 iterations, checkpoint, then resume for the remaining 4
        let mut resumed = tiny_model();
        let cfg_half = TrainConfig {
            schedule: ProgressiveSchedule {
                stages: vec![Stage {
                    patch_size: 16,
                    batch_size: 2,
                    iterations: 8,
                }],
                base_lr: 1e-3,
                final_lr: 1e-5,
                flat_first_stage: false,
            },
            checkpoint_interval: 4,
            ..tiny_cfg(8)
        };
        // stop after 4 by running a truncated schedule with identical lr law
        let mut first_half = TrainConfig {
            checkpoint_interval: 4,
            ..cfg_half.clone()
        };
        first_half.schedule.stages[0].iterations = 8;
        // run the full 8 but capture the state at 4 via the periodic snapshot
        train(&mut resumed, &data, &first_half, Some(dir.path()), None).unwrap();
        let snap = dir.path().join("iter_000004.ckpt");
        assert!(snap.exists());
        let mut replay = tiny_model();
        train(&mut replay, &data, &cfg8, None, Some(&snap)).unwrap();

        // parameter-wise exact equality
        let mut diff_max = 0.0f32;
        let mut a_params: Vec<ArrayD<f32>> = Vec::new();
        straight.visit_params("", &mut |_, p: &mut Param<f32>| a_params.push(p.value.clone()));
        let mut idx = 0;
        replay.visit_params("", &mut |_, p: &mut Param<f32>| {
            for (x, y) in a_params[idx].iter().zip(p.value.iter()) {
                diff_max = diff_max.max((x - y).abs());
            }
            idx += 1;
        });
        assert_eq!(diff_max, 0.0, "resume drifted from the straight run");
    }

    #[test]
    fn finetune_disables_augmentation_and_loads_weights() {
        let data = tiny_dataset(4, 0, 16);
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model();
        let cfg = TrainConfig {
            checkpoint_interval: 3,
            ..tiny_cfg(3)
        };
        train(&mut model, &data, &cfg, Some(dir.path()), None).unwrap();
        let init = dir.path().join("last.ckpt");

        let mut ft_model = tiny_model();
        let ft_cfg = TrainConfig {
            schedule: ProgressiveSchedule {
                stages: vec![Stage {
                    patch_size: 16,
                    batch_size: 2,
                    iterations: 4,
                }],
                base_lr: 1e-4,
                final_lr: 1e-7,
                flat_first_stage: false,
            },
            augment_enabled: false,
            val_interval: 0,
            checkpoint_interval: 0,
            ..TrainConfig::finetune()
        };
        let out = finetune(&mut ft_model, &data, &ft_cfg, &init, None).unwrap();
        assert_eq!(out.augment_calls, 0);
        assert_eq!(out.log.len(), 4);
        assert!((out.log[0].lr - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn finetune_rejects_mismatched_checkpoint() {
        let data = tiny_dataset(2, 0, 16);
        let dir = tempfile::tempdir().unwrap();
        // checkpoint from a model with different shapes
        let mut other = {
            let mut config = DemosaicFormerConfig {
                coarse: CoarseNetConfig {
                    channels: 8,
                    n_rrg: 1,
                    n_dab: 1,
                    ca_reduction: 2,
                    sa_kernel: 3,
                },
                ..crate::model::DemosaicFormerConfig::default()
            };
            config.correction = CorrectionNetConfig {
                base_dim: 4,
                blocks_per_level: [1, 1, 1, 1],
                refinement_blocks: 1,
                heads_per_level: [1, 2, 2, 4],
                ffn_expansion: 2.0,
                fusion_mode: crate::correction::FusionMode::Msgm,
                sequential_gates: false,
            };
            DemosaicFormer::<f32>::new(config).unwrap()
        };
        let opt = Adam::<f32>::new(OptimConfig::default());
        let ema = EmaState::<f32>::new(0.999);
        let view = TrainStateView {
            opt: &opt,
            ema: &ema,
            iter: 0,
            rng_word_pos: 0,
            seed: 0,
            best_psnr: f64::NEG_INFINITY,
            config_snapshot: String::new(),
        };
        let path = dir.path().join("other.ckpt");
        save_training_checkpoint(&path, &mut other, &view).unwrap();

        let mut model = tiny_model();
        let cfg = TrainConfig {
            augment_enabled: false,
            ..tiny_cfg(1)
        };
        let err = finetune(&mut model, &data, &cfg, &path, None);
        assert!(err.is_err());
    }

    #[test]
    fn validation_tracks_best_checkpoint() {
        let data = tiny_dataset(4, 2, 16);
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model();
        let cfg = TrainConfig {
            val_interval: 2,
            checkpoint_interval: 0,
            ..tiny_cfg(4)
        };
        let out = train(&mut model, &data, &cfg, Some(dir.path()), None).unwrap();
        assert!(out.best_psnr.is_finite());
        assert!(dir.path().join("best.ckpt").exists());
    }
}

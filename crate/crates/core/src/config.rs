//! Plain-text run configuration: `[section]` headers, `key = value` lines,
//! `include = other.conf` composition, and dotted `key.path=value`
//! overrides. Every key must be consumed by a reader; leftovers are hard
//! errors so typos never pass silently.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::coarse::CoarseNetConfig;
use crate::correction::{CorrectionNetConfig, FusionMode};
use crate::data::{AugmentConfig, DefectSource};
use crate::error::{Error, Result};
use crate::model::{DemosaicFormerConfig, PipelineVariant, StageOrder};
use crate::optim::OptimConfig;
use crate::pattern::PatternSpec;
use crate::schedule::{ProgressiveSchedule, Stage};
use crate::train::{TrainConfig, TrainMode};

/// Flat dotted-key view of a parsed configuration.
#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    consumed: RefCell<BTreeSet<String>>,
}

impl Config {
    pub fn empty() -> Self {
        Config::default()
    }

    pub fn from_str_content(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.merge_text(text, base_dir, "<inline>")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read config {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        self.merge_text(&text, &base, &path.display().to_string())
    }

    fn merge_text(&mut self, text: &str, base_dir: &Path, source: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{source}:{}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if key == "include" {
                let inc: PathBuf = if Path::new(value).is_absolute() {
                    PathBuf::from(value)
                } else {
                    base_dir.join(value)
                };
                self.merge_file(&inc)?;
                continue;
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            self.values.insert(full, value.to_string());
        }
        Ok(())
    }

    /// Applies repeatable `--set key.path=value` overrides after file parsing.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::config(format!(
                    "override '{item}' must have the form key.path=value"
                )));
            };
            self.values
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if v.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn get_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or_else(|| default.to_string())
    }

    pub fn require(&self, key: &str) -> Result<String> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("missing required config key '{key}'")))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| {
            Error::config(format!(
                "config key '{key}': cannot parse '{raw}' as {}",
                std::any::type_name::<T>()
            ))
        })
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            Some(raw) => self.parse_as(key, &raw),
            None => Ok(default),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key).as_deref() {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(other) => Err(Error::config(format!(
                "config key '{key}': expected a boolean, got '{other}'"
            ))),
        }
    }

    /// Fails if any key was never read — unknown keys are hard errors.
    pub fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }

    pub fn snapshot(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// `[pattern]` section: optional tile string and event coordinates.
pub fn pattern_spec(cfg: &Config) -> Result<PatternSpec> {
    let tile = cfg.get("pattern.tile");
    let coords = cfg.get("pattern.event_coords");
    let from_coords = |coord_str: &str| -> Result<PatternSpec> {
        let mut parsed = Vec::new();
        for part in coord_str.split(';') {
            let Some((r, c)) = part.split_once(',') else {
                return Err(Error::config(format!(
                    "pattern.event_coords: expected 'r,c;r,c', got '{coord_str}'"
                )));
            };
            let r: usize = cfg.parse_as("pattern.event_coords", r.trim())?;
            let c: usize = cfg.parse_as("pattern.event_coords", c.trim())?;
            parsed.push((r, c));
        }
        if parsed.len() != 2 {
            return Err(Error::config("pattern.event_coords needs exactly 2 entries"));
        }
        PatternSpec::new([parsed[0], parsed[1]])
    };
    match (tile, coords) {
        (None, None) => Ok(PatternSpec::default_hybridevs()),
        (None, Some(coords)) => from_coords(&coords),
        (Some(tile), None) => PatternSpec::from_tile_string(&tile),
        (Some(tile), Some(coords)) => {
            let spec = PatternSpec::from_tile_string(&tile)?;
            let wanted = from_coords(&coords)?;
            if spec != wanted {
                return Err(Error::config(
                    "pattern.tile and pattern.event_coords disagree on event positions",
                ));
            }
            Ok(spec)
        }
    }
}

/// `[model]` section.
pub fn model_config(cfg: &Config) -> Result<DemosaicFormerConfig> {
    let defaults = DemosaicFormerConfig::default();
    let order = StageOrder::parse(&cfg.get_or("model.order", "coarse_first"))?;
    let fusion = FusionMode::parse(&cfg.get_or("model.fusion", "msgm"))?;
    let coarse = CoarseNetConfig {
        channels: cfg.get_parsed("model.coarse.channels", defaults.coarse.channels)?,
        n_rrg: cfg.get_parsed("model.coarse.n_rrg", defaults.coarse.n_rrg)?,
        n_dab: cfg.get_parsed("model.coarse.n_dab", defaults.coarse.n_dab)?,
        ca_reduction: cfg.get_parsed("model.coarse.ca_reduction", defaults.coarse.ca_reduction)?,
        sa_kernel: cfg.get_parsed("model.coarse.sa_kernel", defaults.coarse.sa_kernel)?,
    };
    let d = defaults.correction;
    let blocks = parse_quad(cfg, "model.correction.blocks", d.blocks_per_level)?;
    let heads = parse_quad(cfg, "model.correction.heads", d.heads_per_level)?;
    let correction = CorrectionNetConfig {
        base_dim: cfg.get_parsed("model.correction.base_dim", d.base_dim)?,
        blocks_per_level: blocks,
        refinement_blocks: cfg.get_parsed("model.correction.refinement_blocks", d.refinement_blocks)?,
        heads_per_level: heads,
        ffn_expansion: cfg.get_parsed("model.correction.ffn_expansion", d.ffn_expansion)?,
        fusion_mode: fusion,
        sequential_gates: cfg.get_bool("model.correction.sequential_gates", d.sequential_gates)?,
    };
    let config = DemosaicFormerConfig {
        coarse,
        correction,
        variant: PipelineVariant { order, fusion },
        pad_multiple: cfg.get_parsed("model.pad_multiple", defaults.pad_multiple)?,
    };
    config.validate()?;
    Ok(config)
}

fn parse_quad(cfg: &Config, key: &str, default: [usize; 4]) -> Result<[usize; 4]> {
    match cfg.get(key) {
        None => Ok(default),
        Some(raw) => {
            let parts: Vec<&str> = raw.split(',').map(|s| s.trim()).collect();
            if parts.len() != 4 {
                return Err(Error::config(format!(
                    "config key '{key}': expected 4 comma-separated values, got '{raw}'"
                )));
            }
            let mut out = [0usize; 4];
            for (dst, part) in out.iter_mut().zip(parts) {
                *dst = cfg.parse_as(key, part)?;
            }
            Ok(out)
        }
    }
}

/// `[schedule]` section; stages are `patch:batch:iterations` triples
/// separated by commas.
pub fn schedule_config(cfg: &Config, default: ProgressiveSchedule) -> Result<ProgressiveSchedule> {
    let stages = match cfg.get("schedule.stages") {
        None => default.stages,
        Some(raw) => {
            let mut stages = Vec::new();
            for part in raw.split(',') {
                let fields: Vec<&str> = part.trim().split(':').collect();
                if fields.len() != 3 {
                    return Err(Error::config(format!(
                        "schedule.stages: expected patch:batch:iterations, got '{part}'"
                    )));
                }
                stages.push(Stage {
                    patch_size: cfg.parse_as("schedule.stages", fields[0])?,
                    batch_size: cfg.parse_as("schedule.stages", fields[1])?,
                    iterations: cfg.parse_as("schedule.stages", fields[2])?,
                });
            }
            stages
        }
    };
    let sched = ProgressiveSchedule {
        stages,
        base_lr: cfg.get_parsed("schedule.base_lr", default.base_lr)?,
        final_lr: cfg.get_parsed("schedule.final_lr", default.final_lr)?,
        flat_first_stage: cfg.get_bool("schedule.flat_first_stage", default.flat_first_stage)?,
    };
    sched.validate()?;
    Ok(sched)
}

/// `[augment]` section.
pub fn augment_config(cfg: &Config, seed: u64) -> Result<AugmentConfig> {
    let d = AugmentConfig::default();
    let augment = AugmentConfig {
        flip_h_prob: cfg.get_parsed("augment.flip_h_prob", d.flip_h_prob)?,
        flip_v_prob: cfg.get_parsed("augment.flip_v_prob", d.flip_v_prob)?,
        rot90_prob: cfg.get_parsed("augment.rot90_prob", d.rot90_prob)?,
        defect_overlay_prob: cfg.get_parsed("augment.defect_overlay_prob", d.defect_overlay_prob)?,
        defect_source: DefectSource::parse(&cfg.get_or("augment.defect_source", "synthetic"))?,
        synthetic_defect_density: cfg
            .get_parsed("augment.defect_density", d.synthetic_defect_density)?,
        rng_seed: seed,
    };
    augment.validate()?;
    Ok(augment)
}

/// `[train]` plus `[schedule]`, `[augment]`, and `[optim]` sections.
pub fn train_config(cfg: &Config, finetune: bool, seed: u64) -> Result<TrainConfig> {
    let d = if finetune {
        TrainConfig::finetune()
    } else {
        TrainConfig::default()
    };
    let optim = OptimConfig {
        beta1: cfg.get_parsed("optim.beta1", d.optim.beta1)?,
        beta2: cfg.get_parsed("optim.beta2", d.optim.beta2)?,
        eps: cfg.get_parsed("optim.eps", d.optim.eps)?,
        weight_decay: cfg.get_parsed("optim.weight_decay", d.optim.weight_decay)?,
        grad_clip: match cfg.get_or("optim.grad_clip", "1.0").as_str() {
            "none" | "off" => None,
            raw => Some(cfg.parse_as("optim.grad_clip", raw)?),
        },
    };
    let config = TrainConfig {
        mode: TrainMode::parse(&cfg.get_or("train.mode", "c"))?,
        stage1_loss_weight: cfg.get_parsed("train.stage1_loss_weight", d.stage1_loss_weight)?,
        mode_a_stage1_fraction: cfg
            .get_parsed("train.mode_a_stage1_fraction", d.mode_a_stage1_fraction)?,
        schedule: schedule_config(cfg, d.schedule)?,
        optim,
        ema_enabled: cfg.get_bool("train.ema", d.ema_enabled)?,
        ema_decay: cfg.get_parsed("train.ema_decay", d.ema_decay)?,
        seed,
        augment_enabled: if finetune {
            false
        } else {
            cfg.get_bool("train.augment", d.augment_enabled)?
        },
        augment: augment_config(cfg, seed)?,
        val_interval: cfg.get_parsed("train.val_interval", d.val_interval)?,
        checkpoint_interval: cfg.get_parsed("train.checkpoint_interval", d.checkpoint_interval)?,
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_overrides() {
        let text = "\
# top comment
seed = 7
[model]
order = parallel
fusion = simple_concat
[schedule]
base_lr = 1e-3
";
        let mut cfg = Config::from_str_content(text, Path::new(".")).unwrap();
        cfg.apply_overrides(&["model.order=coarse_first".to_string()])
            .unwrap();
        assert_eq!(cfg.get("seed").as_deref(), Some("7"));
        let model = model_config(&cfg).unwrap();
        assert_eq!(model.variant.order, StageOrder::CoarseFirst);
        assert_eq!(model.variant.fusion, FusionMode::SimpleConcat);
        let sched = schedule_config(&cfg, ProgressiveSchedule::default()).unwrap();
        assert_eq!(sched.base_lr, 1e-3);
        cfg.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let text = "[model]\norderr = parallel\n";
        let cfg = Config::from_str_content(text, Path::new(".")).unwrap();
        let _ = model_config(&cfg).unwrap();
        let err = cfg.finish().unwrap_err();
        assert!(err.to_string().contains("model.orderr"), "{err}");
    }

    #[test]
    fn include_composes_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.conf"), "[model]\norder = parallel\n").unwrap();
        std::fs::write(
            dir.path().join("run.conf"),
            "include = base.conf\n[model]\nfusion = single_gate\n",
        )
        .unwrap();
        let cfg = Config::load(&dir.path().join("run.conf")).unwrap();
        let model = model_config(&cfg).unwrap();
        assert_eq!(model.variant.order, StageOrder::Parallel);
        assert_eq!(model.variant.fusion, FusionMode::SingleGate);
    }

    #[test]
    fn custom_schedule_and_stage_parsing() {
        let text = "[schedule]\nstages = 16:2:10, 32:1:5\nbase_lr = 1e-3\nfinal_lr = 1e-5\nflat_first_stage = false\n";
        let cfg = Config::from_str_content(text, Path::new(".")).unwrap();
        let sched = schedule_config(&cfg, ProgressiveSchedule::default()).unwrap();
        assert_eq!(sched.stages.len(), 2);
        assert_eq!(sched.stages[1].patch_size, 32);
        assert_eq!(sched.total_iterations(), 15);
        cfg.finish().unwrap();
    }

    #[test]
    fn default_train_config_round_trips() {
        let cfg = Config::empty();
        let tc = train_config(&cfg, false, 3).unwrap();
        assert_eq!(tc.seed, 3);
        assert_eq!(tc.mode, TrainMode::JointDefault);
        assert_eq!(tc.schedule.total_iterations(), 142_000);
        let ft = train_config(&cfg, true, 3).unwrap();
        assert!(!ft.augment_enabled);
        assert_eq!(ft.schedule.total_iterations(), 20_000);
        assert_eq!(ft.schedule.base_lr, 1e-4);
    }

    #[test]
    fn pattern_section_parses_coords() {
        let text = "[pattern]\nevent_coords = 0,0;3,3\n";
        let cfg = Config::from_str_content(text, Path::new(".")).unwrap();
        let p = pattern_spec(&cfg).unwrap();
        assert_eq!(p.event_coords(), [(0, 0), (3, 3)]);
        cfg.finish().unwrap();
        assert_eq!(
            pattern_spec(&Config::empty()).unwrap(),
            PatternSpec::default_hybridevs()
        );
    }

    #[test]
    fn malformed_lines_and_bad_values() {
        assert!(Config::from_str_content("just words\n", Path::new(".")).is_err());
        let cfg = Config::from_str_content("[model]\npad_multiple = seven\n", Path::new(".")).unwrap();
        assert!(model_config(&cfg).is_err());
    }
}

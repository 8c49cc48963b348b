//! Experiment configuration: a line-oriented `key = value` format with
//! `[section]` headers.
//!
//! Sections are `[model]`, `[device]`, `[trainer]`, `[task]`, `[run]`, and
//! the optional `[sweep]`. Lines starting with `#` are comments. Unknown
//! sections or keys are errors that list what would have been accepted, so a
//! typo never silently runs the default. `serialize` emits every key in a
//! canonical order and `parse` inverts it exactly.

use crate::data::TaskFamily;
use crate::device::DeviceKind;
use crate::error::{AtlsError, Result};
use crate::tile::{TileConfig, UpdateMode, DEFAULT_BIT_LENGTH};
use crate::trainer::{TrainConfig, TrainerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Attention,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden widths for the MLP; empty means a bare softmax head.
    pub hidden: Vec<usize>,
    /// Attention geometry: the input is split into `patches` tokens of
    /// `patch_dim` features each.
    pub patches: usize,
    pub patch_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Mlp,
            hidden: vec![32, 16],
            patches: 4,
            patch_dim: 2,
            embed_dim: 8,
            heads: 2,
            mlp_hidden: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    DigitalTl,
    AnalogTl,
    DigitalScratch,
    AnalogScratch,
}

impl PipelineMode {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineMode::DigitalTl => "digital_tl",
            PipelineMode::AnalogTl => "analog_tl",
            PipelineMode::DigitalScratch => "digital_scratch",
            PipelineMode::AnalogScratch => "analog_scratch",
        }
    }

    pub fn is_analog(&self) -> bool {
        matches!(self, PipelineMode::AnalogTl | PipelineMode::AnalogScratch)
    }

    pub fn uses_pretrained_body(&self) -> bool {
        matches!(self, PipelineMode::DigitalTl | PipelineMode::AnalogTl)
    }
}

impl std::str::FromStr for PipelineMode {
    type Err = AtlsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "digital_tl" => Ok(PipelineMode::DigitalTl),
            "analog_tl" => Ok(PipelineMode::AnalogTl),
            "digital_scratch" => Ok(PipelineMode::DigitalScratch),
            "analog_scratch" => Ok(PipelineMode::AnalogScratch),
            other => Err(AtlsError::invalid(format!(
                "unknown mode '{other}'; expected digital_tl, analog_tl, digital_scratch, or analog_scratch"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainerSettings {
    pub kind: TrainerKind,
    pub train: TrainConfig,
    /// Programming-noise scale relative to each layer's weight std, applied
    /// once when the model is converted to analog.
    pub tau: f64,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        TrainerSettings {
            kind: TrainerKind::Cttv2,
            train: TrainConfig::default(),
            tau: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    /// Independent repeats per sweep point.
    pub repeats: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    /// Pipeline variants a sweep runs at every point.
    pub modes: Vec<PipelineMode>,
    /// Pretrained checkpoint to fine-tune from; transfer modes pretrain on
    /// the fly when this is unset.
    pub checkpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1234,
            repeats: 5,
            epochs_pretrain: 30,
            epochs_finetune: 20,
            modes: vec![PipelineMode::AnalogTl, PipelineMode::AnalogScratch],
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    /// Dotted parameter path, e.g. `device.spv_percent`.
    pub key: String,
    pub values: Vec<f64>,
}

/// Fine-tune on external CSV data instead of the synthetic family. The
/// labels in `task.finetune_subset` act as the keep-filter on both files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvTask {
    pub train: String,
    pub test: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub tile: TileConfig,
    pub trainer: TrainerSettings,
    pub task: TaskFamily,
    pub csv: Option<CsvTask>,
    pub run: RunConfig,
    pub sweep: Option<SweepConfig>,
}

/// Parameter paths `[sweep] key` accepts; all continuous.
pub const SWEEP_KEYS: &[&str] = &[
    "device.dw_min_up",
    "device.dw_min_down",
    "device.dw_min_dtod",
    "device.dw_min_c2c",
    "device.bounds_dtod",
    "device.sps_percent",
    "device.spv_percent",
    "device.w_max",
    "device.w_min",
    "device.out_noise",
    "device.read_noise",
    "trainer.lr",
    "trainer.tau",
    "trainer.transfer_every",
    "trainer.autogranularity",
    "trainer.granularity",
    "trainer.auto_momentum",
    "trainer.in_chop_prob",
    "trainer.device_momentum",
    "trainer.ref_offset",
    "trainer.ref_program_error",
    "task.noise_std",
    "task.jitter_std",
];

const MODEL_KEYS: &[&str] = &[
    "kind", "hidden", "patches", "patch_dim", "embed_dim", "heads", "mlp_hidden",
];
const DEVICE_KEYS: &[&str] = &[
    "kind",
    "dw_min_up",
    "dw_min_down",
    "dw_min_dtod",
    "dw_min_c2c",
    "bounds_dtod",
    "sps_percent",
    "spv_percent",
    "w_max",
    "w_min",
    "out_noise",
    "read_noise",
    "update",
    "bit_length",
];
const TRAINER_KEYS: &[&str] = &[
    "kind",
    "lr",
    "batch_size",
    "transfer_every",
    "units_in_mbatch",
    "autogranularity",
    "granularity",
    "auto_scale",
    "auto_momentum",
    "forget_buffer",
    "in_chop_prob",
    "device_momentum",
    "ref_offset",
    "ref_program_error",
    "tau",
];
const TASK_KEYS: &[&str] = &[
    "input_dim",
    "pretrain_classes",
    "finetune_subset",
    "samples_per_class_train",
    "samples_per_class_test",
    "noise_std",
    "jitter_std",
    "teacher_seed",
    "teacher_hidden",
    "train_csv",
    "test_csv",
];
const RUN_KEYS: &[&str] = &[
    "seed",
    "repeats",
    "epochs_pretrain",
    "epochs_finetune",
    "modes",
    "checkpoint",
];
const SWEEP_SECTION_KEYS: &[&str] = &["key", "values"];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut sweep_key: Option<String> = None;
        let mut sweep_values: Option<Vec<f64>> = None;
        let mut csv_train: Option<String> = None;
        let mut csv_test: Option<String> = None;
        let mut section: Option<&str> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = Some(match name {
                    "model" => "model",
                    "device" => "device",
                    "trainer" => "trainer",
                    "task" => "task",
                    "run" => "run",
                    "sweep" => "sweep",
                    other => {
                        return Err(AtlsError::invalid(format!(
                            "line {line_no}: unknown section [{other}]; expected \
                             [model], [device], [trainer], [task], [run], or [sweep]"
                        )))
                    }
                });
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                AtlsError::invalid(format!("line {line_no}: expected 'key = value', got '{line}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            let section = section.ok_or_else(|| {
                AtlsError::invalid(format!(
                    "line {line_no}: key '{key}' appears before any [section]"
                ))
            })?;
            match section {
                "model" => apply_model(&mut cfg.model, key, value, line_no)?,
                "device" => apply_device(&mut cfg.tile, key, value, line_no)?,
                "trainer" => apply_trainer(&mut cfg.trainer, key, value, line_no)?,
                "task" => match key {
                    "train_csv" => csv_train = Some(value.to_string()),
                    "test_csv" => csv_test = Some(value.to_string()),
                    _ => apply_task(&mut cfg.task, key, value, line_no)?,
                },
                "run" => apply_run(&mut cfg.run, key, value, line_no)?,
                "sweep" => match key {
                    "key" => sweep_key = Some(value.to_string()),
                    "values" => sweep_values = Some(parse_list(key, value, line_no)?),
                    other => return Err(unknown_key(other, "sweep", SWEEP_SECTION_KEYS, line_no)),
                },
                _ => unreachable!(),
            }
        }
        cfg.csv = match (csv_train, csv_test) {
            (Some(train), Some(test)) => Some(CsvTask { train, test }),
            (None, None) => None,
            _ => {
                return Err(AtlsError::invalid(
                    "[task] needs both train_csv and test_csv or neither",
                ))
            }
        };
        cfg.sweep = match (sweep_key, sweep_values) {
            (Some(key), Some(values)) => Some(SweepConfig { key, values }),
            (None, None) => None,
            (Some(_), None) => {
                return Err(AtlsError::invalid("[sweep] has a key but no values"))
            }
            (None, Some(_)) => {
                return Err(AtlsError::invalid("[sweep] has values but no key"))
            }
        };
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        s.push_str("[model]\n");
        s.push_str(&format!(
            "kind = {}\n",
            match m.kind {
                ModelKind::Mlp => "mlp",
                ModelKind::Attention => "attention",
            }
        ));
        s.push_str(&format!("hidden = {}\n", join_usize(&m.hidden)));
        s.push_str(&format!("patches = {}\n", m.patches));
        s.push_str(&format!("patch_dim = {}\n", m.patch_dim));
        s.push_str(&format!("embed_dim = {}\n", m.embed_dim));
        s.push_str(&format!("heads = {}\n", m.heads));
        s.push_str(&format!("mlp_hidden = {}\n", m.mlp_hidden));

        let d = &self.tile;
        s.push_str("\n[device]\n");
        s.push_str(&format!(
            "kind = {}\n",
            match d.device.kind {
                DeviceKind::SoftBounds => "soft_bounds",
                DeviceKind::IdealLinear => "ideal",
            }
        ));
        s.push_str(&format!("dw_min_up = {}\n", d.device.dw_min_up));
        s.push_str(&format!("dw_min_down = {}\n", d.device.dw_min_down));
        s.push_str(&format!("dw_min_dtod = {}\n", d.device.dw_min_dtod));
        s.push_str(&format!("dw_min_c2c = {}\n", d.device.dw_min_c2c));
        s.push_str(&format!("bounds_dtod = {}\n", d.device.bounds_dtod));
        s.push_str(&format!("sps_percent = {}\n", d.device.sps_percent));
        s.push_str(&format!("spv_percent = {}\n", d.device.spv_percent));
        s.push_str(&format!("w_max = {}\n", d.device.w_max_mean));
        s.push_str(&format!("w_min = {}\n", d.device.w_min_mean));
        s.push_str(&format!("out_noise = {}\n", d.out_noise_std));
        s.push_str(&format!("read_noise = {}\n", d.read_noise_std));
        let (update, bl) = match d.update_mode {
            UpdateMode::StochasticPulses { bit_length } => ("stochastic", bit_length),
            UpdateMode::ExpectedUpdate => ("expected", DEFAULT_BIT_LENGTH),
        };
        s.push_str(&format!("update = {update}\n"));
        s.push_str(&format!("bit_length = {bl}\n"));

        let t = &self.trainer;
        s.push_str("\n[trainer]\n");
        s.push_str(&format!("kind = {}\n", t.kind.name()));
        s.push_str(&format!("lr = {}\n", t.train.lr));
        s.push_str(&format!("batch_size = {}\n", t.train.batch_size));
        s.push_str(&format!("transfer_every = {}\n", t.train.transfer_every));
        s.push_str(&format!("units_in_mbatch = {}\n", t.train.units_in_mbatch));
        s.push_str(&format!("autogranularity = {}\n", t.train.autogranularity));
        if let Some(g) = t.train.granularity {
            s.push_str(&format!("granularity = {g}\n"));
        }
        s.push_str(&format!("auto_scale = {}\n", t.train.auto_scale));
        s.push_str(&format!("auto_momentum = {}\n", t.train.auto_momentum));
        s.push_str(&format!("forget_buffer = {}\n", t.train.forget_buffer));
        s.push_str(&format!("in_chop_prob = {}\n", t.train.in_chop_prob));
        s.push_str(&format!("device_momentum = {}\n", t.train.device_momentum));
        s.push_str(&format!("ref_offset = {}\n", t.train.ref_offset));
        s.push_str(&format!("ref_program_error = {}\n", t.train.ref_program_error));
        s.push_str(&format!("tau = {}\n", t.tau));

        let k = &self.task;
        s.push_str("\n[task]\n");
        s.push_str(&format!("input_dim = {}\n", k.input_dim));
        s.push_str(&format!("pretrain_classes = {}\n", k.pretrain_classes));
        s.push_str(&format!("finetune_subset = {}\n", join_usize(&k.finetune_subset)));
        s.push_str(&format!("samples_per_class_train = {}\n", k.samples_per_class_train));
        s.push_str(&format!("samples_per_class_test = {}\n", k.samples_per_class_test));
        s.push_str(&format!("noise_std = {}\n", k.noise_std));
        s.push_str(&format!("jitter_std = {}\n", k.jitter_std));
        s.push_str(&format!("teacher_seed = {}\n", k.teacher_seed));
        s.push_str(&format!("teacher_hidden = {}\n", k.teacher_hidden));
        if let Some(csv) = &self.csv {
            s.push_str(&format!("train_csv = {}\n", csv.train));
            s.push_str(&format!("test_csv = {}\n", csv.test));
        }

        let r = &self.run;
        s.push_str("\n[run]\n");
        s.push_str(&format!("seed = {}\n", r.seed));
        s.push_str(&format!("repeats = {}\n", r.repeats));
        s.push_str(&format!("epochs_pretrain = {}\n", r.epochs_pretrain));
        s.push_str(&format!("epochs_finetune = {}\n", r.epochs_finetune));
        let modes: Vec<&str> = r.modes.iter().map(|m| m.name()).collect();
        s.push_str(&format!("modes = {}\n", modes.join(",")));
        if let Some(c) = &r.checkpoint {
            s.push_str(&format!("checkpoint = {c}\n"));
        }

        if let Some(sw) = &self.sweep {
            s.push_str("\n[sweep]\n");
            s.push_str(&format!("key = {}\n", sw.key));
            let vals: Vec<String> = sw.values.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("values = {}\n", vals.join(",")));
        }
        s
    }

    /// Set a dotted parameter path to a value; this is how sweep points are
    /// applied. Unknown paths list every accepted one.
    pub fn set_path(&mut self, key: &str, v: f64) -> Result<()> {
        match key {
            "device.dw_min_up" => self.tile.device.dw_min_up = v,
            "device.dw_min_down" => self.tile.device.dw_min_down = v,
            "device.dw_min_dtod" => self.tile.device.dw_min_dtod = v,
            "device.dw_min_c2c" => self.tile.device.dw_min_c2c = v,
            "device.bounds_dtod" => self.tile.device.bounds_dtod = v,
            "device.sps_percent" => self.tile.device.sps_percent = v,
            "device.spv_percent" => self.tile.device.spv_percent = v,
            "device.w_max" => self.tile.device.w_max_mean = v,
            "device.w_min" => self.tile.device.w_min_mean = v,
            "device.out_noise" => self.tile.out_noise_std = v,
            "device.read_noise" => self.tile.read_noise_std = v,
            "trainer.lr" => self.trainer.train.lr = v,
            "trainer.tau" => self.trainer.tau = v,
            "trainer.transfer_every" => self.trainer.train.transfer_every = v,
            "trainer.autogranularity" => self.trainer.train.autogranularity = v,
            "trainer.granularity" => self.trainer.train.granularity = Some(v),
            "trainer.auto_momentum" => self.trainer.train.auto_momentum = v,
            "trainer.in_chop_prob" => self.trainer.train.in_chop_prob = v,
            "trainer.device_momentum" => self.trainer.train.device_momentum = v,
            "trainer.ref_offset" => self.trainer.train.ref_offset = v,
            "trainer.ref_program_error" => self.trainer.train.ref_program_error = v,
            "task.noise_std" => self.task.noise_std = v,
            "task.jitter_std" => self.task.jitter_std = v,
            other => {
                return Err(AtlsError::invalid(format!(
                    "unknown sweep key '{other}'; valid keys: {}",
                    SWEEP_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.tile.validate()?;
        self.trainer.train.validate()?;
        self.task.validate()?;
        if !(self.trainer.tau.is_finite() && self.trainer.tau >= 0.0) {
            return Err(AtlsError::invalid(format!(
                "trainer.tau must be >= 0, got {}",
                self.trainer.tau
            )));
        }
        match self.model.kind {
            ModelKind::Mlp => {}
            ModelKind::Attention => {
                let m = &self.model;
                if m.patches * m.patch_dim != self.task.input_dim {
                    return Err(AtlsError::invalid(format!(
                        "model.patches * model.patch_dim = {} must equal task.input_dim = {}",
                        m.patches * m.patch_dim,
                        self.task.input_dim
                    )));
                }
                if m.embed_dim == 0 || m.heads == 0 || m.mlp_hidden == 0 || m.patches == 0 {
                    return Err(AtlsError::invalid("attention dims must all be >= 1"));
                }
                if m.embed_dim % m.heads != 0 {
                    return Err(AtlsError::invalid(format!(
                        "model.embed_dim = {} must be divisible by model.heads = {}",
                        m.embed_dim, m.heads
                    )));
                }
            }
        }
        if self.run.repeats == 0 {
            return Err(AtlsError::invalid("run.repeats must be >= 1"));
        }
        if self.run.epochs_pretrain == 0 || self.run.epochs_finetune == 0 {
            return Err(AtlsError::invalid("run epochs must be >= 1"));
        }
        if self.run.modes.is_empty() {
            return Err(AtlsError::invalid("run.modes must list at least one mode"));
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(AtlsError::invalid("[sweep] values must be non-empty"));
            }
            let mut probe = self.clone();
            probe.set_path(&sw.key, sw.values[0])?;
        }
        Ok(())
    }
}

fn unknown_key(key: &str, section: &str, valid: &[&str], line_no: usize) -> AtlsError {
    AtlsError::invalid(format!(
        "line {line_no}: unknown key '{key}' in [{section}]; valid keys: {}",
        valid.join(", ")
    ))
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str, line_no: usize) -> Result<T> {
    value.parse().map_err(|_| {
        AtlsError::invalid(format!(
            "line {line_no}: bad value '{value}' for {key}"
        ))
    })
}

fn parse_bool(key: &str, value: &str, line_no: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(AtlsError::invalid(format!(
            "line {line_no}: {key} must be true or false, got '{value}'"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, line_no: usize) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| {
            p.trim().parse().map_err(|_| {
                AtlsError::invalid(format!(
                    "line {line_no}: bad list entry '{p}' for {key}"
                ))
            })
        })
        .collect()
}

fn join_usize(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn apply_model(m: &mut ModelConfig, key: &str, value: &str, line_no: usize) -> Result<()> {
    match key {
        "kind" => {
            m.kind = match value {
                "mlp" => ModelKind::Mlp,
                "attention" => ModelKind::Attention,
                _ => {
                    return Err(AtlsError::invalid(format!(
                        "line {line_no}: model.kind must be mlp or attention, got '{value}'"
                    )))
                }
            }
        }
        "hidden" => m.hidden = parse_list(key, value, line_no)?,
        "patches" => m.patches = parse_scalar(key, value, line_no)?,
        "patch_dim" => m.patch_dim = parse_scalar(key, value, line_no)?,
        "embed_dim" => m.embed_dim = parse_scalar(key, value, line_no)?,
        "heads" => m.heads = parse_scalar(key, value, line_no)?,
        "mlp_hidden" => m.mlp_hidden = parse_scalar(key, value, line_no)?,
        other => return Err(unknown_key(other, "model", MODEL_KEYS, line_no)),
    }
    Ok(())
}

fn apply_device(t: &mut TileConfig, key: &str, value: &str, line_no: usize) -> Result<()> {
    match key {
        "kind" => {
            t.device.kind = match value {
                "soft_bounds" => DeviceKind::SoftBounds,
                "ideal" => DeviceKind::IdealLinear,
                _ => {
                    return Err(AtlsError::invalid(format!(
                        "line {line_no}: device.kind must be soft_bounds or ideal, got '{value}'"
                    )))
                }
            }
        }
        "dw_min_up" => t.device.dw_min_up = parse_scalar(key, value, line_no)?,
        "dw_min_down" => t.device.dw_min_down = parse_scalar(key, value, line_no)?,
        "dw_min_dtod" => t.device.dw_min_dtod = parse_scalar(key, value, line_no)?,
        "dw_min_c2c" => t.device.dw_min_c2c = parse_scalar(key, value, line_no)?,
        "bounds_dtod" => t.device.bounds_dtod = parse_scalar(key, value, line_no)?,
        "sps_percent" => t.device.sps_percent = parse_scalar(key, value, line_no)?,
        "spv_percent" => t.device.spv_percent = parse_scalar(key, value, line_no)?,
        "w_max" => t.device.w_max_mean = parse_scalar(key, value, line_no)?,
        "w_min" => t.device.w_min_mean = parse_scalar(key, value, line_no)?,
        "out_noise" => t.out_noise_std = parse_scalar(key, value, line_no)?,
        "read_noise" => t.read_noise_std = parse_scalar(key, value, line_no)?,
        "update" => {
            t.update_mode = match value {
                "stochastic" => {
                    let bl = match t.update_mode {
                        UpdateMode::StochasticPulses { bit_length } => bit_length,
                        UpdateMode::ExpectedUpdate => DEFAULT_BIT_LENGTH,
                    };
                    UpdateMode::StochasticPulses { bit_length: bl }
                }
                "expected" => UpdateMode::ExpectedUpdate,
                _ => {
                    return Err(AtlsError::invalid(format!(
                        "line {line_no}: device.update must be stochastic or expected, got '{value}'"
                    )))
                }
            }
        }
        "bit_length" => {
            let bl: u32 = parse_scalar(key, value, line_no)?;
            if let UpdateMode::StochasticPulses { bit_length } = &mut t.update_mode {
                *bit_length = bl;
            }
        }
        other => return Err(unknown_key(other, "device", DEVICE_KEYS, line_no)),
    }
    Ok(())
}

fn apply_trainer(t: &mut TrainerSettings, key: &str, value: &str, line_no: usize) -> Result<()> {
    match key {
        "kind" => {
            t.kind = value.parse().map_err(|e: AtlsError| {
                AtlsError::invalid(format!("line {line_no}: {e}"))
            })?
        }
        "lr" => t.train.lr = parse_scalar(key, value, line_no)?,
        "batch_size" => t.train.batch_size = parse_scalar(key, value, line_no)?,
        "transfer_every" => t.train.transfer_every = parse_scalar(key, value, line_no)?,
        "units_in_mbatch" => t.train.units_in_mbatch = parse_bool(key, value, line_no)?,
        "autogranularity" => t.train.autogranularity = parse_scalar(key, value, line_no)?,
        "granularity" => t.train.granularity = Some(parse_scalar(key, value, line_no)?),
        "auto_scale" => t.train.auto_scale = parse_bool(key, value, line_no)?,
        "auto_momentum" => t.train.auto_momentum = parse_scalar(key, value, line_no)?,
        "forget_buffer" => t.train.forget_buffer = parse_bool(key, value, line_no)?,
        "in_chop_prob" => t.train.in_chop_prob = parse_scalar(key, value, line_no)?,
        "device_momentum" => t.train.device_momentum = parse_scalar(key, value, line_no)?,
        "ref_offset" => t.train.ref_offset = parse_scalar(key, value, line_no)?,
        "ref_program_error" => t.train.ref_program_error = parse_scalar(key, value, line_no)?,
        "tau" => t.tau = parse_scalar(key, value, line_no)?,
        other => return Err(unknown_key(other, "trainer", TRAINER_KEYS, line_no)),
    }
    Ok(())
}

fn apply_task(k: &mut TaskFamily, key: &str, value: &str, line_no: usize) -> Result<()> {
    match key {
        "input_dim" => k.input_dim = parse_scalar(key, value, line_no)?,
        "pretrain_classes" => k.pretrain_classes = parse_scalar(key, value, line_no)?,
        "finetune_subset" => k.finetune_subset = parse_list(key, value, line_no)?,
        "samples_per_class_train" => {
            k.samples_per_class_train = parse_scalar(key, value, line_no)?
        }
        "samples_per_class_test" => k.samples_per_class_test = parse_scalar(key, value, line_no)?,
        "noise_std" => k.noise_std = parse_scalar(key, value, line_no)?,
        "jitter_std" => k.jitter_std = parse_scalar(key, value, line_no)?,
        "teacher_seed" => k.teacher_seed = parse_scalar(key, value, line_no)?,
        "teacher_hidden" => k.teacher_hidden = parse_scalar(key, value, line_no)?,
        other => return Err(unknown_key(other, "task", TASK_KEYS, line_no)),
    }
    Ok(())
}

fn apply_run(r: &mut RunConfig, key: &str, value: &str, line_no: usize) -> Result<()> {
    match key {
        "seed" => r.seed = parse_scalar(key, value, line_no)?,
        "repeats" => r.repeats = parse_scalar(key, value, line_no)?,
        "epochs_pretrain" => r.epochs_pretrain = parse_scalar(key, value, line_no)?,
        "epochs_finetune" => r.epochs_finetune = parse_scalar(key, value, line_no)?,
        "modes" => {
            let names: Vec<String> = parse_list(key, value, line_no)?;
            let mut modes = Vec::with_capacity(names.len());
            for n in names {
                modes.push(n.parse().map_err(|e: AtlsError| {
                    AtlsError::invalid(format!("line {line_no}: {e}"))
                })?);
            }
            r.modes = modes;
        }
        "checkpoint" => r.checkpoint = Some(value.to_string()),
        other => return Err(unknown_key(other, "run", RUN_KEYS, line_no)),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let def = ExperimentConfig::default();
        let text = def.serialize();
        let parsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(parsed.serialize(), text);
        parsed.validate().unwrap();
    }

    #[test]
    fn sweep_section_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep = Some(SweepConfig {
            key: "device.spv_percent".to_string(),
            values: vec![0.0, 10.0, 20.0],
        });
        let text = cfg.serialize();
        let parsed = ExperimentConfig::parse(&text).unwrap();
        let sw = parsed.sweep.as_ref().unwrap();
        assert_eq!(sw.key, "device.spv_percent");
        assert_eq!(sw.values, vec![0.0, 10.0, 20.0]);
        assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn parse_reads_every_section() {
        let text = "\
[model]
kind = attention
patches = 2
patch_dim = 4
embed_dim = 6
heads = 3
mlp_hidden = 12

[device]
kind = ideal
update = expected
out_noise = 0.1

[trainer]
kind = ttv2
lr = 0.02
granularity = 0.5
units_in_mbatch = true

[task]
input_dim = 8
finetune_subset = 1,3

[run]
seed = 99
modes = digital_tl,analog_scratch
checkpoint = /tmp/pre.atls

[sweep]
key = trainer.tau
values = 0,0.1,0.2
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Attention);
        assert_eq!(cfg.model.heads, 3);
        assert_eq!(cfg.tile.device.kind, DeviceKind::IdealLinear);
        assert_eq!(cfg.tile.update_mode, UpdateMode::ExpectedUpdate);
        assert_eq!(cfg.tile.out_noise_std, 0.1);
        assert_eq!(cfg.trainer.kind, TrainerKind::Ttv2);
        assert_eq!(cfg.trainer.train.lr, 0.02);
        assert_eq!(cfg.trainer.train.granularity, Some(0.5));
        assert!(cfg.trainer.train.units_in_mbatch);
        assert_eq!(cfg.task.finetune_subset, vec![1, 3]);
        assert_eq!(cfg.run.seed, 99);
        assert_eq!(
            cfg.run.modes,
            vec![PipelineMode::DigitalTl, PipelineMode::AnalogScratch]
        );
        assert_eq!(cfg.run.checkpoint.as_deref(), Some("/tmp/pre.atls"));
        let sw = cfg.sweep.unwrap();
        assert_eq!(sw.key, "trainer.tau");
        assert_eq!(sw.values.len(), 3);
    }

    #[test]
    fn unknown_keys_and_sections_list_alternatives() {
        let err = ExperimentConfig::parse("[device]\nfoo = 1\n").unwrap_err().to_string();
        assert!(err.contains("unknown key 'foo'"), "got: {err}");
        assert!(err.contains("spv_percent"), "should list valid keys: {err}");
        assert!(err.contains("line 2"), "got: {err}");

        let err = ExperimentConfig::parse("[devices]\n").unwrap_err().to_string();
        assert!(err.contains("unknown section"), "got: {err}");

        let err = ExperimentConfig::parse("lr = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("before any [section]"), "got: {err}");
    }

    #[test]
    fn bad_values_name_line_and_key() {
        let err = ExperimentConfig::parse("[trainer]\nlr = fast\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("lr"), "got: {err}");

        let err = ExperimentConfig::parse("[trainer]\nauto_scale = yes\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("true or false"), "got: {err}");

        let err = ExperimentConfig::parse("[run]\nmodes = warp\n").unwrap_err().to_string();
        assert!(err.contains("unknown mode"), "got: {err}");
    }

    #[test]
    fn set_path_covers_registry_and_rejects_strays() {
        let mut cfg = ExperimentConfig::default();
        for &key in SWEEP_KEYS {
            cfg.set_path(key, 0.25).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        assert_eq!(cfg.tile.device.spv_percent, 0.25);
        assert_eq!(cfg.trainer.train.granularity, Some(0.25));
        assert_eq!(cfg.trainer.tau, 0.25);

        let err = cfg.set_path("device.volume", 11.0).unwrap_err().to_string();
        assert!(err.contains("valid keys"), "got: {err}");
    }

    #[test]
    fn validation_cross_checks_model_and_task() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.kind = ModelKind::Attention;
        cfg.model.patches = 3;
        cfg.model.patch_dim = 2;
        // 3 * 2 != 8.
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("input_dim"), "got: {err}");

        cfg.model.patches = 4;
        cfg.model.embed_dim = 7;
        cfg.model.heads = 2;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("divisible"), "got: {err}");

        let mut cfg = ExperimentConfig::default();
        cfg.sweep = Some(SweepConfig {
            key: "nope.nope".into(),
            values: vec![1.0],
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored()  {
        let text = "# top comment\n\n[run]\n# inner\nseed = 5\n\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.run.seed, 5);
    }

    #[test]
    fn csv_task_needs_both_paths_and_round_trips() {
        let text = "[task]\ntrain_csv = data/train.csv\ntest_csv = data/test.csv\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let csv = cfg.csv.clone().unwrap();
        assert_eq!(csv.train, "data/train.csv");
        assert_eq!(csv.test, "data/test.csv");
        let again = ExperimentConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(again.csv, cfg.csv);

        let err = ExperimentConfig::parse("[task]\ntrain_csv = only.csv\n").unwrap_err();
        assert!(err.to_string().contains("both train_csv and test_csv"));
    }
}

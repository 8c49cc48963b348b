//! Experiment pipeline: digital pretraining, the four fine-tune modes,
//! parallel robustness sweeps, and trace reporting.
//!
//! Every run derives its seed as `derive_key(master_seed, sweep_index,
//! repeat_index)`, so a grid re-run with the same config reproduces each
//! trace byte for byte no matter how many workers execute it. Training
//! batches are jittered with Gaussian noise of scale `task.jitter_std` (the
//! only augmentation, off by default); evaluation sees the exact inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{load_model, save_model};
use crate::config::{ExperimentConfig, ModelKind, PipelineMode};
use crate::data::{dataset_from_csv, Dataset, Split};
use crate::error::{AtlsError, Result};
use crate::network::{build_attention_classifier, build_mlp, evaluate, ModelGraph};
use crate::plot::{quartiles, write_plot, Series};
use crate::rng::{derive_key, StreamRng};
use crate::trainer::{Trainer, TrainerKind};

/// Fixed column order of every trace CSV this crate reads or writes.
pub const TRACE_HEADER: &str = "run_id,sweep_value,seed,epoch,split,error_percent,loss";

/// Sub-stream tags hung off a run seed, one per independent random choice.
const TAG_MODEL: u64 = 0;
const TAG_HEAD: u64 = 1;
const TAG_CONVERT: u64 = 2;
const TAG_TRAINER: u64 = 3;
const TAG_BATCH: u64 = 4;

/// One per-epoch, per-split record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub run_id: String,
    pub sweep_value: f64,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub error_percent: f64,
    pub loss: f64,
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut s = String::with_capacity(64 + rows.len() * 48);
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.run_id, r.sweep_value, r.seed, r.epoch, r.split, r.error_percent, r.loss
        );
    }
    s
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, trace_to_csv(rows))
        .map_err(|e| AtlsError::io(path.display().to_string(), e))
}

/// Parse a trace CSV, rejecting schema drift loudly: a wrong header names
/// the offending column, a bad row names its line.
pub fn parse_trace(text: &str, source: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| {
        AtlsError::invalid(format!("{source}: empty file, expected header '{TRACE_HEADER}'"))
    })?;
    let expected: Vec<&str> = TRACE_HEADER.split(',').collect();
    let got: Vec<&str> = header.split(',').collect();
    for (i, exp) in expected.iter().enumerate() {
        match got.get(i) {
            Some(g) if g == exp => {}
            Some(g) => {
                return Err(AtlsError::invalid(format!(
                    "{source}: header column {} is '{g}', expected '{exp}'",
                    i + 1
                )))
            }
            None => {
                return Err(AtlsError::invalid(format!(
                    "{source}: header is missing column '{exp}'"
                )))
            }
        }
    }
    if got.len() > expected.len() {
        return Err(AtlsError::invalid(format!(
            "{source}: unexpected extra header column '{}'",
            got[expected.len()]
        )));
    }

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != expected.len() {
            return Err(AtlsError::invalid(format!(
                "{source} line {line_no}: expected {} fields, got {}",
                expected.len(),
                f.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| {
                AtlsError::invalid(format!(
                    "{source} line {line_no}: bad {} '{}'",
                    expected[i], f[i]
                ))
            })
        };
        let seed: u64 = f[2].parse().map_err(|_| {
            AtlsError::invalid(format!("{source} line {line_no}: bad seed '{}'", f[2]))
        })?;
        let epoch: usize = f[3].parse().map_err(|_| {
            AtlsError::invalid(format!("{source} line {line_no}: bad epoch '{}'", f[3]))
        })?;
        if epoch == 0 {
            return Err(AtlsError::invalid(format!(
                "{source} line {line_no}: epochs are 1-based"
            )));
        }
        if f[4] != "train" && f[4] != "test" {
            return Err(AtlsError::invalid(format!(
                "{source} line {line_no}: split must be train or test, got '{}'",
                f[4]
            )));
        }
        let error_percent = num(5)?;
        if !(0.0..=100.0).contains(&error_percent) {
            return Err(AtlsError::invalid(format!(
                "{source} line {line_no}: error_percent {error_percent} outside [0, 100]"
            )));
        }
        rows.push(TraceRow {
            run_id: f[0].to_string(),
            sweep_value: num(1)?,
            seed,
            epoch,
            split: f[4].to_string(),
            error_percent,
            loss: num(6)?,
        });
    }
    Ok(rows)
}

/// Build the configured architecture for an input width and class count.
pub fn build_model(
    cfg: &ExperimentConfig,
    input_dim: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    match cfg.model.kind {
        ModelKind::Mlp => {
            let mut dims = Vec::with_capacity(cfg.model.hidden.len() + 2);
            dims.push(input_dim);
            dims.extend_from_slice(&cfg.model.hidden);
            dims.push(classes);
            build_mlp(&dims, seed)
        }
        ModelKind::Attention => {
            let patched = cfg.model.patches * cfg.model.patch_dim;
            if patched != input_dim {
                return Err(AtlsError::invalid(format!(
                    "attention model covers {} x {} = {patched} inputs but the task has {input_dim}",
                    cfg.model.patches, cfg.model.patch_dim
                )));
            }
            build_attention_classifier(
                cfg.model.patches,
                cfg.model.patch_dim,
                cfg.model.embed_dim,
                cfg.model.heads,
                cfg.model.mlp_hidden,
                classes,
                seed,
            )
        }
    }
}

/// Fine-tune data: external CSVs when configured (filtered to
/// `finetune_subset`), otherwise the synthetic family's fine-tune splits.
fn finetune_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.csv {
        Some(csv) => {
            let keep = cfg.task.finetune_subset.clone();
            let train = dataset_from_csv(Path::new(&csv.train), Some(&keep))?;
            let test = dataset_from_csv(Path::new(&csv.test), Some(&keep))?;
            if train.class_count != test.class_count {
                return Err(AtlsError::invalid(format!(
                    "train csv has {} classes but test csv has {}",
                    train.class_count, test.class_count
                )));
            }
            if train.inputs.cols() != test.inputs.cols() {
                return Err(AtlsError::invalid(format!(
                    "train csv has {} features but test csv has {}",
                    train.inputs.cols(),
                    test.inputs.cols()
                )));
            }
            Ok((train, test))
        }
        None => Ok((
            cfg.task.finetune_split(Split::Train)?,
            cfg.task.finetune_split(Split::Test)?,
        )),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    model: &mut ModelGraph,
    trainer: &mut Trainer,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    batch_size: usize,
    jitter_std: f64,
    batch_rng: &mut StreamRng,
    run_id: &str,
    sweep_value: f64,
    seed: u64,
) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::with_capacity(epochs * 2);
    for epoch in 1..=epochs {
        for (xs, ys) in train.batches(batch_size, batch_rng, jitter_std) {
            trainer.step(model, &xs, &ys)?;
        }
        for (split, ds) in [("train", train), ("test", test)] {
            let (error_percent, loss) = evaluate(model, &ds.inputs, &ds.labels)?;
            rows.push(TraceRow {
                run_id: run_id.to_string(),
                sweep_value,
                seed,
                epoch,
                split: split.to_string(),
                error_percent,
                loss,
            });
        }
    }
    Ok(rows)
}

/// One fine-tune run in one mode. TL modes start from the checkpoint body
/// with a fresh head; scratch modes never touch the checkpoint. Analog
/// modes program the digital weights onto tiles once (noise scale
/// `trainer.tau`) and train with the configured analog trainer; digital
/// modes always use plain SGD as the reference.
#[allow(clippy::too_many_arguments)]
fn finetune_run(
    cfg: &ExperimentConfig,
    mode: PipelineMode,
    checkpoint: Option<&Path>,
    train: &Dataset,
    test: &Dataset,
    run_id: &str,
    sweep_value: f64,
    run_seed: u64,
    epochs: usize,
) -> Result<Vec<TraceRow>> {
    let classes = train.class_count;
    let input_dim = train.inputs.cols();
    let mut model = if mode.uses_pretrained_body() {
        let path = checkpoint.ok_or_else(|| {
            AtlsError::invalid(format!(
                "mode {} needs a pretrained checkpoint; pass --checkpoint or set run.checkpoint",
                mode.name()
            ))
        })?;
        let mut m = load_model(path, &cfg.tile, derive_key(&[run_seed, TAG_MODEL]))?;
        if m.in_dim() != input_dim {
            return Err(AtlsError::invalid(format!(
                "checkpoint expects {} inputs but the fine-tune data has {input_dim}",
                m.in_dim()
            )));
        }
        m.replace_head(classes, derive_key(&[run_seed, TAG_HEAD]))?;
        m
    } else {
        build_model(cfg, input_dim, classes, derive_key(&[run_seed, TAG_MODEL]))?
    };
    if mode.is_analog() {
        model.convert_to_analog(&cfg.tile, cfg.trainer.tau, derive_key(&[run_seed, TAG_CONVERT]))?;
    }
    let kind = if mode.is_analog() {
        cfg.trainer.kind
    } else {
        TrainerKind::DigitalSgd
    };
    let mut trainer = Trainer::new(
        kind,
        cfg.trainer.train.clone(),
        &cfg.tile,
        &mut model,
        derive_key(&[run_seed, TAG_TRAINER]),
    )?;
    let mut batch_rng = StreamRng::new(derive_key(&[run_seed, TAG_BATCH]));
    run_training(
        &mut model,
        &mut trainer,
        train,
        test,
        epochs,
        cfg.trainer.train.batch_size,
        cfg.task.jitter_std,
        &mut batch_rng,
        run_id,
        sweep_value,
        run_seed,
    )
}

#[derive(Debug)]
pub struct PretrainOutputs {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub final_train_error: f64,
    pub final_test_error: f64,
}

/// Digitally train on the synthetic pretrain task and save the model.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PretrainOutputs> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let train = cfg.task.pretrain_split(Split::Train)?;
    let test = cfg.task.pretrain_split(Split::Test)?;
    let seed = cfg.run.seed;
    let mut model = build_model(
        cfg,
        train.inputs.cols(),
        train.class_count,
        derive_key(&[seed, TAG_MODEL]),
    )?;
    let mut trainer = Trainer::new(
        TrainerKind::DigitalSgd,
        cfg.trainer.train.clone(),
        &cfg.tile,
        &mut model,
        derive_key(&[seed, TAG_TRAINER]),
    )?;
    let mut batch_rng = StreamRng::new(derive_key(&[seed, TAG_BATCH]));
    let rows = run_training(
        &mut model,
        &mut trainer,
        &train,
        &test,
        cfg.run.epochs_pretrain,
        cfg.trainer.train.batch_size,
        cfg.task.jitter_std,
        &mut batch_rng,
        "pretrain",
        0.0,
        seed,
    )?;
    let checkpoint = out_dir.join("pretrain.ckpt");
    save_model(&model, &checkpoint)?;
    let trace = out_dir.join("pretrain_trace.csv");
    write_trace(&trace, &rows)?;
    let last = |split: &str| {
        rows.iter()
            .rev()
            .find(|r| r.split == split)
            .map_or(f64::NAN, |r| r.error_percent)
    };
    Ok(PretrainOutputs {
        checkpoint,
        trace,
        final_train_error: last("train"),
        final_test_error: last("test"),
    })
}

/// Run every mode in `run.modes` on the fine-tune task, `repeats` times
/// each; the two modes of a pair share a seed per repeat so comparisons
/// are paired.
pub fn cmd_finetune(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let checkpoint = resolve_checkpoint(cfg)?;
    let (train, test) = finetune_data(cfg)?;
    let mut rows = Vec::new();
    for ri in 0..cfg.run.repeats {
        for &mode in &cfg.run.modes {
            let run_seed = derive_key(&[cfg.run.seed, 0, ri as u64]);
            let run_id = format!("{}-s0-r{ri}", mode.name());
            rows.extend(finetune_run(
                cfg,
                mode,
                checkpoint.as_deref(),
                &train,
                &test,
                &run_id,
                0.0,
                run_seed,
                cfg.run.epochs_finetune,
            )?);
        }
    }
    let trace = out_dir.join("finetune_trace.csv");
    write_trace(&trace, &rows)?;
    Ok(trace)
}

/// Checkpoint path from config, verified to exist when any mode needs it.
fn resolve_checkpoint(cfg: &ExperimentConfig) -> Result<Option<PathBuf>> {
    let path = cfg.run.checkpoint.as_ref().map(PathBuf::from);
    let needed = cfg.run.modes.iter().any(|m| m.uses_pretrained_body());
    if needed {
        match &path {
            None => {
                return Err(AtlsError::invalid(
                    "TL modes need a pretrained checkpoint; pass --checkpoint or set run.checkpoint",
                ))
            }
            Some(p) if !p.exists() => {
                return Err(AtlsError::invalid(format!(
                    "checkpoint {} does not exist; run `atls pretrain` first",
                    p.display()
                )))
            }
            Some(_) => {}
        }
    }
    Ok(path)
}

#[derive(Debug)]
pub struct SweepOutputs {
    pub trace: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
    pub failures: Option<PathBuf>,
    pub completed_runs: usize,
    pub failed_runs: usize,
}

struct SweepJob {
    idx: usize,
    sweep_idx: usize,
    mode: PipelineMode,
    run_id: String,
    run_seed: u64,
    cfg: ExperimentConfig,
}

/// Run the full grid (sweep values x repeats x modes) in parallel, then
/// merge in grid order so worker count never changes the output. Runs that
/// diverge are recorded in a failures sidecar instead of being dropped.
pub fn cmd_sweep(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize) -> Result<SweepOutputs> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| AtlsError::invalid("sweep command needs a [sweep] section"))?;
    ensure_dir(out_dir)?;
    let checkpoint = resolve_checkpoint(cfg)?;

    let mut grid = Vec::new();
    for (si, &value) in sweep.values.iter().enumerate() {
        let mut point = cfg.clone();
        point.set_path(&sweep.key, value)?;
        point.validate()?;
        for ri in 0..cfg.run.repeats {
            let run_seed = derive_key(&[cfg.run.seed, si as u64, ri as u64]);
            for &mode in &cfg.run.modes {
                grid.push(SweepJob {
                    idx: grid.len(),
                    sweep_idx: si,
                    mode,
                    run_id: format!("{}-s{si}-r{ri}", mode.name()),
                    run_seed,
                    cfg: point.clone(),
                });
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| AtlsError::invalid(format!("cannot build a {jobs}-worker pool: {e}")))?;
    let ckpt = checkpoint.as_deref();
    let mut results: Vec<(usize, Result<Vec<TraceRow>>)> = pool.install(|| {
        grid.par_iter()
            .map(|job| {
                let result = finetune_data(&job.cfg).and_then(|(train, test)| {
                    finetune_run(
                        &job.cfg,
                        job.mode,
                        ckpt,
                        &train,
                        &test,
                        &job.run_id,
                        sweep.values[job.sweep_idx],
                        job.run_seed,
                        job.cfg.run.epochs_finetune,
                    )
                });
                (job.idx, result)
            })
            .collect()
    });
    results.sort_by_key(|(idx, _)| *idx);

    let mut rows = Vec::new();
    // (mode, sweep index) -> final test errors across repeats.
    let mut finals: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    let mut failures = Vec::new();
    for (idx, result) in results {
        let job = &grid[idx];
        match result {
            Ok(run_rows) => {
                if let Some(r) = run_rows.iter().rev().find(|r| r.split == "test") {
                    finals
                        .entry((job.mode.name().to_string(), job.sweep_idx))
                        .or_default()
                        .push(r.error_percent);
                }
                rows.extend(run_rows);
            }
            Err(e @ AtlsError::NonFiniteLoss { .. }) => {
                failures.push(format!(
                    "{},{},{},{e}",
                    job.run_id, sweep.values[job.sweep_idx], job.run_seed
                ));
            }
            Err(e) => return Err(e),
        }
    }

    let trace = out_dir.join("sweep_trace.csv");
    write_trace(&trace, &rows)?;

    let mut summary = String::from(
        "mode,sweep_value,runs,final_error_q1,final_error_median,final_error_q3\n",
    );
    for ((mode, si), errs) in &finals {
        let (q1, med, q3) = quartiles(errs).expect("non-empty by construction");
        let _ = writeln!(
            summary,
            "{mode},{},{},{q1},{med},{q3}",
            sweep.values[*si],
            errs.len()
        );
    }
    let summary_path = out_dir.join("sweep_summary.csv");
    std::fs::write(&summary_path, summary)
        .map_err(|e| AtlsError::io(summary_path.display().to_string(), e))?;

    let series = finals_to_series(&finals, &sweep.values);
    let plot_path = out_dir.join("sweep.svg");
    write_plot(
        &plot_path,
        &format!("sweep over {}", sweep.key),
        &sweep.key,
        "final test error %",
        &series,
    )?;

    let failures_path = if failures.is_empty() {
        None
    } else {
        let p = out_dir.join("failures.csv");
        let body = format!("run_id,sweep_value,seed,error\n{}\n", failures.join("\n"));
        std::fs::write(&p, body).map_err(|e| AtlsError::io(p.display().to_string(), e))?;
        Some(p)
    };
    Ok(SweepOutputs {
        trace,
        summary: summary_path,
        plot: plot_path,
        failures: failures_path,
        completed_runs: grid.len() - failures.len(),
        failed_runs: failures.len(),
    })
}

fn finals_to_series(
    finals: &BTreeMap<(String, usize), Vec<f64>>,
    values: &[f64],
) -> Vec<Series> {
    let mut by_mode: BTreeMap<&str, Series> = BTreeMap::new();
    for ((mode, si), errs) in finals {
        let s = by_mode.entry(mode).or_insert_with(|| Series {
            label: mode.clone(),
            xs: Vec::new(),
            stats: Vec::new(),
        });
        if let Some(q) = quartiles(errs) {
            s.xs.push(values[*si]);
            s.stats.push(q);
        }
    }
    by_mode.into_values().collect()
}

#[derive(Debug)]
pub struct ReportOutputs {
    pub table: String,
    pub plot: PathBuf,
    pub table_file: PathBuf,
}

/// Aggregate one or more trace CSVs into a per-(mode, sweep value) table of
/// final test errors, with a `gap` column on analog rows: the matching
/// digital mode's median minus the analog median, in percentage points
/// (negative means the digital baseline ended lower).
pub fn cmd_report(paths: &[PathBuf], out_dir: &Path) -> Result<ReportOutputs> {
    let mut rows = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p)
            .map_err(|e| AtlsError::io(p.display().to_string(), e))?;
        rows.extend(parse_trace(&text, &p.display().to_string())?);
    }
    if rows.is_empty() {
        return Err(AtlsError::invalid(
            "no trace rows in the input CSVs; nothing to report",
        ));
    }
    ensure_dir(out_dir)?;

    // Final test error of each run: the test row with the highest epoch.
    let mut per_run: BTreeMap<&str, &TraceRow> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == "test") {
        let slot = per_run.entry(&r.run_id).or_insert(r);
        if r.epoch >= slot.epoch {
            *slot = r;
        }
    }
    // Group by (mode, sweep value); the mode is the run_id's first segment.
    let mut groups: BTreeMap<(String, u64), (f64, Vec<f64>)> = BTreeMap::new();
    for r in per_run.values() {
        let mode = r.run_id.split('-').next().unwrap_or(&r.run_id).to_string();
        let entry = groups
            .entry((mode, r.sweep_value.to_bits()))
            .or_insert((r.sweep_value, Vec::new()));
        entry.1.push(r.error_percent);
    }
    let mut table_rows: Vec<(String, f64, usize, f64, f64, f64)> = groups
        .into_iter()
        .map(|((mode, _), (value, errs))| {
            let (q1, med, q3) = quartiles(&errs).expect("groups are non-empty");
            (mode, value, errs.len(), q1, med, q3)
        })
        .collect();
    table_rows.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.partial_cmp(&b.1).expect("finite sweep values"))
    });

    let median_of = |mode: &str, value: f64| -> Option<f64> {
        table_rows
            .iter()
            .find(|r| r.0 == mode && r.1 == value)
            .map(|r| r.4)
    };
    let mut table = format!(
        "{:<16} {:>11} {:>5} {:>8} {:>8} {:>8} {:>8}\n",
        "mode", "sweep_value", "runs", "q1", "median", "q3", "gap"
    );
    for (mode, value, n, q1, med, q3) in &table_rows {
        let gap = mode
            .strip_prefix("analog_")
            .and_then(|suffix| median_of(&format!("digital_{suffix}"), *value))
            .map(|digital| digital - med);
        let gap = match gap {
            Some(g) => format!("{g:.2}"),
            None => "-".to_string(),
        };
        let _ = writeln!(
            table,
            "{mode:<16} {value:>11} {n:>5} {q1:>8.2} {med:>8.2} {q3:>8.2} {gap:>8}"
        );
    }

    let table_file = out_dir.join("report.txt");
    std::fs::write(&table_file, &table)
        .map_err(|e| AtlsError::io(table_file.display().to_string(), e))?;

    let mut series: BTreeMap<String, Series> = BTreeMap::new();
    for (mode, value, _, q1, med, q3) in &table_rows {
        let s = series.entry(mode.clone()).or_insert_with(|| Series {
            label: mode.clone(),
            xs: Vec::new(),
            stats: Vec::new(),
        });
        s.xs.push(*value);
        s.stats.push((*q1, *med, *q3));
    }
    let series: Vec<Series> = series.into_values().collect();
    let plot = out_dir.join("report.svg");
    write_plot(
        &plot,
        "final test error by mode",
        "sweep value",
        "final test error %",
        &series,
    )?;
    Ok(ReportOutputs {
        table,
        plot,
        table_file,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AtlsError::io(dir.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CsvTask, SweepConfig};
    use crate::device::DeviceKind;
    use crate::tile::{TileConfig, UpdateMode};

    fn fast_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.hidden = vec![24];
        cfg.task.samples_per_class_train = 24;
        cfg.task.samples_per_class_test = 12;
        cfg.task.noise_std = 0.2;
        cfg.run.repeats = 1;
        cfg.run.epochs_pretrain = 80;
        cfg.run.epochs_finetune = 3;
        cfg.trainer.train.lr = 0.3;
        cfg
    }

    fn ideal_cfg() -> ExperimentConfig {
        let mut cfg = fast_cfg();
        cfg.tile = TileConfig::ideal();
        cfg.tile.update_mode = UpdateMode::ExpectedUpdate;
        cfg.trainer.kind = TrainerKind::AnalogSgd;
        cfg.trainer.tau = 0.0;
        cfg
    }

    #[test]
    fn trace_csv_round_trips_and_rejects_drift() {
        let rows = vec![
            TraceRow {
                run_id: "analog_tl-s0-r0".into(),
                sweep_value: 0.05,
                seed: 42,
                epoch: 1,
                split: "train".into(),
                error_percent: 12.345678901234567,
                loss: 0.9,
            },
            TraceRow {
                run_id: "analog_tl-s0-r0".into(),
                sweep_value: 0.05,
                seed: 42,
                epoch: 1,
                split: "test".into(),
                error_percent: 25.0,
                loss: f64::INFINITY,
            },
        ];
        let csv = trace_to_csv(&rows);
        assert!(csv.starts_with(TRACE_HEADER));
        assert_eq!(parse_trace(&csv, "t").unwrap(), rows);

        let bad_header = csv.replacen("seed", "sd", 1);
        let err = parse_trace(&bad_header, "t").unwrap_err().to_string();
        assert!(err.contains("column 3") && err.contains("seed"), "{err}");

        let bad_row = format!("{TRACE_HEADER}\na,b,c\n");
        let err = parse_trace(&bad_row, "t").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        let out_of_range = format!("{TRACE_HEADER}\nx-s0-r0,0,1,1,test,150,0.5\n");
        let err = parse_trace(&out_of_range, "t").unwrap_err().to_string();
        assert!(err.contains("outside [0, 100]"), "{err}");
    }

    #[test]
    fn pretrain_learns_and_reproduces_bit_identical_artifacts() {
        let cfg = fast_cfg();
        let dir = tempfile::tempdir().unwrap();
        let a = cmd_pretrain(&cfg, &dir.path().join("a")).unwrap();
        let b = cmd_pretrain(&cfg, &dir.path().join("b")).unwrap();
        assert!(
            a.final_train_error < 10.0,
            "pretrain train error {}",
            a.final_train_error
        );
        assert_eq!(
            std::fs::read(&a.checkpoint).unwrap(),
            std::fs::read(&b.checkpoint).unwrap(),
            "same seed must give the same checkpoint"
        );
        assert_eq!(
            std::fs::read(&a.trace).unwrap(),
            std::fs::read(&b.trace).unwrap()
        );
    }

    #[test]
    fn ideal_analog_tl_matches_digital_tl_trace() {
        let mut cfg = ideal_cfg();
        cfg.run.modes = vec![PipelineMode::DigitalTl, PipelineMode::AnalogTl];
        let dir = tempfile::tempdir().unwrap();
        let pre = cmd_pretrain(&cfg, dir.path()).unwrap();
        cfg.run.checkpoint = Some(pre.checkpoint.display().to_string());
        let trace = cmd_finetune(&cfg, dir.path()).unwrap();
        let rows = parse_trace(&std::fs::read_to_string(&trace).unwrap(), "t").unwrap();
        let loss_at = |mode: &str, epoch: usize, split: &str| {
            rows.iter()
                .find(|r| r.run_id.starts_with(mode) && r.epoch == epoch && r.split == split)
                .map(|r| r.loss)
                .unwrap()
        };
        for split in ["train", "test"] {
            let d = loss_at("digital_tl", 1, split);
            let a = loss_at("analog_tl", 1, split);
            assert!(
                (d - a).abs() < 1e-6,
                "ideal zero-noise analog should match digital: {d} vs {a}"
            );
        }
        assert_eq!(rows.len(), 2 * cfg.run.epochs_finetune * 2);
        let epochs: Vec<usize> = rows
            .iter()
            .filter(|r| r.run_id.starts_with("digital_tl") && r.split == "test")
            .map(|r| r.epoch)
            .collect();
        assert_eq!(epochs, vec![1, 2, 3], "epochs contiguous from 1");
    }

    #[test]
    fn scratch_modes_never_open_the_checkpoint() {
        let mut cfg = ideal_cfg();
        cfg.run.modes = vec![PipelineMode::AnalogScratch];
        cfg.run.checkpoint = Some("/nonexistent/nothing.ckpt".into());
        let dir = tempfile::tempdir().unwrap();
        cmd_finetune(&cfg, dir.path()).unwrap();
    }

    #[test]
    fn tl_mode_without_checkpoint_is_rejected() {
        let mut cfg = ideal_cfg();
        cfg.run.modes = vec![PipelineMode::AnalogTl];
        let err = cmd_finetune(&cfg, tempfile::tempdir().unwrap().path()).unwrap_err();
        assert!(err.to_string().contains("checkpoint"), "{err}");
    }

    #[test]
    fn sweep_counts_runs_and_is_byte_identical_across_worker_counts() {
        let mut cfg = ideal_cfg();
        cfg.run.modes = vec![PipelineMode::DigitalScratch];
        cfg.run.repeats = 2;
        cfg.run.epochs_finetune = 2;
        cfg.sweep = Some(SweepConfig {
            key: "trainer.lr".into(),
            values: vec![0.05, 0.1],
        });
        let dir = tempfile::tempdir().unwrap();
        let one = cmd_sweep(&cfg, &dir.path().join("j1"), 1).unwrap();
        let four = cmd_sweep(&cfg, &dir.path().join("j4"), 4).unwrap();
        let body = std::fs::read_to_string(&one.trace).unwrap();
        assert_eq!(
            body,
            std::fs::read_to_string(&four.trace).unwrap(),
            "worker count changed the trace"
        );
        assert_eq!(
            std::fs::read(&one.summary).unwrap(),
            std::fs::read(&four.summary).unwrap()
        );

        let rows = parse_trace(&body, "t").unwrap();
        let mut ids: Vec<&str> = rows.iter().map(|r| r.run_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4, "2 values x 2 repeats x 1 mode");
        assert_eq!(rows.len(), 4 * 2 * 2, "runs x epochs x splits");
        assert!(one.failures.is_none());
        assert!(one.plot.exists());

        let seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        let distinct: std::collections::BTreeSet<u64> = seeds.iter().copied().collect();
        assert_eq!(distinct.len(), 4, "every (value, repeat) pair gets its own seed");
    }

    #[test]
    fn sweep_records_diverged_runs_instead_of_dropping_them() {
        let mut cfg = ideal_cfg();
        cfg.run.modes = vec![PipelineMode::DigitalScratch];
        cfg.run.repeats = 2;
        cfg.run.epochs_finetune = 2;
        cfg.task.noise_std = 1.5;
        cfg.sweep = Some(SweepConfig {
            key: "trainer.lr".into(),
            values: vec![0.05, 1e18],
        });
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_sweep(&cfg, dir.path(), 2).unwrap();
        assert_eq!(out.failed_runs, 2, "both repeats at lr 1e18 diverge");
        assert_eq!(out.completed_runs, 2);
        let sidecar = std::fs::read_to_string(out.failures.unwrap()).unwrap();
        assert!(sidecar.contains("digital_scratch-s1-r0"), "{sidecar}");
        assert!(sidecar.contains("non-finite"), "{sidecar}");
        let rows =
            parse_trace(&std::fs::read_to_string(&out.trace).unwrap(), "t").unwrap();
        assert!(rows.iter().all(|r| r.sweep_value == 0.05));
    }

    #[test]
    fn report_tables_gap_between_digital_and_analog() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |mode: &str, err: f64| {
            format!("{mode}-s0-r0,0,7,1,test,{err},0.5\n{mode}-s0-r0,0,7,2,test,{err},0.4\n")
        };
        let a = dir.path().join("a.csv");
        std::fs::write(&a, format!("{TRACE_HEADER}\n{}", mk("digital_tl", 10.0))).unwrap();
        let b = dir.path().join("b.csv");
        std::fs::write(&b, format!("{TRACE_HEADER}\n{}", mk("analog_tl", 12.0))).unwrap();
        let out = cmd_report(&[a.clone(), b], dir.path()).unwrap();
        let analog_line = out
            .table
            .lines()
            .find(|l| l.starts_with("analog_tl"))
            .unwrap();
        assert!(analog_line.ends_with("-2.00"), "gap column: {analog_line}");
        let digital_line = out
            .table
            .lines()
            .find(|l| l.starts_with("digital_tl"))
            .unwrap();
        assert!(digital_line.trim_end().ends_with('-'), "{digital_line}");
        assert!(out.plot.exists());

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, format!("{TRACE_HEADER}\n")).unwrap();
        let err = cmd_report(&[empty], dir.path()).unwrap_err();
        assert!(err.to_string().contains("no trace rows"), "{err}");
    }

    #[test]
    fn csv_task_feeds_the_finetune_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let body = "label,x0,x1\n0,0.1,0.9\n0,0.2,0.8\n1,0.9,0.1\n1,0.8,0.2\n";
        let train = dir.path().join("train.csv");
        let test = dir.path().join("test.csv");
        std::fs::write(&train, body).unwrap();
        std::fs::write(&test, body).unwrap();
        let mut cfg = ideal_cfg();
        cfg.model.hidden = vec![4];
        cfg.run.modes = vec![PipelineMode::DigitalScratch];
        cfg.task.finetune_subset = vec![0, 1];
        cfg.task.noise_std = 0.05;
        cfg.csv = Some(CsvTask {
            train: train.display().to_string(),
            test: test.display().to_string(),
        });
        let trace = cmd_finetune(&cfg, dir.path()).unwrap();
        let rows = parse_trace(&std::fs::read_to_string(&trace).unwrap(), "t").unwrap();
        assert_eq!(rows.len(), cfg.run.epochs_finetune * 2);
    }

    #[test]
    fn analog_modes_stay_analog_and_use_the_configured_trainer() {
        let mut cfg = fast_cfg();
        cfg.tile = TileConfig::default();
        cfg.tile.device.kind = DeviceKind::SoftBounds;
        cfg.trainer.kind = TrainerKind::Cttv2;
        cfg.trainer.tau = 0.05;
        cfg.run.modes = vec![PipelineMode::AnalogScratch];
        cfg.run.epochs_finetune = 2;
        let dir = tempfile::tempdir().unwrap();
        let trace = cmd_finetune(&cfg, dir.path()).unwrap();
        let rows = parse_trace(&std::fs::read_to_string(&trace).unwrap(), "t").unwrap();
        assert_eq!(rows.len(), 2 * 2);
        assert!(rows.iter().all(|r| r.run_id == "analog_scratch-s0-r0"));
    }
}


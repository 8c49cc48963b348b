//! Training algorithms over the model graph.
//!
//! Four trainers share one interface. `DigitalSgd` is plain minibatch SGD on
//! digital weights. `AnalogSgd` fires the per-sample rank-1 pulse updates
//! straight into each tile. `Ttv2` trains each analog layer through a fast
//! accumulator tile A and a digital buffer H: gradients are pulsed into A,
//! and on a fixed cadence one column of A is read back, compared against a
//! per-element reference, integrated into H, and emitted to the weight tile
//! as full pulses whenever the buffer crosses a granularity threshold.
//! `Cttv2` is the same loop with a per-column chopper: A-writes are
//! sign-modulated and reads demodulated, so any constant reference error
//! averages to zero over chopper flips instead of integrating into H.
//!
//! Biases and any digital layers in a mixed model always get plain SGD at
//! the same learning rate.

use crate::device::PulseDir;
use crate::error::{AtlsError, Result};
use crate::matrix::Matrix;
use crate::network::{cross_entropy, ModelGraph};
use crate::rng::{derive_key, StreamRng};
use crate::tile::{AnalogTile, TileConfig};

/// Emission cap per element per transfer. Far beyond what a full-range
/// excursion needs (range / dw_min is ~10^4 at default settings), so it only
/// guards against a degenerate threshold stalling the run; pulses past the
/// rail are no-ops anyway.
const MAX_TRANSFER_PULSES: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainerKind {
    DigitalSgd,
    AnalogSgd,
    Ttv2,
    Cttv2,
}

impl TrainerKind {
    pub fn name(&self) -> &'static str {
        match self {
            TrainerKind::DigitalSgd => "digital_sgd",
            TrainerKind::AnalogSgd => "analog_sgd",
            TrainerKind::Ttv2 => "ttv2",
            TrainerKind::Cttv2 => "cttv2",
        }
    }
}

impl std::str::FromStr for TrainerKind {
    type Err = AtlsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "digital_sgd" => Ok(TrainerKind::DigitalSgd),
            "analog_sgd" => Ok(TrainerKind::AnalogSgd),
            "ttv2" => Ok(TrainerKind::Ttv2),
            "cttv2" => Ok(TrainerKind::Cttv2),
            other => Err(AtlsError::invalid(format!(
                "unknown trainer '{other}'; expected one of digital_sgd, analog_sgd, ttv2, cttv2"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Weight-update steps between column transfers. One step is one
    /// mini-batch, so values below 1 mean several transfers per batch.
    pub transfer_every: f64,
    /// Interface-compat flag: a weight-update step here is a mini-batch
    /// either way, so this does not change the cadence.
    pub units_in_mbatch: bool,
    /// Multiplier on the weight-tile step that sets the emission threshold:
    /// theta = dw_min(W) * max(1, autogranularity * lr).
    pub autogranularity: f64,
    /// Absolute threshold override. Wins over both the formula and
    /// `auto_scale`.
    pub granularity: Option<f64>,
    /// Scale the threshold by a running max of recent read magnitudes.
    pub auto_scale: bool,
    /// Decay applied to the H column (and the running read scale) at each
    /// transfer.
    pub auto_momentum: f64,
    /// Zero the H entry after emission instead of keeping the remainder.
    pub forget_buffer: bool,
    /// Per-transfer probability that a column's chopper sign flips.
    /// Only `Cttv2` flips; zero makes it identical to `Ttv2`.
    pub in_chop_prob: f64,
    /// Momentum on the fast-tile gradient. Zero keeps the pure per-sample
    /// pulsed path; positive values filter the batch gradient digitally and
    /// apply it to A as a deterministic dense update.
    pub device_momentum: f64,
    /// Constant offset added to every transfer reference (models a biased
    /// reference column).
    pub ref_offset: f64,
    /// Std of per-element Gaussian error frozen into the references at
    /// trainer construction (models imperfect reference programming).
    pub ref_program_error: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            batch_size: 8,
            transfer_every: 1.0,
            units_in_mbatch: false,
            autogranularity: 10_000.0,
            granularity: None,
            auto_scale: true,
            auto_momentum: 0.99,
            forget_buffer: true,
            in_chop_prob: 0.10,
            device_momentum: 0.0,
            ref_offset: 0.0,
            ref_program_error: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(AtlsError::invalid(format!("trainer.lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(AtlsError::invalid("trainer.batch_size must be >= 1"));
        }
        if !(self.transfer_every.is_finite() && self.transfer_every > 0.0) {
            return Err(AtlsError::invalid(format!(
                "trainer.transfer_every must be > 0, got {}",
                self.transfer_every
            )));
        }
        if !(self.autogranularity.is_finite() && self.autogranularity >= 0.0) {
            return Err(AtlsError::invalid(format!(
                "trainer.autogranularity must be >= 0, got {}",
                self.autogranularity
            )));
        }
        if let Some(g) = self.granularity {
            if !(g.is_finite() && g > 0.0) {
                return Err(AtlsError::invalid(format!(
                    "trainer.granularity must be > 0 when set, got {g}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.auto_momentum) {
            return Err(AtlsError::invalid(format!(
                "trainer.auto_momentum must be in [0, 1], got {}",
                self.auto_momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.in_chop_prob) {
            return Err(AtlsError::invalid(format!(
                "trainer.in_chop_prob must be in [0, 1], got {}",
                self.in_chop_prob
            )));
        }
        if !(self.device_momentum.is_finite() && (0.0..1.0).contains(&self.device_momentum)) {
            return Err(AtlsError::invalid(format!(
                "trainer.device_momentum must be in [0, 1), got {}",
                self.device_momentum
            )));
        }
        if !self.ref_offset.is_finite() {
            return Err(AtlsError::invalid("trainer.ref_offset must be finite"));
        }
        if !(self.ref_program_error.is_finite() && self.ref_program_error >= 0.0) {
            return Err(AtlsError::invalid(format!(
                "trainer.ref_program_error must be >= 0, got {}",
                self.ref_program_error
            )));
        }
        Ok(())
    }
}

/// Emission threshold before scaling: dw_min(W) * max(1, autogranularity * lr).
pub fn compute_granularity(w_reference_step: f64, lr: f64, autogranularity: f64) -> f64 {
    w_reference_step * (autogranularity * lr).max(1.0)
}

/// One explicit-gradient descent step: w <- w - lr * g.
pub fn digital_sgd_step(weights: &mut Matrix, grads: &Matrix, lr: f64) {
    weights.add_scaled(-lr, grads);
}

/// Per-layer transfer machinery: the fast tile, the digital buffer, and the
/// demodulation state.
struct TransferState {
    a_tile: AnalogTile,
    /// Digital accumulation buffer, same shape as the layer.
    h: Matrix,
    /// Reference value subtracted from each A read; the element's symmetry
    /// point plus any configured reference error.
    refs: Matrix,
    /// Per-column modulation sign applied to A-writes and reads.
    chopper: Vec<f64>,
    next_col: usize,
    /// Cadence accumulator; a transfer fires each time it reaches
    /// `transfer_every`.
    pending: f64,
    /// Running max of demodulated read magnitudes, used by auto_scale.
    running_scale: f64,
    theta_base: f64,
    momentum_buf: Option<Matrix>,
    /// Dedicated stream for chopper flips, so enabling or disabling the
    /// chopper never perturbs the tile streams.
    chop_rng: StreamRng,
}

impl TransferState {
    fn new(
        tile_cfg: &TileConfig,
        rows: usize,
        cols: usize,
        cfg: &TrainConfig,
        w_reference_step: f64,
        seed: u64,
    ) -> Result<TransferState> {
        let a_tile = AnalogTile::sample(tile_cfg, rows, cols, derive_key(&[seed, 1]))?;
        let mut ref_rng = StreamRng::new(derive_key(&[seed, 2]));
        let refs = Matrix::from_fn(rows, cols, |i, j| {
            let base = a_tile.elements()[i * cols + j].w_star + cfg.ref_offset;
            if cfg.ref_program_error > 0.0 {
                base + cfg.ref_program_error * ref_rng.normal()
            } else {
                base
            }
        });
        let momentum_buf = if cfg.device_momentum > 0.0 {
            Some(Matrix::zeros(rows, cols))
        } else {
            None
        };
        Ok(TransferState {
            a_tile,
            h: Matrix::zeros(rows, cols),
            refs,
            chopper: vec![1.0; cols],
            next_col: 0,
            pending: 0.0,
            running_scale: 0.0,
            theta_base: compute_granularity(w_reference_step, cfg.lr, cfg.autogranularity),
            momentum_buf,
            chop_rng: StreamRng::new(derive_key(&[seed, 3])),
        })
    }
}

/// Read one column of A, integrate it into H, and emit threshold crossings
/// to the weight tile as pulses.
fn transfer_column(
    state: &mut TransferState,
    w_tile: &mut AnalogTile,
    col: usize,
    cfg: &TrainConfig,
    chopped: bool,
) {
    let rows = state.a_tile.rows();
    let read = state.a_tile.read_column(col, true);
    let c = state.chopper[col];
    let mut max_r = 0.0f64;
    for i in 0..rows {
        let r = c * (read[i] - state.refs.get(i, col));
        state.h.set(i, col, cfg.auto_momentum * state.h.get(i, col) + r);
        max_r = max_r.max(r.abs());
    }
    if cfg.auto_scale {
        state.running_scale = (cfg.auto_momentum * state.running_scale).max(max_r);
    }
    let theta = match cfg.granularity {
        Some(g) => g,
        None => state.theta_base * if cfg.auto_scale { state.running_scale } else { 1.0 },
    };
    if theta > 0.0 {
        for i in 0..rows {
            let h = state.h.get(i, col);
            let n = ((h.abs() / theta).floor() as u64).min(MAX_TRANSFER_PULSES);
            if n == 0 {
                continue;
            }
            let dir = if h > 0.0 { PulseDir::Up } else { PulseDir::Down };
            for _ in 0..n {
                w_tile.pulse_element(i, col, dir);
            }
            let new_h = if cfg.forget_buffer {
                0.0
            } else {
                h - h.signum() * n as f64 * theta
            };
            state.h.set(i, col, new_h);
        }
    }
    if chopped && cfg.in_chop_prob > 0.0 && state.chop_rng.bernoulli(cfg.in_chop_prob) {
        state.chopper[col] = -state.chopper[col];
    }
}

fn drain_transfers(
    state: &mut TransferState,
    w_tile: &mut AnalogTile,
    cfg: &TrainConfig,
    chopped: bool,
) {
    while state.pending >= cfg.transfer_every {
        state.pending -= cfg.transfer_every;
        let col = state.next_col;
        state.next_col = (state.next_col + 1) % state.a_tile.cols();
        transfer_column(state, w_tile, col, cfg, chopped);
    }
}

pub struct Trainer {
    kind: TrainerKind,
    cfg: TrainConfig,
    /// One slot per linear layer in visit order; `Some` only for analog
    /// layers under a transfer trainer.
    states: Vec<Option<TransferState>>,
    steps: u64,
}

impl Trainer {
    pub fn new(
        kind: TrainerKind,
        cfg: TrainConfig,
        tile_cfg: &TileConfig,
        model: &mut ModelGraph,
        seed: u64,
    ) -> Result<Trainer> {
        cfg.validate()?;
        match kind {
            TrainerKind::DigitalSgd => {
                if !model.is_fully_digital() {
                    return Err(AtlsError::invalid(
                        "digital_sgd cannot train analog layers; use analog_sgd, ttv2, or cttv2",
                    ));
                }
            }
            TrainerKind::Ttv2 | TrainerKind::Cttv2 => {
                if model.is_fully_digital() {
                    return Err(AtlsError::invalid(format!(
                        "{} requires at least one analog layer; convert the model first",
                        kind.name()
                    )));
                }
            }
            TrainerKind::AnalogSgd => {}
        }
        let mut states = Vec::new();
        let mut failure = None;
        if matches!(kind, TrainerKind::Ttv2 | TrainerKind::Cttv2) {
            model.for_each_linear_mut(&mut |idx, layer| {
                if failure.is_some() {
                    return;
                }
                let out_scale = layer.out_scale();
                if let Some(tile) = layer.tile_mut() {
                    let (rows, cols) = (tile.rows(), tile.cols());
                    // reference_step is in device units. A layer with an
                    // output scale moves its effective weights by that factor
                    // per pulse, so the transfer threshold must demand
                    // proportionally more accumulated evidence per pulse or
                    // scaled layers churn faster than fresh ones.
                    let step = tile.reference_step() * out_scale;
                    match TransferState::new(
                        tile_cfg,
                        rows,
                        cols,
                        &cfg,
                        step,
                        derive_key(&[seed, idx as u64]),
                    ) {
                        Ok(s) => states.push(Some(s)),
                        Err(e) => failure = Some(e),
                    }
                } else {
                    states.push(None);
                }
            });
        }
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(Trainer {
            kind,
            cfg,
            states,
            steps: 0,
        })
    }

    pub fn kind(&self) -> TrainerKind {
        self.kind
    }

    /// Diagnostic snapshot of one layer's transfer state:
    /// (running_scale, theta_base, mean |H|, max |H|). Temporary.
    pub fn debug_transfer(&self, idx: usize) -> Option<(f64, f64, f64, f64)> {
        let s = self.states.get(idx)?.as_ref()?;
        let n = s.h.data().len() as f64;
        let mean_h = s.h.data().iter().map(|v| v.abs()).sum::<f64>() / n;
        let max_h = s.h.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Some((s.running_scale, s.theta_base, mean_h, max_h))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Forward, cross-entropy, backward, and one optimizer application.
    /// Returns the batch loss.
    pub fn step(&mut self, model: &mut ModelGraph, xs: &Matrix, ys: &[usize]) -> Result<f64> {
        let logits = model.forward_batch(xs, true);
        let (loss, dlogits) = cross_entropy(&logits, ys)?;
        if !loss.is_finite() {
            return Err(AtlsError::NonFiniteLoss {
                context: format!("training step {}", self.steps),
            });
        }
        model.backward_batch(&dlogits);
        self.apply_batch_updates(model);
        self.steps += 1;
        Ok(loss)
    }

    /// Apply one batch of updates from the gradients currently cached in the
    /// model (set by `backward_batch`). Split out from `step` so callers with
    /// custom losses can drive the trainers too.
    pub fn apply_batch_updates(&mut self, model: &mut ModelGraph) {
        let lr = self.cfg.lr;
        match self.kind {
            TrainerKind::DigitalSgd => {
                model.for_each_linear_mut(&mut |_, layer| layer.apply_digital_sgd(lr));
            }
            TrainerKind::AnalogSgd => {
                model.for_each_linear_mut(&mut |_, layer| {
                    if layer.is_analog() {
                        let pairs: Vec<(Vec<f64>, Vec<f64>)> = layer
                            .update_pairs()
                            .map(|(x, d)| (x.to_vec(), d.to_vec()))
                            .collect();
                        let tile = layer.tile_mut().expect("analog layer has a tile");
                        for (x, d) in &pairs {
                            tile.rank_one_update(x, d, lr);
                        }
                    }
                    layer.apply_digital_sgd(lr);
                });
            }
            TrainerKind::Ttv2 | TrainerKind::Cttv2 => {
                let chopped = self.kind == TrainerKind::Cttv2;
                let cfg = &self.cfg;
                let states = &mut self.states;
                model.for_each_linear_mut(&mut |idx, layer| {
                    let state = match states.get_mut(idx).and_then(|s| s.as_mut()) {
                        Some(s) => s,
                        None => {
                            layer.apply_digital_sgd(lr);
                            return;
                        }
                    };
                    let pairs: Vec<(Vec<f64>, Vec<f64>)> = layer
                        .update_pairs()
                        .map(|(x, d)| (x.to_vec(), d.to_vec()))
                        .collect();
                    let w_tile = layer.tile_mut().expect("transfer state implies a tile");
                    if let Some(buf) = state.momentum_buf.as_mut() {
                        // Momentum path: filter the batch gradient digitally,
                        // then apply it to A as one dense update.
                        for v in buf.data_mut() {
                            *v *= cfg.device_momentum;
                        }
                        for (x, d) in &pairs {
                            let xc: Vec<f64> =
                                x.iter().zip(&state.chopper).map(|(v, c)| v * c).collect();
                            buf.add_outer(1.0, d, &xc);
                        }
                        let buf = state.momentum_buf.take().expect("buffer present");
                        state.a_tile.apply_dense_update(&buf, lr);
                        state.momentum_buf = Some(buf);
                    } else {
                        for (x, d) in &pairs {
                            let xc: Vec<f64> =
                                x.iter().zip(&state.chopper).map(|(v, c)| v * c).collect();
                            state.a_tile.rank_one_update(&xc, d, lr);
                        }
                    }
                    state.pending += 1.0;
                    drain_transfers(state, w_tile, cfg, chopped);
                    layer.apply_digital_sgd(lr);
                });
            }
        }
    }
}

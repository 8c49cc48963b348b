//! A crossbar tile: a device array with analog matrix-vector arithmetic
//! and pulsed rank-1 updates.
//!
//! Weights live in the device elements. The forward path computes W x plus
//! output noise, the backward path W^T d, and training either fires
//! stochastic pulse trains (the hardware path) or applies the deterministic
//! expectation of those trains (the oracle path). A tile owns its random
//! stream, so a (config, seed) pair fixes every noisy op it will ever do.

use crate::device::{pulse_update, sample_device_array, DeviceElement, DeviceSpec, PulseDir};
use crate::error::{AtlsError, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_key, StreamRng};

/// Default pulse-train length for stochastic updates.
pub const DEFAULT_BIT_LENGTH: u32 = 31;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateMode {
    /// Coincidence-coded Bernoulli pulse trains of the given length.
    StochasticPulses { bit_length: u32 },
    /// Deterministic expectation of the pulse trains.
    ExpectedUpdate,
}

impl UpdateMode {
    pub fn stochastic() -> Self {
        UpdateMode::StochasticPulses {
            bit_length: DEFAULT_BIT_LENGTH,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TileConfig {
    pub device: DeviceSpec,
    /// Additive Gaussian noise std on every analog MVM output component.
    pub out_noise_std: f64,
    /// Additive Gaussian noise std on weight reads.
    pub read_noise_std: f64,
    pub update_mode: UpdateMode,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            device: DeviceSpec::default(),
            out_noise_std: 0.0,
            read_noise_std: 0.0,
            update_mode: UpdateMode::stochastic(),
        }
    }
}

impl TileConfig {
    /// Exact digital twin behavior: ideal devices, expected updates, and no
    /// noise anywhere.
    pub fn ideal() -> Self {
        TileConfig {
            device: DeviceSpec::ideal_linear(),
            out_noise_std: 0.0,
            read_noise_std: 0.0,
            update_mode: UpdateMode::ExpectedUpdate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        for (name, v) in [
            ("out_noise_std", self.out_noise_std),
            ("read_noise_std", self.read_noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AtlsError::invalid(format!("device.{name} must be >= 0, got {v}")));
            }
        }
        if let UpdateMode::StochasticPulses { bit_length } = self.update_mode {
            if bit_length == 0 {
                return Err(AtlsError::invalid("device.bit_length must be >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AnalogTile {
    rows: usize,
    cols: usize,
    elements: Vec<DeviceElement>,
    /// Tile-level reference step used to normalize pulse probabilities;
    /// the spec mean, not a per-element value, because pulse trains are
    /// shared across whole lines.
    reference_step: f64,
    out_noise_std: f64,
    read_noise_std: f64,
    update_mode: UpdateMode,
    rng: StreamRng,
    program_count: u32,
}

impl AnalogTile {
    /// Sample a rows x cols tile. Element realizations and the operational
    /// noise stream are forked from the seed independently.
    pub fn sample(cfg: &TileConfig, rows: usize, cols: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let elements = sample_device_array(&cfg.device, rows, cols, derive_key(&[seed, 0]))?;
        Ok(AnalogTile {
            rows,
            cols,
            elements,
            reference_step: cfg.device.reference_step(),
            out_noise_std: cfg.out_noise_std,
            read_noise_std: cfg.read_noise_std,
            update_mode: cfg.update_mode,
            rng: StreamRng::new(derive_key(&[seed, 1])),
            program_count: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn reference_step(&self) -> f64 {
        self.reference_step
    }

    pub fn update_mode(&self) -> UpdateMode {
        self.update_mode
    }

    /// How many times program_weights has run on this tile.
    pub fn program_count(&self) -> u32 {
        self.program_count
    }

    #[inline]
    pub fn element(&self, i: usize, j: usize) -> &DeviceElement {
        &self.elements[i * self.cols + j]
    }

    #[inline]
    fn element_mut(&mut self, i: usize, j: usize) -> &mut DeviceElement {
        &mut self.elements[i * self.cols + j]
    }

    /// Noise-free weight copy that does not consume from the tile stream.
    pub fn clean_weights(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.elements[i * self.cols + j].w)
    }

    pub fn elements(&self) -> &[DeviceElement] {
        &self.elements
    }

    /// Program target weights onto the devices: w = clip(target + tau * g)
    /// with one independent Gaussian per element. tau = 0 skips the noise
    /// draw entirely so programming is exact.
    pub fn program_weights(&mut self, target: &Matrix, tau: f64) -> Result<()> {
        if target.rows() != self.rows || target.cols() != self.cols {
            return Err(AtlsError::invalid(format!(
                "program target is {}x{}, tile is {}x{}",
                target.rows(),
                target.cols(),
                self.rows,
                self.cols
            )));
        }
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(AtlsError::invalid(format!(
                "programming noise must be >= 0, got {tau}"
            )));
        }
        for i in 0..self.rows {
            for j in 0..self.cols {
                let mut w = target.get(i, j);
                if tau > 0.0 {
                    w += tau * self.rng.normal();
                }
                let e = self.element_mut(i, j);
                e.w = e.clip(w);
            }
        }
        self.program_count += 1;
        Ok(())
    }

    /// y = W x (+ output noise).
    pub fn forward(&mut self, x: &[f64], with_noise: bool) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "forward input length");
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let base = i * self.cols;
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self.elements[base + j].w * x[j];
            }
            y[i] = acc;
        }
        if with_noise && self.out_noise_std > 0.0 {
            for v in &mut y {
                *v += self.out_noise_std * self.rng.normal();
            }
        }
        y
    }

    /// d_in = W^T d (+ output noise), the error backpropagated through the
    /// same conductances.
    pub fn backward(&mut self, delta: &[f64], with_noise: bool) -> Vec<f64> {
        assert_eq!(delta.len(), self.rows, "backward input length");
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let base = i * self.cols;
            let di = delta[i];
            for j in 0..self.cols {
                y[j] += self.elements[base + j].w * di;
            }
        }
        if with_noise && self.out_noise_std > 0.0 {
            for v in &mut y {
                *v += self.out_noise_std * self.rng.normal();
            }
        }
        y
    }

    pub fn read_weights(&mut self, with_noise: bool) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let mut w = self.element(i, j).w;
                if with_noise && self.read_noise_std > 0.0 {
                    w += self.read_noise_std * self.rng.normal();
                }
                m.set(i, j, w);
            }
        }
        m
    }

    pub fn read_column(&mut self, col: usize, with_noise: bool) -> Vec<f64> {
        assert!(col < self.cols, "column {col} out of range");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut w = self.element(i, col).w;
            if with_noise && self.read_noise_std > 0.0 {
                w += self.read_noise_std * self.rng.normal();
            }
            out[i] = w;
        }
        out
    }

    /// Rank-1 gradient update: the analog equivalent of
    /// W -= lr * delta x^T, dispatched on the configured update mode.
    /// x indexes columns (inputs), delta indexes rows (outputs).
    pub fn rank_one_update(&mut self, x: &[f64], delta: &[f64], lr: f64) {
        assert_eq!(x.len(), self.cols, "update input length");
        assert_eq!(delta.len(), self.rows, "update delta length");
        match self.update_mode {
            UpdateMode::ExpectedUpdate => self.expected_update(x, delta, lr),
            UpdateMode::StochasticPulses { bit_length } => {
                self.stochastic_update(x, delta, lr, bit_length)
            }
        }
    }

    /// Deterministic expectation of the pulse trains: each element moves by
    /// -lr * delta_i * x_j scaled by its current step size over the tile
    /// reference step (exactly 1 for mean ideal-linear devices).
    fn expected_update(&mut self, x: &[f64], delta: &[f64], lr: f64) {
        for i in 0..self.rows {
            if delta[i] == 0.0 {
                continue;
            }
            for j in 0..self.cols {
                self.nudge_element(i, j, -lr * delta[i] * x[j]);
            }
        }
    }

    /// Move element (i, j) by `du` weight units, scaled by the element's
    /// current step size over the tile reference step and clipped to its
    /// bounds.
    #[inline]
    fn nudge_element(&mut self, i: usize, j: usize, du: f64) {
        if du == 0.0 {
            return;
        }
        let dir = if du > 0.0 { PulseDir::Up } else { PulseDir::Down };
        let step_scale = {
            let e = self.element(i, j);
            e.expected_step(dir) / self.reference_step
        };
        let e = self.element_mut(i, j);
        e.w = e.clip(e.w + du * step_scale);
    }

    /// Deterministic update from a dense gradient matrix:
    /// w_ij <- clip(w_ij - lr * g_ij * s_ij). Shapes must match the tile.
    pub fn apply_dense_update(&mut self, grads: &Matrix, lr: f64) {
        assert_eq!((grads.rows(), grads.cols()), (self.rows, self.cols));
        for i in 0..self.rows {
            for j in 0..self.cols {
                self.nudge_element(i, j, -lr * grads.get(i, j));
            }
        }
    }

    /// Fire one programming pulse at a single element, drawing any
    /// cycle-to-cycle noise from the tile stream.
    pub fn pulse_element(&mut self, i: usize, j: usize, dir: PulseDir) {
        assert!(i < self.rows && j < self.cols);
        let e = &mut self.elements[i * self.cols + j];
        pulse_update(e, dir, &mut self.rng);
    }

    /// Coincidence-coded update. Row lines carry x pulses with probability
    /// |x_j| / A_x, column lines carry error pulses with probability
    /// |delta_i| * A_x * lr / (dw_ref * BL); both are clipped to 1, which
    /// bounds the work a single batch can do. A coincidence fires one
    /// device pulse in the direction of -x_j * delta_i.
    fn stochastic_update(&mut self, x: &[f64], delta: &[f64], lr: f64, bit_length: u32) {
        let amp = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if amp == 0.0 || lr == 0.0 {
            return;
        }
        let bl = bit_length as f64;
        let p_x: Vec<f64> = x.iter().map(|v| (v.abs() / amp).min(1.0)).collect();
        let p_d: Vec<f64> = delta
            .iter()
            .map(|v| (v.abs() * amp * lr / (self.reference_step * bl)).min(1.0))
            .collect();
        if p_d.iter().all(|&p| p == 0.0) {
            return;
        }
        let mut x_fire = vec![false; self.cols];
        let mut d_fire = vec![false; self.rows];
        for _slot in 0..bit_length {
            for j in 0..self.cols {
                x_fire[j] = p_x[j] > 0.0 && self.rng.bernoulli(p_x[j]);
            }
            for i in 0..self.rows {
                d_fire[i] = p_d[i] > 0.0 && self.rng.bernoulli(p_d[i]);
            }
            for i in 0..self.rows {
                if !d_fire[i] {
                    continue;
                }
                for j in 0..self.cols {
                    if !x_fire[j] {
                        continue;
                    }
                    let dir = if x[j] * delta[i] < 0.0 {
                        PulseDir::Up
                    } else {
                        PulseDir::Down
                    };
                    // Split borrows: pulse noise comes from the tile stream.
                    let e = &mut self.elements[i * self.cols + j];
                    pulse_update(e, dir, &mut self.rng);
                }
            }
        }
    }
}

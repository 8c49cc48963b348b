//! Resistive device models: how a single crossbar weight responds to
//! programming pulses.
//!
//! The soft-bounds law makes each incremental step proportional to the
//! remaining distance to the bound being approached, so conductance
//! saturates smoothly and balanced up/down traffic contracts the weight
//! toward its symmetry point. The ideal-linear law keeps a fixed step and
//! wide bounds; it exists as the exact limit against which trainers are
//! checked.

use crate::error::{AtlsError, Result};
use crate::rng::StreamRng;

/// Bounds of the ideal-linear device, wide enough that clipping never
/// matters for sanely scaled networks.
pub const IDEAL_BOUND: f64 = 10.0;

/// Relative floor applied to device-to-device step variation: a sampled
/// step never drops below this fraction of its mean.
pub const MIN_STEP_FRACTION: f64 = 1e-3;

/// Realized per-element bound ranges are kept at least this fraction of the
/// mean range so a noisy draw cannot invert b_max and b_min.
pub const MIN_RANGE_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceKind {
    SoftBounds,
    IdealLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PulseDir {
    Up,
    Down,
}

/// Statistical description of a device population. Per-element realizations
/// are drawn from this by [`sample_device_array`].
#[derive(Debug, Clone)]
pub struct DeviceSpec {
    pub kind: DeviceKind,
    /// Mean single-pulse step in the up direction, measured at the symmetry
    /// point (weight units).
    pub dw_min_up: f64,
    /// Mean single-pulse step in the down direction.
    pub dw_min_down: f64,
    /// Mean weight bounds; only their difference (the range) matters for
    /// bound placement, which is controlled by `sps_percent`.
    pub w_max_mean: f64,
    pub w_min_mean: f64,
    /// Relative device-to-device spread of the step sizes.
    pub dw_min_dtod: f64,
    /// Relative cycle-to-cycle noise on each realized step.
    pub dw_min_c2c: f64,
    /// Relative device-to-device spread of each bound.
    pub bounds_dtod: f64,
    /// Symmetry-point skew: the percentage of the weight range above zero.
    /// 50 keeps bounds symmetric.
    pub sps_percent: f64,
    /// Symmetry-point variability: std of a joint shift of both bounds,
    /// as a percentage of the range.
    pub spv_percent: f64,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        DeviceSpec {
            kind: DeviceKind::SoftBounds,
            dw_min_up: 0.002,
            dw_min_down: 0.002,
            w_max_mean: 1.0,
            w_min_mean: -1.0,
            dw_min_dtod: 0.0,
            dw_min_c2c: 0.0,
            bounds_dtod: 0.0,
            sps_percent: 50.0,
            spv_percent: 0.0,
        }
    }
}

impl DeviceSpec {
    pub fn ideal_linear() -> Self {
        DeviceSpec {
            kind: DeviceKind::IdealLinear,
            ..DeviceSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("dw_min_up", self.dw_min_up),
            ("dw_min_down", self.dw_min_down),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(AtlsError::invalid(format!(
                    "device.{name} must be a positive finite number, got {v}"
                )));
            }
        }
        let nonneg = [
            ("dw_min_dtod", self.dw_min_dtod),
            ("dw_min_c2c", self.dw_min_c2c),
            ("bounds_dtod", self.bounds_dtod),
            ("spv_percent", self.spv_percent),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AtlsError::invalid(format!(
                    "device.{name} must be >= 0, got {v}"
                )));
            }
        }
        if !(self.w_max_mean.is_finite() && self.w_min_mean.is_finite())
            || self.w_max_mean <= self.w_min_mean
        {
            return Err(AtlsError::invalid(format!(
                "device bounds require w_max > w_min, got ({}, {})",
                self.w_max_mean, self.w_min_mean
            )));
        }
        if !(self.sps_percent > 0.0 && self.sps_percent < 100.0) {
            return Err(AtlsError::invalid(format!(
                "device.sps_percent must lie strictly between 0 and 100, got {}",
                self.sps_percent
            )));
        }
        Ok(())
    }

    pub fn range(&self) -> f64 {
        self.w_max_mean - self.w_min_mean
    }

    /// Mean bounds after applying the skew to the configured range.
    pub fn mean_bounds(&self) -> Result<(f64, f64)> {
        skew_to_bounds(self.sps_percent, self.range())
    }

    /// The (b_max, b_min) pair a freshly deployed mean element gets:
    /// skewed bounds for soft-bounds devices, the fixed wide window for
    /// ideal ones.
    pub fn nominal_bounds(&self) -> Result<(f64, f64)> {
        match self.kind {
            DeviceKind::SoftBounds => self.mean_bounds(),
            DeviceKind::IdealLinear => Ok((IDEAL_BOUND, -IDEAL_BOUND)),
        }
    }

    /// Tile-level reference step: harmonic mean of the two step sizes,
    /// which is exactly the per-pulse step a mean soft-bounds device takes
    /// at its symmetry point.
    pub fn reference_step(&self) -> f64 {
        2.0 * self.dw_min_up * self.dw_min_down / (self.dw_min_up + self.dw_min_down)
    }
}

/// Place bounds for a given skew percentage and range: the upper bound is
/// `sps` percent of the range, the lower bound sits one range below it.
pub fn skew_to_bounds(sps_percent: f64, range: f64) -> Result<(f64, f64)> {
    if !(range.is_finite() && range > 0.0) {
        return Err(AtlsError::invalid(format!(
            "skew_to_bounds requires a positive range, got {range}"
        )));
    }
    if !(sps_percent > 0.0 && sps_percent < 100.0) {
        return Err(AtlsError::invalid(format!(
            "skew percentage must lie strictly between 0 and 100, got {sps_percent}"
        )));
    }
    let b_max = sps_percent * range / 100.0;
    let b_min = b_max - range;
    Ok((b_max, b_min))
}

/// Inverse of [`skew_to_bounds`]: the percentage of the range above zero.
pub fn measure_skew(b_max: f64, b_min: f64) -> Result<f64> {
    if !(b_max.is_finite() && b_min.is_finite()) || b_max <= b_min {
        return Err(AtlsError::invalid(format!(
            "measure_skew requires b_max > b_min, got ({b_max}, {b_min})"
        )));
    }
    Ok(b_max * 100.0 / (b_max - b_min))
}

/// Weight at which the expected up-step equals the expected down-step.
/// With step coefficients proportional to dw_up and dw_down the range
/// cancels, leaving a dw-weighted average of the bounds.
pub fn symmetry_point(dw_up: f64, dw_down: f64, b_max: f64, b_min: f64) -> f64 {
    (dw_up * b_max + dw_down * b_min) / (dw_up + dw_down)
}

/// One realized device. All fields are frozen at sampling time except `w`.
#[derive(Debug, Clone)]
pub struct DeviceElement {
    pub kind: DeviceKind,
    pub w: f64,
    /// Realized step sizes (at the symmetry point for soft bounds, absolute
    /// for ideal-linear).
    pub dw_up: f64,
    pub dw_down: f64,
    pub b_max: f64,
    pub b_min: f64,
    /// Realized symmetry point; the rest state the element is sampled at.
    pub w_star: f64,
    /// Relative cycle-to-cycle noise applied per pulse.
    pub c2c: f64,
}

impl DeviceElement {
    /// Deterministic step the element would take for one pulse at its
    /// current weight, before cycle-to-cycle noise.
    pub fn expected_step(&self, dir: PulseDir) -> f64 {
        match self.kind {
            DeviceKind::IdealLinear => match dir {
                PulseDir::Up => self.dw_up,
                PulseDir::Down => self.dw_down,
            },
            DeviceKind::SoftBounds => {
                let range = self.b_max - self.b_min;
                match dir {
                    PulseDir::Up => 2.0 * self.dw_up / range * (self.b_max - self.w),
                    PulseDir::Down => 2.0 * self.dw_down / range * (self.w - self.b_min),
                }
            }
        }
    }

    pub fn clip(&self, w: f64) -> f64 {
        w.clamp(self.b_min, self.b_max)
    }
}

/// Apply one programming pulse. Cycle-to-cycle noise is multiplicative on
/// the step; a noise draw that would reverse the step is clipped to zero,
/// and the result always stays inside the element's bounds.
pub fn pulse_update(elem: &mut DeviceElement, dir: PulseDir, rng: &mut StreamRng) {
    let noise = if elem.c2c > 0.0 {
        (1.0 + elem.c2c * rng.normal()).max(0.0)
    } else {
        1.0
    };
    let step = elem.expected_step(dir) * noise;
    let w = match dir {
        PulseDir::Up => elem.w + step,
        PulseDir::Down => elem.w - step,
    };
    elem.w = elem.clip(w);
}

/// Draw a rows x cols population of device realizations. Each element gets
/// its own counter stream forked from the seed, so the array is identical
/// for a given (spec, seed) no matter how or where it is evaluated, and
/// all-zero spread fields reproduce the spec means exactly.
pub fn sample_device_array(
    spec: &DeviceSpec,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<Vec<DeviceElement>> {
    spec.validate()?;
    if rows == 0 || cols == 0 {
        return Err(AtlsError::invalid(format!(
            "device array must be non-empty, got {rows}x{cols}"
        )));
    }
    let (b_max_mean, b_min_mean) = spec.nominal_bounds()?;
    let range = b_max_mean - b_min_mean;
    let root = StreamRng::new(seed);
    let mut elems = Vec::with_capacity(rows * cols);
    for idx in 0..rows * cols {
        let mut rng = root.fork(idx as u64);
        let dw_up = sample_step(spec.dw_min_up, spec.dw_min_dtod, &mut rng);
        let dw_down = sample_step(spec.dw_min_down, spec.dw_min_dtod, &mut rng);
        let (b_max, b_min) = match spec.kind {
            DeviceKind::IdealLinear => (b_max_mean, b_min_mean),
            DeviceKind::SoftBounds => {
                let mut hi = b_max_mean;
                let mut lo = b_min_mean;
                if spec.bounds_dtod > 0.0 {
                    hi *= 1.0 + spec.bounds_dtod * rng.normal();
                    lo *= 1.0 + spec.bounds_dtod * rng.normal();
                }
                if spec.spv_percent > 0.0 {
                    // Joint shift of both bounds moves the symmetry point
                    // by exactly the same offset.
                    let offset = spec.spv_percent / 100.0 * range * rng.normal();
                    hi += offset;
                    lo += offset;
                }
                let min_range = MIN_RANGE_FRACTION * range;
                if hi - lo < min_range {
                    let mid = 0.5 * (hi + lo);
                    hi = mid + 0.5 * min_range;
                    lo = mid - 0.5 * min_range;
                }
                (hi, lo)
            }
        };
        let w_star = match spec.kind {
            DeviceKind::SoftBounds => symmetry_point(dw_up, dw_down, b_max, b_min),
            DeviceKind::IdealLinear => 0.0,
        };
        elems.push(DeviceElement {
            kind: spec.kind,
            w: w_star,
            dw_up,
            dw_down,
            b_max,
            b_min,
            w_star,
            c2c: spec.dw_min_c2c,
        });
    }
    Ok(elems)
}

fn sample_step(mean: f64, dtod: f64, rng: &mut StreamRng) -> f64 {
    if dtod > 0.0 {
        (mean * (1.0 + dtod * rng.normal())).max(MIN_STEP_FRACTION * mean)
    } else {
        mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn soft_elem(dw_up: f64, dw_down: f64, b_max: f64, b_min: f64, w: f64) -> DeviceElement {
        DeviceElement {
            kind: DeviceKind::SoftBounds,
            w,
            dw_up,
            dw_down,
            b_max,
            b_min,
            w_star: symmetry_point(dw_up, dw_down, b_max, b_min),
            c2c: 0.0,
        }
    }

    #[test]
    fn skew_places_bounds() {
        let (hi, lo) = skew_to_bounds(60.0, 2.0).unwrap();
        assert!((hi - 1.2).abs() < 1e-15);
        assert!((lo + 0.8).abs() < 1e-15);
        let (hi, lo) = skew_to_bounds(50.0, 2.0).unwrap();
        assert_eq!((hi, lo), (1.0, -1.0));
        assert!(skew_to_bounds(0.0, 2.0).is_err());
        assert!(skew_to_bounds(100.0, 2.0).is_err());
        assert!(skew_to_bounds(50.0, 0.0).is_err());
    }

    #[test]
    fn measured_skew_inverts_placement_exactly() {
        for s in [1.0, 25.0, 50.0, 60.0, 75.0, 99.0] {
            let (hi, lo) = skew_to_bounds(s, 2.0).unwrap();
            assert_eq!(measure_skew(hi, lo).unwrap(), s, "skew {s}");
        }
        assert!(measure_skew(-1.0, 1.0).is_err());
    }

    #[test]
    fn symmetry_point_closed_forms() {
        // Equal steps: midpoint of the bounds.
        assert_eq!(symmetry_point(0.01, 0.01, 1.0, -1.0), 0.0);
        // Up twice as strong as down pushes the balance point up to 1/3.
        let w = symmetry_point(0.02, 0.01, 1.0, -1.0);
        assert!((w - 1.0 / 3.0).abs() < 1e-15, "{w}");
        // Skewed bounds at 60%: midpoint of (1.2, -0.8).
        let (hi, lo) = skew_to_bounds(60.0, 2.0).unwrap();
        let w = symmetry_point(0.002, 0.002, hi, lo);
        assert!((w - 0.2).abs() < 1e-12, "{w}");
    }

    /// Independent oracle: bisect the pulse-balance equation
    /// expected_step(up) - expected_step(down) = 0 and compare against the
    /// closed form.
    #[test]
    fn symmetry_point_matches_bisection() {
        let cases = [
            (0.002, 0.002, 1.0, -1.0),
            (0.004, 0.002, 1.0, -1.0),
            (0.001, 0.005, 1.2, -0.8),
            (0.01, 0.003, 0.5, -1.5),
        ];
        for (du, dd, hi, lo) in cases {
            let balance = |w: f64| {
                let e = soft_elem(du, dd, hi, lo, w);
                e.expected_step(PulseDir::Up) - e.expected_step(PulseDir::Down)
            };
            let (mut a, mut b) = (lo, hi);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if balance(m) > 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            let oracle = 0.5 * (a + b);
            let closed = symmetry_point(du, dd, hi, lo);
            assert!(
                (oracle - closed).abs() < 1e-10,
                "du={du} dd={dd}: {oracle} vs {closed}"
            );
        }
    }

    #[test]
    fn soft_bounds_step_at_symmetry_equals_reference() {
        // The per-pulse step at w* is the harmonic mean of the two steps.
        let e = soft_elem(0.004, 0.002, 1.2, -0.8, 0.0);
        let mut e = e;
        e.w = e.w_star;
        let h = 2.0 * 0.004 * 0.002 / (0.004 + 0.002);
        assert!((e.expected_step(PulseDir::Up) - h).abs() < 1e-15);
        assert!((e.expected_step(PulseDir::Down) - h).abs() < 1e-15);
    }

    #[test]
    fn pulse_step_examples() {
        let mut rng = StreamRng::new(1);
        // At the midpoint of (1, -1) with dw 0.01, one up pulse moves 0.01.
        let mut e = soft_elem(0.01, 0.01, 1.0, -1.0, 0.0);
        pulse_update(&mut e, PulseDir::Up, &mut rng);
        assert!((e.w - 0.01).abs() < 1e-15);
        // At the bound the step vanishes.
        let mut e = soft_elem(0.01, 0.01, 1.0, -1.0, 1.0);
        pulse_update(&mut e, PulseDir::Up, &mut rng);
        assert_eq!(e.w, 1.0);
    }

    #[test]
    fn ideal_linear_step_is_position_independent() {
        let mut rng = StreamRng::new(2);
        for start in [0.0, 5.0, -5.0] {
            let mut e = DeviceElement {
                kind: DeviceKind::IdealLinear,
                w: start,
                dw_up: 0.01,
                dw_down: 0.01,
                b_max: IDEAL_BOUND,
                b_min: -IDEAL_BOUND,
                w_star: 0.0,
                c2c: 0.0,
            };
            pulse_update(&mut e, PulseDir::Up, &mut rng);
            assert!((e.w - start - 0.01).abs() < 1e-15);
            // n up then n down returns to the start (up to accumulation
            // rounding), which soft bounds cannot do.
            for _ in 0..10 {
                pulse_update(&mut e, PulseDir::Up, &mut rng);
            }
            for _ in 0..11 {
                pulse_update(&mut e, PulseDir::Down, &mut rng);
            }
            assert!((e.w - start).abs() < 1e-12, "w {} start {start}", e.w);
        }
    }

    #[test]
    fn soft_bounds_round_trip_does_not_return() {
        // Saturation makes up-then-down path-dependent, unlike ideal-linear.
        let mut rng = StreamRng::new(3);
        let mut e = soft_elem(0.05, 0.05, 1.0, -1.0, 0.5);
        for _ in 0..10 {
            pulse_update(&mut e, PulseDir::Up, &mut rng);
        }
        for _ in 0..10 {
            pulse_update(&mut e, PulseDir::Down, &mut rng);
        }
        assert!((e.w - 0.5).abs() > 1e-3, "w {}", e.w);
    }

    #[test]
    fn alternating_pulses_contract_to_symmetry_point() {
        // Balanced traffic must bring the weight within 1e-3 of w* inside
        // 1e4 pairs, for skews 50/60, joint bound offsets 0 and +-0.1, and
        // starts near either bound. Distance is checked after every pulse
        // because the steady cycle straddles w* by half a step.
        let mut rng = StreamRng::new(4);
        for sps in [50.0, 60.0] {
            for offset in [0.0, 0.1, -0.1] {
                let (hi, lo) = skew_to_bounds(sps, 2.0).unwrap();
                let (hi, lo) = (hi + offset, lo + offset);
                for start in [-0.9, 0.0, 0.9] {
                    let mut e = soft_elem(0.002, 0.002, hi, lo, e_clip(start, hi, lo));
                    let target = e.w_star;
                    let mut converged = false;
                    'pairs: for _ in 0..10_000 {
                        for dir in [PulseDir::Up, PulseDir::Down] {
                            pulse_update(&mut e, dir, &mut rng);
                            if (e.w - target).abs() < 1e-3 {
                                converged = true;
                                break 'pairs;
                            }
                        }
                    }
                    assert!(
                        converged,
                        "sps {sps} offset {offset} start {start}: w {} vs {target}",
                        e.w
                    );
                }
            }
        }
    }

    fn e_clip(w: f64, hi: f64, lo: f64) -> f64 {
        w.clamp(lo, hi)
    }

    #[test]
    fn c2c_noise_never_reverses_a_pulse() {
        let mut rng = StreamRng::new(5);
        let mut e = soft_elem(0.01, 0.01, 1.0, -1.0, -0.5);
        e.c2c = 10.0; // absurd noise; raw factor often negative
        for _ in 0..1000 {
            let before = e.w;
            pulse_update(&mut e, PulseDir::Up, &mut rng);
            assert!(e.w >= before, "up pulse moved down: {before} -> {}", e.w);
        }
    }

    #[test]
    fn zero_spread_sampling_reproduces_means() {
        let spec = DeviceSpec::default();
        let elems = sample_device_array(&spec, 4, 3, 99).unwrap();
        for e in &elems {
            assert_eq!(e.dw_up, 0.002);
            assert_eq!(e.dw_down, 0.002);
            assert_eq!(e.b_max, 1.0);
            assert_eq!(e.b_min, -1.0);
            assert_eq!(e.w_star, 0.0);
            assert_eq!(e.w, e.w_star);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let spec = DeviceSpec {
            dw_min_dtod: 0.3,
            bounds_dtod: 0.1,
            spv_percent: 5.0,
            ..DeviceSpec::default()
        };
        let a = sample_device_array(&spec, 6, 5, 1234).unwrap();
        let b = sample_device_array(&spec, 6, 5, 1234).unwrap();
        let c = sample_device_array(&spec, 6, 5, 1235).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.w.to_bits(), y.w.to_bits());
            assert_eq!(x.dw_up.to_bits(), y.dw_up.to_bits());
            assert_eq!(x.b_max.to_bits(), y.b_max.to_bits());
        }
        assert!(a.iter().zip(&c).any(|(x, y)| x.dw_up != y.dw_up));
    }

    #[test]
    fn spv_shifts_symmetry_points_with_configured_spread() {
        let spec = DeviceSpec {
            spv_percent: 5.0,
            ..DeviceSpec::default()
        };
        let elems = sample_device_array(&spec, 400, 250, 2024).unwrap();
        let n = elems.len() as f64;
        let mean = elems.iter().map(|e| e.w_star).sum::<f64>() / n;
        let var = elems
            .iter()
            .map(|e| (e.w_star - mean) * (e.w_star - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        // 5% of a range of 2 is an offset std of 0.10.
        assert!((std - 0.10).abs() < 0.003, "std {std}");
        assert!(mean.abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn dtod_steps_are_floored() {
        let spec = DeviceSpec {
            dw_min_dtod: 5.0, // most raw draws would be negative
            ..DeviceSpec::default()
        };
        let elems = sample_device_array(&spec, 50, 50, 7).unwrap();
        let floor = MIN_STEP_FRACTION * spec.dw_min_up;
        assert!(elems.iter().all(|e| e.dw_up >= floor && e.dw_down >= floor));
        assert!(elems.iter().any(|e| e.dw_up == floor));
    }

    #[test]
    fn ideal_linear_sampling_uses_wide_fixed_bounds() {
        let spec = DeviceSpec {
            spv_percent: 20.0,
            bounds_dtod: 0.5,
            ..DeviceSpec::ideal_linear()
        };
        let elems = sample_device_array(&spec, 3, 3, 1).unwrap();
        for e in &elems {
            assert_eq!((e.b_max, e.b_min), (IDEAL_BOUND, -IDEAL_BOUND));
            assert_eq!(e.w_star, 0.0);
        }
    }

    proptest! {
        #[test]
        fn skew_round_trip_is_tight(s in 0.01f64..99.99, r in 0.1f64..10.0) {
            let (hi, lo) = skew_to_bounds(s, r).unwrap();
            let back = measure_skew(hi, lo).unwrap();
            prop_assert!((back - s).abs() <= 1e-12 * s.max(1.0));
        }

        #[test]
        fn pulses_never_escape_bounds(
            seed in 0u64..1000,
            du in 0.001f64..0.2,
            dd in 0.001f64..0.2,
            c2c in 0.0f64..0.5,
            dirs in proptest::collection::vec(proptest::bool::ANY, 1..200),
        ) {
            let mut rng = StreamRng::new(seed);
            let mut e = soft_elem(du, dd, 1.2, -0.8, 0.0);
            e.w = e.w_star;
            e.c2c = c2c;
            for up in dirs {
                let dir = if up { PulseDir::Up } else { PulseDir::Down };
                pulse_update(&mut e, dir, &mut rng);
                prop_assert!(e.w >= e.b_min && e.w <= e.b_max);
            }
        }

        #[test]
        fn symmetry_point_lies_inside_bounds(
            du in 0.0005f64..0.05,
            dd in 0.0005f64..0.05,
            sps in 1.0f64..99.0,
        ) {
            let (hi, lo) = skew_to_bounds(sps, 2.0).unwrap();
            let w = symmetry_point(du, dd, hi, lo);
            prop_assert!(w > lo && w < hi);
        }
    }
}

//! FeFET conductance macro-model.
//!
//! A device stores an integer level in `[0, L-1]`. The ideal channel
//! conductance is a linear, invertible function of the level. Programming a
//! device adds two Gaussian error terms on top of the ideal value: a fixed
//! per-device offset drawn once at creation (device-to-device variation) and a
//! fresh sample for every program event (cycle-to-cycle variation).
//!
//! All conductances are in µS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{DrawKind, RngKey, StreamId};

pub const MAX_LEVELS: u32 = 8;

/// Fraction of `g_off` below which programmed conductance is clamped.
pub const CLAMP_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroModel {
    pub g_off: f64,
    pub g_on: f64,
    pub levels: u32,
    pub sigma_d2d: f64,
    pub sigma_c2c: f64,
}

impl Default for MacroModel {
    /// 1 µS / 10 µS window, binary, both sigmas at 5% of the window.
    fn default() -> Self {
        Self {
            g_off: 1.0,
            g_on: 10.0,
            levels: 2,
            sigma_d2d: 0.45,
            sigma_c2c: 0.45,
        }
    }
}

impl MacroModel {
    pub fn new(g_off: f64, g_on: f64, levels: u32, sigma_d2d: f64, sigma_c2c: f64) -> Result<Self> {
        let model = Self {
            g_off,
            g_on,
            levels,
            sigma_d2d,
            sigma_c2c,
        };
        model.validate()?;
        Ok(model)
    }

    /// Default window with both variation terms disabled.
    pub fn noiseless() -> Self {
        Self {
            sigma_d2d: 0.0,
            sigma_c2c: 0.0,
            ..Self::default()
        }
    }

    pub fn with_sigmas(self, sigma_d2d: f64, sigma_c2c: f64) -> Self {
        Self {
            sigma_d2d,
            sigma_c2c,
            ..self
        }
    }

    pub fn with_levels(self, levels: u32) -> Self {
        Self { levels, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.g_off, self.g_on, self.sigma_d2d, self.sigma_c2c]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain("macro-model parameters must be finite"));
        }
        if !(self.g_off > 0.0 && self.g_on > self.g_off) {
            return Err(Error::domain(format!(
                "require g_on > g_off > 0, got g_off={} g_on={}",
                self.g_off, self.g_on
            )));
        }
        if !(2..=MAX_LEVELS).contains(&self.levels) {
            return Err(Error::domain(format!(
                "levels must be in [2, {MAX_LEVELS}], got {}",
                self.levels
            )));
        }
        if self.sigma_d2d < 0.0 || self.sigma_c2c < 0.0 {
            return Err(Error::domain("variation sigmas must be non-negative"));
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma_d2d == 0.0 && self.sigma_c2c == 0.0
    }

    pub fn max_level(&self) -> u32 {
        self.levels - 1
    }

    /// Conductance window `g_on - g_off`.
    pub fn window(&self) -> f64 {
        self.g_on - self.g_off
    }

    pub fn clamp_floor(&self) -> f64 {
        CLAMP_FRACTION * self.g_off
    }

    pub fn level_to_conductance(&self, level: u32) -> Result<f64> {
        if level > self.max_level() {
            return Err(Error::domain(format!(
                "level {level} outside [0, {}]",
                self.max_level()
            )));
        }
        // Interpolation form keeps both endpoints bit-exact.
        let t = f64::from(level) / f64::from(self.max_level());
        Ok(self.g_off * (1.0 - t) + self.g_on * t)
    }

    /// Nearest level, ties rounding up, saturating outside the window.
    pub fn conductance_to_level(&self, g: f64) -> Result<u32> {
        if !g.is_finite() {
            return Err(Error::domain(format!("conductance {g} is not finite")));
        }
        let pos = (g - self.g_off) / self.window() * f64::from(self.max_level());
        let idx = (pos + 0.5).floor();
        Ok(idx.clamp(0.0, f64::from(self.max_level())) as u32)
    }
}

/// One FeFET.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeFetCell {
    pub level: u32,
    pub d2d_offset: f64,
    pub g_programmed: f64,
    /// Number of program events this cell has seen, including creation.
    pub program_events: u64,
}

impl FeFetCell {
    /// Draws the device offset from `key` and programs level 0 once.
    pub fn create(model: &MacroModel, key: RngKey) -> Self {
        let mut cell = Self {
            level: 0,
            d2d_offset: key.gaussian(DrawKind::DeviceOffset, model.sigma_d2d),
            g_programmed: model.g_off,
            program_events: 0,
        };
        cell.program(model, 0, key)
            .expect("level 0 is always in range");
        cell
    }

    /// Program `target_level`, drawing one cycle-to-cycle sample from `key`.
    pub fn program(&mut self, model: &MacroModel, target_level: u32, key: RngKey) -> Result<()> {
        let ideal = model.level_to_conductance(target_level)?;
        let noise = key.gaussian(DrawKind::ProgramNoise, model.sigma_c2c);
        self.level = target_level;
        self.g_programmed = (ideal + self.d2d_offset + noise).max(model.clamp_floor());
        self.program_events += 1;
        Ok(())
    }

    /// Move the level by `pulses` steps (clamped to the valid range) and
    /// reprogram. Returns the signed number of steps actually taken. A zero
    /// pulse count is a no-op and does not count as a program event.
    pub fn apply_pulses(&mut self, model: &MacroModel, pulses: i64, key: RngKey) -> i64 {
        if pulses == 0 {
            return 0;
        }
        let old = i64::from(self.level);
        let new = old.saturating_add(pulses).clamp(0, i64::from(model.max_level()));
        self.program(model, new as u32, key)
            .expect("clamped level is in range");
        new - old
    }
}

/// One programmed-conductance reading from the calibration protocol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub device_id: u64,
    pub row: u32,
    pub col: u32,
    pub target_level: u32,
    pub cycle: u32,
    pub conductance: f64,
}

/// Layer id used for the calibration array's RNG streams, disjoint from any
/// network layer.
pub const CALIBRATION_LAYER: u32 = u32::MAX;

/// Program every device of a `rows x cols` array to the lowest level
/// `cycles` times, then to the highest level `cycles` times, recording the
/// conductance after each program event.
///
/// Records are ordered by device, then level, then cycle.
pub fn run_calibration_protocol(
    rows: u32,
    cols: u32,
    model: &MacroModel,
    cycles: u32,
    seed: u64,
) -> Result<Vec<MeasurementRecord>> {
    model.validate()?;
    if rows == 0 || cols == 0 {
        return Err(Error::domain(format!(
            "calibration array must be non-empty, got {rows}x{cols}"
        )));
    }
    if cycles == 0 {
        return Err(Error::domain("calibration needs at least one cycle"));
    }
    let extremes = [0, model.max_level()];
    let per_device = extremes.len() * cycles as usize;
    let mut records = Vec::with_capacity(rows as usize * cols as usize * per_device);
    for row in 0..rows {
        for col in 0..cols {
            let device_id = u64::from(row) * u64::from(cols) + u64::from(col);
            let key = RngKey::new(seed, StreamId::new(CALIBRATION_LAYER, row, col, 0), 0);
            let mut cell = FeFetCell::create(model, key);
            for &level in &extremes {
                for cycle in 1..=cycles {
                    cell.program(model, level, key.with_event(cell.program_events))?;
                    records.push(MeasurementRecord {
                        device_id,
                        row,
                        col,
                        target_level: level,
                        cycle,
                        conductance: cell.g_programmed,
                    });
                }
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(g_off: f64, g_on: f64) -> MacroModel {
        MacroModel::new(g_off, g_on, 2, 0.0, 0.0).unwrap()
    }

    fn key(row: u32, col: u32) -> RngKey {
        RngKey::new(11, StreamId::new(0, row, col, 0), 0)
    }

    fn mean_std(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    #[test]
    fn level_map_endpoints_and_interior() {
        let m = binary(1.0, 10.0);
        assert_eq!(m.level_to_conductance(0).unwrap(), 1.0);
        assert_eq!(m.level_to_conductance(1).unwrap(), 10.0);
        let m5 = MacroModel::new(2.0, 10.0, 5, 0.0, 0.0).unwrap();
        // 2 + 3 * (8 / 4)
        assert_eq!(m5.level_to_conductance(3).unwrap(), 8.0);
        assert!(matches!(m.level_to_conductance(2), Err(Error::Domain(_))));
    }

    #[test]
    fn level_map_is_strictly_increasing_and_invertible() {
        for levels in 2..=MAX_LEVELS {
            let m = MacroModel::new(0.3, 7.1, levels, 0.0, 0.0).unwrap();
            let gs: Vec<f64> = (0..levels).map(|l| m.level_to_conductance(l).unwrap()).collect();
            assert!(gs.windows(2).all(|w| w[0] < w[1]));
            for (l, g) in gs.iter().enumerate() {
                assert_eq!(m.conductance_to_level(*g).unwrap(), l as u32);
            }
        }
    }

    #[test]
    fn inverse_rounds_at_midpoint_and_saturates() {
        let m = binary(1.0, 10.0);
        assert_eq!(m.conductance_to_level(5.4).unwrap(), 0);
        assert_eq!(m.conductance_to_level(5.5).unwrap(), 1);
        assert_eq!(m.conductance_to_level(100.0).unwrap(), 1);
        assert_eq!(m.conductance_to_level(0.001).unwrap(), 0);
        assert!(m.conductance_to_level(f64::NAN).is_err());
        assert!(m.conductance_to_level(f64::INFINITY).is_err());
    }

    #[test]
    fn model_validation() {
        assert!(MacroModel::new(0.0, 10.0, 2, 0.0, 0.0).is_err());
        assert!(MacroModel::new(10.0, 1.0, 2, 0.0, 0.0).is_err());
        assert!(MacroModel::new(1.0, 10.0, 1, 0.0, 0.0).is_err());
        assert!(MacroModel::new(1.0, 10.0, 9, 0.0, 0.0).is_err());
        assert!(MacroModel::new(1.0, 10.0, 2, -0.1, 0.0).is_err());
        assert!(MacroModel::default().validate().is_ok());
    }

    #[test]
    fn noiseless_cell_is_exact() {
        let m = binary(1.0, 10.0);
        let mut c = FeFetCell::create(&m, key(0, 0));
        assert_eq!(c.d2d_offset, 0.0);
        assert_eq!(c.g_programmed, 1.0);
        c.program(&m, 1, key(0, 0).with_event(1)).unwrap();
        assert_eq!(c.g_programmed, 10.0);
        assert_eq!(c.level, 1);
        assert!(c.program(&m, 2, key(0, 0)).is_err());
    }

    #[test]
    fn d2d_offsets_have_requested_statistics() {
        let m = MacroModel::noiseless().with_sigmas(0.5, 0.0);
        let offsets: Vec<f64> = (0..100_000u32)
            .map(|i| FeFetCell::create(&m, key(i / 1000, i % 1000)).d2d_offset)
            .collect();
        let (mean, std) = mean_std(&offsets);
        // 1% of sigma for the mean (a 3.2-sigma bound at n = 1e5), 2% for std.
        assert!(mean.abs() < 0.01 * 0.5, "mean {mean}");
        assert!((std - 0.5).abs() < 0.02 * 0.5, "std {std}");
        let again = FeFetCell::create(&m, key(3, 4));
        assert_eq!(again.d2d_offset, FeFetCell::create(&m, key(3, 4)).d2d_offset);
    }

    #[test]
    fn c2c_spread_of_repeated_programming() {
        let m = MacroModel::noiseless().with_sigmas(0.3, 0.2);
        let k = key(5, 5);
        let mut c = FeFetCell::create(&m, k);
        let gs: Vec<f64> = (0..100)
            .map(|_| {
                c.program(&m, 1, k.with_event(c.program_events)).unwrap();
                c.g_programmed
            })
            .collect();
        let (mean, std) = mean_std(&gs);
        // chi-square 99 dof: 0.2 * [0.70, 1.30] is well outside the 99.9% band
        assert!((std - 0.2).abs() < 0.3 * 0.2, "std {std}");
        // mean tracks ideal + offset, within 4 standard errors
        assert!((mean - (10.0 + c.d2d_offset)).abs() < 4.0 * 0.2 / 10.0);
    }

    #[test]
    fn c2c_draws_are_uncorrelated_across_events() {
        let m = MacroModel::noiseless().with_sigmas(0.0, 1.0);
        let n = 10_000u32;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let k = key(i, 0);
            let mut c = FeFetCell::create(&m, k);
            c.program(&m, 1, k.with_event(1)).unwrap();
            xs.push(c.g_programmed);
            c.program(&m, 1, k.with_event(2)).unwrap();
            ys.push(c.g_programmed);
        }
        let (mx, sx) = mean_std(&xs);
        let (my, sy) = mean_std(&ys);
        let cov = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / f64::from(n - 1);
        let corr = cov / (sx * sy);
        assert!(corr.abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn conductance_never_goes_below_floor() {
        let m = MacroModel::noiseless().with_sigmas(5.0, 5.0);
        for i in 0..2000 {
            let c = FeFetCell::create(&m, key(i, 7));
            assert!(c.g_programmed >= m.clamp_floor());
            assert!(c.g_programmed > 0.0);
        }
    }

    #[test]
    fn pulses() {
        let m = binary(1.0, 10.0);
        let k = key(0, 0);
        let mut c = FeFetCell::create(&m, k);
        let before = c;
        assert_eq!(c.apply_pulses(&m, 0, k.with_event(1)), 0);
        assert_eq!(c, before);

        assert_eq!(c.apply_pulses(&m, 1, k.with_event(1)), 1);
        assert_eq!((c.level, c.g_programmed), (1, 10.0));

        assert_eq!(c.apply_pulses(&m, 5, k.with_event(2)), 0);
        assert_eq!(c.level, 1);

        assert_eq!(c.apply_pulses(&m, -7, k.with_event(3)), -1);
        assert_eq!((c.level, c.g_programmed), (0, 1.0));

        let m8 = MacroModel::noiseless().with_levels(8);
        let mut c = FeFetCell::create(&m8, k);
        assert_eq!(c.apply_pulses(&m8, 3, k.with_event(1)), 3);
        assert_eq!(c.apply_pulses(&m8, 10, k.with_event(2)), 4);
        assert_eq!(c.level, 7);
    }

    #[test]
    fn calibration_protocol_shape() {
        let m = MacroModel::default();
        let recs = run_calibration_protocol(2, 2, &m, 100, 3).unwrap();
        assert_eq!(recs.len(), 800);
        for dev in 0..4u64 {
            for level in [0, 1] {
                let n = recs
                    .iter()
                    .filter(|r| r.device_id == dev && r.target_level == level)
                    .count();
                assert_eq!(n, 100);
            }
        }
        assert!(recs.iter().all(|r| (1..=100).contains(&r.cycle)));
        assert!(run_calibration_protocol(0, 2, &m, 100, 3).is_err());
        assert!(run_calibration_protocol(2, 2, &m, 0, 3).is_err());
    }

    #[test]
    fn noiseless_calibration_records_are_ideal() {
        let m = MacroModel::noiseless().with_levels(4);
        let recs = run_calibration_protocol(3, 2, &m, 5, 1).unwrap();
        for r in recs {
            assert_eq!(r.conductance, m.level_to_conductance(r.target_level).unwrap());
        }
    }
}

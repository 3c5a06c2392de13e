//! Differential-pair FeFET crossbar.
//!
//! Each synapse is a pair of devices; its signed weight is the conductance
//! difference normalised by the conductance window,
//! `W_eff = (g_plus - g_minus) / (g_on - g_off)`. A binary `+1` is stored as
//! `(L-1, 0)` and `-1` as `(0, L-1)`. Reads are noiseless, so `W_eff` is
//! cached and only refreshed for synapses touched by a program event.

use std::io::{BufRead, Write};

use crate::device::{FeFetCell, MacroModel};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, SignMatrix};
use crate::rng::{RngKey, StreamId};

pub const DUMP_HEADER: &str = "row,col,pair,level,g_programmed_uS";

const PLUS: u8 = 0;
const MINUS: u8 = 1;

#[derive(Clone, Debug)]
pub struct CrossbarArray {
    rows: usize,
    cols: usize,
    model: MacroModel,
    seed: u64,
    layer: u32,
    plus: Vec<FeFetCell>,
    minus: Vec<FeFetCell>,
    /// Array-wide program round, used as the event counter of RNG keys.
    round: u64,
    weights: Matrix,
}

/// Outcome of a multilevel pulse update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PulseReport {
    pub program_events: u64,
    /// Sum over synapses of |level change actually applied|.
    pub absorbed: u64,
    /// Synapses whose level changed.
    pub synapses: u64,
}

/// One line of the array state dump.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviceRecord {
    pub row: usize,
    pub col: usize,
    pub pair: u8,
    pub level: u32,
    pub g_programmed: f64,
}

impl CrossbarArray {
    /// Create every device with a fresh D2D offset and program all synapses
    /// to `-1`.
    pub fn build(rows: usize, cols: usize, model: MacroModel, seed: u64, layer: u32) -> Result<Self> {
        model.validate()?;
        if rows == 0 || cols == 0 {
            return Err(Error::domain(format!(
                "crossbar dimensions must be positive, got {rows}x{cols}"
            )));
        }
        let n = rows * cols;
        let mut plus = Vec::with_capacity(n);
        let mut minus = Vec::with_capacity(n);
        let top = model.max_level();
        for i in 0..rows {
            for j in 0..cols {
                plus.push(FeFetCell::create(&model, Self::key_for(seed, layer, i, j, PLUS, 0)));
                let key = Self::key_for(seed, layer, i, j, MINUS, 0);
                let mut cell = FeFetCell::create(&model, key);
                cell.program(&model, top, key.with_event(1))?;
                minus.push(cell);
            }
        }
        let mut array = Self {
            rows,
            cols,
            model,
            seed,
            layer,
            plus,
            minus,
            round: 1,
            weights: Matrix::zeros(rows, cols),
        };
        for idx in 0..n {
            array.refresh(idx);
        }
        Ok(array)
    }

    /// Rebuild an array from dumped device states. D2D offsets are not part
    /// of the dump and are restored as zero.
    pub fn from_records(
        rows: usize,
        cols: usize,
        model: MacroModel,
        records: &[DeviceRecord],
    ) -> Result<Self> {
        let mut array = Self::build(rows, cols, model.with_sigmas(0.0, 0.0), 0, 0)?;
        array.model = model;
        let mut seen = vec![[false; 2]; rows * cols];
        for r in records {
            if r.row >= rows || r.col >= cols || r.pair > 1 {
                return Err(Error::format(format!(
                    "device record ({}, {}, {}) outside {rows}x{cols} array",
                    r.row, r.col, r.pair
                )));
            }
            if r.level > model.max_level() || !(r.g_programmed.is_finite() && r.g_programmed > 0.0) {
                return Err(Error::format(format!(
                    "invalid level/conductance at ({}, {}, {})",
                    r.row, r.col, r.pair
                )));
            }
            let idx = r.row * cols + r.col;
            let cell = if r.pair == PLUS {
                &mut array.plus[idx]
            } else {
                &mut array.minus[idx]
            };
            cell.level = r.level;
            cell.d2d_offset = 0.0;
            cell.g_programmed = r.g_programmed;
            seen[idx][r.pair as usize] = true;
        }
        if seen.iter().flatten().any(|s| !s) {
            return Err(Error::format("device dump does not cover every device"));
        }
        for idx in 0..rows * cols {
            array.refresh(idx);
        }
        Ok(array)
    }

    fn key_for(seed: u64, layer: u32, row: usize, col: usize, pair: u8, event: u64) -> RngKey {
        RngKey::new(seed, StreamId::new(layer, row as u32, col as u32, pair), event)
    }

    fn key(&self, idx: usize, pair: u8) -> RngKey {
        Self::key_for(self.seed, self.layer, idx / self.cols, idx % self.cols, pair, self.round)
    }

    fn refresh(&mut self, idx: usize) {
        let w = (self.plus[idx].g_programmed - self.minus[idx].g_programmed) / self.model.window();
        self.weights.as_mut_slice()[idx] = w;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn model(&self) -> &MacroModel {
        &self.model
    }

    pub fn plus_cells(&self) -> &[FeFetCell] {
        &self.plus
    }

    pub fn minus_cells(&self) -> &[FeFetCell] {
        &self.minus
    }

    /// `level_plus - level_minus` for one synapse.
    pub fn synapse_level(&self, row: usize, col: usize) -> i32 {
        let idx = row * self.cols + col;
        self.plus[idx].level as i32 - self.minus[idx].level as i32
    }

    /// Sign of every synapse; a zero level difference reads as `-1`.
    pub fn signs(&self) -> SignMatrix {
        let data = self
            .plus
            .iter()
            .zip(&self.minus)
            .map(|(p, m)| if p.level > m.level { 1 } else { -1 })
            .collect();
        SignMatrix::from_vec(self.rows, self.cols, data).expect("shape is consistent")
    }

    /// Current effective weight matrix. Reads are noiseless, so this is the
    /// snapshot every VMM between two program operations sees.
    pub fn effective_weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn vmm_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_finite(x)?;
        self.weights.vmm_forward(x)
    }

    pub fn vmm_backward(&self, delta: &[f64]) -> Result<Vec<f64>> {
        check_finite(delta)?;
        self.weights.vmm_backward(delta)
    }

    /// Program a binary weight matrix. Only synapses whose stored state
    /// differs from the target are touched; each touched synapse costs one
    /// program event per device whose level changes. Returns the number of
    /// device program events.
    pub fn program_signs(&mut self, target: &SignMatrix) -> Result<u64> {
        if target.shape() != (self.rows, self.cols) {
            return Err(Error::domain(format!(
                "sign matrix {:?} does not match {}x{} array",
                target.shape(),
                self.rows,
                self.cols
            )));
        }
        self.round += 1;
        let top = self.model.max_level();
        let mut events = 0;
        for (idx, &s) in target.as_slice().iter().enumerate() {
            let (lp, lm) = if s > 0 { (top, 0) } else { (0, top) };
            let mut touched = false;
            if self.plus[idx].level != lp {
                let key = self.key(idx, PLUS);
                self.plus[idx].program(&self.model, lp, key)?;
                events += 1;
                touched = true;
            }
            if self.minus[idx].level != lm {
                let key = self.key(idx, MINUS);
                self.minus[idx].program(&self.model, lm, key)?;
                events += 1;
                touched = true;
            }
            if touched {
                self.refresh(idx);
            }
        }
        Ok(events)
    }

    /// Move each synapse's signed level `level_plus - level_minus` by the
    /// given pulse count, clamped to `[-(L-1), L-1]`. Negative levels are
    /// held on the minus device, positive ones on the plus device; the other
    /// device of the pair sits at level 0.
    pub fn apply_pulses(&mut self, pulses: &[i32]) -> Result<PulseReport> {
        if pulses.len() != self.rows * self.cols {
            return Err(Error::domain(format!(
                "pulse matrix has {} entries, array has {}",
                pulses.len(),
                self.rows * self.cols
            )));
        }
        self.round += 1;
        let top = i64::from(self.model.max_level());
        let mut report = PulseReport::default();
        for (idx, &p) in pulses.iter().enumerate() {
            if p == 0 {
                continue;
            }
            let lp = i64::from(self.plus[idx].level);
            let lm = i64::from(self.minus[idx].level);
            let current = lp - lm;
            let target = (current + i64::from(p)).clamp(-top, top);
            let (tp, tm) = if target >= 0 { (target, 0) } else { (0, -target) };
            let (kp, km) = (self.key(idx, PLUS), self.key(idx, MINUS));
            let dp = self.plus[idx].apply_pulses(&self.model, tp - lp, kp);
            let dm = self.minus[idx].apply_pulses(&self.model, tm - lm, km);
            report.program_events += u64::from(dp != 0) + u64::from(dm != 0);
            report.absorbed += (dp - dm).unsigned_abs();
            report.synapses += u64::from(dp != dm);
            if dp != 0 || dm != 0 {
                self.refresh(idx);
            }
        }
        Ok(report)
    }

    pub fn device_records(&self) -> impl Iterator<Item = DeviceRecord> + '_ {
        (0..self.rows * self.cols).flat_map(move |idx| {
            let (row, col) = (idx / self.cols, idx % self.cols);
            [(PLUS, &self.plus[idx]), (MINUS, &self.minus[idx])]
                .into_iter()
                .map(move |(pair, c)| DeviceRecord {
                    row,
                    col,
                    pair,
                    level: c.level,
                    g_programmed: c.g_programmed,
                })
        })
    }

    /// Write the per-device state as CSV with header [`DUMP_HEADER`].
    pub fn write_dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{DUMP_HEADER}")?;
        for r in self.device_records() {
            writeln!(out, "{}", r.to_csv())?;
        }
        Ok(())
    }
}

impl DeviceRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.row, self.col, self.pair, self.level, self.g_programmed
        )
    }

    /// Parse the five dump fields.
    pub fn parse_fields(fields: &[&str]) -> Option<Self> {
        match fields {
            [row, col, pair, level, g] => Some(Self {
                row: row.parse().ok()?,
                col: col.parse().ok()?,
                pair: pair.parse().ok()?,
                level: level.parse().ok()?,
                g_programmed: g.parse().ok()?,
            }),
            _ => None,
        }
    }
}

/// Read a dump written by [`CrossbarArray::write_dump`].
pub fn read_dump<R: BufRead>(input: R) -> Result<Vec<DeviceRecord>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::format(e.to_string()))?
        .unwrap_or_default();
    if header != DUMP_HEADER {
        return Err(Error::format(format!("expected header `{DUMP_HEADER}`, got `{header}`")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::format(e.to_string()))?;
        let fields: Vec<&str> = line.split(',').collect();
        let rec = DeviceRecord::parse_fields(&fields)
            .ok_or_else(|| Error::format(format!("line {}: malformed device record", n + 2)))?;
        out.push(rec);
    }
    Ok(out)
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain("VMM input contains non-finite values"))
    }
}

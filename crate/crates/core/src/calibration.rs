//! Fitting the Gaussian variation model from program-cycle measurements,
//! and the on-disk formats for measurements and macro-models.
//!
//! Variance is split the one-way random-effects way: the spread of
//! per-device means is device-to-device variation, the spread of repeated
//! programs of one device at one level is cycle-to-cycle variation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::device::{MacroModel, MeasurementRecord};
use crate::error::{Error, Result};

pub const MEASUREMENT_HEADER: &str = "device_id,row,col,target_level,cycle,conductance_uS";

/// Sample mean and unbiased (n - 1) standard deviation.
pub fn fit_gaussian(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::domain(format!(
            "need at least 2 samples for a Gaussian fit, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// Statistics of one programmed level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelStats {
    pub level: u32,
    /// Grand mean over devices of per-device means.
    pub mean: f64,
    /// Std-dev across devices of per-device means.
    pub sigma_d2d: f64,
    /// RMS of per-device standard deviations.
    pub sigma_c2c: f64,
    pub devices: usize,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FittedStats {
    pub low: LevelStats,
    pub high: LevelStats,
    /// Std-dev across devices of each device's mean deviation from the
    /// level means, pooled over both levels.
    pub sigma_d2d: f64,
    /// RMS of per-device, per-level standard deviations over both levels.
    pub sigma_c2c: f64,
    pub devices: usize,
    pub samples: usize,
}

struct Group {
    mean: f64,
    std: f64,
    n: usize,
}

fn level_stats(level: u32, groups: &BTreeMap<u64, Group>) -> Result<LevelStats> {
    let means: Vec<f64> = groups.values().map(|g| g.mean).collect();
    let (mean, sigma_d2d) = fit_gaussian(&means)
        .map_err(|_| Error::domain(format!("level {level}: need at least 2 devices")))?;
    let sigma_c2c = rms(groups.values().map(|g| g.std));
    Ok(LevelStats {
        level,
        mean,
        sigma_d2d,
        sigma_c2c,
        devices: groups.len(),
        samples: groups.values().map(|g| g.n).sum(),
    })
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (sum / n as f64).sqrt()
}

/// Fit the variation macro-model for an `levels`-level device from
/// calibration records covering levels `0` and `levels - 1`.
pub fn fit_variation_model(records: &[MeasurementRecord], levels: u32) -> Result<(FittedStats, MacroModel)> {
    if levels < 2 {
        return Err(Error::domain(format!("levels must be at least 2, got {levels}")));
    }
    let top = levels - 1;
    let mut samples: [BTreeMap<u64, Vec<f64>>; 2] = [BTreeMap::new(), BTreeMap::new()];
    for r in records {
        let slot = match r.target_level {
            0 => 0,
            l if l == top => 1,
            l => {
                return Err(Error::domain(format!(
                    "record for device {} targets level {l}; only levels 0 and {top} are calibrated",
                    r.device_id
                )))
            }
        };
        samples[slot].entry(r.device_id).or_default().push(r.conductance);
    }
    for (slot, level) in [(0, 0), (1, top)] {
        if samples[slot].is_empty() {
            return Err(Error::domain(format!("no calibration records for level {level}")));
        }
    }
    if samples[0].keys().ne(samples[1].keys()) {
        return Err(Error::domain("devices differ between the two calibrated levels"));
    }

    let mut groups: [BTreeMap<u64, Group>; 2] = [BTreeMap::new(), BTreeMap::new()];
    for (slot, level) in [(0, 0), (1, top)] {
        for (&dev, xs) in &samples[slot] {
            let (mean, std) = fit_gaussian(xs).map_err(|_| {
                Error::domain(format!(
                    "device {dev} level {level}: need at least 2 cycles, got {}",
                    xs.len()
                ))
            })?;
            groups[slot].insert(dev, Group { mean, std, n: xs.len() });
        }
    }
    let low = level_stats(0, &groups[0])?;
    let high = level_stats(top, &groups[1])?;

    let pooled_offsets: Vec<f64> = groups[0]
        .iter()
        .zip(&groups[1])
        .map(|((_, lo), (_, hi))| 0.5 * ((lo.mean - low.mean) + (hi.mean - high.mean)))
        .collect();
    let (_, sigma_d2d) = fit_gaussian(&pooled_offsets)?;
    let sigma_c2c = rms(groups.iter().flat_map(|g| g.values().map(|x| x.std)));

    let stats = FittedStats {
        low,
        high,
        sigma_d2d,
        sigma_c2c,
        devices: low.devices,
        samples: low.samples + high.samples,
    };
    let model = MacroModel::new(low.mean, high.mean, levels, sigma_d2d, sigma_c2c)?;
    Ok((stats, model))
}

impl FittedStats {
    /// Human-readable summary, one `key = value` per line.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for l in [&self.low, &self.high] {
            let _ = writeln!(s, "level_{}_mean_uS = {}", l.level, l.mean);
            let _ = writeln!(s, "level_{}_sigma_d2d_uS = {}", l.level, l.sigma_d2d);
            let _ = writeln!(s, "level_{}_sigma_c2c_uS = {}", l.level, l.sigma_c2c);
            let _ = writeln!(s, "level_{}_samples = {}", l.level, l.samples);
        }
        let _ = writeln!(s, "pooled_sigma_d2d_uS = {}", self.sigma_d2d);
        let _ = writeln!(s, "pooled_sigma_c2c_uS = {}", self.sigma_c2c);
        let _ = writeln!(s, "devices = {}", self.devices);
        let _ = writeln!(s, "samples = {}", self.samples);
        s
    }
}

pub fn write_measurements<W: Write>(mut out: W, records: &[MeasurementRecord]) -> std::io::Result<()> {
    writeln!(out, "{MEASUREMENT_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.device_id, r.row, r.col, r.target_level, r.cycle, r.conductance
        )?;
    }
    out.flush()
}

pub fn write_measurement_csv(path: &Path, records: &[MeasurementRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_measurements(BufWriter::new(file), records).map_err(|e| Error::io(path, e))
}

fn parse_record(line: &str) -> std::result::Result<MeasurementRecord, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 fields, got {}", fields.len()));
    }
    fn field<T: std::str::FromStr>(name: &str, v: &str) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("field `{name}`: cannot parse `{v}`"))
    }
    let conductance: f64 = field("conductance_uS", fields[5])?;
    if !conductance.is_finite() {
        return Err(format!("field `conductance_uS`: `{}` is not finite", fields[5]));
    }
    Ok(MeasurementRecord {
        device_id: field("device_id", fields[0])?,
        row: field("row", fields[1])?,
        col: field("col", fields[2])?,
        target_level: field("target_level", fields[3])?,
        cycle: field("cycle", fields[4])?,
        conductance,
    })
}

/// Parse measurement CSV text. Every malformed row is reported, with its
/// 1-based line number, in a single format error.
pub fn parse_measurements<R: BufRead>(input: R) -> Result<Vec<MeasurementRecord>> {
    let mut lines = input.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::format(e.to_string()))?,
        None => return Err(Error::format("measurement file is empty; missing header")),
    };
    if header != MEASUREMENT_HEADER {
        return Err(Error::format(format!(
            "line 1: expected header `{MEASUREMENT_HEADER}`, got `{header}`"
        )));
    }
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line.map_err(|e| Error::format(format!("line {lineno}: {e}")))?;
        if line.is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(r) => records.push(r),
            Err(msg) => problems.push(format!("line {lineno}: {msg}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::format(problems.join("; ")));
    }
    Ok(records)
}

pub fn parse_measurement_csv(path: &Path) -> Result<Vec<MeasurementRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_measurements(BufReader::new(file))
}

const MODEL_KEYS: [&str; 5] = ["g_off_uS", "g_on_uS", "levels", "sigma_d2d_uS", "sigma_c2c_uS"];

/// Macro-model file text: one `key = value` line per parameter, values
/// printed with the shortest representation that parses back exactly.
pub fn format_macro_model(model: &MacroModel) -> String {
    format!(
        "g_off_uS = {}\ng_on_uS = {}\nlevels = {}\nsigma_d2d_uS = {}\nsigma_c2c_uS = {}\n",
        model.g_off, model.g_on, model.levels, model.sigma_d2d, model.sigma_c2c
    )
}

pub fn parse_macro_model(text: &str) -> Result<MacroModel> {
    let mut values: BTreeMap<&str, &str> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("line {}: expected `key = value`", idx + 1)))?;
        let key = key.trim();
        if !MODEL_KEYS.contains(&key) {
            return Err(Error::format(format!("line {}: unknown key `{key}`", idx + 1)));
        }
        if values.insert(key, value.trim()).is_some() {
            return Err(Error::format(format!("line {}: duplicate key `{key}`", idx + 1)));
        }
    }
    let real = |key: &str| -> Result<f64> {
        let v = values
            .get(key)
            .ok_or_else(|| Error::format(format!("missing key `{key}`")))?;
        v.parse()
            .map_err(|_| Error::format(format!("key `{key}`: cannot parse `{v}` as a number")))
    };
    let levels = {
        let v = values
            .get("levels")
            .ok_or_else(|| Error::format("missing key `levels`"))?;
        v.parse::<u32>()
            .map_err(|_| Error::format(format!("key `levels`: cannot parse `{v}` as an integer")))?
    };
    let model = MacroModel {
        g_off: real("g_off_uS")?,
        g_on: real("g_on_uS")?,
        levels,
        sigma_d2d: real("sigma_d2d_uS")?,
        sigma_c2c: real("sigma_c2c_uS")?,
    };
    model.validate()?;
    Ok(model)
}

pub fn export_macro_model(model: &MacroModel, path: &Path) -> Result<()> {
    fs::write(path, format_macro_model(model)).map_err(|e| Error::io(path, e))
}

pub fn import_macro_model(path: &Path) -> Result<MacroModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_macro_model(&text)
}

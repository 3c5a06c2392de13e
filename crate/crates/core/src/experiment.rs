//! Experiment orchestration behind the `train`, `calibrate` and `eval`
//! commands, plus the on-disk formats they produce.
//!
//! Every file is rendered in full before it is written, and floats use the
//! shortest round-trip representation, so a given config and seed always
//! produce the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::info;

use crate::calibration::{fit_variation_model, format_macro_model, write_measurements, FittedStats};
use crate::config::{ExperimentConfig, ModelSource, ECHO_FILE};
use crate::crossbar::{CrossbarArray, DeviceRecord};
use crate::device::{run_calibration_protocol, MacroModel};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mnist::{load_mnist, Dataset};
use crate::trainer::{Metrics, Network, Synapses, UpdateMode};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const MODEL_DUMP_FILE: &str = "final_model_dump.csv";
pub const BIAS_FILE: &str = "final_biases.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const MEASUREMENTS_FILE: &str = "measurements.csv";
pub const FITTED_MODEL_FILE: &str = "macro_model.txt";
pub const FITTED_STATS_FILE: &str = "fitted_stats.txt";
pub const DEBUG_DIR: &str = "debug";

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,bit_flips,program_events";
pub const CURVE_HEADER: &str = "epoch,test_acc";
/// Crossbar dump: the array dump columns prefixed by the layer index.
pub const MODEL_DUMP_HEADER: &str = "layer,row,col,pair,level,g_programmed_uS";
/// Float-mode dump.
pub const DENSE_DUMP_HEADER: &str = "layer,row,col,weight";
pub const BIAS_HEADER: &str = "layer,index,bias";
pub const CHI_HEADER: &str = "row,col,chi_quanta,sign";

/// Printed with every report whose device sigmas were not measured.
pub const SYNTHETIC_SIGMA_NOTE: &str =
    "note: device variation uses synthetic default sigmas (5% of the conductance window), not measured values";

#[derive(Clone, Debug)]
pub struct RunReport {
    pub metrics: Vec<Metrics>,
    pub initial_test_acc: f64,
    pub init_program_events: u64,
    /// `None` for float runs.
    pub model: Option<MacroModel>,
    pub synthetic_sigmas: bool,
}

impl RunReport {
    pub fn final_test_acc(&self) -> f64 {
        self.metrics.last().map_or(self.initial_test_acc, |m| m.test_acc)
    }

    pub fn summary(&self, config: &ExperimentConfig) -> String {
        let t = &config.training;
        let mut s = String::new();
        let _ = writeln!(s, "mode = {:?}", t.mode);
        let _ = writeln!(s, "topology = {:?}", config.topology.sizes());
        let _ = writeln!(s, "learning_rate = {}", t.learning_rate);
        let _ = writeln!(s, "threshold = {}", t.threshold);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "seed = {}", t.seed);
        if let Some(m) = &self.model {
            let _ = writeln!(
                s,
                "device: g_off = {} uS, g_on = {} uS, levels = {}, sigma_d2d = {} uS, sigma_c2c = {} uS",
                m.g_off, m.g_on, m.levels, m.sigma_d2d, m.sigma_c2c
            );
        }
        let _ = writeln!(s, "initial_test_acc = {}", self.initial_test_acc);
        let _ = writeln!(s, "init_program_events = {}", self.init_program_events);
        let _ = writeln!(s, "epochs = {}", self.metrics.len());
        let _ = writeln!(s, "final_test_acc = {}", self.final_test_acc());
        let flips: u64 = self.metrics.iter().map(|m| m.bit_flips).sum();
        let events: u64 = self.metrics.iter().map(|m| m.program_events).sum();
        let _ = writeln!(s, "total_bit_flips = {flips}");
        let _ = writeln!(s, "total_program_events = {events}");
        if self.synthetic_sigmas {
            let _ = writeln!(s, "{SYNTHETIC_SIGMA_NOTE}");
        }
        s
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).in_module("cli"))
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).in_module("cli"))
}

/// Load the training and test sets named by the config, cut to the
/// configured subset sizes.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let [train_images, train_labels, test_images, test_labels] =
        config.data.require().map_err(|e| e.in_module("config"))?;
    let load = |images: &Path, labels: &Path, subset: Option<usize>| -> Result<Dataset> {
        let data = load_mnist(images, labels).map_err(|e| e.in_module("mnist"))?;
        Ok(match subset {
            Some(n) if n < data.len() => data.truncated(n),
            _ => data,
        })
    };
    let train = load(train_images, train_labels, config.train_subset)?;
    let test = load(test_images, test_labels, config.test_subset)?;
    Ok((train, test))
}

pub fn metrics_csv(metrics: &[Metrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.epoch + 1,
            m.train_loss,
            m.train_acc,
            m.test_acc,
            m.bit_flips,
            m.program_events
        );
    }
    s
}

pub fn curve_csv(metrics: &[Metrics]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for m in metrics {
        let _ = writeln!(s, "{},{}", m.epoch + 1, m.test_acc);
    }
    s
}

/// Weight dump of every layer: device records for crossbar layers, raw
/// weights for dense ones.
pub fn model_dump_csv(net: &Network) -> String {
    let mut s = String::new();
    let dense = net.mode() == UpdateMode::Float;
    let _ = writeln!(s, "{}", if dense { DENSE_DUMP_HEADER } else { MODEL_DUMP_HEADER });
    for (l, layer) in net.layers().iter().enumerate() {
        match &layer.synapses {
            Synapses::Crossbar { array, .. } => {
                for r in array.device_records() {
                    let _ = writeln!(s, "{l},{}", r.to_csv());
                }
            }
            Synapses::Dense(w) => {
                for row in 0..w.rows() {
                    for (col, v) in w.row(row).iter().enumerate() {
                        let _ = writeln!(s, "{l},{row},{col},{v}");
                    }
                }
            }
        }
    }
    s
}

pub fn bias_csv(net: &Network) -> String {
    let mut s = format!("{BIAS_HEADER}\n");
    for (l, layer) in net.layers().iter().enumerate() {
        for (i, b) in layer.bias.iter().enumerate() {
            let _ = writeln!(s, "{l},{i},{b}");
        }
    }
    s
}

/// Accumulator contents and programmed signs of every crossbar layer, one
/// CSV per layer.
pub fn write_debug_dump(net: &Network, dir: &Path) -> Result<()> {
    create_out_dir(dir)?;
    for (l, layer) in net.layers().iter().enumerate() {
        if let Synapses::Crossbar {
            accumulator, signs, ..
        } = &layer.synapses
        {
            let mut s = format!("{CHI_HEADER}\n");
            let cols = signs.cols();
            for (idx, (chi, sign)) in accumulator.chi().iter().zip(signs.as_slice()).enumerate() {
                let _ = writeln!(s, "{},{},{chi},{sign}", idx / cols, idx % cols);
            }
            write_file(&dir.join(format!("layer{l}_chi.csv")), &s)?;
        }
    }
    Ok(())
}

/// Train per `config`, writing the echoed config, metrics, curve, model
/// dump, biases and a text report into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    let (train, test) = load_datasets(config)?;
    run_experiment_on(config, &train, &test)
}

/// [`run_experiment`] on datasets that are already in memory.
pub fn run_experiment_on(config: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RunReport> {
    let out = &config.out_dir;
    create_out_dir(out)?;
    write_file(&out.join(ECHO_FILE), &config.to_toml())?;

    let t = &config.training;
    let model = config.macro_model().map_err(|e| e.in_module("device_model"))?;
    let mut net = Network::new(&config.topology, &model, t).map_err(|e| e.in_module("trainer"))?;
    let initial_test_acc = net.evaluate(test).map_err(|e| e.in_module("trainer"))?;
    info!("initial test accuracy {initial_test_acc:.4}");

    let mut metrics = Vec::with_capacity(t.epochs);
    for epoch in 0..t.epochs {
        let m = net
            .train_epoch(train, test, t, epoch)
            .map_err(|e| e.in_module("trainer"))?;
        info!(
            "epoch {}: loss {:.4} train {:.4} test {:.4} flips {} events {}",
            epoch + 1,
            m.train_loss,
            m.train_acc,
            m.test_acc,
            m.bit_flips,
            m.program_events
        );
        metrics.push(m);
        write_file(&out.join(METRICS_FILE), &metrics_csv(&metrics))?;
    }
    write_file(&out.join(CURVE_FILE), &curve_csv(&metrics))?;
    write_file(&out.join(MODEL_DUMP_FILE), &model_dump_csv(&net))?;
    write_file(&out.join(BIAS_FILE), &bias_csv(&net))?;
    if config.debug_dump {
        write_debug_dump(&net, &out.join(DEBUG_DIR))?;
    }

    let crossbar = t.mode != UpdateMode::Float;
    let report = RunReport {
        metrics,
        initial_test_acc,
        init_program_events: net.init_program_events(),
        model: crossbar.then_some(model),
        synthetic_sigmas: crossbar && config.model_source == ModelSource::Default && !model.is_noiseless(),
    };
    write_file(&out.join(REPORT_FILE), &report.summary(config))?;
    Ok(report)
}

fn parse_bias_csv(text: &str, sizes: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != BIAS_HEADER {
        return Err(Error::format(format!("expected header `{BIAS_HEADER}`, got `{header}`")));
    }
    let mut biases: Vec<Vec<Option<f64>>> = sizes[1..].iter().map(|&n| vec![None; n]).collect();
    for (n, line) in lines.enumerate() {
        let bad = || Error::format(format!("bias line {}: malformed record `{line}`", n + 2));
        let fields: Vec<&str> = line.split(',').collect();
        let [l, i, b] = fields[..] else { return Err(bad()) };
        let (l, i): (usize, usize) = (l.parse().map_err(|_| bad())?, i.parse().map_err(|_| bad())?);
        let b: f64 = b.parse().map_err(|_| bad())?;
        *biases.get_mut(l).and_then(|v| v.get_mut(i)).ok_or_else(bad)? = Some(b);
    }
    biases
        .into_iter()
        .map(|v| {
            v.into_iter()
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::format("bias file does not cover every output"))
        })
        .collect()
}

fn parse_dense_dump(text: &str, sizes: &[usize]) -> Result<Vec<Matrix>> {
    let mut weights: Vec<Matrix> = sizes.windows(2).map(|p| Matrix::zeros(p[0], p[1])).collect();
    let mut seen: Vec<usize> = vec![0; weights.len()];
    for (n, line) in text.lines().skip(1).enumerate() {
        let bad = || Error::format(format!("dump line {}: malformed record `{line}`", n + 2));
        let fields: Vec<&str> = line.split(',').collect();
        let [l, r, c, w] = fields[..] else { return Err(bad()) };
        let l: usize = l.parse().map_err(|_| bad())?;
        let r: usize = r.parse().map_err(|_| bad())?;
        let c: usize = c.parse().map_err(|_| bad())?;
        let w: f64 = w.parse().map_err(|_| bad())?;
        let m = weights.get_mut(l).ok_or_else(bad)?;
        if r >= m.rows() || c >= m.cols() {
            return Err(bad());
        }
        m.set(r, c, w);
        seen[l] += 1;
    }
    if seen.iter().zip(&weights).any(|(&n, w)| n != w.rows() * w.cols()) {
        return Err(Error::format("dense dump does not cover every weight"));
    }
    Ok(weights)
}

fn parse_crossbar_dump(text: &str, sizes: &[usize], model: MacroModel) -> Result<Vec<CrossbarArray>> {
    let mut records: Vec<Vec<DeviceRecord>> = vec![Vec::new(); sizes.len() - 1];
    for (n, line) in text.lines().skip(1).enumerate() {
        let bad = || Error::format(format!("dump line {}: malformed record `{line}`", n + 2));
        let fields: Vec<&str> = line.split(',').collect();
        let (l, rest) = fields.split_first().ok_or_else(bad)?;
        let l: usize = l.parse().map_err(|_| bad())?;
        let rec = DeviceRecord::parse_fields(rest).ok_or_else(bad)?;
        records.get_mut(l).ok_or_else(bad)?.push(rec);
    }
    sizes
        .windows(2)
        .zip(&records)
        .map(|(p, recs)| CrossbarArray::from_records(p[0], p[1], model, recs))
        .collect()
}

/// Rebuild the trained network from the dump files in `dir`.
pub fn restore_network(config: &ExperimentConfig, dir: &Path) -> Result<Network> {
    let read = |name: &str| -> Result<String> {
        let path = dir.join(name);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(&path, e))?);
            text.push('\n');
        }
        Ok(text)
    };
    let sizes = config.topology.sizes();
    let dump = read(MODEL_DUMP_FILE)?;
    let biases = parse_bias_csv(&read(BIAS_FILE)?, sizes)?;
    let header = dump.lines().next().unwrap_or_default();
    match (config.training.mode, header) {
        (UpdateMode::Float, DENSE_DUMP_HEADER) => {
            Network::from_dense(parse_dense_dump(&dump, sizes)?, biases)
        }
        (UpdateMode::Binary | UpdateMode::Multilevel, MODEL_DUMP_HEADER) => {
            let model = config.macro_model()?;
            let arrays = parse_crossbar_dump(&dump, sizes, model)?;
            Network::from_arrays(arrays, biases, &config.training)
        }
        (mode, header) => Err(Error::format(format!(
            "dump header `{header}` does not match {mode:?} mode"
        ))),
    }
}

/// Test accuracy of the network dumped in `dir`.
pub fn run_eval(config: &ExperimentConfig, dir: &Path) -> Result<f64> {
    let [_, _, test_images, test_labels] = config.data.require().map_err(|e| e.in_module("config"))?;
    let mut test = load_mnist(test_images, test_labels).map_err(|e| e.in_module("mnist"))?;
    if let Some(n) = config.test_subset.filter(|&n| n < test.len()) {
        test = test.truncated(n);
    }
    let net = restore_network(config, dir).map_err(|e| e.in_module("crossbar"))?;
    net.evaluate(&test).map_err(|e| e.in_module("trainer"))
}

#[derive(Clone, Debug)]
pub struct CalibrationReport {
    pub records: usize,
    pub stats: FittedStats,
    pub fitted: MacroModel,
    pub generator: MacroModel,
}

/// Run the program-cycle protocol on a simulated array built from the
/// configured model, fit the variation model and write
/// `measurements.csv`, the fitted model file and a stats summary.
pub fn run_calibration(config: &ExperimentConfig) -> Result<CalibrationReport> {
    let out = &config.out_dir;
    create_out_dir(out)?;
    write_file(&out.join(ECHO_FILE), &config.to_toml())?;
    let generator = config.macro_model().map_err(|e| e.in_module("device_model"))?;
    let c = config.calibration;
    let records = run_calibration_protocol(c.rows, c.cols, &generator, c.cycles, config.training.seed)
        .map_err(|e| e.in_module("device_model"))?;
    let (stats, fitted) =
        fit_variation_model(&records, generator.levels).map_err(|e| e.in_module("calibration"))?;

    let path = out.join(MEASUREMENTS_FILE);
    let mut buf = Vec::new();
    write_measurements(&mut buf, &records).map_err(|e| Error::io(&path, e).in_module("cli"))?;
    fs::write(&path, buf).map_err(|e| Error::io(&path, e).in_module("cli"))?;
    write_file(&out.join(FITTED_MODEL_FILE), &format_macro_model(&fitted))?;
    write_file(&out.join(FITTED_STATS_FILE), &stats.summary())?;
    info!(
        "fitted sigma_d2d {} uS, sigma_c2c {} uS from {} records",
        stats.sigma_d2d,
        stats.sigma_c2c,
        records.len()
    );
    Ok(CalibrationReport {
        records: records.len(),
        stats,
        fitted,
        generator,
    })
}

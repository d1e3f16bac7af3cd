//! Executes a resolved configuration and writes the run artifacts: an
//! append-only NDJSON event log, a CSV summary table and a manifest that
//! echoes the configuration with every default filled.
//!
//! Every record carries the config hash and seed. All numeric fields are
//! reproducible bit for bit at fixed config; wall-clock data lives in the
//! single `ts` field, which determinism checks strip.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use denselab_core::counting::{
    count_distance, count_rectangle, DistanceMethod, RectangleMethod,
};
use denselab_core::grid::{balanced_part, make_grid_function, GridFunction, SetSpec};
use denselab_core::increment::{
    dichotomy_step, regularize, run_pipeline, DichotomyParams, PipelineConfig, PipelineOutcome,
};
use denselab_core::measures::SimplexSpec;
use denselab_core::norms::{box_norm, box_norm_psi_form, u1_norm, uniformity_defect};
use denselab_core::util::derive_seed;
use denselab_core::vonneumann::{
    check_gvn_distance, check_gvn_rectangle, check_gvn_relative_simplex, check_gvn_simplex,
    GvnParams, InequalityReport, SimplexVariant, Verdict,
};
use denselab_core::LabError;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{config_hash, Command, ExperimentConfig};

pub struct RunOptions {
    pub out_dir: PathBuf,
    pub oracle: bool,
}

/// Exit codes: 0 completed, 1 usage or I/O, 2 a measured mathematical
/// hypothesis failed, 3 a grid-resolution floor was hit. A hypothesis
/// failure outranks a resolution floor when a run reports both.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_HYPOTHESIS: i32 = 2;
pub const EXIT_RESOLUTION: i32 = 3;

pub fn exit_code_for(err: &LabError) -> i32 {
    if err.is_hypothesis_failure() {
        EXIT_HYPOTHESIS
    } else if err.is_resolution_bound() {
        EXIT_RESOLUTION
    } else {
        EXIT_USAGE
    }
}

#[derive(Serialize)]
struct Timing {
    unix_ms: u128,
    elapsed_ms: f64,
}

/// One NDJSON event. Field order is the file order; `ts` stays last so the
/// deterministic prefix of each line is easy to eyeball in diffs.
#[derive(Serialize)]
struct EventRecord<'a> {
    op: &'a str,
    inputs: Value,
    value: Option<f64>,
    error_estimate: Option<f64>,
    seed: u64,
    config_hash: &'a str,
    detail: Value,
    ts: Timing,
}

struct EventLog {
    events: BufWriter<File>,
    csv: csv::Writer<File>,
    hash: String,
    seed: u64,
    started: Instant,
}

impl EventLog {
    fn create(dir: &Path, config: &ExperimentConfig) -> std::io::Result<EventLog> {
        fs::create_dir_all(dir)?;
        let hash = config_hash(config);
        let manifest = json!({
            "tool": "denselab",
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": hash,
            "config": config,
            "created_unix_ms": unix_ms(),
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        let events = BufWriter::new(File::create(dir.join("events.ndjson"))?);
        let mut csv = csv::Writer::from_path(dir.join("summary.csv"))?;
        csv.write_record(["op", "value", "error_estimate", "seed", "config_hash"])?;
        Ok(EventLog { events, csv, hash, seed: config.seed, started: Instant::now() })
    }

    fn emit(
        &mut self,
        op: &str,
        inputs: Value,
        value: Option<f64>,
        error_estimate: Option<f64>,
        detail: Value,
    ) -> std::io::Result<()> {
        let record = EventRecord {
            op,
            inputs,
            value,
            error_estimate,
            seed: self.seed,
            config_hash: &self.hash,
            detail,
            ts: Timing {
                unix_ms: unix_ms(),
                elapsed_ms: self.started.elapsed().as_secs_f64() * 1e3,
            },
        };
        let line = serde_json::to_string(&record)?;
        self.events.write_all(line.as_bytes())?;
        self.events.write_all(b"\n")?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.csv.write_record([
            op,
            &fmt(value),
            &fmt(error_estimate),
            &self.seed.to_string(),
            &self.hash,
        ])?;
        Ok(())
    }

    fn finish(mut self) -> std::io::Result<()> {
        self.events.flush()?;
        self.csv.flush()?;
        Ok(())
    }
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// What the completed run reported; folded into the exit code.
#[derive(Default)]
struct Signals {
    hypothesis: bool,
    resolution: bool,
}

impl Signals {
    fn exit(&self) -> i32 {
        if self.hypothesis {
            EXIT_HYPOTHESIS
        } else if self.resolution {
            EXIT_RESOLUTION
        } else {
            EXIT_OK
        }
    }
}

pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> i32 {
    let mut log = match EventLog::create(&opts.out_dir, config) {
        Ok(log) => log,
        Err(e) => {
            eprintln!("error: cannot create run directory {}: {e}", opts.out_dir.display());
            return EXIT_USAGE;
        }
    };
    let outcome = dispatch(config, opts, &mut log);
    let code = match outcome {
        Ok(signals) => signals.exit(),
        Err(RunFailure::Lab(e)) => {
            eprintln!("error: {e}");
            let _ = log.emit("error", Value::Null, None, None, json!({ "message": e.to_string() }));
            exit_code_for(&e)
        }
        Err(RunFailure::Io(e)) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    if let Err(e) = log.finish() {
        eprintln!("error: cannot flush run artifacts: {e}");
        return EXIT_USAGE;
    }
    code
}

enum RunFailure {
    Lab(LabError),
    Io(std::io::Error),
}

impl From<LabError> for RunFailure {
    fn from(e: LabError) -> Self {
        RunFailure::Lab(e)
    }
}

impl From<std::io::Error> for RunFailure {
    fn from(e: std::io::Error) -> Self {
        RunFailure::Io(e)
    }
}

type RunResult = Result<Signals, RunFailure>;

fn dispatch(config: &ExperimentConfig, opts: &RunOptions, log: &mut EventLog) -> RunResult {
    match config.command {
        Command::Count => run_count(config, opts, log),
        Command::Norms => run_norms(config, opts, log),
        Command::GvnCheck => run_gvn(config, log),
        Command::Regularize => run_regularize(config, log),
        Command::Pipeline => run_pipeline_cmd(config, log),
        Command::Witness => run_witness(config, log),
    }
}

fn build_set(config: &ExperimentConfig, name: &str, d: usize) -> Result<GridFunction, LabError> {
    let spec = config
        .sets
        .get(name)
        .ok_or_else(|| LabError::param(format!("config has no `sets.{name}`")))?;
    make_grid_function(spec, d, config.grid.n)
}

fn build_set_or_full(
    config: &ExperimentConfig,
    name: &str,
    d: usize,
) -> Result<GridFunction, LabError> {
    if config.sets.contains_key(name) {
        build_set(config, name, d)
    } else {
        GridFunction::constant(d, config.grid.n, 1.0)
    }
}

fn grid_inputs(config: &ExperimentConfig) -> Value {
    json!({
        "n": config.grid.n,
        "d1": config.grid.d1,
        "d2": config.grid.d2,
    })
}

fn run_count(config: &ExperimentConfig, opts: &RunOptions, log: &mut EventLog) -> RunResult {
    let n = config.grid.n;
    let mut inputs = grid_inputs(config);
    inputs["kind"] = json!(config.kind);
    inputs["method"] = json!(config.method);
    inputs["lambda"] = json!(config.lambda);
    inputs["budget"] = json!(config.budget);

    if config.kind == "distance" {
        let a = build_set(config, "a", config.grid.d1)?;
        let b = if config.sets.contains_key("b") {
            build_set(config, "b", config.grid.d1)?
        } else {
            a.clone()
        };
        let method = match config.method.as_str() {
            "fft" => DistanceMethod::Fft,
            "quadrature" => DistanceMethod::Quadrature,
            _ => DistanceMethod::Brute,
        };
        let r = count_distance(&a, &b, config.lambda, method, config.budget, config.seed)?;
        log.emit(
            "count",
            inputs.clone(),
            Some(r.value),
            Some(r.error_estimate),
            serde_json::to_value(&r).unwrap_or(Value::Null),
        )?;
        if opts.oracle {
            let alt = if n <= 24 { DistanceMethod::Brute } else { DistanceMethod::Quadrature };
            let o = count_distance(&a, &b, config.lambda, alt, config.budget, config.seed)?;
            let deviation = (r.value - o.value).abs();
            log.emit(
                "count-oracle",
                inputs,
                Some(o.value),
                Some(o.error_estimate),
                json!({ "primary": r.value, "oracle": o.value, "deviation": deviation }),
            )?;
        }
    } else {
        let d = config.grid.d1 + config.grid.d2;
        let a = build_set(config, "a", d)?;
        let slot = |name: &str| -> Result<GridFunction, LabError> {
            if config.sets.contains_key(name) {
                build_set(config, name, d)
            } else {
                Ok(a.clone())
            }
        };
        let (a10, a01, a11) = (slot("a10")?, slot("a01")?, slot("a11")?);
        inputs["aspect"] = json!(config.aspect);
        let method = match config.method.as_str() {
            "fft" => RectangleMethod::Fft,
            "quadrature" => RectangleMethod::Quadrature,
            _ => RectangleMethod::Brute,
        };
        let r = count_rectangle(
            &a,
            &a10,
            &a01,
            &a11,
            config.lambda,
            config.aspect,
            config.grid.d1,
            method,
            config.budget,
            config.seed,
        )?;
        log.emit(
            "count",
            inputs.clone(),
            Some(r.value),
            Some(r.error_estimate),
            serde_json::to_value(&r).unwrap_or(Value::Null),
        )?;
        if opts.oracle {
            let alt = if method == RectangleMethod::Quadrature {
                RectangleMethod::Fft
            } else {
                RectangleMethod::Quadrature
            };
            let o = count_rectangle(
                &a,
                &a10,
                &a01,
                &a11,
                config.lambda,
                config.aspect,
                config.grid.d1,
                alt,
                config.budget,
                config.seed,
            )?;
            let deviation = (r.value - o.value).abs();
            log.emit(
                "count-oracle",
                inputs,
                Some(o.value),
                Some(o.error_estimate),
                json!({ "primary": r.value, "oracle": o.value, "deviation": deviation }),
            )?;
        }
    }
    Ok(Signals::default())
}

fn run_norms(config: &ExperimentConfig, opts: &RunOptions, log: &mut EventLog) -> RunResult {
    let d = config.grid.d1 + config.grid.d2;
    let a = build_set(config, "a", d)?;
    let mut inputs = grid_inputs(config);
    inputs["scale"] = json!(config.scale);

    let u1 = u1_norm(&a, config.scale)?;
    log.emit("u1-norm", inputs.clone(), Some(u1), None, Value::Null)?;

    if config.grid.d2 > 0 {
        let bn = box_norm(&a, config.grid.d1, config.scale, None)?;
        log.emit("box-norm", inputs.clone(), Some(bn), None, Value::Null)?;
        if opts.oracle {
            let psi = box_norm_psi_form(&a, config.grid.d1, config.scale)?;
            log.emit(
                "box-norm-oracle",
                inputs.clone(),
                Some(psi),
                None,
                json!({ "primary": bn, "oracle": psi, "deviation": (bn - psi).abs() }),
            )?;
        }
    }

    let defect = uniformity_defect(&a, config.scale, None)?;
    log.emit(
        "uniformity",
        inputs,
        Some(defect.norm),
        None,
        serde_json::to_value(&defect).unwrap_or(Value::Null),
    )?;
    Ok(Signals::default())
}

/// Random test cells stay a few pixels wide on fine grids but never
/// coarser than an eighth of the domain.
fn random_cellsize(n: usize) -> f64 {
    if n >= 32 && n % 8 == 0 {
        8.0 / n as f64
    } else {
        1.0 / n as f64
    }
}

/// Random balanced test functions for the inequality suite: a Bernoulli
/// set on a coarse aligned lattice, recentred.
fn balanced_input(d: usize, n: usize, seed: u64) -> Result<GridFunction, LabError> {
    let cellsize = random_cellsize(n);
    let set = make_grid_function(&SetSpec::Random { dim: d, p: 0.5, cellsize, seed }, d, n)?;
    let (f, _) = balanced_part(&set, None)?;
    Ok(f)
}

fn conditioning_set(d: usize, n: usize, seed: u64) -> Result<GridFunction, LabError> {
    make_grid_function(
        &SetSpec::Random { dim: d, p: 0.75, cellsize: random_cellsize(n), seed },
        d,
        n,
    )
}

fn run_gvn(config: &ExperimentConfig, log: &mut EventLog) -> RunResult {
    let n = config.grid.n;
    let d1 = config.grid.d1;
    let mut signals = Signals::default();
    let checks: Vec<&str> = if config.check == "all" {
        vec!["distance", "simplex", "rectangle", "relative-simplex"]
    } else {
        vec![config.check.as_str()]
    };

    for repeat in 0..config.repeats {
        let seed = derive_seed(config.seed, repeat as u64 + 1);
        let params = GvnParams { budget: config.budget, seed, constant: config.tuning.constant };
        for &check in &checks {
            let mut inputs = grid_inputs(config);
            inputs["check"] = json!(check);
            inputs["lambda"] = json!(config.lambda);
            inputs["eps"] = json!(config.eps);
            inputs["repeat"] = json!(repeat);
            inputs["repeat_seed"] = json!(seed);
            let report: Result<InequalityReport, LabError> = match check {
                "distance" => {
                    let f0 = balanced_input(d1, n, derive_seed(seed, 10))?;
                    let f1 = balanced_input(d1, n, derive_seed(seed, 11))?;
                    check_gvn_distance(&f0, &f1, config.lambda, config.eps, config.aspect, &params)
                }
                "simplex" => {
                    let simplex = SimplexSpec::equilateral(config.k, 1.0)?;
                    let fs: Vec<GridFunction> = (0..=config.k)
                        .map(|j| balanced_input(d1, n, derive_seed(seed, 20 + j as u64)))
                        .collect::<Result<_, _>>()?;
                    check_gvn_simplex(
                        &fs,
                        &simplex,
                        config.lambda,
                        config.eps,
                        SimplexVariant::Direct,
                        &params,
                    )
                }
                "rectangle" => {
                    let d = d1 + config.grid.d2;
                    let slots: Vec<GridFunction> = (0..4)
                        .map(|j| balanced_input(d, n, derive_seed(seed, 30 + j as u64)))
                        .collect::<Result<_, _>>()?;
                    let b1 = conditioning_set(d1, n, derive_seed(seed, 40))?;
                    let b2 = conditioning_set(config.grid.d2, n, derive_seed(seed, 41))?;
                    check_gvn_rectangle(
                        &slots,
                        &b1,
                        &b2,
                        config.lambda,
                        config.eps,
                        config.aspect,
                        &params,
                    )
                }
                _ => {
                    let simplex = SimplexSpec::equilateral(config.k, 1.0)?;
                    let fs: Vec<GridFunction> = (0..=config.k)
                        .map(|j| balanced_input(d1, n, derive_seed(seed, 50 + j as u64)))
                        .collect::<Result<_, _>>()?;
                    let b = conditioning_set(d1, n, derive_seed(seed, 60))?;
                    check_gvn_relative_simplex(&fs, &simplex, &b, config.lambda, config.eps, &params)
                }
            };
            let op = format!("gvn-{check}");
            match report {
                Ok(rep) => {
                    if rep.verdict == Verdict::Violated {
                        signals.hypothesis = true;
                    }
                    log.emit(
                        &op,
                        inputs,
                        Some(rep.lhs),
                        Some(rep.numeric_error),
                        serde_json::to_value(&rep).unwrap_or(Value::Null),
                    )?;
                }
                Err(e) if e.is_hypothesis_failure() || e.is_resolution_bound() => {
                    if e.is_hypothesis_failure() {
                        signals.hypothesis = true;
                    } else {
                        signals.resolution = true;
                    }
                    log.emit(&op, inputs, None, None, json!({ "error": e.to_string() }))?;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(signals)
}

fn run_regularize(config: &ExperimentConfig, log: &mut EventLog) -> RunResult {
    let b1 = build_set(config, "b1", config.grid.d1)?;
    let b2 = build_set(config, "b2", config.grid.d2)?;
    let mut inputs = grid_inputs(config);
    inputs["eta"] = json!(config.eta);
    inputs["scales"] = json!(config.scales);

    let part = regularize(&b1, &b2, &config.scales, config.eta)?;
    for record in &part.trace {
        log.emit(
            "regularize-round",
            inputs.clone(),
            Some(record.energy),
            None,
            serde_json::to_value(record).unwrap_or(Value::Null),
        )?;
    }
    let summary = json!({
        "level": part.level,
        "cells": part.cells.len(),
        "energy": part.energy,
        "nonuniform_mass": part.n_mass(),
        "rectangle_mass": part.r_mass(),
    });
    log.emit("regularize", inputs, Some(part.energy), None, summary)?;
    Ok(Signals::default())
}

fn run_pipeline_cmd(config: &ExperimentConfig, log: &mut EventLog) -> RunResult {
    let d = config.grid.d1 + config.grid.d2;
    let a = build_set(config, "a", d)?;
    let b1 = build_set_or_full(config, "b1", config.grid.d1)?;
    let b2 = build_set_or_full(config, "b2", config.grid.d2)?;
    let pc = PipelineConfig {
        lambda_scales: config.lambda_scales.clone(),
        partition_scales: config.partition_scales.clone(),
        eps: config.eps,
        aspect: config.aspect,
        tau_fraction: config.tuning.tau_fraction,
        eta_override: config.tuning.eta_override,
        threshold_coeff: config.tuning.threshold_coeff,
        inverse_c: config.tuning.inverse_c,
        c_prime: config.tuning.c_prime,
        budget: config.budget,
        seed: config.seed,
        max_iterations: config.tuning.max_iterations,
        extract_budget: config.tuning.extract_budget,
        max_scan: config.tuning.max_scan,
        norm_cost_cap: config.tuning.norm_cost_cap,
    };
    let mut inputs = grid_inputs(config);
    inputs["lambda_scales"] = json!(config.lambda_scales);
    inputs["partition_scales"] = json!(config.partition_scales);
    inputs["eps"] = json!(config.eps);

    let report = run_pipeline(&a, &b1, &b2, &pc)?;
    for it in &report.iterations {
        log.emit(
            "pipeline-iteration",
            inputs.clone(),
            Some(it.achieved.unwrap_or(it.alpha)),
            None,
            serde_json::to_value(it).unwrap_or(Value::Null),
        )?;
    }
    let mut signals = Signals::default();
    let (value, error) = match &report.outcome {
        PipelineOutcome::Certificate { certificate } => {
            (Some(certificate.measured), Some(certificate.error_estimate))
        }
        PipelineOutcome::ResolutionBound { .. } => {
            signals.resolution = true;
            (None, None)
        }
    };
    log.emit(
        "pipeline",
        inputs,
        value,
        error,
        serde_json::to_value(&report).unwrap_or(Value::Null),
    )?;
    Ok(signals)
}

fn run_witness(config: &ExperimentConfig, log: &mut EventLog) -> RunResult {
    let d = config.grid.d1 + config.grid.d2;
    let a = build_set(config, "a", d)?;
    let b1 = build_set_or_full(config, "b1", config.grid.d1)?;
    let b2 = build_set_or_full(config, "b2", config.grid.d2)?;
    let params = DichotomyParams {
        threshold_coeff: config.tuning.threshold_coeff,
        inverse_c: config.tuning.inverse_c,
        budget: config.budget,
        seed: config.seed,
        max_scan: config.tuning.max_scan,
        norm_cost_cap: config.tuning.norm_cost_cap,
    };
    let mut inputs = grid_inputs(config);
    inputs["lambda"] = json!(config.lambda);
    inputs["eps"] = json!(config.eps);
    inputs["aspect"] = json!(config.aspect);

    let report = dichotomy_step(&a, &b1, &b2, config.lambda, config.eps, config.aspect, &params)?;
    log.emit(
        "dichotomy",
        inputs,
        Some(report.box_norm),
        None,
        serde_json::to_value(&report).unwrap_or(Value::Null),
    )?;
    Ok(Signals::default())
}

//! Experiment configuration: a JSON key-value tree with typed scalars,
//! lists and nested set expressions.
//!
//! Parsing reports *every* problem it finds, not just the first; unknown
//! or unused keys are warnings, type errors and missing seeds are fatal.
//! The resolved configuration has every default filled in, round-trips
//! through its own serialization, and is what the manifest echoes.

use std::collections::BTreeMap;

use denselab_core::grid::SetSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Count,
    Norms,
    GvnCheck,
    Regularize,
    Pipeline,
    Witness,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Count => "count",
            Command::Norms => "norms",
            Command::GvnCheck => "gvn-check",
            Command::Regularize => "regularize",
            Command::Pipeline => "pipeline",
            Command::Witness => "witness",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSection {
    /// Cells per axis on every factor grid.
    pub n: usize,
    /// First-factor dimension.
    pub d1: usize,
    /// Second-factor dimension; 0 for single-factor commands.
    pub d2: usize,
}

/// Solver constants; the defaults match the library defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuningSection {
    pub threshold_coeff: f64,
    pub inverse_c: f64,
    pub c_prime: f64,
    pub tau_fraction: f64,
    pub max_iterations: usize,
    pub extract_budget: usize,
    pub max_scan: usize,
    pub norm_cost_cap: f64,
    /// Envelope constant for the inequality checks.
    pub constant: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_override: Option<f64>,
}

impl Default for TuningSection {
    fn default() -> Self {
        TuningSection {
            threshold_coeff: 0.125,
            inverse_c: 2f64.powi(-16),
            c_prime: 2f64.powi(-40),
            tau_fraction: 0.3,
            max_iterations: 8,
            extract_budget: 100_000,
            max_scan: 200_000,
            norm_cost_cap: 3e9,
            constant: 2.0,
            eta_override: None,
        }
    }
}

/// A fully resolved experiment: every field concrete, every default filled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seed: u64,
    pub grid: GridSection,
    pub sets: BTreeMap<String, SetSpec>,
    /// Count operator kind: "distance" or "rectangle".
    pub kind: String,
    pub method: String,
    pub lambda: f64,
    /// Second-factor scale ratio (the eccentricity input where one exists).
    pub aspect: f64,
    pub eps: f64,
    pub eta: f64,
    /// Window scale for the norms command.
    pub scale: f64,
    pub budget: usize,
    /// Inequality family for gvn-check.
    pub check: String,
    pub repeats: usize,
    /// Simplex vertex count minus one for the simplex checks.
    pub k: usize,
    pub scales: Vec<f64>,
    pub lambda_scales: Vec<f64>,
    pub partition_scales: Vec<f64>,
    pub tuning: TuningSection,
    pub out: String,
}

#[derive(Debug)]
pub struct Parsed {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
}

/// Hex digest identifying the resolved configuration; every output record
/// carries it.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct Walker<'a> {
    obj: &'a serde_json::Map<String, Value>,
    path: &'static str,
    errors: Vec<String>,
    warnings: Vec<String>,
}

impl<'a> Walker<'a> {
    fn new(obj: &'a serde_json::Map<String, Value>, path: &'static str) -> Self {
        Walker { obj, path, errors: Vec::new(), warnings: Vec::new() }
    }

    fn key(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn warn_unknown(&mut self, known: &[&str]) {
        for key in self.obj.keys() {
            if !known.contains(&key.as_str()) {
                self.warnings.push(format!("unknown key `{}` (ignored)", self.key(key)));
            }
        }
    }

    fn u64(&mut self, key: &str) -> Option<u64> {
        match self.obj.get(key) {
            None => None,
            Some(v) => match v.as_u64() {
                Some(x) => Some(x),
                None => {
                    self.errors.push(format!(
                        "`{}` must be a non-negative integer, got {v}",
                        self.key(key)
                    ));
                    None
                }
            },
        }
    }

    fn usize_or(&mut self, key: &str, default: usize) -> usize {
        self.u64(key).map(|x| x as usize).unwrap_or(default)
    }

    fn f64(&mut self, key: &str) -> Option<f64> {
        match self.obj.get(key) {
            None | Some(Value::Null) => None,
            Some(v) => match v.as_f64() {
                Some(x) => Some(x),
                None => {
                    self.errors.push(format!("`{}` must be a number, got {v}", self.key(key)));
                    None
                }
            },
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> f64 {
        self.f64(key).unwrap_or(default)
    }

    fn string_or(&mut self, key: &str, default: &str) -> String {
        match self.obj.get(key) {
            None => default.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(v) => {
                self.errors.push(format!("`{}` must be a string, got {v}", self.key(key)));
                default.to_string()
            }
        }
    }

    fn f64_list_or(&mut self, key: &str, default: &[f64]) -> Vec<f64> {
        match self.obj.get(key) {
            None => default.to_vec(),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for (i, item) in items.iter().enumerate() {
                    match item.as_f64() {
                        Some(x) => out.push(x),
                        None => self.errors.push(format!(
                            "`{}[{i}]` must be a number, got {item}",
                            self.key(key)
                        )),
                    }
                }
                out
            }
            Some(v) => {
                self.errors.push(format!("`{}` must be a list of numbers, got {v}", self.key(key)));
                default.to_vec()
            }
        }
    }

    fn object(&mut self, key: &str) -> Option<&'a serde_json::Map<String, Value>> {
        match self.obj.get(key) {
            None => None,
            Some(Value::Object(m)) => Some(m),
            Some(v) => {
                self.errors.push(format!("`{}` must be an object, got {v}", self.key(key)));
                None
            }
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "command",
    "seed",
    "grid",
    "sets",
    "kind",
    "method",
    "lambda",
    "aspect",
    "eps",
    "eta",
    "scale",
    "budget",
    "check",
    "repeats",
    "k",
    "scales",
    "lambda_scales",
    "partition_scales",
    "tuning",
    "out",
];

/// Keys a command actually reads, beyond the always-active
/// command/seed/grid/out.
fn relevant_keys(command: Command) -> &'static [&'static str] {
    match command {
        Command::Count => &["sets", "kind", "method", "lambda", "aspect", "budget"],
        Command::Norms => &["sets", "scale"],
        Command::GvnCheck => {
            &["check", "repeats", "k", "lambda", "eps", "aspect", "budget", "tuning"]
        }
        Command::Regularize => &["sets", "scales", "eta"],
        Command::Pipeline => {
            &["sets", "lambda_scales", "partition_scales", "eps", "budget", "tuning"]
        }
        Command::Witness => &["sets", "lambda", "eps", "aspect", "budget", "tuning"],
    }
}

fn parse_command(w: &mut Walker) -> Option<Command> {
    let raw = match w.obj.get("command") {
        None => {
            w.errors.push("missing `command`".into());
            return None;
        }
        Some(Value::String(s)) => s.clone(),
        Some(v) => {
            w.errors.push(format!("`command` must be a string, got {v}"));
            return None;
        }
    };
    match raw.as_str() {
        "count" => Some(Command::Count),
        "norms" => Some(Command::Norms),
        "gvn-check" => Some(Command::GvnCheck),
        "regularize" => Some(Command::Regularize),
        "pipeline" => Some(Command::Pipeline),
        "witness" => Some(Command::Witness),
        other => {
            w.errors.push(format!(
                "unknown command '{other}' (expected count | norms | gvn-check | regularize | \
                 pipeline | witness)"
            ));
            None
        }
    }
}

fn parse_sets(obj: &serde_json::Map<String, Value>, errors: &mut Vec<String>) -> BTreeMap<String, SetSpec> {
    let mut sets = BTreeMap::new();
    for (name, value) in obj {
        match serde_json::from_value::<SetSpec>(value.clone()) {
            Ok(spec) => {
                sets.insert(name.clone(), spec);
            }
            Err(e) => errors.push(format!("`sets.{name}`: {e}")),
        }
    }
    sets
}

fn check_resolvable(errors: &mut Vec<String>, key: &str, lambda: f64, n: usize) {
    let floor = 2.0 / n as f64;
    if lambda < floor - 1e-12 {
        errors.push(format!(
            "`{key}` = {lambda} violates the resolvability rule lambda >= 2/n = {floor}"
        ));
    }
}

fn check_lacunary(errors: &mut Vec<String>, key: &str, scales: &[f64]) {
    if scales.is_empty() {
        errors.push(format!("`{key}` must not be empty"));
        return;
    }
    for (j, &l) in scales.iter().enumerate() {
        if !(l > 0.0 && l < 1.0) {
            errors.push(format!("`{key}[{j}]` = {l} outside (0, 1)"));
            return;
        }
    }
    let mut prev = 1.0;
    for (j, &l) in scales.iter().enumerate() {
        if l > prev / 2.0 + 1e-12 {
            errors.push(format!(
                "`{key}` must be lacunary: L_{{j+1}} < L_j / 2, but entry {j} is {l} after {prev}"
            ));
            return;
        }
        prev = l;
    }
}

fn expect_set(
    errors: &mut Vec<String>,
    sets: &BTreeMap<String, SetSpec>,
    name: &str,
    dim: usize,
    command: &str,
) {
    match sets.get(name) {
        None => errors.push(format!("command `{command}` needs `sets.{name}`")),
        Some(spec) => match spec.dim() {
            Ok(sd) if sd == dim => {}
            Ok(sd) => errors.push(format!(
                "`sets.{name}` has dimension {sd}, but command `{command}` needs {dim}"
            )),
            Err(e) => errors.push(format!("`sets.{name}`: {e}")),
        },
    }
}

pub fn parse_config(text: &str) -> Result<Parsed, Vec<String>> {
    let root: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return Err(vec![format!("configuration is not valid JSON: {e}")]),
    };
    let obj = match root.as_object() {
        Some(o) => o,
        None => return Err(vec!["configuration must be a JSON object".into()]),
    };

    let mut w = Walker::new(obj, "");
    w.warn_unknown(TOP_KEYS);

    let command = parse_command(&mut w);

    let seed = match w.u64("seed") {
        Some(s) => s,
        None => {
            if !w.obj.contains_key("seed") {
                w.errors
                    .push("missing `seed`: reproducibility is mandatory, every run fixes its random stream".into());
            }
            0
        }
    };

    // Grid section; d2 defaults to the command's natural shape.
    let default_d2 = match command {
        Some(Command::Count) | Some(Command::Norms) | Some(Command::GvnCheck) => 0,
        _ => 2,
    };
    let (n, d1, d2) = match w.object("grid") {
        Some(gobj) => {
            let mut gw = Walker::new(gobj, "grid");
            gw.warn_unknown(&["n", "d1", "d2"]);
            let n = match gw.u64("n") {
                Some(x) if x >= 2 => x as usize,
                Some(x) => {
                    gw.errors.push(format!("`grid.n` = {x} is below the minimum of 2"));
                    2
                }
                None => {
                    if !gobj.contains_key("n") {
                        gw.errors.push("missing `grid.n`".into());
                    }
                    2
                }
            };
            let d1 = gw.usize_or("d1", 2);
            let d2 = gw.usize_or("d2", default_d2);
            w.errors.extend(gw.errors);
            w.warnings.extend(gw.warnings);
            (n, d1, d2)
        }
        None => {
            if !w.obj.contains_key("grid") {
                w.errors.push("missing `grid` section".into());
            }
            (2, 2, default_d2)
        }
    };

    let sets = match w.object("sets") {
        Some(sobj) => parse_sets(sobj, &mut w.errors),
        None => BTreeMap::new(),
    };

    let kind = w.string_or("kind", "distance");
    let method = w.string_or("method", "fft");
    let lambda = w.f64_or("lambda", 0.25);
    let aspect = w.f64_or("aspect", 1.0);
    let eps = w.f64_or("eps", 0.8);
    let eta = w.f64_or("eta", 0.25);
    let scale = w.f64_or("scale", 0.125);
    let check = w.string_or("check", "distance");
    let repeats = w.usize_or("repeats", 5);
    let k = w.usize_or("k", 2);
    let scales = w.f64_list_or("scales", &[0.25, 0.0625, 0.015625]);
    let lambda_scales = w.f64_list_or("lambda_scales", &[0.125, 0.0625, 0.03125]);
    let partition_scales = w.f64_list_or("partition_scales", &[0.25, 0.0625, 0.015625]);
    let out = w.string_or("out", "runs");

    let default_budget = match command {
        Some(Command::Pipeline) | Some(Command::Witness) => 16,
        _ => 64,
    };
    let budget = w.usize_or("budget", default_budget);

    let mut tuning = TuningSection::default();
    if let Some(tobj) = w.object("tuning") {
        let mut tw = Walker::new(tobj, "tuning");
        tw.warn_unknown(&[
            "threshold_coeff",
            "inverse_c",
            "c_prime",
            "tau_fraction",
            "max_iterations",
            "extract_budget",
            "max_scan",
            "norm_cost_cap",
            "constant",
            "eta_override",
        ]);
        tuning.threshold_coeff = tw.f64_or("threshold_coeff", tuning.threshold_coeff);
        tuning.inverse_c = tw.f64_or("inverse_c", tuning.inverse_c);
        tuning.c_prime = tw.f64_or("c_prime", tuning.c_prime);
        tuning.tau_fraction = tw.f64_or("tau_fraction", tuning.tau_fraction);
        tuning.max_iterations = tw.usize_or("max_iterations", tuning.max_iterations);
        tuning.extract_budget = tw.usize_or("extract_budget", tuning.extract_budget);
        tuning.max_scan = tw.usize_or("max_scan", tuning.max_scan);
        tuning.norm_cost_cap = tw.f64_or("norm_cost_cap", tuning.norm_cost_cap);
        tuning.constant = tw.f64_or("constant", tuning.constant);
        tuning.eta_override = tw.f64("eta_override");
        w.errors.extend(tw.errors);
        w.warnings.extend(tw.warnings);
    }

    let mut errors = std::mem::take(&mut w.errors);
    let mut warnings = std::mem::take(&mut w.warnings);

    if let Some(command) = command {
        // Flag unused keys only when they deviate from the default, so a
        // fully resolved configuration (as echoed in a manifest) re-parses
        // without noise.
        let relevant = relevant_keys(command);
        let tuning_default =
            serde_json::to_string(&TuningSection::default()).expect("tuning serializes");
        let tuning_now = serde_json::to_string(&tuning).expect("tuning serializes");
        let deviates: &[(&str, bool)] = &[
            ("kind", kind != "distance"),
            ("method", method != "fft"),
            ("lambda", lambda != 0.25),
            ("aspect", aspect != 1.0),
            ("eps", eps != 0.8),
            ("eta", eta != 0.25),
            ("scale", scale != 0.125),
            ("check", check != "distance"),
            ("repeats", repeats != 5),
            ("k", k != 2),
            ("budget", budget != default_budget),
            ("scales", scales != [0.25, 0.0625, 0.015625]),
            ("lambda_scales", lambda_scales != [0.125, 0.0625, 0.03125]),
            ("partition_scales", partition_scales != [0.25, 0.0625, 0.015625]),
            ("tuning", tuning_now != tuning_default),
        ];
        for &(key, differs) in deviates {
            if differs && !relevant.contains(&key) {
                warnings
                    .push(format!("key `{key}` is not used by command `{}`", command.name()));
            }
        }

        let d = d1 + d2;
        let cname = command.name();
        match command {
            Command::Count => match kind.as_str() {
                "distance" => {
                    expect_set(&mut errors, &sets, "a", d1, cname);
                    if sets.contains_key("b") {
                        expect_set(&mut errors, &sets, "b", d1, cname);
                    }
                    if d2 != 0 {
                        errors.push(format!(
                            "distance counts run on a single factor; got grid.d2 = {d2}"
                        ));
                    }
                    check_resolvable(&mut errors, "lambda", lambda, n);
                    if !["fft", "quadrature", "brute"].contains(&method.as_str()) {
                        errors.push(format!("unknown count method '{method}'"));
                    }
                }
                "rectangle" => {
                    expect_set(&mut errors, &sets, "a", d, cname);
                    if d1 < 2 || d2 < 2 {
                        errors.push(format!(
                            "rectangle counts need d1, d2 >= 2; got d1 = {d1}, d2 = {d2}"
                        ));
                    }
                    check_resolvable(&mut errors, "lambda", lambda, n);
                    check_resolvable(&mut errors, "aspect * lambda", aspect * lambda, n);
                    if !["fft", "quadrature", "brute"].contains(&method.as_str()) {
                        errors.push(format!("unknown count method '{method}'"));
                    }
                }
                other => errors.push(format!(
                    "unknown count kind '{other}' (expected distance | rectangle)"
                )),
            },
            Command::Norms => {
                expect_set(&mut errors, &sets, "a", d, cname);
                if !(scale > 0.0 && scale <= 0.25 + 1e-12) {
                    errors.push(format!("`scale` = {scale} outside (0, 0.25]"));
                } else {
                    check_resolvable(&mut errors, "scale", scale, n);
                }
            }
            Command::GvnCheck => {
                if !["distance", "simplex", "rectangle", "relative-simplex", "all"]
                    .contains(&check.as_str())
                {
                    errors.push(format!(
                        "unknown check '{check}' (expected distance | simplex | rectangle | \
                         relative-simplex | all)"
                    ));
                }
                if repeats == 0 {
                    errors.push("`repeats` must be at least 1".into());
                }
                if k == 0 {
                    errors.push("`k` must be at least 1".into());
                }
                let needs_product = matches!(check.as_str(), "rectangle" | "all");
                if needs_product && (d1 < 2 || d2 < 2) {
                    errors.push(format!(
                        "check '{check}' needs d1, d2 >= 2; got d1 = {d1}, d2 = {d2}"
                    ));
                }
                let needs_simplex = matches!(check.as_str(), "simplex" | "relative-simplex" | "all");
                if needs_simplex && d1 < k + 1 {
                    errors.push(format!(
                        "simplex checks need d1 >= k + 1 = {}; got d1 = {d1}",
                        k + 1
                    ));
                }
                check_resolvable(&mut errors, "lambda", lambda, n);
            }
            Command::Regularize => {
                expect_set(&mut errors, &sets, "b1", d1, cname);
                expect_set(&mut errors, &sets, "b2", d2.max(1), cname);
                if d2 == 0 {
                    errors.push("regularize needs a product grid; set `grid.d2`".into());
                }
                check_lacunary(&mut errors, "scales", &scales);
                if !(eta > 0.0 && eta <= 1.0) {
                    errors.push(format!("`eta` = {eta} outside (0, 1]"));
                }
            }
            Command::Pipeline | Command::Witness => {
                expect_set(&mut errors, &sets, "a", d, cname);
                if sets.contains_key("b1") {
                    expect_set(&mut errors, &sets, "b1", d1, cname);
                }
                if sets.contains_key("b2") {
                    expect_set(&mut errors, &sets, "b2", d2.max(1), cname);
                }
                if d1 < 2 || d2 < 2 {
                    errors.push(format!(
                        "command `{cname}` needs d1, d2 >= 2; got d1 = {d1}, d2 = {d2}"
                    ));
                }
                if command == Command::Pipeline {
                    check_lacunary(&mut errors, "lambda_scales", &lambda_scales);
                    check_lacunary(&mut errors, "partition_scales", &partition_scales);
                    if let Some(&first) = lambda_scales.first() {
                        check_resolvable(&mut errors, "lambda_scales[0]", first, n);
                    }
                } else {
                    check_resolvable(&mut errors, "lambda", lambda, n);
                    check_resolvable(&mut errors, "aspect * lambda", aspect * lambda, n);
                }
            }
        }
    }

    if !errors.is_empty() {
        return Err(errors);
    }
    let config = ExperimentConfig {
        command: command.expect("command errors reported above"),
        seed,
        grid: GridSection { n, d1, d2 },
        sets,
        kind,
        method,
        lambda,
        aspect,
        eps,
        eta,
        scale,
        budget,
        check,
        repeats,
        k,
        scales,
        lambda_scales,
        partition_scales,
        tuning,
        out,
    };
    Ok(Parsed { config, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_count() -> &'static str {
        r#"{
            "command": "count",
            "seed": 7,
            "grid": {"n": 64, "d1": 2},
            "lambda": 0.25,
            "method": "fft",
            "sets": {
                "a": {"kind": "cube", "center": [0.5, 0.5], "halfwidth": 0.5},
                "b": {"kind": "ball", "center": [0.5, 0.5], "radius": 0.3}
            }
        }"#
    }

    #[test]
    fn minimal_count_parses_with_defaults_filled() {
        let parsed = parse_config(minimal_count()).unwrap();
        assert!(parsed.warnings.is_empty(), "{:?}", parsed.warnings);
        let c = parsed.config;
        assert_eq!(c.command, Command::Count);
        assert_eq!(c.seed, 7);
        assert_eq!(c.grid.d2, 0);
        assert_eq!(c.budget, 64);
        assert_eq!(c.aspect, 1.0);
        assert_eq!(c.kind, "distance");
        assert_eq!(c.out, "runs");
    }

    #[test]
    fn resolved_config_round_trips() {
        let parsed = parse_config(minimal_count()).unwrap();
        let text = serde_json::to_string(&parsed.config).unwrap();
        let again = parse_config(&text).unwrap();
        assert!(again.warnings.is_empty(), "{:?}", again.warnings);
        assert_eq!(text, serde_json::to_string(&again.config).unwrap());
        assert_eq!(config_hash(&parsed.config), config_hash(&again.config));
    }

    #[test]
    fn missing_seed_is_fatal() {
        let text = r#"{
            "command": "norms",
            "grid": {"n": 32, "d1": 2},
            "sets": {"a": {"kind": "cube", "center": [0.5, 0.5], "halfwidth": 0.25}}
        }"#;
        let errors = parse_config(text).unwrap_err();
        assert!(
            errors.iter().any(|e| e.contains("seed") && e.contains("reproducibility")),
            "{errors:?}"
        );
    }

    #[test]
    fn sub_resolution_lambda_names_the_rule() {
        let text = r#"{
            "command": "count",
            "seed": 1,
            "grid": {"n": 64, "d1": 2},
            "lambda": 0.01,
            "sets": {"a": {"kind": "cube", "center": [0.5, 0.5], "halfwidth": 0.5}}
        }"#;
        let errors = parse_config(text).unwrap_err();
        assert!(
            errors.iter().any(|e| e.contains("resolvability rule lambda >= 2/n")),
            "{errors:?}"
        );
    }

    #[test]
    fn non_lacunary_scales_cite_the_halving_rule() {
        let text = r#"{
            "command": "regularize",
            "seed": 1,
            "grid": {"n": 64, "d1": 1, "d2": 1},
            "scales": [0.25, 0.2],
            "sets": {
                "b1": {"kind": "cube", "center": [0.5], "halfwidth": 0.5},
                "b2": {"kind": "cube", "center": [0.5], "halfwidth": 0.5}
            }
        }"#;
        let errors = parse_config(text).unwrap_err();
        assert!(errors.iter().any(|e| e.contains("L_{j+1} < L_j / 2")), "{errors:?}");
    }

    #[test]
    fn every_problem_is_reported_not_just_the_first() {
        let text = r#"{
            "command": "count",
            "grid": {"n": 64, "d1": 2},
            "lambda": 0.001,
            "method": "sorcery",
            "sets": {"a": {"kind": "cube", "center": [0.5, 0.5], "halfwidth": 0.5}}
        }"#;
        let errors = parse_config(text).unwrap_err();
        assert!(errors.len() >= 3, "{errors:?}");
    }

    #[test]
    fn unknown_keys_warn_without_failing() {
        let text = r#"{
            "command": "count",
            "seed": 3,
            "grid": {"n": 64, "d1": 2, "flavor": "hex"},
            "verbosity": 9,
            "sets": {"a": {"kind": "cube", "center": [0.5, 0.5], "halfwidth": 0.5}}
        }"#;
        let parsed = parse_config(text).unwrap();
        assert_eq!(parsed.warnings.len(), 2, "{:?}", parsed.warnings);
        assert!(parsed.warnings.iter().any(|m| m.contains("verbosity")));
        assert!(parsed.warnings.iter().any(|m| m.contains("grid.flavor")));
    }

    #[test]
    fn irrelevant_sections_warn() {
        let text = r#"{
            "command": "norms",
            "seed": 3,
            "grid": {"n": 64, "d1": 2},
            "scales": [0.25, 0.1],
            "sets": {"a": {"kind": "cube", "center": [0.5, 0.5], "halfwidth": 0.5}}
        }"#;
        let parsed = parse_config(text).unwrap();
        assert!(
            parsed.warnings.iter().any(|m| m.contains("`scales`") && m.contains("norms")),
            "{:?}",
            parsed.warnings
        );
    }

    #[test]
    fn set_dimension_mismatch_is_reported() {
        let text = r#"{
            "command": "count",
            "seed": 1,
            "grid": {"n": 64, "d1": 2},
            "sets": {"a": {"kind": "cube", "center": [0.5], "halfwidth": 0.5}}
        }"#;
        let errors = parse_config(text).unwrap_err();
        assert!(errors.iter().any(|e| e.contains("dimension 1") && e.contains("needs 2")));
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = parse_config(minimal_count()).unwrap().config;
        let mut b = a.clone();
        b.seed = 8;
        assert_ne!(config_hash(&a), config_hash(&b));
        let mut c = a.clone();
        c.tuning.norm_cost_cap = 1e9;
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}

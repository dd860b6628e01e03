//! Experiment orchestration and file formats.
//!
//! Datasets are JSONL with a header line, trees and traces are JSON, and
//! curve results are CSV preceded by a `# config:` line carrying the full
//! configuration.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domains::{DomainSpec, ParamId, ParamValue};
use crate::error::{Error, Result};
use crate::learner::{
    encode_all, training_curve, DecisionTree, FeatureSchema, TestSplit, TreeHyper, TREE_SCHEMA_VERSION,
};
use crate::mdp::{most_likely_trajectory, Trajectory};
use crate::reconciliation::{CheckParams, SolvedModel, DEFAULT_DELTA, DEFAULT_EPS_OPT};
use crate::sim_user::{
    dedupe, make_user, sampler, simulate_into, LabeledTransition, SamplerSpec, SessionParams, SimulatedUser,
};

pub const FILE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TRACE_LEN: usize = 40;
/// Instances that must finish for a sweep to count.
pub const MIN_COMPLETION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: String,
    #[serde(default)]
    pub robot_overrides: BTreeMap<ParamId, ParamValue>,
    pub k: usize,
    pub instances: usize,
    pub train_sizes: Vec<usize>,
    pub test_split: TestSplit,
    /// Unique rows to generate per instance.
    pub target_rows: usize,
    /// Give up on an instance after this many traces.
    pub max_traces: usize,
    pub traces_per_batch: usize,
    pub trace_len: usize,
    pub delta: f64,
    pub eps_opt: f64,
    pub alpha: f64,
    pub sampler: SamplerSpec,
    pub include_next: bool,
    pub hyper: TreeHyper,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Per-domain defaults: 900 training and 100 test rows, or 220 and the
    /// remainder for taxi.
    pub fn for_domain(domain: &str, seed: u64) -> Self {
        let (train_sizes, test_split, target_rows) = match domain {
            "taxi" => (vec![25, 50, 100, 150, 220], TestSplit::Remainder, 248),
            _ => (vec![100, 300, 600, 900], TestSplit::Count(100), 1000),
        };
        ExperimentConfig {
            domain: domain.to_string(),
            robot_overrides: BTreeMap::new(),
            k: 3,
            instances: 20,
            train_sizes,
            test_split,
            target_rows,
            max_traces: 20_000,
            traces_per_batch: 1,
            trace_len: DEFAULT_TRACE_LEN,
            delta: DEFAULT_DELTA,
            eps_opt: DEFAULT_EPS_OPT,
            alpha: 1.0,
            sampler: SamplerSpec::default(),
            include_next: false,
            hyper: TreeHyper::default(),
            seed,
        }
    }

    pub fn check_params(&self) -> CheckParams {
        CheckParams {
            delta: self.delta,
            eps_opt: self.eps_opt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check_params().validate()?;
        let max = self.train_sizes.iter().copied().max().unwrap_or(0);
        if self.train_sizes.is_empty() || self.train_sizes.contains(&0) {
            return Err(Error::Config("train sizes must be non-empty and positive".into()));
        }
        let test = match self.test_split {
            TestSplit::Count(n) => n,
            TestSplit::Fraction(f) => (self.target_rows as f64 * f).round() as usize,
            TestSplit::Remainder => 1,
        };
        if max + test > self.target_rows {
            return Err(Error::Config(format!(
                "{} target rows cannot hold {max} training and {test} test rows",
                self.target_rows
            )));
        }
        if self.instances == 0 || self.traces_per_batch == 0 {
            return Err(Error::Config("instances and traces_per_batch must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("α must be non-negative, got {}", self.alpha)));
        }
        sampler(&self.sampler)?;
        Ok(())
    }

    /// One seed per instance, drawn from the master seed.
    pub fn instance_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.instances).map(|_| rng.gen()).collect()
    }
}

/// The robot model for a config: layout defaults plus overrides.
pub fn robot_model(spec: &DomainSpec, cfg: &ExperimentConfig) -> Result<SolvedModel> {
    let params = spec.robot_params().with_overrides(spec, cfg.robot_overrides.clone())?;
    SolvedModel::new(spec, params)
}

/// Labels robot traces in batches until `target_rows` unique rows exist.
pub fn generate_dataset(
    user: &mut SimulatedUser,
    robot: &SolvedModel,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<LabeledTransition>> {
    let sampler = sampler(&cfg.sampler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SessionParams {
        n_traces: cfg.traces_per_batch,
        max_len: cfg.trace_len,
        check: cfg.check_params(),
    };
    let mut rows = Vec::new();
    let mut traces = 0;
    while traces < cfg.max_traces {
        simulate_into(user, robot, sampler.as_ref(), params, &mut rng, &mut rows)?;
        traces += cfg.traces_per_batch;
        rows = dedupe(rows);
        if rows.len() >= cfg.target_rows {
            return Ok(rows);
        }
    }
    Err(Error::InsufficientData(format!(
        "only {} unique rows after {traces} traces (wanted {})",
        rows.len(),
        cfg.target_rows
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub instance: usize,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub instance: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveResults {
    pub config: ExperimentConfig,
    pub rows: Vec<CurveRow>,
    pub failures: Vec<InstanceFailure>,
}

impl CurveResults {
    /// Mean test accuracy per training size, ascending by size.
    pub fn mean_curve(&self) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry(r.train_size).or_default();
            e.0 += r.test_accuracy;
            e.1 += 1;
        }
        acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
    }
}

/// One instance: draw a user, label robot traces, and measure the curve.
pub fn run_instance(
    spec: &Arc<DomainSpec>,
    robot: &SolvedModel,
    cfg: &ExperimentConfig,
    instance: usize,
    seed: u64,
) -> Result<Vec<CurveRow>> {
    let mut user = make_user(spec.clone(), &robot.params, cfg.k, seed)?;
    let rows = generate_dataset(&mut user, robot, cfg, seed.wrapping_add(1))?;
    let schema = FeatureSchema::new(spec, cfg.include_next);
    let encoded = encode_all(spec, &schema, &rows)?;
    let points = training_curve(
        &encoded,
        &schema,
        cfg.hyper,
        &cfg.train_sizes,
        cfg.test_split,
        seed.wrapping_add(2),
    )?;
    Ok(points
        .into_iter()
        .map(|p| CurveRow {
            instance,
            seed,
            train_size: p.train_size,
            test_size: p.test_size,
            test_accuracy: p.test_accuracy,
        })
        .collect())
}

/// Learning curves over `cfg.instances` simulated users, run in parallel.
/// Failed instances are logged and skipped; the sweep fails if fewer than
/// 80% complete.
pub fn run_curves(spec: Arc<DomainSpec>, cfg: &ExperimentConfig) -> Result<CurveResults> {
    cfg.validate()?;
    if cfg.domain != spec.name() {
        return Err(Error::Config(format!(
            "config is for `{}`, domain is `{}`",
            cfg.domain,
            spec.name()
        )));
    }
    let robot = robot_model(&spec, cfg)?;
    let seeds = cfg.instance_seeds();
    let outcomes: Vec<(usize, u64, Result<Vec<CurveRow>>)> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| (i, seed, run_instance(&spec, &robot, cfg, i, seed)))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (instance, seed, out) in outcomes {
        match out {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log::warn!("instance {instance} (seed {seed}) failed: {e}");
                failures.push(InstanceFailure {
                    instance,
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let done = cfg.instances - failures.len();
    if (done as f64) < MIN_COMPLETION * cfg.instances as f64 {
        return Err(Error::InsufficientData(format!(
            "only {done} of {} instances completed",
            cfg.instances
        )));
    }
    Ok(CurveResults {
        config: cfg.clone(),
        rows,
        failures,
    })
}

/// Writes `# config: <json>` followed by the CSV body.
pub fn write_results(path: impl AsRef<Path>, results: &CurveResults) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_results_to(&mut out, results)?;
    out.flush()?;
    Ok(())
}

pub fn write_results_to<W: Write>(out: &mut W, results: &CurveResults) -> Result<()> {
    writeln!(out, "# config: {}", serde_json::to_string(&results.config)?)?;
    let mut w = csv::Writer::from_writer(out);
    for r in &results.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<CurveResults> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_results(&text)
}

pub fn parse_results(text: &str) -> Result<CurveResults> {
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    let json = first
        .strip_prefix("# config: ")
        .ok_or_else(|| Error::SchemaMismatch("results file lacks the `# config:` line".into()))?;
    let config: ExperimentConfig = serde_json::from_str(json)?;
    let rows = csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<CurveRow>, _>>()?;
    Ok(CurveResults {
        config,
        rows,
        failures: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub domain: String,
    pub catalog: Vec<String>,
}

impl DatasetHeader {
    pub fn new(spec: &DomainSpec) -> Self {
        DatasetHeader {
            schema_version: FILE_SCHEMA_VERSION,
            domain: spec.name().to_string(),
            catalog: spec.messages().iter().map(|m| m.id.clone()).collect(),
        }
    }

    /// Errors unless the dataset was produced for this domain and catalog.
    pub fn check(&self, spec: &DomainSpec) -> Result<()> {
        let expected = DatasetHeader::new(spec);
        if self.domain != expected.domain || self.catalog != expected.catalog {
            return Err(Error::SchemaMismatch(format!(
                "dataset for `{}` ({} messages) used with `{}` ({} messages)",
                self.domain,
                self.catalog.len(),
                expected.domain,
                expected.catalog.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub rows: Vec<LabeledTransition>,
}

pub fn write_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut out, data)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset_to<W: Write>(out: &mut W, data: &Dataset) -> Result<()> {
    serde_json::to_writer(&mut *out, &data.header)?;
    out.write_all(b"\n")?;
    for r in &data.rows {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

pub fn read_dataset_from<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::SchemaMismatch("dataset has no header line".into()))??;
    let header = parse_versioned::<DatasetHeader>(&first)?;
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(Dataset { header, rows })
}

/// Parses JSON after checking its `schema_version` field.
fn parse_versioned<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    #[derive(Deserialize)]
    struct Probe {
        schema_version: Option<u32>,
    }
    let probe: Probe = serde_json::from_str(text)?;
    match probe.schema_version {
        Some(FILE_SCHEMA_VERSION) => Ok(serde_json::from_str(text)?),
        Some(found) => Err(Error::SchemaVersion {
            found,
            expected: FILE_SCHEMA_VERSION,
        }),
        None => Err(Error::SchemaMismatch("missing `schema_version`".into())),
    }
}

pub fn write_tree(path: impl AsRef<Path>, tree: &DecisionTree) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(tree)?)?;
    Ok(())
}

pub fn read_tree(path: impl AsRef<Path>) -> Result<DecisionTree> {
    parse_tree(&std::fs::read_to_string(path)?)
}

pub fn parse_tree(text: &str) -> Result<DecisionTree> {
    debug_assert_eq!(TREE_SCHEMA_VERSION, FILE_SCHEMA_VERSION);
    let tree: DecisionTree = parse_versioned(text)?;
    tree.check_schema(&tree.schema)?;
    Ok(tree)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFile {
    pub schema_version: u32,
    pub domain: String,
    pub traces: Vec<Trajectory>,
}

impl TraceFile {
    pub fn new(spec: &DomainSpec, traces: Vec<Trajectory>) -> Self {
        TraceFile {
            schema_version: FILE_SCHEMA_VERSION,
            domain: spec.name().to_string(),
            traces,
        }
    }

    pub fn check(&self, spec: &DomainSpec) -> Result<()> {
        if self.domain != spec.name() {
            return Err(Error::SchemaMismatch(format!(
                "traces for `{}` used with `{}`",
                self.domain,
                spec.name()
            )));
        }
        let n = spec.n_states();
        let na = spec.actions().len();
        for (i, t) in self.traces.iter().enumerate() {
            let in_range = t.start < n && t.steps.iter().all(|s| s.state < n && s.next < n && s.action < na);
            if !in_range || !t.is_chain_consistent() {
                return Err(Error::SchemaMismatch(format!(
                    "trace {i} is not a valid trace of `{}`",
                    spec.name()
                )));
            }
        }
        Ok(())
    }
}

pub fn write_traces(path: impl AsRef<Path>, file: &TraceFile) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(file)?)?;
    Ok(())
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<TraceFile> {
    parse_versioned(&std::fs::read_to_string(path)?)
}

/// The robot's most likely trace from the state with the given features.
pub fn most_likely_trace(spec: &DomainSpec, robot: &SolvedModel, start: &[i64], max_len: usize) -> Result<Trajectory> {
    let s = spec
        .state_from_features(start)
        .ok_or_else(|| Error::Config(format!("no state with features {start:?}")))?;
    Ok(most_likely_trajectory(&robot.mdp, &robot.policy(), s, max_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::shipped;

    #[test]
    fn defaults_are_feasible() {
        for d in ["warehouse", "four_rooms", "taxi"] {
            ExperimentConfig::for_domain(d, 0).validate().unwrap();
        }
        let mut bad = ExperimentConfig::for_domain("warehouse", 0);
        bad.target_rows = 500;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_tiny_instance() {
        let spec = Arc::new(shipped("four_rooms").unwrap());
        let mut cfg = ExperimentConfig::for_domain("four_rooms", 3);
        cfg.instances = 1;
        cfg.train_sizes = vec![10];
        cfg.test_split = TestSplit::Count(10);
        cfg.target_rows = 30;
        let res = run_curves(spec, &cfg).unwrap();
        assert_eq!(res.rows.len(), 1);
        assert_eq!(res.rows[0].train_size, 10);
    }

    #[test]
    fn robot_user_is_perfect() {
        let spec = Arc::new(shipped("four_rooms").unwrap());
        let mut cfg = ExperimentConfig::for_domain("four_rooms", 1);
        cfg.k = 0;
        cfg.instances = 2;
        cfg.train_sizes = vec![5, 50];
        cfg.test_split = TestSplit::Count(20);
        cfg.target_rows = 100;
        let res = run_curves(spec, &cfg).unwrap();
        assert!(res.rows.iter().all(|r| r.test_accuracy == 1.0));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let text = r#"{"schema_version":7,"domain":"taxi","catalog":[]}"#;
        assert!(matches!(
            read_dataset_from(text.as_bytes()),
            Err(Error::SchemaVersion { found: 7, .. })
        ));
        assert!(read_dataset_from("".as_bytes()).is_err());
    }

    #[test]
    fn results_need_config_line() {
        assert!(parse_results("instance,seed\n").is_err());
    }
}

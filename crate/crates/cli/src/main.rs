use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use explicable::domains::{resolve, DomainSpec, ParamAssignment, ParamId, ParamValue};
use explicable::explainer::select_messages;
use explicable::harness::{
    generate_dataset, most_likely_trace, read_dataset, read_traces, read_tree, run_curves, write_dataset, write_results,
    write_traces, write_tree, Dataset, DatasetHeader, ExperimentConfig, TraceFile,
};
use explicable::learner::{
    accuracy, conflict_rate, cross_validate, encode_all, train_tree, FeatureSchema, TestSplit, TreeHyper,
};
use explicable::mdp::{sample_categorical, sample_trajectory_with};
use explicable::reconciliation::{
    check_behavior_complete, check_policy_complete, message_params, minimal_complete_explanation, Candidates,
    CheckParams, SolvedModel, Target,
};
use explicable::search::strategy;
use explicable::sim_user::{make_user, MessageMask, SamplerSpec, SimulatedUser};
use explicable::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "explicable", version, about = "Explanation selection for MDP agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DomainArgs {
    /// Shipped domain name or path to a layout file.
    #[arg(long, short)]
    domain: String,
    /// Robot parameter overrides as a JSON object.
    #[arg(long)]
    robot: Option<String>,
}

#[derive(Args, Clone, Copy)]
struct CheckArgs {
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    #[arg(long, default_value_t = 1e-6)]
    eps_opt: f64,
}

impl From<CheckArgs> for CheckParams {
    fn from(a: CheckArgs) -> Self {
        CheckParams {
            delta: a.delta,
            eps_opt: a.eps_opt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Policy,
    Behavior,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a domain and print its value and greedy policy.
    Solve {
        /// Shipped domain name or layout path.
        layout: String,
        /// Solve the human model of a layout scenario instead of the robot's.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write robot traces to a trace file.
    Trace {
        #[command(flatten)]
        domain: DomainArgs,
        /// Start state features, comma-separated; follows the most likely
        /// outcomes. Without it traces are sampled.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        start: Option<Vec<i64>>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a user and write a labeled dataset.
    GenData {
        #[command(flatten)]
        domain: DomainArgs,
        #[arg(long)]
        seed: u64,
        /// Number of mismatched parameters of the simulated user.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Use a layout scenario as the user instead of a random one.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        #[arg(long, default_value_t = 40)]
        trace_len: usize,
        #[arg(long, default_value = "uniform")]
        sampler: String,
        #[arg(long)]
        sampler_size: Option<usize>,
        #[command(flatten)]
        check: CheckArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a labeling tree on a dataset.
    Train {
        #[command(flatten)]
        domain: DomainArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Also report k-fold cross-validation.
        #[arg(long)]
        cv: Option<usize>,
        #[arg(long)]
        include_next: bool,
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learning curves over simulated users, written as CSV.
    Curve {
        #[arg(long, short)]
        domain: String,
        #[arg(long)]
        seed: u64,
        /// Full experiment configuration (JSON); flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        test_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose messages for traces with a trained tree.
    Explain {
        #[command(flatten)]
        domain: DomainArgs,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        tree: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value = "exhaustive")]
        mode: String,
        /// Relabel the traces with this scenario's user under the chosen
        /// messages.
        #[arg(long)]
        verify_scenario: Option<String>,
    },
    /// Check or search complete explanations for a scenario.
    CheckExplanation {
        #[command(flatten)]
        domain: DomainArgs,
        #[arg(long)]
        scenario: String,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Required for behavior mode.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Message ids to check; omit to search for the cheapest.
        #[arg(long, value_delimiter = ',')]
        messages: Option<Vec<String>>,
        #[arg(long, default_value = "exhaustive")]
        strategy: String,
        #[command(flatten)]
        check: CheckArgs,
    },
    /// Run the labeling HTTP service.
    Serve {
        #[arg(long, default_value = "sessions")]
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Allowed UI origin; any origin when omitted.
        #[arg(long)]
        origin: Option<String>,
    },
}

fn load(args: &DomainArgs) -> anyhow::Result<(DomainSpec, ParamAssignment)> {
    let spec = resolve(&args.domain)?;
    let robot = robot_params(&spec, args.robot.as_deref())?;
    Ok((spec, robot))
}

fn robot_params(spec: &DomainSpec, overrides: Option<&str>) -> anyhow::Result<ParamAssignment> {
    let overrides: BTreeMap<ParamId, ParamValue> = match overrides {
        Some(text) => serde_json::from_str(text).map_err(|e| Error::Config(format!("--robot: {e}")))?,
        None => BTreeMap::new(),
    };
    Ok(spec.robot_params().with_overrides(spec, overrides)?)
}

fn emit(value: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Solve { layout, scenario, out } => {
            let spec = resolve(&layout)?;
            let params = match &scenario {
                Some(s) => spec.scenario_params(s)?,
                None => spec.robot_params(),
            };
            let solved = SolvedModel::new(&spec, params)?;
            let policy = solved.policy();
            let start_value: f64 = solved
                .mdp
                .initial()
                .iter()
                .enumerate()
                .map(|(s, p)| p * solved.q.value(s))
                .sum();
            let states: Vec<_> = (0..spec.n_states())
                .filter(|&s| !solved.mdp.is_terminal(s))
                .map(|s| {
                    json!({
                        "features": spec.state_features(s),
                        "action": spec.actions()[policy.action(s)],
                        "value": solved.q.value(s),
                    })
                })
                .collect();
            let report = json!({
                "domain": spec.name(),
                "n_states": spec.n_states(),
                "actions": spec.actions(),
                "expected_start_value": start_value,
                "policy": states,
            });
            match out {
                Some(path) => std::fs::write(path, serde_json::to_string_pretty(&report)?)?,
                None => emit(&json!({
                    "domain": spec.name(),
                    "n_states": spec.n_states(),
                    "expected_start_value": start_value,
                }))?,
            }
        }
        Command::Trace {
            domain,
            start,
            count,
            max_len,
            seed,
            out,
        } => {
            let (spec, robot) = load(&domain)?;
            let solved = SolvedModel::new(&spec, robot)?;
            let traces = match start {
                Some(features) => vec![most_likely_trace(&spec, &solved, &features, max_len)?],
                None => {
                    let seed = seed.ok_or_else(|| Error::Config("sampled traces need --seed".into()))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let policy = solved.policy();
                    (0..count)
                        .map(|_| {
                            let s = sample_categorical(solved.mdp.initial(), &mut rng);
                            sample_trajectory_with(&solved.mdp, &policy, s, max_len, &mut rng)
                        })
                        .collect()
                }
            };
            let n = traces.len();
            write_traces(&out, &TraceFile::new(&spec, traces))?;
            emit(&json!({ "traces": n, "out": out }))?;
        }
        Command::GenData {
            domain,
            seed,
            k,
            scenario,
            rows,
            trace_len,
            sampler,
            sampler_size,
            check,
            out,
        } => {
            let (spec, robot) = load(&domain)?;
            let spec = Arc::new(spec);
            let mut cfg = ExperimentConfig::for_domain(spec.name(), seed);
            cfg.k = k;
            cfg.target_rows = rows;
            cfg.trace_len = trace_len;
            cfg.delta = check.delta;
            cfg.eps_opt = check.eps_opt;
            cfg.sampler = SamplerSpec {
                name: sampler,
                size: sampler_size,
            };
            cfg.check_params().validate()?;
            let solved = SolvedModel::new(&spec, robot.clone())?;
            let mut user = match scenario {
                Some(name) => SimulatedUser::new(spec.clone(), spec.scenario_params(&name)?)?,
                None => make_user(spec.clone(), &robot, k, seed)?,
            };
            let data = generate_dataset(&mut user, &solved, &cfg, seed.wrapping_add(1))?;
            let inexplicable = data.iter().filter(|r| r.label == 0).count();
            write_dataset(
                &out,
                &Dataset {
                    header: DatasetHeader::new(&spec),
                    rows: data.clone(),
                },
            )?;
            emit(&json!({
                "rows": data.len(),
                "inexplicable": inexplicable,
                "user_differs_on": user.human().differing(&robot),
                "out": out,
            }))?;
        }
        Command::Train {
            domain,
            dataset,
            seed,
            cv,
            include_next,
            max_depth,
            out,
        } => {
            let (spec, _) = load(&domain)?;
            let data = read_dataset(&dataset)?;
            data.header.check(&spec)?;
            let schema = FeatureSchema::new(&spec, include_next);
            let rows = encode_all(&spec, &schema, &data.rows)?;
            let hyper = TreeHyper {
                max_depth,
                ..TreeHyper::default()
            };
            let tree = train_tree(&rows, &schema, hyper, seed)?;
            let mut report = json!({
                "rows": rows.len(),
                "train_accuracy": accuracy(&tree, &rows)?,
                "conflict_rate": conflict_rate(&rows),
                "depth": tree.depth(),
                "leaves": tree.n_leaves(),
                "structure_hash": tree.structure_hash(),
            });
            if let Some(k) = cv {
                report["cv"] = serde_json::to_value(cross_validate(&rows, &schema, hyper, k, seed)?)?;
            }
            write_tree(&out, &tree)?;
            emit(&report)?;
        }
        Command::Curve {
            domain,
            seed,
            config,
            instances,
            k,
            sizes,
            test_size,
            out,
        } => {
            let spec = Arc::new(resolve(&domain)?);
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => ExperimentConfig::for_domain(spec.name(), seed),
            };
            cfg.seed = seed;
            if let Some(n) = instances {
                cfg.instances = n;
            }
            if let Some(k) = k {
                cfg.k = k;
            }
            if let Some(s) = sizes {
                cfg.train_sizes = s;
            }
            if let Some(t) = test_size {
                cfg.test_split = TestSplit::Count(t);
            }
            cfg.validate()?;
            let results = run_curves(spec, &cfg)?;
            write_results(&out, &results)?;
            let curve: Vec<_> = results
                .mean_curve()
                .into_iter()
                .map(|(size, acc)| json!({"train_size": size, "mean_test_accuracy": acc}))
                .collect();
            emit(&json!({ "curve": curve, "failed_instances": results.failures, "out": out }))?;
        }
        Command::Explain {
            domain,
            traces,
            tree,
            alpha,
            mode,
            verify_scenario,
        } => {
            let (spec, _) = load(&domain)?;
            let file = read_traces(&traces)?;
            file.check(&spec)?;
            let tree = read_tree(&tree)?;
            let search = strategy(&mode)?;
            let result = select_messages(&spec, &tree, &file.traces, alpha, search.as_ref())?;
            let mut report = serde_json::to_value(&result)?;
            if let Some(name) = verify_scenario {
                let mut user = SimulatedUser::new(Arc::new(spec.clone()), spec.scenario_params(&name)?)?;
                let mask = MessageMask::from_ids(spec.messages(), &result.messages)?;
                user.receive(&mask)?;
                let labels: Vec<Vec<u8>> = file
                    .traces
                    .iter()
                    .map(|t| t.steps.iter().map(|&s| user.label(s, CheckParams::default())).collect())
                    .collect();
                let all = labels.iter().flatten().all(|&l| l == 1);
                report["verification"] = json!({ "scenario": name, "labels": labels, "all_explicable": all });
            }
            emit(&report)?;
        }
        Command::CheckExplanation {
            domain,
            scenario,
            mode,
            traces,
            messages,
            strategy: strategy_name,
            check,
        } => {
            let (spec, robot) = load(&domain)?;
            let human = spec.scenario_params(&scenario)?;
            let params: CheckParams = check.into();
            let traces = match (mode, traces) {
                (Mode::Behavior, Some(path)) => {
                    let f = read_traces(&path)?;
                    f.check(&spec)?;
                    f.traces
                }
                (Mode::Behavior, None) => bail!(Error::Config("behavior mode needs --traces".into())),
                (Mode::Policy, _) => Vec::new(),
            };
            match messages {
                Some(ids) => {
                    let mask = MessageMask::from_ids(spec.messages(), &ids)?;
                    let told = message_params(mask.messages(spec.messages()))?;
                    let subset: Vec<ParamId> = told.ids().cloned().collect();
                    let report = match mode {
                        Mode::Policy => serde_json::to_value(check_policy_complete(
                            &spec,
                            &human,
                            &robot,
                            &subset,
                            params.eps_opt,
                        )?)?,
                        Mode::Behavior => serde_json::to_value(check_behavior_complete(
                            &spec, &human, &robot, &subset, &traces, params,
                        )?)?,
                    };
                    emit(&report)?;
                }
                None => {
                    let target = match mode {
                        Mode::Policy => Target::Policy,
                        Mode::Behavior => Target::Behavior { traces: &traces },
                    };
                    let search = strategy(&strategy_name)?;
                    let result = minimal_complete_explanation(
                        &spec,
                        &human,
                        &robot,
                        &Candidates::catalog(&spec),
                        target,
                        params,
                        search.as_ref(),
                    )?;
                    emit(&serde_json::to_value(&result)?)?;
                }
            }
        }
        Command::Serve { dir, addr, origin } => {
            let origin = origin
                .map(|o| o.parse().map_err(|_| Error::Config(format!("invalid origin `{o}`"))))
                .transpose()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(explicable_service::serve(dir, addr, origin))?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::LayoutParse { .. }
            | Error::InvalidLayout(_)
            | Error::UnknownParam(_)
            | Error::MissingParam(_)
            | Error::ParamValue { .. }
            | Error::UnknownMessage(_)
            | Error::UnknownStrategy { .. }
            | Error::SchemaMismatch(_)
            | Error::SchemaVersion { .. }
            | Error::ConflictingMessages(_)
            | Error::Io(_)
            | Error::Json(_),
        ) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

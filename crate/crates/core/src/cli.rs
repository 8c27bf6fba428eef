//! The `hcnet` command line. [`main`] parses arguments, runs a subcommand
//! and maps the outcome to an exit code: 0 on success, 1 when the command
//! fails, 2 on a usage error.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::dataset::{self, Dataset};
use crate::evalrank::{self, CandidateMode, FactIndex};
use crate::hypergraph::{Query, RelationalHypergraph};
use crate::logic::{self, LogicSignature};
use crate::nn::{self, CheckpointMeta, ModelKind};
use crate::refine::{self, Rounds};
use crate::synth::{self, HyperCycleSuite};
use crate::theorems;
use crate::train::{self, EpochLog, TrainConfig};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Parser)]
#[command(name = "hcnet", version, about = "Link prediction on relational hypergraphs")]
pub struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the HyperCycle train/test suite to a directory.
    GenerateHypercycle(GenerateArgs),
    /// Print colour refinement partitions as `round<TAB>node<TAB>color`.
    Refine(RefineArgs),
    /// Evaluate or compile graded modal logic formulas.
    #[command(subcommand)]
    Logic(LogicCommand),
    /// Train a model on a dataset or a HyperCycle suite directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a JSON report.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run every seeded property check.
    TheoremSuite(SuiteArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = synth::GRID_NODES)]
    pub nodes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = synth::GRID_ARITIES)]
    pub arities: Vec<usize>,
    #[arg(long, default_value_t = 0.7)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Dataset directory; the graph is built from `train.txt`.
    #[arg(long)]
    pub data: PathBuf,
    /// Condition on a query written `relation node ... ? ... node`, with `?`
    /// marking the target position.
    #[arg(long, conflicts_with = "pairwise")]
    pub query: Option<String>,
    /// Pairwise refinement on a knowledge graph, printed as
    /// `round<TAB>node<TAB>node<TAB>color`.
    #[arg(long)]
    pub pairwise: bool,
    /// Number of rounds; node refinement runs until stable when omitted.
    #[arg(long)]
    pub rounds: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum LogicCommand {
    /// Print `node<TAB>true|false` for every node.
    Eval(LogicEvalArgs),
    /// Print the compiled network as JSON.
    Compile(LogicCompileArgs),
}

#[derive(Debug, Args)]
pub struct LogicGraphArgs {
    /// Dataset directory providing the graph and relation signature.
    #[arg(long)]
    pub data: PathBuf,
    /// Node colours, one `node<TAB>color` line per node.
    #[arg(long)]
    pub colors: Option<PathBuf>,
    #[arg(long)]
    pub formula: String,
}

#[derive(Debug, Args)]
pub struct LogicEvalArgs {
    #[command(flatten)]
    pub graph: LogicGraphArgs,
    /// Constant interpretation `name=node`, repeatable.
    #[arg(long = "constant")]
    pub constants: Vec<String>,
}

#[derive(Debug, Args)]
pub struct LogicCompileArgs {
    #[command(flatten)]
    pub graph: LogicGraphArgs,
    /// Also run the network on the graph and include each node's rows.
    #[arg(long)]
    pub run: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    WpInd,
    JfInd,
    MfbInd,
    Hypercycle,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Hcnet,
    Hrnet,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Hcnet => ModelKind::Hcnet,
            ModelArg::Hrnet => ModelKind::Hrnet,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory, or a directory written by `generate-hypercycle`.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with keys of the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting configuration before the file and flags are applied.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    /// Line-delimited JSON epoch log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Rank the validation split instead of the test split.
    #[arg(long)]
    pub valid: bool,
    /// Rank against this many sampled filtered negatives per query.
    #[arg(long)]
    pub eval_negatives: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Print the outcomes as one JSON array.
    #[arg(long)]
    pub json: bool,
}

/// Failure of a subcommand: bad arguments (exit 2) or a domain error (exit 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(BoxError),
}

impl<E: std::error::Error + Send + Sync + 'static> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Failed(Box::new(e))
    }
}

fn failed(msg: impl Into<String>) -> CliError {
    CliError::Failed(msg.into().into())
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return 1;
        }
    }
    let mut out = std::io::stdout().lock();
    match run(cli.command, &mut out) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("usage error: {m}");
            2
        }
        Err(CliError::Failed(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(command: Command, out: &mut impl Write) -> Result<(), CliError> {
    match command {
        Command::GenerateHypercycle(a) => generate(a, out),
        Command::Refine(a) => refine_cmd(a, out),
        Command::Logic(LogicCommand::Eval(a)) => logic_eval(a, out),
        Command::Logic(LogicCommand::Compile(a)) => logic_compile(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Gradcheck(a) => {
            let o = theorems::gradient_agreement(a.seed, a.instances, a.eps, a.tolerance);
            writeln!(out, "{o}")?;
            check(&[o])
        }
        Command::TheoremSuite(a) => {
            let mut all = theorems::exact_suite(a.seed);
            all.push(theorems::wl_partition_check(a.seed, 100, 64, 3, 95));
            if a.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&all)?)?;
            } else {
                for o in &all {
                    writeln!(out, "{o}")?;
                }
            }
            check(&all)
        }
    }
}

fn check(outcomes: &[theorems::CheckOutcome]) -> Result<(), CliError> {
    let failed_count = outcomes.iter().filter(|o| !o.passed).count();
    if failed_count == 0 {
        Ok(())
    } else {
        Err(failed(format!("{failed_count} check(s) failed")))
    }
}

fn generate(a: GenerateArgs, out: &mut impl Write) -> Result<(), CliError> {
    let suite = synth::hypercycle_suite(&a.nodes, &a.arities, a.ratio, a.seed)?;
    synth::write_suite(&a.out, &suite)?;
    writeln!(
        out,
        "wrote {} training and {} test graphs to {}",
        suite.train.len(),
        suite.test.len(),
        a.out.display()
    )?;
    Ok(())
}

/// Parses `relation a ? c` against the dataset vocabulary.
pub fn parse_query(text: &str, data: &Dataset) -> Result<Query, CliError> {
    let mut parts = text.split_whitespace();
    let rel_name = parts
        .next()
        .ok_or_else(|| CliError::Usage("empty query".into()))?;
    let rel = data
        .graph
        .relation_by_name(rel_name)
        .ok_or_else(|| failed(format!("unknown relation `{rel_name}`")))?;
    let names = entity_ids(data);
    let mut given = Vec::new();
    let mut target = None;
    for (i, p) in parts.enumerate() {
        if p == "?" {
            if target.replace(i + 1).is_some() {
                return Err(CliError::Usage("query has more than one `?`".into()));
            }
        } else {
            given.push(
                *names
                    .get(p)
                    .ok_or_else(|| failed(format!("unknown node `{p}`")))?,
            );
        }
    }
    let target = target.ok_or_else(|| CliError::Usage("query needs one `?`".into()))?;
    let q = Query::new(rel.id, given, target);
    data.graph.validate_query(&q)?;
    Ok(q)
}

fn entity_ids(data: &Dataset) -> HashMap<&str, usize> {
    data.entity_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect()
}

fn refine_cmd(a: RefineArgs, out: &mut impl Write) -> Result<(), CliError> {
    let data = dataset::load_dataset(&a.data)?;
    let g = &data.graph;
    let names = &data.entity_names;
    if a.pairwise {
        let rounds = a.rounds.unwrap_or(3);
        let runs = refine::hcwl2_run(g, refine::diagonal_pair_init(g.node_count()), rounds)?;
        for c in &runs {
            for u in 0..c.n {
                for v in 0..c.n {
                    writeln!(out, "{}\t{}\t{}\t{}", c.round, names[u], names[v], c.get(u, v))?;
                }
            }
        }
        return Ok(());
    }
    let rounds = a.rounds.map_or(Rounds::UntilStable, Rounds::Fixed);
    let runs = match &a.query {
        Some(q) => refine::conditional_run(g, &parse_query(q, &data)?, rounds)?,
        None => refine::hrwl1_run(g, refine::NodeColoring::from_graph(g), rounds)?,
    };
    for c in &runs {
        for (v, color) in c.colors.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}", c.round, names[v], color)?;
        }
    }
    Ok(())
}

/// Graph with the colours of `path` applied, and the colour names in id
/// order. Without a file every node carries the single colour `default`.
fn colored_graph(data: &Dataset, path: Option<&Path>) -> Result<(RelationalHypergraph, Vec<String>), CliError> {
    let Some(path) = path else {
        return Ok((data.graph.with_colors(None)?, vec!["default".to_string()]));
    };
    let text = fs::read_to_string(path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    let ids = entity_ids(data);
    let mut palette: Vec<String> = Vec::new();
    let mut colors = vec![None; data.graph.node_count()];
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| failed(format!("{}:{}: {m}", path.display(), lineno + 1));
        let (node, color) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `node<TAB>color`"))?;
        let v = *ids.get(node).ok_or_else(|| bad("unknown node"))?;
        let c = match palette.iter().position(|p| p == color) {
            Some(c) => c,
            None => {
                palette.push(color.to_string());
                palette.len() - 1
            }
        };
        colors[v] = Some(c as u32);
    }
    let colors: Option<Vec<u32>> = colors.into_iter().collect();
    let colors = colors.ok_or_else(|| failed(format!("{}: every node needs a colour", path.display())))?;
    Ok((data.graph.with_colors(Some(colors))?, palette))
}

fn logic_eval(a: LogicEvalArgs, out: &mut impl Write) -> Result<(), CliError> {
    let data = dataset::load_dataset(&a.graph.data)?;
    let (g, palette) = colored_graph(&data, a.graph.colors.as_deref())?;
    let formula = logic::parse_formula(&a.graph.formula)?;
    let ids = entity_ids(&data);
    let mut constants = Vec::new();
    for c in &a.constants {
        let (name, node) = c
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("constant `{c}` is not `name=node`")))?;
        let v = *ids.get(node).ok_or_else(|| failed(format!("unknown node `{node}`")))?;
        constants.push((name.to_string(), v));
    }
    let sig = LogicSignature::for_graph(&g, palette).with_constants(constants);
    let truth = if formula.uses_constants() {
        logic::eval_all_c(&g, &sig, &formula)?
    } else {
        logic::eval_all(&g, &sig, &formula)?
    };
    for (v, t) in truth.iter().enumerate() {
        writeln!(out, "{}\t{t}", data.entity_names[v])?;
    }
    Ok(())
}

fn logic_compile(a: LogicCompileArgs, out: &mut impl Write) -> Result<(), CliError> {
    let data = dataset::load_dataset(&a.graph.data)?;
    let (g, palette) = colored_graph(&data, a.graph.colors.as_deref())?;
    let formula = logic::parse_formula(&a.graph.formula)?;
    let sig = LogicSignature::for_graph(&g, palette);
    let net = logic::compile_hgml_r(&formula, &sig)?;
    let mut report = json!({ "formula": formula.to_string(), "dim": net.dim(), "root": net.root(), "network": net });
    if a.run {
        let rows = logic::run_compiled(&net, &g)?;
        let per_node: serde_json::Map<String, serde_json::Value> = rows
            .iter()
            .enumerate()
            .map(|(v, r)| (data.entity_names[v].clone(), json!(r)))
            .collect();
        report["outputs"] = per_node.into();
    }
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

/// `dir` holds a HyperCycle suite when it has `train/` and `test/`
/// subdirectories instead of split files.
fn is_suite_dir(dir: &Path) -> bool {
    dir.join("train").is_dir() && dir.join("test").is_dir()
}

fn load_train_config(a: &TrainArgs, suite: bool) -> Result<TrainConfig, CliError> {
    let base = match (a.preset, suite) {
        (Some(Preset::WpInd), _) => TrainConfig::wp_ind(),
        (Some(Preset::JfInd), _) => TrainConfig::jf_ind(),
        (Some(Preset::MfbInd), _) => TrainConfig::mfb_ind(),
        (Some(Preset::Hypercycle), _) | (None, true) => {
            TrainConfig::hypercycle(a.model.map_or(ModelKind::Hcnet, Into::into))
        }
        (None, false) => TrainConfig::default(),
    };
    let mut config = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
            // Keys in the file override the preset.
            let mut merged = toml::Table::try_from(&base).map_err(|e| failed(e.to_string()))?;
            let file: toml::Table = toml::from_str(&text)
                .map_err(|e| failed(format!("{}: {e}", path.display())))?;
            merged.extend(file);
            merged
                .try_into::<TrainConfig>()
                .map_err(|e| failed(format!("{}: {e}", path.display())))?
        }
        None => base,
    };
    if let Some(m) = a.model {
        config.model = m.into();
        if config.model == ModelKind::Hrnet {
            config.message = nn::MessageMode::QueryIndependent;
        }
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(lr) = a.lr {
        config.lr = lr;
    }
    config.validate()?;
    Ok(config)
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(a: TrainArgs, out: &mut impl Write) -> Result<(), CliError> {
    let suite = is_suite_dir(&a.data);
    let config = load_train_config(&a, suite)?;
    let log_path = a.log.clone().unwrap_or_else(|| sibling(&a.out, ".log.jsonl"));
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| failed(format!("{}: {e}", parent.display())))?;
    }
    let mut log = fs::File::create(&log_path).map_err(|e| failed(format!("{}: {e}", log_path.display())))?;
    let mut log_err = None;
    let mut on_epoch = |e: &EpochLog| {
        let line = json!({
            "epoch": e.epoch,
            "loss": e.loss,
            "val_mrr": e.val_mrr,
            "seconds": e.seconds,
            "timestamp": unix_seconds(),
        });
        if let Err(err) = writeln!(log, "{line}") {
            log_err.get_or_insert(err);
        }
    };
    let (fit, relations) = if suite {
        let s = synth::load_suite(&a.data)?;
        let fit = synth::train_on_suite(&s, &config, &mut on_epoch)?;
        (fit, vec!["r0".to_string(), "r1".to_string(), "r2".to_string()])
    } else {
        let data = dataset::load_dataset(&a.data)?;
        let fit = train::fit(&data, &config, &mut on_epoch)?;
        (fit, data.relation_names())
    };
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let echo = serde_json::to_value(&config)?;
    let meta = CheckpointMeta {
        seed: config.seed,
        relations,
        echo,
    };
    nn::save_checkpoint(&a.out, &fit.params, &meta)?;
    let echo_path = sibling(&a.out, ".config.toml");
    fs::write(&echo_path, config.to_toml()).map_err(|e| failed(format!("{}: {e}", echo_path.display())))?;
    let last = fit.log.last();
    writeln!(
        out,
        "{}",
        json!({
            "checkpoint": a.out.display().to_string(),
            "config": echo_path.display().to_string(),
            "log": log_path.display().to_string(),
            "epochs": fit.log.len(),
            "best_epoch": fit.best_epoch,
            "final_loss": last.map(|l| l.loss),
            "best_val_mrr": fit.log.iter().filter_map(|l| l.val_mrr).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
        })
    )?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, out: &mut impl Write) -> Result<(), CliError> {
    let (params, meta) = nn::load_checkpoint(&a.checkpoint)?;
    let report = if is_suite_dir(&a.data) {
        let HyperCycleSuite { train, test } = synth::load_suite(&a.data)?;
        let instances = if a.valid { train } else { test };
        serde_json::to_value(synth::evaluate_suite(&params, &instances)?)?
    } else {
        let data = dataset::load_dataset_with_relations(&a.data, Some(&meta.relations))?;
        let split = if a.valid { &data.valid } else { &data.test };
        if split.is_empty() {
            return Err(failed("the requested split is empty"));
        }
        let graph = data.eval_graph()?;
        let known = FactIndex::new(&data.all_facts());
        let mode = match a.eval_negatives {
            Some(k) => CandidateMode::Sampled {
                negatives: k,
                seed: a.seed,
            },
            None => CandidateMode::Full,
        };
        let (report, passes) = evalrank::evaluate_model(&graph, split, &known, &params, mode)?;
        let mut v = serde_json::to_value(report)?;
        v["forward_passes"] = passes.into();
        v
    };
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &a.out {
        fs::write(path, &text).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    }
    writeln!(out, "{text}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::{HyperEdge, Relation};

    fn data() -> Dataset {
        let g = RelationalHypergraph::new(
            vec![Relation::new(0, "r", 3)],
            vec![HyperEdge::new(0, vec![0, 1, 2])],
            3,
            None,
        )
        .unwrap();
        Dataset {
            train: g.edges().to_vec(),
            graph: g,
            valid: vec![],
            test: vec![],
            inference: vec![],
            entity_names: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn query_syntax() {
        let d = data();
        assert_eq!(parse_query("r a ? c", &d).unwrap(), Query::new(0, vec![0, 2], 2));
        assert!(matches!(parse_query("r a b c", &d), Err(CliError::Usage(_))));
        assert!(matches!(parse_query("r ? ? c", &d), Err(CliError::Usage(_))));
        assert!(matches!(parse_query("s a ? c", &d), Err(CliError::Failed(_))));
        assert!(matches!(parse_query("r a ?", &d), Err(CliError::Failed(_))));
    }

    #[test]
    fn usage_errors_exit_with_two() {
        let e = Cli::try_parse_from(["hcnet", "train"]).unwrap_err();
        assert!(e.use_stderr());
        assert!(Cli::try_parse_from(["hcnet", "theorem-suite", "--seed", "7"]).is_ok());
    }
}

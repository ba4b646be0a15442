use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wdpp::data::{self, BasketDataset, VALIDATION_SIZE, TEST_SIZE};
use wdpp::evaluation::{self, EvalSettings};
use wdpp::training::{self, Method, TrainConfig};
use wdpp::Subset;

#[derive(Parser)]
#[command(name = "wdpp", version, about = "Train, sample and evaluate low-rank DPPs")]
struct Cli {
    /// Directory under which run-<timestamp>-<seed>/ folders are created.
    #[arg(long, global = true, env = "WDPP_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a basket file.
    Train(TrainArgs),
    /// Draw exact samples from a model.
    Sample(SampleArgs),
    /// Evaluate a model against held-out baskets.
    Eval(EvalArgs),
    /// Generate a synthetic dataset from a random ground-truth DPP.
    Synth(SynthArgs),
    /// Summarize a model or basket file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Basket file, one comma-separated basket per line.
    #[arg(long)]
    data: PathBuf,
    /// Item ids in the file start at 0 instead of 1.
    #[arg(long)]
    zero_indexed: bool,
    /// Catalog size; defaults to the largest id + 1.
    #[arg(long)]
    items: Option<usize>,
    /// Seed of the 300/2000 validation/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Use every basket instead of splitting.
    #[arg(long)]
    no_split: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// key=value file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    tau_p: Option<f64>,
    #[arg(long)]
    tau_m: Option<f64>,
    #[arg(long)]
    tau_b: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    alpha_decay: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long)]
    max_rejections: Option<usize>,
    /// gumbel_pair or threshold.
    #[arg(long)]
    bernoulli_rule: Option<String>,
    /// unique or iid.
    #[arg(long)]
    proposal: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop baskets smaller than this before splitting.
    #[arg(long, default_value_t = 1)]
    min_size: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; defaults to samples.csv in a new run directory.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    zero_indexed: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 20)]
    rounds: usize,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 2000)]
    precision_samples: usize,
    #[arg(long, default_value_t = 20)]
    eps_points: usize,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 3000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    zero_indexed: bool,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<wdpp::Error> for Failure {
    fn from(e: wdpp::Error) -> Self {
        Self::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg))
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Creates `<root>/run-<timestamp>-<seed>`, adding a suffix if it already exists.
fn run_dir(root: &Path, seed: u64) -> anyhow::Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("run-{stamp}-{seed}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_run_record(dir: &Path, lines: &[(&str, String)]) -> anyhow::Result<()> {
    let text: String = lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(dir.join("run.txt"), text)?;
    Ok(())
}

fn load_data(args: &DataArgs, min_size: usize) -> Result<BasketDataset, Failure> {
    require_file(&args.data, "data file")?;
    let ds = data::load_baskets(&args.data, !args.zero_indexed, args.items)
        .with_context(|| format!("reading {}", args.data.display()))?;
    let ds = if min_size > 1 { ds.filter_min_size(min_size) } else { ds };
    if args.no_split {
        return Ok(ds);
    }
    if ds.len() <= VALIDATION_SIZE + TEST_SIZE {
        warn!(
            "{} baskets is too few for a {VALIDATION_SIZE}/{TEST_SIZE} split; using every basket",
            ds.len()
        );
        return Ok(ds);
    }
    Ok(data::split(ds, args.split_seed).context("splitting baskets")?)
}

fn resolve_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            require_file(p, "config file")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::default()
                .merge_kv(&text)
                .map_err(|e| usage(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    let fmt = |x: f64| format!("{x:?}");
    let overrides: [(&str, Option<String>); 17] = [
        ("method", args.method.map(|m| m.to_string())),
        ("rank", args.rank.map(|v| v.to_string())),
        ("alpha", args.alpha.map(fmt)),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("max_iter", args.max_iter.map(|v| v.to_string())),
        ("learning_rate", args.learning_rate.map(fmt)),
        ("tau_c", args.tau_c.map(fmt)),
        ("tau_p", args.tau_p.map(fmt)),
        ("tau_m", args.tau_m.map(fmt)),
        ("tau_b", args.tau_b.map(fmt)),
        ("lr_decay", args.lr_decay.map(fmt)),
        ("alpha_decay", args.alpha_decay.map(fmt)),
        ("decay_every", args.decay_every.map(|v| v.to_string())),
        ("max_rejections", args.max_rejections.map(|v| v.to_string())),
        ("bernoulli_rule", args.bernoulli_rule.clone()),
        ("proposal", args.proposal.clone()),
        ("seed", args.seed.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(|e| usage(e.to_string()))?;
        }
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn run_train(root: &Path, args: &TrainArgs) -> Outcome {
    let cfg = resolve_config(args)?;
    let ds = load_data(&args.data, args.min_size)?;
    let baskets = ds.train();
    let dir = run_dir(root, cfg.seed)?;
    cfg.save(&dir.join("config.txt")).context("writing config")?;
    write_run_record(
        &dir,
        &[
            ("command", "train".into()),
            ("data", args.data.data.display().to_string()),
            ("one_indexed", (!args.data.zero_indexed).to_string()),
            ("items", ds.m.to_string()),
            ("split_seed", args.data.split_seed.to_string()),
            ("split", (ds.split.is_some()).to_string()),
            ("min_size", args.min_size.to_string()),
            ("train_baskets", baskets.len().to_string()),
        ],
    )?;
    info!("training {} on {} baskets over {} items", cfg.method, baskets.len(), ds.m);
    let out = training::train(ds.m, &baskets, &cfg).context("training failed")?;
    data::save_model(&out.factor, &dir.join("model.txt")).context("writing model")?;
    training::write_trace(&dir.join("trace.csv"), &out.trace).context("writing trace")?;
    if out.skipped_steps > 0 {
        warn!("{} optimizer steps skipped on non-finite gradients", out.skipped_steps);
    }
    if !ds.validation().is_empty() && cfg.method == Method::Wasserstein {
        let val = ds.validation();
        let wd = evaluation::eval_wd(&out.factor, &val, 10, val.len(), cfg.seed)?;
        info!("validation WD {:.4}", wd.mean);
    }
    println!("{}", dir.display());
    Ok(())
}

fn run_sample(root: &Path, args: &SampleArgs) -> Outcome {
    require_file(&args.model, "model file")?;
    let factor = data::load_model(&args.model).context("reading model")?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let samples = evaluation::sample_model(&factor, args.n, &mut rng).context("sampling failed")?;
    let path = match &args.output {
        Some(p) => p.clone(),
        None => {
            let dir = run_dir(root, args.seed)?;
            write_run_record(
                &dir,
                &[
                    ("command", "sample".into()),
                    ("model", args.model.display().to_string()),
                    ("n", args.n.to_string()),
                    ("seed", args.seed.to_string()),
                ],
            )?;
            dir.join("samples.csv")
        }
    };
    data::write_baskets(&path, &samples, !args.zero_indexed).context("writing samples")?;
    println!("{}", path.display());
    Ok(())
}

fn run_eval(root: &Path, args: &EvalArgs) -> Outcome {
    require_file(&args.model, "model file")?;
    let factor = data::load_model(&args.model).context("reading model")?;
    let data_args = DataArgs {
        items: args.data.items.or(Some(factor.m())),
        data: args.data.data.clone(),
        ..args.data
    };
    let ds = load_data(&data_args, 1)?;
    let test = if ds.split.is_some() { ds.test() } else { ds.baskets.clone() };
    if test.is_empty() {
        return Err(usage("no test baskets".into()));
    }
    let settings = EvalSettings {
        n_rounds: args.rounds,
        batch: args.batch,
        n_precision_samples: args.precision_samples,
        eps_grid: evaluation::default_eps_grid(args.eps_points.max(1)),
        top_k: args.top_k,
        seed: args.seed,
    };
    let report = evaluation::evaluate(&factor, &test, &settings).context("evaluation failed")?;
    let dir = run_dir(root, args.seed)?;
    write_run_record(
        &dir,
        &[
            ("command", "eval".into()),
            ("model", args.model.display().to_string()),
            ("data", args.data.data.display().to_string()),
            ("one_indexed", (!args.data.zero_indexed).to_string()),
            ("split_seed", args.data.split_seed.to_string()),
            ("split", ds.split.is_some().to_string()),
            ("test_baskets", test.len().to_string()),
            ("rounds", args.rounds.to_string()),
            ("batch", args.batch.to_string()),
            ("precision_samples", args.precision_samples.to_string()),
            ("eps_points", args.eps_points.to_string()),
            ("top_k", args.top_k.to_string()),
            ("seed", args.seed.to_string()),
        ],
    )?;
    fs::write(dir.join("report.json"), report.to_json().context("serializing report")?)
        .context("writing report")?;
    fs::write(dir.join("precision.csv"), report.precision_csv()).context("writing precision curve")?;
    fs::write(dir.join("marginals.csv"), report.marginals_csv()).context("writing marginals")?;
    evaluation::export_kernel_heatmap(&factor, &dir.join("kernel")).context("writing heatmap")?;
    println!(
        "WD {:.4} [{:.4}, {:.4}]  test ll {:.4}",
        report.wd_mean, report.wd_ci_low, report.wd_ci_high, report.test_ll
    );
    println!("{}", dir.display());
    Ok(())
}

fn run_synth(root: &Path, args: &SynthArgs) -> Outcome {
    if args.k == 0 || args.k > args.m {
        return Err(usage(format!("need 1 <= k <= m, got k={} m={}", args.k, args.m)));
    }
    let (truth, ds) = data::generate_synthetic(args.m, args.k, args.n, args.seed).context("generating data")?;
    let dir = run_dir(root, args.seed)?;
    write_run_record(
        &dir,
        &[
            ("command", "synth".into()),
            ("m", args.m.to_string()),
            ("k", args.k.to_string()),
            ("n", args.n.to_string()),
            ("seed", args.seed.to_string()),
        ],
    )?;
    data::save_model(&truth, &dir.join("truth.txt")).context("writing ground truth")?;
    data::write_baskets(&dir.join("baskets.csv"), &ds.baskets, true).context("writing baskets")?;
    println!("{}", dir.display());
    Ok(())
}

fn run_inspect(args: &InspectArgs) -> Outcome {
    if let Some(path) = &args.model {
        require_file(path, "model file")?;
        let f = data::load_model(path).context("reading model")?;
        let q = f.marginal_kernel().context("marginal kernel")?;
        println!("items {}  rank {}", f.m(), f.k());
        println!("||V||_F {:.6}", f.v().norm());
        println!("expected size {:.4}", q.expected_size());
        println!("log det(L + I) {:.6}", f.log_normalizer());
        let mut probs: Vec<(usize, f64)> = q.inclusion_probs().into_iter().enumerate().collect();
        probs.sort_by(|a, b| b.1.total_cmp(&a.1));
        for (i, p) in probs.iter().take(10) {
            println!("  item {:>4}  {p:.4}", i + 1);
        }
    } else if let Some(path) = &args.data {
        require_file(path, "data file")?;
        let ds = data::load_baskets(path, !args.zero_indexed, None).context("reading baskets")?;
        let sizes: Vec<usize> = ds.baskets.iter().map(Subset::len).collect();
        let mean = sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64;
        println!("baskets {}  items {}", ds.len(), ds.m);
        println!("mean size {mean:.4}  max size {}", sizes.iter().max().unwrap_or(&0));
        let shift = usize::from(!args.zero_indexed);
        for t in evaluation::top_subsets(&ds.baskets, 10) {
            let ids: Vec<String> = t.items.iter().map(|i| (i + shift).to_string()).collect();
            println!("  ({})  {}", ids.join(","), t.count);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = cli.output_root.as_path();
    let result = match &cli.command {
        Command::Train(a) => run_train(root, a),
        Command::Sample(a) => run_sample(root, a),
        Command::Eval(a) => run_eval(root, a),
        Command::Synth(a) => run_synth(root, a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

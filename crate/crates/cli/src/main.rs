//! `crbm`: train, apply and evaluate cumulative RBMs on ordinal data.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crbm_core::data::{
    load_ratings, load_schema, load_survey, rescale_levels, split_protocol, write_ratings, Delimiter, ObservationSet,
    RatingFormat, SplitConfig,
};
use crbm_core::eval::{mae, rmse, write_report, Metric};
use crbm_core::inference::{McmcConfig, MeanFieldConfig};
use crbm_core::io::{
    load_model, save_model, write_posteriors, write_training_log, ModelParameters, RescaleRule, Rescaling, SavedModel,
};
use crbm_core::learning::{train_vector, ChainMode, TrainConfig, TrainingLog};
use crbm_core::matrix::train_matrix;
use crbm_core::predict::{posteriors, predict, Method, Query, Side};
use crbm_core::synthetic::{planted_matrix, sample_matrix, sample_vector, PlantedConfig, SampleConfig};

#[derive(Parser)]
#[command(
    name = "crbm",
    version,
    about = "Cumulative restricted Boltzmann machines for ordinal data"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "CRBM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a rating file or survey table.
    Train(TrainArgs),
    /// Predict level distributions for (user, item) queries.
    Predict(PredictArgs),
    /// Score predictions against true ratings.
    Evaluate(EvaluateArgs),
    /// Export factor posteriors.
    Posteriors(PosteriorArgs),
    /// Draw synthetic ratings from a model or a planted structure.
    Sample(SampleArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Vector,
    Matrix,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Chains {
    Persistent,
    Contrastive,
}

#[derive(Args)]
struct TrainArgs {
    /// Ratings (user, item, rating[, timestamp]) or, with --schema, a survey table.
    #[arg(long, env = "CRBM_DATA")]
    data: PathBuf,
    /// Column schema of a survey table, one `name levels` per line.
    #[arg(long, env = "CRBM_SCHEMA")]
    schema: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "vector", env = "CRBM_MODE")]
    mode: Mode,
    /// Instance factors.
    #[arg(long, default_value_t = 10, env = "CRBM_K")]
    k: usize,
    /// Item factors (matrix mode).
    #[arg(long, default_value_t = 10, env = "CRBM_S")]
    s: usize,
    /// Model file to write.
    #[arg(long, env = "CRBM_OUT")]
    out: PathBuf,
    /// Training log (default: the model path with `.log.tsv` appended).
    #[arg(long, env = "CRBM_LOG")]
    log: Option<PathBuf>,
    /// Levels of the rating scale.
    #[arg(long, default_value_t = 5, env = "CRBM_LEVELS")]
    levels: usize,
    /// Map ratings onto this many levels before training.
    #[arg(long, env = "CRBM_RESCALE_TO")]
    rescale_to: Option<usize>,
    #[arg(long, default_value_t = 50, env = "CRBM_EPOCHS")]
    epochs: usize,
    #[arg(long, default_value_t = 0.01, env = "CRBM_LR")]
    lr: f64,
    /// Learning-rate decay per epoch: `lr / (1 + decay * epoch)`.
    #[arg(long, default_value_t = 0.0, env = "CRBM_LR_DECAY")]
    lr_decay: f64,
    /// Shared free chains (fully observed data only).
    #[arg(long, default_value_t = 100, env = "CRBM_CHAINS")]
    chains: usize,
    #[arg(long, value_enum, default_value = "persistent", env = "CRBM_CHAIN_MODE")]
    chain_mode: Chains,
    /// Gibbs sweeps per update.
    #[arg(long, default_value_t = 1, env = "CRBM_CD")]
    cd: usize,
    /// Posterior smoothing weight (matrix mode).
    #[arg(long, default_value_t = 0.7, env = "CRBM_ETA")]
    eta: f64,
    #[arg(long, default_value_t = 100, env = "CRBM_MINIBATCH")]
    minibatch: usize,
    #[arg(long, default_value_t = 3, env = "CRBM_PATIENCE")]
    patience: usize,
    #[arg(long, default_value_t = 0, env = "CRBM_SEED")]
    seed: u64,
    /// Users with fewer ratings are dropped.
    #[arg(long, default_value_t = 30, env = "CRBM_MIN_RATINGS")]
    min_ratings: usize,
    #[arg(long, default_value_t = 5, env = "CRBM_N_VALID")]
    n_valid: usize,
    #[arg(long, default_value_t = 10, env = "CRBM_N_TEST")]
    n_test: usize,
    /// Hold out each user's latest ratings instead of random ones.
    #[arg(long, env = "CRBM_BY_TIME")]
    by_time: bool,
    /// Train on every rating with no validation or test hold-out.
    #[arg(long, conflicts_with_all = ["min_ratings", "n_valid", "n_test", "by_time"])]
    no_split: bool,
    /// Write the training part of the split here.
    #[arg(long)]
    train_out: Option<PathBuf>,
    /// Write the test part of the split here.
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct InferenceArgs {
    /// Use MCMC with this many samples instead of mean-field.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), env = "CRBM_MCMC")]
    mcmc: Option<u64>,
    /// MCMC burn-in sweeps.
    #[arg(long, default_value_t = 50, env = "CRBM_BURN_IN")]
    burn_in: usize,
    #[arg(long, default_value_t = 0, env = "CRBM_SEED")]
    seed: u64,
}

impl InferenceArgs {
    fn method(&self) -> Method {
        match self.mcmc {
            Some(n) => Method::Mcmc {
                config: McmcConfig {
                    n_samples: n as usize,
                    burn_in: self.burn_in,
                    rao_blackwell: true,
                },
                seed: self.seed,
            },
            None => Method::Variational(MeanFieldConfig::default()),
        }
    }
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, env = "CRBM_MODEL")]
    model: PathBuf,
    /// Ratings the predictions condition on, usually the training data.
    #[arg(long)]
    context: PathBuf,
    /// Query rows `user item [...]`; extra columns are ignored.
    #[arg(long)]
    queries: PathBuf,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    inference: InferenceArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Output of `crbm predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Ratings holding the true levels.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 5, env = "CRBM_LEVELS")]
    levels: usize,
    /// Report file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SideArg {
    Instances,
    Items,
}

#[derive(Args)]
struct PosteriorArgs {
    #[arg(long, env = "CRBM_MODEL")]
    model: PathBuf,
    /// Ratings to condition on.
    #[arg(long)]
    data: PathBuf,
    /// Survey schema when `--data` is a survey table.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "instances")]
    side: SideArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    inference: InferenceArgs,
}

#[derive(Args)]
struct SampleArgs {
    /// Model to sample from.
    #[arg(long, env = "CRBM_MODEL", required_unless_present = "planted")]
    model: Option<PathBuf>,
    /// Generate planted row and column structure instead.
    #[arg(long, conflicts_with = "model")]
    planted: bool,
    /// Instances to draw from a vector model, or rows of a planted matrix.
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    /// Columns of a planted matrix.
    #[arg(long, default_value_t = 100)]
    items: usize,
    /// Planted instance factors.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Planted item factors.
    #[arg(long, default_value_t = 5)]
    s: usize,
    #[arg(long, default_value_t = 5)]
    levels: usize,
    /// Probability that a cell is observed.
    #[arg(long, default_value_t = 1.0)]
    density: f64,
    #[arg(long, default_value_t = 100)]
    burn_in: usize,
    #[arg(long, default_value_t = 0, env = "CRBM_SEED")]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Posteriors(a) => posteriors_cmd(a),
        Command::Sample(a) => sample(a),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_data(data: &Path, schema: Option<&Path>, levels: usize) -> Result<ObservationSet> {
    match schema {
        Some(s) => {
            let schema = load_schema(s).with_context(|| format!("reading schema {}", s.display()))?;
            load_survey(data, &schema).with_context(|| format!("reading survey {}", data.display()))
        }
        None => Ok(load_ratings(data, &RatingFormat::new(levels))
            .with_context(|| format!("reading ratings {}", data.display()))?
            .0),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut set = load_data(&a.data, a.schema.as_deref(), a.levels)?;
    let rescaling = match a.rescale_to {
        Some(to) => {
            set = rescale_levels(&set, a.levels, to)?;
            Some(Rescaling {
                from_levels: a.levels,
                to_levels: to,
                rule: RescaleRule::Ceiling,
            })
        }
        None => None,
    };
    let (train, valid, test) = if a.no_split {
        (set, None, None)
    } else {
        let split = split_protocol(
            &set,
            &SplitConfig {
                min_ratings: a.min_ratings,
                n_valid: a.n_valid,
                n_test: a.n_test,
                by_time: a.by_time,
            },
            &mut crbm_core::rng::stream(a.seed, &[u64::MAX]),
        )?;
        if split.train.is_empty() {
            bail!("no user has at least {} ratings", a.min_ratings);
        }
        (split.train, Some(split.valid), Some(split.test))
    };
    if let Some(p) = &a.train_out {
        write_ratings(&train, p)?;
    }
    if let (Some(p), Some(t)) = (&a.test_out, &test) {
        write_ratings(t, p)?;
    }
    let config = TrainConfig {
        n_factors: a.k,
        n_item_factors: a.s,
        learning_rate: a.lr,
        lr_decay: a.lr_decay,
        epochs: a.epochs,
        minibatch: a.minibatch,
        patience: a.patience,
        cd_sweeps: a.cd,
        free_chains: a.chains,
        chain_mode: match a.chain_mode {
            Chains::Persistent => ChainMode::Persistent,
            Chains::Contrastive => ChainMode::Contrastive,
        },
        eta: a.eta,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let valid = valid.filter(|v| !v.is_empty());
    let (mut model, log) = match a.mode {
        Mode::Vector => {
            let (p, log) = train_vector(&train, valid.as_ref(), &config)?;
            (SavedModel::vector(p, &train), log)
        }
        Mode::Matrix => {
            let (p, tables, log) = train_matrix(&train, valid.as_ref(), &config)?;
            (SavedModel::matrix(p, tables, &train), log)
        }
    };
    model.rescaling = rescaling;
    save_model(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.tsv");
        p.into()
    });
    write_training_log(&log, BufWriter::new(File::create(&log_path)?))?;
    report_training(&log, &model, &train, test.as_ref())
}

fn report_training(
    log: &TrainingLog,
    model: &SavedModel,
    train: &ObservationSet,
    test: Option<&ObservationSet>,
) -> Result<()> {
    let mut out = io::stdout().lock();
    let best = log.epochs.iter().find(|e| e.epoch == log.best_epoch);
    writeln!(out, "best_epoch\t{}", log.best_epoch)?;
    writeln!(out, "epochs_run\t{}", log.epochs.len())?;
    if let Some(e) = best {
        writeln!(out, "train_pseudo_ll\t{:.6}", e.train_pseudo_ll)?;
        for (name, v) in [
            ("valid_pseudo_ll", e.valid_pseudo_ll),
            ("valid_rmse", e.valid_rmse),
            ("valid_mae", e.valid_mae),
        ] {
            if let Some(v) = v {
                writeln!(out, "{name}\t{v:.6}")?;
            }
        }
    }
    if let Some(test) = test.filter(|t| !t.is_empty()) {
        let queries = queries_of(test);
        let preds = predict(model, train, &queries, &Method::Variational(MeanFieldConfig::default()))?;
        let truth: Vec<usize> = test.entries.iter().map(|e| e.level).collect();
        let means: Vec<f64> = preds.iter().map(|p| p.distribution.mean()).collect();
        let maps: Vec<usize> = preds.iter().map(|p| p.distribution.map_level()).collect();
        writeln!(out, "test_rmse\t{:.6}", rmse(&means, &truth)?)?;
        writeln!(out, "test_mae\t{:.6}", mae(&maps, &truth)?)?;
    }
    if log.skipped_cells > 0 {
        log::warn!("{} cells with vanishing interval mass were skipped", log.skipped_cells);
    }
    Ok(())
}

fn queries_of(set: &ObservationSet) -> Vec<Query> {
    set.entries
        .iter()
        .map(|e| Query {
            instance: set.instance_ids[e.instance].clone(),
            item: set.item_ids[e.item].clone(),
        })
        .collect()
}

/// Rows of `path` split on the detected delimiter, skipping blank lines,
/// `#` comments and a header whose first field is `user`.
fn read_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut delimiter = None;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let d = *delimiter.get_or_insert_with(|| Delimiter::detect(line));
        let fields: Vec<String> = d.split(line).into_iter().map(str::to_string).collect();
        if rows.is_empty() && fields[0].eq_ignore_ascii_case("user") {
            continue;
        }
        rows.push((n + 1, fields));
    }
    Ok(rows)
}

fn load_context(path: &Path, model: &SavedModel) -> Result<ObservationSet> {
    let levels = model.items().scales.iter().map(|s| s.levels()).max().unwrap_or(2);
    match model.rescaling {
        Some(r) => {
            let set = load_ratings(path, &RatingFormat::new(r.from_levels))?.0;
            Ok(rescale_levels(&set, r.from_levels, r.to_levels)?)
        }
        None => Ok(load_ratings(path, &RatingFormat::new(levels))
            .with_context(|| format!("reading ratings {}", path.display()))?
            .0),
    }
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    let context = load_context(&a.context, &model)?;
    let mut queries = Vec::new();
    for (line, fields) in read_rows(&a.queries)? {
        if fields.len() < 2 {
            bail!("{}:{line}: expected `user item`", a.queries.display());
        }
        queries.push(Query {
            instance: fields[0].clone(),
            item: fields[1].clone(),
        });
    }
    let preds = predict(&model, &context, &queries, &a.inference.method())?;
    let levels = preds.iter().map(|p| p.distribution.levels()).max().unwrap_or(0);
    let mut out = output(a.out.as_deref())?;
    write!(out, "user\titem")?;
    for l in 1..=levels {
        write!(out, "\tp{l}")?;
    }
    writeln!(out, "\tmean\tmap\tcold_start")?;
    for (q, p) in queries.iter().zip(&preds) {
        write!(out, "{}\t{}", q.instance, q.item)?;
        for l in 1..=levels {
            write!(out, "\t{:.12}", p.distribution.prob(l))?;
        }
        writeln!(
            out,
            "\t{:.6}\t{}\t{}",
            p.distribution.mean(),
            p.distribution.map_level(),
            u8::from(p.cold_start)
        )?;
    }
    out.flush()?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let rows = fs::read_to_string(&a.predictions).with_context(|| format!("reading {}", a.predictions.display()))?;
    let mut lines = rows.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().context("predictions file is empty")?.split('\t').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .with_context(|| format!("predictions file has no `{name}` column"))
    };
    let (mean_col, map_col) = (col("mean")?, col("map")?);
    let mut predicted: HashMap<(String, String), (f64, usize)> = HashMap::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let parse =
            || -> Option<(f64, usize)> { Some((f.get(mean_col)?.parse().ok()?, f.get(map_col)?.parse().ok()?)) };
        let v = parse().with_context(|| format!("{}:{}: malformed row", a.predictions.display(), n + 2))?;
        predicted.insert((f[0].to_string(), f[1].to_string()), v);
    }
    let truth = load_ratings(&a.truth, &RatingFormat::new(a.levels))
        .with_context(|| format!("reading ratings {}", a.truth.display()))?
        .0;
    if truth.len() != predicted.len() {
        bail!("{} predictions for {} true ratings", predicted.len(), truth.len());
    }
    let (mut means, mut maps, mut levels) = (Vec::new(), Vec::new(), Vec::new());
    for e in &truth.entries {
        let key = (truth.instance_ids[e.instance].clone(), truth.item_ids[e.item].clone());
        let Some(&(m, l)) = predicted.get(&key) else {
            bail!("no prediction for user `{}` item `{}`", key.0, key.1);
        };
        means.push(m);
        maps.push(l);
        levels.push(e.level);
    }
    let metrics = [
        Metric {
            name: "rmse",
            value: rmse(&means, &levels)?,
            n_cells: levels.len(),
        },
        Metric {
            name: "mae",
            value: mae(&maps, &levels)?,
            n_cells: levels.len(),
        },
    ];
    let mut out = output(a.out.as_deref())?;
    write_report(&metrics, &mut out)?;
    out.flush()?;
    Ok(())
}

fn posteriors_cmd(a: PosteriorArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    let data = match &a.schema {
        Some(_) => load_data(&a.data, a.schema.as_deref(), 0)?,
        None => load_context(&a.data, &model)?,
    };
    let side = match a.side {
        SideArg::Instances => Side::Instances,
        SideArg::Items => Side::Items,
    };
    let rows = posteriors(&model, &data, side, &a.inference.method())?;
    let width = match (&model.model, side) {
        (ModelParameters::Matrix(m), Side::Items) => m.n_item_factors,
        _ => model.items().n_factors,
    };
    let ids: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    let table: Vec<f64> = rows.into_iter().flat_map(|r| r.1).collect();
    let mut out = output(a.out.as_deref())?;
    write_posteriors(&ids, &table, width, &mut out)?;
    out.flush()?;
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let set = match &a.model {
        Some(path) => {
            let model = load_model(path).with_context(|| format!("reading model {}", path.display()))?;
            let cfg = SampleConfig {
                burn_in: a.burn_in,
                density: a.density,
                seed: a.seed,
            };
            match &model.model {
                ModelParameters::Vector(p) => sample_vector(p, a.instances, &cfg)?,
                ModelParameters::Matrix(m) => {
                    let mut set = sample_matrix(m, &cfg)?;
                    set.instance_ids.clone_from(&model.instance_ids);
                    set.item_ids.clone_from(&model.item_ids);
                    set
                }
            }
        }
        None => planted_matrix(&PlantedConfig {
            n_instances: a.instances,
            n_items: a.items,
            n_factors: a.k,
            n_item_factors: a.s,
            levels: a.levels,
            density: a.density,
            seed: a.seed,
            ..PlantedConfig::default()
        })?,
    };
    write_ratings(&set, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

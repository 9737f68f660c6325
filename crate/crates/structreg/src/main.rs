//! Command-line surface: train, predict, evaluate, sweep, stability,
//! bounds, synth.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use structreg::corpus::{
    generate_synthetic, read_conll, write_conll, Alphabet, ConllSchema, Dataset, SynthSpec,
};
use structreg::error::Error;
use structreg::eval::evaluate;
use structreg::features::{extract, TemplateSet};
use structreg::models::Model;
use structreg::theory::{
    generalization_bound, probe_stability, sgd_iterations, stability_bounds, SgdTheoryParams,
    TheoryParams,
};
use structreg::train::{predict_all, train, Objective, TrainConfig};

#[derive(Parser)]
#[command(
    name = "structreg",
    about = "Sequence labeling with structure regularization: CRF / averaged perceptron training, \
             decoding, sweeps, stability probes and bound calculators",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on CoNLL data and write model + report files
    Train(TrainArgs),
    /// Tag CoNLL data with a trained model (appends a predicted column)
    Predict(PredictArgs),
    /// Score a trained model against gold tags
    Evaluate(PredictArgs),
    /// Train over a grid of mini sizes x seeds and emit a results TSV
    Sweep(SweepArgs),
    /// Leave-one-out stability probe over mini sizes x seeds
    Stability(StabilityArgs),
    /// Closed-form stability / generalization / convergence bounds
    Bounds(BoundsArgs),
    /// Generate a synthetic CoNLL corpus
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct CommonTrainOpts {
    /// crf or perceptron
    #[arg(long, default_value = "crf")]
    model: String,
    /// Expected mini-sample length n' (0 disables decomposition)
    #[arg(long, default_value_t = 0.0)]
    mini_size: f64,
    /// L2 regularization strength
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    eta0: f64,
    #[arg(long, default_value_t = 0.9)]
    decay: f64,
    /// Epoch budget (perceptron always runs the full budget)
    #[arg(long)]
    epochs: Option<u64>,
    /// Relative objective change that stops CRF training
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Template file (mini-language: U:w[-1], U:w[0]|w[1], U:prefix3[0], E:rich)
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Enable rich edge features (node features on every transition)
    #[arg(long)]
    rich_edges: bool,
}

impl CommonTrainOpts {
    fn config(&self, seed: u64, templates: &TemplateSet) -> Result<TrainConfig, Error> {
        let objective = match self.model.as_str() {
            "crf" => Objective::Crf,
            "perceptron" => Objective::Perceptron,
            other => return Err(Error::config(format!("unknown model `{}`", other))),
        };
        let mut cfg = match objective {
            Objective::Crf => TrainConfig::crf(seed),
            Objective::Perceptron => TrainConfig::perceptron(seed),
        };
        cfg.mini_size = self.mini_size;
        cfg.lambda = self.lambda;
        if objective == Objective::Crf {
            cfg.eta0 = self.eta0;
            cfg.decay = self.decay;
        }
        if let Some(e) = self.epochs {
            cfg.max_epochs = e;
        }
        cfg.convergence_threshold = self.threshold;
        cfg.use_rich_edges = self.rich_edges || templates.use_rich_edges;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training data (CoNLL: token per line, tag in the last column)
    #[arg(long)]
    input: PathBuf,
    /// Optional development data, evaluated each epoch
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Output model file
    #[arg(long)]
    output: PathBuf,
    /// Report file prefix; writes <prefix>.jsonl and <prefix>.tsv
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    opts: CommonTrainOpts,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output path (predict); defaults to stdout
    #[arg(long)]
    output: Option<PathBuf>,
    /// Template file; must match the one used for training
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated mini sizes; 0 is the no-decomposition baseline
    #[arg(long, default_value = "0,1.5,2.5,3.5,5.5,10.5,15.5,20.5")]
    grid: String,
    /// Comma-separated seeds or `a..b` ranges
    #[arg(long, default_value = "0,1,2,3,4,5,6,7,8,9")]
    seeds: String,
    /// Comma-separated objectives to sweep
    #[arg(long, default_value = "crf,perceptron")]
    models: String,
    /// Results TSV; timings go to <output>.timings
    #[arg(long)]
    output: PathBuf,
    /// Worker pool size (default: available parallelism)
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    opts: CommonTrainOpts,
}

#[derive(Args)]
struct StabilityArgs {
    /// Training data; omitted means the built-in synthetic task
    #[arg(long)]
    train: Option<PathBuf>,
    /// Held-out data for probe positions (required with --train)
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Comma-separated mini sizes to compare; 0 = no decomposition
    #[arg(long, default_value = "0,4")]
    mini_sizes: String,
    #[arg(long, default_value = "0,1,2,3,4,5,6,7,8,9")]
    seeds: String,
    #[arg(long, default_value_t = 20)]
    removals: usize,
    #[arg(long, default_value_t = 50)]
    probe_points: usize,
    /// Synthetic training-set size when no --train is given
    #[arg(long, default_value_t = 100)]
    synth_samples: usize,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    opts: CommonTrainOpts,
}

#[derive(Args)]
struct BoundsArgs {
    /// key=value config file; explicit flags win
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    v: Option<f64>,
    #[arg(long)]
    n: Option<f64>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    empirical_risk: Option<f64>,
    // SGD convergence constants; the SGD section prints when all are given
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    a0: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    labels: usize,
    #[arg(long, default_value_t = 100)]
    vocab: usize,
    #[arg(long, default_value_t = 40.0)]
    mean_length: f64,
    #[arg(long, default_value_t = 400)]
    samples: usize,
    #[arg(long, default_value_t = 8.0)]
    transition_sharpness: f64,
    #[arg(long, default_value_t = 8.0)]
    emission_sharpness: f64,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CoNLL file; defaults to stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a, false),
        Command::Evaluate(a) => cmd_predict(a, true),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Stability(a) => cmd_stability(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Synth(a) => cmd_synth(a),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}

fn open_input(path: &Path) -> Result<BufReader<fs::File>, Error> {
    match fs::File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::config(format!(
            "input file not found: {}",
            path.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

fn load_templates(path: Option<&Path>) -> Result<TemplateSet, Error> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            TemplateSet::parse(&text)
        }
        None => Ok(TemplateSet::default()),
    }
}

fn read_training_data(path: &Path, templates: &TemplateSet) -> Result<Dataset, Error> {
    let mut ds = read_conll(open_input(path)?, &ConllSchema::default())?;
    extract(&mut ds, templates, false)?;
    ds.freeze();
    Ok(ds)
}

/// Read evaluation data against a trained model's alphabets: unknown
/// labels are an error, unknown features are dropped.
fn read_aligned(
    path: &Path,
    labels: &Alphabet,
    feats: &Alphabet,
    templates: &TemplateSet,
) -> Result<Dataset, Error> {
    let raw = read_conll(open_input(path)?, &ConllSchema::default())?;
    let mut labels = labels.clone();
    labels.freeze();
    let mut ds = Dataset {
        samples: raw.samples,
        label_alphabet: labels,
        feature_alphabet: feats.clone(),
    };
    for s in &mut ds.samples {
        for (g, tok) in s.gold.iter_mut().zip(&s.tokens) {
            let name = raw
                .label_alphabet
                .string(*g)
                .expect("gold id from the same reader");
            *g = ds.label_alphabet.lookup(name).ok_or_else(|| {
                Error::data(format!(
                    "label `{}` (token `{}`) is not in the model's alphabet",
                    name, tok.surface
                ))
            })?;
        }
    }
    extract(&mut ds, templates, true)?;
    Ok(ds)
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let templates = load_templates(a.opts.templates.as_deref())?;
    let mut ds = read_training_data(&a.input, &templates)?;
    let dev = a
        .dev
        .as_deref()
        .map(|p| read_aligned(p, &ds.label_alphabet, &ds.feature_alphabet, &templates))
        .transpose()?;
    let mut cfg = a.opts.config(a.opts.seed, &templates)?;
    cfg.eval_each_epoch = dev.is_some();
    ds.freeze();
    let (model, report) = train(&ds, dev.as_ref(), &cfg)?;
    let mut buf = Vec::new();
    model.write(&mut buf)?;
    fs::write(&a.output, buf)?;
    if let Some(prefix) = &a.report {
        fs::write(prefix.with_extension("jsonl"), report.to_jsonl())?;
        fs::write(prefix.with_extension("tsv"), report.to_tsv())?;
    }
    eprintln!(
        "trained {} epochs ({} updates), converged at {:?}, model -> {}",
        report.epochs.len(),
        report.total_updates,
        report.converged_at,
        a.output.display()
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs, eval_mode: bool) -> Result<(), Error> {
    let model = Model::read(&mut open_input(&a.model)?)?;
    let mut templates = load_templates(a.templates.as_deref())?;
    templates.use_rich_edges = model.layout.rich_edges;
    let ds = read_aligned(
        &a.input,
        &model.label_alphabet,
        &model.feature_alphabet,
        &templates,
    )?;
    if eval_mode {
        let result = evaluate(&model, &ds)?;
        println!("{}", serde_json::to_string_pretty(&result).expect("serializes"));
        println!("{}", result.table(&ds.label_alphabet));
    } else {
        let pred = predict_all(&model, &ds)?;
        let mut out = Vec::new();
        write_conll(&mut out, &ds, Some(&pred))?;
        match &a.output {
            Some(p) => fs::write(p, out)?,
            None => std::io::stdout().write_all(&out)?,
        }
    }
    Ok(())
}

fn parse_list(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad number `{}` in list", x)))
        })
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Error> {
    let mut seeds = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().map_err(|_| Error::config(format!("bad seed range `{}`", part)))?;
            let b: u64 = b.parse().map_err(|_| Error::config(format!("bad seed range `{}`", part)))?;
            seeds.extend(a..=b);
        } else {
            seeds.push(
                part.parse()
                    .map_err(|_| Error::config(format!("bad seed `{}`", part)))?,
            );
        }
    }
    Ok(seeds)
}

fn install_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Error> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("worker pool: {}", e)))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Error> {
    let templates = load_templates(a.opts.templates.as_deref())?;
    let train_ds = read_training_data(&a.train, &templates)?;
    let dev = a
        .dev
        .as_deref()
        .map(|p| read_aligned(p, &train_ds.label_alphabet, &train_ds.feature_alphabet, &templates))
        .transpose()?;
    let test_ds = read_aligned(
        &a.test,
        &train_ds.label_alphabet,
        &train_ds.feature_alphabet,
        &templates,
    )?;
    let grid = parse_list(&a.grid)?;
    let seeds = parse_seeds(&a.seeds)?;
    let models: Vec<String> = a.models.split(',').map(|s| s.trim().to_string()).collect();

    let mut cells = Vec::new();
    for model in &models {
        for &mini in &grid {
            for &seed in &seeds {
                cells.push((model.clone(), mini, seed));
            }
        }
    }

    let opts = a.opts.clone();
    // (deterministic metric rows, timing rows) per cell; timings are
    // kept out of the main TSV so identical runs produce identical files
    let results: Vec<(String, String)> = install_pool(a.workers, || {
        cells
            .par_iter()
            .map(|(model, mini, seed)| {
                let run = || -> Result<(String, String), Error> {
                    let mut o = opts.clone();
                    o.model = model.clone();
                    o.mini_size = *mini;
                    let cfg = o.config(*seed, &templates)?;
                    let t0 = std::time::Instant::now();
                    let (m, report) = train(&train_ds, dev.as_ref(), &cfg)?;
                    let secs = t0.elapsed().as_secs_f64();
                    let r = evaluate(&m, &test_ds)?;
                    let mut rows = format!(
                        "{}\t{}\t{}\ttoken_accuracy\t{:.6}\n{}\t{}\t{}\tepochs\t{}\n",
                        model, mini, seed, r.token_accuracy, model, mini, seed,
                        report.epochs.len()
                    );
                    if let Some(c) = r.chunk {
                        rows.push_str(&format!(
                            "{}\t{}\t{}\tchunk_f1\t{:.6}\n",
                            model, mini, seed, c.f1
                        ));
                    }
                    let timing = format!(
                        "{}\t{}\t{}\ttrain_seconds\t{:.3}\n",
                        model, mini, seed, secs
                    );
                    Ok((rows, timing))
                };
                run().unwrap_or_else(|e| {
                    (
                        format!("{}\t{}\t{}\terror\t{}\n", model, mini, seed, e),
                        String::new(),
                    )
                })
            })
            .collect()
    })?;

    let mut tsv = String::from("model\tmini_size\tseed\tmetric\tvalue\n");
    let mut timings = String::from("model\tmini_size\tseed\tmetric\tvalue\n");
    for (rows, timing) in &results {
        tsv.push_str(rows);
        timings.push_str(timing);
    }
    fs::write(&a.output, tsv)?;
    let mut timing_path = a.output.clone().into_os_string();
    timing_path.push(".timings");
    fs::write(timing_path, timings)?;
    eprintln!("sweep complete: {} cells -> {}", results.len(), a.output.display());
    Ok(())
}

/// Built-in synthetic task for the stability probe.
fn synthetic_probe_data(
    samples: usize,
    seed: u64,
    templates: &TemplateSet,
) -> Result<(Dataset, Dataset), Error> {
    let spec = SynthSpec {
        num_labels: 5,
        vocab_size: 100,
        mean_length: 20.0,
        num_samples: samples + samples / 2,
        transition_sharpness: 8.0,
        emission_sharpness: 8.0,
        noise_rate: 0.2,
        seed,
    };
    let mut all = generate_synthetic(&spec)?;
    extract(&mut all, templates, false)?;
    all.freeze();
    let mut train_ds = all.clone();
    train_ds.samples.truncate(samples);
    let mut held = all;
    held.samples.drain(..samples);
    Ok((train_ds, held))
}

fn cmd_stability(a: StabilityArgs) -> Result<(), Error> {
    let templates = load_templates(a.opts.templates.as_deref())?;
    let mini_sizes = parse_list(&a.mini_sizes)?;
    let seeds = parse_seeds(&a.seeds)?;

    let file_data = match (&a.train, &a.heldout) {
        (Some(t), Some(h)) => {
            let train_ds = read_training_data(t, &templates)?;
            let held = read_aligned(h, &train_ds.label_alphabet, &train_ds.feature_alphabet, &templates)?;
            Some((train_ds, held))
        }
        (Some(_), None) => {
            return Err(Error::config("--heldout is required with --train"));
        }
        _ => None,
    };

    let mut out = String::from("mini_size\tseed\tdelta_hat_max\tdelta_hat_mean\tdelta_hat_median\n");
    let rows: Vec<Result<String, Error>> = install_pool(a.workers, || {
        let mut cells = Vec::new();
        for &mini in &mini_sizes {
            for &seed in &seeds {
                cells.push((mini, seed));
            }
        }
        cells
            .iter()
            .map(|&(mini, seed)| {
                let (train_ds, held) = match &file_data {
                    Some((t, h)) => (t.clone(), h.clone()),
                    None => synthetic_probe_data(a.synth_samples, seed, &templates)?,
                };
                let mut o = a.opts.clone();
                o.mini_size = mini;
                let cfg = o.config(seed * 31 + 7, &templates)?;
                let probe =
                    probe_stability(&train_ds, &held, &cfg, a.probe_points, a.removals, seed)?;
                Ok(format!(
                    "{}\t{}\t{:.9}\t{:.9}\t{:.9}\n",
                    mini,
                    seed,
                    probe.max(),
                    probe.mean(),
                    probe.median_of_means()
                ))
            })
            .collect()
    })?;
    for row in rows {
        out.push_str(&row?);
    }
    fs::write(&a.output, out)?;
    eprintln!("stability probe -> {}", a.output.display());
    Ok(())
}

fn read_kv_config(path: &Path) -> Result<HashMap<String, f64>, Error> {
    let text = fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value", i + 1)))?;
        let value: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("line {}: bad number `{}`", i + 1, v.trim())))?;
        map.insert(k.trim().to_string(), value);
    }
    Ok(map)
}

fn cmd_bounds(a: BoundsArgs) -> Result<(), Error> {
    let file = a
        .config
        .as_deref()
        .map(read_kv_config)
        .transpose()?
        .unwrap_or_default();
    let get = |flag: Option<f64>, key: &str, default: Option<f64>| -> Result<f64, Error> {
        flag.or_else(|| file.get(key).copied())
            .or(default)
            .ok_or_else(|| Error::config(format!("missing bound parameter `{}`", key)))
    };
    let p = TheoryParams {
        d: get(a.d, "d", None)?,
        tau: get(a.tau, "tau", None)?,
        rho: get(a.rho, "rho", None)?,
        v: get(a.v, "v", None)?,
        n: get(a.n, "n", None)?,
        m: get(a.m, "m", None)?,
        lambda: get(a.lambda, "lambda", None)?,
        alpha: get(a.alpha, "alpha", Some(1.0))?,
        gamma: get(a.gamma, "gamma", Some(1.0))?,
        delta: get(a.delta, "delta", Some(0.1))?,
    };
    let b = stability_bounds(&p)?;
    println!("stability bounds (alpha = {}):", p.alpha);
    println!("  delta_fn         {:.12}", b.delta_fn);
    println!("  delta_loss       {:.12}", b.delta_loss);
    println!("  delta_sample     {:.12}", b.delta_sample);
    println!("  delta_fn_bar     {:.12}", b.delta_fn_bar);
    println!("  delta_loss_bar   {:.12}", b.delta_loss_bar);
    println!("  delta_sample_bar {:.12}", b.delta_sample_bar);
    let risk = get(a.empirical_risk, "empirical_risk", Some(0.0))?;
    let g = generalization_bound(&p, risk)?;
    println!("generalization (empirical risk = {}, delta = {}):", risk, p.delta);
    println!("  overfit_term     {:.12}", g.overfit_term);
    println!("  risk_bound       {:.12}", g.bound);

    let sgd_flags = [a.c, a.q, a.kappa, a.epsilon, a.beta, a.a0];
    let any_sgd = sgd_flags.iter().any(Option::is_some)
        || ["c", "q", "kappa", "epsilon", "beta", "a0"]
            .iter()
            .any(|k| file.contains_key(*k));
    if any_sgd {
        let sp = SgdTheoryParams {
            c: get(a.c, "c", None)?,
            q: get(a.q, "q", None)?,
            kappa: get(a.kappa, "kappa", None)?,
            epsilon: get(a.epsilon, "epsilon", None)?,
            beta: get(a.beta, "beta", Some(1.0))?,
            a0: get(a.a0, "a0", None)?,
        };
        let s = sgd_iterations(&sp, p.n, p.alpha)?;
        println!("sgd convergence (n = {}, alpha = {}):", p.n, p.alpha);
        println!("  eta              {:.12}", s.eta);
        println!("  t_min            {:.12}", s.t_min);
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Error> {
    let spec = SynthSpec {
        num_labels: a.labels,
        vocab_size: a.vocab,
        mean_length: a.mean_length,
        num_samples: a.samples,
        transition_sharpness: a.transition_sharpness,
        emission_sharpness: a.emission_sharpness,
        noise_rate: a.noise,
        seed: a.seed,
    };
    let ds = generate_synthetic(&spec)?;
    let mut out = Vec::new();
    write_conll(&mut out, &ds, None)?;
    match &a.output {
        Some(p) => fs::write(p, out)?,
        None => std::io::stdout().write_all(&out)?,
    }
    Ok(())
}

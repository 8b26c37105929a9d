//! `odeformer` command-line driver.

pub mod config;
pub mod plot;

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use odeformer_core::dataset::{generate_dataset, read_records_file, write_manifest, write_records_file, Manifest};
use odeformer_core::evaluation::{
    accuracy_at_threshold, aggregate, evaluate_held_out, held_out_cases, read_results_csv, run_benchmark,
    write_results_csv, Task,
};
use odeformer_core::inference::RefineConfig;
use odeformer_core::odebench::load_corpus;
use odeformer_core::rng::seeded;
use odeformer_core::Trajectory;
use odeformer_model::{
    make_batches, Checkpoint, DecodeConfig, Model, ModelPredictor, TrainConfig, TrainExample, TrainLog, Trainer,
};
use serde::Serialize;
use thiserror::Error;

use crate::config::FileConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn rt<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "odeformer", version, about = "Symbolic regression of ODE systems from a single trajectory")]
pub struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Size of the worker thread pool.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// TOML file with [dataset], [model], [train], [decode], [refine] and
    /// [benchmark] sections; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample systems, integrate, filter and corrupt them into a JSONL dataset.
    Generate(GenerateArgs),
    /// Train (or resume training) a model on a dataset.
    Train(TrainArgs),
    /// Predict a system for one trajectory given as CSV (t, x0, x1, ...).
    Infer(InferArgs),
    /// Run the benchmark sweep over the ODE corpus.
    Evaluate(EvaluateArgs),
    /// Score a model on held-out synthetic records (reconstruction and
    /// generalization).
    Bench(BenchArgs),
    /// Render figures from an evaluation CSV.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Number of accepted records.
    #[arg(long)]
    pub count: usize,
    /// Output directory; receives records.jsonl and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Largest system dimension (default 6).
    #[arg(long)]
    pub dmax: Option<usize>,
    /// Largest number of binary operators per component (default 5).
    #[arg(long)]
    pub bmax: Option<usize>,
    /// Largest number of unary operators per component (default 3).
    #[arg(long)]
    pub umax: Option<usize>,
    /// Smallest grid size (default 50).
    #[arg(long)]
    pub grid_min: Option<usize>,
    /// Largest grid size (default 200).
    #[arg(long)]
    pub grid_max: Option<usize>,
    /// Upper end of the sampled noise level (default 0.1).
    #[arg(long)]
    pub noise_max: Option<f64>,
    /// Upper end of the sampled subsampling ratio (default 0.5).
    #[arg(long)]
    pub subsample_max: Option<f64>,
    /// Integration wall-clock budget per attempt in milliseconds (default 1000).
    #[arg(long)]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// records.jsonl, or a directory containing it.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Optimizer steps to run in this invocation.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Continue from this checkpoint (step counter and optimizer state).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// TOML file holding only model settings (d_emb, n_heads, ...).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Peak learning rate (default 2e-4).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Warmup steps (default 100).
    #[arg(long)]
    pub warmup: Option<usize>,
    /// First cosine cycle length (default 3000).
    #[arg(long)]
    pub cycle: Option<usize>,
    /// Target-token budget per batch (default 1000).
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    /// Cap on examples per batch.
    #[arg(long)]
    pub max_batch: Option<usize>,
    /// Loss CSV (step,lr,loss); defaults to the checkpoint path with .csv.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Stop after this many seconds.
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Stop once teacher-forced token accuracy on the training set reaches
    /// this value (checked every --eval-every steps).
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub eval_every: usize,
}

#[derive(Debug, Args, Clone)]
pub struct DecodeArgs {
    /// Beam size (default 50); 1 decodes greedily.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Sampling temperature (default 0.1).
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Refine constants of the selected candidate with BFGS.
    #[arg(long)]
    pub opt: bool,
    /// Feed the raw trajectory instead of rescaling time to [1, 10] and
    /// states by their first value.
    #[arg(long)]
    pub no_rescale: bool,
    /// Longest generated sequence.
    #[arg(long)]
    pub max_length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with columns t, x0, x1, ...; a header row is optional.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Benchmark corpus; only the built-in ODE collection is available.
    #[arg(long, default_value = "odebench", value_parser = ["odebench"])]
    pub corpus: String,
    /// Comma-separated noise levels (default 0,0.01,...,0.05).
    #[arg(long, value_delimiter = ',')]
    pub noise: Option<Vec<f64>>,
    /// Comma-separated subsampling ratios (default 0,0.5).
    #[arg(long, value_delimiter = ',')]
    pub subsample: Option<Vec<f64>>,
    /// Comma-separated entry ids (default all).
    #[arg(long, value_delimiter = ',')]
    pub entries: Option<Vec<u32>>,
    /// Comma-separated tasks: reconstruction, generalization.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<Task>>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Result CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Held-out records.jsonl (or a directory containing it).
    #[arg(long)]
    pub data: PathBuf,
    /// Use at most this many records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Optional per-record JSONL output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

struct Context {
    seed: u64,
    file_given: bool,
    workers: usize,
    file: FileConfig,
}

fn records_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("records.jsonl")
    } else {
        p.to_path_buf()
    }
}

/// Writes `<path>.json` describing how an output was produced.
fn write_sidecar<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    let p = PathBuf::from(p);
    let f = File::create(&p).map_err(|e| CliError::io(&p, e))?;
    serde_json::to_writer_pretty(f, value).map_err(rt("writing manifest"))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Context {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        file_given: cli.config.is_some(),
        workers: cli.workers.or(file.workers).unwrap_or(1).max(1),
        file,
    };
    // A second initialization (e.g. in tests) keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(ctx.workers).build_global();
    match cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Infer(a) => cmd_infer(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn cmd_generate(ctx: &Context, a: GenerateArgs) -> Result<(), CliError> {
    let mut cfg = ctx.file.dataset.clone();
    let g = &mut cfg.generator;
    g.d_max = a.dmax.unwrap_or(g.d_max);
    g.b_max = a.bmax.unwrap_or(g.b_max);
    g.u_max = a.umax.unwrap_or(g.u_max);
    let i = &mut cfg.integration;
    i.grid_min = a.grid_min.unwrap_or(i.grid_min);
    i.grid_max = a.grid_max.unwrap_or(i.grid_max);
    if let Some(ms) = a.timeout_ms {
        i.wall_timeout = Duration::from_millis(ms);
    }
    if i.grid_min < 2 || i.grid_min > i.grid_max {
        return Err(CliError::Usage(format!(
            "need 2 <= grid-min <= grid-max, got {} and {}",
            i.grid_min, i.grid_max
        )));
    }
    let c = &mut cfg.corruption;
    c.noise_max = a.noise_max.unwrap_or(c.noise_max);
    c.subsample_max = a.subsample_max.unwrap_or(c.subsample_max);
    if !(0.0..1.0).contains(&c.subsample_max) || c.noise_max < 0.0 {
        return Err(CliError::Usage("noise-max must be >= 0 and subsample-max in [0, 1)".into()));
    }
    cfg.generator.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let (records, stats) = generate_dataset(a.count, &cfg, ctx.seed, ctx.workers).map_err(rt("generation"))?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    write_records_file(&records, &a.out.join("records.jsonl")).map_err(rt("writing records"))?;
    let manifest = Manifest::new(&cfg, ctx.seed, ctx.workers, a.count, &stats);
    write_manifest(&manifest, &a.out.join("manifest.json")).map_err(rt("writing manifest"))?;
    println!(
        "wrote {} records to {} (acceptance rate {:.3})",
        records.len(),
        a.out.display(),
        stats.acceptance_rate()
    );
    Ok(())
}

fn cmd_train(ctx: &Context, a: TrainArgs) -> Result<(), CliError> {
    let resumed = match &a.resume {
        Some(p) => Some(Checkpoint::load(p).map_err(rt("loading checkpoint"))?),
        None => None,
    };
    // a resumed run keeps its saved schedule unless a config file is given
    let mut tc = match resumed.as_ref().and_then(|ck| ck.train.clone()) {
        Some(saved) if !ctx.file_given => saved,
        _ => TrainConfig {
            seed: ctx.seed,
            ..ctx.file.train.clone()
        },
    };
    tc.lr_peak = a.lr.unwrap_or(tc.lr_peak);
    tc.warmup_steps = a.warmup.unwrap_or(tc.warmup_steps);
    tc.cycle_steps = a.cycle.unwrap_or(tc.cycle_steps);
    tc.tokens_per_batch = a.batch_tokens.unwrap_or(tc.tokens_per_batch);
    tc.max_batch_examples = a.max_batch.unwrap_or(tc.max_batch_examples);
    if !(tc.lr_floor < tc.lr_peak) {
        return Err(CliError::Usage(format!(
            "lr_floor ({}) must be below the peak ({})",
            tc.lr_floor, tc.lr_peak
        )));
    }
    if tc.tokens_per_batch == 0 || tc.max_batch_examples == 0 {
        return Err(CliError::Usage("batch sizes must be positive".into()));
    }
    let mut trainer = match resumed {
        Some(ck) => Trainer::from_checkpoint(ck, tc.clone()),
        None => {
            let mut mc = ctx.file.model.clone();
            if let Some(p) = &a.model_config {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                mc = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            }
            mc.seed = ctx.seed;
            mc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Trainer::new(Model::new(mc).map_err(rt("model"))?, tc.clone())
        }
    };
    trainer.cfg.total_steps = trainer.step as usize + a.steps;
    trainer.grad_shards = ctx.workers;

    let records = read_records_file(&records_path(&a.data)).map_err(rt("reading dataset"))?;
    let d_max = trainer.model.cfg.d_max;
    let max_len = trainer.model.cfg.max_target_length;
    let mut examples = Vec::with_capacity(records.len());
    for r in &records {
        match TrainExample::from_record(r, d_max) {
            Ok(e) if e.target.len() <= max_len => examples.push(e),
            Ok(_) => log::warn!("record {}: target longer than {max_len} tokens, skipped", r.index),
            Err(e) => log::warn!("{e}"),
        }
    }
    if examples.is_empty() && a.steps > 0 {
        return Err(CliError::Runtime("no usable training records".into()));
    }

    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let append = a.resume.is_some() && log_path.exists();
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut log = TrainLog::new(log_file, !append).map_err(|e| CliError::io(&log_path, e))?;

    // batch order of a resumed run continues from a fresh stream
    let mut rng = odeformer_core::rng::stream(tc.seed, trainer.step);
    let start = Instant::now();
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for i in 0..a.steps {
        if a.time_limit.is_some_and(|t| start.elapsed().as_secs_f64() > t) {
            println!("time limit reached after {i} steps");
            break;
        }
        if batches.is_empty() {
            batches = make_batches(&examples, tc.tokens_per_batch, tc.max_batch_examples, &mut rng);
        }
        let batch: Vec<&TrainExample> = batches.pop().expect("non-empty").iter().map(|&j| &examples[j]).collect();
        let r = trainer.train_step(&batch).map_err(rt("training"))?;
        log.record(&r).map_err(|e| CliError::io(&log_path, e))?;
        if let Some(target) = a.target_accuracy {
            if a.eval_every > 0 && r.step % a.eval_every as u64 == 0 {
                let s = trainer.evaluate(&examples).map_err(rt("evaluation"))?;
                log::info!("step {} loss {:.4} accuracy {:.4}", r.step, s.mean_loss(), s.accuracy());
                if s.accuracy() >= target {
                    println!("target accuracy reached at step {}", r.step);
                    break;
                }
            }
        }
    }
    trainer.checkpoint().save(&a.out).map_err(rt("saving checkpoint"))?;
    println!("saved {} at step {}", a.out.display(), trainer.step);
    Ok(())
}

fn predictor(ctx: &Context, model: &Path, d: &DecodeArgs) -> Result<ModelPredictor, CliError> {
    let ck = Checkpoint::load(model).map_err(rt("loading checkpoint"))?;
    let mut dc: DecodeConfig = ctx.file.decode.clone();
    dc.beam_size = d.beam.unwrap_or(dc.beam_size);
    dc.temperature = d.temperature.unwrap_or(dc.temperature);
    dc.max_length = d.max_length.or(dc.max_length);
    if dc.beam_size == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    if !(dc.temperature > 0.0) {
        return Err(CliError::Usage("--temperature must be positive".into()));
    }
    let mut p = ModelPredictor::new(ck.model, dc);
    p.rescale = !d.no_rescale;
    p.refine = d.opt.then(|| ctx.file.refine);
    Ok(p)
}

fn read_trajectory_csv(path: &Path) -> Result<Trajectory, CliError> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(rt("reading trajectory"))?;
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(rt("reading trajectory"))?;
        let vals: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match vals {
            Ok(v) if v.len() >= 2 => {
                times.push(v[0]);
                rows.push(v[1..].to_vec());
            }
            Ok(_) => return Err(CliError::Runtime(format!("line {}: need t and at least one state", i + 1))),
            // header row
            Err(_) if i == 0 => continue,
            Err(e) => return Err(CliError::Runtime(format!("line {}: {e}", i + 1))),
        }
    }
    Trajectory::from_rows(times, &rows).map_err(rt("trajectory"))
}

fn cmd_infer(ctx: &Context, a: InferArgs) -> Result<(), CliError> {
    let p = predictor(ctx, &a.model, &a.decode)?;
    let traj = read_trajectory_csv(&a.input)?;
    let mut rng = seeded(ctx.seed);
    match p.predict_detailed(&traj, &mut rng) {
        Some(pred) => {
            println!("{}", pred.system.to_infix());
            log::info!("{} candidates, selection R² {:.6}", pred.candidates, pred.selection_score);
            Ok(())
        }
        None => Err(CliError::Runtime("no valid prediction".into())),
    }
}

#[derive(Serialize)]
struct RunManifest<'a, T: Serialize> {
    seed: u64,
    workers: usize,
    model: String,
    decode: &'a DecodeConfig,
    rescale: bool,
    refine: Option<RefineConfig>,
    settings: T,
}

fn cmd_evaluate(ctx: &Context, a: EvaluateArgs) -> Result<(), CliError> {
    let p = predictor(ctx, &a.model, &a.decode)?;
    let mut bc = ctx.file.benchmark.clone();
    bc.seed = ctx.seed;
    if let Some(n) = a.noise {
        bc.noise_levels = n;
    }
    if let Some(s) = a.subsample {
        bc.subsample_levels = s;
    }
    if let Some(t) = a.tasks {
        bc.tasks = t;
    }
    if bc.noise_levels.iter().any(|&n| n < 0.0) || bc.subsample_levels.iter().any(|&r| !(0.0..1.0).contains(&r)) {
        return Err(CliError::Usage("noise must be >= 0 and subsample in [0, 1)".into()));
    }
    let mut corpus = load_corpus().map_err(rt("loading corpus"))?;
    if let Some(ids) = &a.entries {
        corpus.retain(|e| ids.contains(&e.id));
        if corpus.is_empty() {
            return Err(CliError::Usage("no corpus entries match --entries".into()));
        }
    }
    let rows = run_benchmark(&p, &corpus, &bc);
    let f = File::create(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    write_results_csv(&rows, f).map_err(rt("writing results"))?;
    write_sidecar(
        &a.out,
        &RunManifest {
            seed: ctx.seed,
            workers: ctx.workers,
            model: a.model.display().to_string(),
            decode: &p.decode,
            rescale: p.rescale,
            refine: p.refine,
            settings: &bc,
        },
    )?;
    for ag in aggregate(&rows, bc.threshold) {
        println!(
            "{:<15} noise {:<5} subsample {:<4} accuracy {:.3} (n={}, invalid={})",
            ag.task.name(),
            ag.noise,
            ag.subsample,
            ag.accuracy,
            ag.count,
            ag.invalid
        );
    }
    Ok(())
}

fn cmd_bench(ctx: &Context, a: BenchArgs) -> Result<(), CliError> {
    let p = predictor(ctx, &a.model, &a.decode)?;
    let mut records = read_records_file(&records_path(&a.data)).map_err(rt("reading dataset"))?;
    if let Some(n) = a.limit {
        records.truncate(n);
    }
    let integration = ctx.file.dataset.integration.clone();
    let cases = held_out_cases(&records, &integration, ctx.seed);
    let scores = evaluate_held_out(&p, &cases, ctx.seed, ctx.file.benchmark.n_dense);
    let thr = ctx.file.benchmark.threshold;
    let rec = accuracy_at_threshold(scores.iter().map(|s| s.reconstruction), thr);
    let gen = accuracy_at_threshold(scores.iter().map(|s| s.generalization), thr);
    println!("cases {}", scores.len());
    println!("reconstruction accuracy {rec:.3}");
    println!("generalization accuracy {gen:.3}");
    if let Some(out) = &a.out {
        let mut f = File::create(out).map_err(|e| CliError::io(out, e))?;
        for s in &scores {
            serde_json::to_writer(&mut f, s).map_err(rt("writing scores"))?;
            std::io::Write::write_all(&mut f, b"\n").map_err(|e| CliError::io(out, e))?;
        }
        write_sidecar(
            out,
            &RunManifest {
                seed: ctx.seed,
                workers: ctx.workers,
                model: a.model.display().to_string(),
                decode: &p.decode,
                rescale: p.rescale,
                refine: p.refine,
                settings: &integration,
            },
        )?;
    }
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<(), CliError> {
    let f = File::open(&a.results).map_err(|e| CliError::io(&a.results, e))?;
    let rows = read_results_csv(f).map_err(rt("reading results"))?;
    let written = plot::write_figures(&rows, &a.out_dir)?;
    if written.is_empty() {
        eprintln!("warning: no result rows in {}; no figures written", a.results.display());
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

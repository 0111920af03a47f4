use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latpfn::autodiff::Tensor;
use latpfn::container::{batches_to_container, container_to_batches, write_atomic, Container};
use latpfn::data::{
    curate_context, load_csv_dataset, normalize_time_axis, window_features, window_series, znorm_2std, ContextBatch,
    ContextSpec, FEATURES,
};
use latpfn::eval::{
    ablate_context_size, ablation_csv, baseline_report, evaluate, forecast_all, nearest_patches, patch_segment,
    pca_project, PatchIndex,
};
use latpfn::model::ModelConfig;
use latpfn::prior::{generate_context_batch, BatchShape, HyperPrior};
use latpfn::rng::stream_rng;
use latpfn::trainer::{validation_set, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

const CONFIG_DIR_VAR: &str = "LATPFN_CONFIG_DIR";
const DEFAULT_CONFIG: &str = "latpfn.json";

#[derive(Parser, Debug)]
#[command(name = "latpfn", version, about = "Latent in-context time-series forecasting")]
#[command(arg_required_else_help = true)]
#[command(
    after_help = "Any configuration field can be overridden with --<section>.<field> <value>, \
for example --prior.kappa_rho 53.6 or --train.base_lr 1e-3. Sections: model, train, prior, eval."
)]
struct Cli {
    /// JSON configuration file (sections: model, train, prior, eval).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Emit progress and errors as JSON lines on stderr.
    #[arg(long, global = true)]
    json_logs: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Draw synthetic contexts from the prior.
    Synth(SynthArgs),
    /// Train a model on synthetic prior draws.
    Train(TrainArgs),
    /// Forecast held-out series of the given contexts.
    Forecast(DataArgs),
    /// Score forecasts and naive baselines.
    Eval(DataArgs),
    /// Fixed-length summary embeddings and their PCA projection.
    Embed(DataArgs),
    /// Forecast error as a function of context size.
    Ablate(AblateArgs),
    /// Segment per-step embeddings into patches and search similar patches.
    Patches(PatchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Number of contexts to draw.
    #[arg(long, default_value_t = 16)]
    contexts: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint until the configured epoch count.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Source {
    /// Batches written by `synth`.
    #[arg(long, conflicts_with_all = ["csv", "spec"])]
    input: Option<PathBuf>,
    /// CSV dataset, used with --spec (curated context) or --seq-len (plain windows).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Context curation file (JSON) for --csv.
    #[arg(long, requires = "csv")]
    spec: Option<PathBuf>,
    /// Window length for --csv without --spec.
    #[arg(long, requires = "csv")]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Timestamp column for --csv without --spec.
    #[arg(long, default_value = "date")]
    timestamp_column: String,
    /// Synthetic validation contexts when no input is given.
    #[arg(long, default_value_t = 16)]
    contexts: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: Source,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Context sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 12])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 32)]
    contexts: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PatchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: Source,
    /// Boundary threshold as a multiple of the median step distance.
    #[arg(long, default_value_t = 2.0)]
    threshold: f64,
    /// Patch to query, by position in the index.
    #[arg(long, default_value_t = 0)]
    query: usize,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    /// Contexts per forward pass.
    chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { chunk: 8 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    prior: HyperPrior,
    eval: EvalConfig,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

struct Log {
    quiet: bool,
    json: bool,
}

impl Log {
    fn info(&self, msg: &str, fields: Value) {
        if self.quiet {
            return;
        }
        if self.json {
            let mut v = json!({"level": "info", "message": msg});
            if let (Value::Object(m), Value::Object(f)) = (&mut v, fields) {
                m.extend(f);
            }
            eprintln!("{v}");
        } else if fields.is_null() {
            eprintln!("{msg}");
        } else {
            eprintln!("{msg} {fields}");
        }
    }

    fn error(&self, err: &anyhow::Error) {
        if self.json {
            let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
            eprintln!(
                "{}",
                json!({"level": "error", "message": err.to_string(), "causes": chain})
            );
        } else {
            eprintln!("error: {err:#}");
        }
    }
}

/// Splits `--section.key value` / `--section.key=value` pairs off the
/// argument list.
fn extract_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        let key = s.strip_prefix("--").filter(|k| {
            k.split('=')
                .next()
                .is_some_and(|k| k.contains('.') && !k.starts_with('.'))
        });
        match key {
            Some(k) => {
                let (k, v) = match k.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = it.next().ok_or_else(|| usage(format!("--{k} needs a value")))?;
                        (k.to_string(), v.to_string_lossy().into_owned())
                    }
                };
                overrides.push((k, v));
            }
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("unknown configuration key '{key}'")))?;
        let child = obj
            .get_mut(*part)
            .ok_or_else(|| usage(format!("unknown configuration key '{key}'")))?;
        if i + 1 == parts.len() {
            *child = parse_value(raw);
            return Ok(());
        }
        node = child;
    }
    Ok(())
}

/// Deep-merges `top` into `base`; keys absent from `base` are kept so that
/// deserialization rejects them.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Built-in defaults, then `$LATPFN_CONFIG_DIR/latpfn.json`, then `--config`,
/// then dotted overrides.
fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    let dir = std::env::var_os(CONFIG_DIR_VAR).map(PathBuf::from);
    if let Some(d) = &dir {
        let p = d.join(DEFAULT_CONFIG);
        if p.is_file() {
            merge(&mut v, read_json(&p)?);
        }
    }
    if let Some(f) = file {
        let path = match &dir {
            Some(d) if !f.exists() && f.is_relative() => d.join(f),
            _ => f.to_path_buf(),
        };
        if !path.exists() {
            bail!("config file {} not found", path.display());
        }
        merge(&mut v, read_json(&path)?);
    }
    for (k, raw) in overrides {
        apply_override(&mut v, k, raw)?;
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| usage(format!("invalid configuration: {e}")))?;
    cfg.model.validate().map_err(|e| usage(e.to_string()))?;
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    cfg.prior.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_atomic(path, s.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    write_atomic(path, s.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Trainer> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Trainer::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Plain normalized windows of every CSV column, wrapped as one-series
/// batches with a single self-context.
fn csv_windows(path: &Path, ts_col: &str, seq_len: usize, stride: usize) -> Result<Vec<(String, usize, Vec<f64>)>> {
    let load = load_csv_dataset(path, ts_col).with_context(|| format!("loading {}", path.display()))?;
    let mut out = Vec::new();
    for s in &load.series {
        for (i, w) in window_series(&s.values, seq_len, stride).into_iter().enumerate() {
            out.push((s.name.clone(), i * stride, w.to_vec()));
        }
    }
    if out.is_empty() {
        bail!("{} yields no windows of length {seq_len}", path.display());
    }
    Ok(out)
}

fn load_batches(src: &Source, cfg: &RunConfig, tr: &Trainer) -> Result<Vec<ContextBatch>> {
    if let Some(p) = &src.input {
        let c = Container::read(p).with_context(|| format!("reading batches {}", p.display()))?;
        return Ok(container_to_batches(&c)?);
    }
    if let (Some(csv), Some(spec)) = (&src.csv, &src.spec) {
        let spec: ContextSpec =
            serde_json::from_value(read_json(spec)?).map_err(|e| usage(format!("invalid curation spec: {e}")))?;
        let load =
            load_csv_dataset(csv, &spec.timestamp_column).with_context(|| format!("loading {}", csv.display()))?;
        let series: Vec<_> = load
            .series
            .iter()
            .map(|s| latpfn::data::aggregate(s, spec.aggregation))
            .collect();
        return Ok(vec![curate_context(&spec, &series)?]);
    }
    if src.csv.is_some() {
        bail!(usage("--csv needs --spec for forecasting contexts"));
    }
    let seed = src.seed.unwrap_or(cfg.train.seed);
    Ok(validation_set(
        &tr.prior,
        tr.config.shape,
        src.contexts,
        seed,
        tr.model.config.si_targets,
    )?)
}

/// Windows to embed, as `(label, [S, 3] features)`.
fn embed_windows(src: &Source, cfg: &RunConfig, tr: &Trainer) -> Result<Vec<(String, Tensor<f32>)>> {
    if let (Some(csv), None) = (&src.csv, &src.spec) {
        let seq_len = src
            .seq_len
            .ok_or_else(|| usage("--csv without --spec needs --seq-len"))?;
        let axis = normalize_time_axis(seq_len, 1)?;
        return csv_windows(csv, &src.timestamp_column, seq_len, src.stride)?
            .into_iter()
            .map(|(name, start, w)| {
                let (v, _) = znorm_2std(&w, seq_len)?;
                let f = Tensor::new(&[seq_len, FEATURES], window_features(&v, &axis, seq_len))?;
                Ok((format!("{name}@{start}"), f))
            })
            .collect();
    }
    let batches = load_batches(src, cfg, tr)?;
    let mut out = Vec::new();
    for (b, batch) in batches.iter().enumerate() {
        let s = batch.s();
        for i in 0..batch.n() {
            let data = batch.context.data()[i * s * FEATURES..(i + 1) * s * FEATURES].to_vec();
            out.push((format!("context{b}/{i}"), Tensor::new(&[s, FEATURES], data)?));
        }
    }
    Ok(out)
}

fn synth(a: &SynthArgs, cfg: &mut RunConfig, log: &Log) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    prepare_out(&a.out)?;
    let seed = cfg.train.seed;
    let mut batches = Vec::with_capacity(a.contexts);
    let mut flagged = 0usize;
    for i in 0..a.contexts as u64 {
        let mut rng = stream_rng(seed, i);
        let d = generate_context_batch(&cfg.prior, cfg.train.shape, cfg.model.si_targets, &mut rng)?;
        flagged += d.flagged.iter().filter(|&&f| f).count();
        batches.push(d.batch);
    }
    let meta = json!({"kind": "batches", "seed": seed, "shape": cfg.train.shape, "flagged_series": flagged});
    batches_to_container(&batches, meta)?.write(&a.out.join("batches.bin"))?;
    write_json(&a.out.join("resolved_config.json"), cfg)?;
    log.info(
        "synthesized",
        json!({"contexts": a.contexts, "flagged_series": flagged}),
    );
    Ok(())
}

fn train(a: &TrainArgs, cfg: &mut RunConfig, log: &Log) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    prepare_out(&a.out)?;
    let mut tr = match &a.resume {
        Some(p) => {
            let mut t = load_checkpoint(p)?;
            t.config.epochs = cfg.train.epochs;
            *cfg = RunConfig {
                model: t.model.config.clone(),
                train: t.config.clone(),
                prior: t.prior.clone(),
                eval: cfg.eval.clone(),
            };
            t
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.prior.clone())?,
    };
    write_json(&a.out.join("resolved_config.json"), cfg)?;
    log.info(
        "training",
        json!({"params": tr.model.params.count(), "start_epoch": tr.epoch(), "epochs": cfg.train.epochs}),
    );
    let mut history = String::new();
    let ckpt = a.out.join("checkpoint.bin");
    while tr.epoch() < cfg.train.epochs {
        let r = tr.train_epoch(|_| {})?;
        let line = serde_json::to_string(&r)?;
        log.info("epoch", serde_json::to_value(&r)?);
        history.push_str(&line);
        history.push('\n');
        tr.save_checkpoint(&ckpt)?;
        write_text(&a.out.join("train_log.jsonl"), &history)?;
    }
    if !ckpt.exists() {
        tr.save_checkpoint(&ckpt)?;
    }
    Ok(())
}

fn with_checkpoint(path: &Path, cfg: &mut RunConfig) -> Result<Trainer> {
    let tr = load_checkpoint(path)?;
    cfg.model = tr.model.config.clone();
    cfg.prior = tr.prior.clone();
    Ok(tr)
}

fn forecast_cmd(a: &DataArgs, cfg: &mut RunConfig, log: &Log) -> Result<()> {
    let tr = with_checkpoint(&a.checkpoint, cfg)?;
    let batches = load_batches(&a.source, cfg, &tr)?;
    prepare_out(&a.out)?;
    let results = forecast_all(&tr.model, &batches, cfg.eval.chunk)?;
    let mut csv = String::from("context,series,step,point,var,denorm,target\n");
    for (b, r) in results.iter().enumerate() {
        for (j, s) in r.series.iter().enumerate() {
            for k in 0..s.point.len() {
                csv.push_str(&format!(
                    "{b},{j},{k},{},{},{},{}\n",
                    s.point[k], s.var[k], s.denorm[k], s.target[k]
                ));
            }
        }
    }
    write_text(&a.out.join("forecast.csv"), &csv)?;
    write_json(&a.out.join("resolved_config.json"), cfg)?;
    log.info("forecast", json!({"contexts": results.len()}));
    Ok(())
}

fn eval_cmd(a: &DataArgs, cfg: &mut RunConfig, log: &Log) -> Result<()> {
    let tr = with_checkpoint(&a.checkpoint, cfg)?;
    let batches = load_batches(&a.source, cfg, &tr)?;
    prepare_out(&a.out)?;
    let model = evaluate(&tr.model, &batches, cfg.eval.chunk)?;
    let baselines = baseline_report(&batches)?;
    let report = json!({"model": model, "baselines": baselines, "contexts": batches.len()});
    let mut csv = String::from("metric,mean,std\n");
    for (name, s) in [
        ("mse", &model.mse),
        ("crrmse", &model.crrmse),
        ("accuracy", &model.accuracy),
    ] {
        csv.push_str(&format!("{name},{},{}\n", s.mean, s.std));
    }
    write_json(&a.out.join("metrics.json"), &report)?;
    write_text(&a.out.join("metrics.csv"), &csv)?;
    write_json(&a.out.join("resolved_config.json"), cfg)?;
    log.info(
        "evaluated",
        json!({"mse": model.mse.mean, "best_baseline_mse": baselines.best()}),
    );
    Ok(())
}

fn embed_cmd(a: &DataArgs, cfg: &mut RunConfig, log: &Log) -> Result<()> {
    let tr = with_checkpoint(&a.checkpoint, cfg)?;
    let windows = embed_windows(&a.source, cfg, &tr)?;
    prepare_out(&a.out)?;
    let vecs = windows
        .iter()
        .map(|(_, f)| Ok(tr.model.summary_embed(f)?))
        .collect::<Result<Vec<_>>>()?;
    let d = tr.model.width();
    let flat: Vec<f32> = vecs.iter().flatten().copied().collect();
    let labels: Vec<&str> = windows.iter().map(|(l, _)| l.as_str()).collect();
    let mut c = Container::new(json!({"kind": "embeddings", "labels": labels}));
    c.push("embeddings", Tensor::new(&[vecs.len(), d], flat)?);
    c.write(&a.out.join("embeddings.bin"))?;
    let as64: Vec<Vec<f64>> = vecs.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
    let mut csv = String::from("label,pc1,pc2\n");
    if as64.len() >= 2 {
        let p = pca_project(&as64, 2)?;
        for ((l, _), c) in windows.iter().zip(&p.coords) {
            csv.push_str(&format!("{l},{},{}\n", c[0], c[1]));
        }
    }
    write_text(&a.out.join("pca.csv"), &csv)?;
    write_json(&a.out.join("resolved_config.json"), cfg)?;
    log.info("embedded", json!({"windows": vecs.len(), "width": d}));
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, cfg: &mut RunConfig, log: &Log) -> Result<()> {
    let tr = with_checkpoint(&a.checkpoint, cfg)?;
    let pool = a.sizes.iter().copied().max().ok_or_else(|| usage("--sizes is empty"))?;
    if a.sizes.contains(&0) || a.trials == 0 {
        bail!(usage("sizes and trials must be >= 1"));
    }
    let shape = BatchShape {
        n: pool,
        ..tr.config.shape
    };
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let batches = validation_set(&tr.prior, shape, a.contexts, seed, tr.model.config.si_targets)?;
    prepare_out(&a.out)?;
    let curve = ablate_context_size(&tr.model, &batches, &a.sizes, a.trials, seed, cfg.eval.chunk)?;
    write_text(&a.out.join("ablation.csv"), &ablation_csv(&curve))?;
    write_json(&a.out.join("resolved_config.json"), cfg)?;
    log.info("ablation", serde_json::to_value(&curve)?);
    Ok(())
}

fn patches_cmd(a: &PatchArgs, cfg: &mut RunConfig, log: &Log) -> Result<()> {
    let tr = with_checkpoint(&a.checkpoint, cfg)?;
    let windows = embed_windows(&a.source, cfg, &tr)?;
    prepare_out(&a.out)?;
    let mut index = PatchIndex::default();
    for (w, (_, f)) in windows.iter().enumerate() {
        let e = tr.model.step_embeddings(f)?;
        let d = e.shape()[1];
        let rows: Vec<Vec<f32>> = e.data().chunks(d).map(|r| r.to_vec()).collect();
        patch_segment(&mut index, w, &rows, a.threshold)?;
    }
    let matches = if index.patches.len() > a.query {
        nearest_patches(&index, a.query, a.top_k)?
    } else {
        bail!("query patch {} out of range ({} patches)", a.query, index.patches.len());
    };
    let labels: Vec<&str> = windows.iter().map(|(l, _)| l.as_str()).collect();
    let bounds: Vec<_> = index
        .patches
        .iter()
        .map(|p| json!({"window": p.window, "start": p.start, "end": p.end}))
        .collect();
    write_json(
        &a.out.join("patches.json"),
        &json!({"windows": labels, "patches": bounds, "query": a.query, "matches": matches}),
    )?;
    write_json(&a.out.join("resolved_config.json"), cfg)?;
    log.info(
        "patches",
        json!({"windows": windows.len(), "patches": index.patches.len()}),
    );
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)], log: &Log) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    let mut cfg = resolve_config(cli.config.as_deref(), overrides)?;
    log.info("config", serde_json::to_value(&cfg)?);
    match &cli.cmd {
        Cmd::Synth(a) => synth(a, &mut cfg, log),
        Cmd::Train(a) => train(a, &mut cfg, log),
        Cmd::Forecast(a) => forecast_cmd(a, &mut cfg, log),
        Cmd::Eval(a) => eval_cmd(a, &mut cfg, log),
        Cmd::Embed(a) => embed_cmd(a, &mut cfg, log),
        Cmd::Ablate(a) => ablate_cmd(a, &mut cfg, log),
        Cmd::Patches(a) => patches_cmd(a, &mut cfg, log),
    }
}

fn main() -> ExitCode {
    let raw: Vec<OsString> = std::env::args_os().collect();
    let json_logs = raw.iter().any(|a| a == "--json-logs");
    let log = Log {
        quiet: raw.iter().any(|a| a == "--quiet"),
        json: json_logs,
    };
    let (args, overrides) = match extract_overrides(raw) {
        Ok(x) => x,
        Err(e) => {
            log.error(&e);
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli, &overrides, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log.error(&e);
            if e.chain().any(|c| c.is::<Usage>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adatok_cli::*;
use adatok_core::code_tree::{
    check_theorem3_bound, depth_profile, expected_length, huffman, search_optimal_tree,
    theorem2_gap, tree_loss,
};
use adatok_core::codec::{bpp16, deserialize, mse, psnr_from_mse};
use adatok_core::model::{
    grad_check_with, read_checkpoint, write_checkpoint, AdaptiveTokenizer, Checkpoint,
    GradCheckOptions,
};
use adatok_core::router::beta_from_bpp16;
use adatok_core::source::{entropy, read_jsonl, sample_dataset, write_jsonl, DEFAULT_NOISE_SIGMA};
use adatok_core::trainer::{self, RouterMode, TrainConfig, TrainQuant, NOMINAL_BITS};
use adatok_core::{Error, Model, Objective, SearchMode, ToySignal};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "adatok",
    version,
    about = "Adaptive tokenization experiments: code-tree theory and a toy tokenizer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Entropy of a distribution.
    Entropy(EntropyArgs),
    /// Huffman code tree.
    Huffman(HuffmanArgs),
    /// Binary tree minimizing the uniform-router loss or the expected length.
    TreeSearch(TreeSearchArgs),
    /// Uniform-router gap table over geometric sources.
    Theorem2(Theorem2Args),
    /// Both sides of the ELBO-router bound.
    Theorem3(Theorem3Args),
    /// Synthetic signals as JSON lines.
    Sample(SampleArgs),
    /// Train the toy tokenizer.
    Train(Box<TrainArgs>),
    /// Rate and distortion of a checkpoint under one router.
    Eval(EvalArgs),
    /// Signals to `.itk` token streams.
    Tokenize(TokenizeArgs),
    /// `.itk` token streams back to signals.
    Detokenize(DetokenizeArgs),
    /// Rates of existing stream files.
    Bpp(BppArgs),
    /// Finite-difference check of the analytic gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Serialize)]
struct EntropyArgs {
    /// Comma-separated probabilities or `geometric:M`.
    #[arg(long)]
    probs: String,
    #[arg(long, default_value_t = 2)]
    base: usize,
}

#[derive(Args, Serialize)]
struct HuffmanArgs {
    #[arg(long)]
    probs: String,
    #[arg(long, default_value_t = 2)]
    arity: usize,
    /// CSV of per-item code lengths.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ObjectiveArg {
    UniformLoss,
    ExpectedLength,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    Exhaustive,
    Lift,
}

#[derive(Args, Serialize)]
struct TreeSearchArgs {
    #[arg(long)]
    probs: String,
    #[arg(long, value_enum, default_value = "uniform-loss")]
    objective: ObjectiveArg,
    #[arg(long, value_enum, default_value = "exhaustive")]
    mode: ModeArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct Theorem2Args {
    #[arg(long, default_value_t = 3)]
    max_m: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct Theorem3Args {
    #[arg(long)]
    probs: String,
    /// Token budget, or `auto` for the smallest admissible value.
    #[arg(long, default_value = "auto")]
    beta: String,
    #[arg(long, default_value_t = 2)]
    base: usize,
    /// Per-item ELBO gaps; zero when omitted.
    #[arg(long)]
    gaps: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SampleArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw from the held-out seed range instead.
    #[arg(long)]
    held_out: bool,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    noise_sigma: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RouterModeArg {
    FixedBeta,
    Flex,
    UniformBaseline,
    FullLength,
}

impl From<RouterModeArg> for RouterMode {
    fn from(m: RouterModeArg) -> Self {
        match m {
            RouterModeArg::FixedBeta => RouterMode::FixedBeta,
            RouterModeArg::Flex => RouterMode::Flex,
            RouterModeArg::UniformBaseline => RouterMode::UniformBaseline,
            RouterModeArg::FullLength => RouterMode::FullLength,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum QuantArg {
    Ste,
    Dither,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Training signals as JSON lines, cycled; synthetic when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long, value_enum)]
    router_mode: Option<RouterModeArg>,
    #[arg(long, value_enum)]
    train_quant: Option<QuantArg>,
    #[arg(long, conflicts_with = "bpp16")]
    beta: Option<f64>,
    /// Target rate, converted to beta.
    #[arg(long)]
    bpp16: Option<f64>,
    /// Shorthand for `--router-mode flex`.
    #[arg(long)]
    flex: bool,
    #[arg(long)]
    flex_betas: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    phase1_fraction: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    full_loss_weight: Option<f64>,
    #[arg(long)]
    rms_decay: Option<f64>,
    #[arg(long)]
    divergence_loss: Option<f64>,
}

#[derive(Args, Serialize)]
struct DataArgs {
    /// Signals as JSON lines; the held-out synthetic set when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Size of the held-out set.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    noise_sigma: f64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RouterArg {
    Elbo,
    Search,
    Fixed,
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum NormalizerArg {
    /// Mean full-length error over the evaluated set.
    Dataset,
    /// The training EMA stored in the checkpoint.
    Ema,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "elbo")]
    router: Vec<RouterArg>,
    #[arg(long, default_value = "0.3125,0.5625,0.8125")]
    bpp16: String,
    /// Per-sample MSE targets of the search router.
    #[arg(long, default_value = "0.01")]
    threshold: String,
    /// Token counts of the fixed router.
    #[arg(long, default_value = "4,8,12,16")]
    lengths: String,
    #[arg(long, value_enum, default_value = "dataset")]
    normalizer: NormalizerArg,
    /// Choose beta per target so the realized mean rate on the set meets it.
    #[arg(long)]
    calibrate: bool,
    /// Metrics CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TokenizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, conflicts_with = "beta")]
    bpp16: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum, default_value = "dataset")]
    normalizer: NormalizerArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct DetokenizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of `.itk` files, read in name order.
    #[arg(long)]
    streams: PathBuf,
    /// Reference signals for MSE and PSNR.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out reference set of this size.
    #[arg(long, conflicts_with = "data")]
    count: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    noise_sigma: f64,
    /// Reconstructions as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BppArgs {
    /// Stream files or directories of them.
    #[arg(required = true)]
    streams: Vec<PathBuf>,
}

#[derive(Args, Serialize)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    exclusion: f64,
    /// Amplitude of the random weight perturbation.
    #[arg(long, default_value_t = 0.5)]
    scale: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn write_with_manifest(path: &Path, bytes: &[u8], mut manifest: RunManifest) -> Result<()> {
    write_file(path, bytes)?;
    manifest.add_output(path);
    manifest.write(&manifest_path(path))
}

fn cmd_entropy(a: &EntropyArgs) -> Result<()> {
    let src = parse_source(&a.probs)?;
    print_json(&json!({ "base": a.base, "items": src.len(), "entropy": entropy(&src, a.base)? }))
}

fn cmd_huffman(a: &HuffmanArgs) -> Result<()> {
    let src = parse_source(&a.probs)?;
    let tree = huffman(&src, a.arity)?;
    if let Some(out) = &a.out {
        let mut csv = String::from("item,prob,length\n");
        for (i, d) in tree.depths().iter().enumerate() {
            writeln!(csv, "{i},{},{d}", src.prob(i))?;
        }
        write_with_manifest(out, csv.as_bytes(), RunManifest::new("huffman", a, None)?)?;
    }
    print_json(&json!({
        "arity": a.arity,
        "tree": tree.root(),
        "lengths": tree.depths(),
        "expected_length": expected_length(&tree, &src)?,
        "entropy": entropy(&src, a.arity)?,
        "kraft_sum": tree.kraft_sum(),
    }))
}

fn cmd_tree_search(a: &TreeSearchArgs) -> Result<()> {
    let src = parse_source(&a.probs)?;
    let objective = match a.objective {
        ObjectiveArg::UniformLoss => Objective::UniformLoss,
        ObjectiveArg::ExpectedLength => Objective::ExpectedLength,
    };
    let mode = match a.mode {
        ModeArg::Exhaustive => SearchMode::Exhaustive,
        ModeArg::Lift => SearchMode::Lift,
    };
    let tree = search_optimal_tree(&src, objective, mode)?;
    let profile = depth_profile(&tree, &src)?;
    if let Some(out) = &a.out {
        let mut csv = String::from("depth,f\n");
        for (d, f) in profile.f.iter().enumerate() {
            writeln!(csv, "{d},{f}")?;
        }
        write_with_manifest(
            out,
            csv.as_bytes(),
            RunManifest::new("tree-search", a, None)?,
        )?;
    }
    print_json(&json!({
        "tree": tree.root(),
        "depths": tree.depths(),
        "tree_loss": tree_loss(&tree, &src)?,
        "expected_length": expected_length(&tree, &src)?,
        "entropy": entropy(&src, 2)?,
        "depth_profile": profile.f,
    }))
}

fn cmd_theorem2(a: &Theorem2Args) -> Result<()> {
    let rows = theorem2_gap(a.max_m)?;
    if let Some(out) = &a.out {
        let mut csv = String::from("m,entropy,huffman_length,expected_depth,ratio,heuristic\n");
        for r in &rows {
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                r.m, r.entropy, r.huffman_length, r.expected_depth, r.ratio, r.heuristic
            )?;
        }
        write_with_manifest(out, csv.as_bytes(), RunManifest::new("theorem2", a, None)?)?;
    }
    print_json(&rows)
}

fn cmd_theorem3(a: &Theorem3Args) -> Result<()> {
    let src = parse_source(&a.probs)?;
    let gaps = match &a.gaps {
        Some(g) => parse_list(g)?,
        None => vec![0.0; src.len()],
    };
    if gaps.len() != src.len() {
        bail!(Error::Validation(format!(
            "{} gaps for {} items",
            gaps.len(),
            src.len()
        )));
    }
    let beta = if a.beta == "auto" {
        (0..src.len())
            .map(|i| src.prob(i) * (src.surprisal(i, a.base) + gaps[i]))
            .sum()
    } else {
        a.beta.parse::<f64>().map_err(|_| {
            Error::Validation(format!("beta must be a number or `auto`, got {:?}", a.beta))
        })?
    };
    let report = check_theorem3_bound(&src, a.base, beta, &gaps)?;
    if let Some(out) = &a.out {
        let csv = format!(
            "beta,lhs,rhs,margin,pass,entropy,surrogate_length,surrogate_margin\n{beta},{},{},{},{},{},{},{}\n",
            report.lhs,
            report.rhs,
            report.margin,
            report.pass,
            report.entropy,
            report.surrogate_length,
            report.surrogate_margin
        );
        write_with_manifest(out, csv.as_bytes(), RunManifest::new("theorem3", a, None)?)?;
    }
    let mut v = serde_json::to_value(&report)?;
    v["beta"] = json!(beta);
    print_json(&v)
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let first = if a.held_out {
        trainer::HELD_OUT_SEED_BASE + a.seed
    } else {
        a.seed
    };
    let signals = sample_dataset(first, a.count, a.noise_sigma);
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &signals)?;
    match &a.out {
        Some(out) => write_with_manifest(out, &buf, RunManifest::new("sample", a, Some(first))?),
        None => {
            print!("{}", String::from_utf8(buf)?);
            Ok(())
        }
    }
}

fn load_signals(path: &Path) -> Result<Vec<ToySignal>> {
    let file = fs::File::open(path)
        .map_err(Error::Io)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(file))?)
}

fn load_set(d: &DataArgs, manifest: &mut RunManifest) -> Result<Vec<ToySignal>> {
    match &d.data {
        Some(p) => {
            manifest.add_input(p)?;
            load_signals(p)
        }
        None => Ok(trainer::held_out_set(d.count, d.noise_sigma)),
    }
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> Result<Checkpoint> {
    manifest.add_input(path)?;
    read_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c: TrainConfig = match &a.config {
        Some(p) => serde_json::from_slice(&read_file(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { c.$f = v; })* };
    }
    set!(
        steps,
        batch,
        lr_start,
        lr_end,
        seed,
        noise_sigma,
        phase1_fraction,
        ema_decay,
        full_loss_weight,
        rms_decay,
        divergence_loss,
        beta
    );
    if let Some(m) = a.router_mode {
        c.router_mode = m.into();
    }
    if a.flex {
        c.router_mode = RouterMode::Flex;
    }
    if let Some(q) = a.train_quant {
        c.train_quant = match q {
            QuantArg::Ste => TrainQuant::Ste,
            QuantArg::Dither => TrainQuant::Dither,
        };
    }
    if let Some(b) = a.bpp16 {
        c.beta = beta_from_bpp16(b, adatok_core::model::TOKENS, NOMINAL_BITS)?;
    }
    if let Some(f) = &a.flex_betas {
        c.flex_betas = parse_list(f)?;
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = resolve_train_config(a)?;
    let mut manifest = RunManifest::new("train", &config, Some(config.seed))?;
    if let Some(p) = &a.config {
        manifest.add_input(p)?;
    }
    let out = match &a.data {
        Some(p) => {
            manifest.add_input(p)?;
            let signals = load_signals(p)?;
            if signals.is_empty() {
                bail!(Error::Validation(format!(
                    "{} holds no signals",
                    p.display()
                )));
            }
            let init = adatok_core::ModelParams::init(config.seed);
            trainer::train(&config, init, signals.into_iter().cycle())?
        }
        None => trainer::train_synthetic(&config)?,
    };
    fs::create_dir_all(&a.out_dir)
        .map_err(Error::Io)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let ckpt = Checkpoint {
        params: out.params,
        fsq: adatok_core::FsqConfig::default_video(),
        router: out.router,
    };
    let model_path = a.out_dir.join("model.itkm");
    write_checkpoint(&model_path, &ckpt)?;
    let log_path = a.out_dir.join("log.csv");
    let mut log = Vec::new();
    trainer::write_log_csv(&mut log, &out.logs)?;
    write_file(&log_path, &log)?;
    let config_path = a.out_dir.join("config.json");
    write_file(
        &config_path,
        serde_json::to_string_pretty(&config)?.as_bytes(),
    )?;
    for p in [&model_path, &log_path, &config_path] {
        manifest.add_output(p);
    }
    manifest.write(&a.out_dir.join("manifest.json"))?;

    let tail = &out.logs[out.logs.len() - (out.logs.len() / 10).max(1)..];
    print_json(&json!({
        "steps": out.logs.len(),
        "final_loss": out.logs.last().map(|r| r.loss),
        "tail_mean_loss": tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64,
        "tail_mean_n_x": tail.iter().map(|r| r.n_x).sum::<f64>() / tail.len() as f64,
        "ema_nll": ckpt.router.ema_nll,
        "model": model_path,
    }))
}

fn normalizer(
    kind: NormalizerArg,
    model: &Model,
    ckpt: &Checkpoint,
    set: &[ToySignal],
) -> Result<f64> {
    match kind {
        NormalizerArg::Dataset => Ok(trainer::mean_full_nll(model, set)?),
        NormalizerArg::Ema => ckpt
            .router
            .ema_nll
            .ok_or_else(|| Error::State("checkpoint has no EMA; use --normalizer dataset").into()),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut manifest = RunManifest::new("eval", a, None)?;
    let ckpt = load_model(&a.model, &mut manifest)?;
    let model = ckpt.model()?;
    let set = load_set(&a.data, &mut manifest)?;
    let mut rows = Vec::new();
    for router in &a.router {
        match router {
            RouterArg::Elbo => {
                if a.calibrate && a.normalizer == NormalizerArg::Ema {
                    bail!(Error::Config(
                        "--calibrate works against the dataset normalizer".into()
                    ));
                }
                let mean = normalizer(a.normalizer, &model, &ckpt, &set)?;
                for target in parse_list(&a.bpp16)? {
                    let mut beta =
                        beta_from_bpp16(target, adatok_core::model::TOKENS, NOMINAL_BITS)?;
                    if a.calibrate {
                        beta = trainer::calibrate_beta(&model, &ckpt.router, &set, beta)?;
                    }
                    rows.push(trainer::evaluate_beta(
                        &model,
                        &ckpt.router,
                        &set,
                        beta,
                        mean,
                        target,
                    )?);
                }
            }
            RouterArg::Search => {
                for t in parse_list(&a.threshold)? {
                    rows.push(trainer::evaluate_search(&model, &ckpt.router, &set, t)?);
                }
            }
            RouterArg::Fixed => {
                for n in parse_list(&a.lengths)? {
                    if n.fract() != 0.0 || n < 1.0 {
                        bail!(Error::Validation(format!(
                            "fixed length must be a positive integer, got {n}"
                        )));
                    }
                    rows.push(trainer::evaluate_fixed(&model, &set, n as usize)?);
                }
            }
        }
    }
    let mut csv = Vec::new();
    trainer::write_eval_csv(&mut csv, &rows)?;
    match &a.out {
        Some(out) => write_with_manifest(out, &csv, manifest),
        None => {
            print!("{}", String::from_utf8(csv)?);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct StreamSummary {
    file: String,
    seed: u64,
    n_x: usize,
    bpp16: f64,
    mse: f64,
}

fn cmd_tokenize(a: &TokenizeArgs) -> Result<()> {
    let mut manifest = RunManifest::new("tokenize", a, None)?;
    let ckpt = load_model(&a.model, &mut manifest)?;
    let model = ckpt.model()?;
    let set = load_set(&a.data, &mut manifest)?;
    let beta = match (a.bpp16, a.beta) {
        (Some(b), _) => beta_from_bpp16(b, adatok_core::model::TOKENS, NOMINAL_BITS)?,
        (None, Some(b)) => b,
        (None, None) => ckpt.router.beta,
    };
    let mean = normalizer(a.normalizer, &model, &ckpt, &set)?;
    fs::create_dir_all(&a.out_dir)
        .map_err(Error::Io)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let tok = AdaptiveTokenizer::new(&model, &ckpt.router);
    let mut signals = Vec::with_capacity(set.len());
    for (i, s) in set.iter().enumerate() {
        let (stream, out) = tok.tokenize(&s.values, beta, Some(mean))?;
        let path = a.out_dir.join(format!("{i:06}.itk"));
        write_file(&path, &stream.to_bytes()?)?;
        manifest.add_output(&path);
        signals.push(StreamSummary {
            file: path.display().to_string(),
            seed: s.seed,
            n_x: stream.n_x(),
            bpp16: bpp16(stream.n_x(), stream.mask.n_max(), NOMINAL_BITS, true)?,
            mse: out.loss,
        });
    }
    let count = signals.len() as f64;
    let mean_mse = signals.iter().map(|s| s.mse).sum::<f64>() / count;
    let summary = json!({
        "beta": beta,
        "normalizer": mean,
        "count": signals.len(),
        "mean_n_x": signals.iter().map(|s| s.n_x as f64).sum::<f64>() / count,
        "mean_bpp16": signals.iter().map(|s| s.bpp16).sum::<f64>() / count,
        "mse": mean_mse,
        "psnr": psnr_from_mse(mean_mse, trainer::PSNR_MAX),
        "signals": signals,
    });
    let summary_path = a.out_dir.join("summary.json");
    write_file(
        &summary_path,
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    manifest.add_output(&summary_path);
    manifest.write(&a.out_dir.join("manifest.json"))?;
    print_json(&json!({
        "count": summary["count"],
        "mean_n_x": summary["mean_n_x"],
        "mean_bpp16": summary["mean_bpp16"],
        "mse": summary["mse"],
        "psnr": summary["psnr"],
        "summary": summary_path,
    }))
}

fn stream_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(Error::Io)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "itk"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn cmd_detokenize(a: &DetokenizeArgs) -> Result<()> {
    let mut manifest = RunManifest::new("detokenize", a, None)?;
    let ckpt = load_model(&a.model, &mut manifest)?;
    let model = ckpt.model()?;
    let tok = AdaptiveTokenizer::new(&model, &ckpt.router);
    let files = stream_files(std::slice::from_ref(&a.streams))?;
    let reference = match (&a.data, a.count) {
        (Some(p), _) => {
            manifest.add_input(p)?;
            Some(load_signals(p)?)
        }
        (None, Some(n)) => Some(trainer::held_out_set(n, a.noise_sigma)),
        (None, None) => None,
    };
    if let Some(r) = &reference {
        if r.len() != files.len() {
            bail!(Error::Validation(format!(
                "{} streams but {} reference signals",
                files.len(),
                r.len()
            )));
        }
    }
    let mut recon_lines = Vec::new();
    let mut total = 0.0;
    for (i, f) in files.iter().enumerate() {
        manifest.add_input(f)?;
        let stream =
            deserialize(&read_file(f)?).with_context(|| format!("parsing {}", f.display()))?;
        let recon = tok.detokenize(&stream)?;
        if let Some(r) = &reference {
            total += mse(&r[i].values, &recon)?;
        }
        serde_json::to_writer(
            &mut recon_lines,
            &json!({ "file": f, "n_x": stream.n_x(), "values": recon }),
        )?;
        recon_lines.push(b'\n');
    }
    if let Some(out) = &a.out {
        write_with_manifest(out, &recon_lines, manifest)?;
    }
    let mut report = json!({ "count": files.len() });
    if reference.is_some() && !files.is_empty() {
        let m = total / files.len() as f64;
        report["mse"] = json!(m);
        report["psnr"] = json!(psnr_from_mse(m, trainer::PSNR_MAX));
    }
    print_json(&report)
}

fn cmd_bpp(a: &BppArgs) -> Result<()> {
    let mut rows = Vec::new();
    let (mut nominal, mut exact) = (0.0, 0.0);
    let files = stream_files(&a.streams)?;
    for f in &files {
        let bytes = read_file(f)?;
        let s = deserialize(&bytes).with_context(|| format!("parsing {}", f.display()))?;
        let b = bpp16(s.n_x(), s.mask.n_max(), NOMINAL_BITS, true)?;
        let e = bpp16(s.n_x(), s.mask.n_max(), s.config.exact_bits(), true)?;
        nominal += b;
        exact += e;
        rows.push(json!({
            "file": f, "n_x": s.n_x(), "n_max": s.mask.n_max(), "bytes": bytes.len(), "bpp16": b, "bpp16_exact": e,
        }));
    }
    let n = files.len().max(1) as f64;
    print_json(
        &json!({ "streams": rows, "mean_bpp16": nominal / n, "mean_bpp16_exact": exact / n }),
    )
}

fn cmd_grad_check(a: &GradCheckArgs) -> Result<()> {
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let opts = GradCheckOptions {
        step: a.step,
        exclusion: a.exclusion,
        ..Default::default()
    };
    let report = grad_check_with(a.scale, &seeds, opts)?;
    let pass = report.max_rel_err < a.tolerance;
    let mut v = serde_json::to_value(&report)?;
    v["pass"] = json!(pass);
    print_json(&v)?;
    if !pass {
        bail!(Error::Validation(format!(
            "max relative error {:e} exceeds {:e}",
            report.max_rel_err, a.tolerance
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Entropy(a) => cmd_entropy(a),
        Command::Huffman(a) => cmd_huffman(a),
        Command::TreeSearch(a) => cmd_tree_search(a),
        Command::Theorem2(a) => cmd_theorem2(a),
        Command::Theorem3(a) => cmd_theorem3(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Tokenize(a) => cmd_tokenize(a),
        Command::Detokenize(a) => cmd_detokenize(a),
        Command::Bpp(a) => cmd_bpp(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let result = trainer::thread_pool()
        .map_err(anyhow::Error::from)
        .and_then(|pool| pool.install(|| run(cli)));
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Command-line front end: one subcommand per experiment artifact.
//!
//! Exit codes: 0 on success, 3 when training or evaluation goes non-finite,
//! 2 for every other failure (usage, config, data, checkpoint).

mod config;
mod data_spec;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{parse_float, parse_pairs, ExperimentConfig};
pub use data_spec::DataSpec;

use crate::attacks::AttackConfig;
use crate::data::Dataset;
use crate::error::{bail, Error, Result};
use crate::eval::{accuracy, alpha_pareto, embedder_filters, filter_pca, pareto_front, robust_accuracy, write_filter_images};
use crate::io::write_atomic;
use crate::model::{Mode, Model, ParamStore};
use crate::soup::{combo_grid, naive_weight_soup, rows_to_csv, soup_sweep, SweepRow};
use crate::train::{load_checkpoint, save_checkpoint, train_from, Checkpoint, EpochMetrics, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Number of filter components requested by `filters` unless overridden.
pub const DEFAULT_COMPONENTS: usize = 28;

/// ε used when neither the flag nor the checkpoint's training config gives one.
const DEFAULT_EPSILON: f64 = 4.0 / 255.0;

#[derive(Parser, Debug)]
#[command(name = "dadl", version, about = "Adversarial co-training with dual adapters and model soups")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Co-train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print clean and robust accuracy of one checkpoint as JSON.
    Eval {
        #[command(flatten)]
        target: EvalTarget,
        /// clean, robust, soup:BETA or combo:BETA1:BETA2
        #[arg(long, default_value = "clean")]
        mode: String,
    },
    /// Evaluate Soup(β) over a range of weightings.
    SoupSweep {
        #[command(flatten)]
        target: EvalTarget,
        /// START:END:STEP or a comma-separated list
        #[arg(long, default_value = "0:1:0.1")]
        betas: String,
        /// Also evaluate β = -0.05 and β = 1.05.
        #[arg(long)]
        extrapolate: bool,
        #[command(flatten)]
        output: TableOutput,
    },
    /// Evaluate β1·clean + β2·adv over a grid.
    ComboGrid {
        #[command(flatten)]
        target: EvalTarget,
        #[arg(long, default_value = "0:1:0.25")]
        beta1s: String,
        #[arg(long, default_value = "0:1:0.25")]
        beta2s: String,
        #[command(flatten)]
        output: TableOutput,
    },
    /// Write principal components of the patch-embedding filters as images.
    Filters {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "clean")]
        mode: String,
        #[arg(long, default_value_t = DEFAULT_COMPONENTS)]
        components: usize,
    },
    /// Train one model per α and report the clean/robust trade-off.
    AlphaSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0:1:0.25")]
        alphas: String,
        #[command(flatten)]
        output: TableOutput,
    },
    /// Interpolate every tensor of two checkpoints and evaluate each mix.
    NaiveSoup {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "0:1:0.1")]
        betas: String,
        #[arg(long, default_value = "clean")]
        mode: String,
        #[arg(long, default_value = "none")]
        attack: String,
        #[arg(long)]
        epsilon: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        output: TableOutput,
    },
}

#[derive(Args, Debug)]
struct EvalTarget {
    #[arg(long)]
    ckpt: PathBuf,
    /// synth:N[:SEED], idx:IMAGES:LABELS[:START:END], cifar10:DIR[:test], ...
    #[arg(long)]
    dataset: String,
    /// none or an attack preset such as pgd2, pgd40, fgsm, l2_pgd10
    #[arg(long, default_value = "pgd40")]
    attack: String,
    /// Attack radius, e.g. 8/255; defaults to the training radius.
    #[arg(long)]
    epsilon: Option<String>,
    /// Evaluate only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
    /// Use the raw weights even when the checkpoint holds an EMA copy.
    #[arg(long)]
    no_ema: bool,
}

#[derive(Args, Debug)]
struct TableOutput {
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional JSON copy of the table.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Parses arguments and runs the command, writing results to `out` and
/// diagnostics to `err`. Returns the process exit code.
pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// Caps rayon's global pool at `DADL_THREADS` workers when the variable is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("DADL_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DADL_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref(), out),
        Command::Eval { target, mode } => cmd_eval(&target, &mode, out),
        Command::SoupSweep { target, betas, extrapolate, output } => {
            let mut betas = parse_range(&betas)?;
            if extrapolate {
                betas.insert(0, -0.05);
                betas.push(1.05);
            }
            let loaded = Loaded::open(&target)?;
            let rows = soup_sweep(&loaded.model, &loaded.store, &loaded.data, &betas, loaded.attack.as_ref())?;
            emit_rows(&rows, &output, out)
        }
        Command::ComboGrid { target, beta1s, beta2s, output } => {
            let (b1, b2) = (parse_range(&beta1s)?, parse_range(&beta2s)?);
            let loaded = Loaded::open(&target)?;
            let grid = combo_grid(&loaded.model, &loaded.store, &loaded.data, &b1, &b2, loaded.attack.as_ref())?;
            emit_rows(&grid.rows(), &output, out)
        }
        Command::Filters { ckpt, out: dir, mode, components } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let model = Model::from_config(ckpt.meta.model.clone())?;
            let mode = parse_mode(&mode)?;
            let store = pick_store(&ckpt, false);
            require_mode_supported(store, mode)?;
            let (filters, patch) = embedder_filters(&model, store, mode)?;
            let pca = filter_pca(&filters, components, patch)?;
            let files = write_filter_images(&dir, &pca)?;
            writeln!(out, "{}", serde_json::json!({ "images": files.len(), "dir": dir }))?;
            Ok(())
        }
        Command::AlphaSweep { config, alphas, output } => cmd_alpha_sweep(&config, &alphas, &output, out),
        Command::NaiveSoup { ckpt_a, ckpt_b, dataset, betas, mode, attack, epsilon, limit, output } => {
            let a = load_checkpoint(&ckpt_a)?;
            let b = load_checkpoint(&ckpt_b)?;
            if a.meta.model != b.meta.model {
                bail!(Config, "checkpoints were built from different model configs");
            }
            let model = Model::from_config(a.meta.model.clone())?;
            let data = load_limited(&dataset, &model, limit)?;
            let attack = parse_attack(&attack, epsilon.as_deref(), &a)?;
            let mode = parse_mode(&mode)?;
            let (sa, sb) = (pick_store(&a, false), pick_store(&b, false));
            require_mode_supported(sa, mode)?;
            let rows = parse_range(&betas)?
                .into_iter()
                .map(|beta| {
                    let store = naive_weight_soup(sa, sb, beta)?;
                    let clean_acc = accuracy(&model, &store, &data, mode)?;
                    let robust_acc = attack.as_ref().map(|at| robust_accuracy(&model, &store, &data, mode, at)).transpose()?;
                    Ok(SweepRow { beta, beta2: None, clean_acc, robust_acc })
                })
                .collect::<Result<Vec<_>>>()?;
            emit_rows(&rows, &output, out)
        }
    }
}

/// Inclusive `START:END:STEP` range or a comma-separated list. Range values
/// are rounded to 12 decimals so `0:1:0.1` yields exactly `0.3`, not `0.30000000000000004`.
pub fn parse_range(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (parse_float(a)?, parse_float(b)?, parse_float(step)?);
            if step <= 0.0 || b < a {
                bail!(Config, "range `{}` needs END >= START and a positive STEP", s);
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            Ok((0..=n).map(|i| round12(a + i as f64 * step)).collect())
        }
        [_] => {
            let v = s.split(',').map(|p| parse_float(p.trim())).collect::<Result<Vec<_>>>()?;
            if v.is_empty() {
                bail!(Config, "empty list");
            }
            Ok(v)
        }
        _ => bail!(Config, "expected START:END:STEP or a comma-separated list, got `{}`", s),
    }
}

fn round12(v: f64) -> f64 {
    let r = (v * 1e12).round() / 1e12;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// `clean`, `robust`, `soup:BETA` or `combo:BETA1:BETA2`.
pub fn parse_mode(s: &str) -> Result<Mode> {
    let parts: Vec<&str> = s.split(':').collect();
    Ok(match parts.as_slice() {
        ["clean"] => Mode::Clean,
        ["robust"] => Mode::Robust,
        ["soup", b] => Mode::Soup(parse_float(b)?),
        ["combo", b1, b2] => Mode::Combo(parse_float(b1)?, parse_float(b2)?),
        _ => bail!(Config, "unknown mode `{}`", s),
    })
}

fn require_mode_supported(store: &ParamStore, mode: Mode) -> Result<()> {
    if matches!(mode, Mode::Soup(_) | Mode::Combo(..)) && store.dual.is_empty() {
        bail!(Config, "mode {:?} needs a checkpoint with dual parameters", mode);
    }
    Ok(())
}

fn pick_store(ckpt: &Checkpoint, no_ema: bool) -> &ParamStore {
    match (&ckpt.ema, no_ema) {
        (Some(ema), false) => ema,
        _ => &ckpt.store,
    }
}

fn parse_attack(name: &str, epsilon: Option<&str>, ckpt: &Checkpoint) -> Result<Option<AttackConfig>> {
    if name == "none" {
        return Ok(None);
    }
    let eps = match epsilon {
        Some(e) => parse_float(e)?,
        None => ckpt.meta.train.as_ref().map_or(DEFAULT_EPSILON, |t| t.attack.epsilon),
    };
    Ok(Some(AttackConfig::preset(name, eps)?))
}

fn load_limited(spec: &str, model: &Model, limit: Option<usize>) -> Result<Dataset> {
    let cfg = model.config();
    let ds = spec.parse::<DataSpec>()?.load(cfg.image_size, cfg.num_classes)?;
    match limit {
        Some(n) => ds.take(n.min(ds.len())),
        None => Ok(ds),
    }
}

struct Loaded {
    model: Model,
    store: ParamStore,
    data: Dataset,
    attack: Option<AttackConfig>,
}

impl Loaded {
    fn open(t: &EvalTarget) -> Result<Self> {
        let mut ckpt = load_checkpoint(&t.ckpt)?;
        let model = Model::from_config(ckpt.meta.model.clone())?;
        let data = load_limited(&t.dataset, &model, t.limit)?;
        let attack = parse_attack(&t.attack, t.epsilon.as_deref(), &ckpt)?;
        let store = match (ckpt.ema.take(), t.no_ema) {
            (Some(ema), false) => ema,
            _ => ckpt.store,
        };
        Ok(Self { model, store, data, attack })
    }
}

#[derive(Serialize)]
struct EvalReport {
    examples: usize,
    clean_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    robust_acc: Option<f64>,
}

fn cmd_eval(t: &EvalTarget, mode: &str, out: &mut dyn Write) -> Result<()> {
    let mode = parse_mode(mode)?;
    let l = Loaded::open(t)?;
    require_mode_supported(&l.store, mode)?;
    let clean_acc = accuracy(&l.model, &l.store, &l.data, mode)?;
    let robust_acc = l.attack.as_ref().map(|a| robust_accuracy(&l.model, &l.store, &l.data, mode, a)).transpose()?;
    let report = EvalReport { examples: l.data.len(), clean_acc, robust_acc };
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

fn emit_rows(rows: &[SweepRow], output: &TableOutput, out: &mut dyn Write) -> Result<()> {
    let csv = rows_to_csv(rows);
    match &output.out {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => out.write_all(csv.as_bytes())?,
    }
    if let Some(path) = &output.json {
        write_atomic(path, &serde_json::to_vec_pretty(rows)?)?;
    }
    Ok(())
}

fn metrics_jsonl(history: &[EpochMetrics]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for row in history {
        serde_json::to_writer(&mut buf, row)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Sum of the monitored clean and robust accuracies; `None` when unmonitored.
fn selection_score(m: &EpochMetrics) -> Option<f64> {
    Some(m.acc_clean_mode? + m.acc_robust_mode_pgd?)
}

/// The evaluation weights of `st` stored as plain parameters.
fn best_checkpoint(st: &TrainState, model: &Model, exp: &ExperimentConfig) -> Checkpoint {
    let mut ckpt = st.to_checkpoint(model, &exp.train);
    ckpt.store = st.eval_store().clone();
    ckpt.ema = None;
    ckpt.optimizer = None;
    ckpt
}

fn cmd_train(config: &Path, resume: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let exp = ExperimentConfig::from_file(config)?;
    let model = Model::from_config(exp.model.clone())?;
    let data = exp.train_data.load(exp.model.image_size, exp.model.num_classes)?;

    let state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.meta.model != exp.model {
                bail!(Config, "checkpoint {} was trained with a different model config", path.display());
            }
            if ckpt.ema.is_some() != exp.train.ema_momentum.is_some() {
                bail!(Config, "checkpoint and config disagree on ema_momentum");
            }
            TrainState::from_checkpoint(ckpt)
        }
        None => {
            let (_, store) = Model::build(exp.model.clone(), exp.train.seed)?;
            TrainState::new(store, &exp.train)
        }
    };

    let dir = &exp.output_dir;
    std::fs::create_dir_all(dir)?;
    let best_path = dir.join("best.ckpt");
    let mut best = state.history.iter().filter_map(selection_score).fold(f64::NEG_INFINITY, f64::max);
    let state = train_from(&model, state, &data, None, &exp.train, |st, row| {
        let score = selection_score(row).unwrap_or(f64::INFINITY);
        if score >= best || !best_path.exists() {
            best = best.max(score);
            save_checkpoint(&best_path, &best_checkpoint(st, &model, &exp))?;
        }
        write_atomic(&dir.join("metrics.jsonl"), &metrics_jsonl(&st.history)?)?;
        save_checkpoint(&dir.join("final.ckpt"), &st.to_checkpoint(&model, &exp.train))
    })?;
    save_checkpoint(&dir.join("final.ckpt"), &state.to_checkpoint(&model, &exp.train))?;
    if !best_path.exists() {
        save_checkpoint(&best_path, &best_checkpoint(&state, &model, &exp))?;
    }

    let summary = serde_json::json!({
        "epochs": state.epoch,
        "steps": state.step,
        "final": dir.join("final.ckpt"),
        "best": best_path,
    });
    writeln!(out, "{summary}")?;
    Ok(())
}

fn cmd_alpha_sweep(config: &Path, alphas: &str, output: &TableOutput, out: &mut dyn Write) -> Result<()> {
    let exp = ExperimentConfig::from_file(config)?;
    let alphas = parse_range(alphas)?;
    let (size, classes) = (exp.model.image_size, exp.model.num_classes);
    let train_set = exp.train_data.load(size, classes)?;
    let eval_set = match &exp.test_data {
        Some(spec) => spec.load(size, classes)?,
        None => train_set.clone(),
    };
    if exp.eval_attack == "none" {
        bail!(Config, "alpha-sweep needs an eval_attack");
    }
    let attack = AttackConfig::preset(&exp.eval_attack, exp.train.attack.epsilon)?;
    let rows = alpha_pareto(|seed| Model::build(exp.model.clone(), seed), &train_set, &eval_set, &alphas, &exp.train, &attack)?;
    let front = pareto_front(&rows);

    let mut csv = String::from("alpha,clean_acc,robust_acc,pareto\n");
    for (r, on) in rows.iter().zip(&front) {
        csv.push_str(&format!("{},{},{},{}\n", r.alpha, r.clean_acc, r.robust_acc, on));
    }
    let path = output.out.clone().unwrap_or_else(|| exp.output_dir.join("alpha_sweep.csv"));
    write_atomic(&path, csv.as_bytes())?;
    if let Some(json) = &output.json {
        write_atomic(json, &serde_json::to_vec_pretty(&rows)?)?;
    }
    out.write_all(csv.as_bytes())?;
    Ok(())
}

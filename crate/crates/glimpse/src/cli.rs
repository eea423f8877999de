//! Argument surface and command implementations.
//!
//! Stdout carries `key: value` lines (one record per line, no decoration);
//! diagnostics go to stderr.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use glimpse_core::costmodel::{analytic_report, preset, presets, ArchPreset, CSV_HEADER};
use glimpse_core::prune::{baseline_generate, GlimpseParams, Pipeline};
use glimpse_core::training::{evaluate, foreground_recall, generate_dataset, train, StepMetrics};
use glimpse_core::vocab::{self, TokenId};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::checks::{run_all, Fault};
use crate::config::{env_seed, RunConfig};
use crate::dataset::Dataset;
use crate::error::{CliError, CliResult};
use crate::render::{ascii_grid, read_image, write_pgm};

#[derive(Debug, Parser)]
#[command(name = "glimpse", version, about = "Glimpse-token visual pruning on a toy vision-language decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic grounded-QA dataset.
    GenData(GenDataArgs),
    /// Train glimpse rows and the importance predictor with the backbone frozen.
    Train(TrainArgs),
    /// Pruned inference on one image and question.
    Run(RunArgs),
    /// Analytic prefill, decode and KV-cache cost report.
    Cost(CostArgs),
    /// Run the invariant suite.
    Selftest(SelftestArgs),
}

/// `HxW` patch grid.
fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("grid {s:?} is not HxW"))?;
    let h: usize = h.parse().map_err(|_| format!("bad grid height {h:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad grid width {w:?}"))?;
    if h < 2 || w < 2 {
        return Err(format!("grid {h}x{w} is smaller than 2x2"));
    }
    Ok((h, w))
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, value_parser = parse_grid, default_value = "8x8")]
    pub grid: (usize, usize),
    /// Defaults to $GLIMPSE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training set; falls back to `paths.data` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path; falls back to `paths.checkpoint`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step metrics log; defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Held-out set evaluated after training.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave optimizer moments out of the checkpoint.
    #[arg(long)]
    pub no_optimizer_state: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PNM or PNG image, one pixel per patch.
    #[arg(long, conflicts_with = "sample_id", required_unless_present = "sample_id")]
    pub image: Option<PathBuf>,
    /// Sample index into `--data`.
    #[arg(long, requires = "data")]
    pub sample_id: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Question text; required with `--image`, defaults to the sample's question.
    #[arg(long)]
    pub question: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub rmax: Option<f64>,
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub max_new: usize,
    /// Also run the unpruned baseline and print its answer.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, conflicts_with_all = ["layers", "hidden", "prune_layer"])]
    pub preset: Option<String>,
    #[arg(long = "L", requires = "hidden")]
    pub layers: Option<usize>,
    #[arg(long = "D", requires = "layers")]
    pub hidden: Option<usize>,
    /// Defaults to ceil(2L/3).
    #[arg(long = "K")]
    pub prune_layer: Option<usize>,
    #[arg(long = "H", default_value_t = 1)]
    pub heads: usize,
    /// Defaults to 4·D.
    #[arg(long)]
    pub ffn: Option<usize>,
    /// Predictor overhead for custom dims: visual channels C (0 = none).
    #[arg(long = "C", default_value_t = 0)]
    pub channels: usize,
    #[arg(long = "E", default_value_t = 256)]
    pub vip_hidden: usize,
    #[arg(long = "F", default_value_t = 512)]
    pub vip_cond: usize,
    #[arg(long, default_value_t = 4)]
    pub vip_blocks: usize,
    #[arg(long = "S")]
    pub seq: Option<usize>,
    /// Defaults to S.
    #[arg(long = "S-pruned", requires = "seq")]
    pub seq_pruned: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub bytes: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// List the built-in presets.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

pub fn dispatch(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Run(a) => run_cmd(&a, out),
        Command::Cost(a) => cost_cmd(&a, out),
        Command::Selftest(a) => selftest(&a, out),
    }
}

fn stdout_err(e: std::io::Error) -> CliError {
    CliError::io(Path::new("<stdout>"), e)
}

macro_rules! emit {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(stdout_err)?
    };
}

fn ids(v: &[TokenId]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn symbols(v: &[TokenId]) -> String {
    v.iter().map(|&t| vocab::symbol(t)).collect::<Vec<_>>().join(" ")
}

pub fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let (h, w) = a.grid;
    let samples = generate_dataset(seed, a.count, h, w)?;
    Dataset::new(seed, h, w, samples).save(&a.out)?;
    emit!(out, "dataset: {}", a.out.display());
    emit!(out, "count: {}", a.count);
    emit!(out, "grid: {h}x{w}");
    emit!(out, "seed: {seed}");
    Ok(())
}

#[derive(Serialize)]
struct MetricsLine {
    step: usize,
    lr: f64,
    lang: f64,
    dice: f64,
    bce: f64,
    total: f64,
    recall: f64,
    retention: f64,
}

fn metrics_line(m: &StepMetrics) -> String {
    serde_json::to_string(&MetricsLine {
        step: m.step,
        lr: m.lr,
        lang: m.loss.lang,
        dice: m.loss.dice,
        bce: m.loss.bce,
        total: m.loss.total,
        recall: m.recall,
        retention: m.retention,
    })
    .expect("metrics serialize")
}

pub fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cfg.resolve_seed(a.seed)?;
    let data_path = a
        .data
        .clone()
        .or_else(|| cfg.paths.data.clone())
        .ok_or_else(|| CliError::Usage("no dataset: pass --data or set paths.data".into()))?;
    let ckpt_path = a
        .out
        .clone()
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| CliError::Usage("no checkpoint path: pass --out or set paths.checkpoint".into()))?;
    let metrics_path = a.metrics.clone().or_else(|| cfg.paths.metrics.clone()).unwrap_or_else(|| {
        let mut p = ckpt_path.clone().into_os_string();
        p.push(".metrics.jsonl");
        p.into()
    });

    let data = Dataset::load(&data_path)?;
    if (data.header.grid_h, data.header.grid_w) != (cfg.visual.grid_h, cfg.visual.grid_w) {
        return Err(CliError::Usage(format!(
            "dataset grid {}x{} differs from config grid {}x{}",
            data.header.grid_h, data.header.grid_w, cfg.visual.grid_h, cfg.visual.grid_w
        )));
    }
    let model = cfg.build()?;
    let tcfg = cfg.train_config(data.samples.len());
    let init = GlimpseParams::init(&model.backbone, &model.vip)?;

    let file = std::fs::File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let mut log_err = None;
    let outcome = train(&model.backbone, &init, &model.vip, &data.samples, &tcfg, |m| {
        if log_err.is_none() {
            if let Err(e) = writeln!(log, "{}", metrics_line(m)) {
                log_err = Some(e);
            }
        }
    });
    if let Some(e) = log_err.or_else(|| log.flush().err()) {
        return Err(CliError::io(&metrics_path, e));
    }
    let outcome = outcome.map_err(|e| match e {
        glimpse_core::Error::Numeric(m) => CliError::Numeric(format!("{m}; per-step metrics in {}", metrics_path.display())),
        other => other.into(),
    })?;

    let optimizer = (!a.no_optimizer_state).then(|| outcome.optimizer.clone());
    Checkpoint::new(&cfg, &outcome.params, optimizer).save(&ckpt_path)?;
    let last = outcome.history.last().expect("at least one step");
    emit!(out, "seed: {seed}");
    emit!(out, "steps: {}", outcome.history.len());
    emit!(out, "final_loss: {}", last.loss.total);
    emit!(out, "checkpoint: {}", ckpt_path.display());
    emit!(out, "metrics: {}", metrics_path.display());
    if let Some(p) = &a.eval {
        let held = Dataset::load(p)?;
        let ev = evaluate(&model.backbone, &outcome.params, &model.vip, &held.samples)?;
        emit!(out, "eval_samples: {}", held.samples.len());
        emit!(out, "eval_recall: {}", ev.foreground_recall);
        emit!(out, "eval_iou: {}", ev.mean_iou);
        emit!(out, "eval_retention: {}", ev.mean_retention);
        emit!(out, "eval_answer_accuracy: {}", ev.answer_accuracy);
    }
    Ok(())
}

pub fn run_cmd(a: &RunArgs, out: &mut dyn Write) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (mut model, params) = ckpt.restore()?;
    if let Some(t) = a.tau {
        model.vip.tau = t;
    }
    if let Some(r) = a.rmax {
        model.vip.r_max = Some(r);
    }
    model.vip.validate()?;

    let (image, mut question, sample) = match (&a.image, a.sample_id) {
        (Some(p), _) => (read_image(p)?, None, None),
        (None, Some(id)) => {
            let data = Dataset::load(a.data.as_deref().expect("clap enforces --data"))?;
            let s = data
                .samples
                .get(id)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("sample {id} out of range (dataset has {})", data.samples.len())))?;
            (s.image.clone(), Some(s.question_ids.clone()), Some(s))
        }
        (None, None) => unreachable!("clap requires --image or --sample-id"),
    };
    if let Some(q) = &a.question {
        question = Some(vocab::encode(q).ok_or_else(|| CliError::Usage(format!("question {q:?} has words outside the vocabulary")))?);
    }
    let question = question.ok_or_else(|| CliError::Usage("--question is required with --image".into()))?;
    let vis = &ckpt.config.visual;
    if (image.height, image.width) != (vis.grid_h, vis.grid_w) {
        return Err(CliError::Usage(format!(
            "image is {}x{}, model grid is {}x{}",
            image.height, image.width, vis.grid_h, vis.grid_w
        )));
    }

    let pipe = Pipeline::new(&model.backbone, &params, &model.vip);
    let gen = pipe.generate(&image, &question, a.max_new)?;
    let s = &gen.stats;
    emit!(out, "question: {}", symbols(&question));
    emit!(out, "answer_ids: {}", ids(&gen.answer_ids));
    emit!(out, "answer: {}", symbols(&gen.answer_ids));
    emit!(out, "num_visual: {}", s.num_visual);
    emit!(out, "num_visual_kept: {}", s.num_visual_kept);
    emit!(out, "retention: {}", s.retention_rate);
    emit!(out, "prefill_flops: {}", s.prefill_flops_counted);
    emit!(out, "vip_flops: {}", s.vip_flops_counted);
    emit!(out, "decode_flops: {}", gen.decode_flops.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "));
    emit!(out, "kv_elements: {}", gen.cache.element_count());
    for row in ascii_grid(&gen.selection.keep, vis.grid_h, vis.grid_w) {
        emit!(out, "grid: {row}");
    }
    if let Some(s) = &sample {
        emit!(out, "target: {}", symbols(&s.answer_ids));
        emit!(out, "recall: {}", foreground_recall(&gen.selection.keep, &s.mask));
    }
    if let Some(p) = &a.heatmap {
        write_pgm(p, &gen.importance.probs, vis.grid_h, vis.grid_w)?;
        emit!(out, "heatmap: {}", p.display());
    }
    if a.baseline {
        let (b_ids, _, b_flops) = baseline_generate(&model.backbone, &image, &question, a.max_new)?;
        emit!(out, "baseline_answer_ids: {}", ids(&b_ids));
        emit!(out, "baseline_answer: {}", symbols(&b_ids));
        emit!(out, "baseline_decode_flops: {}", b_flops.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}

fn cost_arch(a: &CostArgs) -> CliResult<ArchPreset> {
    let arch = match (&a.preset, a.layers, a.hidden) {
        (Some(name), _, _) => preset(name).ok_or_else(|| {
            let known: Vec<String> = presets().into_iter().map(|p| p.name).collect();
            CliError::Usage(format!("unknown preset {name:?}; known: {}", known.join(", ")))
        })?,
        (None, Some(l), Some(d)) => {
            let arch = ArchPreset::custom(l, d, a.heads, a.ffn.unwrap_or(4 * d), a.prune_layer);
            if a.channels > 0 {
                arch.with_predictor(a.channels, a.vip_hidden, a.vip_cond, a.vip_blocks)
            } else {
                arch
            }
        }
        _ => return Err(CliError::Usage("pass --preset NAME or --L and --D".into())),
    };
    arch.validate()?;
    Ok(arch)
}

pub fn cost_cmd(a: &CostArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.list {
        for p in presets() {
            emit!(out, "preset: {} L={} D={} H={} ffn={} K={}", p.name, p.layers, p.hidden, p.heads, p.ffn, p.prune_layer);
        }
        return Ok(());
    }
    let arch = cost_arch(a)?;
    let report = match a.seq {
        Some(s) => Some(analytic_report(&arch, s, a.seq_pruned.unwrap_or(s), a.bytes)?),
        None => None,
    };
    match a.format {
        Format::Json => {
            let v = serde_json::json!({ "arch": arch, "report": report });
            emit!(out, "{}", serde_json::to_string_pretty(&v).expect("json"));
        }
        Format::Csv => {
            let r = report.ok_or_else(|| CliError::Usage("--format csv needs --S".into()))?;
            emit!(out, "{}", CSV_HEADER.join(","));
            emit!(out, "{}", r.csv_record().join(","));
        }
        Format::Text => {
            emit!(
                out,
                "arch: name={} L={} D={} H={} ffn={} K={}",
                arch.name,
                arch.layers,
                arch.hidden,
                arch.heads,
                arch.ffn,
                arch.prune_layer
            );
            if let Some(r) = report {
                let (b, p) = (&r.baseline, &r.pruned);
                emit!(out, "seq: S={} S_pruned={}", b.cache_len, p.cache_len);
                emit!(
                    out,
                    "prefill_flops: baseline={:.6e} pruned={:.6e} vip={:.6e} ratio={:.4}",
                    b.prefill_flops,
                    p.prefill_flops,
                    arch.vip_flops(b.cache_len),
                    r.prefill_ratio
                );
                emit!(
                    out,
                    "decode_flops_per_token: baseline={:.6e} pruned={:.6e} ratio={:.4}",
                    b.decode_flops_per_token,
                    p.decode_flops_per_token,
                    r.decode_ratio
                );
                emit!(out, "kv_elements: baseline={} pruned={} ratio={:.4}", b.kv_elements, p.kv_elements, r.kv_ratio);
                emit!(out, "kv_bytes: baseline={} pruned={} bytes_per_element={}", r.kv_bytes_baseline, r.kv_bytes_pruned, r.bytes_per_element);
            }
        }
    }
    Ok(())
}

pub fn selftest(a: &SelftestArgs, out: &mut dyn Write) -> CliResult<()> {
    let start = std::time::Instant::now();
    let results = run_all(a.inject_fault);
    let mut failed = Vec::new();
    for r in &results {
        emit!(out, "{} {:<26} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed.push(r.name);
        }
    }
    emit!(
        out,
        "selftest: {}/{} passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(failed.join(", ")))
    }
}

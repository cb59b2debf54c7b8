//! `pointlora` subcommands. Exit codes: 0 success, 2 usage/config, 3 data/IO.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use pointlora_core::data::generate_synthetic_dataset;
use pointlora_core::geometry::PointCloud;
use pointlora_core::model::{audit_parameters, AuditReport, Model};
use pointlora_core::train::{evaluate, Prepared, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::load_dataset;
use crate::metrics::{format_oa, MetricsRecord};
use crate::xyz::load_point_cloud_file;

#[derive(Parser, Debug)]
#[command(name = "pointlora", version, about = "Low-rank point-cloud transformer fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fine-tune PointLoRA on a frozen backbone and write a checkpoint.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `random` or a checkpoint whose backbone tensors are loaded.
        #[arg(long, default_value = "random")]
        backbone: String,
        /// `synthetic` or a manifest CSV.
        #[arg(long, default_value = "synthetic")]
        data: String,
        /// Evaluation manifest when `--data` is a manifest.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print overall accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "synthetic")]
        data: String,
        /// Supplies the synthetic spec and evaluation batch size.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fold every adapter into its base weight.
    Merge {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Report total and tunable parameter counts.
    Audit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        prompt_width: Option<usize>,
        #[arg(long)]
        no_token_selection: bool,
        /// Emit JSON instead of a table.
        #[arg(long)]
        machine: bool,
    },
    /// Dump per-scale mask-predictor scores and the selected centers.
    InspectTokens {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        /// Writes `x y z selected` per generated center.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` and runs; output goes to `out`, diagnostics to stderr.
pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Finetune {
            config,
            backbone,
            data,
            eval_data,
            out: ckpt,
            epochs,
            seed,
            log,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.optim.epochs = e;
                cfg.optim.warmup_epochs = cfg.optim.warmup_epochs.min(e.saturating_sub(1));
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let log = log.or_else(|| cfg.paths.log.clone()).unwrap_or_else(|| {
                let mut p = ckpt.clone().into_os_string();
                p.push(".log");
                p.into()
            });
            cmd_finetune(&cfg, &backbone, &data, eval_data.as_deref(), &ckpt, &log, out)
        }
        Command::Eval { ckpt, data, config } => {
            let cfg = load_config(config.as_deref())?;
            let acc = cmd_eval(&cfg, &ckpt, &data)?;
            writeln!(out, "{}", format_oa(acc)).map_err(stdout_err)
        }
        Command::Merge { input, output } => cmd_merge(&input, &output),
        Command::Audit {
            config,
            rank,
            prompt_width,
            no_token_selection,
            machine,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(r) = rank {
                cfg.model.peft.rank = r;
            }
            if let Some(p) = prompt_width {
                cfg.model.peft.prompt_width = p;
            }
            if no_token_selection {
                cfg.model.peft.token_selection = false;
            }
            let report = cmd_audit(&cfg)?;
            let text = if machine {
                audit_json(&report)
            } else {
                audit_table(&report)
            };
            out.write_all(text.as_bytes()).map_err(stdout_err)
        }
        Command::InspectTokens { ckpt, cloud, out: tagged } => {
            let dump = cmd_inspect_tokens(&ckpt, &cloud, tagged.as_deref())?;
            out.write_all(dump.as_bytes()).map_err(stdout_err)
        }
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Train/eval clouds for `--data`.
fn load_data(cfg: &RunConfig, data: &str, eval_data: Option<&Path>) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
    if data == "synthetic" {
        let split = generate_synthetic_dataset(&cfg.synthetic)?;
        return Ok((split.train, split.test));
    }
    let train = load_dataset(data)?;
    let eval = match eval_data {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    Ok((train, eval))
}

fn check_labels(clouds: &[PointCloud], classes: usize) -> Result<()> {
    match clouds.iter().filter_map(|c| c.label).find(|&l| l >= classes) {
        Some(l) => Err(Error::Schema(format!("label {l} is out of range for a {classes}-class head"))),
        None => Ok(()),
    }
}

pub fn cmd_finetune(
    cfg: &RunConfig,
    backbone: &str,
    data: &str,
    eval_data: Option<&Path>,
    ckpt: &Path,
    log: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let (train, eval) = load_data(cfg, data, eval_data)?;
    check_labels(&train, cfg.model.head.classes)?;
    check_labels(&eval, cfg.model.head.classes)?;
    let mut model = Model::<f32>::random(cfg.model.clone(), cfg.backbone_seed, cfg.seed)?;
    if backbone != "random" {
        let source = load_checkpoint(backbone)?;
        model.load_backbone(&source.store)?;
    }
    let train = Prepared::new(&model, train)?;
    let eval = Prepared::new(&model, eval)?;
    let mut trainer = Trainer::<f32>::new(cfg.optim.clone(), cfg.loss.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let file = File::create(log).map_err(|e| Error::io(log, e))?;
    let mut log_w = BufWriter::new(file);
    for _ in 0..cfg.optim.epochs {
        let m = trainer.train_epoch(&mut model, &train, &mut rng)?;
        let eval_acc = if eval.is_empty() {
            None
        } else {
            Some(evaluate(&model, &eval, cfg.eval_batch())?)
        };
        let rec = MetricsRecord {
            epoch: m.epoch,
            lr: m.lr,
            train_loss: m.loss,
            train_acc: m.accuracy,
            eval_acc,
        };
        writeln!(log_w, "{rec}").map_err(|e| Error::io(log, e))?;
        writeln!(out, "{rec}").map_err(stdout_err)?;
    }
    log_w.flush().map_err(|e| Error::io(log, e))?;
    save_checkpoint(&model, ckpt)
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, data: &str) -> Result<f64> {
    let model = load_checkpoint(ckpt)?;
    let clouds = if data == "synthetic" {
        let mut spec = cfg.synthetic.clone();
        if spec.classes.len() > model.config.head.classes {
            return Err(Error::Schema("synthetic classes exceed the checkpoint head".into()));
        }
        spec.classes.truncate(model.config.head.classes);
        generate_synthetic_dataset(&spec)?.test
    } else {
        load_dataset(data)?
    };
    check_labels(&clouds, model.config.head.classes)?;
    let set = Prepared::new(&model, clouds)?;
    Ok(evaluate(&model, &set, cfg.eval_batch())?)
}

pub fn cmd_merge(input: &Path, output: &Path) -> Result<()> {
    let mut model = load_checkpoint(input)?;
    if !model.has_adapters() {
        return Err(Error::Usage("no adapters found".into()));
    }
    model.merge()?;
    save_checkpoint(&model, output)
}

pub fn cmd_audit(cfg: &RunConfig) -> Result<AuditReport> {
    let model = Model::<f32>::zeroed(cfg.model.clone(), true)?;
    Ok(audit_parameters(&model))
}

pub fn audit_table(r: &AuditReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "total: {}", r.total);
    let _ = writeln!(s, "tunable: {}", r.tunable);
    let _ = writeln!(s, "ratio: {:.4}%", r.ratio * 100.0);
    let _ = writeln!(s, "{:<18} {:>12} {:>12}", "component", "total", "tunable");
    for row in &r.rows {
        let _ = writeln!(s, "{:<18} {:>12} {:>12}", row.group.name(), row.total, row.tunable);
    }
    s
}

#[derive(Serialize)]
struct AuditJson<'a> {
    total: usize,
    tunable: usize,
    ratio: f64,
    components: Vec<ComponentJson<'a>>,
}

#[derive(Serialize)]
struct ComponentJson<'a> {
    name: &'a str,
    total: usize,
    tunable: usize,
}

pub fn audit_json(r: &AuditReport) -> String {
    let j = AuditJson {
        total: r.total,
        tunable: r.tunable,
        ratio: r.ratio,
        components: r
            .rows
            .iter()
            .map(|row| ComponentJson {
                name: row.group.name(),
                total: row.total,
                tunable: row.tunable,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&j).expect("plain data");
    s.push('\n');
    s
}

/// Text dump: per scale a header line, then `x y z score selected` per
/// generated center.
pub fn cmd_inspect_tokens(ckpt: &Path, cloud: &Path, tagged: Option<&Path>) -> Result<String> {
    let model = load_checkpoint(ckpt)?;
    let cloud = load_point_cloud_file(cloud)?;
    let prepared = model.prepare(&cloud)?;
    let sel = model
        .selection(&prepared)?
        .ok_or_else(|| Error::Usage("checkpoint has token selection disabled".into()))?;
    let mut dump = String::new();
    let mut tags = String::new();
    let mut total = 0;
    for (m, (spec, scale)) in model.config.peft.multiscale.scales.iter().zip(&prepared.scales).enumerate() {
        let chosen = &sel.chosen[m];
        total += chosen.len();
        let _ = writeln!(
            dump,
            "scale {m} groups={} group_size={} selected={}",
            spec.groups,
            spec.group_size,
            chosen.len()
        );
        let _ = writeln!(tags, "# scale {m}");
        for (i, (c, s)) in scale.centers.iter().zip(&sel.scores[m]).enumerate() {
            let flag = u8::from(chosen.contains(&i));
            let _ = writeln!(dump, "{} {} {} {} {}", c[0], c[1], c[2], s, flag);
            let _ = writeln!(tags, "{} {} {} {}", c[0], c[1], c[2], flag);
        }
    }
    let _ = writeln!(dump, "total_selected={total}");
    if let Some(p) = tagged {
        std::fs::write(p, tags).map_err(|e| Error::io(p, e))?;
    }
    Ok(dump)
}

//! Command-line entry points.
//!
//! Exit codes: 0 success, 2 validation, 3 numerical failure, 4 IO.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{
    cluster_tasks, export_snapshot, normalize_rows, task_skill_usage, ExportFormat, SnapshotFile,
};
use crate::autodiff::Fault;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::layer::Router;
use crate::model::param_gap;
use crate::skill_router::{eval_allocation, hard_allocation};
use crate::train::harness::{train_run, TaskEval};
use crate::train::suite::generate_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Largest relative gap in trainable parameters `compare` accepts.
pub const PARAM_MATCH_TOLERANCE: f64 = 0.02;

#[derive(Debug, Parser)]
#[command(name = "orchmoe", version, about = "Train, check, compare and analyze routed LoRA skill banks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write report, checkpoint and snapshots.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Snapshot file format.
        #[arg(long, default_value = "json")]
        format: ExportFormat,
    },
    /// Run every registered finite-difference gradient check.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train several configurations on one suite and tabulate their eval losses.
    Compare {
        #[arg(long, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export allocation matrices and task dendrograms from a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "json")]
        format: ExportFormat,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Dimension { .. } | Error::Contract(_) | Error::Lookup { .. } | Error::Config(_) => EXIT_VALIDATION,
        Error::Evaluation(_) | Error::Divergence { .. } | Error::DegenerateRow(_) => EXIT_NUMERICAL,
        Error::Format { .. } | Error::Io { .. } => EXIT_IO,
    }
}

/// Parses `args` and runs the command, writing human output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train { config, out: dir, seed, format } => cmd_train(&config, dir.as_deref(), seed, format, out),
        Command::Gradcheck { inject_fault } => cmd_gradcheck(inject_fault.as_deref(), out),
        Command::Compare { config, out: dir, seed } => cmd_compare(&config, dir.as_deref(), seed, out),
        Command::Analyze { checkpoint, out: dir, format } => cmd_analyze(&checkpoint, &dir, format, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn say(out: &mut dyn Write, line: &str) {
    let _ = writeln!(out, "{line}");
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut c = RunConfig::load(path)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

pub fn cmd_train(
    config_path: &Path,
    dir: Option<&Path>,
    seed: Option<u64>,
    format: ExportFormat,
    out: &mut dyn Write,
) -> Result<i32> {
    let config = load_config(config_path, seed)?;
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&config.out_dir));
    let outcome = train_run(&config)?;
    let report = &outcome.report;

    create_dir(&dir)?;
    write_file(&dir.join("report.json"), report.to_json())?;
    Checkpoint::from_model(&config, &outcome.model, report.total_steps).save(&dir.join("checkpoint.bin"))?;
    let snaps = dir.join("snapshots");
    create_dir(&snaps)?;
    for s in &report.snapshots {
        let name = format!("layer{}_step{:06}.{}", s.layer, s.step, format.extension());
        export_snapshot(&s.file(), &snaps.join(name), format)?;
    }
    say(
        out,
        &format!(
            "{} trained {} steps, {} trainable params, mean eval mse {:.6e}",
            config.architecture, report.total_steps, report.trainable_params, report.mean_eval_loss
        ),
    );
    say(out, &format!("wrote {}", dir.display()));
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(fault: Option<&str>, out: &mut dyn Write) -> Result<i32> {
    let fault = match fault {
        None => None,
        Some("sigmoid-backward-sign") => Some(Fault::SigmoidBackwardSign),
        Some(other) => return Err(Error::Config(format!("unknown fault {other}"))),
    };
    let results = gradcheck::run_all(fault)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let verdict = if r.passed { "ok" } else { "FAIL" };
        say(out, &format!("{:<width$}  max_rel_err {:.3e}  {verdict}", r.name, r.max_rel_err));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    say(out, &format!("{} checks, {failed} failed, tolerance {:e}", results.len(), gradcheck::TOLERANCE));
    Ok(if failed == 0 { EXIT_OK } else { EXIT_NUMERICAL })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub config: String,
    pub architecture: String,
    pub trainable_params: usize,
    pub eval: Vec<TaskEval>,
    pub mean_eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub suite_checksum: u64,
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    pub fn table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.config.len()).max().unwrap_or(6).max(6);
        let arch_w = self.rows.iter().map(|r| r.architecture.len()).max().unwrap_or(4).max(12);
        let mut s = format!("{:<name_w$}  {:<arch_w$}  {:>8}  {:>13}", "config", "architecture", "params", "mean_eval_mse");
        if let Some(first) = self.rows.first() {
            for e in &first.eval {
                let _ = write!(s, "  {:>11}", format!("task_{}", e.task));
            }
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{:<name_w$}  {:<arch_w$}  {:>8}  {:>13.6e}",
                r.config, r.architecture, r.trainable_params, r.mean_eval_loss
            );
            for e in &r.eval {
                let _ = write!(s, "  {:>11.4e}", e.loss);
            }
            s.push('\n');
        }
        s
    }
}

/// Validates that `configs` share a suite and matched parameter counts, then trains each.
pub fn compare_configs(configs: &[(String, RunConfig)]) -> Result<Comparison> {
    let (_, first) = configs
        .first()
        .ok_or_else(|| Error::contract("compare needs at least one config"))?;
    let reference = first.model_spec().trainable_param_count();
    for (name, c) in configs {
        c.validate()?;
        if !c.same_suite(first) {
            return Err(Error::contract(format!(
                "{name} describes a different suite (suite, model dims and seed must match)"
            )));
        }
        let count = c.model_spec().trainable_param_count();
        let gap = param_gap(count, reference);
        if gap > PARAM_MATCH_TOLERANCE {
            return Err(Error::contract(format!(
                "{name} has {count} trainable params, {:.1}% away from {reference}; limit is {:.0}%",
                gap * 100.0,
                PARAM_MATCH_TOLERANCE * 100.0
            )));
        }
    }
    let mut rows = Vec::with_capacity(configs.len());
    let mut checksum = 0;
    for (name, c) in configs {
        let o = train_run(c)?;
        checksum = o.report.suite_checksum;
        rows.push(CompareRow {
            config: name.clone(),
            architecture: c.architecture.to_string(),
            trainable_params: o.report.trainable_params,
            eval: o.report.final_eval.clone(),
            mean_eval_loss: o.report.mean_eval_loss,
        });
    }
    Ok(Comparison {
        suite_checksum: checksum,
        rows,
    })
}

pub fn cmd_compare(paths: &[PathBuf], dir: Option<&Path>, seed: Option<u64>, out: &mut dyn Write) -> Result<i32> {
    if paths.len() < 2 {
        return Err(Error::Config("compare needs at least two --config paths".into()));
    }
    let configs = paths
        .iter()
        .map(|p| Ok((p.display().to_string(), load_config(p, seed)?)))
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare_configs(&configs)?;
    let table = cmp.table();
    let _ = out.write_all(table.as_bytes());
    if let Some(dir) = dir {
        create_dir(dir)?;
        write_file(&dir.join("compare.json"), serde_json::to_string_pretty(&cmp).expect("comparison serializes"))?;
        write_file(&dir.join("compare.txt"), &table)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_analyze(checkpoint: &Path, dir: &Path, format: ExportFormat, out: &mut dyn Write) -> Result<i32> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model()?;
    create_dir(dir)?;
    let ext = format.extension();

    let mut abstract_mats = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let Router::Orch { skill, .. } = &layer.router else {
            continue;
        };
        let soft = eval_allocation(skill);
        let normalized = normalize_rows(&soft)?;
        let file = |m: &crate::autodiff::Tensor| SnapshotFile {
            layer: l,
            step: ck.step as usize,
            matrix: m.data().to_vec(),
            tasks: skill.tasks(),
            skills: skill.skills(),
        };
        export_snapshot(&file(&normalized), &dir.join(format!("allocation_layer{l}.{ext}")), format)?;
        export_snapshot(&file(&hard_allocation(skill)), &dir.join(format!("hard_allocation_layer{l}.{ext}")), format)?;
        abstract_mats.push(soft);
    }
    if !abstract_mats.is_empty() {
        let d = cluster_tasks(&abstract_mats)?;
        write_file(&dir.join("dendrogram.json"), d.to_json())?;
        say(out, &format!("abstract tasks: {} leaves, clusters {:?}", d.leaves, d.cut_largest_gap()));
    }

    let suite = generate_suite(ck.config.suite_params())?;
    let usage = task_skill_usage(&model, &suite)?;
    let d = cluster_tasks(&usage)?;
    write_file(&dir.join("task_dendrogram.json"), d.to_json())?;
    say(out, &format!("real tasks: clusters {:?}", d.cut_largest_gap()));
    say(out, &format!("wrote {}", dir.display()));
    Ok(EXIT_OK)
}

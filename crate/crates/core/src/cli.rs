//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{load_config, RunConfig};
use crate::datagen::{
    apply_category_shift, generate_synthetic, load_dataset, missing_rate, random_assignment, save_dataset,
    DatasetManifest, Split,
};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::experiment::{run_cell, summarize_reports};
use crate::gradcheck;
use crate::training::{format_log, train_model};

#[derive(Debug, Parser)]
#[command(name = "mtcs", version, about = "Association-graph multi-task classification under category shifts")]
pub struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-task dataset.
    Generate,
    /// Restrict each task's training classes.
    Split(SplitArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a toy problem.
    Gradcheck,
    /// Multi-seed runs over the cross product of varied settings.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset to shift; defaults to the config's `dataset`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, conflicts_with = "assignment")]
    pub missing_rate: Option<f64>,
    /// One line per task listing observed class ids or names.
    #[arg(long)]
    pub assignment: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Per-iteration loss log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// `key=v1,v2,...`; repeat for a cross product.
    #[arg(long)]
    pub vary: Vec<String>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("no {what} path given")))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Reads an assignment file: line `t` lists task `t`'s observed classes by
/// id or name, separated by spaces or commas. `#` starts a comment.
pub fn parse_assignment(text: &str, manifest: &DatasetManifest, path: &Path) -> Result<Vec<Vec<usize>>> {
    let mut sets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut set = Vec::new();
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()) {
            let id = match manifest.class_names.iter().position(|n| n == tok) {
                Some(id) => id,
                None => tok
                    .parse()
                    .map_err(|_| Error::parse(path, i + 1, format!("unknown class `{tok}`")))?,
            };
            set.push(id);
        }
        set.sort_unstable();
        set.dedup();
        sets.push(set);
    }
    Ok(sets)
}

fn cmd_generate(config: &RunConfig, out: Option<PathBuf>) -> Result<String> {
    let out = required(out.or_else(|| config.dataset.clone()), "output")?;
    let ds = generate_synthetic(&config.synth)?;
    save_dataset(&out, &ds)?;
    let pairs = config.synth.num_tasks * config.synth.num_classes;
    Ok(format!(
        "wrote {} records ({pairs} task-class pairs) to {}\n",
        ds.records.len(),
        out.display()
    ))
}

fn cmd_split(config: &RunConfig, args: SplitArgs, out: Option<PathBuf>) -> Result<String> {
    let input = required(args.input.or_else(|| config.dataset.clone()), "input dataset")?;
    let out = required(out, "output")?;
    let ds = load_dataset(&input)?;
    let m = &ds.manifest;
    let assignment = match (&args.assignment, args.missing_rate) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_assignment(&text, m, path)?
        }
        (None, rate) => random_assignment(
            m.num_tasks,
            m.num_classes,
            rate.unwrap_or(config.missing_rate),
            config.synth.seed,
        )?,
    };
    let shifted = apply_category_shift(&ds, &assignment)?;
    save_dataset(&out, &shifted)?;
    let train = shifted.records.iter().filter(|r| r.split == Split::Train).count();
    Ok(format!(
        "gamma = {}\nwrote {} records ({train} train) to {}\n",
        missing_rate(&shifted.manifest),
        shifted.records.len(),
        out.display()
    ))
}

fn cmd_train(config: &RunConfig, args: TrainArgs, out: Option<PathBuf>) -> Result<String> {
    let data = required(args.data.or_else(|| config.dataset.clone()), "dataset")?;
    let out = required(out.or_else(|| config.checkpoint.clone()), "checkpoint")?;
    let ds = load_dataset(&data)?;
    let (model, log) = train_model(&ds, &config.train)?;
    save_checkpoint(&out, &model)?;
    if let Some(path) = args.log.or_else(|| config.log.clone()) {
        std::fs::write(&path, format_log(&log)).map_err(|e| Error::io(&path, e))?;
    }
    let mut msg = format!("trained {} model for {} iterations\n", model.spec.kind, log.len());
    if let Some(last) = log.last() {
        let _ = writeln!(msg, "final\t{last}");
    }
    let _ = writeln!(msg, "checkpoint written to {}", out.display());
    Ok(msg)
}

fn cmd_eval(config: &RunConfig, args: EvalArgs, out: Option<PathBuf>) -> Result<String> {
    let ckpt = required(args.checkpoint.or_else(|| config.checkpoint.clone()), "checkpoint")?;
    let data = required(args.data.or_else(|| config.dataset.clone()), "dataset")?;
    let model = load_checkpoint(&ckpt)?;
    let ds = load_dataset(&data)?;
    let report = evaluate(&model, &ds.manifest, &ds.records)?;
    let text = report.to_text();
    match out.or_else(|| config.report.clone()) {
        Some(p) => {
            write_or_print(Some(&p), &text)?;
            Ok(format!("{}\n", report.summary_line()))
        }
        None => Ok(text),
    }
}

fn cmd_gradcheck(config: &RunConfig, seed: Option<u64>) -> Result<(String, bool)> {
    let mut problem = gradcheck::toy_problem(seed.unwrap_or(0))?;
    problem.config.beta = config.train.beta;
    let r = gradcheck::check(&problem)?;
    let verdict = if r.passed() { "PASS" } else { "FAIL" };
    Ok((
        format!(
            "parameters checked = {}\nmax relative error = {:.3e} (at {})\n{verdict}\n",
            r.checked, r.max_rel_error, r.worst
        ),
        r.passed(),
    ))
}

/// Expands `--vary` arguments into the cross product of assignments.
pub fn expand_vary(vary: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut cells = vec![Vec::new()];
    for spec in vary {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--vary expects key=v1,v2,..., got `{spec}`")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("--vary `{key}` lists no values")));
        }
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((key.trim().to_owned(), (*v).to_owned()));
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

fn cmd_sweep(config: &RunConfig, args: SweepArgs, out: Option<PathBuf>) -> Result<String> {
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let cells = expand_vary(&args.vary)?;
    let mut configs = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut c = config.clone();
        for (k, v) in cell {
            c.set(k, v)?;
        }
        c.validate()?;
        configs.push(c);
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| (0..args.seeds).map(move |s| (i, s)))
        .collect();
    let workers = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<Result<_>>> = (0..jobs.len()).map(|_| None).collect();
    let finished: Vec<Vec<(usize, Result<_>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let j = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(&(cell, seed)) = jobs.get(j) else { break };
                        done.push((j, run_cell(&configs[cell], seed)));
                    }
                    done
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    for (j, r) in finished.into_iter().flatten() {
        results[j] = Some(r);
    }

    let keys: Vec<&str> = cells.first().map_or(Vec::new(), |c| c.iter().map(|(k, _)| k.as_str()).collect());
    let mut table = String::new();
    let mut header: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
    header.push("seeds".into());
    for m in ["A_m", "A_o", "H", "avg_assignment_entropy"] {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    table.push_str(&header.join("\t"));
    table.push('\n');
    let per_cell = args.seeds as usize;
    let mut results = results.into_iter().map(|r| r.expect("every job ran"));
    for cell in &cells {
        let reports = results.by_ref().take(per_cell).collect::<Result<Vec<_>>>()?;
        let s = summarize_reports(&reports);
        let mut row: Vec<String> = cell.iter().map(|(_, v)| v.clone()).collect();
        row.push(per_cell.to_string());
        for stat in [s.a_m, s.a_o, s.h, s.entropy] {
            match stat {
                Some((mean, sd)) => {
                    row.push(format!("{mean:.4}"));
                    row.push(format!("{sd:.4}"));
                }
                None => row.extend(["-".to_owned(), "-".to_owned()]),
            }
        }
        table.push_str(&row.join("\t"));
        table.push('\n');
    }
    match out {
        Some(p) => {
            write_or_print(Some(&p), &table)?;
            Ok(format!("wrote {} rows to {}\n", cells.len(), p.display()))
        }
        None => Ok(table),
    }
}

/// Runs a parsed command; returns the text for stdout and the process exit code.
pub fn run(cli: Cli) -> Result<(String, i32)> {
    let mut config = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    let out = cli.out;
    let text = match cli.command {
        Command::Generate => cmd_generate(&config, out)?,
        Command::Split(a) => cmd_split(&config, a, out)?,
        Command::Train(a) => cmd_train(&config, a, out)?,
        Command::Eval(a) => cmd_eval(&config, a, out)?,
        Command::Gradcheck => {
            let (text, ok) = cmd_gradcheck(&config, cli.seed)?;
            if let Some(p) = &out {
                write_or_print(Some(p), &text)?;
            }
            return Ok((text, if ok { 0 } else { 3 }));
        }
        Command::Sweep(a) => cmd_sweep(&config, a, out)?,
    };
    Ok((text, 0))
}

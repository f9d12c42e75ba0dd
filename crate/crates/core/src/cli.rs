//! Command-line front end: `prepare | train | evaluate | grid | curves`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{AuxFile, ExperimentConfig, KEYS_HELP};
use crate::data::{k_core_filter, load_aux_edges, load_categories, load_interactions, split, Dataset, EvalSplit};
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::evaluate_users;
use crate::trainer::{build_encoder, fit, grid_search};

#[derive(Debug, Parser)]
#[command(name = "pmtrec", version, about = "Multi-task embedding training with per-row gradient pooling", after_help = KEYS_HELP)]
pub struct Cli {
    /// Experiment config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Grid points trained concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, k-core filter and split the raw data; write dataset.bin and stats.txt.
    #[command(after_help = KEYS_HELP)]
    Prepare,
    /// Train with early stopping; write checkpoint.bin and train_log.csv.
    #[command(after_help = KEYS_HELP)]
    Train,
    /// Score a checkpoint; write metrics_<split>.csv.
    #[command(after_help = KEYS_HELP)]
    Evaluate {
        /// Checkpoint to score [<output.dir>/checkpoint.bin].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// val | test
        #[arg(long, default_value = "test")]
        split: EvalSplit,
        /// Cutoffs, overriding eval.ks.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Fit every grid point; write grid_results.csv.
    #[command(after_help = KEYS_HELP)]
    Grid,
    /// Merge train logs into one wide per-epoch CSV.
    #[command(after_help = KEYS_HELP)]
    Curves {
        /// train_log.csv files, one per run.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Output file [<output.dir>/curves.csv, or stdout without --config].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    ExperimentConfig::load(path, &cli.set, cli.seed)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs load, k-core filtering and splitting, then attaches auxiliary edge sets.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg
        .data
        .path
        .as_deref()
        .ok_or_else(|| Error::Config("data.path is required to prepare a dataset".into()))?;
    if !path.exists() {
        return Err(Error::Config(format!("interaction file {} does not exist", path.display())));
    }
    for (_, file) in cfg.referenced_aux() {
        if !file.path().exists() {
            return Err(Error::Config(format!("auxiliary file {} does not exist", file.path().display())));
        }
    }
    let raw = load_interactions(path, cfg.data.format)?;
    let filtered = k_core_filter(&raw, cfg.data.k_core)?;
    let mut ds = split(&filtered, cfg.data.split, cfg.seed)?;
    for (name, file) in cfg.referenced_aux() {
        let set = match file {
            AuxFile::Edges(p) => load_aux_edges(p, &ds.user_vocab, &ds.item_vocab)?,
            AuxFile::Categories(p) => load_categories(p, &ds.item_vocab, cfg.data.category_cap, cfg.seed)?,
        };
        ds.add_aux(name, set);
    }
    Ok(ds)
}

/// The prepared bundle if one exists, otherwise a freshly prepared dataset.
fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let bundle = cfg.bundle_path();
    if bundle.exists() {
        Dataset::load(&bundle)
    } else {
        prepare_dataset(cfg)
    }
}

fn cmd_prepare(cfg: &ExperimentConfig) -> Result<()> {
    let ds = prepare_dataset(cfg)?;
    let bundle = cfg.bundle_path();
    if let Some(dir) = bundle.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ds.save(&bundle)?;
    write(&cfg.output_dir.join("stats.txt"), ds.stats())?;
    log::info!("wrote {}", bundle.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let ds = dataset(cfg)?;
    let res = fit(&ds, &cfg.tasks, &cfg.train)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    res.best.save(&out.join("checkpoint.bin"))?;
    write(&out.join("train_log.csv"), res.log.to_csv())?;
    write(&out.join("timing.csv"), res.log.timing_csv())?;
    if cfg.train.diagnostics {
        write(&out.join("diagnostics.csv"), res.log.diagnostics_csv())?;
    }
    log::info!(
        "best epoch {} with val recall@{} {:.5}",
        res.best_epoch,
        cfg.train.early_stop_k,
        res.best_metric
    );
    Ok(())
}

fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: Option<&Path>, split: EvalSplit, ks: Option<&[usize]>) -> Result<()> {
    let ds = dataset(cfg)?;
    let default_ckpt = cfg.output_dir.join("checkpoint.bin");
    let table = EmbeddingTable::load(checkpoint.unwrap_or(&default_ckpt))?;
    let encoded = build_encoder(&ds, cfg.train.encoder, cfg.train.layers)
        .encode(&table)
        .into_owned();
    let ks = ks.unwrap_or(&cfg.train.ks);
    let report = evaluate_users(&encoded, &ds, &ds.train_index(), split, ks, None)?;
    write(
        &cfg.output_dir.join(format!("metrics_{}.csv", split.as_str())),
        report.to_csv(split),
    )
}

fn cmd_grid(cfg: &ExperimentConfig, jobs: usize) -> Result<()> {
    let ds = dataset(cfg)?;
    let report = grid_search(&ds, &cfg.tasks, &cfg.train, &cfg.grid, jobs)?;
    write(&cfg.output_dir.join("grid_results.csv"), report.to_csv())
}

/// Joins `epoch,field,value` logs into `run,epoch,<field>...` rows, one per
/// (run, epoch). Fields a run lacks are left empty.
pub fn merge_curves(runs: &[(String, String)]) -> Result<String> {
    let mut fields = BTreeSet::new();
    let mut rows: Vec<(String, u32, BTreeMap<String, String>)> = Vec::new();
    for (run, text) in runs {
        let mut by_epoch: BTreeMap<u32, BTreeMap<String, String>> = BTreeMap::new();
        let mut lines = text.lines();
        if lines.next() != Some("epoch,field,value") {
            return Err(Error::Format(format!("{run}: not a train log")));
        }
        for line in lines.filter(|l| !l.is_empty()) {
            let mut parts = line.splitn(3, ',');
            let (Some(e), Some(f), Some(v)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!("{run}: malformed line `{line}`")));
            };
            let epoch: u32 = e
                .parse()
                .map_err(|_| Error::Format(format!("{run}: bad epoch `{e}`")))?;
            fields.insert(f.to_string());
            by_epoch.entry(epoch).or_default().insert(f.to_string(), v.to_string());
        }
        rows.extend(by_epoch.into_iter().map(|(e, m)| (run.clone(), e, m)));
    }
    let mut s = String::from("run,epoch");
    for f in &fields {
        s.push(',');
        s.push_str(f);
    }
    s.push('\n');
    for (run, epoch, values) in rows {
        s.push_str(&format!("{run},{epoch}"));
        for f in &fields {
            s.push(',');
            if let Some(v) = values.get(f) {
                s.push_str(v);
            }
        }
        s.push('\n');
    }
    Ok(s)
}

fn cmd_curves(cli: &Cli, logs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let runs = logs
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok((p.display().to_string().replace(',', "_"), text))
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_curves(&runs)?;
    let target = match (out, &cli.config) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(_)) => Some(load_config(cli)?.output_dir.join("curves.csv")),
        (None, None) => None,
    };
    match target {
        Some(p) => write(&p, merged),
        None => {
            print!("{merged}");
            Ok(())
        }
    }
}

/// Executes a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, in which case that pool is used.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Prepare => cmd_prepare(&load_config(cli)?),
        Command::Train => cmd_train(&load_config(cli)?),
        Command::Evaluate { checkpoint, split, ks } => {
            cmd_evaluate(&load_config(cli)?, checkpoint.as_deref(), *split, ks.as_deref())
        }
        Command::Grid => cmd_grid(&load_config(cli)?, cli.jobs),
        Command::Curves { logs, out } => cmd_curves(cli, logs, out.as_deref()),
    }
}

//! Experiment configuration: `key = value` lines with `#` comments and dotted keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::combiner::CombinerKind;
use crate::data::{Format, SplitRatios};
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::tasks::{TaskKind, TaskSpec, TRAIN_SOURCE};
use crate::trainer::{grid_range, Grid, TrainConfig};

/// Recognized keys, shown by `--help`. `<name>` is any identifier.
pub const KEYS_HELP: &str = "\
Config keys (`key = value`, `#` comments; override with --set key=value):
  seed                      run seed (required)
  output.dir                output directory [out]
  data.path                 raw interaction file
  data.format               tsv | csv [tsv]
  data.k_core               k-core threshold [5]
  data.split                train,val,test fractions [0.6,0.2,0.2]
  data.aux.<name>           auxiliary edge file (first line `#side=user-user|item-item|user-item`)
  data.category.<name>      item category file (`item<TAB>category`)
  data.category_cap         sampled category partners per item [50]
  data.bundle               prepared dataset path [<output.dir>/dataset.bin]
  task.<name>.kind          bpr-main | link-bpr | alignment | uniformity | alignment-uniformity | rating-mse
  task.<name>.source        `train` or a data.aux / data.category name [train]
  task.<name>.main          true | false [true for bpr-main]
  task.<name>.weight        loss scale [1]
  encoder.kind              mf | lightgcn [mf]
  encoder.layers            propagation layers for lightgcn [3]
  combiner.kind             pmtrec | ew | rlw | pcgrad | graddrop [pmtrec]
  combiner.alpha            task-focusing base, >= 1 [1]
  combiner.tau              balancing temperature, > 0 [1]
  combiner.diagnostics      write per-row norms and weights for each epoch's first batch [false]
  train.optimizer           adam | sgd [adam]
  train.lr                  learning rate [0.001]
  train.weight_decay        L2 coefficient on touched rows [0]
  train.batch_size          main-task batch size [2048]
  train.aux_batch_size      auxiliary batch size [train.batch_size]
  train.uniformity_batch    rows per side for uniformity losses [256]
  train.epochs              epoch cap [500]
  train.patience            early-stopping patience [10]
  train.dim                 embedding dimension [32]
  eval.ks                   cutoffs [5,10,20,40]
  eval.early_stop_k         validation Recall@K used for early stopping [20]
  grid.lr, grid.weight_decay, grid.alpha, grid.tau
                            comma list or start:stop:step range
";

/// Where an auxiliary edge set comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxFile {
    Edges(PathBuf),
    Categories(PathBuf),
}

impl AuxFile {
    pub fn path(&self) -> &Path {
        match self {
            AuxFile::Edges(p) | AuxFile::Categories(p) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub format: Format,
    pub k_core: usize,
    pub split: SplitRatios,
    pub aux: BTreeMap<String, AuxFile>,
    pub category_cap: usize,
    pub bundle: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub tasks: Vec<TaskSpec>,
    pub train: TrainConfig,
    pub grid: Grid,
}

/// Parses `key = value` lines. Later assignments win.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(p) => &line[..p],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn is_known(key: &str) -> bool {
    const FIXED: &[&str] = &[
        "seed",
        "output.dir",
        "data.path",
        "data.format",
        "data.k_core",
        "data.split",
        "data.category_cap",
        "data.bundle",
        "encoder.kind",
        "encoder.layers",
        "combiner.kind",
        "combiner.alpha",
        "combiner.tau",
        "combiner.diagnostics",
        "train.optimizer",
        "train.lr",
        "train.weight_decay",
        "train.batch_size",
        "train.aux_batch_size",
        "train.uniformity_batch",
        "train.epochs",
        "train.patience",
        "train.dim",
        "eval.ks",
        "eval.early_stop_k",
        "grid.lr",
        "grid.weight_decay",
        "grid.alpha",
        "grid.tau",
    ];
    if FIXED.contains(&key) {
        return true;
    }
    if let Some(name) = key.strip_prefix("data.aux.").or_else(|| key.strip_prefix("data.category.")) {
        return is_name(name);
    }
    if let Some(rest) = key.strip_prefix("task.") {
        if let Some((name, field)) = rest.rsplit_once('.') {
            return is_name(name) && ["kind", "source", "main", "weight"].contains(&field);
        }
    }
    false
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for {key}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

/// A comma list, or an inclusive `start:stop:step` range.
fn parse_axis(key: &str, v: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = v.split(':').collect();
    if parts.len() == 3 {
        return grid_range(parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?);
    }
    parse_list(key, v)
}

impl ExperimentConfig {
    /// Reads a config file and applies `overrides` (`key=value`). Relative paths
    /// resolve against the config file's directory.
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, base, overrides, seed)
    }

    pub fn from_text(text: &str, base: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Some(s) = seed {
            pairs.insert("seed".into(), s.to_string());
        }
        Self::from_pairs(&pairs, base)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let unknown: Vec<String> = pairs.keys().filter(|k| !is_known(k)).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let seed = pairs
            .get("seed")
            .ok_or_else(|| Error::Config("`seed` is required".into()))
            .and_then(|v| parse("seed", v))?;

        let mut data = DataConfig {
            path: None,
            format: Format::Tsv,
            k_core: 5,
            split: SplitRatios::default(),
            aux: BTreeMap::new(),
            category_cap: 50,
            bundle: None,
        };
        let mut train = TrainConfig {
            seed,
            ..Default::default()
        };
        let mut grid = Grid::default();
        let mut output_dir = resolve("out");
        let mut tasks: BTreeMap<String, BTreeMap<&str, &str>> = BTreeMap::new();

        for (key, v) in pairs {
            let v = v.as_str();
            match key.as_str() {
                "seed" => {}
                "output.dir" => output_dir = resolve(v),
                "data.path" => data.path = Some(resolve(v)),
                "data.format" => data.format = v.parse()?,
                "data.k_core" => data.k_core = parse(key, v)?,
                "data.split" => {
                    let r: Vec<f64> = parse_list(key, v)?;
                    if r.len() != 3 {
                        return Err(Error::Config("data.split needs three fractions".into()));
                    }
                    data.split = SplitRatios::new(r[0], r[1], r[2])?;
                }
                "data.category_cap" => data.category_cap = parse(key, v)?,
                "data.bundle" => data.bundle = Some(resolve(v)),
                "encoder.kind" => train.encoder = v.parse()?,
                "encoder.layers" => train.layers = parse(key, v)?,
                "combiner.kind" => train.combiner.kind = v.parse::<CombinerKind>()?,
                "combiner.alpha" => train.combiner.alpha = parse(key, v)?,
                "combiner.tau" => train.combiner.tau = parse(key, v)?,
                "combiner.diagnostics" => train.diagnostics = parse_bool(key, v)?,
                "train.optimizer" => train.optimizer.kind = v.parse::<OptimizerKind>()?,
                "train.lr" => train.optimizer.lr = parse(key, v)?,
                "train.weight_decay" => train.optimizer.weight_decay = parse(key, v)?,
                "train.batch_size" => train.batch_size = parse(key, v)?,
                "train.aux_batch_size" => train.aux_batch_size = Some(parse(key, v)?),
                "train.uniformity_batch" => train.uniformity_side = parse(key, v)?,
                "train.epochs" => train.max_epochs = parse(key, v)?,
                "train.patience" => train.patience = parse(key, v)?,
                "train.dim" => train.dim = parse(key, v)?,
                "eval.ks" => train.ks = parse_list(key, v)?,
                "eval.early_stop_k" => train.early_stop_k = parse(key, v)?,
                "grid.lr" => grid.lr = parse_axis(key, v)?,
                "grid.weight_decay" => grid.weight_decay = parse_axis(key, v)?,
                "grid.alpha" => grid.alpha = parse_axis(key, v)?,
                "grid.tau" => grid.tau = parse_axis(key, v)?,
                k => {
                    if let Some(name) = k.strip_prefix("data.aux.") {
                        data.aux.insert(name.to_string(), AuxFile::Edges(resolve(v)));
                    } else if let Some(name) = k.strip_prefix("data.category.") {
                        data.aux.insert(name.to_string(), AuxFile::Categories(resolve(v)));
                    } else if let Some((name, field)) = k.strip_prefix("task.").and_then(|r| r.rsplit_once('.')) {
                        tasks.entry(name.to_string()).or_default().insert(field, v);
                    }
                }
            }
        }

        let tasks = if tasks.is_empty() {
            vec![TaskSpec::main_bpr()]
        } else {
            tasks
                .into_iter()
                .map(|(name, fields)| {
                    let kind: TaskKind = fields
                        .get("kind")
                        .ok_or_else(|| Error::Config(format!("task.{name}.kind is required")))?
                        .parse()?;
                    let source = fields.get("source").copied().unwrap_or(TRAIN_SOURCE).to_string();
                    if source != TRAIN_SOURCE && !data.aux.contains_key(&source) {
                        return Err(Error::Config(format!(
                            "task {name} reads `{source}`, which no data.aux or data.category key defines"
                        )));
                    }
                    let is_main = match fields.get("main") {
                        Some(v) => parse_bool(&format!("task.{name}.main"), v)?,
                        None => kind == TaskKind::BprMain,
                    };
                    let weight = match fields.get("weight") {
                        Some(v) => parse(&format!("task.{name}.weight"), v)?,
                        None => 1.0,
                    };
                    Ok(TaskSpec {
                        task_id: name,
                        kind,
                        source,
                        is_main,
                        weight,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        crate::tasks::validate_specs(&tasks)?;
        train.validate()?;

        Ok(ExperimentConfig {
            seed,
            output_dir,
            data,
            tasks,
            train,
            grid,
        })
    }

    pub fn bundle_path(&self) -> PathBuf {
        self.data
            .bundle
            .clone()
            .unwrap_or_else(|| self.output_dir.join("dataset.bin"))
    }

    /// Auxiliary files that some task actually reads.
    pub fn referenced_aux(&self) -> Vec<(&str, &AuxFile)> {
        self.data
            .aux
            .iter()
            .filter(|(name, _)| self.tasks.iter().any(|t| &t.source == *name))
            .map(|(n, f)| (n.as_str(), f))
            .collect()
    }
}

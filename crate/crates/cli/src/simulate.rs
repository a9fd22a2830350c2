use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use slotdisc::classifier::WeakMode;
use slotdisc::corpus::load_dataset;
use slotdisc::metrics::{plot_data_csv, CurvePoint};
use slotdisc::{ActiveLearner, Corpus, LearnerConfig, OracleAnnotator, SlotCatalog, Strategy};

use crate::manifest::RunManifest;
use crate::{require_file, usage};

/// Learner settings shared by `simulate` and `serve`. Flags override the
/// TOML config file, which overrides the defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct LearnerArgs {
    /// TOML file with learner settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// no_weak, multitask or pretrain.
    #[arg(long)]
    pub mode: Option<WeakMode>,
    #[arg(long)]
    pub batch_fraction: Option<f64>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    /// Labeled-fraction budget; `none` disables it.
    #[arg(long)]
    pub budget: Option<String>,
    /// Iterations without validation improvement before stopping; `none` disables it.
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub initial_epochs: Option<usize>,
    #[arg(long)]
    pub epochs_per_iteration: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub bald_passes: Option<usize>,
}

fn optional<T: std::str::FromStr>(flag: &str, v: &str) -> Result<Option<T>> {
    if v.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| usage(format!("invalid value `{v}` for --{flag}")))
}

impl LearnerArgs {
    pub fn resolve(&self) -> Result<LearnerConfig> {
        let mut c = match &self.config {
            Some(path) => {
                require_file(path, "config file")?;
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => LearnerConfig::default(),
        };
        if let Some(v) = self.beta {
            c.selection.beta = v;
        }
        if let Some(v) = self.alpha {
            c.training.alpha = v;
        }
        if let Some(v) = self.mode {
            c.training.mode = v;
        }
        if let Some(v) = self.batch_fraction {
            c.selection.batch_fraction = v;
        }
        if let Some(v) = self.warmup_fraction {
            c.warmup_fraction = v;
        }
        if let Some(v) = &self.budget {
            c.budget_fraction = optional("budget", v)?;
        }
        if let Some(v) = &self.patience {
            c.patience = optional("patience", v)?;
        }
        if let Some(v) = self.learning_rate {
            c.training.learning_rate = v;
        }
        if let Some(v) = self.initial_epochs {
            c.training.max_initial_epochs = v;
        }
        if let Some(v) = self.epochs_per_iteration {
            c.training.epochs_per_iteration = v;
        }
        if let Some(v) = self.split_seed {
            c.split_seed = v;
        }
        if let Some(v) = self.bald_passes {
            c.selection.t_passes = v;
        }
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }
}

/// `3`, `0..4` (inclusive) or `0,2,5`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || usage(format!("invalid seed list `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Dataset with gold labels.
    #[arg(long = "data", required_unless_present = "manifest")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Strategy name or `all`.
    #[arg(long, default_value = "bi_criteria", conflicts_with = "manifest")]
    pub strategy: String,
    #[arg(long, default_value_t = 0, conflicts_with_all = ["seeds", "manifest"])]
    pub seed: u64,
    /// Seed list: `0..4` (inclusive) or `0,2,5`.
    #[arg(long, conflicts_with = "manifest")]
    pub seeds: Option<String>,
    /// Rerun exactly what a previous manifest describes.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub learner: LearnerArgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: Strategy,
    pub seed: u64,
    pub dir: PathBuf,
}

/// Config snapshot stored in a simulate manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatePlan {
    pub learner: LearnerConfig,
    pub strategies: Vec<Strategy>,
    pub cells: Vec<Cell>,
}

pub const CURVE_FILE: &str = "curve.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const STATE_FILE: &str = "state.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const CURVES_FILE: &str = "curves.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn cell_dir(strategy: Strategy, seed: u64) -> PathBuf {
    PathBuf::from(format!("{strategy}-seed{seed}"))
}

fn plan_from_args(a: &SimulateArgs) -> Result<(PathBuf, SimulatePlan, Vec<u64>)> {
    if let Some(path) = &a.manifest {
        require_file(path, "manifest")?;
        let m = RunManifest::read(path)?;
        if m.command != "simulate" {
            return Err(usage(format!("{} is a `{}` manifest", path.display(), m.command)));
        }
        let input = m.inputs.first().context("manifest lists no dataset")?;
        require_file(&input.path, "dataset")?;
        input.verify()?;
        let mut plan: SimulatePlan = serde_json::from_value(m.config).context("manifest config")?;
        plan.learner.validate()?;
        for c in &mut plan.cells {
            c.dir = cell_dir(c.strategy, c.seed);
        }
        return Ok((input.path.clone(), plan, m.seeds));
    }
    let data = a.data.clone().expect("clap enforces --data");
    require_file(&data, "dataset")?;
    let learner = a.learner.resolve()?;
    let strategies: Vec<Strategy> = if a.strategy == "all" {
        Strategy::ALL.to_vec()
    } else {
        a.strategy
            .split(',')
            .map(|s| s.trim().parse().map_err(|e: slotdisc::Error| usage(e.to_string())))
            .collect::<Result<_>>()?
    };
    let seeds = match &a.seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![a.seed],
    };
    let cells = strategies
        .iter()
        .flat_map(|&strategy| {
            seeds.iter().map(move |&seed| Cell {
                strategy,
                seed,
                dir: cell_dir(strategy, seed),
            })
        })
        .collect();
    Ok((data, SimulatePlan { learner, strategies, cells }, seeds))
}

fn run_cell(corpus: &Corpus, catalog: &SlotCatalog, plan: &SimulatePlan, cell: &Cell, out: &Path) -> Result<Vec<CurvePoint>> {
    let mut config = plan.learner.clone();
    config.seed = cell.seed;
    config.selection.strategy = cell.strategy;
    let dir = out.join(&cell.dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut learner = ActiveLearner::new(corpus.clone(), catalog, config)?;
    let stop = learner.run(&mut OracleAnnotator)?;
    fs::write(dir.join(CURVE_FILE), learner.learning_curve_csv())?;
    fs::write(dir.join(EVENTS_FILE), learner.events_jsonl())?;
    learner.checkpoint(&dir.join(STATE_FILE))?;
    learner.model().save(&dir.join(MODEL_FILE))?;
    let last = learner.history().last().expect("warm-up record");
    log::info!(
        "{} seed {}: stopped ({stop:?}) at {:.3} labeled, span F1 {:.4}, {} slots known",
        cell.strategy,
        cell.seed,
        last.labeled_fraction,
        last.test.span_f1,
        last.known_slots
    );
    Ok(learner
        .history()
        .iter()
        .map(|r| CurvePoint {
            strategy: cell.strategy.to_string(),
            seed: cell.seed,
            iteration: r.iteration,
            labeled_fraction: r.labeled_fraction,
            span_f1: r.test.span_f1,
        })
        .collect())
}

pub fn run(a: SimulateArgs) -> Result<()> {
    let (data, plan, seeds) = plan_from_args(&a)?;
    let (corpus, catalog) = load_dataset(&data, slotdisc::SCHEMA_VERSION)?;
    corpus.ensure_gold_labels()?;

    let mut manifest = RunManifest::new("simulate", serde_json::to_value(&plan)?).input(&data)?;
    manifest.seeds = seeds;
    manifest.outputs.push(a.out_dir.join(CURVES_FILE));
    for c in &plan.cells {
        for f in [CURVE_FILE, EVENTS_FILE, STATE_FILE, MODEL_FILE] {
            manifest.outputs.push(a.out_dir.join(&c.dir).join(f));
        }
    }
    manifest.write(&a.out_dir.join(MANIFEST_FILE))?;

    let results: Vec<Result<Vec<CurvePoint>>> = plan
        .cells
        .par_iter()
        .map(|c| run_cell(&corpus, &catalog, &plan, c, &a.out_dir))
        .collect();
    let mut points = Vec::new();
    let mut failed = 0;
    for (cell, r) in plan.cells.iter().zip(results) {
        match r {
            Ok(p) => points.extend(p),
            Err(e) => {
                failed += 1;
                log::error!("{} seed {} failed: {e:#}", cell.strategy, cell.seed);
            }
        }
    }
    fs::write(a.out_dir.join(CURVES_FILE), plot_data_csv(&points))?;
    println!("{}", a.out_dir.join(MANIFEST_FILE).display());
    if failed > 0 {
        bail!("{failed} of {} runs failed", plan.cells.len());
    }
    Ok(())
}

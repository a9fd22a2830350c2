use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use slotdisc::convert::bio_to_corpus;
use slotdisc::corpus::load_dataset;
use slotdisc::extraction::{
    builtin_extractors, extract_candidates, filter_candidates, parse_word_list, CorpusFrequencies, ExtractedSpan,
    FilterConfig, FilterReport, GazetteerMatcher,
};
use slotdisc::metrics::{aggregate_csv, curve_report, plot_data_csv, CurvePoint};
use slotdisc::sampling::scores_csv;
use slotdisc::synthgen::{generate as synth, new_slot_names, SynthSpec};
use slotdisc::{ActiveLearner, MultiTaskModel, SpanId, Strategy};

use crate::manifest::{sidecar, RunManifest};
use crate::simulate::{SimulatePlan, CURVE_FILE};
use crate::{require_file, usage};

fn read_text(path: &Path, what: &str) -> Result<String> {
    require_file(path, what)?;
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub min_freq: u32,
    /// One phrase per line, optionally `phrase<TAB>label`.
    #[arg(long)]
    pub gazetteer: Option<PathBuf>,
    /// Span texts to drop, one per line.
    #[arg(long)]
    pub blocklist: Option<PathBuf>,
    /// Replaces the built-in stopword list.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    /// Extraction report; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Serialize)]
struct ExtractionReport {
    utterances: usize,
    matches_per_extractor: BTreeMap<String, usize>,
    merged: usize,
    filter: FilterReport,
    gold_matched: usize,
    failures: usize,
}

pub fn extract(a: ExtractArgs) -> Result<()> {
    require_file(&a.input, "input")?;
    let gazetteer = a
        .gazetteer
        .as_ref()
        .map(|p| read_text(p, "gazetteer").map(|t| GazetteerMatcher::parse(&t)))
        .transpose()?;
    let mut filter = FilterConfig {
        min_frequency: a.min_freq,
        ..Default::default()
    };
    if let Some(p) = &a.blocklist {
        filter.blocklist = parse_word_list(&read_text(p, "blocklist")?);
    }
    if let Some(p) = &a.stopwords {
        filter.stopwords = parse_word_list(&read_text(p, "stopword list")?);
    }
    filter.validate().map_err(|e| usage(e.to_string()))?;

    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut n = a.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        n.push(".report.json");
        a.out.with_file_name(n)
    });
    let mut m = RunManifest::new(
        "extract",
        serde_json::json!({"min_frequency": a.min_freq, "gazetteer": a.gazetteer, "blocklist": a.blocklist, "stopwords": a.stopwords}),
    )
    .input(&a.input)?;
    for p in [&a.gazetteer, &a.blocklist, &a.stopwords].into_iter().flatten() {
        m = m.input(p)?;
    }
    m.outputs = vec![a.out.clone(), report_path.clone()];
    m.write(&sidecar(&a.out))?;

    let (corpus, _) = load_dataset(&a.input, slotdisc::SCHEMA_VERSION)
        .with_context(|| format!("loading {}", a.input.display()))?;
    let output = extract_candidates(corpus.utterances(), &builtin_extractors(gazetteer))?;
    for f in &output.failures {
        log::warn!("{} failed on {}: {}", f.extractor, f.utterance_id, f.message);
    }
    let freqs = CorpusFrequencies::for_spans(corpus.utterances(), output.spans.iter().map(|s| &s.span));
    let (kept, filter_report): (Vec<ExtractedSpan>, _) =
        filter_candidates(&output.spans, &filter, &freqs, corpus.utterances())?;

    let gold: HashMap<(&str, usize, usize), &str> = corpus
        .spans()
        .iter()
        .filter_map(|s| s.gold_label.as_deref().map(|g| ((s.utterance_id.as_str(), s.start, s.length), g)))
        .collect();
    let mut gold_matched = 0;
    let spans = kept
        .into_iter()
        .map(|e| {
            let mut s = e.span;
            if let Some(g) = gold.get(&(s.utterance_id.as_str(), s.start, s.length)) {
                s.gold_label = Some((*g).to_owned());
                gold_matched += 1;
            }
            s
        })
        .collect();
    let out = corpus.with_spans(spans)?;
    out.save(&a.out)?;

    let report = ExtractionReport {
        utterances: corpus.utterances().len(),
        matches_per_extractor: output.matches_per_extractor,
        merged: output.spans.len(),
        filter: filter_report,
        gold_matched,
        failures: output.failures.len(),
    };
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Model checkpoint written by `simulate`.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset with gold labels.
    #[arg(long)]
    pub data: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON result here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    require_file(&a.model, "model checkpoint")?;
    require_file(&a.data, "dataset")?;
    if let Some(out) = &a.out {
        let mut m = RunManifest::new("evaluate", serde_json::json!({"json": a.json}))
            .input(&a.model)?
            .input(&a.data)?;
        m.outputs = vec![out.clone()];
        m.write(&sidecar(out))?;
    }
    let model = MultiTaskModel::load(&a.model)?;
    let (corpus, _) = load_dataset(&a.data, slotdisc::SCHEMA_VERSION)?;
    let ids: BTreeSet<SpanId> = corpus
        .spans()
        .iter()
        .filter(|s| s.gold_label.is_some())
        .map(|s| s.span_id.clone())
        .collect();
    if ids.is_empty() {
        bail!("{} has no gold-labeled spans", a.data.display());
    }
    let result = slotdisc::alcore::evaluate_spans(&model, &corpus, &ids)?;
    let json = serde_json::to_string_pretty(&result)?;
    if let Some(out) = &a.out {
        fs::write(out, &json)?;
    }
    if a.json {
        println!("{json}");
    } else {
        print!("{}", result.table());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Manifest written by `simulate`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to the manifest's directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn read_curve(path: &Path, strategy: Strategy, seed: u64) -> Result<Vec<CurvePoint>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{} has no `{name}` column", path.display()))
    };
    let (it, frac, f1) = (col("iteration")?, col("labeled_fraction")?, col("span_f1")?);
    reader
        .records()
        .map(|r| {
            let r = r?;
            Ok(CurvePoint {
                strategy: strategy.to_string(),
                seed,
                iteration: r[it].parse()?,
                labeled_fraction: r[frac].parse()?,
                span_f1: r[f1].parse()?,
            })
        })
        .collect()
}

pub fn report(a: ReportArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let sim = RunManifest::read(&a.manifest)?;
    if sim.command != "simulate" {
        return Err(usage(format!("{} is a `{}` manifest", a.manifest.display(), sim.command)));
    }
    let plan: SimulatePlan = serde_json::from_value(sim.config).context("manifest config")?;
    let base = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out_dir = a.out_dir.clone().unwrap_or_else(|| base.clone());
    let files = ["aggregate.csv", "plot_data.csv", "mean_differences.json"].map(|f| out_dir.join(f));
    let mut m = RunManifest::new("report", serde_json::json!({})).input(&a.manifest)?;
    m.seeds = sim.seeds;
    m.outputs = files.to_vec();
    m.write(&out_dir.join("report.manifest.json"))?;

    let mut points = Vec::new();
    for c in &plan.cells {
        let path = base.join(&c.dir).join(CURVE_FILE);
        if !path.is_file() {
            log::warn!("missing {}; skipping", path.display());
            continue;
        }
        points.extend(read_curve(&path, c.strategy, c.seed)?);
    }
    if points.is_empty() {
        bail!("no curves found next to {}", a.manifest.display());
    }
    let report = curve_report(&points)?;
    fs::write(&files[0], aggregate_csv(&report.table))?;
    fs::write(&files[1], plot_data_csv(&points))?;
    fs::write(&files[2], serde_json::to_string_pretty(&report.mean_differences)?)?;

    println!("{:<14} {:>9} {:>8} {:>8} {:>5}", "strategy", "labeled", "mean_f1", "std_f1", "seeds");
    let mut last: BTreeMap<&str, &slotdisc::metrics::AggregatePoint> = BTreeMap::new();
    for p in &report.table {
        last.insert(&p.strategy, p);
    }
    for p in last.values() {
        println!(
            "{:<14} {:>9.4} {:>8.4} {:>8.4} {:>5}",
            p.strategy, p.labeled_fraction, p.mean_f1, p.std_f1, p.seeds
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// BIO two-column text.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prefix for generated utterance ids.
    #[arg(long, default_value = "u")]
    pub prefix: String,
}

pub fn convert(a: ConvertArgs) -> Result<()> {
    require_file(&a.input, "input")?;
    let mut m = RunManifest::new("convert", serde_json::json!({"prefix": a.prefix})).input(&a.input)?;
    m.outputs = vec![a.out.clone()];
    m.write(&sidecar(&a.out))?;
    let file = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let corpus = bio_to_corpus(BufReader::new(file), &a.prefix)?;
    corpus.save(&a.out)?;
    println!("{} utterances, {} spans", corpus.utterances().len(), corpus.spans().len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "spans")]
    pub utterances: Option<usize>,
    /// Exact span count, one mention per utterance.
    #[arg(long)]
    pub spans: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub new_slot_share: Option<f64>,
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => toml::from_str(&read_text(p, "config file")?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => SynthSpec::default(),
    };
    if let Some(n) = a.spans {
        spec = SynthSpec {
            n_utterances: n,
            min_mentions: 1,
            max_mentions: 1,
            ..spec
        };
    }
    if let Some(n) = a.utterances {
        spec.n_utterances = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(r) = a.noise_rate {
        spec.noise_rate = r;
    }
    if let Some(r) = a.new_slot_share {
        spec.new_slot_share = r;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let mut m = RunManifest::new("generate", serde_json::to_value(&spec)?);
    m.seeds = vec![spec.seed];
    m.outputs = vec![a.out.clone()];
    m.write(&sidecar(&a.out))?;
    let corpus = synth(&spec)?;
    corpus.save(&a.out)?;
    println!(
        "{} utterances, {} spans; rare slots: {}",
        corpus.utterances().len(),
        corpus.spans().len(),
        new_slot_names(&spec)?.join(", ")
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ScoreDumpArgs {
    /// Run checkpoint (`state.ckpt`).
    #[arg(long)]
    pub state: PathBuf,
    /// Dataset the run was started on.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Score with this strategy instead of the run's.
    #[arg(long)]
    pub strategy: Option<Strategy>,
}

pub fn score_dump(a: ScoreDumpArgs) -> Result<()> {
    require_file(&a.state, "checkpoint")?;
    require_file(&a.data, "dataset")?;
    let mut m = RunManifest::new("score-dump", serde_json::json!({"strategy": a.strategy}))
        .input(&a.state)?
        .input(&a.data)?;
    m.outputs = vec![a.out.clone()];
    m.write(&sidecar(&a.out))?;
    let (corpus, _) = load_dataset(&a.data, slotdisc::SCHEMA_VERSION)?;
    let learner = ActiveLearner::resume(&a.state, corpus)?;
    if learner.state().pools.unlabeled.is_empty() {
        bail!("the unlabeled pool is empty");
    }
    let strategy = a.strategy.unwrap_or(learner.config().selection.strategy);
    let selection = learner.score_pool(Some(strategy))?;
    fs::write(&a.out, scores_csv(strategy, &selection.scores))?;
    println!("{} spans scored with {strategy}", selection.scores.len());
    Ok(())
}

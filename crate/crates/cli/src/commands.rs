//! The subcommands. Each returns a one-line summary for the terminal and
//! leaves its real output in files.
//!
//! A training run directory holds `checkpoint.bmr`, `vocab.json`,
//! `ingest.json` and `report.json`; `eval` and `export` find the
//! vocabulary and cleaning rules next to the checkpoint they are given.

use std::path::{Path, PathBuf};

use bmr_core::export::{cosine_heatmap_csv, heatmap_samples, reweigh_curves_csv, score_histogram_csv};
use bmr_core::train::evaluate_model;
use bmr_core::{
    ablation_preset, checkpoint, run_ablation, synth_corpus, train, AblationRow, Bmr, CleanRules, ConfigDelta, Metrics,
    SynthSpec,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::ingest::{
    encode_records, ingest, read_records, synthetic_vocabulary, write_jsonl, Dataset, IngestOptions, Vocabulary,
};
use crate::run_config::RunConfig;

pub const CHECKPOINT: &str = "checkpoint.bmr";
pub const VOCAB: &str = "vocab.json";
pub const INGEST: &str = "ingest.json";
pub const REPORT: &str = "report.json";
pub const METRICS: &str = "metrics.json";

/// Points per view in the reweighing-curve export.
pub const CURVE_RESOLUTION: usize = 101;
/// Samples per class in the heatmap export.
pub const HEATMAP_PER_CLASS: usize = 10;

/// Cleaning rules a model was trained under, stored beside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSettings {
    pub min_image_side: usize,
    pub min_words: usize,
}

impl IngestSettings {
    fn options(&self, model: &bmr_core::BmrConfig, require_labels: bool) -> IngestOptions {
        IngestOptions {
            image_h: model.image_h,
            image_w: model.image_w,
            rules: CleanRules {
                min_side: self.min_image_side,
                min_words: self.min_words,
                ..CleanRules::new(model.image_h, model.image_w)
            },
            require_labels,
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Invalid(e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(e.to_string()).in_file(path))
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    read_json::<Vocabulary>(path)?.checked().map_err(|e| e.in_file(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Bmr> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    checkpoint::decode(&bytes).map_err(|e| CliError::from(e).in_file(path))
}

/// A trained model with the vocabulary and cleaning rules stored beside
/// its checkpoint.
pub struct LoadedRun {
    pub model: Bmr,
    pub vocab: Vocabulary,
    pub settings: IngestSettings,
    pub dir: PathBuf,
}

impl LoadedRun {
    pub fn open(checkpoint: &Path) -> Result<Self> {
        let model = load_checkpoint(checkpoint)?;
        let dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
        let vocab = load_vocab(&dir.join(VOCAB))?;
        let settings = read_json(&dir.join(INGEST))?;
        Ok(Self {
            model,
            vocab,
            settings,
            dir,
        })
    }

    pub fn ingest(&self, data: &Path, require_labels: bool) -> Result<Dataset> {
        ingest(
            data,
            &self.vocab,
            &self.settings.options(self.model.cfg(), require_labels),
        )
    }
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(vec![format!("`{key}` is required for this command")]))
}

/// Vocabulary plus the cleaned training and test sets of a run config.
pub fn load_sets(cfg: &RunConfig) -> Result<(Vocabulary, Dataset, Dataset)> {
    let (train_path, test_path) = (required(&cfg.run.train, "train"), required(&cfg.run.test, "test"));
    let (train_path, test_path) = match (train_path, test_path) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(CliError::Config(mut a)), Err(CliError::Config(b))) => {
            a.extend(b);
            return Err(CliError::Config(a));
        }
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let (records, base) = read_records(train_path)?;
    let vocab = match &cfg.run.vocab_file {
        Some(p) => load_vocab(p)?,
        None => Vocabulary::build(records.iter().map(|r| r.text.as_str()), cfg.model.vocab),
    };
    if vocab.len() > cfg.model.vocab {
        return Err(CliError::Invalid(format!(
            "vocabulary has {} ids but the model embeds only {}",
            vocab.len(),
            cfg.model.vocab
        )));
    }
    let opts = ingest_settings(cfg).options(&cfg.model, true);
    let train_set = encode_records(&records, &vocab, &base, &opts).map_err(|e| e.in_file(train_path))?;
    let test_set = ingest(test_path, &vocab, &opts).map_err(|e| e.in_file(test_path))?;
    Ok((vocab, train_set, test_set))
}

fn ingest_settings(cfg: &RunConfig) -> IngestSettings {
    IngestSettings {
        min_image_side: cfg.run.min_image_side,
        min_words: cfg.run.min_words,
    }
}

/// Trains with the first configured seed and writes a run directory.
pub fn train_cmd(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let (vocab, train_set, test_set) = load_sets(cfg)?;
    let seed = cfg.run.seeds[0];
    let run = train(&train_set.news, &test_set.news, &cfg.model, &cfg.train_options(seed))?;
    let mut best = run.best;
    best.net.cfg.threshold = Some(run.report.threshold);

    let out = &cfg.run.out;
    write_json(&out.join(REPORT), &run.report)?;
    write_file(&out.join(CHECKPOINT), checkpoint::encode(&best)?)?;
    write_json(&out.join(VOCAB), &vocab)?;
    write_json(&out.join(INGEST), &ingest_settings(cfg))?;
    let r = &run.report;
    let at = r
        .best_epoch
        .map_or("initialization".to_string(), |e| format!("epoch {e}"));
    Ok(format!(
        "trained {} epochs on {} items (seed {seed}): best accuracy {:.4} at {at}, threshold {:.4}; wrote {}",
        r.epochs.len(),
        train_set.news.len(),
        r.best.accuracy,
        r.threshold,
        out.display()
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub items: usize,
    pub metrics: Metrics,
}

/// Evaluates a checkpoint on a labelled JSONL file. The threshold is the
/// override, else the one stored at training time.
pub fn eval_cmd(checkpoint: &Path, data: &Path, threshold_override: Option<f64>, out: Option<&Path>) -> Result<String> {
    let mut run = LoadedRun::open(checkpoint)?;
    if let Some(t) = threshold_override {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Invalid(format!("threshold must lie in [0, 1], got {t}")));
        }
    }
    let set = run.ingest(data, true)?;
    let threshold = threshold_override.or(run.model.cfg().threshold).unwrap_or(0.5);
    let metrics = evaluate_model(&mut run.model, &set.news, threshold, 256)?;
    let path = out.map_or_else(|| run.dir.join(METRICS), Path::to_path_buf);
    write_json(
        &path,
        &EvalReport {
            threshold,
            items: set.news.len(),
            metrics,
        },
    )?;
    Ok(format!(
        "accuracy {:.4}, F1 fake {:.4}, F1 real {:.4} on {} items at threshold {threshold:.4}; wrote {}",
        metrics.accuracy,
        metrics.fake.f1,
        metrics.real.f1,
        set.news.len(),
        path.display()
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub enum AblationGrid {
    Preset,
    File(PathBuf),
}

impl AblationGrid {
    pub fn parse(s: &str) -> Self {
        if s == "preset" {
            Self::Preset
        } else {
            Self::File(PathBuf::from(s))
        }
    }

    /// The preset, or the rows of a grid file.
    pub fn rows(&self) -> Result<Vec<ConfigDelta>> {
        match self {
            Self::Preset => Ok(ablation_preset()),
            Self::File(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                parse_grid(&text).map_err(|e| e.in_file(p))
            }
        }
    }
}

/// A TOML grid: one `[[row]]` table of overrides per variant.
pub fn parse_grid(text: &str) -> Result<Vec<ConfigDelta>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct GridFile {
        row: Vec<ConfigDelta>,
    }
    let grid: GridFile = toml::from_str(text).map_err(|e| CliError::Invalid(e.to_string()))?;
    if grid.row.is_empty() {
        return Err(CliError::Invalid("grid has no rows".into()));
    }
    Ok(grid.row)
}

/// Worker count for ablations: `BMR_NUM_THREADS`, else every core.
pub fn thread_count() -> Result<usize> {
    match std::env::var("BMR_NUM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Invalid(format!(
                "BMR_NUM_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, usize::from)),
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut csv = String::from(AblationRow::csv_header());
    csv.push('\n');
    for r in rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    csv
}

/// Trains every grid row with every configured seed.
pub fn ablate_cmd(cfg: &RunConfig, grid: &AblationGrid, threads: usize) -> Result<String> {
    cfg.validate()?;
    let deltas = grid.rows()?;
    let (_, train_set, test_set) = load_sets(cfg)?;
    let rows = run_ablation(
        &train_set.news,
        &test_set.news,
        &cfg.model,
        &cfg.train_options(cfg.run.seeds[0]),
        &deltas,
        &cfg.run.seeds,
        threads,
    )?;
    let out = &cfg.run.out;
    write_file(&out.join("ablation.csv"), ablation_csv(&rows))?;
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(format!(
        "{} rows x {} seeds on {threads} threads; wrote {}",
        rows.len(),
        cfg.run.seeds.len(),
        out.join("ablation.csv").display()
    ))
}

pub fn parse_synth_spec(text: &str) -> Result<SynthSpec> {
    let spec: SynthSpec = toml::from_str(text).map_err(|e| CliError::Invalid(e.to_string()))?;
    let v = spec.violations();
    if v.is_empty() {
        Ok(spec)
    } else {
        Err(CliError::Config(v))
    }
}

pub fn load_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_synth_spec(&text).map_err(|e| e.in_file(path))
}

/// Writes a synthetic corpus as `train.jsonl`, `test.jsonl` and the
/// matching `vocab.json`.
pub fn synth_cmd(spec: &SynthSpec, seed: u64, out: &Path) -> Result<String> {
    let corpus = synth_corpus(spec, seed)?;
    let vocab = synthetic_vocabulary(spec.vocab);
    for (name, items) in [("train", &corpus.train), ("test", &corpus.test)] {
        let set = Dataset {
            ids: (0..items.len()).map(|i| format!("{name}-{i:05}")).collect(),
            news: items.clone(),
        };
        let mut buf = Vec::new();
        write_jsonl(&set, &vocab, &mut buf)?;
        write_file(&out.join(format!("{name}.jsonl")), buf)?;
    }
    write_json(&out.join(VOCAB), &vocab)?;
    Ok(format!(
        "{} train and {} test items; wrote {}",
        corpus.train.len(),
        corpus.test.len(),
        out.display()
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportKind {
    Curves,
    Histogram,
    Heatmap,
}

impl ExportKind {
    pub fn file_name(self) -> &'static str {
        match self {
            Self::Curves => "reweigh_curves.csv",
            Self::Histogram => "score_histogram.csv",
            Self::Heatmap => "cosine_heatmap.csv",
        }
    }
}

/// Writes one figure's data. Histograms and heatmaps need labelled data.
pub fn export_cmd(checkpoint: &Path, kind: ExportKind, data: Option<&Path>, out: Option<&Path>) -> Result<String> {
    let mut run = LoadedRun::open(checkpoint)?;
    let need_data = || data.ok_or_else(|| CliError::Invalid(format!("--data is required for the {kind:?} export")));
    let csv = match kind {
        ExportKind::Curves => reweigh_curves_csv(&run.model, CURVE_RESOLUTION)?,
        ExportKind::Histogram => {
            let set = run.ingest(need_data()?, true)?;
            score_histogram_csv(&mut run.model, &set.news, 256)?
        }
        ExportKind::Heatmap => {
            let set = run.ingest(need_data()?, true)?;
            let samples = heatmap_samples(&set.news, HEATMAP_PER_CLASS)?;
            cosine_heatmap_csv(&mut run.model, &samples)?
        }
    };
    let path = out.map_or_else(|| run.dir.join(kind.file_name()), |d| d.join(kind.file_name()));
    write_file(&path, &csv)?;
    Ok(format!(
        "{} rows; wrote {}",
        csv.lines().count().saturating_sub(1),
        path.display()
    ))
}

//! Declarative experiment pipeline: corpus generation, training, editing
//! rounds, stability benchmarking, metric evaluation and report emission.
//!
//! Every command reads and writes fixed file names under
//! [`ExperimentConfig::output_dir`]:
//!
//! | file | written by |
//! |------|------------|
//! | `corpus.json` | [`gen_corpus`] |
//! | `model_pre.evkm`, `train_log.json` | [`train_model`] |
//! | `model_post.evkm`, `edit_outcome.json`, `snapshot.json` | [`edit`] |
//! | `bench.json`, `bench.csv` | [`bench`] |
//! | `metrics.json`, `metrics.csv` | [`eval`] |
//! | `summary.md`, `summary.csv` | [`report`] |
//! | `manifest.json` | every command |
//!
//! JSON artifacts carry the full config under `"config"`; CSV rows carry its
//! SHA-256 in a `config_sha256` column. Wall-clock timings live only in the
//! manifest, so every other artifact is a pure function of the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{generate_corpus, parse_counterfact, Corpus, CorpusConfig, CorpusError, EditRequest};
use crate::editor::{sequential_rounds, EditConfig, EditError, EditSummary, RoundSnapshot};
use crate::evkalign::AlignConfig;
use crate::evkbench::{build_bench, run_bench, BenchError, StabilityReport};
use crate::io::{sha256_hex, write_atomic};
use crate::linalg::RngStream;
use crate::metrics::{
    evaluate, generation_scores, GenerationScores, MetricStyle, MetricsError, MetricsReport, NeighborhoodSnapshot,
    TfIdf,
};
use crate::model::{self, train, ModelConfig, ModelError, ToyModel, TrainConfig, TrainLog};

pub const CORPUS_FILE: &str = "corpus.json";
pub const PRE_CHECKPOINT: &str = "model_pre.evkm";
pub const POST_CHECKPOINT: &str = "model_post.evkm";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const OUTCOME_FILE: &str = "edit_outcome.json";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const BENCH_JSON: &str = "bench.json";
pub const BENCH_CSV: &str = "bench.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_MD: &str = "summary.md";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Files listed (with hashes) in the manifest when present.
const ARTIFACTS: &[&str] = &[
    CORPUS_FILE,
    PRE_CHECKPOINT,
    TRAIN_LOG_FILE,
    POST_CHECKPOINT,
    OUTCOME_FILE,
    SNAPSHOT_FILE,
    BENCH_JSON,
    BENCH_CSV,
    METRICS_JSON,
    METRICS_CSV,
    SUMMARY_MD,
    SUMMARY_CSV,
];

/// Column headers of the summary table after the row labels.
pub const SUMMARY_COLUMNS: [&str; 7] = ["Eff.", "Gen.", "Spe.", "Flu.", "Consis.", "ES", "TS"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("missing input {0}")]
    Missing(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("requests: {0}")]
    Requests(String),
    #[error("checkpoints differ in model config")]
    CheckpointMismatch,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub sigma: f64,
    pub samples_per_prompt: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            sigma: 0.3,
            samples_per_prompt: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub styles: Vec<MetricStyle>,
    /// Greedy continuation length for fluency and consistency.
    pub decode_length: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            styles: MetricStyle::ALL.to_vec(),
            decode_length: 20,
        }
    }
}

/// The defaults are the demonstration scenario. They override the component
/// defaults for `corpus.n_objects`, `edit.k0_samples`, `edit.clamp_norm` and
/// the alignment top-k schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    /// `vocab_size` is replaced by the corpus vocabulary size at training time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub edit: EditConfig,
    pub bench: BenchSettings,
    pub eval: EvalSettings,
    pub rounds: usize,
    /// Requests per editing round.
    pub batch: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig {
                n_objects: 30,
                ..CorpusConfig::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            edit: EditConfig {
                k0_samples: 2048,
                clamp_norm: 8.0,
                align: Some(AlignConfig {
                    k_early: 2,
                    k_late: 4,
                    ..AlignConfig::default()
                }),
                ..EditConfig::default()
            },
            bench: BenchSettings::default(),
            eval: EvalSettings::default(),
            rounds: 5,
            batch: 10,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let cfg = Self::from_json(&text).map_err(|source| ExperimentError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked before the corpus exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        self.corpus.validate()?;
        ModelConfig {
            vocab_size: self.model.vocab_size.max(1),
            ..self.model.clone()
        }
        .validate()?;
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr.is_finite() && t.lr > 0.0) || !(t.weight_decay >= 0.0) {
            return bad(format!(
                "train needs batch_size >= 1, lr > 0 and weight_decay >= 0 (got {}, {}, {})",
                t.batch_size, t.lr, t.weight_decay
            ));
        }
        if self.rounds == 0 || self.batch == 0 {
            return bad(format!("rounds ({}) and batch ({}) must be positive", self.rounds, self.batch));
        }
        if !(self.bench.sigma.is_finite() && self.bench.sigma >= 0.0) || self.bench.samples_per_prompt == 0 {
            return bad(format!(
                "bench needs sigma >= 0 and samples_per_prompt >= 1 (got {}, {})",
                self.bench.sigma, self.bench.samples_per_prompt
            ));
        }
        if self.eval.styles.is_empty() {
            return bad("eval.styles is empty".into());
        }
        Ok(())
    }

    /// Independent stream for one pipeline component.
    pub fn stream(&self, component: &str) -> RngStream {
        RngStream::named(self.seed, component)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.output_dir.join(file)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(&to_json_bytes(self))
    }
}

/// A JSON artifact: the config it came from plus its payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config: ExperimentConfig,
    pub data: T,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Option<ExperimentConfig>,
    pub version: String,
    /// Seconds per command, keyed by command name.
    pub timings: BTreeMap<String, f64>,
    pub artifacts: Vec<ArtifactHash>,
}

impl RunManifest {
    /// Artifacts whose on-disk hash no longer matches the recorded one.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|a| fs::read(dir.join(&a.path)).map(|b| sha256_hex(&b)).ok().as_deref() != Some(&a.sha256))
            .map(|a| a.path.clone())
            .collect()
    }
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact types serialize");
    bytes.push(b'\n');
    bytes
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ExperimentError::Missing(path.to_path_buf())
        } else {
            ExperimentError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_to_string(path)?).map_err(|source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &to_json_bytes(value))
}

fn write_artifact<T: Serialize + Clone>(cfg: &ExperimentConfig, file: &str, data: &T) -> Result<()> {
    write_json(
        &cfg.path(file),
        &Artifact {
            config: cfg.clone(),
            data: data.clone(),
        },
    )
}

fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    if !path.exists() {
        return Err(ExperimentError::Missing(path.to_path_buf()));
    }
    Ok(model::load(path)?)
}

fn save_checkpoint(model: &ToyModel, path: &Path) -> Result<()> {
    Ok(model::save(model, path)?)
}

/// Records `phase` timing and rehashes every artifact in the output directory.
fn update_manifest(dir: &Path, config: Option<&ExperimentConfig>, phase: &str, seconds: f64) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let mut manifest = if path.exists() {
        read_json::<RunManifest>(&path)?
    } else {
        RunManifest {
            config: None,
            version: version_string(),
            timings: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    };
    if let Some(c) = config {
        manifest.config = Some(c.clone());
    }
    manifest.version = version_string();
    manifest.timings.insert(phase.to_string(), seconds);
    manifest.artifacts = ARTIFACTS
        .iter()
        .filter_map(|f| {
            let bytes = fs::read(dir.join(f)).ok()?;
            Some(ArtifactHash {
                path: f.to_string(),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect();
    write_json(&path, &manifest)?;
    Ok(manifest)
}

fn timed<T>(
    cfg: &ExperimentConfig,
    phase: &str,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    log::info!("{phase} finished in {:.2?}", start.elapsed());
    update_manifest(&cfg.output_dir, Some(cfg), phase, start.elapsed().as_secs_f64())?;
    Ok(out)
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    Ok(read_json::<Artifact<Corpus>>(&cfg.path(CORPUS_FILE))?.data)
}

/// Generates the synthetic corpus and writes `corpus.json`.
pub fn gen_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    cfg.validate()?;
    timed(cfg, "gen-corpus", || {
        let corpus = generate_corpus(&cfg.corpus, &cfg.stream("corpus"))?;
        write_artifact(cfg, CORPUS_FILE, &corpus)?;
        Ok(corpus)
    })
}

/// Trains on the corpus facts and writes the pre-edit checkpoint. With
/// `resume` an existing checkpoint is trained further instead of a fresh
/// initialization.
pub fn train_model(cfg: &ExperimentConfig, resume: bool) -> Result<TrainLog> {
    cfg.validate()?;
    timed(cfg, "train", || {
        let corpus = load_corpus(cfg)?;
        let model_cfg = ModelConfig {
            vocab_size: corpus.vocabulary.len(),
            ..cfg.model.clone()
        };
        let path = cfg.path(PRE_CHECKPOINT);
        let mut model = if resume && path.exists() {
            let m = load_checkpoint(&path)?;
            if m.config != model_cfg {
                return Err(ExperimentError::InvalidConfig(
                    "checkpoint to resume has a different model config".into(),
                ));
            }
            m
        } else {
            ToyModel::new(model_cfg, &cfg.stream("init"))?
        };
        let log = train(&mut model, &corpus.training_examples(), &cfg.train, &cfg.stream("train"))?;
        log::info!(
            "trained {} steps, accuracy {:.4}",
            log.steps_run,
            log.final_accuracy
        );
        save_checkpoint(&model, &path)?;
        write_artifact(cfg, TRAIN_LOG_FILE, &log)?;
        Ok(log)
    })
}

/// Loads edit requests from a JSON file: either a list of already tokenized
/// requests or Counterfact records, tokenized against the corpus vocabulary.
pub fn load_requests(path: &Path, corpus: &Corpus) -> Result<Vec<EditRequest>> {
    let text = read_to_string(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let is_counterfact = value
        .as_array()
        .and_then(|a| a.first())
        .is_some_and(|r| r.get("requested_rewrite").is_some());
    if !is_counterfact {
        return serde_json::from_value(value).map_err(|source| ExperimentError::Json {
            path: path.to_path_buf(),
            source,
        });
    }
    let mut out = Vec::new();
    for r in parse_counterfact(&text, &corpus.vocabulary)? {
        match r {
            Ok(req) => {
                if req.flagged {
                    log::warn!("request {} was tokenized lossily", req.case_id);
                }
                out.push(req);
            }
            Err(e) => log::warn!("skipping {e}"),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub snapshot: RoundSnapshot,
    pub edit: EditSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub requests: Vec<EditRequest>,
    pub rounds: Vec<RoundRecord>,
    /// `‖W_out(post) − W_out(pre)‖_F` for every layer.
    pub checkpoint_delta_norms: Vec<f64>,
}

/// Runs `rounds` sequential batches of `batch` requests on the pre-edit
/// checkpoint. Nothing is written unless every round succeeds.
pub fn edit(cfg: &ExperimentConfig, checkpoint: Option<&Path>, requests_file: Option<&Path>) -> Result<EditRecord> {
    cfg.validate()?;
    timed(cfg, "edit", || {
        let corpus = load_corpus(cfg)?;
        let pre = load_checkpoint(&checkpoint.map_or_else(|| cfg.path(PRE_CHECKPOINT), Path::to_path_buf))?;
        let pool = match requests_file {
            Some(p) => load_requests(p, &corpus)?,
            None => corpus.requests.clone(),
        };
        let need = cfg.rounds * cfg.batch;
        if pool.len() < need {
            return Err(ExperimentError::Requests(format!(
                "{} rounds of {} need {need} requests, have {}",
                cfg.rounds,
                cfg.batch,
                pool.len()
            )));
        }
        let requests = pool[..need].to_vec();
        let snapshot = NeighborhoodSnapshot::take(&pre, &requests)?;
        let batches: Vec<Vec<EditRequest>> = requests.chunks(cfg.batch).map(<[_]>::to_vec).collect();
        let mut post = pre.clone();
        let rounds = sequential_rounds(&mut post, &batches, &corpus.documents(), &cfg.edit, &cfg.stream("edit"))?;
        let checkpoint_delta_norms = (0..pre.config.n_layers)
            .map(|l| post.w_out(l).sub(pre.w_out(l)).map(|d| d.frobenius_norm()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(ModelError::from)?;
        let record = EditRecord {
            requests,
            rounds: rounds
                .iter()
                .map(|r| RoundRecord {
                    snapshot: r.snapshot.clone(),
                    edit: r.outcome.summary(),
                })
                .collect(),
            checkpoint_delta_norms,
        };
        if let Some(last) = record.rounds.last() {
            log::info!("cumulative efficacy {:.3}", last.snapshot.cumulative_efficacy);
        }
        write_artifact(cfg, SNAPSHOT_FILE, &snapshot)?;
        write_artifact(cfg, OUTCOME_FILE, &record)?;
        save_checkpoint(&post, &cfg.path(POST_CHECKPOINT))?;
        Ok(record)
    })
}

pub fn load_edit_record(cfg: &ExperimentConfig) -> Result<EditRecord> {
    Ok(read_json::<Artifact<EditRecord>>(&cfg.path(OUTCOME_FILE))?.data)
}

fn edited_requests(cfg: &ExperimentConfig, requests_file: Option<&Path>) -> Result<Vec<EditRequest>> {
    match requests_file {
        Some(p) => load_requests(p, &load_corpus(cfg)?),
        None => Ok(load_edit_record(cfg)?.requests),
    }
}

/// The pre-edit model against itself and against the post-edit model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub pre: StabilityReport,
    pub post: StabilityReport,
}

fn checkpoint_pair(cfg: &ExperimentConfig, pre: Option<&Path>, post: Option<&Path>) -> Result<(ToyModel, ToyModel)> {
    let pre = load_checkpoint(&pre.map_or_else(|| cfg.path(PRE_CHECKPOINT), Path::to_path_buf))?;
    let post = load_checkpoint(&post.map_or_else(|| cfg.path(POST_CHECKPOINT), Path::to_path_buf))?;
    if pre.config != post.config {
        return Err(ExperimentError::CheckpointMismatch);
    }
    Ok((pre, post))
}

#[derive(Serialize)]
struct BenchRow<'a> {
    comparison: &'a str,
    kind: &'a str,
    index: usize,
    prompt_id: Option<usize>,
    drift: Option<&'a str>,
    sigma: Option<f64>,
    seed: Option<u64>,
    stream_id: Option<u64>,
    value: f64,
    config_sha256: &'a str,
}

/// EVK-Bench on the edited requests' prompts; TS uses their attribution prompts.
pub fn bench(cfg: &ExperimentConfig, pre_ckpt: Option<&Path>, post_ckpt: Option<&Path>) -> Result<BenchRecord> {
    cfg.validate()?;
    timed(cfg, "bench", || {
        let (pre, post) = checkpoint_pair(cfg, pre_ckpt, post_ckpt)?;
        let requests = load_edit_record(cfg)?.requests;
        let prompts: Vec<_> = requests.iter().map(|r| r.prompt.clone()).collect();
        let attribution: Vec<_> = requests.iter().flat_map(|r| r.attribution_prompts.clone()).collect();
        let instances = build_bench(
            &prompts,
            &pre,
            cfg.bench.sigma,
            cfg.bench.samples_per_prompt,
            &cfg.stream("bench"),
        )?;
        let record = BenchRecord {
            pre: run_bench(&pre, &pre, &instances, &attribution)?,
            post: run_bench(&pre, &post, &instances, &attribution)?,
        };
        log::info!(
            "ES {:.2} TS {:?}",
            record.post.es_score,
            record.post.ts_score
        );
        let hash = cfg.hash();
        let mut w = csv::Writer::from_writer(Vec::new());
        for (comparison, rep) in [("pre", &record.pre), ("post", &record.post)] {
            for (i, (es, meta)) in rep.es.iter().zip(&rep.instances).enumerate() {
                w.serialize(BenchRow {
                    comparison,
                    kind: "es",
                    index: i,
                    prompt_id: Some(meta.prompt_id),
                    drift: Some(drift_name(meta.drift)),
                    sigma: Some(meta.sigma),
                    seed: Some(meta.seed),
                    stream_id: Some(meta.stream_id),
                    value: *es,
                    config_sha256: &hash,
                })?;
            }
            for (i, ts) in rep.ts.iter().enumerate() {
                w.serialize(BenchRow {
                    comparison,
                    kind: "ts",
                    index: i,
                    prompt_id: None,
                    drift: None,
                    sigma: None,
                    seed: None,
                    stream_id: None,
                    value: *ts,
                    config_sha256: &hash,
                })?;
            }
        }
        write_artifact(cfg, BENCH_JSON, &record)?;
        write_file(&cfg.path(BENCH_CSV), &csv_bytes(w)?)?;
        Ok(record)
    })
}

fn drift_name(d: crate::evkbench::DriftType) -> &'static str {
    use crate::evkbench::DriftType::*;
    match d {
        Subject => "subject",
        Relation => "relation",
        All => "all",
    }
}

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| ExperimentError::Csv(e.into_error().into()))
}

/// One `(model, style)` evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// `pre` or `post`.
    pub model: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsCsvRow {
    pub model: String,
    pub style: MetricStyle,
    pub n: usize,
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub fluency: f64,
    pub consistency: f64,
    pub generalization_skipped: usize,
    pub specificity_skipped: usize,
    pub consistency_degenerate: usize,
    pub config_sha256: String,
}

impl MetricsCsvRow {
    fn new(row: &MetricsRow, hash: &str) -> Self {
        let r = &row.report;
        Self {
            model: row.model.clone(),
            style: r.style,
            n: r.n,
            efficacy: r.efficacy,
            generalization: r.generalization,
            specificity: r.specificity,
            fluency: r.fluency,
            consistency: r.consistency,
            generalization_skipped: r.generalization_skipped,
            specificity_skipped: r.specificity_skipped,
            consistency_degenerate: r.consistency_degenerate,
            config_sha256: hash.to_string(),
        }
    }
}

/// Parses `metrics.csv` back into rows.
pub fn read_metrics_csv(bytes: &[u8]) -> Result<Vec<MetricsCsvRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(Into::into)
}

/// Both metric styles for the pre- and post-edit models on the edited
/// requests, against the snapshot taken before editing.
pub fn eval(
    cfg: &ExperimentConfig,
    pre_ckpt: Option<&Path>,
    post_ckpt: Option<&Path>,
    requests_file: Option<&Path>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    timed(cfg, "eval", || {
        let (pre, post) = checkpoint_pair(cfg, pre_ckpt, post_ckpt)?;
        let corpus = load_corpus(cfg)?;
        let requests = edited_requests(cfg, requests_file)?;
        let snapshot_path = cfg.path(SNAPSHOT_FILE);
        let snapshot = if snapshot_path.exists() && requests_file.is_none() {
            read_json::<Artifact<NeighborhoodSnapshot>>(&snapshot_path)?.data
        } else {
            NeighborhoodSnapshot::take(&pre, &requests)?
        };
        let tfidf = TfIdf::fit(&corpus.documents())?;
        let reference = |object: usize| corpus.reference_text(object);
        let mut rows = Vec::new();
        for (name, m) in [("pre", &pre), ("post", &post)] {
            let gen: GenerationScores = generation_scores(m, &requests, cfg.eval.decode_length, &reference, &tfidf)?;
            for &style in &cfg.eval.styles {
                let report = evaluate(m, &requests, &snapshot, style, &gen)?;
                log::info!(
                    "{name} {}: efficacy {:.3} generalization {:.3} specificity {:.3}",
                    style.as_str(),
                    report.efficacy,
                    report.generalization,
                    report.specificity
                );
                rows.push(MetricsRow {
                    model: name.to_string(),
                    report,
                });
            }
        }
        let hash = cfg.hash();
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(MetricsCsvRow::new(r, &hash))?;
        }
        write_artifact(cfg, METRICS_JSON, &rows)?;
        write_file(&cfg.path(METRICS_CSV), &csv_bytes(w)?)?;
        Ok(rows)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub style: Option<MetricStyle>,
    /// Values in [`SUMMARY_COLUMNS`] order; `None` when the source artifact is missing.
    pub values: [Option<f64>; 7],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
    pub config: Option<ExperimentConfig>,
}

fn try_artifact<T: DeserializeOwned>(dir: &Path, file: &str, warnings: &mut Vec<String>) -> Option<Artifact<T>> {
    match read_json::<Artifact<T>>(&dir.join(file)) {
        Ok(a) => Some(a),
        Err(e) => {
            warnings.push(format!("{file}: {e}"));
            None
        }
    }
}

/// Merges `metrics.json` and `bench.json` into one table with columns
/// Eff., Gen., Spe., Flu., Consis., ES, TS; copies values without rescaling
/// (rates in [0, 1], ES/TS as 0 to 100 scores). Missing artifacts are listed
/// as warnings and their columns left empty.
pub fn report(dir: &Path) -> Result<Summary> {
    let start = Instant::now();
    let mut warnings = Vec::new();
    let metrics = try_artifact::<Vec<MetricsRow>>(dir, METRICS_JSON, &mut warnings);
    let bench = try_artifact::<BenchRecord>(dir, BENCH_JSON, &mut warnings);
    let config = metrics
        .as_ref()
        .map(|a| a.config.clone())
        .or_else(|| bench.as_ref().map(|a| a.config.clone()));
    let stability = |model: &str| -> (Option<f64>, Option<f64>) {
        bench.as_ref().map_or((None, None), |b| {
            let rep = if model == "pre" { &b.data.pre } else { &b.data.post };
            (Some(rep.es_score), rep.ts_score)
        })
    };
    let mut rows = Vec::new();
    match &metrics {
        Some(m) => {
            for r in &m.data {
                let (es, ts) = stability(&r.model);
                let x = &r.report;
                rows.push(SummaryRow {
                    model: r.model.clone(),
                    style: Some(x.style),
                    values: [
                        Some(x.efficacy),
                        Some(x.generalization),
                        Some(x.specificity),
                        Some(x.fluency),
                        Some(x.consistency),
                        es,
                        ts,
                    ],
                });
            }
        }
        None if bench.is_some() => {
            for model in ["pre", "post"] {
                let (es, ts) = stability(model);
                rows.push(SummaryRow {
                    model: model.to_string(),
                    style: None,
                    values: [None, None, None, None, None, es, ts],
                });
            }
        }
        None => {}
    }
    for w in &warnings {
        log::warn!("report: {w}");
    }
    let summary = Summary {
        rows,
        warnings,
        config,
    };
    write_file(&dir.join(SUMMARY_MD), summary_markdown(&summary).as_bytes())?;
    write_file(&dir.join(SUMMARY_CSV), &summary_csv(&summary)?)?;
    update_manifest(dir, summary.config.as_ref(), "report", start.elapsed().as_secs_f64())?;
    Ok(summary)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn summary_csv(s: &Summary) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model", "style"];
    header.extend(SUMMARY_COLUMNS);
    w.write_record(&header)?;
    for r in &s.rows {
        let mut rec = vec![r.model.clone(), r.style.map_or_else(String::new, |s| s.as_str().to_string())];
        rec.extend(r.values.iter().map(|v| cell(*v)));
        w.write_record(&rec)?;
    }
    csv_bytes(w)
}

fn summary_markdown(s: &Summary) -> String {
    let mut out = String::from("# Summary\n\n");
    out.push_str("| Model | Style |");
    for c in SUMMARY_COLUMNS {
        out.push_str(&format!(" {c} |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---:|".repeat(SUMMARY_COLUMNS.len()));
    out.push('\n');
    for r in &s.rows {
        out.push_str(&format!(
            "| {} | {} |",
            r.model,
            r.style.map_or("", MetricStyle::as_str)
        ));
        for v in r.values {
            out.push_str(&format!(" {} |", v.map_or_else(String::new, |x| format!("{x:.4}"))));
        }
        out.push('\n');
    }
    if !s.warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in &s.warnings {
            out.push_str(&format!("- {w}\n"));
        }
    }
    if let Some(c) = &s.config {
        out.push_str("\n## Config\n\n```json\n");
        out.push_str(&String::from_utf8(to_json_bytes(c)).expect("JSON is UTF-8"));
        out.push_str("```\n");
    }
    out
}

/// Every command in order: gen-corpus, train, edit, bench, eval, report.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Summary> {
    gen_corpus(cfg)?;
    train_model(cfg, false)?;
    edit(cfg, None, None)?;
    bench(cfg, None, None)?;
    eval(cfg, None, None, None)?;
    report(&cfg.output_dir)
}

//! The five pipeline stages, each reading and writing a fixed layout under
//! the run's output directory:
//!
//! ```text
//! corpus/                 synthesized corpus
//! pretrain/               extractor.ckpt, classifier.ckpt, log.jsonl, summary.json
//! train/<name>/           epoch-NNN.ckpt, final.ckpt, log.jsonl, summary.json
//! eval/<name>/            metrics.json, det_<condition>.csv, scores_<condition>.txt
//! probe/                  probe.csv, pairs.csv, summary.json
//! ```
//!
//! Every stage directory receives the resolved `config.toml` before any
//! work starts. A stage refuses to overwrite existing outputs unless
//! forced.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, Precision, RunConfig};
use crate::error::{ensure, Error, Result};
use crate::evalkit::{
    det_csv, det_curve, eval_system, run_probe, summarize, ConditionMetrics, ConditionScores, Embedder, EvalData,
    ProbeReport, System,
};
use crate::frontend::FbankExtractor;
use crate::nsnet::{write_score_file, ModelConfig};
use crate::substrate::{load_checkpoint, save_checkpoint, ParamStore, Real};
use crate::synthcorpus::{CorpusLayout, SyntheticCorpus};
use crate::trainer::{
    pretrain_embedder, train_ns, EpochRecord, PretrainEpoch, PretrainOutcome, TrainMaterial, TrainOutcome,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const CORPUS_DIR: &str = "corpus";
pub const PRETRAIN_DIR: &str = "pretrain";
pub const TRAIN_DIR: &str = "train";
pub const EVAL_DIR: &str = "eval";
pub const PROBE_DIR: &str = "probe";
pub const EXTRACTOR_CKPT: &str = "extractor.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, text).map_err(io(path))
}

fn json<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn jsonl<S: Serialize>(rows: &[S]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Claims a stage directory: refuses if `marker` exists and `force` is
/// off, then writes the resolved config.
fn open_stage(dir: &Path, marker: &str, cfg: &RunConfig, force: bool) -> Result<()> {
    let m = dir.join(marker);
    ensure!(
        force || !m.exists(),
        Config,
        "{} already exists; pass --force to overwrite",
        m.display()
    );
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml()?)
}

pub fn corpus_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(CORPUS_DIR)
}

pub fn extractor_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(PRETRAIN_DIR).join(EXTRACTOR_CKPT)
}

/// Directory name of a training run: `ns` or the ablations joined by `+`.
pub fn run_name(ablations: &[Ablation]) -> String {
    if ablations.is_empty() {
        "ns".into()
    } else {
        ablations.iter().map(Ablation::to_string).collect::<Vec<_>>().join("+")
    }
}

pub fn train_dir(cfg: &RunConfig, ablations: &[Ablation]) -> PathBuf {
    cfg.output_dir.join(TRAIN_DIR).join(run_name(ablations))
}

fn load_corpus(cfg: &RunConfig) -> Result<SyntheticCorpus> {
    let dir = corpus_dir(cfg);
    ensure!(
        dir.join("corpus.toml").exists(),
        Data,
        "no corpus at {}; run synth first",
        dir.display()
    );
    SyntheticCorpus::load(&dir)
}

fn load_frozen<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let mut store = load_checkpoint(path)?;
    store.set_frozen(true);
    Ok(store)
}

/// Writes the corpus under `corpus/`.
pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<CorpusLayout> {
    cfg.validate()?;
    let dir = corpus_dir(cfg);
    open_stage(&dir, "corpus.toml", cfg, force)?;
    SyntheticCorpus::generate(&cfg.corpus, cfg.seed)?.write(&dir)
}

/// Class index of every training utterance, speakers in id order.
pub fn speaker_labels(corpus: &SyntheticCorpus) -> Result<(Vec<usize>, usize)> {
    let mut ids: Vec<_> = corpus.train.iter().filter_map(|u| u.single_speaker()).collect();
    ids.sort_unstable();
    ids.dedup();
    let labels = corpus
        .train
        .iter()
        .map(|u| {
            let s = u
                .single_speaker()
                .ok_or_else(|| Error::Data(format!("training utterance {} is not single-talker", u.id)))?;
            Ok(ids.binary_search(&s).expect("speaker collected above"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((labels, ids.len()))
}

/// Pretrains the extractor on the corpus's clean training utterances.
pub fn pretrain_on_corpus<T: Real>(corpus: &SyntheticCorpus, cfg: &RunConfig) -> Result<PretrainOutcome<T>> {
    let frontend = FbankExtractor::new(&cfg.frontend)?;
    let fbanks = corpus
        .train
        .iter()
        .map(|u| frontend.extract(&u.samples))
        .collect::<Result<Vec<_>>>()?;
    let (labels, n) = speaker_labels(corpus)?;
    pretrain_embedder(&fbanks, &labels, n, &cfg.model, &cfg.pretrain, cfg.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub speakers: usize,
    pub utterances: usize,
    pub seed: u64,
}

/// Pretrains and freezes the extractor from `corpus/`.
pub fn cmd_pretrain(cfg: &RunConfig, force: bool) -> Result<PretrainSummary> {
    cfg.validate()?;
    let dir = cfg.output_dir.join(PRETRAIN_DIR);
    open_stage(&dir, EXTRACTOR_CKPT, cfg, force)?;
    let corpus = load_corpus(cfg)?;
    match cfg.precision {
        Precision::F64 => pretrain_stage::<f64>(&corpus, cfg, &dir),
        Precision::F32 => pretrain_stage::<f32>(&corpus, cfg, &dir),
    }
}

fn pretrain_stage<T: Real>(corpus: &SyntheticCorpus, cfg: &RunConfig, dir: &Path) -> Result<PretrainSummary> {
    let out = pretrain_on_corpus::<T>(corpus, cfg)?;
    write_text(&dir.join("log.jsonl"), &jsonl::<PretrainEpoch>(&out.log)?)?;
    save_checkpoint(&out.extractor, &dir.join(EXTRACTOR_CKPT))?;
    save_checkpoint(&out.classifier, &dir.join("classifier.ckpt"))?;
    let summary = PretrainSummary {
        initial_loss: out.initial_loss,
        final_loss: out.log.last().map_or(f64::NAN, |l| l.loss),
        train_accuracy: out.train_accuracy,
        speakers: speaker_labels(corpus)?.1,
        utterances: corpus.train.len(),
        seed: cfg.seed,
    };
    write_text(&dir.join("summary.json"), &json(&summary)?)?;
    Ok(summary)
}

/// Held-out features of the conditions in `conditions`, with enrollment
/// embeddings from the frozen extractor.
pub fn eval_data<T: Real>(
    corpus: &SyntheticCorpus,
    cfg: &RunConfig,
    extractor: &ParamStore<T>,
    conditions: &[crate::synthcorpus::Condition],
) -> Result<EvalData<T>> {
    let frontend = FbankExtractor::new(&cfg.frontend)?;
    EvalData::prepare(corpus, conditions, &frontend, extractor, &cfg.model)
}

/// Trains the scorer on the corpus's training speakers, logging held-out
/// metrics on the configured condition.
pub fn train_on_corpus<T: Real>(
    corpus: &SyntheticCorpus,
    cfg: &RunConfig,
    extractor: &ParamStore<T>,
    observer: impl FnMut(&EpochRecord, &ParamStore<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    let frontend = FbankExtractor::new(&cfg.frontend)?;
    let material = TrainMaterial::prepare(
        corpus.train.clone(),
        corpus.babble_pool(),
        &corpus.config,
        frontend,
        extractor,
        &cfg.model,
        &cfg.train,
        cfg.seed,
    )?;
    let heldout = eval_data(corpus, cfg, extractor, &[cfg.train.heldout_condition])?;
    train_ns(
        &material,
        Some(&heldout),
        &cfg.model,
        extractor,
        &cfg.train,
        cfg.seed,
        observer,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub name: String,
    pub initial_heldout_eer: Option<f64>,
    pub final_heldout_eer: Option<f64>,
    pub final_heldout_mindcf: Option<f64>,
    pub epochs: usize,
    pub avg_last_k: usize,
    pub seed: u64,
    pub checkpoint: PathBuf,
}

/// Trains the scorer, writing one checkpoint per epoch and the average of
/// the last K as `final.ckpt`.
pub fn cmd_train(cfg: &RunConfig, ablations: &[Ablation], force: bool) -> Result<TrainSummary> {
    let mut cfg = cfg.clone();
    for a in ablations {
        a.apply(&mut cfg);
    }
    cfg.validate()?;
    let dir = train_dir(&cfg, ablations);
    open_stage(&dir, FINAL_CKPT, &cfg, force)?;
    let corpus = load_corpus(&cfg)?;
    let name = run_name(ablations);
    match cfg.precision {
        Precision::F64 => train_stage::<f64>(&corpus, &cfg, &dir, name),
        Precision::F32 => train_stage::<f32>(&corpus, &cfg, &dir, name),
    }
}

fn train_stage<T: Real>(corpus: &SyntheticCorpus, cfg: &RunConfig, dir: &Path, name: String) -> Result<TrainSummary> {
    let extractor = load_frozen::<T>(&extractor_path(cfg))?;
    let log_path = dir.join("log.jsonl");
    write_text(&log_path, "")?;
    let mut log = String::new();
    let out = train_on_corpus(corpus, cfg, &extractor, |record, params| {
        save_checkpoint(params, &dir.join(format!("epoch-{:03}.ckpt", record.epoch)))?;
        log.push_str(&jsonl(std::slice::from_ref(record))?);
        write_text(&log_path, &log)
    })?;
    let checkpoint = dir.join(FINAL_CKPT);
    save_checkpoint(&out.averaged, &checkpoint)?;
    let summary = TrainSummary {
        name,
        initial_heldout_eer: out.initial_heldout.map(|m| m.0),
        final_heldout_eer: out.final_heldout.map(|m| m.0),
        final_heldout_mindcf: out.final_heldout.map(|m| m.1),
        epochs: cfg.train.epochs,
        avg_last_k: cfg.train.avg_last_k,
        seed: cfg.seed,
        checkpoint,
    };
    write_text(&dir.join("summary.json"), &json(&summary)?)?;
    Ok(summary)
}

/// Scores and metrics of one system over the configured conditions.
pub fn evaluate<T: Real>(
    system: System,
    corpus: &SyntheticCorpus,
    cfg: &RunConfig,
    extractor: &ParamStore<T>,
    scorer: Option<&ParamStore<T>>,
) -> Result<(Vec<ConditionScores>, Vec<ConditionMetrics>)> {
    let data = eval_data(corpus, cfg, extractor, &cfg.eval.conditions)?;
    let scores = eval_system(system, &data, &cfg.model, extractor, scorer)?;
    let rows = summarize(system, &scores, cfg.eval.dcf)?;
    Ok((scores, rows))
}

/// Model settings a checkpoint was trained with, read from the
/// `config.toml` beside it.
fn checkpoint_model(path: &Path, fallback: &ModelConfig) -> Result<ModelConfig> {
    let sidecar = path.with_file_name(CONFIG_FILE);
    if sidecar.exists() {
        Ok(RunConfig::load(&sidecar)?.model)
    } else {
        Ok(fallback.clone())
    }
}

/// Evaluates `system` on every configured condition.
///
/// The NS system scores with `checkpoint`, by default the averaged model
/// of the plain training run, and takes its architecture from the
/// checkpoint's own run config.
pub fn cmd_eval(
    cfg: &RunConfig,
    system: System,
    checkpoint: Option<&Path>,
    force: bool,
) -> Result<Vec<ConditionMetrics>> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    let (name, ckpt) = match system {
        System::Cosine => ("cosine".to_string(), None),
        System::Ns => {
            let path = checkpoint.map_or_else(|| train_dir(&cfg, &[]).join(FINAL_CKPT), Path::to_path_buf);
            ensure!(path.is_file(), Data, "checkpoint {} not found", path.display());
            cfg.model = checkpoint_model(&path, &cfg.model)?;
            let run = path
                .parent()
                .and_then(Path::file_name)
                .map_or_else(|| "ns".into(), |s| s.to_string_lossy().into_owned());
            let name = if run == "ns" { run } else { format!("ns-{run}") };
            (name, Some(path))
        }
    };
    let dir = cfg.output_dir.join(EVAL_DIR).join(name);
    open_stage(&dir, "metrics.json", &cfg, force)?;
    let corpus = load_corpus(&cfg)?;
    match cfg.precision {
        Precision::F64 => eval_stage::<f64>(system, &corpus, &cfg, ckpt.as_deref(), &dir),
        Precision::F32 => eval_stage::<f32>(system, &corpus, &cfg, ckpt.as_deref(), &dir),
    }
}

fn eval_stage<T: Real>(
    system: System,
    corpus: &SyntheticCorpus,
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    dir: &Path,
) -> Result<Vec<ConditionMetrics>> {
    let extractor = load_frozen::<T>(&extractor_path(cfg))?;
    let scorer = checkpoint.map(load_checkpoint::<T>).transpose()?;
    let (scores, rows) = evaluate(system, corpus, cfg, &extractor, scorer.as_ref())?;
    let (mut all_tar, mut all_non) = (Vec::new(), Vec::new());
    for set in &scores {
        let name = set.condition.as_str();
        write_score_file(&dir.join(format!("scores_{name}.txt")), &set.trials, &set.scores)?;
        let (tar, non): (Vec<_>, Vec<_>) = set
            .trials
            .iter()
            .zip(&set.scores)
            .partition(|(t, _)| t.label.is_target());
        let tar: Vec<f64> = tar.into_iter().map(|(_, &s)| s).collect();
        let non: Vec<f64> = non.into_iter().map(|(_, &s)| s).collect();
        write_text(&dir.join(format!("det_{name}.csv")), &det_csv(&det_curve(&tar, &non)?))?;
        all_tar.extend(tar);
        all_non.extend(non);
    }
    write_text(&dir.join("det_overall.csv"), &det_csv(&det_curve(&all_tar, &all_non)?))?;
    write_text(&dir.join("metrics.json"), &json(&rows)?)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub pairs: usize,
    /// Fraction of pairs where the target centroid wins, per SNR.
    pub target_dominance: BTreeMap<String, f64>,
    /// Mean over pairs of the larger centroid cosine, per SNR.
    pub mean_max_cosine: BTreeMap<String, f64>,
    pub clean_same_speaker: f64,
    pub seed: u64,
}

impl ProbeSummary {
    fn from_report(report: &ProbeReport, grid: &[f64], seed: u64) -> Self {
        let key = |s: f64| format!("{s}");
        Self {
            pairs: report.per_pair.len(),
            target_dominance: grid
                .iter()
                .map(|&s| (key(s), report.target_dominance(s).unwrap_or(f64::NAN)))
                .collect(),
            mean_max_cosine: grid
                .iter()
                .map(|&s| (key(s), report.mean_max_cosine(s).unwrap_or(f64::NAN)))
                .collect(),
            clean_same_speaker: report.clean_same_speaker,
            seed,
        }
    }
}

/// Runs the embedding probe with the frozen extractor, by default the one
/// from `pretrain/`.
pub fn cmd_probe(cfg: &RunConfig, extractor: Option<&Path>, force: bool) -> Result<ProbeSummary> {
    cfg.validate()?;
    let dir = cfg.output_dir.join(PROBE_DIR);
    open_stage(&dir, "probe.csv", cfg, force)?;
    let path = extractor.map_or_else(|| extractor_path(cfg), Path::to_path_buf);
    ensure!(
        path.is_file(),
        Data,
        "extractor checkpoint {} not found",
        path.display()
    );
    let corpus = load_corpus(cfg)?;
    match cfg.precision {
        Precision::F64 => probe_stage::<f64>(&corpus, cfg, &path, &dir),
        Precision::F32 => probe_stage::<f32>(&corpus, cfg, &path, &dir),
    }
}

fn probe_stage<T: Real>(corpus: &SyntheticCorpus, cfg: &RunConfig, path: &Path, dir: &Path) -> Result<ProbeSummary> {
    let extractor = load_frozen::<T>(path)?;
    let frontend = FbankExtractor::new(&cfg.frontend)?;
    let embedder = Embedder {
        frontend: &frontend,
        extractor: &extractor,
        model: &cfg.model,
    };
    let report = run_probe(corpus, &embedder, &cfg.probe, cfg.seed)?;
    write_text(&dir.join("probe.csv"), &report.csv())?;
    let mut pairs = String::from("pair,snr_db,cos_A,cos_B\n");
    for (k, table) in report.per_pair.iter().enumerate() {
        for r in table {
            let _ = writeln!(pairs, "{k},{},{:.6},{:.6}", r.snr_db, r.cos_a, r.cos_b);
        }
    }
    write_text(&dir.join("pairs.csv"), &pairs)?;
    let summary = ProbeSummary::from_report(&report, &cfg.probe.snr_grid, cfg.seed);
    write_text(&dir.join("summary.json"), &json(&summary)?)?;
    Ok(summary)
}

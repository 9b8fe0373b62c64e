//! Detection metrics, system scoring and the embedding probe.
//!
//! ```
//! use neural_scoring::evalkit::{compute_eer, compute_mindcf, DcfParams};
//!
//! let (eer, _) = compute_eer(&[0.8, 0.6, 0.4], &[0.7, 0.5, 0.3]).unwrap();
//! assert!((eer - 1.0 / 3.0).abs() < 1e-12);
//! let dcf = compute_mindcf(&[0.9], &[0.1], DcfParams::default()).unwrap();
//! assert_eq!(dcf, 0.0);
//! ```

mod metrics;
mod probe;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::frontend::{FbankExtractor, FbankMatrix};
use crate::nsnet::{embed_enrollment, score_trials, ModelConfig, NsScorer};
use crate::substrate::{ParamStore, Real};
use crate::synthcorpus::{Condition, SyntheticCorpus, TrialListEntry, Utterance};

pub use metrics::{
    compute_eer, compute_mindcf, cosine_score, det_csv, det_curve, det_metrics, DcfParams, DetMetrics, DetPoint,
};
pub use probe::{run_probe, unidentifiability_probe, Embedder, ProbeConfig, ProbeReport, ProbeRow};

/// Label of the minDCF normalization written next to every metric.
pub const DCF_NORMALIZATION: &str = "min(c_miss*p_tar, c_fa*(1-p_tar))";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Ns,
    Cosine,
}

impl System {
    pub fn as_str(self) -> &'static str {
        match self {
            System::Ns => "ns",
            System::Cosine => "cosine",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ns" => Ok(System::Ns),
            "cosine" => Ok(System::Cosine),
            _ => Err(Error::Config(format!("unknown system {s:?}, expected ns or cosine"))),
        }
    }
}

/// Scores of one condition, aligned with its trial list.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionScores {
    pub condition: Condition,
    pub trials: Vec<TrialListEntry>,
    pub scores: Vec<f64>,
}

impl ConditionScores {
    fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut tar = Vec::new();
        let mut non = Vec::new();
        for (t, &s) in self.trials.iter().zip(&self.scores) {
            if t.label.is_target() {
                tar.push(s);
            } else {
                non.push(s);
            }
        }
        (tar, non)
    }
}

/// One row of the metrics JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub system: String,
    /// A condition name or `overall`.
    pub condition: String,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub eer: f64,
    pub min_dcf: f64,
    pub threshold_at_eer: f64,
    pub p_tar: f64,
    pub dcf_normalization: String,
}

fn metrics_row(system: System, condition: &str, tar: &[f64], non: &[f64], dcf: DcfParams) -> Result<ConditionMetrics> {
    let (eer, threshold_at_eer) = compute_eer(tar, non)?;
    Ok(ConditionMetrics {
        system: system.to_string(),
        condition: condition.to_string(),
        n_target: tar.len(),
        n_nontarget: non.len(),
        eer,
        min_dcf: compute_mindcf(tar, non, dcf)?,
        threshold_at_eer,
        p_tar: dcf.p_tar,
        dcf_normalization: DCF_NORMALIZATION.to_string(),
    })
}

/// Per-condition rows followed by an `overall` row computed on the pooled
/// score lists.
pub fn summarize(system: System, sets: &[ConditionScores], dcf: DcfParams) -> Result<Vec<ConditionMetrics>> {
    let mut rows = Vec::with_capacity(sets.len() + 1);
    let (mut all_tar, mut all_non) = (Vec::new(), Vec::new());
    for set in sets {
        let (tar, non) = set.split();
        rows.push(metrics_row(system, set.condition.as_str(), &tar, &non, dcf)?);
        all_tar.extend(tar);
        all_non.extend(non);
    }
    rows.push(metrics_row(system, "overall", &all_tar, &all_non, dcf)?);
    Ok(rows)
}

/// Test features of one evaluation condition.
#[derive(Clone, Debug)]
pub struct EvalSetData {
    pub condition: Condition,
    pub trials: Vec<TrialListEntry>,
    pub tests: HashMap<String, FbankMatrix>,
}

/// Features and enrollment embeddings computed once per evaluation.
#[derive(Clone, Debug)]
pub struct EvalData<T> {
    pub enroll: HashMap<String, Vec<T>>,
    pub sets: Vec<EvalSetData>,
}

impl<T: Real> EvalData<T> {
    pub fn prepare(
        corpus: &SyntheticCorpus,
        conditions: &[Condition],
        frontend: &FbankExtractor,
        extractor: &ParamStore<T>,
        model: &ModelConfig,
    ) -> Result<Self> {
        let mut enroll = HashMap::new();
        for u in &corpus.enroll {
            let fb = frontend.extract(&u.samples)?;
            enroll.insert(u.id.clone(), embed_enrollment(&fb, extractor, model)?.vector);
        }
        let mut sets = Vec::with_capacity(conditions.len());
        for &condition in conditions {
            let set = corpus
                .eval_set(condition)
                .ok_or_else(|| Error::Data(format!("corpus has no {condition} evaluation set")))?;
            let tests = set
                .tests
                .iter()
                .map(|u| Ok((u.id.clone(), frontend.extract(&u.samples)?)))
                .collect::<Result<HashMap<_, _>>>()?;
            sets.push(EvalSetData {
                condition,
                trials: set.trials.clone(),
                tests,
            });
        }
        Ok(Self { enroll, sets })
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

/// Scores every prepared condition with `system`. The NS system needs the
/// scorer parameters; the cosine system compares extractor embeddings.
pub fn eval_system<T: Real>(
    system: System,
    data: &EvalData<T>,
    model: &ModelConfig,
    extractor: &ParamStore<T>,
    scorer: Option<&ParamStore<T>>,
) -> Result<Vec<ConditionScores>> {
    let mut out = Vec::with_capacity(data.sets.len());
    for set in &data.sets {
        let scores = match system {
            System::Ns => {
                let scorer = scorer.ok_or_else(|| Error::InvalidArgument("ns evaluation needs a checkpoint".into()))?;
                let ns = NsScorer {
                    cfg: model,
                    scorer,
                    extractor,
                };
                score_trials(&set.trials, &data.enroll, &set.tests, &ns)?
            }
            System::Cosine => {
                let mut test_emb: HashMap<&str, Vec<f64>> = HashMap::new();
                let mut scores = Vec::with_capacity(set.trials.len());
                for t in &set.trials {
                    let id = t.test_utterance_id.as_str();
                    if !test_emb.contains_key(id) {
                        let fb = set
                            .tests
                            .get(id)
                            .ok_or_else(|| Error::Data(format!("trial list names unknown test utterance {id}")))?;
                        test_emb.insert(id, to_f64(&embed_enrollment(fb, extractor, model)?.vector));
                    }
                    let e = data.enroll.get(&t.enroll_utterance_id).ok_or_else(|| {
                        Error::Data(format!("trial list names unknown enrollment {}", t.enroll_utterance_id))
                    })?;
                    scores.push(cosine_score(&to_f64(e), &test_emb[id])?);
                }
                scores
            }
        };
        ensure!(
            scores.len() == set.trials.len(),
            Shape,
            "score count does not match trial count"
        );
        out.push(ConditionScores {
            condition: set.condition,
            trials: set.trials.clone(),
            scores,
        });
    }
    Ok(out)
}

/// Held-out talkers' clean utterances by speaker, in id order.
pub(crate) fn by_speaker(utts: &[Utterance]) -> std::collections::BTreeMap<u32, Vec<&Utterance>> {
    let mut map: std::collections::BTreeMap<u32, Vec<&Utterance>> = Default::default();
    for u in utts {
        if let Some(s) = u.single_speaker() {
            map.entry(s).or_default().push(u);
        }
    }
    map
}

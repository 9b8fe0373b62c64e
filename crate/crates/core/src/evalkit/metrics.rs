use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Detection cost parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub p_tar: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_tar: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    /// Cost of the better trivial system, the normalizer of minDCF.
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_tar).min(self.c_fa * (1.0 - self.p_tar))
    }

    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.c_miss * self.p_tar * p_miss + self.c_fa * (1.0 - self.p_tar) * p_fa
    }
}

/// One operating point; trials scoring at or above `threshold` are
/// accepted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetMetrics {
    pub eer: f64,
    pub min_dcf: f64,
    pub threshold_at_eer: f64,
    pub curve: Vec<DetPoint>,
}

fn check_scores(target: &[f64], nontarget: &[f64]) -> Result<()> {
    ensure!(
        !target.is_empty() && !nontarget.is_empty(),
        InvalidArgument,
        "need at least one target and one nontarget score"
    );
    ensure!(
        target.iter().chain(nontarget).all(|s| !s.is_nan()),
        Numerical,
        "scores contain NaN"
    );
    Ok(())
}

/// Operating points at every distinct score, ascending, then at `+∞`.
pub fn det_curve(target: &[f64], nontarget: &[f64]) -> Result<Vec<DetPoint>> {
    check_scores(target, nontarget)?;
    let mut all: Vec<(f64, bool)> = target
        .iter()
        .map(|&s| (s, true))
        .chain(nontarget.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (target.len() as f64, nontarget.len() as f64);
    let mut curve = Vec::with_capacity(all.len() + 1);
    // Below the current threshold: targets missed, nontargets rejected.
    let (mut missed, mut rejected) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let theta = all[i].0;
        curve.push(DetPoint {
            threshold: theta,
            p_miss: missed as f64 / nt,
            p_fa: (nontarget.len() - rejected) as f64 / nn,
        });
        while i < all.len() && all[i].0 == theta {
            if all[i].1 {
                missed += 1;
            } else {
                rejected += 1;
            }
            i += 1;
        }
    }
    curve.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(curve)
}

/// EER value and threshold from an ascending operating-point list.
///
/// Linear interpolation between the two adjacent points whose
/// `p_fa - p_miss` changes sign.
pub(crate) fn eer_from_curve(curve: &[DetPoint]) -> (f64, f64) {
    for k in 0..curve.len() {
        let a = curve[k];
        let da = a.p_fa - a.p_miss;
        if da == 0.0 {
            return (a.p_miss, a.threshold);
        }
        let Some(&b) = curve.get(k + 1) else { break };
        let db = b.p_fa - b.p_miss;
        if da > 0.0 && db < 0.0 {
            let alpha = da / (da - db);
            let eer = a.p_miss + alpha * (b.p_miss - a.p_miss);
            let theta = if b.threshold.is_finite() {
                a.threshold + alpha * (b.threshold - a.threshold)
            } else {
                a.threshold
            };
            return (eer, theta);
        }
    }
    // Unreachable for a well-formed curve, which starts at p_fa = 1,
    // p_miss = 0 and ends at p_fa = 0, p_miss = 1.
    (0.5, f64::NAN)
}

/// Equal error rate and the threshold where it occurs.
pub fn compute_eer(target: &[f64], nontarget: &[f64]) -> Result<(f64, f64)> {
    Ok(eer_from_curve(&det_curve(target, nontarget)?))
}

/// Normalized minimum detection cost over all thresholds.
pub fn compute_mindcf(target: &[f64], nontarget: &[f64], params: DcfParams) -> Result<f64> {
    let curve = det_curve(target, nontarget)?;
    Ok(mindcf_from_curve(&curve, params))
}

fn mindcf_from_curve(curve: &[DetPoint], params: DcfParams) -> f64 {
    let best = curve
        .iter()
        .map(|p| params.cost(p.p_miss, p.p_fa))
        .fold(f64::INFINITY, f64::min);
    best / params.normalizer()
}

pub fn det_metrics(target: &[f64], nontarget: &[f64], params: DcfParams) -> Result<DetMetrics> {
    let curve = det_curve(target, nontarget)?;
    let (eer, threshold_at_eer) = eer_from_curve(&curve);
    Ok(DetMetrics {
        eer,
        min_dcf: mindcf_from_curve(&curve, params),
        threshold_at_eer,
        curve,
    })
}

/// `threshold,p_miss,p_fa` lines with a header.
pub fn det_csv(curve: &[DetPoint]) -> String {
    let mut out = String::from("threshold,p_miss,p_fa\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.p_miss, p.p_fa));
    }
    out
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(
        a.len() == b.len(),
        Shape,
        "cosine of vectors of length {} and {}",
        a.len(),
        b.len()
    );
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure!(na > 0.0 && nb > 0.0, InvalidArgument, "cosine of a zero vector");
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

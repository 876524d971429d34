//! Threshold calibration and the per-step cost rule used during policy training.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintText, Family};
use crate::corpus::{cross_labels, Pair, Trajectory};
use crate::encoders::{cosine, AlignmentModel, TokenSeq};
use crate::error::{Error, Result};
use crate::tensor::sigmoid;

/// One scored (trajectory, text) combination with its ground-truth label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub score: f64,
    pub label: bool,
    pub family: Family,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    /// `thresholds[k]` is the score cutoff producing point `k + 1`; point 0 is the empty prediction.
    pub thresholds: Vec<f64>,
}

/// ROC points obtained by lowering the cutoff through every distinct score.
pub fn roc_curve(items: &[(f64, bool)]) -> Result<Roc> {
    let pos = items.iter().filter(|x| x.1).count();
    let neg = items.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Calibration(format!("need both labels, got {pos} positive and {neg} negative")));
    }
    if let Some(x) = items.iter().find(|x| !x.0.is_finite()) {
        return Err(Error::Calibration(format!("non-finite score {}", x.0)));
    }
    let mut sorted: Vec<(f64, bool)> = items.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut roc = Roc { fpr: vec![0.0], tpr: vec![0.0], thresholds: Vec::new() };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.fpr.push(fp as f64 / neg as f64);
        roc.tpr.push(tp as f64 / pos as f64);
        roc.thresholds.push(s);
    }
    Ok(roc)
}

/// Trapezoidal area under the ROC curve.
pub fn auc(roc: &Roc) -> f64 {
    roc.fpr.windows(2).zip(roc.tpr.windows(2)).map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0).sum()
}

/// Cutoff maximizing `tpr - fpr`. The returned threshold sits halfway between
/// the chosen score and the next lower one, so `score >= beta` reproduces the point.
pub fn youden_cutoff(roc: &Roc) -> (f64, f64) {
    let mut best = 1;
    for k in 1..roc.fpr.len() {
        if roc.tpr[k] - roc.fpr[k] > roc.tpr[best] - roc.fpr[best] {
            best = k;
        }
    }
    let j = roc.tpr[best] - roc.fpr[best];
    let beta = match roc.thresholds.get(best) {
        Some(&lower) => (roc.thresholds[best - 1] + lower) / 2.0,
        None => roc.thresholds[best - 1],
    };
    (beta, j)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Classification metrics of the rule `score >= beta`.
pub fn metrics_at(items: &[(f64, bool)], beta: f64) -> Metrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for &(s, l) in items {
        match (s >= beta, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let recall = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    Metrics {
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
        recall,
        precision,
        f1: ratio(2.0 * precision * recall, precision + recall),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub beta: f64,
    pub auc: f64,
    pub youden_j: f64,
    pub metrics: Metrics,
    pub n_positive: usize,
    pub n_negative: usize,
    pub roc: Roc,
    /// Thresholds fitted per constraint family, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_beta: Option<BTreeMap<Family, f64>>,
}

pub const REPORT_FILE: &str = "calibration.json";

impl CalibrationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Calibration(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Fits the global threshold and, if `per_family`, one threshold per family
/// that has both labels.
pub fn calibrate_scores(items: &[Scored], per_family: bool) -> Result<CalibrationReport> {
    let flat: Vec<(f64, bool)> = items.iter().map(|s| (s.score, s.label)).collect();
    let roc = roc_curve(&flat)?;
    let (beta, youden_j) = youden_cutoff(&roc);
    let family_beta = per_family.then(|| {
        let mut out = BTreeMap::new();
        for f in Family::ALL {
            let sub: Vec<(f64, bool)> = items.iter().filter(|s| s.family == f).map(|s| (s.score, s.label)).collect();
            if let Ok(r) = roc_curve(&sub) {
                out.insert(f, youden_cutoff(&r).0);
            }
        }
        out
    });
    Ok(CalibrationReport {
        beta,
        auc: auc(&roc),
        youden_j,
        metrics: metrics_at(&flat, beta),
        n_positive: flat.iter().filter(|x| x.1).count(),
        n_negative: flat.iter().filter(|x| !x.1).count(),
        roc,
        family_beta,
    })
}

/// Output of the cost rule for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSignal {
    pub c_hat: f64,
    pub violated: bool,
    pub sim: f64,
}

/// Unscaled cosine between the final prefix embedding and the text embedding.
pub fn score(model: &AlignmentModel, prefix: &Trajectory, text: &ConstraintText) -> Result<f64> {
    let l = model.encode_text(&model.tokenize(&text.text)?)?;
    let h = model.encode_trajectory(&prefix.observations, &prefix.actions)?;
    Ok(cosine(h.row(h.rows() - 1), &l))
}

/// A frozen alignment model together with its violation threshold.
#[derive(Clone, Debug)]
pub struct CalibratedPredictor {
    model: AlignmentModel,
    report: CalibrationReport,
    use_family_beta: bool,
}

impl CalibratedPredictor {
    pub fn new(model: AlignmentModel, report: CalibrationReport) -> Result<Self> {
        if !report.beta.is_finite() {
            return Err(Error::Calibration(format!("threshold {} is not finite", report.beta)));
        }
        Ok(Self { use_family_beta: report.family_beta.is_some(), model, report })
    }

    pub fn model(&self) -> &AlignmentModel {
        &self.model
    }

    pub fn report(&self) -> &CalibrationReport {
        &self.report
    }

    pub fn beta(&self) -> f64 {
        self.report.beta
    }

    pub fn beta_for(&self, family: Family) -> f64 {
        if self.use_family_beta {
            if let Some(b) = self.report.family_beta.as_ref().and_then(|m| m.get(&family)) {
                return *b;
            }
        }
        self.report.beta
    }

    /// The cost rule applied to an already-encoded step `h` and text `l`.
    pub fn signal(&self, h: &[f64], l: &[f64], beta: f64) -> CostSignal {
        let sim = cosine(h, l);
        if sim >= beta {
            return CostSignal { c_hat: 1.0, violated: true, sim };
        }
        let e = sigmoid(self.model.alpha().exp() * sim);
        let h_star: Vec<f64> = h.iter().map(|x| x * e).collect();
        let c = self.model.step_cost(&h_star, l).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        CostSignal { c_hat: c, violated: false, sim }
    }

    pub fn predict_cost(&self, prefix: &Trajectory, text: &ConstraintText) -> Result<CostSignal> {
        if prefix.is_empty() {
            return Err(Error::DegenerateInput("empty trajectory prefix".into()));
        }
        let l = self.model.encode_text(&self.model.tokenize(&text.text)?)?;
        let h = self.model.encode_trajectory(&prefix.observations, &prefix.actions)?;
        Ok(self.signal(h.row(h.rows() - 1), &l, self.beta_for(text.spec.family())))
    }
}

/// Sources of labelled scores for calibration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSet {
    /// Every trajectory against every text within chunks of this size.
    pub chunk: usize,
    /// Non-violating complete episodes against their text.
    pub negatives: bool,
    /// Strict prefixes of positive pairs against their own text.
    pub prefixes: bool,
}

impl Default for CalibrationSet {
    fn default() -> Self {
        Self { chunk: 64, negatives: true, prefixes: true }
    }
}

/// Scores all trajectory-text combinations within consecutive chunks of `pairs`,
/// labelled by whether the trajectory violates the text's constraint.
pub fn cross_pair_scores(model: &AlignmentModel, pairs: &[Pair], chunk: usize) -> Result<Vec<Scored>> {
    let mut out = Vec::new();
    for c in pairs.chunks(chunk.max(1)) {
        let refs: Vec<&Pair> = c.iter().collect();
        let q = cross_labels(&refs);
        let toks = c.iter().map(|p| model.tokenize(&p.text.text)).collect::<Result<Vec<TokenSeq>>>()?;
        let tr: Vec<&TokenSeq> = toks.iter().collect();
        let l = model.encode_texts(&tr, None)?;
        let hs = c
            .iter()
            .map(|p| {
                let h = model.encode_trajectory(&p.trajectory.observations, &p.trajectory.actions)?;
                Ok(h.row(h.rows() - 1).to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, h) in hs.iter().enumerate() {
            for (j, p) in c.iter().enumerate() {
                out.push(Scored { score: cosine(h, l.row(j)), label: q.get(i, j) > 0.5, family: p.text.spec.family() });
            }
        }
    }
    Ok(out)
}

/// Scores every step of each pair against its own text; only the final step
/// of a positive pair is labelled as a violation.
pub fn prefix_scores(model: &AlignmentModel, pairs: &[Pair], include_last: bool) -> Result<Vec<Scored>> {
    let mut out = Vec::new();
    for p in pairs {
        let l = model.encode_text(&model.tokenize(&p.text.text)?)?;
        let h = model.encode_trajectory(&p.trajectory.observations, &p.trajectory.actions)?;
        let t = h.rows();
        let upto = if include_last || !p.positive { t } else { t - 1 };
        for k in 0..upto {
            out.push(Scored {
                score: cosine(h.row(k), &l),
                label: p.positive && k == t - 1,
                family: p.text.spec.family(),
            });
        }
    }
    Ok(out)
}

pub fn calibration_scores(
    model: &AlignmentModel,
    pairs: &[Pair],
    negatives: &[Pair],
    set: &CalibrationSet,
) -> Result<Vec<Scored>> {
    let mut out = cross_pair_scores(model, pairs, set.chunk)?;
    if set.negatives {
        out.extend(prefix_scores(model, negatives, false)?.into_iter().filter(|s| !s.label));
    }
    if set.prefixes {
        out.extend(prefix_scores(model, pairs, false)?);
    }
    Ok(out)
}

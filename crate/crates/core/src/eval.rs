//! Pareto frontier, per-step cost breakdowns and zero-shot transfer scoring.

use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintText;
use crate::corpus::{build_corpus, CorpusConfig, Pair, Trajectory};
use crate::encoders::{cosine, AlignmentModel};
use crate::error::{Error, Result};
use crate::grid::{GridConfig, Hazard};
use crate::predictor::{auc, cross_pair_scores, metrics_at, roc_curve, Metrics, Roc};
use crate::saferl::Mode;
use crate::trainer::ca_from_embeddings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub avg_reward: f64,
    pub avg_cost: f64,
    pub run_id: String,
    pub mode: Mode,
}

/// `a` dominates `b` when it is no worse on both axes and better on one.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.avg_reward >= b.avg_reward && a.avg_cost <= b.avg_cost && (a.avg_reward > b.avg_reward || a.avg_cost < b.avg_cost)
}

/// Non-dominated points, ordered by decreasing reward. Identical points are all kept.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .avg_reward
            .total_cmp(&points[a].avg_reward)
            .then(points[a].avg_cost.total_cmp(&points[b].avg_cost))
            .then(a.cmp(&b))
    });
    let mut out = Vec::new();
    let mut best_cost = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let r = points[order[i]].avg_reward;
        let group_min = points[order[i]].avg_cost;
        let mut j = i;
        while j < order.len() && points[order[j]].avg_reward == r {
            if points[order[j]].avg_cost == group_min && group_min < best_cost {
                out.push(points[order[j]].clone());
            }
            j += 1;
        }
        best_cost = best_cost.min(group_min);
        i = j;
    }
    out
}

/// One row of the per-step cost breakdown of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub t: usize,
    pub events: Vec<Hazard>,
    pub sim: f64,
    pub e: f64,
    pub c_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub text: String,
    /// Steps `1..T-1`.
    pub rows: Vec<HeatmapRow>,
    /// Final step `T`, where the violation is judged.
    pub terminal_t: usize,
    pub terminal_sim: f64,
    pub violated: bool,
    pub episode_cost: f64,
}

/// Cost assignment over every step of `trajectory` for `text`; `beta` decides
/// the terminal flag.
pub fn heatmap(model: &AlignmentModel, trajectory: &Trajectory, text: &ConstraintText, beta: f64) -> Result<Heatmap> {
    if trajectory.is_empty() {
        return Err(Error::DegenerateInput("empty trajectory".into()));
    }
    let h = model.encode_trajectory(&trajectory.observations, &trajectory.actions)?;
    let l = model.encode_text(&model.tokenize(&text.text)?)?;
    let ca = ca_from_embeddings(model, &h, &l);
    let t_len = h.rows();
    let rows = (0..t_len - 1)
        .map(|t| HeatmapRow {
            t: t + 1,
            events: trajectory.events[t].clone(),
            sim: cosine(h.row(t), &l),
            e: ca.e[t],
            c_hat: ca.c_hat[t],
        })
        .collect();
    let terminal_sim = cosine(h.row(t_len - 1), &l);
    Ok(Heatmap {
        text: text.text.clone(),
        rows,
        terminal_t: t_len,
        terminal_sim,
        violated: terminal_sim >= beta,
        episode_cost: ca.big_c,
    })
}

pub fn heatmap_csv(h: &Heatmap) -> String {
    let mut s = String::from("t,events,sim,e,c_hat,terminal\n");
    for r in &h.rows {
        let ev: Vec<&str> = r.events.iter().map(|e| e.name()).collect();
        s.push_str(&format!("{},{},{},{},{},0\n", r.t, ev.join("+"), r.sim, r.e, r.c_hat));
    }
    s.push_str(&format!("{},,{},,,{}\n", h.terminal_t, h.terminal_sim, u8::from(h.violated)));
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub pairs: usize,
    pub auc: f64,
    pub beta: f64,
    pub metrics: Metrics,
    pub roc: Roc,
}

/// Scores a model against labelled pairs generated in another environment,
/// keeping the threshold fitted in the training domain.
pub fn transfer_auc(model: &AlignmentModel, pairs: &[Pair], beta: f64, chunk: usize) -> Result<TransferReport> {
    let scores = cross_pair_scores(model, pairs, chunk)?;
    let flat: Vec<(f64, bool)> = scores.iter().map(|s| (s.score, s.label)).collect();
    let roc = roc_curve(&flat)?;
    Ok(TransferReport { pairs: pairs.len(), auc: auc(&roc), beta, metrics: metrics_at(&flat, beta), roc })
}

/// Positive pairs from freshly generated LavaWall episodes.
pub fn lavawall_pairs(horizon: usize, corpus: &CorpusConfig) -> Result<Vec<Pair>> {
    let env = GridConfig { horizon, ..GridConfig::lavawall() };
    let c = build_corpus(&env, corpus)?;
    Ok(c.train.into_iter().chain(c.test).collect())
}

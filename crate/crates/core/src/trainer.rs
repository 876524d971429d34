//! Contrastive, within-trajectory and cost-assignment losses and the epoch loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{batch_from, derive_seed, Batch, CorpusSplit, Pair};
use crate::encoders::{cosine_rows_graph, AlignmentModel, TokenSeq};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_into, sigmoid, softmax, Adam, AdamConfig, AdamState, Graph, Matrix, Var};

pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetNorm {
    /// Softmax over each binary row of `q`.
    #[default]
    Softmax,
    /// Each binary row divided by its sum.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_grad_norm: Option<f64>,
    pub target_norm: TargetNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 30,
            learning_rate: 3e-4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: Some(1.0),
            target_norm: TargetNorm::Softmax,
        }
    }
}

impl TrainConfig {
    /// The hyperparameters reported for the full-scale setup.
    pub fn full_scale() -> Self {
        Self { batch_size: 194, epochs: 32, learning_rate: 1e-6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    pub l_mc: f64,
    pub l_wt: f64,
    pub l_ca: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub batch_size: usize,
}

/// Target distribution for one binary row of `q`.
pub fn target_distribution(q_row: &[f64], norm: TargetNorm) -> Vec<f64> {
    match norm {
        TargetNorm::Softmax => softmax(q_row),
        TargetNorm::Sum => {
            let s: f64 = q_row.iter().sum();
            q_row.iter().map(|x| x / s).collect()
        }
    }
}

/// Row-wise log of the target distribution, floored away from zero.
pub fn log_targets(q: &Matrix, norm: TargetNorm) -> Matrix {
    let mut out = Matrix::zeros(q.rows(), q.cols());
    for r in 0..q.rows() {
        match norm {
            TargetNorm::Softmax => log_softmax_into(q.row(r), out.row_mut(r)),
            TargetNorm::Sum => {
                let t = target_distribution(q.row(r), norm);
                for (o, x) in out.row_mut(r).iter_mut().zip(t) {
                    *o = x.max(LOG_EPS).ln();
                }
            }
        }
    }
    out
}

/// `KL(p || t)` for discrete distributions, with `t` clamped inside the log.
pub fn kl(p: &[f64], t: &[f64]) -> f64 {
    p.iter().zip(t).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &ti)| pi * (pi.ln() - ti.max(LOG_EPS).ln())).sum()
}

/// Mean over rows of `KL(softmax(s_r) || target_r)`.
fn kl_rows_graph(g: &mut Graph, s: Var, q: &Matrix, norm: TargetNorm) -> Var {
    let logp = g.log_softmax_rows(s);
    let p = g.exp(logp);
    let logt = g.constant(log_targets(q, norm));
    let diff = g.sub(logp, logt);
    let prod = g.mul(p, diff);
    let rows = g.sum_cols(prod);
    g.mean_all(rows)
}

/// Symmetric contrastive loss from the scaled similarity matrix `s[i][j] = sim(traj_i, text_j)`.
pub fn mc_loss_graph(g: &mut Graph, s: Var, q_traj_to_text: &Matrix, q_text_to_traj: &Matrix, norm: TargetNorm) -> Var {
    let a = kl_rows_graph(g, s, q_traj_to_text, norm);
    let st = g.transpose(s);
    let b = kl_rows_graph(g, st, q_text_to_traj, norm);
    let sum = g.add(a, b);
    g.scale(sum, 0.5)
}

/// Within-trajectory loss from the per-step scaled similarities of one pair.
pub fn wt_loss_from_sims(sims: &[f64]) -> f64 {
    let t = sims.len();
    let mut logp = vec![0.0; t];
    log_softmax_into(sims, &mut logp);
    let mut s = 0.0;
    for &lp in &logp[..t - 1] {
        s += (1.0 - lp.exp()).max(LOG_EPS).ln();
    }
    -(s + logp[t - 1]) / t as f64
}

fn wt_loss_graph(g: &mut Graph, sims_col: Var, start: usize, len: usize) -> Var {
    let s = g.slice_rows(sims_col, start, len);
    let row = g.transpose(s);
    let logp = g.log_softmax_rows(row);
    let last = g.slice_cols(logp, len - 1, 1);
    let total = if len > 1 {
        let p = g.exp(logp);
        let head = g.slice_cols(p, 0, len - 1);
        let l1m = g.log1m(head, LOG_EPS);
        let sum = g.sum_all(l1m);
        g.add(sum, last)
    } else {
        last
    };
    g.scale(total, -1.0 / len as f64)
}

/// Per-pair cost-assignment quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct CaOutput {
    /// Attention score per step, `T` entries.
    pub e: Vec<f64>,
    /// Assigned step costs for steps `1..T-1`.
    pub c_hat: Vec<f64>,
    /// Predicted episodic cost.
    pub big_c: f64,
}

/// Graph nodes of one batch forward pass.
pub struct BatchForward {
    pub total: Var,
    pub l_mc: Var,
    pub l_wt: Var,
    pub l_ca: Var,
    pub alpha: Var,
    /// Scaled per-step similarities, `(rows, 1)`.
    pub sims: Var,
    pub e: Var,
    pub c_hat: Var,
    pub big_c: Var,
    pub segs: Vec<(usize, usize)>,
}

/// Builds the full three-part loss for a batch of positive pairs.
pub fn forward_batch(
    model: &AlignmentModel,
    g: &mut Graph,
    pairs: &[&Pair],
    toks: &[&TokenSeq],
    q_traj_to_text: &Matrix,
    q_text_to_traj: &Matrix,
    norm: TargetNorm,
) -> Result<BatchForward> {
    let n = pairs.len();
    let seqs: Vec<_> = pairs.iter().map(|p| (&p.trajectory.observations[..], &p.trajectory.actions[..])).collect();
    let packed = model.encode_trajectories_graph(g, &seqs, None)?;
    let l = model.encode_texts_graph(g, toks, None)?;
    let alpha = model.alpha_var(g);
    let ea = g.exp(alpha);

    let h_last = g.gather_rows(packed.h, packed.last_rows());
    let hn = g.row_normalize(h_last, crate::encoders::COS_EPS);
    let ln = g.row_normalize(l, crate::encoders::COS_EPS);
    let cos = g.matmul_t(hn, ln);
    let s = g.scale_by(cos, ea);
    let l_mc = mc_loss_graph(g, s, q_traj_to_text, q_text_to_traj, norm);

    let owner = packed.row_owner();
    let l_rows = g.gather_rows(l, owner.clone());
    let cos_t = cosine_rows_graph(g, packed.h, l_rows);
    let sims = g.scale_by(cos_t, ea);
    let wts: Vec<Var> = packed.segs.iter().map(|&(start, len)| wt_loss_graph(g, sims, start, len)).collect();
    let wt_all = g.concat_rows(&wts);
    let l_wt = g.mean_all(wt_all);

    // Cost assignment sees only detached encoder outputs.
    let hd = g.detach(packed.h);
    let ld = g.detach(l);
    let sd = g.detach(sims);
    let e = g.sigmoid(sd);
    let h_star = g.mul_col(hd, e);
    let ld_rows = g.gather_rows(ld, owner);
    let x = g.concat_cols(&[h_star, ld_rows]);
    let heads = model.head_vars(g);
    let z = g.matmul(x, heads.fc_w);
    let z = g.add_row(z, heads.fc_b);
    let c_hat = g.sigmoid(z);
    let rows = g.value(c_hat).rows();
    let mut sel = Matrix::zeros(n, rows);
    for (i, &(start, len)) in packed.segs.iter().enumerate() {
        for r in start..start + len - 1 {
            sel.set(i, r, 1.0);
        }
    }
    let sel = g.constant(sel);
    let sums = g.matmul(sel, c_hat);
    let ze = g.matmul(ld, heads.fe_w);
    let ze = g.add_row(ze, heads.fe_b);
    let big_c = g.sigmoid(ze);
    let diff = g.sub(sums, big_c);
    let sq = g.square(diff);
    let l_ca = g.mean_all(sq);

    let t = g.add(l_mc, l_wt);
    let total = g.add(t, l_ca);
    Ok(BatchForward { total, l_mc, l_wt, l_ca, alpha, sims, e, c_hat, big_c, segs: packed.segs })
}

fn tokenize_all(model: &AlignmentModel, pairs: &[&Pair]) -> Result<Vec<TokenSeq>> {
    pairs.iter().map(|p| model.tokenize(&p.text.text)).collect()
}

/// Contrastive loss of a batch.
pub fn mc_loss(model: &AlignmentModel, batch: &Batch<'_>, norm: TargetNorm) -> Result<f64> {
    let toks = tokenize_all(model, &batch.pairs)?;
    let refs: Vec<&TokenSeq> = toks.iter().collect();
    let mut g = Graph::new();
    let f = forward_batch(model, &mut g, &batch.pairs, &refs, &batch.q_traj_to_text, &batch.q_text_to_traj, norm)?;
    Ok(g.scalar(f.l_mc))
}

fn single(model: &AlignmentModel, pair: &Pair) -> Result<(Graph, BatchForward)> {
    let toks = model.tokenize(&pair.text.text)?;
    let mut g = Graph::new();
    let one = Matrix::scalar(1.0);
    let f = forward_batch(model, &mut g, &[pair], &[&toks], &one, &one, TargetNorm::Softmax)?;
    Ok((g, f))
}

pub fn wt_loss(model: &AlignmentModel, pair: &Pair) -> Result<f64> {
    let (g, f) = single(model, pair)?;
    Ok(g.scalar(f.l_wt))
}

pub fn ca_forward(model: &AlignmentModel, pair: &Pair) -> Result<CaOutput> {
    let (g, f) = single(model, pair)?;
    let t = pair.trajectory.len();
    Ok(CaOutput {
        e: g.value(f.e).data().to_vec(),
        c_hat: g.value(f.c_hat).data()[..t - 1].to_vec(),
        big_c: g.value(f.big_c).item(),
    })
}

pub fn ca_loss(model: &AlignmentModel, pair: &Pair) -> Result<f64> {
    let (g, f) = single(model, pair)?;
    Ok(g.scalar(f.l_ca))
}

/// Mirrors the graph's cost-assignment path on plain vectors.
pub fn ca_from_embeddings(model: &AlignmentModel, h: &Matrix, l: &[f64]) -> CaOutput {
    let alpha = model.alpha();
    let e: Vec<f64> = (0..h.rows()).map(|t| sigmoid(crate::encoders::similarity(h.row(t), l, alpha))).collect();
    let c_hat = (0..h.rows().saturating_sub(1))
        .map(|t| {
            let hs: Vec<f64> = h.row(t).iter().map(|x| x * e[t]).collect();
            model.step_cost(&hs, l)
        })
        .collect();
    CaOutput { e, c_hat, big_c: model.episode_cost(l) }
}

/// Where training writes checkpoints and the metrics log.
#[derive(Clone, Debug)]
pub struct TrainIo {
    pub dir: PathBuf,
    pub resume: Option<PathBuf>,
}

pub fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

pub const METRICS_FILE: &str = "ttct_metrics.jsonl";

fn training_checkpoint(model: &AlignmentModel, adam: &AdamState, epoch: usize, cfg: &TrainConfig) -> Checkpoint {
    let mut extra = serde_json::Map::new();
    extra.insert("epoch".into(), epoch.into());
    extra.insert("adam_step".into(), adam.step.into());
    extra.insert("train".into(), serde_json::to_value(cfg).expect("config serializes"));
    let mut c = model.to_checkpoint("ttct-training", extra);
    for (i, name) in model.params.names().iter().enumerate() {
        c.tensors.push((format!("adam.m.{name}"), adam.m[i].clone()));
        c.tensors.push((format!("adam.v.{name}"), adam.v[i].clone()));
    }
    c
}

fn resume_state(path: &Path) -> Result<(AlignmentModel, AdamState, usize)> {
    let c = Checkpoint::load(path)?;
    let model = AlignmentModel::from_checkpoint(&c)?;
    let epoch = c
        .meta
        .get("epoch")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("checkpoint has no epoch; not a training checkpoint".into()))?
        as usize;
    let step = c.meta.get("adam_step").and_then(|v| v.as_u64()).unwrap_or(0);
    let m: Vec<(String, Matrix)> = c.with_prefix("adam.m.");
    let v: Vec<(String, Matrix)> = c.with_prefix("adam.v.");
    let order = |xs: Vec<(String, Matrix)>| -> Result<Vec<Matrix>> {
        model
            .params
            .names()
            .iter()
            .map(|n| {
                xs.iter()
                    .find(|(k, _)| k == n)
                    .map(|(_, m)| m.clone())
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {n}")))
            })
            .collect()
    };
    let state = AdamState { step, m: order(m)?, v: order(v)? };
    Ok((model, state, epoch))
}

/// Summary of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AlignmentModel,
    pub reports: Vec<LossReport>,
}

/// Trains on `corpus.train`. Epochs are numbered from 1; each epoch draws its
/// own shuffle from `(seed, epoch)` so a resumed run continues identically.
pub fn train(
    model: AlignmentModel,
    corpus: &CorpusSplit,
    cfg: &TrainConfig,
    io: Option<&TrainIo>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::DegenerateInput("training split is empty".into()));
    }
    let (mut model, mut adam, start_epoch) = match io.and_then(|io| io.resume.as_deref()) {
        Some(path) => {
            let (m, state, epoch) = resume_state(path)?;
            (m, Adam::from_state(cfg.adam(), state), epoch)
        }
        None => {
            let adam = Adam::new(cfg.adam(), &model.params);
            (model, adam, 0)
        }
    };
    let toks = corpus.train.iter().map(|p| model.tokenize(&p.text.text)).collect::<Result<Vec<_>>>()?;
    let mut metrics = match io {
        Some(io) => {
            std::fs::create_dir_all(&io.dir)?;
            let path = io.dir.join(METRICS_FILE);
            let f = if io.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(path)?
            } else {
                File::create(path)?
            };
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let mut reports = Vec::new();
    for epoch in start_epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 10, epoch as u64)));
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = batch_from(chunk.iter().map(|&i| &corpus.train[i]).collect())?;
            let tk: Vec<&TokenSeq> = chunk.iter().map(|&i| &toks[i]).collect();
            let mut g = Graph::new();
            let f = forward_batch(
                &model,
                &mut g,
                &batch.pairs,
                &tk,
                &batch.q_traj_to_text,
                &batch.q_text_to_traj,
                cfg.target_norm,
            )?;
            let report = LossReport {
                epoch,
                step,
                l_mc: g.scalar(f.l_mc),
                l_wt: g.scalar(f.l_wt),
                l_ca: g.scalar(f.l_ca),
                l_total: g.scalar(f.total),
                alpha: g.scalar(f.alpha),
                batch_size: batch.len(),
            };
            if !report.l_total.is_finite() {
                let ids: Vec<u64> = batch.pairs.iter().map(|p| p.traj_id).collect();
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} step {step} (l_mc={}, l_wt={}, l_ca={}); batch trajectories {ids:?}",
                    report.l_mc, report.l_wt, report.l_ca
                )));
            }
            let grads = g.backward(f.total);
            if !grads.all_finite() {
                return Err(Error::Training(format!("non-finite gradient at epoch {epoch} step {step}")));
            }
            adam.step(&mut model.params, &grads);
            if let Some(w) = metrics.as_mut() {
                serde_json::to_writer(&mut *w, &report).map_err(|e| Error::Io(e.into()))?;
                w.write_all(b"\n")?;
            }
            reports.push(report);
        }
        if let Some(io) = io {
            if let Some(w) = metrics.as_mut() {
                w.flush()?;
            }
            training_checkpoint(&model, adam.state(), epoch, cfg).save(&epoch_checkpoint(&io.dir, epoch))?;
        }
    }
    Ok(TrainOutcome { model, reports })
}

/// Mean of each loss component per epoch, in epoch order.
pub fn epoch_means(reports: &[LossReport]) -> Vec<(usize, LossReport)> {
    let mut out: Vec<(usize, LossReport)> = Vec::new();
    for r in reports {
        match out.last_mut() {
            Some((n, acc)) if acc.epoch == r.epoch => {
                *n += 1;
                acc.l_mc += r.l_mc;
                acc.l_wt += r.l_wt;
                acc.l_ca += r.l_ca;
                acc.l_total += r.l_total;
                acc.alpha = r.alpha;
                acc.batch_size += r.batch_size;
            }
            _ => out.push((1, r.clone())),
        }
    }
    out.into_iter()
        .map(|(n, mut r)| {
            let k = n as f64;
            r.l_mc /= k;
            r.l_wt /= k;
            r.l_ca /= k;
            r.l_total /= k;
            (n, r)
        })
        .collect()
}

//! Two-tower encoders: a causal transformer over (observation, action) steps
//! and a bidirectional transformer over constraint text, joined by a
//! temperature-scaled cosine similarity.
//!
//! Every forward computation exists twice: as a differentiable graph over
//! packed batches, and as a row-at-a-time key/value-cached path used during
//! rollouts. Both are built from the same primitives in the same order, so an
//! incrementally encoded prefix reproduces the batched values bit for bit.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{number_words, render_with_template, templates_for, ConstraintSpec};
use crate::error::{Error, Result};
use crate::grid::{Hazard, Observation, CHANNEL_CARDINALITY, NUM_ACTIONS, OBS_CHANNELS, OBS_LEN};
use crate::tensor::{attend_row, gelu, layer_norm_forward, matmul, Graph, Matrix, ParamStore, Var};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
/// Action index of the padding step that opens a policy history.
pub const PAD_ACTION: u8 = NUM_ACTIONS as u8;
pub const COS_EPS: f64 = 1e-8;
const LN_EPS: f64 = 1e-5;

/// One-hot width of a flattened observation.
pub const STATE_FEATURES: usize = 49 * (CHANNEL_CARDINALITY[0] + CHANNEL_CARDINALITY[1] + CHANNEL_CARDINALITY[2]);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Word-level vocabulary. Id 0 is padding, id 1 is the unknown word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
    max_len: usize,
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|chunk| {
        let w = chunk.to_lowercase().replace('\u{2019}', "'").trim_matches(|c: char| !c.is_alphanumeric()).to_string();
        (!w.is_empty()).then_some(w)
    })
}

impl Vocab {
    /// Every word any template can produce, plus numbers as digits and words.
    pub fn build(max_len: usize) -> Vocab {
        let mut words = BTreeSet::new();
        let mut specs = Vec::new();
        for &e in &Hazard::ALL {
            for limit in [0, 3] {
                specs.push(ConstraintSpec::Quantitative { entity: e, limit });
            }
            for &f in &Hazard::ALL {
                if f != e {
                    specs.push(ConstraintSpec::Sequential { first: e, then: f });
                    let heal = Hazard::ALL.into_iter().find(|&h| h != e && h != f).expect("three hazards");
                    specs.push(ConstraintSpec::Mathematical {
                        hp: 7,
                        deltas: [(e, -2), (f, -1), (heal, 1)].into_iter().collect(),
                    });
                }
            }
        }
        for spec in &specs {
            for t in templates_for(spec) {
                let text = render_with_template(spec, t).expect("applicable template");
                words.extend(split_words(&text.text));
            }
        }
        for (i, w) in number_words().iter().enumerate() {
            words.insert((*w).to_string());
            words.insert(i.to_string());
        }
        Self::from_words(words.into_iter().collect(), max_len).expect("generated vocabulary is valid")
    }

    /// `words` excludes the two reserved entries.
    pub fn from_words(words: Vec<String>, max_len: usize) -> Result<Vocab> {
        let mut all = vec!["<pad>".to_string(), "<unk>".to_string()];
        all.extend(words);
        let mut index = HashMap::new();
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocab { words: all, index, max_len })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Entries after the reserved ones, in id order.
    pub fn words(&self) -> &[String] {
        &self.words[2..]
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let ids: Vec<u32> =
            split_words(text).take(self.max_len).map(|w| self.index.get(&w).copied().unwrap_or(UNK_ID)).collect();
        if ids.is_empty() {
            return Err(Error::DegenerateInput("cannot tokenize empty text".into()));
        }
        Ok(TokenSeq { ids })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Longest trajectory the positional table covers (a policy history adds one padding step).
    pub max_traj_len: usize,
    pub max_text_len: usize,
    pub alpha_init: f64,
    /// Upper clamp on the log-temperature.
    pub alpha_max: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            max_traj_len: 200,
            max_text_len: 64,
            alpha_init: (1.0f64 / 0.07).ln(),
            alpha_max: 100f64.ln(),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be positive and even".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.layers == 0 || self.ff_dim == 0 || self.max_traj_len == 0 || self.max_text_len == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !self.alpha_init.is_finite() || self.alpha_init > self.alpha_max {
            return Err(Error::Config("alpha_init must be finite and <= alpha_max".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Tower {
    pos: usize,
    blocks: Vec<Block>,
    lnf_g: usize,
    lnf_b: usize,
}

fn add_tower(s: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, positions: usize, rng: &mut impl Rng) -> Tower {
    let d = cfg.d_model;
    let pos = s.add_normal(format!("{prefix}.pos"), positions, d, 0.02, rng);
    let blocks = (0..cfg.layers)
        .map(|l| {
            let p = format!("{prefix}.{l}");
            Block {
                ln1_g: s.add_filled(format!("{p}.ln1.g"), 1, d, 1.0),
                ln1_b: s.add_zeros(format!("{p}.ln1.b"), 1, d),
                wq: s.add_xavier(format!("{p}.wq"), d, d, rng),
                wk: s.add_xavier(format!("{p}.wk"), d, d, rng),
                wv: s.add_xavier(format!("{p}.wv"), d, d, rng),
                wo: s.add_xavier(format!("{p}.wo"), d, d, rng),
                bo: s.add_zeros(format!("{p}.bo"), 1, d),
                ln2_g: s.add_filled(format!("{p}.ln2.g"), 1, d, 1.0),
                ln2_b: s.add_zeros(format!("{p}.ln2.b"), 1, d),
                w1: s.add_xavier(format!("{p}.w1"), d, cfg.ff_dim, rng),
                b1: s.add_zeros(format!("{p}.b1"), 1, cfg.ff_dim),
                w2: s.add_xavier(format!("{p}.w2"), cfg.ff_dim, d, rng),
                b2: s.add_zeros(format!("{p}.b2"), 1, d),
            }
        })
        .collect();
    Tower {
        pos,
        blocks,
        lnf_g: s.add_filled(format!("{prefix}.lnf.g"), 1, d, 1.0),
        lnf_b: s.add_zeros(format!("{prefix}.lnf.b"), 1, d),
    }
}

/// Trajectory encoder, text encoder, temperature and cost heads in one store.
#[derive(Clone, Debug)]
pub struct AlignmentModel {
    pub cfg: EncoderConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    state_table: usize,
    state_bias: usize,
    action_table: usize,
    traj: Tower,
    tok_table: usize,
    text: Tower,
    alpha: usize,
    fe_w: usize,
    fe_b: usize,
    fc_w: usize,
    fc_b: usize,
}

/// Parameters of the cost-assignment heads.
pub const HEAD_PARAMS: [&str; 4] = ["head.fe.w", "head.fe.b", "head.fc.w", "head.fc.b"];

impl AlignmentModel {
    pub fn new(cfg: EncoderConfig, vocab: Vocab, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if vocab.max_len() > cfg.max_text_len {
            return Err(Error::Config("vocabulary max_len exceeds max_text_len".into()));
        }
        let d = cfg.d_model;
        let half = d / 2;
        let mut s = ParamStore::new();
        let state_table = s.add_normal("traj.state.table", STATE_FEATURES, half, 0.02, rng);
        let state_bias = s.add_zeros("traj.state.bias", 1, half);
        let action_table = s.add_normal("traj.action.table", NUM_ACTIONS + 1, half, 0.02, rng);
        let traj = add_tower(&mut s, "traj", &cfg, cfg.max_traj_len + 1, rng);
        let tok_table = s.add_normal("text.tok.table", vocab.len(), d, 0.02, rng);
        let text = add_tower(&mut s, "text", &cfg, cfg.max_text_len, rng);
        let alpha = s.add_filled("alpha", 1, 1, cfg.alpha_init);
        let fe_w = s.add_xavier(HEAD_PARAMS[0], d, 1, rng);
        let fe_b = s.add_zeros(HEAD_PARAMS[1], 1, 1);
        let fc_w = s.add_xavier(HEAD_PARAMS[2], 2 * d, 1, rng);
        // Step costs start near 1 / max_traj_len so their sum is O(1).
        let fc_b = s.add_filled(HEAD_PARAMS[3], 1, 1, -(cfg.max_traj_len as f64).ln());
        Ok(Self {
            cfg,
            vocab,
            params: s,
            state_table,
            state_bias,
            action_table,
            traj,
            tok_table,
            text,
            alpha,
            fe_w,
            fe_b,
            fc_w,
            fc_b,
        })
    }

    pub fn d(&self) -> usize {
        self.cfg.d_model
    }

    pub fn alpha(&self) -> f64 {
        self.params.get(self.alpha).item().min(self.cfg.alpha_max)
    }

    /// Names of every parameter that belongs to an encoder or embedder.
    pub fn encoder_param_names(&self) -> Vec<&str> {
        self.params
            .names()
            .iter()
            .map(String::as_str)
            .filter(|n| n.starts_with("traj.") || n.starts_with("text."))
            .collect()
    }

    /// Digest over the trajectory- and text-encoder parameters only.
    pub fn encoder_digest(&self) -> String {
        let mut sub = ParamStore::new();
        for (name, m) in self.params.iter() {
            if name.starts_with("traj.") || name.starts_with("text.") {
                sub.add(name, m.clone());
            }
        }
        sub.digest()
    }

    pub fn alpha_var(&self, g: &mut Graph) -> Var {
        let a = self.params.var(g, self.alpha);
        g.clamp(a, f64::NEG_INFINITY, self.cfg.alpha_max)
    }

    /// Flat one-hot feature index of every (cell, channel) of an observation.
    pub fn state_indices(obs: &Observation, out: &mut Vec<usize>) {
        let offsets = [0, CHANNEL_CARDINALITY[0], CHANNEL_CARDINALITY[0] + CHANNEL_CARDINALITY[1]];
        let width = offsets[2] + CHANNEL_CARDINALITY[2];
        for (i, &v) in obs.0.iter().enumerate() {
            let cell = i / OBS_CHANNELS;
            let ch = i % OBS_CHANNELS;
            out.push(cell * width + offsets[ch] + v as usize);
        }
    }

    /// Packs several step sequences and runs the causal encoder. Row ranges of
    /// the result follow `segs` in input order.
    pub fn encode_trajectories_graph(
        &self,
        g: &mut Graph,
        seqs: &[(&[Observation], &[u8])],
        lora: Option<&Lora>,
    ) -> Result<Packed> {
        let mut idx = Vec::new();
        let mut actions = Vec::new();
        let mut positions = Vec::new();
        let mut segs = Vec::with_capacity(seqs.len());
        for (obs, acts) in seqs {
            if obs.is_empty() {
                return Err(Error::DegenerateInput("trajectory of length 0".into()));
            }
            if obs.len() != acts.len() {
                return Err(Error::DegenerateInput("observation/action length mismatch".into()));
            }
            if obs.len() > self.cfg.max_traj_len + 1 {
                return Err(Error::DegenerateInput(format!(
                    "trajectory of length {} exceeds max_traj_len {}",
                    obs.len(),
                    self.cfg.max_traj_len
                )));
            }
            segs.push((positions.len(), obs.len()));
            for (t, (o, &a)) in obs.iter().zip(acts.iter()).enumerate() {
                Self::state_indices(o, &mut idx);
                actions.push(a as usize);
                positions.push(t);
            }
        }
        let st = self.params.var(g, self.state_table);
        let s = g.embed_sum(st, idx, OBS_LEN);
        let sb = self.params.var(g, self.state_bias);
        let s = g.add_row(s, sb);
        let at = self.params.var(g, self.action_table);
        let a = g.embed_sum(at, actions, 1);
        let v = g.concat_cols(&[s, a]);
        let h = self.tower_graph(g, &self.traj, v, positions, segs.clone(), true, lora.map(|l| &l.traj[..]), lora);
        Ok(Packed { h, segs })
    }

    /// Mean-pooled text embeddings, one row per sequence.
    pub fn encode_texts_graph(&self, g: &mut Graph, toks: &[&TokenSeq], lora: Option<&Lora>) -> Result<Var> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segs = Vec::new();
        for t in toks {
            if t.is_empty() || t.len() > self.cfg.max_text_len {
                return Err(Error::DegenerateInput(format!("token sequence of length {}", t.len())));
            }
            if let Some(&bad) = t.ids.iter().find(|&&i| i as usize >= self.vocab.len()) {
                return Err(Error::DegenerateInput(format!("token id {bad} outside vocabulary")));
            }
            segs.push((ids.len(), t.len()));
            for (p, &i) in t.ids.iter().enumerate() {
                ids.push(i as usize);
                positions.push(p);
            }
        }
        let tt = self.params.var(g, self.tok_table);
        let x = g.embed_sum(tt, ids, 1);
        let rows = g.value(x).rows();
        let h = self.tower_graph(g, &self.text, x, positions, segs.clone(), false, lora.map(|l| &l.text[..]), lora);
        let mut pool = Matrix::zeros(segs.len(), rows);
        for (i, &(start, len)) in segs.iter().enumerate() {
            for r in start..start + len {
                pool.set(i, r, 1.0 / len as f64);
            }
        }
        let pool = g.constant(pool);
        Ok(g.matmul(pool, h))
    }

    #[allow(clippy::too_many_arguments)]
    fn tower_graph(
        &self,
        g: &mut Graph,
        tower: &Tower,
        x: Var,
        positions: Vec<usize>,
        segs: Vec<(usize, usize)>,
        causal: bool,
        adapters: Option<&[LoraBlock]>,
        lora: Option<&Lora>,
    ) -> Var {
        let p = &self.params;
        let pos_t = p.var(g, tower.pos);
        let pos = g.embed_sum(pos_t, positions, 1);
        let mut x = g.add(x, pos);
        for (l, b) in tower.blocks.iter().enumerate() {
            let (g1, b1) = (p.var(g, b.ln1_g), p.var(g, b.ln1_b));
            let h = g.layer_norm(x, g1, b1, LN_EPS);
            let wq = p.var(g, b.wq);
            let mut q = g.matmul(h, wq);
            let wk = p.var(g, b.wk);
            let k = g.matmul(h, wk);
            let wv = p.var(g, b.wv);
            let mut v = g.matmul(h, wv);
            if let (Some(ad), Some(lora)) = (adapters, lora) {
                if let Some(blk) = ad.get(l) {
                    q = lora.apply_graph(g, h, q, blk.aq, blk.bq);
                    v = lora.apply_graph(g, h, v, blk.av, blk.bv);
                }
            }
            let att = g.attention_segments(q, k, v, self.cfg.heads, causal, segs.clone());
            let wo = p.var(g, b.wo);
            let o = g.matmul(att, wo);
            let bo = p.var(g, b.bo);
            let o = g.add_row(o, bo);
            x = g.add(x, o);
            let (g2, b2) = (p.var(g, b.ln2_g), p.var(g, b.ln2_b));
            let h2 = g.layer_norm(x, g2, b2, LN_EPS);
            let w1 = p.var(g, b.w1);
            let f = g.matmul(h2, w1);
            let bb1 = p.var(g, b.b1);
            let f = g.add_row(f, bb1);
            let f = g.gelu(f);
            let w2 = p.var(g, b.w2);
            let f = g.matmul(f, w2);
            let bb2 = p.var(g, b.b2);
            let f = g.add_row(f, bb2);
            x = g.add(x, f);
        }
        let (gf, bf) = (p.var(g, tower.lnf_g), p.var(g, tower.lnf_b));
        g.layer_norm(x, gf, bf, LN_EPS)
    }

    /// Per-step embeddings `H` (T x d) of one trajectory.
    pub fn encode_trajectory(&self, observations: &[Observation], actions: &[u8]) -> Result<Matrix> {
        let mut g = Graph::new();
        let p = self.encode_trajectories_graph(&mut g, &[(observations, actions)], None)?;
        Ok(g.value(p.h).clone())
    }

    pub fn encode_text(&self, toks: &TokenSeq) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let l = self.encode_texts_graph(&mut g, &[toks], None)?;
        Ok(g.value(l).data().to_vec())
    }

    /// Text embeddings for many sequences at once, one row each.
    pub fn encode_texts(&self, toks: &[&TokenSeq], lora: Option<&Lora>) -> Result<Matrix> {
        let mut g = Graph::new();
        let l = self.encode_texts_graph(&mut g, toks, lora)?;
        Ok(g.value(l).clone())
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        self.vocab.tokenize(text)
    }

    /// Starts an incremental encoding of the trajectory tower.
    pub fn traj_cache<'a>(&'a self, lora: Option<&'a Lora>) -> TrajCache<'a> {
        TrajCache {
            model: self,
            lora,
            keys: vec![Matrix::zeros(0, self.d()); self.cfg.layers],
            values: vec![Matrix::zeros(0, self.d()); self.cfg.layers],
            len: 0,
            scores: Vec::new(),
        }
    }

    pub(crate) fn head_vars(&self, g: &mut Graph) -> HeadVars {
        HeadVars {
            fe_w: self.params.var(g, self.fe_w),
            fe_b: self.params.var(g, self.fe_b),
            fc_w: self.params.var(g, self.fc_w),
            fc_b: self.params.var(g, self.fc_b),
        }
    }

    /// `sigmoid(F^c(concat(h_star, l)))` for a single step.
    pub fn step_cost(&self, h_star: &[f64], l: &[f64]) -> f64 {
        let w = self.params.get(self.fc_w).data();
        let d = self.d();
        let z =
            crate::tensor::dot(&w[..d], h_star) + crate::tensor::dot(&w[d..], l) + self.params.get(self.fc_b).item();
        crate::tensor::sigmoid(z)
    }

    /// `sigmoid(F^e(l))`.
    pub fn episode_cost(&self, l: &[f64]) -> f64 {
        let z = crate::tensor::dot(self.params.get(self.fe_w).data(), l) + self.params.get(self.fe_b).item();
        crate::tensor::sigmoid(z)
    }
}

pub(crate) struct HeadVars {
    pub fe_w: Var,
    pub fe_b: Var,
    pub fc_w: Var,
    pub fc_b: Var,
}

/// Output of a packed trajectory encoding.
#[derive(Clone, Debug)]
pub struct Packed {
    pub h: Var,
    pub segs: Vec<(usize, usize)>,
}

impl Packed {
    pub fn last_rows(&self) -> Vec<usize> {
        self.segs.iter().map(|&(s, l)| s + l - 1).collect()
    }

    /// For each packed row, the index of the sequence it belongs to.
    pub fn row_owner(&self) -> Vec<usize> {
        self.segs.iter().enumerate().flat_map(|(i, &(_, l))| std::iter::repeat_n(i, l)).collect()
    }
}

/// Key/value-cached causal encoder: pushes one step at a time and returns `H_t`.
#[derive(Clone, Debug)]
pub struct TrajCache<'a> {
    model: &'a AlignmentModel,
    lora: Option<&'a Lora>,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    len: usize,
    scores: Vec<f64>,
}

fn add_rows(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (o, x) in out.data_mut().iter_mut().zip(b.data()) {
        *o += x;
    }
    out
}

fn add_bias(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (o, x) in out.row_mut(r).iter_mut().zip(b.data()) {
            *o += x;
        }
    }
    out
}

impl TrajCache<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, obs: &Observation, action: u8) -> Result<Vec<f64>> {
        let m = self.model;
        let p = &m.params;
        if self.len > m.cfg.max_traj_len {
            return Err(Error::DegenerateInput(format!("trajectory exceeds max_traj_len {}", m.cfg.max_traj_len)));
        }
        if action as usize > NUM_ACTIONS {
            return Err(Error::DegenerateInput(format!("action {action} out of range")));
        }
        let d = m.d();
        let half = d / 2;
        let mut idx = Vec::with_capacity(OBS_LEN);
        AlignmentModel::state_indices(obs, &mut idx);
        let table = p.get(m.state_table);
        let mut s = vec![0.0; half];
        for &i in &idx {
            for (o, x) in s.iter_mut().zip(table.row(i)) {
                *o += x;
            }
        }
        for (o, x) in s.iter_mut().zip(p.get(m.state_bias).data()) {
            *o += x;
        }
        let mut a = vec![0.0; half];
        for (o, x) in a.iter_mut().zip(p.get(m.action_table).row(action as usize)) {
            *o += x;
        }
        let mut v = s;
        v.extend_from_slice(&a);
        let mut pos = vec![0.0; d];
        for (o, x) in pos.iter_mut().zip(p.get(m.traj.pos).row(self.len)) {
            *o += x;
        }
        let mut x = Matrix::row_vector(v);
        x = add_rows(&x, &Matrix::row_vector(pos));
        let heads = m.cfg.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        self.scores.resize(self.len + 1, 0.0);
        for (l, b) in m.traj.blocks.iter().enumerate() {
            let (h, _, _) = layer_norm_forward(&x, p.get(b.ln1_g).data(), p.get(b.ln1_b).data(), LN_EPS);
            let mut q = matmul(&h, p.get(b.wq));
            let k = matmul(&h, p.get(b.wk));
            let mut v = matmul(&h, p.get(b.wv));
            if let Some(lora) = self.lora {
                if let Some(blk) = lora.traj.get(l) {
                    q = lora.apply(&h, &q, blk.aq, blk.bq);
                    v = lora.apply(&h, &v, blk.av, blk.bv);
                }
            }
            self.keys[l].push_row(k.data());
            self.values[l].push_row(v.data());
            let mut att = vec![0.0; d];
            for hh in 0..heads {
                let off = hh * hd;
                attend_row(
                    &q.data()[off..off + hd],
                    &self.keys[l],
                    &self.values[l],
                    off,
                    hd,
                    self.len + 1,
                    scale,
                    &mut self.scores,
                    &mut att[off..off + hd],
                );
            }
            let o = add_bias(&matmul(&Matrix::row_vector(att), p.get(b.wo)), p.get(b.bo));
            x = add_rows(&x, &o);
            let (h2, _, _) = layer_norm_forward(&x, p.get(b.ln2_g).data(), p.get(b.ln2_b).data(), LN_EPS);
            let f = add_bias(&matmul(&h2, p.get(b.w1)), p.get(b.b1)).map(gelu);
            let f = add_bias(&matmul(&f, p.get(b.w2)), p.get(b.b2));
            x = add_rows(&x, &f);
        }
        let (out, _, _) = layer_norm_forward(&x, p.get(m.traj.lnf_g).data(), p.get(m.traj.lnf_b).data(), LN_EPS);
        self.len += 1;
        Ok(out.into_data())
    }
}

#[derive(Clone, Copy, Debug)]
struct LoraBlock {
    aq: usize,
    bq: usize,
    av: usize,
    bv: usize,
}

/// Low-rank adapters on the query and value projections of both towers.
/// `B` starts at zero, so a fresh adapter leaves the encoders unchanged.
#[derive(Clone, Debug)]
pub struct Lora {
    pub rank: usize,
    pub scale: f64,
    pub params: ParamStore,
    traj: Vec<LoraBlock>,
    text: Vec<LoraBlock>,
}

impl Lora {
    pub fn new(cfg: &EncoderConfig, rank: usize, rng: &mut impl Rng) -> Lora {
        let mut s = ParamStore::new();
        let d = cfg.d_model;
        let mut mk = |tower: &str, s: &mut ParamStore| -> Vec<LoraBlock> {
            if rank == 0 {
                return Vec::new();
            }
            (0..cfg.layers)
                .map(|l| LoraBlock {
                    aq: s.add_normal(format!("{tower}.{l}.q.a"), d, rank, 1.0 / (d as f64).sqrt(), rng),
                    bq: s.add_zeros(format!("{tower}.{l}.q.b"), rank, d),
                    av: s.add_normal(format!("{tower}.{l}.v.a"), d, rank, 1.0 / (d as f64).sqrt(), rng),
                    bv: s.add_zeros(format!("{tower}.{l}.v.b"), rank, d),
                })
                .collect()
        };
        let traj = mk("traj", &mut s);
        let text = mk("text", &mut s);
        Lora { rank, scale: if rank == 0 { 0.0 } else { 1.0 / rank as f64 }, params: s, traj, text }
    }

    fn apply_graph(&self, g: &mut Graph, h: Var, base: Var, a: usize, b: usize) -> Var {
        let a = self.params.var(g, a);
        let b = self.params.var(g, b);
        let t = g.matmul(h, a);
        let u = g.matmul(t, b);
        let u = g.scale(u, self.scale);
        g.add(base, u)
    }

    fn apply(&self, h: &Matrix, base: &Matrix, a: usize, b: usize) -> Matrix {
        let t = matmul(h, self.params.get(a));
        let u = matmul(&t, self.params.get(b)).map(|x| x * self.scale);
        add_rows(base, &u)
    }
}

/// `max(||x||, eps)`-guarded cosine.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = crate::tensor::norm(a).max(COS_EPS);
    let nb = crate::tensor::norm(b).max(COS_EPS);
    crate::tensor::dot(a, b) / (na * nb)
}

/// `exp(alpha) * cos(h, l)`.
pub fn similarity(h: &[f64], l: &[f64], alpha: f64) -> f64 {
    alpha.exp() * cosine(h, l)
}

/// Row-wise cosine between equally shaped `a` and `b`, as a `(rows, 1)` column.
pub fn cosine_rows_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let an = g.row_normalize(a, COS_EPS);
    let bn = g.row_normalize(b, COS_EPS);
    let m = g.mul(an, bn);
    g.sum_cols(m)
}

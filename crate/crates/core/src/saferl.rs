//! History- and text-conditioned PPO with a Lagrangian cost constraint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::constraint::{check_step, render_text, sample_spec, ConstraintConfig, ConstraintSpec, Family};
use crate::corpus::derive_seed;
use crate::encoders::{AlignmentModel, Lora, TokenSeq, PAD_ACTION};
use crate::error::{Error, Result};
use crate::grid::{make_env, Action, GridConfig, Observation, NUM_ACTIONS, OBS_LEN};
use crate::predictor::CalibratedPredictor;
use crate::tensor::{matmul, softmax, Adam, AdamConfig, Graph, Matrix, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Cost predicted by the calibrated alignment model.
    Cp,
    /// Ground-truth cost from the constraint oracle.
    Gc,
    /// No cost in the objective.
    PpoOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Cp => "cp",
            Mode::Gc => "gc",
            Mode::PpoOnly => "ppo_only",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cp" => Ok(Mode::Cp),
            "gc" => Ok(Mode::Gc),
            "ppo_only" => Ok(Mode::PpoOnly),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected cp, gc or ppo_only)"))),
        }
    }
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafeRlConfig {
    pub mode: Mode,
    /// Episodic cost budget; a missing value means unbounded.
    #[serde(with = "unbounded")]
    pub cost_limit: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lambda_lr: f64,
    pub lambda_init: f64,
    pub clip: f64,
    pub update_epochs: usize,
    pub minibatch: usize,
    pub rollout_steps: usize,
    pub n_workers: usize,
    pub adapter_rank: usize,
    pub learning_rate: f64,
    pub adapter_lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: usize,
    pub iterations: usize,
    /// Optimize reward advantages only and never move the multiplier.
    pub plain_ppo: bool,
    pub constraints: ConstraintConfig,
    pub seed: u64,
}

impl Default for SafeRlConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cp,
            cost_limit: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            lambda_lr: 0.05,
            lambda_init: 0.0,
            clip: 0.2,
            update_epochs: 4,
            minibatch: 256,
            rollout_steps: 2048,
            n_workers: 1,
            adapter_rank: 4,
            learning_rate: 3e-4,
            adapter_lr: 1e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            hidden: 64,
            iterations: 50,
            plain_ppo: false,
            constraints: ConstraintConfig::default(),
            seed: 0,
        }
    }
}

impl SafeRlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if self.cost_limit.is_nan() || self.cost_limit < 0.0 {
            return bad("cost_limit must be >= 0");
        }
        if self.lambda_init < 0.0 || !self.lambda_init.is_finite() {
            return bad("lambda_init must be finite and >= 0");
        }
        if self.n_workers == 0 || self.rollout_steps < self.n_workers {
            return bad("need 1 <= n_workers <= rollout_steps");
        }
        if self.minibatch == 0 || self.update_epochs == 0 || self.hidden == 0 {
            return bad("minibatch, update_epochs and hidden must be >= 1");
        }
        if self.constraints.families.is_empty() {
            return bad("constraints.families is empty");
        }
        Ok(())
    }
}

/// Projected multiplier update.
pub fn lambda_update(lambda: f64, lambda_lr: f64, j_c: f64, cost_limit: f64) -> f64 {
    (lambda + lambda_lr * (j_c - cost_limit)).max(0.0)
}

/// Generalized advantage estimates and value targets for one episode that
/// ends in a terminal state.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lam * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: u8,
    pub reward: f64,
    pub c_hat: f64,
    pub done: bool,
    pub log_prob: f64,
    pub value: f64,
    pub cost_value: f64,
    pub h_prev: Vec<f64>,
    pub l: Vec<f64>,
    pub spec_id: String,
    /// Index into the buffer's episode list.
    pub episode: usize,
    /// Zero-based step within the episode.
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub spec: ConstraintSpec,
    pub tokens: TokenSeq,
    pub observations: Vec<Observation>,
    pub actions: Vec<u8>,
    pub reward: f64,
    /// Sum of the training cost signal.
    pub cost: f64,
    /// Step at which the oracle reported a violation, 1-based.
    pub violation_step: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Buffer {
    pub transitions: Vec<Transition>,
    pub episodes: Vec<EpisodeRecord>,
}

impl Buffer {
    fn append(&mut self, mut other: Buffer) {
        let off = self.episodes.len();
        for t in &mut other.transitions {
            t.episode += off;
        }
        self.transitions.append(&mut other.transitions);
        self.episodes.append(&mut other.episodes);
    }

    pub fn avg_reward(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.reward))
    }

    /// Fraction of episodes the oracle judged violated.
    pub fn avg_cost(&self) -> f64 {
        mean(self.episodes.iter().map(|e| if e.violation_step.is_some() { 1.0 } else { 0.0 }))
    }

    /// Mean per-episode sum of the training cost signal.
    pub fn cost_estimate(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.cost))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Copy, Debug)]
struct Net {
    obs: usize,
    obs_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Actor and critics over `(o_t, H_{t-1}, L)`, plus the adapter-tuned encoder copies.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub params: ParamStore,
    /// Trainable copies of both towers; only `lora` is ever updated.
    pub encoder: AlignmentModel,
    pub lora: Lora,
    frozen_digest: String,
    actor: Net,
    critic: Net,
    cost_critic: Net,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub action: u8,
    pub log_prob: f64,
    pub value: f64,
    pub cost_value: f64,
    pub probs: Vec<f64>,
}

fn add_net(
    s: &mut ParamStore,
    name: &str,
    d: usize,
    hidden: usize,
    out: usize,
    out_std: f64,
    rng: &mut impl Rng,
) -> Net {
    let feat = crate::encoders::STATE_FEATURES;
    Net {
        obs: s.add_normal(format!("{name}.obs"), feat, hidden, 0.05, rng),
        obs_b: s.add_zeros(format!("{name}.obs_b"), 1, hidden),
        w1: s.add_xavier(format!("{name}.w1"), hidden + 2 * d, hidden, rng),
        b1: s.add_zeros(format!("{name}.b1"), 1, hidden),
        w2: s.add_normal(format!("{name}.w2"), hidden, out, out_std, rng),
        b2: s.add_zeros(format!("{name}.b2"), 1, out),
    }
}

fn obs_indices(obs: &[&Observation]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(obs.len() * OBS_LEN);
    for o in obs {
        AlignmentModel::state_indices(o, &mut idx);
    }
    idx
}

impl PolicyModel {
    pub fn new(frozen: &AlignmentModel, cfg: &SafeRlConfig, rng: &mut impl Rng) -> Self {
        let mut encoder = frozen.clone();
        encoder.params.set_requires_grad(false);
        let lora = Lora::new(&encoder.cfg, cfg.adapter_rank, rng);
        let d = encoder.d();
        let h = cfg.hidden;
        let mut s = ParamStore::new();
        let actor = add_net(&mut s, "actor", d, h, NUM_ACTIONS, 0.01, rng);
        let critic = add_net(&mut s, "critic", d, h, 1, 1.0 / (h as f64).sqrt(), rng);
        let cost_critic = add_net(&mut s, "cost", d, h, 1, 1.0 / (h as f64).sqrt(), rng);
        Self { params: s, frozen_digest: frozen.encoder_digest(), encoder, lora, actor, critic, cost_critic }
    }

    pub fn frozen_digest(&self) -> &str {
        &self.frozen_digest
    }

    fn net_plain(&self, net: Net, idx: &[usize], h: &[f64], l: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let table = p.get(net.obs);
        let mut x: Vec<f64> = p.get(net.obs_b).data().to_vec();
        for &i in idx {
            for (o, v) in x.iter_mut().zip(table.row(i)) {
                *o += v;
            }
        }
        for v in x.iter_mut() {
            *v = v.tanh();
        }
        x.extend_from_slice(h);
        x.extend_from_slice(l);
        let mut z = matmul(&Matrix::row_vector(x), p.get(net.w1)).into_data();
        for (o, b) in z.iter_mut().zip(p.get(net.b1).data()) {
            *o = (*o + b).tanh();
        }
        let mut out = matmul(&Matrix::row_vector(z), p.get(net.w2)).into_data();
        for (o, b) in out.iter_mut().zip(p.get(net.b2).data()) {
            *o += b;
        }
        out
    }

    fn net_graph(&self, g: &mut Graph, net: Net, idx: Vec<usize>, h: Var, l: Var) -> Var {
        let p = &self.params;
        let table = p.var(g, net.obs);
        let e = g.embed_sum(table, idx, OBS_LEN);
        let b = p.var(g, net.obs_b);
        let e = g.add_row(e, b);
        let e = g.tanh(e);
        let x = g.concat_cols(&[e, h, l]);
        let w1 = p.var(g, net.w1);
        let b1 = p.var(g, net.b1);
        let z = g.matmul(x, w1);
        let z = g.add_row(z, b1);
        let z = g.tanh(z);
        let w2 = p.var(g, net.w2);
        let b2 = p.var(g, net.b2);
        let o = g.matmul(z, w2);
        g.add_row(o, b2)
    }

    pub fn logits(&self, obs: &Observation, h_prev: &[f64], l: &[f64]) -> Vec<f64> {
        self.net_plain(self.actor, &obs_indices(&[obs]), h_prev, l)
    }

    /// Samples (or, if `greedy`, takes the argmax of) the action distribution.
    pub fn act(
        &self,
        obs: &Observation,
        h_prev: &[f64],
        l: &[f64],
        greedy: bool,
        rng: &mut impl Rng,
    ) -> Result<ActOutput> {
        let idx = obs_indices(&[obs]);
        let logits = self.net_plain(self.actor, &idx, h_prev, l);
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite action logits {logits:?} (history norm {:.3e}, text norm {:.3e})",
                crate::tensor::norm(h_prev),
                crate::tensor::norm(l)
            )));
        }
        let probs = softmax(&logits);
        let action = if greedy { argmax(&logits) } else { sample_categorical(&probs, rng) };
        Ok(ActOutput {
            action: action as u8,
            log_prob: probs[action].ln(),
            value: self.net_plain(self.critic, &idx, h_prev, l)[0],
            cost_value: self.net_plain(self.cost_critic, &idx, h_prev, l)[0],
            probs,
        })
    }

    /// Policy embedding of a constraint text.
    pub fn text_embedding(&self, tokens: &TokenSeq) -> Result<Vec<f64>> {
        Ok(self.encoder.encode_texts(&[tokens], Some(&self.lora))?.into_data())
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Where the training cost comes from.
#[derive(Clone, Copy)]
pub enum CostSource<'a> {
    Predictor(&'a CalibratedPredictor),
    Oracle,
    None,
}

impl CostSource<'_> {
    fn mode(&self) -> Mode {
        match self {
            CostSource::Predictor(_) => Mode::Cp,
            CostSource::Oracle => Mode::Gc,
            CostSource::None => Mode::PpoOnly,
        }
    }
}

/// Options of a single rollout pass.
#[derive(Clone, Copy, Debug)]
pub struct RolloutSpec {
    pub steps: usize,
    pub worker: usize,
    pub seed: u64,
    pub greedy: bool,
}

fn check_compat(policy: &PolicyModel, grid: &GridConfig, source: &CostSource<'_>) -> Result<()> {
    let need = grid.horizon;
    if policy.encoder.cfg.max_traj_len < need {
        return Err(Error::Config(format!(
            "policy encoder max_traj_len {} is shorter than the horizon {need}",
            policy.encoder.cfg.max_traj_len
        )));
    }
    if let CostSource::Predictor(p) = source {
        if p.model().cfg.max_traj_len < need {
            return Err(Error::Config(format!(
                "predictor max_traj_len {} is shorter than the horizon {need}",
                p.model().cfg.max_traj_len
            )));
        }
        if p.model().d() != policy.encoder.d() {
            return Err(Error::Config("predictor and policy encoders differ in width".into()));
        }
    }
    Ok(())
}

/// Runs whole episodes until at least `spec.steps` transitions are collected.
/// Constraint families rotate per episode, offset by the worker index.
pub fn rollout(
    policy: &PolicyModel,
    grid: &GridConfig,
    source: CostSource<'_>,
    constraints: &ConstraintConfig,
    spec: RolloutSpec,
) -> Result<Buffer> {
    check_compat(policy, grid, &source)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 30 + spec.worker as u64, 0));
    let families = &constraints.families;
    let mut buf = Buffer::default();
    let mut k = 0usize;
    while buf.transitions.len() < spec.steps {
        let family: Family = families[(spec.worker + k) % families.len()];
        let cspec = sample_spec(family, constraints, &mut rng);
        let text = render_text(&cspec, &mut rng);
        let tokens = policy.encoder.tokenize(&text.text)?;
        let env_seed = derive_seed(spec.seed, 40 + spec.worker as u64, k as u64);
        let episode =
            run_episode(policy, grid, source, cspec, text.spec_id(), tokens, env_seed, spec.greedy, &mut rng)?;
        buf.append(episode);
        k += 1;
    }
    Ok(buf)
}

#[allow(clippy::too_many_arguments)]
fn run_episode(
    policy: &PolicyModel,
    grid: &GridConfig,
    source: CostSource<'_>,
    cspec: ConstraintSpec,
    spec_id: String,
    tokens: TokenSeq,
    env_seed: u64,
    greedy: bool,
    rng: &mut impl Rng,
) -> Result<Buffer> {
    let mut env = make_env(grid, env_seed)?;
    let l = policy.text_embedding(&tokens)?;
    let mut pcache = policy.encoder.traj_cache(Some(&policy.lora));
    let mut h_prev = pcache.push(&Observation::PAD, PAD_ACTION)?;
    let (mut fcache, frozen_l, beta) = match source {
        CostSource::Predictor(p) => {
            (Some(p.model().traj_cache(None)), p.model().encode_text(&tokens)?, p.beta_for(cspec.family()))
        }
        _ => (None, Vec::new(), 0.0),
    };
    let mut state = cspec.initial_state();
    let mut obs = env.observe();
    let mut out = Buffer::default();
    let mut rec = EpisodeRecord {
        spec: cspec.clone(),
        tokens,
        observations: Vec::new(),
        actions: Vec::new(),
        reward: 0.0,
        cost: 0.0,
        violation_step: None,
    };
    let mut t = 0;
    loop {
        let a = policy.act(&obs, &h_prev, &l, greedy, rng)?;
        let step = env.step(Action::from_index(a.action as usize)?)?;
        let (next_state, violated) = check_step(&cspec, &state, &step.events);
        state = next_state;
        if violated && rec.violation_step.is_none() {
            rec.violation_step = Some(t + 1);
        }
        let mut stop = violated;
        let c_hat = match (&source, fcache.as_mut()) {
            (CostSource::Predictor(p), Some(cache)) => {
                let h = cache.push(&obs, a.action)?;
                let sig = p.signal(&h, &frozen_l, beta);
                stop |= sig.violated;
                sig.c_hat
            }
            (CostSource::Oracle, _) if violated => 1.0,
            _ => 0.0,
        };
        if stop {
            env.terminate();
        }
        let done = env.is_done();
        rec.observations.push(obs);
        rec.actions.push(a.action);
        rec.reward += step.reward;
        rec.cost += c_hat;
        out.transitions.push(Transition {
            obs,
            action: a.action,
            reward: step.reward,
            c_hat,
            done,
            log_prob: a.log_prob,
            value: a.value,
            cost_value: a.cost_value,
            h_prev: std::mem::take(&mut h_prev),
            l: l.clone(),
            spec_id: spec_id.clone(),
            episode: 0,
            t,
        });
        t += 1;
        if done {
            break;
        }
        h_prev = pcache.push(&obs, a.action)?;
        obs = step.obs;
    }
    out.episodes.push(rec);
    Ok(out)
}

/// Collects `steps` transitions split across `n_workers`, merged in worker order.
pub fn collect(
    policy: &PolicyModel,
    grid: &GridConfig,
    source: CostSource<'_>,
    constraints: &ConstraintConfig,
    steps: usize,
    n_workers: usize,
    seed: u64,
    greedy: bool,
) -> Result<Buffer> {
    let per = steps.div_ceil(n_workers);
    let results: Vec<Result<Buffer>> = if n_workers == 1 {
        vec![rollout(policy, grid, source, constraints, RolloutSpec { steps: per, worker: 0, seed, greedy })]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n_workers)
                .map(|w| {
                    s.spawn(move || {
                        rollout(policy, grid, source, constraints, RolloutSpec { steps: per, worker: w, seed, greedy })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Training("rollout worker panicked".into()))))
                .collect()
        })
    };
    let mut buf = Buffer::default();
    for r in results {
        buf.append(r?);
    }
    Ok(buf)
}

/// Per-transition training targets.
#[derive(Clone, Debug)]
pub struct Targets {
    pub advantage: Vec<f64>,
    pub ret: Vec<f64>,
    pub cost_ret: Vec<f64>,
}

/// Advantages for the objective `A_r - lambda * A_c` (or `A_r` alone), normalized.
pub fn targets(buf: &Buffer, cfg: &SafeRlConfig, lambda: f64) -> Targets {
    let n = buf.transitions.len();
    let mut adv = Vec::with_capacity(n);
    let mut ret = Vec::with_capacity(n);
    let mut cost_ret = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let mut end = start;
        while !buf.transitions[end].done {
            end += 1;
        }
        let ep = &buf.transitions[start..=end];
        let r: Vec<f64> = ep.iter().map(|t| t.reward).collect();
        let v: Vec<f64> = ep.iter().map(|t| t.value).collect();
        let c: Vec<f64> = ep.iter().map(|t| t.c_hat).collect();
        let vc: Vec<f64> = ep.iter().map(|t| t.cost_value).collect();
        let (ar, rr) = gae(&r, &v, cfg.gamma, cfg.gae_lambda);
        let (ac, rc) = gae(&c, &vc, cfg.gamma, cfg.gae_lambda);
        for i in 0..ar.len() {
            adv.push(if cfg.plain_ppo { ar[i] } else { ar[i] - lambda * ac[i] });
        }
        ret.extend(rr);
        cost_ret.extend(rc);
        start = end + 1;
    }
    let m = mean(adv.iter().copied());
    let sd = mean(adv.iter().map(|a| (a - m) * (a - m))).sqrt();
    for a in adv.iter_mut() {
        *a = (*a - m) / (sd + 1e-8);
    }
    Targets { advantage: adv, ret, cost_ret }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub cost_value_loss: f64,
    pub entropy: f64,
}

struct Surrogate {
    policy: Var,
    entropy: Var,
}

fn surrogate(g: &mut Graph, logits: Var, actions: Vec<usize>, old_logp: &[f64], adv: &[f64], clip: f64) -> Surrogate {
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick_cols(logp, actions);
    let old = g.constant(Matrix::from_vec(old_logp.len(), 1, old_logp.to_vec()));
    let diff = g.sub(picked, old);
    let ratio = g.exp(diff);
    let a = g.constant(Matrix::from_vec(adv.len(), 1, adv.to_vec()));
    let s1 = g.mul(ratio, a);
    let clipped = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let s2 = g.mul(clipped, a);
    let m = g.min(s1, s2);
    let surr = g.mean_all(m);
    let policy = g.scale(surr, -1.0);
    let p = g.exp(logp);
    let plogp = g.mul(p, logp);
    let ent_rows = g.sum_cols(plogp);
    let ent = g.mean_all(ent_rows);
    let entropy = g.scale(ent, -1.0);
    Surrogate { policy, entropy }
}

fn mse(g: &mut Graph, pred: Var, target: &[f64]) -> Var {
    let t = g.constant(Matrix::from_vec(target.len(), 1, target.to_vec()));
    let d = g.sub(pred, t);
    let sq = g.square(d);
    g.mean_all(sq)
}

fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(0, cols);
    for r in rows {
        m.push_row(r);
    }
    m
}

/// Optimizer state of a policy run.
pub struct Optimizers {
    pub policy: Adam,
    pub adapter: Adam,
}

impl Optimizers {
    pub fn new(policy: &PolicyModel, cfg: &SafeRlConfig) -> Self {
        let mk =
            |lr: f64| AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: Some(cfg.max_grad_norm) };
        Self {
            policy: Adam::new(mk(cfg.learning_rate), &policy.params),
            adapter: Adam::new(mk(cfg.adapter_lr), &policy.lora.params),
        }
    }
}

/// One PPO update over the buffer.
pub fn update(
    policy: &mut PolicyModel,
    opt: &mut Optimizers,
    buf: &Buffer,
    tg: &Targets,
    cfg: &SafeRlConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    let n = buf.transitions.len();
    let d = policy.encoder.d();
    let mut stats = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.update_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for (k, mb) in order.chunks(cfg.minibatch).enumerate() {
            let tr: Vec<&Transition> = mb.iter().map(|&i| &buf.transitions[i]).collect();
            let idx = obs_indices(&tr.iter().map(|t| &t.obs).collect::<Vec<_>>());
            let mut g = Graph::new();
            let h = g.constant(stack_rows(tr.iter().map(|t| &t.h_prev[..]), d));
            let l = g.constant(stack_rows(tr.iter().map(|t| &t.l[..]), d));
            let logits = policy.net_graph(&mut g, policy.actor, idx.clone(), h, l);
            let actions: Vec<usize> = tr.iter().map(|t| t.action as usize).collect();
            let old: Vec<f64> = tr.iter().map(|t| t.log_prob).collect();
            let adv: Vec<f64> = mb.iter().map(|&i| tg.advantage[i]).collect();
            let s = surrogate(&mut g, logits, actions, &old, &adv, cfg.clip);
            let v = policy.net_graph(&mut g, policy.critic, idx.clone(), h, l);
            let ret: Vec<f64> = mb.iter().map(|&i| tg.ret[i]).collect();
            let vl = mse(&mut g, v, &ret);
            let vc = policy.net_graph(&mut g, policy.cost_critic, idx, h, l);
            let cret: Vec<f64> = mb.iter().map(|&i| tg.cost_ret[i]).collect();
            let cl = mse(&mut g, vc, &cret);
            let ent = g.scale(s.entropy, -cfg.entropy_coef);
            let vsum = g.add(vl, cl);
            let vterm = g.scale(vsum, cfg.value_coef);
            let t1 = g.add(s.policy, ent);
            let loss = g.add(t1, vterm);
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite policy loss (policy {}, value {}, cost value {})",
                    g.scalar(s.policy),
                    g.scalar(vl),
                    g.scalar(cl)
                )));
            }
            let grads = g.backward(loss);
            opt.policy.step(&mut policy.params, &grads);
            stats.policy_loss += g.scalar(s.policy);
            stats.value_loss += g.scalar(vl);
            stats.cost_value_loss += g.scalar(cl);
            stats.entropy += g.scalar(s.entropy);
            count += 1.0;
            if k == 0 {
                adapter_step(policy, opt, buf, tg, mb, cfg)?;
            }
        }
    }
    stats.policy_loss /= count;
    stats.value_loss /= count;
    stats.cost_value_loss /= count;
    stats.entropy /= count;
    Ok(stats)
}

/// Recomputes histories and texts of a minibatch through the adapters and
/// takes one optimizer step on the adapter factors only.
pub fn adapter_step(
    policy: &mut PolicyModel,
    opt: &mut Optimizers,
    buf: &Buffer,
    tg: &Targets,
    mb: &[usize],
    cfg: &SafeRlConfig,
) -> Result<()> {
    if policy.lora.rank == 0 {
        return Ok(());
    }
    let tr: Vec<&Transition> = mb.iter().map(|&i| &buf.transitions[i]).collect();
    let mut eps: Vec<usize> = tr.iter().map(|t| t.episode).collect();
    eps.sort_unstable();
    eps.dedup();
    let mut last_t = vec![0usize; eps.len()];
    for t in &tr {
        let k = eps.binary_search(&t.episode).expect("episode listed");
        last_t[k] = last_t[k].max(t.t);
    }
    // History for step t is the padding pair followed by steps 0..t.
    let seqs: Vec<(Vec<Observation>, Vec<u8>)> = eps
        .iter()
        .zip(&last_t)
        .map(|(&e, &lt)| {
            let rec = &buf.episodes[e];
            let mut o = vec![Observation::PAD];
            o.extend_from_slice(&rec.observations[..lt]);
            let mut a = vec![PAD_ACTION];
            a.extend_from_slice(&rec.actions[..lt]);
            (o, a)
        })
        .collect();
    let refs: Vec<(&[Observation], &[u8])> = seqs.iter().map(|(o, a)| (&o[..], &a[..])).collect();
    let toks: Vec<&TokenSeq> = eps.iter().map(|&e| &buf.episodes[e].tokens).collect();
    let mut g = Graph::new();
    let packed = policy.encoder.encode_trajectories_graph(&mut g, &refs, Some(&policy.lora))?;
    let lt = policy.encoder.encode_texts_graph(&mut g, &toks, Some(&policy.lora))?;
    let rows: Vec<usize> =
        tr.iter().map(|t| packed.segs[eps.binary_search(&t.episode).expect("episode listed")].0 + t.t).collect();
    let owners: Vec<usize> = tr.iter().map(|t| eps.binary_search(&t.episode).expect("episode listed")).collect();
    let h = g.gather_rows(packed.h, rows);
    let l = g.gather_rows(lt, owners);
    let idx = obs_indices(&tr.iter().map(|t| &t.obs).collect::<Vec<_>>());
    let logits = policy.net_graph(&mut g, policy.actor, idx, h, l);
    let actions: Vec<usize> = tr.iter().map(|t| t.action as usize).collect();
    let old: Vec<f64> = tr.iter().map(|t| t.log_prob).collect();
    let adv: Vec<f64> = mb.iter().map(|&i| tg.advantage[i]).collect();
    let s = surrogate(&mut g, logits, actions, &old, &adv, cfg.clip);
    let ent = g.scale(s.entropy, -cfg.entropy_coef);
    let loss = g.add(s.policy, ent);
    if !g.scalar(loss).is_finite() {
        return Err(Error::Training("non-finite adapter loss".into()));
    }
    let grads = g.backward(loss);
    opt.adapter.step(&mut policy.lora.params, &grads);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub episodes: usize,
    pub avg_reward: f64,
    pub avg_cost: f64,
    pub cost_estimate: f64,
    pub lambda: f64,
    pub mode: Mode,
    pub seed: u64,
    pub stats: UpdateStats,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub records: Vec<IterationRecord>,
    pub policy: PolicyModel,
    pub lambda: f64,
}

pub const POLICY_METRICS_FILE: &str = "policy_metrics.jsonl";
pub const POLICY_CHECKPOINT: &str = "policy.ckpt";

/// Alternates rollouts and updates for `cfg.iterations` iterations. The
/// `frozen` model conditions the policy in every mode; CP mode additionally
/// needs `predictor` for its cost.
pub fn train_policy(
    cfg: &SafeRlConfig,
    grid: &GridConfig,
    frozen: &AlignmentModel,
    predictor: Option<&CalibratedPredictor>,
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    cfg.validate()?;
    grid.validate()?;
    let source = match (cfg.mode, predictor) {
        (Mode::Cp, Some(p)) => CostSource::Predictor(p),
        (Mode::Cp, None) => return Err(Error::Config("cp mode needs a calibrated predictor".into())),
        (Mode::Gc, _) => CostSource::Oracle,
        (Mode::PpoOnly, _) => CostSource::None,
    };
    let frozen_digest = frozen.encoder_digest();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 60, 0));
    let mut policy = PolicyModel::new(frozen, cfg, &mut rng);
    check_compat(&policy, grid, &source)?;
    let mut opt = Optimizers::new(&policy, cfg);
    let mut lambda = cfg.lambda_init;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(POLICY_METRICS_FILE))?))
        }
        None => None,
    };
    let mut records = Vec::new();
    for it in 0..cfg.iterations {
        let iter_seed = derive_seed(cfg.seed, 70, it as u64);
        let buf = collect(&policy, grid, source, &cfg.constraints, cfg.rollout_steps, cfg.n_workers, iter_seed, false)?;
        let j_c = buf.cost_estimate();
        if !cfg.plain_ppo {
            lambda = lambda_update(lambda, cfg.lambda_lr, j_c, cfg.cost_limit);
        }
        let tg = targets(&buf, cfg, lambda);
        let mut urng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 50, it as u64));
        let stats = update(&mut policy, &mut opt, &buf, &tg, cfg, &mut urng)?;
        let rec = IterationRecord {
            iteration: it,
            episodes: buf.episodes.len(),
            avg_reward: buf.avg_reward(),
            avg_cost: buf.avg_cost(),
            cost_estimate: j_c,
            lambda,
            mode: source.mode(),
            seed: cfg.seed,
            stats,
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        records.push(rec);
    }
    if frozen.encoder_digest() != frozen_digest || policy.encoder.params.digest() != frozen.params.digest() {
        return Err(Error::Training("frozen encoder weights changed during policy training".into()));
    }
    if let Some(dir) = out_dir {
        save_policy(&policy, lambda, cfg, &dir.join(POLICY_CHECKPOINT))?;
    }
    Ok(RunRecord { records, policy, lambda })
}

/// Oracle-judged average reward and cost, independent of the training mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub episodes: usize,
    pub avg_reward: f64,
    pub avg_cost: f64,
}

pub fn evaluate_policy(
    policy: &PolicyModel,
    grid: &GridConfig,
    constraints: &ConstraintConfig,
    episodes: usize,
    seed: u64,
    greedy: bool,
) -> Result<Evaluation> {
    check_compat(policy, grid, &CostSource::None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 80, 0));
    let mut buf = Buffer::default();
    for k in 0..episodes {
        let family = constraints.families[k % constraints.families.len()];
        let cspec = sample_spec(family, constraints, &mut rng);
        let text = render_text(&cspec, &mut rng);
        let tokens = policy.encoder.tokenize(&text.text)?;
        let ep = run_episode(
            policy,
            grid,
            CostSource::None,
            cspec,
            text.spec_id(),
            tokens,
            derive_seed(seed, 81, k as u64),
            greedy,
            &mut rng,
        )?;
        buf.append(ep);
    }
    Ok(Evaluation { episodes, avg_reward: buf.avg_reward(), avg_cost: buf.avg_cost() })
}

pub fn save_policy(policy: &PolicyModel, lambda: f64, cfg: &SafeRlConfig, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "frozen_digest": policy.frozen_digest,
        "lambda": lambda,
        "config": cfg,
    });
    let mut c = Checkpoint::new("policy", meta);
    c.add_store("policy.", &policy.params);
    c.add_store("lora.", &policy.lora.params);
    c.save(path)
}

/// Loads a policy saved by [`save_policy`]; `frozen` must be the encoder it was trained against.
pub fn load_policy(path: &Path, frozen: &AlignmentModel) -> Result<(PolicyModel, f64, SafeRlConfig)> {
    let c = Checkpoint::load(path)?;
    if c.kind != "policy" {
        return Err(Error::Checkpoint(format!("{} holds a {:?} checkpoint, not a policy", path.display(), c.kind)));
    }
    let digest = c.meta.get("frozen_digest").and_then(|v| v.as_str()).unwrap_or_default();
    if digest != frozen.encoder_digest() {
        return Err(Error::Checkpoint(format!(
            "policy was trained against encoder {digest}, supplied encoder is {}",
            frozen.encoder_digest()
        )));
    }
    let cfg: SafeRlConfig = serde_json::from_value(c.meta.get("config").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("bad policy config: {e}")))?;
    let lambda = c.meta.get("lambda").and_then(|v| v.as_f64()).unwrap_or(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut policy = PolicyModel::new(frozen, &cfg, &mut rng);
    policy.params.load_from(&c.with_prefix("policy.")).map_err(Error::Checkpoint)?;
    policy.lora.params.load_from(&c.with_prefix("lora.")).map_err(Error::Checkpoint)?;
    Ok((policy, lambda, cfg))
}

//! Random-policy rollouts, oracle labelling, contrastive batches and the
//! line-delimited corpus file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{
    check_trajectory, render_text, sample_spec, ConstraintConfig, ConstraintSpec, ConstraintText, Family,
};
use crate::error::{Error, Result};
use crate::grid::{make_env, Action, GridConfig, Hazard, Observation, NUM_ACTIONS, OBS_CHANNELS, OBS_LEN, VIEW};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;

/// Derives an independent stream seed from a base seed and an index.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Full (obs, action, events) stream of one random-policy episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub observations: Vec<Observation>,
    pub actions: Vec<u8>,
    pub events: Vec<Vec<Hazard>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn prefix(&self, len: usize, violation_step: Option<usize>, spec_id: String) -> Trajectory {
        Trajectory {
            observations: self.observations[..len].to_vec(),
            actions: self.actions[..len].to_vec(),
            events: self.events[..len].to_vec(),
            violation_step,
            spec_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<u8>,
    pub events: Vec<Vec<Hazard>>,
    pub violation_step: Option<usize>,
    pub spec_id: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn prefix(&self, len: usize) -> Trajectory {
        Trajectory {
            observations: self.observations[..len].to_vec(),
            actions: self.actions[..len].to_vec(),
            events: self.events[..len].to_vec(),
            violation_step: self.violation_step.filter(|&v| v <= len),
            spec_id: self.spec_id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub traj_id: u64,
    pub trajectory: Trajectory,
    pub text: ConstraintText,
    pub positive: bool,
}

pub fn collect_rollouts(env_config: &GridConfig, n_episodes: usize, seed: u64) -> Result<Vec<Episode>> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be >= 1".into()));
    }
    (0..n_episodes as u64).map(|i| collect_episode(env_config, seed, i)).collect()
}

fn collect_episode(env_config: &GridConfig, seed: u64, index: u64) -> Result<Episode> {
    let mut env = make_env(env_config, derive_seed(seed, 1, index))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, index));
    let mut obs = env.reset();
    let mut ep = Episode { id: index, observations: Vec::new(), actions: Vec::new(), events: Vec::new() };
    while !env.is_done() {
        let a = rng.gen_range(0..NUM_ACTIONS);
        let r = env.step(Action::from_index(a)?)?;
        ep.observations.push(obs);
        ep.actions.push(a as u8);
        ep.events.push(r.events);
        obs = r.obs;
    }
    Ok(ep)
}

/// Result of labelling: positive pairs plus episodes that violated nothing,
/// each paired with one of the specs it was checked against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Labelled {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
}

pub fn label_pairs(episodes: &[Episode], specs: &[ConstraintSpec], rng: &mut impl Rng) -> Labelled {
    let mut out = Labelled::default();
    for ep in episodes {
        let mut any = false;
        for spec in specs {
            if let Some(t) = check_trajectory(spec, &ep.events) {
                any = true;
                out.positives.push(Pair {
                    traj_id: ep.id,
                    trajectory: ep.prefix(t, Some(t), spec.id()),
                    text: render_text(spec, rng),
                    positive: true,
                });
            }
        }
        if !any && !ep.is_empty() {
            if let Some(spec) = specs.choose(rng) {
                out.negatives.push(Pair {
                    traj_id: ep.id,
                    trajectory: ep.prefix(ep.len(), None, spec.id()),
                    text: render_text(spec, rng),
                    positive: false,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub pairs: Vec<&'a Pair>,
    pub q_traj_to_text: Matrix,
    pub q_text_to_traj: Matrix,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Cross-pair violation matrix: `q[i][j] = 1` iff trajectory `i` violates the spec of text `j`.
pub fn cross_labels(pairs: &[&Pair]) -> Matrix {
    let n = pairs.len();
    let mut q = Matrix::zeros(n, n);
    for (i, pi) in pairs.iter().enumerate() {
        for (j, pj) in pairs.iter().enumerate() {
            if check_trajectory(&pj.text.spec, &pi.trajectory.events).is_some() {
                q.set(i, j, 1.0);
            }
        }
    }
    q
}

pub fn batch_from<'a>(pairs: Vec<&'a Pair>) -> Result<Batch<'a>> {
    if let Some(p) = pairs.iter().find(|p| !p.positive) {
        return Err(Error::Usage(format!("batch contains a negative pair (trajectory {})", p.traj_id)));
    }
    let q = cross_labels(&pairs);
    debug_assert!((0..q.rows()).all(|i| q.get(i, i) == 1.0));
    Ok(Batch { q_text_to_traj: q.transpose(), q_traj_to_text: q, pairs })
}

pub fn make_batch<'a>(pairs: &'a [Pair], n: usize, rng: &mut impl Rng) -> Result<Batch<'a>> {
    if n > pairs.len() {
        return Err(Error::Usage(format!("batch size {n} exceeds {} available pairs", pairs.len())));
    }
    let picked = rand::seq::index::sample(rng, pairs.len(), n);
    batch_from(picked.into_iter().map(|i| &pairs[i]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_episodes: usize,
    /// Specs sampled per family and checked against every episode.
    pub specs_per_family: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub constraints: ConstraintConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_episodes: 2000,
            specs_per_family: 2,
            train_fraction: 0.8,
            seed: 0,
            constraints: ConstraintConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
    /// Full episodes that violated none of their checked specs.
    pub negatives: Vec<Pair>,
    pub split_seed: u64,
}

impl CorpusSplit {
    pub fn family_counts(&self) -> BTreeMap<Family, usize> {
        let mut m = BTreeMap::new();
        for p in self.train.iter().chain(&self.test) {
            *m.entry(p.text.spec.family()).or_insert(0) += 1;
        }
        m
    }
}

/// Rolls out, labels and splits a corpus. The split is by episode so a
/// trajectory never appears on both sides.
pub fn build_corpus(env: &GridConfig, cfg: &CorpusConfig) -> Result<CorpusSplit> {
    cfg.constraints.validate()?;
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
    }
    let episodes = collect_rollouts(env, cfg.n_episodes, cfg.seed)?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for ep in &episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, ep.id));
        let mut seen = BTreeSet::new();
        let mut specs = Vec::new();
        for &family in &cfg.constraints.families {
            for _ in 0..cfg.specs_per_family {
                let s = sample_spec(family, &cfg.constraints, &mut rng);
                if seen.insert(s.id()) {
                    specs.push(s);
                }
            }
        }
        let l = label_pairs(std::slice::from_ref(ep), &specs, &mut rng);
        positives.extend(l.positives);
        negatives.extend(l.negatives);
    }
    if positives.is_empty() {
        return Err(Error::DegenerateInput("corpus is empty: no episode violated any sampled constraint".into()));
    }
    Ok(split(positives, negatives, cfg.train_fraction, cfg.seed))
}

pub fn split(positives: Vec<Pair>, negatives: Vec<Pair>, train_fraction: f64, split_seed: u64) -> CorpusSplit {
    let mut ids: Vec<u64> = positives.iter().map(|p| p.traj_id).collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(split_seed, 4, 0)));
    let n_train = (ids.len() as f64 * train_fraction).round() as usize;
    let train_ids: BTreeSet<u64> = ids[..n_train].iter().copied().collect();
    let (train, test) = positives.into_iter().partition(|p| train_ids.contains(&p.traj_id));
    CorpusSplit { train, test, negatives, split_seed }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    obs_shape: [usize; 3],
    split_seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Footer {
    records: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Part {
    Train,
    Test,
    Negative,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    split: Part,
    traj_id: u64,
    spec: ConstraintSpec,
    text: String,
    template_id: u32,
    length: usize,
    violation_step: Option<usize>,
    observations: Vec<u8>,
    actions: Vec<u8>,
    events: Vec<Vec<Hazard>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Footer { footer: Footer },
    Record(Box<Record>),
}

impl Record {
    fn from_pair(split: Part, p: &Pair) -> Record {
        Record {
            split,
            traj_id: p.traj_id,
            spec: p.text.spec.clone(),
            text: p.text.text.clone(),
            template_id: p.text.template_id,
            length: p.trajectory.len(),
            violation_step: p.trajectory.violation_step,
            observations: p.trajectory.observations.iter().flat_map(|o| o.0).collect(),
            actions: p.trajectory.actions.clone(),
            events: p.trajectory.events.clone(),
        }
    }

    fn into_pair(self) -> std::result::Result<(Part, Pair), String> {
        let n = self.length;
        if self.actions.len() != n || self.events.len() != n || self.observations.len() != n * OBS_LEN {
            return Err(format!("record lengths disagree with length {n}"));
        }
        if n == 0 {
            return Err("empty trajectory".into());
        }
        if let Some(a) = self.actions.iter().find(|&&a| a as usize >= NUM_ACTIONS) {
            return Err(format!("action {a} out of range"));
        }
        let observations = self
            .observations
            .chunks(OBS_LEN)
            .map(|c| Observation::from_slice(c).ok_or_else(|| "observation value out of range".to_string()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let positive = self.split != Part::Negative;
        if positive && self.violation_step != Some(n) {
            return Err(format!("positive pair must violate at its last step {n}"));
        }
        Ok((
            self.split,
            Pair {
                traj_id: self.traj_id,
                trajectory: Trajectory {
                    observations,
                    actions: self.actions,
                    events: self.events,
                    violation_step: self.violation_step,
                    spec_id: self.spec.id(),
                },
                text: ConstraintText { text: self.text, spec: self.spec, template_id: self.template_id },
                positive,
            },
        ))
    }
}

/// Writes atomically via a sibling temporary file.
pub fn save_corpus(path: &Path, corpus: &CorpusSplit) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let header = Header {
            format_version: FORMAT_VERSION,
            obs_shape: [VIEW, VIEW, OBS_CHANNELS],
            split_seed: corpus.split_seed,
        };
        let json = |e: serde_json::Error| Error::Io(e.into());
        writeln!(w, "{}", serde_json::to_string(&header).map_err(json)?)?;
        let parts = [(Part::Train, &corpus.train), (Part::Test, &corpus.test), (Part::Negative, &corpus.negatives)];
        let mut records = 0;
        for (part, pairs) in parts {
            for p in pairs {
                serde_json::to_writer(&mut w, &Record::from_pair(part, p)).map_err(json)?;
                w.write_all(b"\n")?;
                records += 1;
            }
        }
        writeln!(w, r#"{{"footer":{{"records":{records}}}}}"#)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<CorpusSplit> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| {
        // A header with an unexpected version is reported as a version error.
        match serde_json::from_str::<serde_json::Value>(&first)
            .ok()
            .and_then(|v| v.get("format_version").and_then(|x| x.as_u64()))
        {
            Some(v) if v != FORMAT_VERSION as u64 => {
                Error::Version { path: path.to_path_buf(), found: v, expected: FORMAT_VERSION as u64 }
            }
            _ => parse_err(1, format!("bad header: {e}")),
        }
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: header.format_version as u64,
            expected: FORMAT_VERSION as u64,
        });
    }
    if header.obs_shape != [VIEW, VIEW, OBS_CHANNELS] {
        return Err(parse_err(1, format!("unsupported obs_shape {:?}", header.obs_shape)));
    }
    let mut out =
        CorpusSplit { train: Vec::new(), test: Vec::new(), negatives: Vec::new(), split_seed: header.split_seed };
    let mut records = 0;
    let mut footer = None;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if footer.is_some() {
            return Err(parse_err(lineno, "data after footer".into()));
        }
        match serde_json::from_str::<Line>(&line).map_err(|e| parse_err(lineno, e.to_string()))? {
            Line::Footer { footer: f } => footer = Some((f, lineno)),
            Line::Record(r) => {
                let (part, pair) = r.into_pair().map_err(|m| parse_err(lineno, m))?;
                records += 1;
                match part {
                    Part::Train => out.train.push(pair),
                    Part::Test => out.test.push(pair),
                    Part::Negative => out.negatives.push(pair),
                }
            }
        }
    }
    match footer {
        Some((f, _)) if f.records == records => Ok(out),
        Some((f, line)) => Err(parse_err(line, format!("footer declares {} records, found {records}", f.records))),
        None => Err(parse_err(records + 2, "truncated file: missing footer".into())),
    }
}

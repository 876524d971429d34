//! Trajectory-level constraints: typed specs, the ground-truth incremental
//! checker, and a template renderer for natural-language text.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Hazard;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Quantitative,
    Sequential,
    Mathematical,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Quantitative, Family::Sequential, Family::Mathematical];

    pub fn name(self) -> &'static str {
        match self {
            Family::Quantitative => "quantitative",
            Family::Sequential => "sequential",
            Family::Mathematical => "mathematical",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
            Error::Usage(format!("unknown constraint family {s:?} (expected quantitative, sequential or mathematical)"))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "SpecRecord", into = "SpecRecord")]
pub enum ConstraintSpec {
    /// Violated on the (limit + 1)-th touch of `entity`.
    Quantitative { entity: Hazard, limit: u32 },
    /// Violated when `then` is touched after `first` has ever been touched.
    Sequential { first: Hazard, then: Hazard },
    /// Each touch adds the entity's delta to hp; violated once hp reaches 0.
    Mathematical { hp: i32, deltas: BTreeMap<Hazard, i32> },
}

/// Flat serialized form with stable field names.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecRecord {
    family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entity: Option<Hazard>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    limit: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    first: Option<Hazard>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    then: Option<Hazard>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hp: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    deltas: Option<BTreeMap<Hazard, i32>>,
}

impl From<ConstraintSpec> for SpecRecord {
    fn from(s: ConstraintSpec) -> Self {
        let mut r = SpecRecord {
            family: s.family(),
            entity: None,
            limit: None,
            first: None,
            then: None,
            hp: None,
            deltas: None,
        };
        match s {
            ConstraintSpec::Quantitative { entity, limit } => {
                r.entity = Some(entity);
                r.limit = Some(limit);
            }
            ConstraintSpec::Sequential { first, then } => {
                r.first = Some(first);
                r.then = Some(then);
            }
            ConstraintSpec::Mathematical { hp, deltas } => {
                r.hp = Some(hp);
                r.deltas = Some(deltas);
            }
        }
        r
    }
}

impl TryFrom<SpecRecord> for ConstraintSpec {
    type Error = String;

    fn try_from(r: SpecRecord) -> std::result::Result<Self, String> {
        let missing = |f: &str| format!("{} constraint is missing field `{f}`", r.family);
        let spec = match r.family {
            Family::Quantitative => ConstraintSpec::Quantitative {
                entity: r.entity.ok_or_else(|| missing("entity"))?,
                limit: r.limit.ok_or_else(|| missing("limit"))?,
            },
            Family::Sequential => ConstraintSpec::Sequential {
                first: r.first.ok_or_else(|| missing("first"))?,
                then: r.then.ok_or_else(|| missing("then"))?,
            },
            Family::Mathematical => ConstraintSpec::Mathematical {
                hp: r.hp.ok_or_else(|| missing("hp"))?,
                deltas: r.deltas.clone().ok_or_else(|| missing("deltas"))?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ConstraintSpec {
    pub fn family(&self) -> Family {
        match self {
            ConstraintSpec::Quantitative { .. } => Family::Quantitative,
            ConstraintSpec::Sequential { .. } => Family::Sequential,
            ConstraintSpec::Mathematical { .. } => Family::Mathematical,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match self {
            ConstraintSpec::Quantitative { .. } => Ok(()),
            ConstraintSpec::Sequential { first, then } if first == then => {
                Err(format!("sequential constraint needs two distinct entities, got {first} twice"))
            }
            ConstraintSpec::Sequential { .. } => Ok(()),
            ConstraintSpec::Mathematical { hp, .. } if *hp <= 0 => {
                Err(format!("mathematical constraint needs hp > 0, got {hp}"))
            }
            ConstraintSpec::Mathematical { deltas, .. } if !deltas.values().any(|&d| d < 0) => {
                Err("mathematical constraint needs at least one damaging entity".into())
            }
            ConstraintSpec::Mathematical { .. } => Ok(()),
        }
    }

    /// Canonical identifier; equal ids mean equal semantics.
    pub fn id(&self) -> String {
        match self {
            ConstraintSpec::Quantitative { entity, limit } => format!("quant:{entity}:{limit}"),
            ConstraintSpec::Sequential { first, then } => format!("seq:{first}>{then}"),
            ConstraintSpec::Mathematical { hp, deltas } => {
                let d: Vec<String> = deltas.iter().filter(|(_, &v)| v != 0).map(|(h, v)| format!("{h}{v:+}")).collect();
                format!("math:{hp}:{}", d.join(","))
            }
        }
    }

    pub fn initial_state(&self) -> CheckerState {
        match self {
            ConstraintSpec::Quantitative { .. } => CheckerState::Quantitative { touch_count: 0 },
            ConstraintSpec::Sequential { .. } => CheckerState::Sequential { seen_first: false },
            ConstraintSpec::Mathematical { hp, .. } => CheckerState::Mathematical { hp: *hp },
        }
    }
}

impl fmt::Display for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CheckerState {
    Quantitative { touch_count: u32 },
    Sequential { seen_first: bool },
    Mathematical { hp: i32 },
}

/// Advances the checker by one step. Returns the new state and whether the
/// constraint becomes violated on this step.
///
/// # Panics
/// If `state` belongs to a different family than `spec`.
pub fn check_step(spec: &ConstraintSpec, state: &CheckerState, events: &[Hazard]) -> (CheckerState, bool) {
    match (spec, *state) {
        (ConstraintSpec::Quantitative { entity, limit }, CheckerState::Quantitative { touch_count }) => {
            let after = touch_count + events.iter().filter(|&&e| e == *entity).count() as u32;
            (CheckerState::Quantitative { touch_count: after }, touch_count <= *limit && after > *limit)
        }
        (ConstraintSpec::Sequential { first, then }, CheckerState::Sequential { seen_first }) => {
            let violated = seen_first && events.contains(then);
            (CheckerState::Sequential { seen_first: seen_first || events.contains(first) }, violated)
        }
        (ConstraintSpec::Mathematical { deltas, .. }, CheckerState::Mathematical { hp }) => {
            let after = hp + events.iter().filter_map(|e| deltas.get(e)).sum::<i32>();
            (CheckerState::Mathematical { hp: after }, hp > 0 && after <= 0)
        }
        _ => panic!("checker state {state:?} does not belong to constraint {spec}"),
    }
}

/// 1-based index of the first violating step, if any.
pub fn check_trajectory<E: AsRef<[Hazard]>>(spec: &ConstraintSpec, events: &[E]) -> Option<usize> {
    let mut state = spec.initial_state();
    for (t, ev) in events.iter().enumerate() {
        let (next, violated) = check_step(spec, &state, ev.as_ref());
        if violated {
            return Some(t + 1);
        }
        state = next;
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    pub families: Vec<Family>,
    pub max_limit: u32,
    pub min_hp: i32,
    pub max_hp: i32,
    pub max_damage: i32,
    pub max_heal: i32,
    /// Probability that a mathematical constraint includes a healing entity.
    pub heal_prob: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            max_limit: 10,
            min_hp: 5,
            max_hp: 30,
            max_damage: 5,
            max_heal: 3,
            heal_prob: 0.5,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("constraint families must not be empty".into()));
        }
        if self.min_hp < 1 || self.min_hp > self.max_hp {
            return Err(Error::Config(format!("hp range [{}, {}] invalid", self.min_hp, self.max_hp)));
        }
        if self.max_damage < 1 || self.max_heal < 0 {
            return Err(Error::Config("max_damage must be >= 1 and max_heal >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.heal_prob) {
            return Err(Error::Config("heal_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn sample_spec(family: Family, cfg: &ConstraintConfig, rng: &mut impl Rng) -> ConstraintSpec {
    match family {
        Family::Quantitative => ConstraintSpec::Quantitative {
            entity: *Hazard::ALL.choose(rng).expect("non-empty"),
            limit: rng.gen_range(0..=cfg.max_limit),
        },
        Family::Sequential => {
            let pair: Vec<Hazard> = Hazard::ALL.choose_multiple(rng, 2).copied().collect();
            ConstraintSpec::Sequential { first: pair[0], then: pair[1] }
        }
        Family::Mathematical => {
            let mut order = Hazard::ALL;
            order.shuffle(rng);
            let n_damage = rng.gen_range(1..=2);
            let mut deltas = BTreeMap::new();
            for &h in &order[..n_damage] {
                deltas.insert(h, -rng.gen_range(1..=cfg.max_damage));
            }
            if cfg.max_heal > 0 && rng.gen_bool(cfg.heal_prob) {
                deltas.insert(order[n_damage], rng.gen_range(1..=cfg.max_heal));
            }
            ConstraintSpec::Mathematical { hp: rng.gen_range(cfg.min_hp..=cfg.max_hp), deltas }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConstraintText {
    pub text: String,
    pub spec: ConstraintSpec,
    pub template_id: u32,
}

impl ConstraintText {
    pub fn spec_id(&self) -> String {
        self.spec.id()
    }
}

const NUMBER_WORDS: [&str; 41] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
    "twenty-one",
    "twenty-two",
    "twenty-three",
    "twenty-four",
    "twenty-five",
    "twenty-six",
    "twenty-seven",
    "twenty-eight",
    "twenty-nine",
    "thirty",
    "thirty-one",
    "thirty-two",
    "thirty-three",
    "thirty-four",
    "thirty-five",
    "thirty-six",
    "thirty-seven",
    "thirty-eight",
    "thirty-nine",
    "forty",
];

pub fn number_word(n: u32) -> String {
    NUMBER_WORDS.get(n as usize).map_or_else(|| n.to_string(), |w| (*w).to_string())
}

/// All number words the renderer can produce, for vocabulary construction.
pub fn number_words() -> &'static [&'static str] {
    &NUMBER_WORDS
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub const QUANT_TEMPLATES: u32 = 8;
pub const SEQ_TEMPLATES: u32 = 5;
pub const MATH_TEMPLATES: u32 = 4;

/// Templates usable for `spec`. Zero-tolerance phrasings only fit limit 0, and
/// "less than n" phrasings only fit limit >= 1.
pub fn templates_for(spec: &ConstraintSpec) -> Vec<u32> {
    match spec {
        ConstraintSpec::Quantitative { limit: 0, .. } => vec![0, 1, 2, 5, 6, 7],
        ConstraintSpec::Quantitative { .. } => vec![0, 1, 2, 3, 4],
        ConstraintSpec::Sequential { .. } => (0..SEQ_TEMPLATES).collect(),
        ConstraintSpec::Mathematical { .. } => (0..MATH_TEMPLATES).collect(),
    }
}

pub fn render_text(spec: &ConstraintSpec, rng: &mut impl Rng) -> ConstraintText {
    let id = *templates_for(spec).choose(rng).expect("every spec has templates");
    render_with_template(spec, id).expect("template chosen from the applicable set")
}

pub fn render_with_template(spec: &ConstraintSpec, template_id: u32) -> Result<ConstraintText> {
    if !templates_for(spec).contains(&template_id) {
        return Err(Error::Usage(format!("template {template_id} does not apply to {spec}")));
    }
    let text = match spec {
        ConstraintSpec::Quantitative { entity: e, limit: k } => {
            let kw = number_word(*k);
            match template_id {
                0 => format!("Do not cross {e} more than {kw} times."),
                1 => format!("Never reach {e} more than {k} times."),
                2 => format!("{} is dangerous. Don't touch them more than {kw} times!", capitalize(e.name())),
                3 => format!("Please touch {e} less than {} times.", k + 1),
                4 => format!("If you step on {e} more than {kw} times, you will get hurt."),
                5 => format!("The {e} is very dangerous. Please don't touch it."),
                6 => format!("Never step on {e}!"),
                _ => format!("Do not touch {e} at all."),
            }
        }
        ConstraintSpec::Sequential { first: a, then: b } => match template_id {
            0 => format!("After you touch {a}, don't step on {b}!"),
            1 => format!("Once you've walked past the {a}, make sure you don't set foot on {b}."),
            2 => format!("After walking past {a}, don't go back to the {b}."),
            3 => format!("Do not touch {b} after you touch {a}."),
            _ => format!("Never step on {b} once you have stepped on {a}."),
        },
        ConstraintSpec::Mathematical { hp, deltas } => {
            let damage: Vec<(Hazard, u32)> =
                deltas.iter().filter(|(_, &d)| d < 0).map(|(&h, &d)| (h, d.unsigned_abs())).collect();
            let heal: Vec<(Hazard, u32)> =
                deltas.iter().filter(|(_, &d)| d > 0).map(|(&h, &d)| (h, d as u32)).collect();
            let hp = *hp as u32;
            let w = number_word;
            match template_id {
                0 => {
                    let d: Vec<String> =
                        damage.iter().map(|(h, n)| format!("stepping on {h} will make you lose {n} HP")).collect();
                    let mut s = format!("You only have {hp} HP. {}.", capitalize(&d.join(", and ")));
                    for (h, n) in &heal {
                        s.push_str(&format!(" However, {h} can regenerate {n} HP."));
                    }
                    s.push_str(" Please don't die.");
                    s
                }
                1 => {
                    let d: Vec<String> = damage
                        .iter()
                        .map(|(h, n)| format!("you will lose {} HP every time you touch the {h}", w(*n)))
                        .collect();
                    let mut s = format!("You have {} HP, {}", w(hp), d.join(", and "));
                    for (h, n) in &heal {
                        s.push_str(&format!(", but you regain {} HP from each {h}", w(*n)));
                    }
                    s.push_str(", don't die.");
                    s
                }
                2 => {
                    let d: Vec<String> = damage.iter().map(|(h, n)| format!("{h} takes away {n} HP")).collect();
                    let mut s = format!("With only {hp} HP, {}", d.join(" and "));
                    for (h, n) in &heal {
                        s.push_str(&format!("; {h} heals {n} HP"));
                    }
                    s.push_str(". Your fate hangs by a thread, don't let it snap!");
                    s
                }
                _ => {
                    let mut parts: Vec<String> =
                        damage.iter().map(|(h, n)| format!("each touch of {h} costs {} HP", w(*n))).collect();
                    parts.extend(heal.iter().map(|(h, n)| format!("each touch of {h} restores {} HP", w(*n))));
                    format!("Your health is {} HP. {}. Stay alive!", w(hp), capitalize(&parts.join(", and ")))
                }
            }
        }
    };
    Ok(ConstraintText { text, spec: spec.clone(), template_id })
}

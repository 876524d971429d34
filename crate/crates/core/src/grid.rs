//! Seedable hazard gridworlds with egocentric partial observations.
//!
//! Two layouts are supported: `scatter` (hazard tiles and reward objects on
//! random free cells) and `lavawall` (one lava column with a single gap
//! between the agent and the rewards).

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VIEW: usize = 7;
pub const OBS_CHANNELS: usize = 3;
pub const OBS_LEN: usize = VIEW * VIEW * OBS_CHANNELS;
pub const NUM_ACTIONS: usize = 4;

/// Number of distinct values per observation channel (terrain, item, agent flag).
pub const CHANNEL_CARDINALITY: [usize; OBS_CHANNELS] = [5, 4, 2];

/// Hazard tiles. These form the entity alphabet of every constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hazard {
    Lava,
    Water,
    Grass,
}

impl Hazard {
    pub const ALL: [Hazard; 3] = [Hazard::Lava, Hazard::Water, Hazard::Grass];

    pub fn name(self) -> &'static str {
        match self {
            Hazard::Lava => "lava",
            Hazard::Water => "water",
            Hazard::Grass => "grass",
        }
    }

    pub fn from_name(s: &str) -> Option<Hazard> {
        Self::ALL.into_iter().find(|h| h.name() == s)
    }

    fn terrain(self) -> Terrain {
        match self {
            Hazard::Lava => Terrain::Lava,
            Hazard::Water => Terrain::Water,
            Hazard::Grass => Terrain::Grass,
        }
    }
}

impl fmt::Display for Hazard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Terrain {
    Floor = 0,
    Wall = 1,
    Lava = 2,
    Water = 3,
    Grass = 4,
}

impl Terrain {
    pub fn hazard(self) -> Option<Hazard> {
        match self {
            Terrain::Lava => Some(Hazard::Lava),
            Terrain::Water => Some(Hazard::Water),
            Terrain::Grass => Some(Hazard::Grass),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Item {
    Key = 1,
    Ball = 2,
    Box = 3,
}

impl Item {
    pub const ALL: [Item; 3] = [Item::Key, Item::Ball, Item::Box];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub terrain: Terrain,
    pub item: Option<Item>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    N,
    E,
    S,
    W,
}

impl Direction {
    const ALL: [Direction; 4] = [Direction::N, Direction::E, Direction::S, Direction::W];

    fn delta(self) -> (isize, isize) {
        match self {
            Direction::N => (-1, 0),
            Direction::E => (0, 1),
            Direction::S => (1, 0),
            Direction::W => (0, -1),
        }
    }

    fn right(self) -> Direction {
        match self {
            Direction::N => Direction::E,
            Direction::E => Direction::S,
            Direction::S => Direction::W,
            Direction::W => Direction::N,
        }
    }

    fn left(self) -> Direction {
        self.right().right().right()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Action {
    TurnLeft = 0,
    TurnRight = 1,
    Forward = 2,
    Pickup = 3,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::TurnLeft, Action::TurnRight, Action::Forward, Action::Pickup];

    pub fn from_index(i: usize) -> Result<Action> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::Usage(format!("action index {i} out of range")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutMode {
    #[default]
    Scatter,
    Lavawall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    /// Hazard tiles to scatter (ignored by the lavawall layout, which only has lava).
    pub entity_counts: BTreeMap<Hazard, usize>,
    pub reward_objects: BTreeMap<Item, usize>,
    pub horizon: usize,
    pub layout_mode: LayoutMode,
    /// End the episode once every reward object has been picked up.
    pub end_on_collect_all: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            width: 12,
            height: 12,
            entity_counts: Hazard::ALL.iter().map(|&h| (h, 6)).collect(),
            reward_objects: Item::ALL.iter().map(|&i| (i, 1)).collect(),
            horizon: 200,
            layout_mode: LayoutMode::Scatter,
            end_on_collect_all: true,
        }
    }
}

impl GridConfig {
    pub fn lavawall() -> Self {
        Self { layout_mode: LayoutMode::Lavawall, entity_counts: BTreeMap::new(), ..Self::default() }
    }

    pub fn num_objects(&self) -> usize {
        self.reward_objects.values().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 3 || self.height < 3 {
            return Err(Error::Config(format!("grid {}x{} too small (need at least 3x3)", self.width, self.height)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        let interior = (self.width - 2) * (self.height - 2);
        let occupied = match self.layout_mode {
            LayoutMode::Scatter => self.entity_counts.values().sum::<usize>() + self.num_objects() + 1,
            LayoutMode::Lavawall => {
                if self.width < 5 {
                    return Err(Error::Config("lavawall layout needs width >= 5".into()));
                }
                // wall column + agent + objects
                (self.height - 2) + 1 + self.num_objects()
            }
        };
        if occupied >= interior {
            return Err(Error::Config(format!(
                "layout infeasible: {occupied} occupied cells do not fit into {interior} interior cells"
            )));
        }
        if self.layout_mode == LayoutMode::Lavawall {
            let side = (self.height - 2) * ((self.width - 2 - 1) / 2);
            if self.num_objects() > side || side == 0 {
                return Err(Error::Config(format!(
                    "layout infeasible: {} objects do not fit beside the lava wall",
                    self.num_objects()
                )));
            }
        }
        Ok(())
    }
}

/// 7x7x3 egocentric view: the agent sits at the bottom-centre facing up.
/// Channels are (terrain id, item id, agent flag); off-grid cells read as wall.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation(pub [u8; OBS_LEN]);

impl Observation {
    /// Input used for the padding step of a policy history.
    pub const PAD: Observation = Observation([0; OBS_LEN]);

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.0[(row * VIEW + col) * OBS_CHANNELS + ch]
    }

    pub fn shape(&self) -> [usize; 3] {
        [VIEW, VIEW, OBS_CHANNELS]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn from_slice(s: &[u8]) -> Option<Observation> {
        if s.len() != OBS_LEN {
            return None;
        }
        let mut o = [0u8; OBS_LEN];
        o.copy_from_slice(s);
        let valid = o.chunks(OBS_CHANNELS).all(|c| c.iter().zip(CHANNEL_CARDINALITY).all(|(&v, n)| (v as usize) < n));
        valid.then_some(Observation(o))
    }

    /// Terrain directly in front of the agent.
    pub fn front_terrain(&self) -> u8 {
        self.get(VIEW - 2, VIEW / 2, 0)
    }
}

impl fmt::Debug for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..VIEW {
            for c in 0..VIEW {
                let ch = match (self.get(r, c, 0), self.get(r, c, 1), self.get(r, c, 2)) {
                    (_, _, 1) => '@',
                    (_, 1, _) => 'k',
                    (_, 2, _) => 'b',
                    (_, 3, _) => 'x',
                    (1, _, _) => '#',
                    (2, _, _) => 'L',
                    (3, _, _) => 'W',
                    (4, _, _) => 'G',
                    _ => '.',
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    /// Hazard entered on this step; at most one element.
    pub events: Vec<Hazard>,
    pub terminated: bool,
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Placed {
    pos: (usize, usize),
    kind: Item,
}

#[derive(Clone, Debug)]
pub struct EnvState {
    config: GridConfig,
    initial_grid: Vec<Cell>,
    initial_agent: ((usize, usize), Direction),
    grid: Vec<Cell>,
    objects: Vec<Placed>,
    agent_pos: (usize, usize),
    agent_dir: Direction,
    step_count: usize,
    collected: Vec<usize>,
    terminated: bool,
    seed: u64,
}

pub fn make_env(config: &GridConfig, seed: u64) -> Result<EnvState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.width, config.height);
    let mut grid = vec![Cell { terrain: Terrain::Floor, item: None }; w * h];
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                grid[r * w + c].terrain = Terrain::Wall;
            }
        }
    }
    let mut objects = Vec::new();
    let agent_pos;
    match config.layout_mode {
        LayoutMode::Scatter => {
            let mut free: Vec<(usize, usize)> = (1..h - 1).flat_map(|r| (1..w - 1).map(move |c| (r, c))).collect();
            free.shuffle(&mut rng);
            let mut it = free.into_iter();
            for (&hz, &n) in &config.entity_counts {
                for _ in 0..n {
                    let (r, c) = it.next().expect("validated");
                    grid[r * w + c].terrain = hz.terrain();
                }
            }
            for (&kind, &n) in &config.reward_objects {
                for _ in 0..n {
                    let pos = it.next().expect("validated");
                    grid[pos.0 * w + pos.1].item = Some(kind);
                    objects.push(Placed { pos, kind });
                }
            }
            agent_pos = it.next().expect("validated");
        }
        LayoutMode::Lavawall => {
            let wall_col = rng.gen_range(2..=w - 3);
            let gap_row = rng.gen_range(1..h - 1);
            for r in 1..h - 1 {
                if r != gap_row {
                    grid[r * w + wall_col].terrain = Terrain::Lava;
                }
            }
            let (left, right) = ((1..wall_col), (wall_col + 1..w - 1));
            // Rewards go on the wider side so they always fit.
            let (agent_cols, reward_cols) = if right.len() >= left.len() { (left, right) } else { (right, left) };
            let mut reward_cells: Vec<(usize, usize)> =
                (1..h - 1).flat_map(|r| reward_cols.clone().map(move |c| (r, c))).collect();
            reward_cells.shuffle(&mut rng);
            let mut it = reward_cells.into_iter();
            for (&kind, &n) in &config.reward_objects {
                for _ in 0..n {
                    let pos = it.next().ok_or_else(|| {
                        Error::Config("layout infeasible: objects do not fit beside the lava wall".into())
                    })?;
                    grid[pos.0 * w + pos.1].item = Some(kind);
                    objects.push(Placed { pos, kind });
                }
            }
            let agent_cells: Vec<(usize, usize)> =
                (1..h - 1).flat_map(|r| agent_cols.clone().map(move |c| (r, c))).collect();
            agent_pos = *agent_cells.choose(&mut rng).expect("validated");
        }
    }
    let agent_dir = *Direction::ALL.choose(&mut rng).expect("non-empty");
    Ok(EnvState {
        config: config.clone(),
        initial_grid: grid.clone(),
        initial_agent: (agent_pos, agent_dir),
        grid,
        objects,
        agent_pos,
        agent_dir,
        step_count: 0,
        collected: Vec::new(),
        terminated: false,
        seed,
    })
}

impl EnvState {
    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn agent_pos(&self) -> (usize, usize) {
        self.agent_pos
    }

    pub fn agent_dir(&self) -> Direction {
        self.agent_dir
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn collected(&self) -> &[usize] {
        &self.collected
    }

    pub fn is_done(&self) -> bool {
        self.terminated || self.step_count >= self.config.horizon
    }

    /// Full grid, row-major.
    pub fn grid(&self) -> &[Cell] {
        &self.grid
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.grid[row * self.config.width + col]
    }

    /// Terminates the episode from outside (constraint violation).
    pub fn terminate(&mut self) {
        self.terminated = true;
    }

    /// Restores the initial layout and agent pose.
    pub fn reset(&mut self) -> Observation {
        self.grid.clone_from(&self.initial_grid);
        (self.agent_pos, self.agent_dir) = self.initial_agent;
        self.step_count = 0;
        self.collected.clear();
        self.terminated = false;
        self.observe()
    }

    pub fn observe(&self) -> Observation {
        let mut o = [0u8; OBS_LEN];
        let fwd = self.agent_dir.delta();
        let right = self.agent_dir.right().delta();
        let (ar, ac) = (self.agent_pos.0 as isize, self.agent_pos.1 as isize);
        for i in 0..VIEW {
            for j in 0..VIEW {
                let f = (VIEW - 1 - i) as isize;
                let l = j as isize - (VIEW / 2) as isize;
                let r = ar + f * fwd.0 + l * right.0;
                let c = ac + f * fwd.1 + l * right.1;
                let base = (i * VIEW + j) * OBS_CHANNELS;
                let inside = r >= 0 && c >= 0 && (r as usize) < self.config.height && (c as usize) < self.config.width;
                if inside {
                    let cell = self.grid[r as usize * self.config.width + c as usize];
                    o[base] = cell.terrain as u8;
                    o[base + 1] = cell.item.map_or(0, |it| it as u8);
                } else {
                    o[base] = Terrain::Wall as u8;
                }
                if f == 0 && l == 0 {
                    o[base + 2] = 1;
                }
            }
        }
        Observation(o)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.is_done() {
            return Err(Error::Usage("step() called on a finished episode".into()));
        }
        let mut reward = 0.0;
        let mut events = Vec::new();
        match action {
            Action::TurnLeft => self.agent_dir = self.agent_dir.left(),
            Action::TurnRight => self.agent_dir = self.agent_dir.right(),
            Action::Forward => {
                let (dr, dc) = self.agent_dir.delta();
                let r = (self.agent_pos.0 as isize + dr) as usize;
                let c = (self.agent_pos.1 as isize + dc) as usize;
                let target = self.grid[r * self.config.width + c];
                if target.terrain != Terrain::Wall {
                    self.agent_pos = (r, c);
                    if let Some(h) = target.terrain.hazard() {
                        events.push(h);
                    }
                }
            }
            Action::Pickup => {
                let idx = self.agent_pos.0 * self.config.width + self.agent_pos.1;
                if self.grid[idx].item.take().is_some() {
                    let id = self
                        .objects
                        .iter()
                        .position(|o| o.pos == self.agent_pos)
                        .expect("item cell has an object record");
                    self.collected.push(id);
                    reward = 1.0;
                }
            }
        }
        self.step_count += 1;
        if self.config.end_on_collect_all && !self.objects.is_empty() && self.collected.len() == self.objects.len() {
            self.terminated = true;
        }
        Ok(StepResult {
            obs: self.observe(),
            reward,
            events,
            terminated: self.terminated,
            truncated: self.step_count >= self.config.horizon,
        })
    }

    /// ASCII dump of the full grid for debugging and oracle checks.
    pub fn dump_ascii(&self) -> String {
        let mut s = String::new();
        for r in 0..self.config.height {
            for c in 0..self.config.width {
                let ch = if (r, c) == self.agent_pos {
                    match self.agent_dir {
                        Direction::N => '^',
                        Direction::E => '>',
                        Direction::S => 'v',
                        Direction::W => '<',
                    }
                } else {
                    let cell = self.cell(r, c);
                    match (cell.item, cell.terrain) {
                        (Some(Item::Key), _) => 'k',
                        (Some(Item::Ball), _) => 'b',
                        (Some(Item::Box), _) => 'x',
                        (None, Terrain::Wall) => '#',
                        (None, Terrain::Lava) => 'L',
                        (None, Terrain::Water) => 'W',
                        (None, Terrain::Grass) => 'G',
                        (None, Terrain::Floor) => '.',
                    }
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }

    /// Moves the agent, for hand-built scenarios.
    pub fn place_agent(&mut self, pos: (usize, usize), dir: Direction) {
        self.agent_pos = pos;
        self.agent_dir = dir;
    }

    /// Overwrites one cell, registering any item it holds.
    pub fn set_cell(&mut self, pos: (usize, usize), cell: Cell) {
        let w = self.config.width;
        self.grid[pos.0 * w + pos.1] = cell;
        if let Some(kind) = cell.item {
            self.objects.push(Placed { pos, kind });
        }
    }
}

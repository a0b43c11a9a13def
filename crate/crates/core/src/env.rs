//! Multi-goal MDPs and the two gridworld games.
//!
//! A [`GoalMdp`] is a fully tabular description: transitions are stored as
//! sparse distributions per `(state, action)`, rewards are credited when a
//! state is *entered* (`r(s_{t+1}, g)`) plus an optional per-`(state, action)`
//! penalty (used for wall bumps). Both games are deterministic, but every
//! consumer (sampler, oracle) goes through the general representation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("{name} does not sum to one (sum = {sum})")]
    NotNormalized { name: &'static str, sum: f64 },
    #[error("initial distribution puts mass {mass} on terminal state {state}")]
    TerminalStart { state: usize, mass: f64 },
    #[error("transition row ({state}, {action}) is invalid: {reason}")]
    BadTransition {
        state: usize,
        action: usize,
        reason: String,
    },
    #[error("gamma {0} outside [0, 1]")]
    BadGamma(f64),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("table {name} has length {got}, expected {expected}")]
    Shape {
        name: &'static str,
        got: usize,
        expected: usize,
    },
}

/// Grid actions shared by both games.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Move {
    Left,
    Right,
    Up,
    Down,
    Stay,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::Left, Move::Right, Move::Up, Move::Down, Move::Stay];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Move {
        Move::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Move::Left => "left",
            Move::Right => "right",
            Move::Up => "up",
            Move::Down => "down",
            Move::Stay => "stay",
        }
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Move::Left => (-1, 0),
            Move::Right => (1, 0),
            Move::Up => (0, -1),
            Move::Down => (0, 1),
            Move::Stay => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPos {
    pub x: usize,
    pub y: usize,
}

impl GridPos {
    pub const fn new(x: usize, y: usize) -> Self {
        GridPos { x, y }
    }
}

/// Key held by an agent in the key-and-door game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyState {
    None,
    /// Goal-specific key opening only the door of this goal.
    Goal(usize),
    Master,
}

impl KeyState {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            KeyState::None => 0,
            KeyState::Goal(g) => 1 + g,
            KeyState::Master => 3,
        }
    }

    pub fn from_index(i: usize) -> KeyState {
        match i {
            0 => KeyState::None,
            1 | 2 => KeyState::Goal(i - 1),
            _ => KeyState::Master,
        }
    }

    pub fn opens(self, door_goal: usize) -> bool {
        match self {
            KeyState::None => false,
            KeyState::Goal(g) => g == door_goal,
            KeyState::Master => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Game {
    Nav,
    Key,
}

impl Game {
    pub fn name(self) -> &'static str {
        match self {
            Game::Nav => "nav",
            Game::Key => "key",
        }
    }
}

impl std::str::FromStr for Game {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nav" => Ok(Game::Nav),
            "key" => Ok(Game::Key),
            other => Err(format!("unknown game `{other}` (expected nav or key)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Alice,
    Bob,
}

/// Spatial metadata for grid games; lets callers map state indices back to
/// cells, keys and goals.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    pub game: Game,
    pub width: usize,
    pub height: usize,
    /// Number of key states per cell (1 for the navigation game).
    pub key_states: usize,
    /// Goal (door) cell of each goal.
    pub goal_cells: Vec<GridPos>,
}

impl GridLayout {
    pub fn cell_index(&self, p: GridPos) -> usize {
        p.y * self.width + p.x
    }

    pub fn state_index(&self, p: GridPos, key: KeyState) -> usize {
        self.cell_index(p) * self.key_states + key.index()
    }

    pub fn decode(&self, s: usize) -> (GridPos, KeyState) {
        let cell = s / self.key_states;
        let key = KeyState::from_index(s % self.key_states);
        (GridPos::new(cell % self.width, cell / self.width), key)
    }

    /// Goal whose door cell contains state `s`, if any.
    pub fn goal_at(&self, s: usize) -> Option<usize> {
        let (p, _) = self.decode(s);
        self.goal_cells.iter().position(|&c| c == p)
    }

    fn num_cells(&self) -> usize {
        self.width * self.height
    }
}

/// Tabular multi-goal MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalMdp {
    num_states: usize,
    num_actions: usize,
    num_goals: usize,
    /// Sparse next-state distributions indexed by `s * A + a`.
    transitions: Vec<Vec<(usize, f64)>>,
    goal_dist: Vec<f64>,
    init_dist: Vec<f64>,
    /// Reward for entering state `s` under goal `g`, indexed `s * G + g`.
    entry_reward: Vec<f64>,
    /// Extra reward for taking `a` in `s`, indexed `s * A + a`.
    action_penalty: Vec<f64>,
    terminal: Vec<bool>,
    gamma: f64,
    horizon: usize,
    layout: Option<GridLayout>,
}

/// Builder input for [`GoalMdp::new`].
#[derive(Debug, Clone)]
pub struct MdpTables {
    pub num_states: usize,
    pub num_actions: usize,
    pub num_goals: usize,
    pub transitions: Vec<Vec<(usize, f64)>>,
    pub goal_dist: Vec<f64>,
    pub init_dist: Vec<f64>,
    pub entry_reward: Vec<f64>,
    pub action_penalty: Vec<f64>,
    pub terminal: Vec<bool>,
    pub gamma: f64,
    pub horizon: usize,
}

fn check_len(name: &'static str, got: usize, expected: usize) -> Result<(), EnvError> {
    if got != expected {
        return Err(EnvError::Shape {
            name,
            got,
            expected,
        });
    }
    Ok(())
}

fn check_dist(name: &'static str, p: &[f64]) -> Result<(), EnvError> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > PROB_TOL {
        return Err(EnvError::NotNormalized { name, sum });
    }
    Ok(())
}

impl GoalMdp {
    pub fn new(t: MdpTables) -> Result<Self, EnvError> {
        let (ns, na, ng) = (t.num_states, t.num_actions, t.num_goals);
        check_len("transitions", t.transitions.len(), ns * na)?;
        check_len("goal_dist", t.goal_dist.len(), ng)?;
        check_len("init_dist", t.init_dist.len(), ns)?;
        check_len("entry_reward", t.entry_reward.len(), ns * ng)?;
        check_len("action_penalty", t.action_penalty.len(), ns * na)?;
        check_len("terminal", t.terminal.len(), ns)?;
        check_dist("goal distribution", &t.goal_dist)?;
        check_dist("initial-state distribution", &t.init_dist)?;
        for (s, &m) in t.init_dist.iter().enumerate() {
            if t.terminal[s] && m > 0.0 {
                return Err(EnvError::TerminalStart { state: s, mass: m });
            }
        }
        for (i, row) in t.transitions.iter().enumerate() {
            let bad = |reason: String| EnvError::BadTransition {
                state: i / na,
                action: i % na,
                reason,
            };
            if row.is_empty() {
                return Err(bad("empty".into()));
            }
            let mut sum = 0.0;
            for &(next, p) in row {
                if next >= ns {
                    return Err(bad(format!("next state {next} out of range")));
                }
                if !(p >= 0.0) {
                    return Err(bad(format!("negative probability {p}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(bad(format!("sums to {sum}")));
            }
        }
        if !(0.0..=1.0).contains(&t.gamma) {
            return Err(EnvError::BadGamma(t.gamma));
        }
        if t.horizon == 0 {
            return Err(EnvError::ZeroHorizon);
        }
        Ok(GoalMdp {
            num_states: ns,
            num_actions: na,
            num_goals: ng,
            transitions: t.transitions,
            goal_dist: t.goal_dist,
            init_dist: t.init_dist,
            entry_reward: t.entry_reward,
            action_penalty: t.action_penalty,
            terminal: t.terminal,
            gamma: t.gamma,
            horizon: t.horizon,
            layout: None,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn num_goals(&self) -> usize {
        self.num_goals
    }
    pub fn goal_dist(&self) -> &[f64] {
        &self.goal_dist
    }
    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn layout(&self) -> Option<&GridLayout> {
        self.layout.as_ref()
    }
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }
    pub fn transition(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[s * self.num_actions + a]
    }
    pub fn entry_reward(&self, s: usize, g: usize) -> f64 {
        self.entry_reward[s * self.num_goals + g]
    }
    pub fn action_penalty(&self, s: usize, a: usize) -> f64 {
        self.action_penalty[s * self.num_actions + a]
    }

    /// Reward for the transition `s --a--> next` under goal `g`.
    pub fn reward(&self, s: usize, a: usize, next: usize, g: usize) -> f64 {
        self.entry_reward(next, g) + self.action_penalty(s, a)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self, EnvError> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(EnvError::BadGamma(gamma));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self, EnvError> {
        if horizon == 0 {
            return Err(EnvError::ZeroHorizon);
        }
        self.horizon = horizon;
        Ok(self)
    }

    /// Replaces the goal prior; used for degenerate single-goal checks.
    pub fn with_goal_dist(mut self, goal_dist: Vec<f64>) -> Result<Self, EnvError> {
        check_len("goal_dist", goal_dist.len(), self.num_goals)?;
        check_dist("goal distribution", &goal_dist)?;
        self.goal_dist = goal_dist;
        Ok(self)
    }

    fn with_layout(mut self, layout: GridLayout) -> Self {
        self.layout = Some(layout);
        self
    }

    /// One environment step. Stepping from a terminal state is a contract
    /// violation and panics.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, g: usize, rng: &mut R) -> StepOutcome {
        assert!(!self.terminal[s], "step from terminal state {s}");
        assert!(a < self.num_actions, "invalid action {a}");
        let row = self.transition(s, a);
        let next = if row.len() == 1 {
            row[0].0
        } else {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = row[row.len() - 1].0;
            for &(n, p) in row {
                acc += p;
                if u < acc {
                    pick = n;
                    break;
                }
            }
            pick
        };
        StepOutcome {
            next_state: next,
            reward: self.reward(s, a, next, g),
            terminal: self.terminal[next],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: usize,
    pub reward: f64,
    pub terminal: bool,
}

/// Anything that yields a goal-conditioned action distribution.
pub trait GoalPolicy {
    fn num_actions(&self) -> usize;
    /// Writes `pi_g(. | s)` into `out`.
    fn action_probs_into(&self, g: usize, s: usize, out: &mut [f64]);
}

/// Adapter turning a closure into a [`GoalPolicy`].
pub struct FnPolicy<F> {
    num_actions: usize,
    f: F,
}

impl<F: Fn(usize, usize, &mut [f64])> FnPolicy<F> {
    pub fn new(num_actions: usize, f: F) -> Self {
        FnPolicy { num_actions, f }
    }
}

impl<F: Fn(usize, usize, &mut [f64])> GoalPolicy for FnPolicy<F> {
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn action_probs_into(&self, g: usize, s: usize, out: &mut [f64]) {
        (self.f)(g, s, out)
    }
}

/// Draws an index from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` slightly below one; fall back to the last
    // index carrying mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub goal: usize,
    pub steps: Vec<Step>,
    /// Horizon reached without entering a terminal state.
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn final_state(&self) -> Option<usize> {
        self.steps.last().map(|s| s.next_state)
    }
}

/// Samples `g ~ rho_G`, `s_0 ~ rho_S` and rolls out `policy`.
pub fn sample_episode<P, R>(mdp: &GoalMdp, policy: &P, rng: &mut R) -> Trajectory
where
    P: GoalPolicy + ?Sized,
    R: Rng + ?Sized,
{
    let g = sample_index(&mdp.goal_dist, rng);
    let s0 = sample_index(&mdp.init_dist, rng);
    rollout(mdp, policy, g, s0, rng)
}

/// Rolls out `policy` from a fixed goal and start state.
pub fn rollout<P, R>(mdp: &GoalMdp, policy: &P, g: usize, s0: usize, rng: &mut R) -> Trajectory
where
    P: GoalPolicy + ?Sized,
    R: Rng + ?Sized,
{
    let mut probs = vec![0.0; mdp.num_actions];
    let mut steps = Vec::new();
    let mut s = s0;
    let mut truncated = true;
    for _ in 0..mdp.horizon {
        policy.action_probs_into(g, s, &mut probs);
        let a = sample_index(&probs, rng);
        let out = mdp.step(s, a, g, rng);
        steps.push(Step {
            state: s,
            action: a,
            reward: out.reward,
            next_state: out.next_state,
        });
        s = out.next_state;
        if out.terminal {
            truncated = false;
            break;
        }
    }
    Trajectory {
        goal: g,
        steps,
        truncated,
    }
}

pub const WALL_PENALTY: f64 = -0.1;
pub const GOAL_REWARD: f64 = 1.0;
pub const WRONG_GOAL_REWARD: f64 = -1.0;
pub const DEFAULT_GAMMA: f64 = 0.8;
pub const DEFAULT_HORIZON: usize = 100;

fn try_move(p: GridPos, m: Move, width: usize, height: usize) -> Option<GridPos> {
    let (dx, dy) = m.delta();
    let x = p.x as i64 + dx;
    let y = p.y as i64 + dy;
    if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
        None
    } else {
        Some(GridPos::new(x as usize, y as usize))
    }
}

/// 5x5 navigation game: goals in the top-left and top-right corners.
pub fn build_nav_world() -> GoalMdp {
    build_nav_world_sized(5, 5)
}

/// Navigation game on a `width x height` grid; goals in the two top corners.
pub fn build_nav_world_sized(width: usize, height: usize) -> GoalMdp {
    assert!(width >= 2 && height >= 1, "grid too small");
    let layout = GridLayout {
        game: Game::Nav,
        width,
        height,
        key_states: 1,
        goal_cells: vec![GridPos::new(0, 0), GridPos::new(width - 1, 0)],
    };
    let ns = layout.num_cells();
    let na = Move::ALL.len();
    let ng = 2;
    let mut transitions = Vec::with_capacity(ns * na);
    let mut action_penalty = vec![0.0; ns * na];
    let mut entry_reward = vec![0.0; ns * ng];
    let mut terminal = vec![false; ns];
    for (g, &c) in layout.goal_cells.iter().enumerate() {
        let s = layout.cell_index(c);
        terminal[s] = true;
        for goal in 0..ng {
            entry_reward[s * ng + goal] = if goal == g {
                GOAL_REWARD
            } else {
                WRONG_GOAL_REWARD
            };
        }
    }
    for s in 0..ns {
        let p = GridPos::new(s % width, s / width);
        for m in Move::ALL {
            let next = match try_move(p, m, width, height) {
                Some(q) => layout.cell_index(q),
                None => {
                    action_penalty[s * na + m.index()] = WALL_PENALTY;
                    s
                }
            };
            transitions.push(vec![(next, 1.0)]);
        }
    }
    let starts = terminal.iter().filter(|t| !**t).count() as f64;
    let init_dist = terminal
        .iter()
        .map(|&t| if t { 0.0 } else { 1.0 / starts })
        .collect();
    GoalMdp::new(MdpTables {
        num_states: ns,
        num_actions: na,
        num_goals: ng,
        transitions,
        goal_dist: vec![0.5, 0.5],
        init_dist,
        entry_reward,
        action_penalty,
        terminal,
        gamma: DEFAULT_GAMMA,
        horizon: DEFAULT_HORIZON,
    })
    .expect("navigation world tables are valid")
    .with_layout(layout)
}

/// Key-and-door layout. Door `g` belongs to goal `g` (0 = top, 1 = bottom).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyLayout {
    pub width: usize,
    pub height: usize,
    pub doors: [GridPos; 2],
    pub bob_spawn: GridPos,
    pub bob_keys: [GridPos; 2],
    pub alice_spawns: Vec<GridPos>,
    pub alice_keys: [GridPos; 2],
    pub master_key: GridPos,
}

impl Default for KeyLayout {
    /// 7 wide, 5 tall, master key three cells right of Alice's centre spawn.
    fn default() -> Self {
        KeyLayout {
            width: 7,
            height: 5,
            doors: [GridPos::new(0, 0), GridPos::new(0, 4)],
            bob_spawn: GridPos::new(0, 2),
            bob_keys: [GridPos::new(0, 1), GridPos::new(0, 3)],
            alice_spawns: vec![GridPos::new(2, 1), GridPos::new(2, 2), GridPos::new(2, 3)],
            alice_keys: [GridPos::new(2, 0), GridPos::new(2, 4)],
            master_key: GridPos::new(5, 2),
        }
    }
}

/// Key-and-door game on the default layout.
pub fn build_key_world(agent: Role) -> GoalMdp {
    build_key_world_with(&KeyLayout::default(), agent)
}

/// Key-and-door game for the given agent. Alice's world contains the master
/// key; Bob's does not. A door only opens (is terminal) for a key that fits.
pub fn build_key_world_with(kl: &KeyLayout, agent: Role) -> GoalMdp {
    let (width, height) = (kl.width, kl.height);
    let layout = GridLayout {
        game: Game::Key,
        width,
        height,
        key_states: KeyState::COUNT,
        goal_cells: kl.doors.to_vec(),
    };
    let (goal_keys, master, spawns): (&[GridPos], Option<GridPos>, Vec<GridPos>) = match agent {
        Role::Alice => (&kl.alice_keys, Some(kl.master_key), kl.alice_spawns.clone()),
        Role::Bob => (&kl.bob_keys, None, vec![kl.bob_spawn]),
    };
    let ns = layout.num_cells() * KeyState::COUNT;
    let na = Move::ALL.len();
    let ng = 2;

    let door_goal = |p: GridPos| kl.doors.iter().position(|&d| d == p);
    let mut terminal = vec![false; ns];
    let mut entry_reward = vec![0.0; ns * ng];
    for s in 0..ns {
        let (p, key) = layout.decode(s);
        if let Some(door) = door_goal(p) {
            if key.opens(door) {
                terminal[s] = true;
                for goal in 0..ng {
                    entry_reward[s * ng + goal] = if goal == door {
                        GOAL_REWARD
                    } else {
                        WRONG_GOAL_REWARD
                    };
                }
            }
        }
    }

    let mut transitions = Vec::with_capacity(ns * na);
    let mut action_penalty = vec![0.0; ns * na];
    for s in 0..ns {
        let (p, key) = layout.decode(s);
        for m in Move::ALL {
            let next = match try_move(p, m, width, height) {
                None => {
                    action_penalty[s * na + m.index()] = WALL_PENALTY;
                    s
                }
                Some(q) => {
                    let mut held = key;
                    if held == KeyState::None {
                        if let Some(g) = goal_keys.iter().position(|&k| k == q) {
                            held = KeyState::Goal(g);
                        } else if master == Some(q) {
                            held = KeyState::Master;
                        }
                    }
                    layout.state_index(q, held)
                }
            };
            transitions.push(vec![(next, 1.0)]);
        }
    }

    let mut init_dist = vec![0.0; ns];
    for p in &spawns {
        init_dist[layout.state_index(*p, KeyState::None)] = 1.0 / spawns.len() as f64;
    }

    GoalMdp::new(MdpTables {
        num_states: ns,
        num_actions: na,
        num_goals: ng,
        transitions,
        goal_dist: vec![0.5, 0.5],
        init_dist,
        entry_reward,
        action_penalty,
        terminal,
        gamma: DEFAULT_GAMMA,
        horizon: DEFAULT_HORIZON,
    })
    .expect("key world tables are valid")
    .with_layout(layout)
}

/// Builds the world an agent of `role` plays in for `game`.
pub fn build_world(game: Game, role: Role) -> GoalMdp {
    match game {
        Game::Nav => build_nav_world(),
        Game::Key => build_key_world(role),
    }
}

/// Which key (if any) an episode ended holding.
pub fn key_pickup(mdp: &GoalMdp, traj: &Trajectory) -> Option<KeyState> {
    let layout = mdp.layout()?;
    if layout.game != Game::Key {
        return None;
    }
    let last = traj.final_state()?;
    Some(layout.decode(last).1)
}

/// Shortest number of steps from `s` to a terminal state that gives goal
/// `g` its positive reward, by breadth-first search over deterministic
/// successors. `None` when unreachable.
pub fn shortest_path_to_goal(mdp: &GoalMdp, s: usize, g: usize) -> Option<usize> {
    let mut dist = vec![usize::MAX; mdp.num_states()];
    let mut queue = std::collections::VecDeque::new();
    dist[s] = 0;
    queue.push_back(s);
    while let Some(u) = queue.pop_front() {
        if mdp.is_terminal(u) {
            if mdp.entry_reward(u, g) > 0.0 {
                return Some(dist[u]);
            }
            continue;
        }
        for a in 0..mdp.num_actions() {
            for &(v, p) in mdp.transition(u, a) {
                if p > 0.0 && dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nav_state(x: usize, y: usize) -> usize {
        y * 5 + x
    }

    #[test]
    fn nav_goal_entry() {
        let mdp = build_nav_world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = mdp.step(nav_state(0, 1), Move::Up.index(), 0, &mut rng);
        assert_eq!(out.next_state, nav_state(0, 0));
        assert_eq!(out.reward, 1.0);
        assert!(out.terminal);

        let out = mdp.step(nav_state(4, 1), Move::Up.index(), 0, &mut rng);
        assert_eq!(out.next_state, nav_state(4, 0));
        assert_eq!(out.reward, -1.0);
        assert!(out.terminal);
    }

    #[test]
    fn nav_walls_and_stay() {
        let mdp = build_nav_world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = mdp.step(nav_state(0, 2), Move::Left.index(), 1, &mut rng);
        assert_eq!((out.next_state, out.reward, out.terminal), (nav_state(0, 2), -0.1, false));
        let out = mdp.step(nav_state(2, 4), Move::Down.index(), 0, &mut rng);
        assert_eq!((out.next_state, out.reward, out.terminal), (nav_state(2, 4), -0.1, false));
        let out = mdp.step(nav_state(2, 2), Move::Stay.index(), 0, &mut rng);
        assert_eq!((out.next_state, out.reward, out.terminal), (nav_state(2, 2), 0.0, false));
    }

    #[test]
    fn nav_distributions() {
        let mdp = build_nav_world();
        assert_eq!(mdp.num_states(), 25);
        assert_eq!(mdp.goal_dist(), &[0.5, 0.5]);
        let starts: Vec<_> = mdp.init_dist().iter().filter(|&&p| p > 0.0).collect();
        assert_eq!(starts.len(), 23);
        assert!(starts.iter().all(|&&p| (p - 1.0 / 23.0).abs() < 1e-15));
        assert_eq!(mdp.gamma(), 0.8);
        assert_eq!(mdp.horizon(), 100);
    }

    #[test]
    fn key_pickup_is_first_encountered() {
        let mdp = build_key_world(Role::Alice);
        let l = mdp.layout().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = l.state_index(GridPos::new(2, 1), KeyState::None);
        let out = mdp.step(s, Move::Up.index(), 0, &mut rng);
        assert_eq!(l.decode(out.next_state), (GridPos::new(2, 0), KeyState::Goal(0)));
        // Walking onto the master key afterwards keeps the goal key.
        let s = l.state_index(GridPos::new(4, 2), KeyState::Goal(0));
        let out = mdp.step(s, Move::Right.index(), 0, &mut rng);
        assert_eq!(l.decode(out.next_state), (GridPos::new(5, 2), KeyState::Goal(0)));
        let s = l.state_index(GridPos::new(4, 2), KeyState::None);
        let out = mdp.step(s, Move::Right.index(), 0, &mut rng);
        assert_eq!(l.decode(out.next_state).1, KeyState::Master);
    }

    #[test]
    fn key_doors() {
        let mdp = build_key_world(Role::Alice);
        let l = mdp.layout().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (door_goal, from) in [(0, GridPos::new(0, 1)), (1, GridPos::new(0, 3))] {
            let mv = if door_goal == 0 { Move::Up } else { Move::Down };
            for g in 0..2 {
                let s = l.state_index(from, KeyState::Master);
                let out = mdp.step(s, mv.index(), g, &mut rng);
                assert!(out.terminal);
                assert_eq!(out.reward, if g == door_goal { 1.0 } else { -1.0 });
            }
            // Locked door: ordinary cell.
            let s = l.state_index(from, KeyState::None);
            let out = mdp.step(s, mv.index(), door_goal, &mut rng);
            assert!(!out.terminal);
            assert_eq!(out.reward, 0.0);
            // Wrong goal key does not open it either.
            let s = l.state_index(from, KeyState::Goal(1 - door_goal));
            let out = mdp.step(s, mv.index(), door_goal, &mut rng);
            assert!(!out.terminal);
        }
    }

    #[test]
    fn bob_has_no_master_key() {
        let mdp = build_key_world(Role::Bob);
        let l = mdp.layout().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = l.state_index(GridPos::new(4, 2), KeyState::None);
        let out = mdp.step(s, Move::Right.index(), 0, &mut rng);
        assert_eq!(l.decode(out.next_state).1, KeyState::None);
        let spawn = l.state_index(KeyLayout::default().bob_spawn, KeyState::None);
        assert_eq!(mdp.init_dist()[spawn], 1.0);
    }

    #[test]
    fn key_layout_path_lengths() {
        // BFS check of the layout's route-length constraints.
        let alice = build_key_world(Role::Alice);
        let bob = build_key_world(Role::Bob);
        let la = alice.layout().unwrap().clone();
        let bob_start = la.state_index(KeyLayout::default().bob_spawn, KeyState::None);
        for g in 0..2 {
            assert_eq!(shortest_path_to_goal(&bob, bob_start, g), Some(2));
        }
        let direct: Vec<usize> = KeyLayout::default().alice_spawns
            .iter()
            .flat_map(|&p| {
                let s = la.state_index(p, KeyState::None);
                (0..2).map(move |g| (s, g))
            })
            .map(|(s, g)| shortest_path_to_goal(&alice, s, g).unwrap())
            .collect();
        assert_eq!(direct.iter().min(), Some(&3));
        assert_eq!(direct.iter().max(), Some(&5));
        // Master route from the centre spawn: to the key, then to either door.
        let centre = la.state_index(GridPos::new(2, 2), KeyState::None);
        let master = la.state_index(KeyLayout::default().master_key, KeyState::Master);
        let with_master = |s: usize| {
            let mut frontier = vec![s];
            let mut d = 0;
            let mut seen = vec![false; alice.num_states()];
            seen[s] = true;
            loop {
                if frontier.contains(&master) {
                    return d;
                }
                let mut next = Vec::new();
                for &u in &frontier {
                    for a in 0..5 {
                        let v = alice.transition(u, a)[0].0;
                        let (_, k) = la.decode(v);
                        if !seen[v] && matches!(k, KeyState::None | KeyState::Master) {
                            seen[v] = true;
                            next.push(v);
                        }
                    }
                }
                frontier = next;
                d += 1;
            }
        };
        let to_key = with_master(centre);
        assert_eq!(to_key, 3);
        for g in 0..2 {
            let total = to_key + shortest_path_to_goal(&alice, master, g).unwrap();
            assert_eq!(total, 10);
            assert!(total > 4);
        }
    }

    #[test]
    fn episode_stops_at_terminal_or_horizon() {
        let mdp = build_nav_world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let up = FnPolicy::new(5, |_, _, out: &mut [f64]| {
            out.fill(0.0);
            out[Move::Up.index()] = 1.0;
        });
        let t = rollout(&mdp, &up, 0, nav_state(0, 1), &mut rng);
        assert_eq!(t.len(), 1);
        assert_eq!(t.steps[0].reward, 1.0);
        assert!(!t.truncated);

        let stay = FnPolicy::new(5, |_, _, out: &mut [f64]| {
            out.fill(0.0);
            out[Move::Stay.index()] = 1.0;
        });
        let t = sample_episode(&mdp, &stay, &mut rng);
        assert_eq!(t.len(), 100);
        assert!(t.truncated);
        assert_eq!(t.total_reward(), 0.0);
    }

    #[test]
    fn fixed_seed_reproducible() {
        let mdp = build_key_world(Role::Alice);
        let uniform = FnPolicy::new(5, |_, _, out: &mut [f64]| out.fill(0.2));
        let a = sample_episode(&mdp, &uniform, &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_episode(&mdp, &uniform, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }

    #[test]
    fn invalid_tables_rejected() {
        let base = MdpTables {
            num_states: 2,
            num_actions: 1,
            num_goals: 1,
            transitions: vec![vec![(1, 1.0)], vec![(1, 1.0)]],
            goal_dist: vec![1.0],
            init_dist: vec![1.0, 0.0],
            entry_reward: vec![0.0, 1.0],
            action_penalty: vec![0.0, 0.0],
            terminal: vec![false, true],
            gamma: 0.9,
            horizon: 3,
        };
        assert!(GoalMdp::new(base.clone()).is_ok());
        let mut t = base.clone();
        t.goal_dist = vec![0.5];
        assert!(matches!(GoalMdp::new(t), Err(EnvError::NotNormalized { .. })));
        let mut t = base.clone();
        t.init_dist = vec![0.5, 0.5];
        assert!(matches!(GoalMdp::new(t), Err(EnvError::TerminalStart { .. })));
        let mut t = base.clone();
        t.transitions[0] = vec![(1, 0.7)];
        assert!(matches!(GoalMdp::new(t), Err(EnvError::BadTransition { .. })));
        let mut t = base.clone();
        t.gamma = 1.5;
        assert_eq!(GoalMdp::new(t), Err(EnvError::BadGamma(1.5)));
        let mut t = base;
        t.horizon = 0;
        assert_eq!(GoalMdp::new(t), Err(EnvError::ZeroHorizon));
    }
}

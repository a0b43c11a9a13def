//! Bob: a goal-blind observer. A GRU with a scalar core integrates Alice's
//! one-hot (state, action) stream; its output joins a one-hot of Bob's own
//! state in a 128-unit ReLU layer with softmax policy and scalar value heads.
//! Trained with REINFORCE plus a value baseline, backprop through time.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{entropy_grad_into, softmax_into, Adam, Direction, GoalPolicyTable};
use crate::env::{key_pickup, sample_index, shortest_path_to_goal, GoalMdp, GoalPolicy, Step, Trajectory};
use crate::info::discounted_return;
use crate::trainer::{key_label, AnnealSchedule, MetricsSink, TrainError, UpdateMode, RECORD_VERSION};

pub const DEFAULT_HIDDEN: usize = 128;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate offsets inside a flat GRU parameter block of `3 * (input_dim + 2)`
/// values: for each of update, reset and candidate, the input weights, then
/// the recurrent weight, then the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruLayout {
    pub input_dim: usize,
}

impl GruLayout {
    pub fn len(&self) -> usize {
        3 * (self.input_dim + 2)
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    fn w(&self, gate: usize) -> usize {
        gate * (self.input_dim + 2)
    }
    fn u(&self, gate: usize) -> usize {
        self.w(gate) + self.input_dim
    }
    fn b(&self, gate: usize) -> usize {
        self.w(gate) + self.input_dim + 1
    }
}

const Z: usize = 0;
const R: usize = 1;
const H: usize = 2;

/// Forward quantities kept for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruCache {
    pub h_prev: f64,
    pub z: f64,
    pub r: f64,
    pub cand: f64,
    pub h: f64,
}

/// A scalar-core GRU cell over a one-hot-sum input, given as the list of
/// active input indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub layout: GruLayout,
    pub params: Vec<f64>,
}

impl GruCell {
    pub fn zeros(input_dim: usize) -> Self {
        let layout = GruLayout { input_dim };
        GruCell {
            params: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn step(&self, active: &[usize], h: f64) -> f64 {
        gru_forward(&self.params, self.layout, active, h).h
    }
}

pub fn gru_forward(params: &[f64], layout: GruLayout, active: &[usize], h: f64) -> GruCache {
    let pre = |gate: usize, rec: f64| {
        let w = layout.w(gate);
        let mut a = params[layout.b(gate)] + params[layout.u(gate)] * rec;
        for &i in active {
            a += params[w + i];
        }
        a
    };
    let z = sigmoid(pre(Z, h));
    let r = sigmoid(pre(R, h));
    let cand = pre(H, r * h).tanh();
    GruCache {
        h_prev: h,
        z,
        r,
        cand,
        h: (1.0 - z) * h + z * cand,
    }
}

/// Accumulates parameter gradients into `grad` given `dh = dL/dh'`, and
/// returns `dL/dh_prev`.
pub fn gru_backward(
    params: &[f64],
    layout: GruLayout,
    active: &[usize],
    c: &GruCache,
    dh: f64,
    grad: &mut [f64],
) -> f64 {
    let h = c.h_prev;
    let dz = dh * (c.cand - h);
    let dcand = dh * c.z;
    let mut dh_prev = dh * (1.0 - c.z);

    let da_h = dcand * (1.0 - c.cand * c.cand);
    let mut add_gate = |gate: usize, da: f64, rec: f64| {
        let w = layout.w(gate);
        for &i in active {
            grad[w + i] += da;
        }
        grad[layout.u(gate)] += da * rec;
        grad[layout.b(gate)] += da;
    };
    add_gate(H, da_h, c.r * h);
    let drh = da_h * params[layout.u(H)];
    let dr = drh * h;
    dh_prev += drh * c.r;

    let da_z = dz * c.z * (1.0 - c.z);
    add_gate(Z, da_z, h);
    dh_prev += da_z * params[layout.u(Z)];

    let da_r = dr * c.r * (1.0 - c.r);
    add_gate(R, da_r, h);
    dh_prev += da_r * params[layout.u(R)];
    dh_prev
}

/// Dimensions of an observer network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObserverShape {
    pub alice_states: usize,
    pub alice_actions: usize,
    pub bob_states: usize,
    pub bob_actions: usize,
    pub hidden: usize,
}

impl ObserverShape {
    pub fn for_games(alice: &GoalMdp, bob: &GoalMdp) -> Self {
        ObserverShape {
            alice_states: alice.num_states(),
            alice_actions: alice.num_actions(),
            bob_states: bob.num_states(),
            bob_actions: bob.num_actions(),
            hidden: DEFAULT_HIDDEN,
        }
    }

    pub fn gru_layout(&self) -> GruLayout {
        GruLayout {
            input_dim: self.alice_states + self.alice_actions,
        }
    }

    fn trunk_inputs(&self) -> usize {
        self.bob_states + 1
    }

    fn offsets(&self) -> Offsets {
        let gru = self.gru_layout().len();
        let w1 = gru;
        let b1 = w1 + self.trunk_inputs() * self.hidden;
        let wp = b1 + self.hidden;
        let bp = wp + self.bob_actions * self.hidden;
        let wv = bp + self.bob_actions;
        let bv = wv + self.hidden;
        Offsets {
            w1,
            b1,
            wp,
            bp,
            wv,
            bv,
            total: bv + 1,
        }
    }

    pub fn num_params(&self) -> usize {
        self.offsets().total
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    wp: usize,
    bp: usize,
    wv: usize,
    bv: usize,
    total: usize,
}

/// Trunk and head activations at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickCache {
    pub s_bob: usize,
    pub z: f64,
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
}

/// Flat-parameter observer network. Trunk weights are stored input-major
/// (`[input][unit]`), head weights output-major (`[output][unit]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverNet {
    pub shape: ObserverShape,
    pub params: Vec<f64>,
}

impl ObserverNet {
    pub fn zeros(shape: ObserverShape) -> Self {
        ObserverNet {
            params: vec![0.0; shape.num_params()],
            shape,
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(shape: ObserverShape, rng: &mut R) -> Self {
        let mut net = ObserverNet::zeros(shape);
        let o = shape.offsets();
        let gl = shape.gru_layout();
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, p: &mut [f64]| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for x in &mut p[range] {
                *x = rng.gen_range(-a..=a);
            }
        };
        for gate in 0..3 {
            fill(gl.w(gate)..gl.b(gate), gl.input_dim + 1, &mut net.params);
        }
        fill(o.w1..o.b1, shape.trunk_inputs(), &mut net.params);
        fill(o.wp..o.bp, shape.hidden, &mut net.params);
        fill(o.wv..o.bv, shape.hidden, &mut net.params);
        net
    }

    pub fn gru_params(&self) -> &[f64] {
        &self.params[..self.shape.gru_layout().len()]
    }

    pub fn gru_step(&self, s_alice: usize, a_alice: usize, h: f64) -> GruCache {
        let active = [s_alice, self.shape.alice_states + a_alice];
        gru_forward(self.gru_params(), self.shape.gru_layout(), &active, h)
    }

    /// Policy and value for Bob in `s_bob` given GRU output `z`.
    pub fn forward(&self, z: f64, s_bob: usize) -> TickCache {
        let sh = self.shape;
        let o = sh.offsets();
        let p = &self.params;
        let hn = sh.hidden;
        let col = &p[o.w1 + s_bob * hn..o.w1 + (s_bob + 1) * hn];
        let zcol = &p[o.w1 + sh.bob_states * hn..o.w1 + (sh.bob_states + 1) * hn];
        let b1 = &p[o.b1..o.b1 + hn];
        let hidden: Vec<f64> = (0..hn)
            .map(|k| (col[k] + zcol[k] * z + b1[k]).max(0.0))
            .collect();
        let mut logits = vec![0.0; sh.bob_actions];
        for (a, l) in logits.iter_mut().enumerate() {
            let w = &p[o.wp + a * hn..o.wp + (a + 1) * hn];
            *l = p[o.bp + a] + dot(w, &hidden);
        }
        let mut probs = vec![0.0; sh.bob_actions];
        softmax_into(&logits, &mut probs);
        let value = p[o.bv] + dot(&p[o.wv..o.wv + hn], &hidden);
        TickCache {
            s_bob,
            z,
            hidden,
            probs,
            value,
        }
    }

    /// Accumulates gradients of `dlogits . logits + dvalue * value` through
    /// the trunk and heads; returns the gradient with respect to `z`.
    pub fn backward_tick(&self, c: &TickCache, dlogits: &[f64], dvalue: f64, grad: &mut [f64]) -> f64 {
        let sh = self.shape;
        let o = sh.offsets();
        let p = &self.params;
        let hn = sh.hidden;
        let mut dhidden = vec![0.0; hn];
        for (a, &dl) in dlogits.iter().enumerate() {
            grad[o.bp + a] += dl;
            if dl == 0.0 {
                continue;
            }
            let w = o.wp + a * hn;
            for k in 0..hn {
                grad[w + k] += dl * c.hidden[k];
                dhidden[k] += dl * p[w + k];
            }
        }
        grad[o.bv] += dvalue;
        for k in 0..hn {
            grad[o.wv + k] += dvalue * c.hidden[k];
            dhidden[k] += dvalue * p[o.wv + k];
        }
        let col = o.w1 + c.s_bob * hn;
        let zcol = o.w1 + sh.bob_states * hn;
        let mut dz = 0.0;
        for k in 0..hn {
            if c.hidden[k] <= 0.0 {
                continue;
            }
            let d = dhidden[k];
            grad[col + k] += d;
            grad[zcol + k] += d * c.z;
            grad[o.b1 + k] += d;
            dz += d * p[zcol + k];
        }
        dz
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Everything the backward pass needs from one episode of Bob's acting.
/// Tick `t` used `h_t`; `gru[t]` maps `h_t` to `h_{t+1}` on observation
/// `obs[t]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObserverTape {
    pub ticks: Vec<TickCache>,
    pub actions: Vec<usize>,
    pub gru: Vec<GruCache>,
    pub obs: Vec<(usize, usize)>,
}

/// Per-tick loss weights for [`episode_gradient`]. The loss is
/// `sum_t -(adv_t log pi(a_t) + bonus_t H_t) + value_weight (v_t - target_t)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickTerms {
    pub advantage: f64,
    pub bonus: f64,
    pub target: f64,
    pub value_weight: f64,
}

/// Gradient of the episode loss with respect to every network parameter,
/// through the GRU chain. Returned as a descent direction.
pub fn episode_gradient(net: &ObserverNet, tape: &ObserverTape, terms: &[TickTerms], grad: &mut [f64]) {
    let n = tape.ticks.len();
    assert_eq!(terms.len(), n, "one loss term per tick");
    let na = net.shape.bob_actions;
    let mut dlogits = vec![0.0; na];
    let mut hgrad = vec![0.0; na];
    let layout = net.shape.gru_layout();
    let mut dh_next = 0.0;
    for t in (0..n).rev() {
        let c = &tape.ticks[t];
        let tm = terms[t];
        entropy_grad_into(&c.probs, &mut hgrad);
        for a in 0..na {
            let onehot = if a == tape.actions[t] { 1.0 } else { 0.0 };
            dlogits[a] = -tm.advantage * (onehot - c.probs[a]) - tm.bonus * hgrad[a];
        }
        let dv = 2.0 * tm.value_weight * (c.value - tm.target);
        let dh = dh_next + net.backward_tick(c, &dlogits, dv, grad);
        dh_next = if t > 0 {
            let (s, a) = tape.obs[t - 1];
            let active = [s, net.shape.alice_states + a];
            gru_backward(net.gru_params(), layout, &active, &tape.gru[t - 1], dh, grad)
        } else {
            0.0
        };
    }
}

/// Gradient of the single tick-`t` loss term, back through the GRU chain to
/// the start of the episode.
pub fn tick_gradient(net: &ObserverNet, tape: &ObserverTape, t: usize, term: TickTerms, grad: &mut [f64]) {
    let na = net.shape.bob_actions;
    let c = &tape.ticks[t];
    let mut hgrad = vec![0.0; na];
    entropy_grad_into(&c.probs, &mut hgrad);
    let dlogits: Vec<f64> = (0..na)
        .map(|a| {
            let onehot = if a == tape.actions[t] { 1.0 } else { 0.0 };
            -term.advantage * (onehot - c.probs[a]) - term.bonus * hgrad[a]
        })
        .collect();
    let dv = 2.0 * term.value_weight * (c.value - term.target);
    let mut dh = net.backward_tick(c, &dlogits, dv, grad);
    let layout = net.shape.gru_layout();
    for k in (0..t).rev() {
        if dh == 0.0 {
            break;
        }
        let (s, a) = tape.obs[k];
        let active = [s, net.shape.alice_states + a];
        dh = gru_backward(net.gru_params(), layout, &active, &tape.gru[k], dh, grad);
    }
}

/// The loss [`episode_gradient`] differentiates, recomputed from scratch
/// along the taped observations and actions. Used by finite-difference
/// checks.
pub fn episode_loss(net: &ObserverNet, tape: &ObserverTape, terms: &[TickTerms]) -> f64 {
    let mut h = 0.0;
    let mut loss = 0.0;
    for (t, tm) in terms.iter().enumerate() {
        let c = net.forward(h, tape.ticks[t].s_bob);
        let lp = c.probs[tape.actions[t]].ln();
        let ent = crate::agent::entropy(&c.probs);
        loss += -(tm.advantage * lp + tm.bonus * ent) + tm.value_weight * (c.value - tm.target).powi(2);
        if t + 1 < terms.len() {
            let (s, a) = tape.obs[t];
            h = net.gru_step(s, a, h).h;
        }
    }
    loss
}

/// Anything that can play Bob in a joint episode.
pub trait BobActor {
    /// `goal` is given for diagnostic actors; a goal-blind Bob ignores it.
    fn begin_episode(&mut self, goal: usize);
    fn act(&mut self, s_bob: usize, rng: &mut dyn RngCore) -> usize;
    /// Alice's state and action from the tick just played.
    fn observe(&mut self, s_alice: usize, a_alice: usize);
}

/// A network Bob that records the tape needed for training.
pub struct NetBob<'a> {
    net: &'a ObserverNet,
    h: f64,
    pub tape: ObserverTape,
    record: bool,
}

impl<'a> NetBob<'a> {
    pub fn new(net: &'a ObserverNet, record: bool) -> Self {
        NetBob {
            net,
            h: 0.0,
            tape: ObserverTape::default(),
            record,
        }
    }

    /// Current GRU output.
    pub fn belief(&self) -> f64 {
        self.h
    }
}

impl BobActor for NetBob<'_> {
    fn begin_episode(&mut self, _goal: usize) {
        self.h = 0.0;
        self.tape = ObserverTape::default();
    }

    fn act(&mut self, s_bob: usize, rng: &mut dyn RngCore) -> usize {
        let c = self.net.forward(self.h, s_bob);
        let a = sample_index(&c.probs, rng);
        if self.record {
            self.tape.ticks.push(c);
            self.tape.actions.push(a);
        }
        a
    }

    fn observe(&mut self, s_alice: usize, a_alice: usize) {
        let c = self.net.gru_step(s_alice, a_alice, self.h);
        self.h = c.h;
        if self.record {
            self.tape.gru.push(c);
            self.tape.obs.push((s_alice, a_alice));
        }
    }
}

/// Diagnostic Bob that is told the goal and walks a shortest path to it.
pub struct GoalAwareBob<'a> {
    mdp: &'a GoalMdp,
    goal: usize,
}

impl<'a> GoalAwareBob<'a> {
    pub fn new(mdp: &'a GoalMdp) -> Self {
        GoalAwareBob { mdp, goal: 0 }
    }
}

impl BobActor for GoalAwareBob<'_> {
    fn begin_episode(&mut self, goal: usize) {
        self.goal = goal;
    }

    fn act(&mut self, s_bob: usize, _rng: &mut dyn RngCore) -> usize {
        let mut best = (usize::MAX, 0);
        for a in 0..self.mdp.num_actions() {
            // Deterministic games only: take the most likely successor.
            let next = self.mdp.transition(s_bob, a)
                .iter()
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .map(|x| x.0)
                .unwrap_or(s_bob);
            let d = if self.mdp.is_terminal(next) {
                if self.mdp.entry_reward(next, self.goal) > 0.0 { 0 } else { usize::MAX }
            } else {
                shortest_path_to_goal(self.mdp, next, self.goal).unwrap_or(usize::MAX)
            };
            if d < best.0 {
                best = (d, a);
            }
        }
        best.1
    }

    fn observe(&mut self, _: usize, _: usize) {}
}

/// One joint episode in the turn order: each tick Bob acts on what he has
/// seen so far, then Alice acts, then Bob observes Alice's tick.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEpisode {
    pub goal: usize,
    pub alice: Trajectory,
    pub bob: Trajectory,
    /// Alice's (state, action) fed to Bob after each of his actions, frozen at
    /// her last pair once she is done.
    pub observations: Vec<(usize, usize)>,
    /// Episode length at which each agent entered the correct goal.
    pub alice_arrival: Option<usize>,
    pub bob_arrival: Option<usize>,
}

impl JointEpisode {
    /// Alice reached the goal strictly before Bob (or Bob never did).
    pub fn alice_beats_bob(&self) -> bool {
        match (self.alice_arrival, self.bob_arrival) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        }
    }

    /// Bob reached the goal no later than Alice.
    pub fn bob_beat_or_tie(&self) -> bool {
        match (self.alice_arrival, self.bob_arrival) {
            (Some(a), Some(b)) => b <= a,
            (None, Some(_)) => true,
            _ => false,
        }
    }
}

fn arrival(mdp: &GoalMdp, traj: &Trajectory) -> Option<usize> {
    let last = traj.steps.last()?;
    (mdp.is_terminal(last.next_state) && mdp.entry_reward(last.next_state, traj.goal) > 0.0)
        .then_some(traj.len())
}

/// Plays one joint episode. Goal, Alice's spawn and Bob's spawn are drawn in
/// that order, then ticks alternate as described on [`JointEpisode`].
pub fn joint_episode<P, B>(
    alice_mdp: &GoalMdp,
    alice: &P,
    bob_mdp: &GoalMdp,
    bob: &mut B,
    rng: &mut ChaCha8Rng,
) -> JointEpisode
where
    P: GoalPolicy + ?Sized,
    B: BobActor + ?Sized,
{
    let goal = sample_index(alice_mdp.goal_dist(), rng);
    let mut sa = sample_index(alice_mdp.init_dist(), rng);
    let mut sb = sample_index(bob_mdp.init_dist(), rng);
    bob.begin_episode(goal);
    let horizon = alice_mdp.horizon().max(bob_mdp.horizon());
    let mut alice_traj = Trajectory {
        goal,
        steps: Vec::new(),
        truncated: false,
    };
    let mut bob_traj = alice_traj.clone();
    let mut observations = Vec::new();
    let (mut alice_done, mut bob_done) = (false, false);
    let mut probs = vec![0.0; alice_mdp.num_actions()];
    let mut last_obs = (sa, 0);
    for t in 0..horizon {
        if !bob_done {
            if t < bob_mdp.horizon() {
                let a = bob.act(sb, rng);
                let out = bob_mdp.step(sb, a, goal, rng);
                bob_traj.steps.push(Step {
                    state: sb,
                    action: a,
                    reward: out.reward,
                    next_state: out.next_state,
                });
                sb = out.next_state;
                bob_done = out.terminal;
            } else {
                bob_done = true;
                bob_traj.truncated = true;
            }
        }
        if !alice_done {
            if t < alice_mdp.horizon() {
                alice.action_probs_into(goal, sa, &mut probs);
                let a = sample_index(&probs, rng);
                let out = alice_mdp.step(sa, a, goal, rng);
                alice_traj.steps.push(Step {
                    state: sa,
                    action: a,
                    reward: out.reward,
                    next_state: out.next_state,
                });
                last_obs = (sa, a);
                sa = out.next_state;
                alice_done = out.terminal;
            } else {
                alice_done = true;
                alice_traj.truncated = true;
            }
        }
        if !bob_done {
            bob.observe(last_obs.0, last_obs.1);
            observations.push(last_obs);
        }
        if alice_done && bob_done {
            break;
        }
    }
    if !alice_done {
        alice_traj.truncated = true;
    }
    if !bob_done {
        bob_traj.truncated = true;
    }
    JointEpisode {
        alice_arrival: arrival(alice_mdp, &alice_traj),
        bob_arrival: arrival(bob_mdp, &bob_traj),
        goal,
        alice: alice_traj,
        bob: bob_traj,
        observations,
    }
}

/// One line of the joint metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRecord {
    pub v: u32,
    pub episode: u64,
    /// Bob's environment steps consumed including this episode.
    pub steps: u64,
    pub goal: usize,
    pub alice_len: usize,
    pub bob_len: usize,
    pub alice_arrival: Option<usize>,
    pub bob_arrival: Option<usize>,
    pub alice_beats_bob: bool,
    pub bob_beat_or_tie: bool,
    pub bob_return: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alice_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_bonus: Option<f64>,
}

impl JointRecord {
    pub fn from_episode(ep: &JointEpisode, alice_mdp: &GoalMdp, gamma: f64, episode: u64, steps: u64) -> Self {
        JointRecord {
            v: RECORD_VERSION,
            episode,
            steps,
            goal: ep.goal,
            alice_len: ep.alice.len(),
            bob_len: ep.bob.len(),
            alice_arrival: ep.alice_arrival,
            bob_arrival: ep.bob_arrival,
            alice_beats_bob: ep.alice_beats_bob(),
            bob_beat_or_tie: ep.bob_beat_or_tie(),
            bob_return: discounted_return(&ep.bob.rewards(), gamma).first().copied().unwrap_or(0.0),
            alice_key: key_pickup(alice_mdp, &ep.alice).map(|k| key_label(k).to_string()),
            entropy_bonus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BobConfig {
    pub total_steps: u64,
    pub learning_rate: f64,
    pub entropy_start: f64,
    pub entropy_end: f64,
    pub value_weight: f64,
    pub gamma: f64,
    pub max_episode_len: usize,
    pub hidden: usize,
    pub seed: u64,
    pub update_mode: UpdateMode,
}

impl Default for BobConfig {
    fn default() -> Self {
        BobConfig {
            total_steps: 200_000,
            learning_rate: 5e-5,
            entropy_start: 0.5,
            entropy_end: 0.01,
            value_weight: 0.5,
            gamma: 0.8,
            max_episode_len: 100,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
            update_mode: UpdateMode::PerStep,
        }
    }
}

impl BobConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.total_steps == 0 {
            return bad("bob total_steps must be positive");
        }
        if !(self.entropy_end > 0.0 && self.entropy_start >= self.entropy_end) {
            return bad("bob entropy schedule needs start >= end > 0");
        }
        if !(self.learning_rate > 0.0) {
            return bad("bob learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("bob gamma outside [0, 1]");
        }
        if self.max_episode_len == 0 || self.hidden == 0 {
            return bad("bob max_episode_len and hidden must be positive");
        }
        Ok(())
    }

    pub fn entropy_schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            start: self.entropy_start,
            end: self.entropy_end,
            horizon: self.total_steps,
        }
    }
}

/// Complete, resumable state of a Bob training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BobState {
    pub net: ObserverNet,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub steps: u64,
    pub episodes: u64,
}

/// Trains Bob against a frozen Alice: one Adam step per joint episode on the
/// full-episode BPTT gradient.
pub struct BobTrainer<'a> {
    alice_mdp: GoalMdp,
    bob_mdp: GoalMdp,
    alice: &'a GoalPolicyTable,
    config: BobConfig,
    state: BobState,
    grad: Vec<f64>,
}

impl<'a> BobTrainer<'a> {
    pub fn new(
        alice: &'a GoalPolicyTable,
        alice_mdp: &GoalMdp,
        bob_mdp: &GoalMdp,
        config: BobConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut shape = ObserverShape::for_games(alice_mdp, bob_mdp);
        shape.hidden = config.hidden;
        let net = ObserverNet::init(shape, &mut rng);
        let state = BobState {
            adam: Adam::new(config.learning_rate, net.params.len()),
            net,
            rng,
            steps: 0,
            episodes: 0,
        };
        Self::resume(alice, alice_mdp, bob_mdp, config, state)
    }

    pub fn resume(
        alice: &'a GoalPolicyTable,
        alice_mdp: &GoalMdp,
        bob_mdp: &GoalMdp,
        config: BobConfig,
        state: BobState,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if alice_mdp.num_goals() != bob_mdp.num_goals() {
            return Err(TrainError::Config("Alice and Bob games disagree on the goal count".into()));
        }
        let mut shape = ObserverShape::for_games(alice_mdp, bob_mdp);
        shape.hidden = config.hidden;
        if state.net.shape != shape {
            return Err(TrainError::Config("saved observer does not match the games".into()));
        }
        let (ng, ns, na) = (alice_mdp.num_goals(), alice_mdp.num_states(), alice_mdp.num_actions());
        if alice.num_goals() != ng || alice.num_states() != ns || alice.num_actions() != na {
            return Err(TrainError::Config("Alice policy does not match her game".into()));
        }
        Ok(BobTrainer {
            alice_mdp: alice_mdp.clone().with_horizon(config.max_episode_len)?,
            bob_mdp: bob_mdp
                .clone()
                .with_gamma(config.gamma)?
                .with_horizon(config.max_episode_len)?,
            alice,
            grad: vec![0.0; state.net.params.len()],
            config,
            state,
        })
    }

    pub fn state(&self) -> &BobState {
        &self.state
    }
    pub fn into_state(self) -> BobState {
        self.state
    }
    pub fn net(&self) -> &ObserverNet {
        &self.state.net
    }
    pub fn config(&self) -> &BobConfig {
        &self.config
    }

    pub fn run(&mut self, sink: &mut dyn MetricsSink<JointRecord>) -> Result<(), TrainError> {
        self.run_until(self.config.total_steps, sink)
    }

    pub fn run_until(&mut self, steps: u64, sink: &mut dyn MetricsSink<JointRecord>) -> Result<(), TrainError> {
        let target = steps.min(self.config.total_steps);
        while self.state.steps < target {
            let rec = self.train_episode()?;
            sink.record(&rec)?;
        }
        Ok(())
    }

    fn apply_grad(&mut self) -> Result<(), TrainError> {
        if !self.grad.iter().all(|g| g.is_finite()) {
            return Err(TrainError::NonFinite {
                what: "observer gradient",
                episode: self.state.episodes + 1,
            });
        }
        self.state
            .adam
            .apply(&mut self.state.net.params, &self.grad, Direction::Descend);
        Ok(())
    }

    pub fn train_episode(&mut self) -> Result<JointRecord, TrainError> {
        let start = self.state.steps;
        let mut bob = NetBob::new(&self.state.net, true);
        let ep = joint_episode(&self.alice_mdp, self.alice, &self.bob_mdp, &mut bob, &mut self.state.rng);
        let tape = bob.tape;
        let schedule = self.config.entropy_schedule();
        let returns = discounted_return(&ep.bob.rewards(), self.config.gamma);
        let terms: Vec<TickTerms> = tape
            .ticks
            .iter()
            .enumerate()
            .map(|(t, c)| TickTerms {
                advantage: returns[t] - c.value,
                bonus: schedule.value(start + t as u64),
                target: returns[t],
                value_weight: self.config.value_weight,
            })
            .collect();
        match self.config.update_mode {
            UpdateMode::PerStep => {
                // The tape holds the rollout-time forward pass; each tick's
                // term is applied in time order against it.
                let frozen = self.state.net.clone();
                for (t, &term) in terms.iter().enumerate() {
                    self.grad.fill(0.0);
                    tick_gradient(&frozen, &tape, t, term, &mut self.grad);
                    self.apply_grad()?;
                }
            }
            UpdateMode::PerEpisode => {
                self.grad.fill(0.0);
                episode_gradient(&self.state.net, &tape, &terms, &mut self.grad);
                self.apply_grad()?;
            }
        }
        self.state.steps += ep.bob.len() as u64;
        self.state.episodes += 1;
        if !self.state.net.is_finite() {
            return Err(TrainError::NonFinite {
                what: "observer weights",
                episode: self.state.episodes,
            });
        }
        let mut rec = JointRecord::from_episode(&ep, &self.alice_mdp, self.config.gamma, self.state.episodes, self.state.steps);
        rec.entropy_bonus = Some(schedule.value(start));
        Ok(rec)
    }
}

/// Trains one Bob to the configured budget.
pub fn train_bob(
    alice: &GoalPolicyTable,
    alice_mdp: &GoalMdp,
    bob_mdp: &GoalMdp,
    config: &BobConfig,
    sink: &mut dyn MetricsSink<JointRecord>,
) -> Result<BobState, TrainError> {
    let mut trainer = BobTrainer::new(alice, alice_mdp, bob_mdp, config.clone())?;
    trainer.run(sink)?;
    Ok(trainer.into_state())
}

/// Aggregate joint metrics over a set of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    pub episodes: usize,
    pub relative_length: f64,
    pub alice_beats_bob: f64,
    pub bob_beat_or_tie: f64,
    pub master_key: f64,
    pub goal_key: f64,
    pub mean_bob_return: f64,
}

impl JointSummary {
    pub fn from_records(recs: &[JointRecord]) -> Self {
        let n = recs.len().max(1) as f64;
        let frac = |f: &dyn Fn(&JointRecord) -> bool| recs.iter().filter(|r| f(r)).count() as f64 / n;
        let alice: f64 = recs.iter().map(|r| r.alice_len as f64).sum();
        let bob: f64 = recs.iter().map(|r| r.bob_len as f64).sum();
        JointSummary {
            episodes: recs.len(),
            relative_length: if alice > 0.0 { bob / alice } else { f64::NAN },
            alice_beats_bob: frac(&|r| r.alice_beats_bob),
            bob_beat_or_tie: frac(&|r| r.bob_beat_or_tie),
            master_key: frac(&|r| r.alice_key.as_deref() == Some("master")),
            goal_key: frac(&|r| r.alice_key.as_deref() == Some("goal")),
            mean_bob_return: recs.iter().map(|r| r.bob_return).sum::<f64>() / n,
        }
    }
}

/// Plays `n` joint episodes with both agents frozen.
pub fn joint_evaluate<B: BobActor + ?Sized>(
    alice: &GoalPolicyTable,
    alice_mdp: &GoalMdp,
    bob: &mut B,
    bob_mdp: &GoalMdp,
    n: usize,
    seed: u64,
) -> (Vec<JointRecord>, JointSummary) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = 0;
    let recs: Vec<JointRecord> = (0..n)
        .map(|i| {
            let ep = joint_episode(alice_mdp, alice, bob_mdp, bob, &mut rng);
            steps += ep.bob.len() as u64;
            JointRecord::from_episode(&ep, alice_mdp, bob_mdp.gamma(), i as u64 + 1, steps)
        })
        .collect();
    let summary = JointSummary::from_records(&recs);
    (recs, summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gru_fixed_points() {
        let cell = GruCell::zeros(4);
        assert_eq!(cell.step(&[0, 2], 0.0), 0.0);
        let mut carry = GruCell::zeros(4);
        let b = carry.layout.b(Z);
        carry.params[b] = -1e3;
        for (i, p) in carry.params.iter_mut().enumerate() {
            if i != b {
                *p = 0.7;
            }
        }
        assert_eq!(carry.step(&[1, 3], 0.42), 0.42);
    }

    #[test]
    fn zero_net_is_uniform() {
        let shape = ObserverShape {
            alice_states: 5,
            alice_actions: 3,
            bob_states: 4,
            bob_actions: 5,
            hidden: 8,
        };
        let net = ObserverNet::zeros(shape);
        let c = net.forward(0.3, 2);
        assert!(c.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn arrival_rules() {
        let mk = |a, b| JointEpisode {
            goal: 0,
            alice: Trajectory {
                goal: 0,
                steps: vec![],
                truncated: false,
            },
            bob: Trajectory {
                goal: 0,
                steps: vec![],
                truncated: false,
            },
            observations: vec![],
            alice_arrival: a,
            bob_arrival: b,
        };
        assert!(mk(Some(3), Some(4)).alice_beats_bob());
        assert!(!mk(Some(3), Some(3)).alice_beats_bob());
        assert!(mk(Some(3), Some(3)).bob_beat_or_tie());
        assert!(mk(Some(3), None).alice_beats_bob());
        assert!(!mk(None, None).bob_beat_or_tie());
        assert!(mk(None, Some(9)).bob_beat_or_tie());
    }
}

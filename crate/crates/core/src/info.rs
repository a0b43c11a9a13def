//! Information regularizers: KL to the base policy, empirical state counts,
//! modified and counterfactual rewards, and the per-step Monte Carlo
//! gradient contributions for both regularized objectives.
//!
//! Everything here is in nats. Conversion to bits happens at reporting time.

use serde::{Deserialize, Serialize};

use crate::agent::{log_prob_grad_into, softmax_into, GoalPolicyTable, ValueTable};
use crate::env::{sample_episode, GoalMdp, Step, Trajectory};

pub const LN_2: f64 = std::f64::consts::LN_2;

pub fn nats_to_bits(x: f64) -> f64 {
    x / LN_2
}

/// `KL[pi_g(.|s) | pi_0(.|s)]` and its gradient with respect to the logits
/// of every goal at state `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlToBase {
    pub kl: f64,
    /// Gradient rows laid out `[goal][action]`.
    pub grad: Vec<f64>,
}

fn goal_probs_at(policy: &GoalPolicyTable, s: usize, na: usize) -> Vec<f64> {
    let ng = policy.num_goals();
    let mut probs = vec![0.0; ng * na];
    for h in 0..ng {
        softmax_into(policy.row(h, s), &mut probs[h * na..(h + 1) * na]);
    }
    probs
}

fn mixture(probs: &[f64], goal_dist: &[f64], na: usize) -> Vec<f64> {
    let mut base = vec![0.0; na];
    for (h, &w) in goal_dist.iter().enumerate() {
        for a in 0..na {
            base[a] += w * probs[h * na + a];
        }
    }
    base
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pa, _)| pa > 0.0)
        .map(|(&pa, &qa)| pa * (pa / qa).ln())
        .sum::<f64>()
        .max(0.0)
}

/// KL between goal policy and base policy at `s`, value only.
pub fn kl_value(policy: &GoalPolicyTable, goal_dist: &[f64], g: usize, s: usize) -> f64 {
    let na = policy.row(0, s).len();
    let probs = goal_probs_at(policy, s, na);
    let base = mixture(&probs, goal_dist, na);
    kl(&probs[g * na..(g + 1) * na], &base)
}

/// KL between goal policy and base policy at `s`, with gradient through
/// both the goal policy and the mixture (which depends on every goal's
/// logits):
///
/// `dKL/dz_{h,j} = [h = g] p_g(j)(l_j - KL) - rho(h) p_h(j)(q_j - sum_a p_h(a) q_a)`
///
/// with `l = log(p_g / p_0)` and `q = p_g / p_0`.
pub fn kl_to_base(policy: &GoalPolicyTable, goal_dist: &[f64], g: usize, s: usize) -> KlToBase {
    let ng = policy.num_goals();
    let na = policy.row(0, s).len();
    let probs = goal_probs_at(policy, s, na);
    let base = mixture(&probs, goal_dist, na);
    let pg = &probs[g * na..(g + 1) * na];
    let value = kl(pg, &base);

    let mut grad = vec![0.0; ng * na];
    let ratio: Vec<f64> = pg.iter().zip(&base).map(|(&p, &b)| if p > 0.0 { p / b } else { 0.0 }).collect();
    for j in 0..na {
        if pg[j] > 0.0 {
            grad[g * na + j] += pg[j] * ((pg[j] / base[j]).ln() - value);
        }
    }
    for h in 0..ng {
        let ph = &probs[h * na..(h + 1) * na];
        for j in 0..na {
            // q_j - E_h[q], written so it is exactly zero when q is constant.
            let centered: f64 = ph.iter().zip(&ratio).map(|(p, q)| p * (ratio[j] - q)).sum();
            grad[h * na + j] -= goal_dist[h] * ph[j] * centered;
        }
    }
    KlToBase { kl: value, grad }
}

/// Modified reward for action-information regularization.
pub fn modified_reward_action(reward: f64, kl: f64, beta: f64) -> f64 {
    reward + beta * kl
}

/// Options controlling which states count as visits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountOptions {
    /// Also count the absorbing terminal state an episode ends in.
    pub include_terminal: bool,
    /// Multiply every count by this factor before recording an episode.
    /// `None` disables decay.
    pub decay: Option<f64>,
}

impl Default for CountOptions {
    fn default() -> Self {
        CountOptions {
            include_terminal: false,
            decay: None,
        }
    }
}

/// Goal-conditioned visit counts `N_g(s)` with cached marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateCounts {
    num_goals: usize,
    num_states: usize,
    counts: Vec<f64>,
    goal_totals: Vec<f64>,
    state_totals: Vec<f64>,
    total: f64,
}

impl StateCounts {
    /// Every cell starts at `pseudocount`.
    pub fn new(num_goals: usize, num_states: usize, pseudocount: f64) -> Self {
        Self::from_table(num_goals, num_states, vec![pseudocount; num_goals * num_states])
    }

    /// Counts from an explicit `[goal][state]` table.
    pub fn from_table(num_goals: usize, num_states: usize, counts: Vec<f64>) -> Self {
        assert_eq!(counts.len(), num_goals * num_states);
        let mut c = StateCounts {
            num_goals,
            num_states,
            counts,
            goal_totals: vec![0.0; num_goals],
            state_totals: vec![0.0; num_states],
            total: 0.0,
        };
        c.recompute_marginals();
        c
    }

    fn recompute_marginals(&mut self) {
        self.goal_totals.fill(0.0);
        self.state_totals.fill(0.0);
        for g in 0..self.num_goals {
            for s in 0..self.num_states {
                let n = self.counts[g * self.num_states + s];
                self.goal_totals[g] += n;
                self.state_totals[s] += n;
            }
        }
        self.total = self.goal_totals.iter().sum();
    }

    pub fn num_goals(&self) -> usize {
        self.num_goals
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn get(&self, g: usize, s: usize) -> f64 {
        self.counts[g * self.num_states + s]
    }
    pub fn goal_total(&self, g: usize) -> f64 {
        self.goal_totals[g]
    }
    pub fn state_total(&self, s: usize) -> f64 {
        self.state_totals[s]
    }
    pub fn total(&self) -> f64 {
        self.total
    }
    pub fn table(&self) -> &[f64] {
        &self.counts
    }

    fn bump(&mut self, g: usize, s: usize) {
        self.counts[g * self.num_states + s] += 1.0;
        self.goal_totals[g] += 1.0;
        self.state_totals[s] += 1.0;
        self.total += 1.0;
    }

    /// Adds one visit per state an action was taken in (so `s_0` counts and
    /// the absorbing terminal state does not, unless requested).
    pub fn record_trajectory(&mut self, traj: &Trajectory, opts: CountOptions) {
        if let Some(d) = opts.decay {
            for c in &mut self.counts {
                *c *= d;
            }
            self.recompute_marginals();
        }
        let g = traj.goal;
        for step in &traj.steps {
            self.bump(g, step.state);
        }
        if opts.include_terminal && !traj.truncated {
            if let Some(last) = traj.final_state() {
                self.bump(g, last);
            }
        }
    }

    /// Largest disagreement between cached and recomputed marginals.
    pub fn marginal_error(&self) -> f64 {
        let mut fresh = self.clone();
        fresh.recompute_marginals();
        let mut err = (fresh.total - self.total).abs();
        for (a, b) in fresh.goal_totals.iter().zip(&self.goal_totals) {
            err = err.max((a - b).abs());
        }
        for (a, b) in fresh.state_totals.iter().zip(&self.state_totals) {
            err = err.max((a - b).abs());
        }
        err
    }

    /// Plug-in estimate of `I(S;G)` from the counts, in nats.
    pub fn plug_in_state_info(&self, goal_dist: &[f64]) -> f64 {
        let mut info = 0.0;
        for (g, &w) in goal_dist.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for s in 0..self.num_states {
                let r = emp_ratios(self, goal_dist, g, s);
                if r.p_s_given_g > 0.0 {
                    info += w * r.p_s_given_g * r.log_ratio;
                }
            }
        }
        info
    }
}

/// Empirical state statistics for one `(g, s)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalRatios {
    pub p_s_given_g: f64,
    pub p_s: f64,
    /// `log(p(s|g) / p(s))` in nats.
    pub log_ratio: f64,
    /// `rho(g) p(s|g) / p(s)`.
    pub posterior: f64,
}

impl EmpiricalRatios {
    /// `p(s|g) / p(s)`.
    pub fn ratio(&self) -> f64 {
        self.p_s_given_g / self.p_s
    }
}

pub fn emp_ratios(counts: &StateCounts, goal_dist: &[f64], g: usize, s: usize) -> EmpiricalRatios {
    let p_s_given_g = counts.get(g, s) / counts.goal_total(g);
    let p_s = counts.state_total(s) / counts.total();
    let ratio = p_s_given_g / p_s;
    EmpiricalRatios {
        p_s_given_g,
        p_s,
        log_ratio: ratio.ln(),
        posterior: goal_dist[g] * ratio,
    }
}

/// Modified reward for state-information regularization.
pub fn modified_reward_state(reward: f64, ratios: &EmpiricalRatios, beta: f64) -> f64 {
    reward + beta * (1.0 - ratios.posterior + ratios.log_ratio)
}

fn action_prob(policy: &GoalPolicyTable, g: usize, s: usize, a: usize, buf: &mut [f64]) -> f64 {
    softmax_into(policy.row(g, s), buf);
    buf[a]
}

/// Counterfactual goal reward at the last step of `prefix`: the importance
/// weight of the whole prefix under `g_other` relative to the episode goal,
/// times `p(s_t|g) / p(s_t)`.
pub fn counterfactual_reward(
    prefix: &[Step],
    policy: &GoalPolicyTable,
    counts: &StateCounts,
    goal_dist: &[f64],
    g: usize,
    g_other: usize,
) -> f64 {
    let last = prefix.last().expect("non-empty prefix");
    let mut buf = vec![0.0; policy.row(0, 0).len()];
    let mut w = 1.0;
    for st in prefix {
        let num = action_prob(policy, g_other, st.state, st.action, &mut buf);
        let den = action_prob(policy, g, st.state, st.action, &mut buf);
        w *= num / den;
    }
    w * emp_ratios(counts, goal_dist, g, last.state).ratio()
}

/// Counterfactual rewards for every step of `traj`, carrying the running
/// importance weight.
pub fn counterfactual_rewards(
    traj: &Trajectory,
    policy: &GoalPolicyTable,
    counts: &StateCounts,
    goal_dist: &[f64],
    g_other: usize,
) -> Vec<f64> {
    let g = traj.goal;
    let mut buf = vec![0.0; policy.row(0, 0).len()];
    let mut w = 1.0;
    traj.steps
        .iter()
        .map(|st| {
            let num = action_prob(policy, g_other, st.state, st.action, &mut buf);
            let den = action_prob(policy, g, st.state, st.action, &mut buf);
            w *= num / den;
            w * emp_ratios(counts, goal_dist, g, st.state).ratio()
        })
        .collect()
}

/// `R_t = sum_{t' >= t} gamma^{t'-t} r_{t'}` by backward recursion.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Per-episode credit assignment shared by the per-step gradient functions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeCredit {
    pub modified_rewards: Vec<f64>,
    /// Modified returns `R~_t`.
    pub returns: Vec<f64>,
    /// Per-step `KL[pi_g | pi_0]` at `s_t`, nats.
    pub kls: Vec<f64>,
    /// Per-step `log p(s_t|g)/p(s_t)`, nats (empty without counts).
    pub log_ratios: Vec<f64>,
    /// Counterfactual returns `R_cf(t, g, g')` laid out `[g'][t]`; the row
    /// of the episode goal is empty.
    pub cf_returns: Vec<Vec<f64>>,
}

/// Credit for the action-information objective.
pub fn action_credit(
    traj: &Trajectory,
    policy: &GoalPolicyTable,
    goal_dist: &[f64],
    beta: f64,
    gamma: f64,
) -> EpisodeCredit {
    let g = traj.goal;
    let kls: Vec<f64> = traj
        .steps
        .iter()
        .map(|st| kl_value(policy, goal_dist, g, st.state))
        .collect();
    let modified: Vec<f64> = traj
        .steps
        .iter()
        .zip(&kls)
        .map(|(st, &k)| modified_reward_action(st.reward, k, beta))
        .collect();
    EpisodeCredit {
        returns: discounted_return(&modified, gamma),
        modified_rewards: modified,
        kls,
        log_ratios: Vec::new(),
        cf_returns: Vec::new(),
    }
}

/// Credit for the state-information objective. `counts` should already
/// include this episode.
pub fn state_credit(
    traj: &Trajectory,
    policy: &GoalPolicyTable,
    counts: &StateCounts,
    goal_dist: &[f64],
    beta: f64,
    gamma: f64,
) -> EpisodeCredit {
    let g = traj.goal;
    let ratios: Vec<EmpiricalRatios> = traj
        .steps
        .iter()
        .map(|st| emp_ratios(counts, goal_dist, g, st.state))
        .collect();
    let modified: Vec<f64> = traj
        .steps
        .iter()
        .zip(&ratios)
        .map(|(st, r)| modified_reward_state(st.reward, r, beta))
        .collect();
    let cf_returns = (0..policy.num_goals())
        .map(|h| {
            if h == g {
                Vec::new()
            } else {
                discounted_return(&counterfactual_rewards(traj, policy, counts, goal_dist, h), gamma)
            }
        })
        .collect();
    EpisodeCredit {
        returns: discounted_return(&modified, gamma),
        modified_rewards: modified,
        kls: traj
            .steps
            .iter()
            .map(|st| kl_value(policy, goal_dist, g, st.state))
            .collect(),
        log_ratios: ratios.iter().map(|r| r.log_ratio).collect(),
        cf_returns,
    }
}

/// Gradient contribution confined to the logit rows of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrad {
    pub state: usize,
    /// Rows laid out `[goal][action]`.
    pub rows: Vec<f64>,
}

impl StateGrad {
    pub fn zeros(state: usize, num_goals: usize, num_actions: usize) -> Self {
        StateGrad {
            state,
            rows: vec![0.0; num_goals * num_actions],
        }
    }

    /// Adds these rows into a full `[g][s][a]` gradient table.
    pub fn scatter_add(&self, policy: &GoalPolicyTable, full: &mut [f64]) {
        let na = self.rows.len() / policy.num_goals();
        for g in 0..policy.num_goals() {
            let o = policy.row_offset(g, self.state);
            for a in 0..na {
                full[o + a] += self.rows[g * na + a];
            }
        }
    }
}

/// Advantage `R~_t - V_g(s_t)`.
pub fn advantage(credit: &EpisodeCredit, value: &ValueTable, traj: &Trajectory, t: usize) -> f64 {
    credit.returns[t] - value.get(traj.goal, traj.steps[t].state)
}

fn own_goal_term(
    t: usize,
    traj: &Trajectory,
    policy: &GoalPolicyTable,
    value: &ValueTable,
    credit: &EpisodeCredit,
    out: &mut StateGrad,
) {
    let g = traj.goal;
    let st = traj.steps[t];
    let na = out.rows.len() / policy.num_goals();
    let adv = advantage(credit, value, traj, t);
    let mut probs = vec![0.0; na];
    let mut glog = vec![0.0; na];
    softmax_into(policy.row(g, st.state), &mut probs);
    log_prob_grad_into(&probs, st.action, &mut glog);
    for a in 0..na {
        out.rows[g * na + a] += adv * glog[a];
    }
}

/// Per-step ascent direction for the action-information objective:
/// `A(t) grad log pi_g(a_t|s_t) + beta grad KL[pi_g(.|s_t) | pi_0(.|s_t)]`.
pub fn action_grad_step(
    t: usize,
    traj: &Trajectory,
    policy: &GoalPolicyTable,
    value: &ValueTable,
    goal_dist: &[f64],
    beta: f64,
    credit: &EpisodeCredit,
) -> StateGrad {
    let s = traj.steps[t].state;
    let na = policy.row(0, s).len();
    let mut out = StateGrad::zeros(s, policy.num_goals(), na);
    own_goal_term(t, traj, policy, value, credit, &mut out);
    let klg = kl_to_base(policy, goal_dist, traj.goal, s);
    for (o, d) in out.rows.iter_mut().zip(&klg.grad) {
        *o += beta * d;
    }
    out
}

/// Per-step ascent direction for the state-information objective:
/// `A(t) grad log pi_g(a_t|s_t) - beta sum_{g' != g} rho(g') R_cf(t,g,g') grad log pi_{g'}(a_t|s_t)`.
/// The counterfactual term has no baseline.
pub fn state_grad_step(
    t: usize,
    traj: &Trajectory,
    policy: &GoalPolicyTable,
    value: &ValueTable,
    goal_dist: &[f64],
    beta: f64,
    credit: &EpisodeCredit,
) -> StateGrad {
    let st = traj.steps[t];
    let ng = policy.num_goals();
    let na = policy.row(0, st.state).len();
    let mut out = StateGrad::zeros(st.state, ng, na);
    own_goal_term(t, traj, policy, value, credit, &mut out);
    let mut probs = vec![0.0; na];
    let mut glog = vec![0.0; na];
    for h in 0..ng {
        if h == traj.goal {
            continue;
        }
        let coef = -beta * goal_dist[h] * credit.cf_returns[h][t];
        softmax_into(policy.row(h, st.state), &mut probs);
        log_prob_grad_into(&probs, st.action, &mut glog);
        for a in 0..na {
            out.rows[h * na + a] += coef * glog[a];
        }
    }
    out
}

/// Running mean of per-step samples: exponential with the given decay, or
/// cumulative when `decay` is `None`. The first sample initializes it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    pub decay: Option<f64>,
    pub value: f64,
    pub samples: u64,
}

impl RunningMean {
    pub fn new(decay: Option<f64>) -> Self {
        RunningMean {
            decay,
            value: 0.0,
            samples: 0,
        }
    }

    pub fn push(&mut self, x: f64) {
        self.samples += 1;
        if self.samples == 1 {
            self.value = x;
            return;
        }
        match self.decay {
            Some(d) => self.value = d * self.value + (1.0 - d) * x,
            None => self.value += (x - self.value) / self.samples as f64,
        }
    }
}

/// Running estimates of action and state information.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoEstimate {
    pub action: RunningMean,
    pub state: RunningMean,
}

impl InfoEstimate {
    pub const DEFAULT_DECAY: f64 = 0.999;

    pub fn new(decay: Option<f64>) -> Self {
        InfoEstimate {
            action: RunningMean::new(decay),
            state: RunningMean::new(decay),
        }
    }

    pub fn push_kls(&mut self, kls: &[f64]) {
        for &k in kls {
            self.action.push(k);
        }
    }

    pub fn push_log_ratios(&mut self, ratios: &[f64]) {
        for &r in ratios {
            self.state.push(r);
        }
    }

    pub fn action_nats(&self) -> f64 {
        self.action.value
    }
    pub fn state_nats(&self) -> f64 {
        self.state.value
    }
    pub fn action_bits(&self) -> f64 {
        nats_to_bits(self.action.value)
    }
    pub fn state_bits(&self) -> f64 {
        nats_to_bits(self.state.value)
    }
}

impl Default for InfoEstimate {
    fn default() -> Self {
        Self::new(Some(Self::DEFAULT_DECAY))
    }
}

/// Information estimates of a frozen policy from sampled episodes, nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalInfo {
    /// Per-goal mean of the exact per-step KL, weighted by the goal prior.
    pub action_nats: f64,
    /// Plug-in value from visit counts (no pseudocount).
    pub state_nats: f64,
    pub episodes: u64,
    pub steps: u64,
}

/// Samples episodes from `policy` until at least `min_steps` steps were
/// taken and estimates both informations from them.
pub fn estimate_info_empirical<R: rand::Rng + ?Sized>(
    mdp: &GoalMdp,
    policy: &GoalPolicyTable,
    min_steps: u64,
    opts: CountOptions,
    rng: &mut R,
) -> EmpiricalInfo {
    let (ng, ns) = (mdp.num_goals(), mdp.num_states());
    let rho = mdp.goal_dist();
    let kl_cache: Vec<f64> = (0..ng)
        .flat_map(|g| (0..ns).map(move |s| (g, s)))
        .map(|(g, s)| kl_value(policy, rho, g, s))
        .collect();
    let mut kl_sum = vec![0.0; ng];
    let mut kl_n = vec![0u64; ng];
    let mut counts = StateCounts::new(ng, ns, 0.0);
    let (mut steps, mut episodes) = (0u64, 0u64);
    while steps < min_steps {
        let traj = sample_episode(mdp, policy, rng);
        let g = traj.goal;
        for st in &traj.steps {
            kl_sum[g] += kl_cache[g * ns + st.state];
        }
        kl_n[g] += traj.steps.len() as u64;
        counts.record_trajectory(&traj, opts);
        steps += traj.steps.len().max(1) as u64;
        episodes += 1;
    }
    let action_nats = (0..ng)
        .filter(|&g| kl_n[g] > 0)
        .map(|g| rho[g] * kl_sum[g] / kl_n[g] as f64)
        .sum();
    EmpiricalInfo {
        action_nats,
        state_nats: counts.plug_in_state_info(rho),
        episodes,
        steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Step;

    fn deterministic_pair() -> GoalPolicyTable {
        GoalPolicyTable::from_logits(2, 1, 2, vec![60.0, -60.0, -60.0, 60.0])
    }

    #[test]
    fn kl_cases() {
        let same = GoalPolicyTable::from_logits(2, 1, 3, vec![0.1, 0.4, -2.0, 0.1, 0.4, -2.0]);
        assert!(kl_to_base(&same, &[0.5, 0.5], 0, 0).kl.abs() < 1e-15);
        let p = deterministic_pair();
        for g in 0..2 {
            assert!((kl_to_base(&p, &[0.5, 0.5], g, 0).kl - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let logits = vec![
            0.3, -1.2, 0.8, 0.1, //
            -0.5, 0.9, 0.2, -0.7, //
            1.1, 0.0, -0.3, 0.4,
        ];
        let rho = [0.2, 0.5, 0.3];
        let h = 1e-5;
        for g in 0..3 {
            let p = GoalPolicyTable::from_logits(3, 1, 4, logits.clone());
            let an = kl_to_base(&p, &rho, g, 0).grad;
            for i in 0..12 {
                let mut up = logits.clone();
                up[i] += h;
                let mut dn = logits.clone();
                dn[i] -= h;
                let f = |l: Vec<f64>| kl_value(&GoalPolicyTable::from_logits(3, 1, 4, l), &rho, g, 0);
                let fd = (f(up) - f(dn)) / (2.0 * h);
                assert!((fd - an[i]).abs() < 1e-6, "g={g} i={i}: {fd} vs {}", an[i]);
            }
        }
    }

    #[test]
    fn modified_action_rewards() {
        assert_eq!(modified_reward_action(1.0, 3.7, 0.0), 1.0);
        assert!((modified_reward_action(0.0, LN_2, 0.025) - 0.017328679).abs() < 1e-8);
        assert!((modified_reward_action(0.0, LN_2, -0.025) + 0.017328679).abs() < 1e-8);
    }

    fn traj(goal: usize, states: &[usize]) -> Trajectory {
        Trajectory {
            goal,
            steps: states
                .iter()
                .map(|&s| Step {
                    state: s,
                    action: 0,
                    reward: 0.0,
                    next_state: s,
                })
                .collect(),
            truncated: true,
        }
    }

    #[test]
    fn counting() {
        let mut c = StateCounts::new(2, 3, 1.0);
        c.record_trajectory(&traj(0, &[1, 2, 1]), CountOptions::default());
        assert_eq!(c.get(0, 1), 3.0);
        assert_eq!(c.get(0, 2), 2.0);
        assert_eq!(c.get(1, 1), 1.0);
        c.record_trajectory(&traj(1, &[0]), CountOptions::default());
        assert_eq!(c.get(1, 0), 2.0);
        assert_eq!(c.get(0, 0), 1.0);
        assert_eq!(c.goal_total(0), 6.0);
        assert_eq!(c.goal_total(1), 4.0);
        assert_eq!(c.state_total(1), 4.0);
        assert_eq!(c.total(), 10.0);
        assert_eq!(c.marginal_error(), 0.0);
    }

    #[test]
    fn terminal_counting_is_optional() {
        let mut t = traj(0, &[0]);
        t.steps[0].next_state = 2;
        t.truncated = false;
        let mut a = StateCounts::new(1, 3, 0.0);
        a.record_trajectory(&t, CountOptions::default());
        assert_eq!(a.get(0, 2), 0.0);
        let mut b = StateCounts::new(1, 3, 0.0);
        b.record_trajectory(
            &t,
            CountOptions {
                include_terminal: true,
                decay: None,
            },
        );
        assert_eq!(b.get(0, 2), 1.0);
    }

    #[test]
    fn ratio_cases() {
        // N_g1(s)=3 of 10, N_g2(s)=1 of 10.
        let c = StateCounts::from_table(2, 2, vec![3.0, 7.0, 1.0, 9.0]);
        let r = emp_ratios(&c, &[0.5, 0.5], 0, 0);
        assert!((r.p_s_given_g - 0.3).abs() < 1e-15);
        assert!((r.p_s - 0.2).abs() < 1e-15);
        assert!((r.log_ratio - 1.5f64.ln()).abs() < 1e-12);
        assert!((r.posterior - 0.75).abs() < 1e-12);
        let m = modified_reward_state(0.0, &r, 0.1);
        assert!((m - 0.1 * (0.25 + 1.5f64.ln())).abs() < 1e-12);
        assert!((m - 0.06555).abs() < 1e-4);
        assert_eq!(modified_reward_state(0.4, &r, 0.0), 0.4);

        let even = StateCounts::from_table(2, 2, vec![4.0, 6.0, 4.0, 6.0]);
        let r = emp_ratios(&even, &[0.5, 0.5], 1, 0);
        assert!(r.log_ratio.abs() < 1e-15);
        assert!((r.posterior - 0.5).abs() < 1e-15);
        assert!((modified_reward_state(0.0, &r, 0.1) - 0.05).abs() < 1e-15);

        let single = StateCounts::from_table(1, 3, vec![2.0, 5.0, 1.0]);
        for s in 0..3 {
            let r = emp_ratios(&single, &[1.0], 0, s);
            assert!(r.log_ratio.abs() < 1e-15);
            assert!((r.posterior - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn counterfactual_cases() {
        let shared = GoalPolicyTable::from_logits(2, 2, 2, vec![0.3, -0.3, 1.0, 0.0, 0.3, -0.3, 1.0, 0.0]);
        let even = StateCounts::from_table(2, 2, vec![5.0, 5.0, 5.0, 5.0]);
        let t = traj(0, &[0, 1, 1, 0]);
        for r in counterfactual_rewards(&t, &shared, &even, &[0.5, 0.5], 1) {
            assert!((r - 1.0).abs() < 1e-12);
        }
        let skewed = StateCounts::from_table(2, 2, vec![3.0, 7.0, 1.0, 9.0]);
        let t = traj(0, &[0]);
        let r = counterfactual_reward(&t.steps, &shared, &skewed, &[0.5, 0.5], 0, 1);
        assert!((r - 1.5).abs() < 1e-12);

        // Other goal never takes action 0 in state 1.
        let p = GoalPolicyTable::from_logits(2, 2, 2, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -800.0, 0.0]);
        let t = traj(0, &[0, 1, 0, 0]);
        let rs = counterfactual_rewards(&t, &p, &even, &[0.5, 0.5], 1);
        assert!((rs[0] - 1.0).abs() < 1e-12);
        assert!(rs[1..].iter().all(|&r| r == 0.0));
        for k in 1..=4 {
            let direct = counterfactual_reward(&t.steps[..k], &p, &even, &[0.5, 0.5], 0, 1);
            assert_eq!(direct, rs[k - 1]);
        }
    }

    #[test]
    fn returns() {
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5), vec![1.75, 1.5, 1.0]);
        assert_eq!(discounted_return(&[0.3, -2.0, 4.0], 0.0), vec![0.3, -2.0, 4.0]);
        assert_eq!(discounted_return(&[1.0; 4], 1.0), vec![4.0, 3.0, 2.0, 1.0]);
    }

    fn reinforce_rows(t: usize, tr: &Trajectory, p: &GoalPolicyTable, v: &ValueTable, c: &EpisodeCredit) -> Vec<f64> {
        let st = tr.steps[t];
        let na = 2;
        let mut rows = vec![0.0; p.num_goals() * na];
        let adv = c.returns[t] - v.get(tr.goal, st.state);
        let g = p.log_prob_grad(tr.goal, st.state, st.action);
        for a in 0..na {
            rows[tr.goal * na + a] = adv * g[a];
        }
        rows
    }

    #[test]
    fn beta_zero_reduces_to_reinforce() {
        let p = GoalPolicyTable::from_logits(2, 2, 2, vec![0.3, -0.1, 0.9, 0.2, -0.4, 0.5, 0.0, 1.3]);
        let v = ValueTable::zeros(2, 2);
        let mut tr = traj(1, &[0, 1, 1]);
        tr.steps[2].reward = 1.0;
        tr.steps[1].action = 1;
        let counts = StateCounts::from_table(2, 2, vec![3.0, 7.0, 1.0, 9.0]);
        let ca = action_credit(&tr, &p, &[0.5, 0.5], 0.0, 0.9);
        let cs = state_credit(&tr, &p, &counts, &[0.5, 0.5], 0.0, 0.9);
        for t in 0..3 {
            let plain = reinforce_rows(t, &tr, &p, &v, &ca);
            assert_eq!(action_grad_step(t, &tr, &p, &v, &[0.5, 0.5], 0.0, &ca).rows, plain);
            assert_eq!(state_grad_step(t, &tr, &p, &v, &[0.5, 0.5], 0.0, &cs).rows, plain);
        }
    }

    #[test]
    fn zero_advantage_identical_goals_gives_zero() {
        let p = GoalPolicyTable::from_logits(2, 1, 2, vec![0.7, -0.2, 0.7, -0.2]);
        let tr = traj(0, &[0]);
        let mut v = ValueTable::zeros(2, 1);
        let credit = action_credit(&tr, &p, &[0.5, 0.5], 0.3, 0.9);
        v.values_mut()[0] = credit.returns[0];
        let gstep = action_grad_step(0, &tr, &p, &v, &[0.5, 0.5], 0.3, &credit);
        assert!(gstep.rows.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn running_means() {
        let mut m = RunningMean::new(Some(0.9));
        for _ in 0..500 {
            m.push(2.5);
        }
        assert!((m.value - 2.5).abs() < 1e-12);
        let mut last = RunningMean::new(Some(0.0));
        for x in [1.0, 4.0, -3.0] {
            last.push(x);
        }
        assert_eq!(last.value, -3.0);
        let mut mean = RunningMean::new(None);
        for x in [1.0, 2.0, 6.0] {
            mean.push(x);
        }
        assert!((mean.value - 3.0).abs() < 1e-15);
    }
}

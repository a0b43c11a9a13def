//! Exact quantities on small tabular MDPs by forward dynamic programming:
//! occupancies, action/state information, expected return, and central
//! finite-difference gradients of the regularized objectives.
//!
//! Conventions shared with the sampler: reward is credited on entering a
//! state, and a visit is a state in which an action is taken (so `s_0`
//! counts and the absorbing terminal state does not). Visitation `d(s|g)` is
//! the ratio of expected visit counts to expected episode length.

use thiserror::Error;

use crate::agent::GoalPolicyTable;
use crate::env::{GoalMdp, GoalPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("finite-difference step {step} too large at parameter {index}: forward {forward}, backward {backward}")]
    StepTooLarge {
        index: usize,
        step: f64,
        forward: f64,
        backward: f64,
    },
    #[error("state space of {states} states exceeds the exact-mode limit of {limit}")]
    TooLarge { states: usize, limit: usize },
}

/// Largest state space the CLI will enumerate exactly.
pub const EXACT_STATE_LIMIT: usize = 4096;

/// Exact occupancies of a goal-conditioned policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    pub horizon: usize,
    pub num_goals: usize,
    pub num_states: usize,
    /// `p_t(s|g)` over non-absorbed mass, laid out `[t][g][s]` for
    /// `t = 0..=horizon`.
    pub occupancy: Vec<f64>,
    /// Cumulative absorbed mass at time `t`, `[t][g]`.
    pub absorbed: Vec<f64>,
    /// Expected visits `sum_{t < T} p_t(s|g)`, `[g][s]`.
    pub expected_visits: Vec<f64>,
    /// Normalized visitation `d(s|g)`, `[g][s]`.
    pub visitation: Vec<f64>,
    /// Expected episode length per goal.
    pub expected_len: Vec<f64>,
    /// Expected entries into each terminal state, `[g][s]`.
    pub terminal_entries: Vec<f64>,
}

impl OccupancyTable {
    pub fn p(&self, t: usize, g: usize, s: usize) -> f64 {
        self.occupancy[(t * self.num_goals + g) * self.num_states + s]
    }

    pub fn absorbed_at(&self, t: usize, g: usize) -> f64 {
        self.absorbed[t * self.num_goals + g]
    }

    pub fn d(&self, g: usize, s: usize) -> f64 {
        self.visitation[g * self.num_states + s]
    }

    /// Goal-marginal visitation `d(s) = sum_g rho(g) d(s|g)`.
    pub fn marginal(&self, goal_dist: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_states];
        for (g, &w) in goal_dist.iter().enumerate() {
            for (s, o) in out.iter_mut().enumerate() {
                *o += w * self.d(g, s);
            }
        }
        out
    }

    /// Worst violation of `sum_s p_t(s|g) + absorbed_t(g) = 1`.
    pub fn conservation_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 0..=self.horizon {
            for g in 0..self.num_goals {
                let live: f64 = (0..self.num_states).map(|s| self.p(t, g, s)).sum();
                worst = worst.max((live + self.absorbed_at(t, g) - 1.0).abs());
            }
        }
        worst
    }
}

fn policy_probs<P: GoalPolicy + ?Sized>(mdp: &GoalMdp, policy: &P) -> Vec<f64> {
    let (ng, ns, na) = (mdp.num_goals(), mdp.num_states(), mdp.num_actions());
    let mut out = vec![0.0; ng * ns * na];
    for g in 0..ng {
        for s in 0..ns {
            let o = (g * ns + s) * na;
            policy.action_probs_into(g, s, &mut out[o..o + na]);
        }
    }
    out
}

/// Forward DP with terminal absorption.
pub fn exact_occupancy<P: GoalPolicy + ?Sized>(mdp: &GoalMdp, policy: &P) -> OccupancyTable {
    occupancy_from_probs(mdp, &policy_probs(mdp, policy))
}

fn occupancy_from_probs(mdp: &GoalMdp, probs: &[f64]) -> OccupancyTable {
    let (ng, ns, na, horizon) = (mdp.num_goals(), mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut occupancy = vec![0.0; (horizon + 1) * ng * ns];
    let mut absorbed = vec![0.0; (horizon + 1) * ng];
    let mut expected_visits = vec![0.0; ng * ns];
    let mut terminal_entries = vec![0.0; ng * ns];
    for g in 0..ng {
        let base = g * ns;
        occupancy[base..base + ns].copy_from_slice(mdp.init_dist());
        for t in 0..horizon {
            let cur = (t * ng + g) * ns;
            let nxt = ((t + 1) * ng + g) * ns;
            let mut newly_absorbed = 0.0;
            for s in 0..ns {
                let m = occupancy[cur + s];
                if m == 0.0 {
                    continue;
                }
                expected_visits[g * ns + s] += m;
                let pr = &probs[(g * ns + s) * na..(g * ns + s + 1) * na];
                for (a, &pa) in pr.iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    for &(n, pt) in mdp.transition(s, a) {
                        let w = m * pa * pt;
                        if mdp.is_terminal(n) {
                            newly_absorbed += w;
                            terminal_entries[g * ns + n] += w;
                        } else {
                            occupancy[nxt + n] += w;
                        }
                    }
                }
            }
            absorbed[(t + 1) * ng + g] = absorbed[t * ng + g] + newly_absorbed;
        }
    }
    let mut visitation = vec![0.0; ng * ns];
    let mut expected_len = vec![0.0; ng];
    for g in 0..ng {
        let total: f64 = expected_visits[g * ns..(g + 1) * ns].iter().sum();
        expected_len[g] = total;
        for s in 0..ns {
            visitation[g * ns + s] = expected_visits[g * ns + s] / total;
        }
    }
    OccupancyTable {
        horizon,
        num_goals: ng,
        num_states: ns,
        occupancy,
        absorbed,
        expected_visits,
        visitation,
        expected_len,
        terminal_entries,
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pa, _)| pa > 0.0)
        .map(|(&pa, &qa)| pa * (pa / qa).ln())
        .sum()
}

fn action_info_from(mdp: &GoalMdp, probs: &[f64], occ: &OccupancyTable) -> f64 {
    let (ng, ns, na) = (mdp.num_goals(), mdp.num_states(), mdp.num_actions());
    let rho = mdp.goal_dist();
    let mut info = 0.0;
    let mut base = vec![0.0; na];
    for s in 0..ns {
        base.fill(0.0);
        for h in 0..ng {
            for a in 0..na {
                base[a] += rho[h] * probs[(h * ns + s) * na + a];
            }
        }
        for g in 0..ng {
            let d = occ.d(g, s);
            if d == 0.0 || rho[g] == 0.0 {
                continue;
            }
            info += rho[g] * d * kl(&probs[(g * ns + s) * na..(g * ns + s + 1) * na], &base);
        }
    }
    info
}

fn state_info_from(mdp: &GoalMdp, occ: &OccupancyTable) -> f64 {
    let rho = mdp.goal_dist();
    let marginal = occ.marginal(rho);
    let mut info = 0.0;
    for (g, &w) in rho.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (s, &ds) in marginal.iter().enumerate() {
            let dg = occ.d(g, s);
            if dg > 0.0 {
                info += w * dg * (dg / ds).ln();
            }
        }
    }
    info
}

fn return_from(mdp: &GoalMdp, probs: &[f64], occ: &OccupancyTable) -> f64 {
    let (_, ns, na) = (mdp.num_goals(), mdp.num_states(), mdp.num_actions());
    let rho = mdp.goal_dist();
    let mut eta = 0.0;
    for (g, &w) in rho.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        // Expected one-step reward per state, independent of t.
        let step_reward: Vec<f64> = (0..ns)
            .map(|s| {
                let pr = &probs[(g * ns + s) * na..(g * ns + s + 1) * na];
                pr.iter()
                    .enumerate()
                    .map(|(a, &pa)| {
                        pa * mdp
                            .transition(s, a)
                            .iter()
                            .map(|&(n, pt)| pt * mdp.reward(s, a, n, g))
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        let mut disc = 1.0;
        for t in 0..occ.horizon {
            let r: f64 = (0..ns).map(|s| occ.p(t, g, s) * step_reward[s]).sum();
            eta += w * disc * r;
            disc *= mdp.gamma();
        }
    }
    eta
}

/// `I(A;G|S) = sum_g rho(g) sum_s d(s|g) KL[pi_g(.|s) | pi_0(.|s)]`, nats.
pub fn exact_action_info<P: GoalPolicy + ?Sized>(mdp: &GoalMdp, policy: &P) -> f64 {
    let probs = policy_probs(mdp, policy);
    let occ = occupancy_from_probs(mdp, &probs);
    action_info_from(mdp, &probs, &occ)
}

/// `I(S;G) = sum_g rho(g) sum_s d(s|g) log(d(s|g) / d(s))`, nats.
pub fn exact_state_info<P: GoalPolicy + ?Sized>(mdp: &GoalMdp, policy: &P) -> f64 {
    state_info_from(mdp, &exact_occupancy(mdp, policy))
}

/// `I(S;G)` with entries into terminal states counted as visits, the
/// oracle analog of counting with `include_terminal`.
pub fn exact_state_info_with_terminal<P: GoalPolicy + ?Sized>(mdp: &GoalMdp, policy: &P) -> f64 {
    let mut occ = exact_occupancy(mdp, policy);
    let ns = occ.num_states;
    for g in 0..occ.num_goals {
        let row = g * ns..(g + 1) * ns;
        let total: f64 = occ.expected_visits[row.clone()].iter().sum::<f64>()
            + occ.terminal_entries[row.clone()].iter().sum::<f64>();
        for i in row {
            occ.visitation[i] = (occ.expected_visits[i] + occ.terminal_entries[i]) / total;
        }
    }
    state_info_from(mdp, &occ)
}

/// Expected discounted return `E[sum_t gamma^t r_t]`.
pub fn exact_return<P: GoalPolicy + ?Sized>(mdp: &GoalMdp, policy: &P) -> f64 {
    let probs = policy_probs(mdp, policy);
    let occ = occupancy_from_probs(mdp, &probs);
    return_from(mdp, &probs, &occ)
}

/// Mean episode length `sum_g rho(g) E[L | g]`.
pub fn exact_mean_length<P: GoalPolicy + ?Sized>(mdp: &GoalMdp, policy: &P) -> f64 {
    let occ = exact_occupancy(mdp, policy);
    mdp.goal_dist()
        .iter()
        .zip(&occ.expected_len)
        .map(|(w, l)| w * l)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `eta` alone.
    Return,
    /// `eta + beta I(A;G|S)`.
    Action,
    /// `eta + beta I(S;G)`.
    State,
}

/// Objective value for `policy` under the chosen regularizer.
pub fn objective_value(mdp: &GoalMdp, policy: &GoalPolicyTable, objective: Objective, beta: f64) -> f64 {
    let probs = policy_probs(mdp, policy);
    let occ = occupancy_from_probs(mdp, &probs);
    let eta = return_from(mdp, &probs, &occ);
    match objective {
        Objective::Return => eta,
        Objective::Action => eta + beta * action_info_from(mdp, &probs, &occ),
        Objective::State => eta + beta * state_info_from(mdp, &occ),
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of the objective with respect to every logit.
/// Fails when one-sided estimates disagree beyond `1e-3 (1 + |central|)`,
/// which signals a step too large for the local curvature.
pub fn finite_diff_objective_grad(
    mdp: &GoalMdp,
    policy: &GoalPolicyTable,
    objective: Objective,
    beta: f64,
    step: f64,
) -> Result<Vec<f64>, OracleError> {
    let f0 = objective_value(mdp, policy, objective, beta);
    let mut work = policy.clone();
    let n = policy.logits().len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = policy.logits()[i];
        work.logits_mut()[i] = orig + step;
        let fp = objective_value(mdp, &work, objective, beta);
        work.logits_mut()[i] = orig - step;
        let fm = objective_value(mdp, &work, objective, beta);
        work.logits_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * step);
        let forward = (fp - f0) / step;
        let backward = (f0 - fm) / step;
        if (forward - backward).abs() > 1e-3 * (1.0 + central.abs()) {
            return Err(OracleError::StepTooLarge {
                index: i,
                step,
                forward,
                backward,
            });
        }
        grad[i] = central;
    }
    Ok(grad)
}

/// Refuses state spaces too large to enumerate.
pub fn check_enumerable(mdp: &GoalMdp) -> Result<(), OracleError> {
    if mdp.num_states() > EXACT_STATE_LIMIT {
        return Err(OracleError::TooLarge {
            states: mdp.num_states(),
            limit: EXACT_STATE_LIMIT,
        });
    }
    Ok(())
}

//! Alice's tabular softmax policy, tabular value function, and Adam.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_index, GoalPolicy};

/// Numerically stable softmax of `logits` into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Entropy in nats, with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Gradient of the entropy of `softmax(z)` with respect to `z`:
/// `dH/dz_j = -p_j (log p_j + H)`.
pub fn entropy_grad_into(probs: &[f64], out: &mut [f64]) {
    let h = entropy(probs);
    for (o, &p) in out.iter_mut().zip(probs) {
        *o = if p > 0.0 { -p * (p.ln() + h) } else { 0.0 };
    }
}

/// Gradient of `log softmax(z)_a` with respect to `z`: `onehot(a) - p`.
pub fn log_prob_grad_into(probs: &[f64], action: usize, out: &mut [f64]) {
    for (j, (o, &p)) in out.iter_mut().zip(probs).enumerate() {
        *o = if j == action { 1.0 - p } else { -p };
    }
}

/// Goal-conditioned tabular policy: logits indexed `[g][s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalPolicyTable {
    num_goals: usize,
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

impl GoalPolicyTable {
    /// All-zero logits, i.e. the uniform policy.
    pub fn zeros(num_goals: usize, num_states: usize, num_actions: usize) -> Self {
        GoalPolicyTable {
            num_goals,
            num_states,
            num_actions,
            logits: vec![0.0; num_goals * num_states * num_actions],
        }
    }

    pub fn from_logits(
        num_goals: usize,
        num_states: usize,
        num_actions: usize,
        logits: Vec<f64>,
    ) -> Self {
        assert_eq!(logits.len(), num_goals * num_states * num_actions);
        GoalPolicyTable {
            num_goals,
            num_states,
            num_actions,
            logits,
        }
    }

    pub fn num_goals(&self) -> usize {
        self.num_goals
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Offset of the logit row `(g, s)` in the flat table.
    pub fn row_offset(&self, g: usize, s: usize) -> usize {
        (g * self.num_states + s) * self.num_actions
    }

    pub fn row(&self, g: usize, s: usize) -> &[f64] {
        let o = self.row_offset(g, s);
        &self.logits[o..o + self.num_actions]
    }

    pub fn row_mut(&mut self, g: usize, s: usize) -> &mut [f64] {
        let o = self.row_offset(g, s);
        &mut self.logits[o..o + self.num_actions]
    }

    pub fn action_probs(&self, g: usize, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions];
        softmax_into(self.row(g, s), &mut out);
        out
    }

    /// Goal-marginal base policy `pi_0(a|s) = sum_g rho(g) pi_g(a|s)`.
    pub fn base_policy(&self, goal_dist: &[f64], s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions];
        let mut p = vec![0.0; self.num_actions];
        for (g, &w) in goal_dist.iter().enumerate() {
            softmax_into(self.row(g, s), &mut p);
            for (o, &pa) in out.iter_mut().zip(&p) {
                *o += w * pa;
            }
        }
        out
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, g: usize, s: usize, rng: &mut R) -> usize {
        sample_index(&self.action_probs(g, s), rng)
    }

    pub fn entropy(&self, g: usize, s: usize) -> f64 {
        entropy(&self.action_probs(g, s))
    }

    pub fn entropy_grad(&self, g: usize, s: usize) -> Vec<f64> {
        let p = self.action_probs(g, s);
        let mut out = vec![0.0; self.num_actions];
        entropy_grad_into(&p, &mut out);
        out
    }

    pub fn log_prob_grad(&self, g: usize, s: usize, a: usize) -> Vec<f64> {
        let p = self.action_probs(g, s);
        let mut out = vec![0.0; self.num_actions];
        log_prob_grad_into(&p, a, &mut out);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|x| x.is_finite())
    }
}

impl GoalPolicy for GoalPolicyTable {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn action_probs_into(&self, g: usize, s: usize, out: &mut [f64]) {
        softmax_into(self.row(g, s), out);
    }
}

/// Tabular goal-state value function `V_g(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    num_goals: usize,
    num_states: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(num_goals: usize, num_states: usize) -> Self {
        ValueTable {
            num_goals,
            num_states,
            values: vec![0.0; num_goals * num_states],
        }
    }

    pub fn index(&self, g: usize, s: usize) -> usize {
        g * self.num_states + s
    }

    pub fn get(&self, g: usize, s: usize) -> f64 {
        self.values[self.index(g, s)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

/// Bias-corrected Adam with dense moment updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self::with_moments(lr, 0.9, 0.999, 1e-8, num_params)
    }

    pub fn with_moments(lr: f64, beta1: f64, beta2: f64, eps: f64, num_params: usize) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn num_params(&self) -> usize {
        self.m.len()
    }

    /// Applies one update. Mismatched shapes are a contract violation.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], dir: Direction) {
        assert_eq!(params.len(), self.m.len(), "parameter shape mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient shape mismatch");
        self.step += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let inv_c1 = 1.0 / (1.0 - self.beta1_pow);
        let inv_sqrt_c2 = 1.0 / (1.0 - self.beta2_pow).sqrt();
        let step = match dir {
            Direction::Ascend => self.lr,
            Direction::Descend => -self.lr,
        };
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(moments) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p += step * (*m * inv_c1) / (v.sqrt() * inv_sqrt_c2 + eps);
        }
    }
}

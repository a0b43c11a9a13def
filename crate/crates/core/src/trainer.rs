//! Alice's training loops: REINFORCE with a tabular value baseline, plus
//! action- or state-information regularization, an annealed entropy bonus,
//! and Adam updates applied per step in time order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    entropy_grad_into, log_prob_grad_into, softmax_into, Adam, Direction,
    GoalPolicyTable, ValueTable,
};
use crate::env::{key_pickup, sample_episode, EnvError, GoalMdp, KeyState, Trajectory};
use crate::info::{
    action_credit, action_grad_step, discounted_return, emp_ratios, nats_to_bits, state_credit,
    state_grad_step, CountOptions, EpisodeCredit, InfoEstimate, StateCounts,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite {what} after episode {episode}")]
    NonFinite { what: &'static str, episode: u64 },
    #[error("metrics sink failed: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    Action,
    State,
}

impl Regularizer {
    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Action => "action",
            Regularizer::State => "state",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// One Adam step per time step, in time order.
    PerStep,
    /// Gradients summed over the episode, one Adam step.
    PerEpisode,
}

/// Geometric interpolation from `start` to `end` over `horizon` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl AnnealSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.horizon == 0 {
            return self.end;
        }
        let frac = step.min(self.horizon) as f64 / self.horizon as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regularizer: Regularizer,
    pub beta: f64,
    /// Budget in environment steps.
    pub total_steps: u64,
    pub max_episode_len: usize,
    pub entropy_start: f64,
    pub entropy_end: f64,
    pub learning_rate: f64,
    pub value_weight: f64,
    pub gamma: f64,
    pub seed: u64,
    pub update_mode: UpdateMode,
    pub pseudocount: f64,
    pub count_terminal: bool,
    pub count_decay: Option<f64>,
    pub info_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regularizer: Regularizer::None,
            beta: 0.0,
            total_steps: 100_000,
            max_episode_len: 100,
            entropy_start: 0.5,
            entropy_end: 0.005,
            learning_rate: 2.5e-2,
            value_weight: 0.5,
            gamma: 0.8,
            seed: 0,
            update_mode: UpdateMode::PerStep,
            pseudocount: 1.0,
            count_terminal: false,
            count_decay: None,
            info_decay: InfoEstimate::DEFAULT_DECAY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.max_episode_len == 0 {
            return bad("max_episode_len must be positive".into());
        }
        if !(self.entropy_end > 0.0 && self.entropy_start >= self.entropy_end) {
            return bad(format!(
                "entropy schedule needs start >= end > 0 (got {} -> {})",
                self.entropy_start, self.entropy_end
            ));
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite".into());
        }
        if self.regularizer == Regularizer::None && self.beta != 0.0 {
            return bad(format!(
                "beta = {} is set but regularizer is \"none\"; choose action or state",
                self.beta
            ));
        }
        if !(self.pseudocount > 0.0) {
            return bad("pseudocount must be positive".into());
        }
        if let Some(d) = self.count_decay {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("count_decay {d} outside (0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.info_decay) {
            return bad(format!("info_decay {} outside [0, 1)", self.info_decay));
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

    fn count_options(&self) -> CountOptions {
        CountOptions {
            include_terminal: self.count_terminal,
            decay: self.count_decay,
        }
    }
}

/// One line of the per-episode metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub v: u32,
    pub episode: u64,
    /// Environment steps consumed including this episode.
    pub steps: u64,
    pub goal: usize,
    pub length: usize,
    pub truncated: bool,
    pub raw_return: f64,
    pub discounted_return: f64,
    pub modified_return: f64,
    pub mean_kl_bits: f64,
    pub i_action_bits: f64,
    pub i_state_bits: f64,
    pub entropy_bonus: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

pub const RECORD_VERSION: u32 = 1;

pub fn key_label(k: KeyState) -> &'static str {
    match k {
        KeyState::None => "none",
        KeyState::Goal(_) => "goal",
        KeyState::Master => "master",
    }
}

/// Receives per-episode records as training proceeds.
pub trait MetricsSink<R> {
    fn record(&mut self, rec: &R) -> Result<(), TrainError>;
}

impl<R: Clone> MetricsSink<R> for Vec<R> {
    fn record(&mut self, rec: &R) -> Result<(), TrainError> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards records.
pub struct NullSink;

impl<R> MetricsSink<R> for NullSink {
    fn record(&mut self, _: &R) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Complete, resumable state of an Alice training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliceState {
    pub policy: GoalPolicyTable,
    pub values: ValueTable,
    pub policy_adam: Adam,
    pub value_adam: Adam,
    pub counts: StateCounts,
    pub estimate: InfoEstimate,
    pub rng: ChaCha8Rng,
    pub steps: u64,
    pub episodes: u64,
}

pub struct AliceTrainer {
    mdp: GoalMdp,
    config: TrainConfig,
    state: AliceState,
    grad_buf: Vec<f64>,
    value_grad_buf: Vec<f64>,
}

impl AliceTrainer {
    pub fn new(mdp: &GoalMdp, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let (ng, ns, na) = (mdp.num_goals(), mdp.num_states(), mdp.num_actions());
        let state = AliceState {
            policy: GoalPolicyTable::zeros(ng, ns, na),
            values: ValueTable::zeros(ng, ns),
            policy_adam: Adam::new(config.learning_rate, ng * ns * na),
            value_adam: Adam::new(config.learning_rate, ng * ns),
            counts: StateCounts::new(ng, ns, config.pseudocount),
            estimate: InfoEstimate::new(Some(config.info_decay)),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            steps: 0,
            episodes: 0,
        };
        Self::resume(mdp, config, state)
    }

    /// Continues from a saved state.
    pub fn resume(mdp: &GoalMdp, config: TrainConfig, state: AliceState) -> Result<Self, TrainError> {
        config.validate()?;
        let mdp = mdp
            .clone()
            .with_gamma(config.gamma)?
            .with_horizon(config.max_episode_len)?;
        let (ng, ns, na) = (mdp.num_goals(), mdp.num_states(), mdp.num_actions());
        if state.policy.logits().len() != ng * ns * na || state.values.values().len() != ng * ns {
            return Err(TrainError::Config("saved state does not match the environment".into()));
        }
        Ok(AliceTrainer {
            grad_buf: vec![0.0; ng * ns * na],
            value_grad_buf: vec![0.0; ng * ns],
            mdp,
            config,
            state,
        })
    }

    pub fn mdp(&self) -> &GoalMdp {
        &self.mdp
    }
    pub fn config(&self) -> &TrainConfig {
        &self.config
    }
    pub fn state(&self) -> &AliceState {
        &self.state
    }
    pub fn into_state(self) -> AliceState {
        self.state
    }
    pub fn steps(&self) -> u64 {
        self.state.steps
    }
    pub fn is_done(&self) -> bool {
        self.state.steps >= self.config.total_steps
    }

    /// Trains until the step budget is consumed.
    pub fn run(&mut self, sink: &mut dyn MetricsSink<EpisodeRecord>) -> Result<(), TrainError> {
        self.run_until(self.config.total_steps, sink)
    }

    /// Trains whole episodes until at least `steps` environment steps have
    /// been consumed (capped at the budget).
    pub fn run_until(
        &mut self,
        steps: u64,
        sink: &mut dyn MetricsSink<EpisodeRecord>,
    ) -> Result<(), TrainError> {
        let target = steps.min(self.config.total_steps);
        while self.state.steps < target {
            let rec = self.train_episode()?;
            sink.record(&rec)?;
        }
        Ok(())
    }

    /// Samples and learns from one episode.
    pub fn train_episode(&mut self) -> Result<EpisodeRecord, TrainError> {
        let traj = sample_episode(&self.mdp, &self.state.policy, &mut self.state.rng);
        let start_step = self.state.steps;
        self.state.counts.record_trajectory(&traj, self.config.count_options());

        let rho = self.mdp.goal_dist().to_vec();
        let gamma = self.config.gamma;
        let beta = self.config.beta;
        let mut credit = match self.config.regularizer {
            Regularizer::None | Regularizer::Action => {
                action_credit(&traj, &self.state.policy, &rho, beta, gamma)
            }
            Regularizer::State => {
                state_credit(&traj, &self.state.policy, &self.state.counts, &rho, beta, gamma)
            }
        };
        if self.config.regularizer == Regularizer::None {
            // Plain returns; KLs are kept only for reporting.
            credit.modified_rewards = traj.rewards();
            credit.returns = discounted_return(&credit.modified_rewards, gamma);
        }
        if credit.log_ratios.is_empty() {
            credit.log_ratios = traj
                .steps
                .iter()
                .map(|st| emp_ratios(&self.state.counts, &rho, traj.goal, st.state).log_ratio)
                .collect();
        }

        let schedule = self.config.entropy_schedule();
        let per_step = self.config.update_mode == UpdateMode::PerStep;
        for t in 0..traj.len() {
            let bonus = schedule.value(start_step + t as u64);
            self.accumulate_policy_grad(t, &traj, &rho, &credit, bonus);
            self.accumulate_value_grad(t, &traj, &credit);
            if per_step {
                self.apply_updates();
            }
        }
        if !per_step && !traj.is_empty() {
            self.apply_updates();
        }

        self.state.steps += traj.len() as u64;
        self.state.episodes += 1;
        self.state.estimate.push_kls(&credit.kls);
        self.state.estimate.push_log_ratios(&credit.log_ratios);
        if !self.state.policy.is_finite() {
            return Err(TrainError::NonFinite {
                what: "policy logits",
                episode: self.state.episodes,
            });
        }
        if !self.state.values.is_finite() {
            return Err(TrainError::NonFinite {
                what: "value table",
                episode: self.state.episodes,
            });
        }
        Ok(self.record(&traj, &credit, schedule.value(start_step)))
    }

    fn accumulate_policy_grad(
        &mut self,
        t: usize,
        traj: &Trajectory,
        rho: &[f64],
        credit: &EpisodeCredit,
        bonus: f64,
    ) {
        let policy = &self.state.policy;
        let values = &self.state.values;
        let beta = self.config.beta;
        let mut step_grad = match self.config.regularizer {
            Regularizer::None => {
                let st = traj.steps[t];
                let na = self.mdp.num_actions();
                let mut g = crate::info::StateGrad::zeros(st.state, policy.num_goals(), na);
                let mut probs = vec![0.0; na];
                let mut glog = vec![0.0; na];
                softmax_into(policy.row(traj.goal, st.state), &mut probs);
                log_prob_grad_into(&probs, st.action, &mut glog);
                let adv = credit.returns[t] - values.get(traj.goal, st.state);
                for a in 0..na {
                    g.rows[traj.goal * na + a] = adv * glog[a];
                }
                g
            }
            Regularizer::Action => action_grad_step(t, traj, policy, values, rho, beta, credit),
            Regularizer::State => state_grad_step(t, traj, policy, values, rho, beta, credit),
        };
        let na = self.mdp.num_actions();
        let s = traj.steps[t].state;
        let mut probs = vec![0.0; na];
        let mut hgrad = vec![0.0; na];
        softmax_into(policy.row(traj.goal, s), &mut probs);
        entropy_grad_into(&probs, &mut hgrad);
        for a in 0..na {
            step_grad.rows[traj.goal * na + a] += bonus * hgrad[a];
        }
        step_grad.scatter_add(policy, &mut self.grad_buf);
    }

    fn accumulate_value_grad(&mut self, t: usize, traj: &Trajectory, credit: &EpisodeCredit) {
        let s = traj.steps[t].state;
        let i = self.state.values.index(traj.goal, s);
        let err = self.state.values.values()[i] - credit.returns[t];
        self.value_grad_buf[i] += 2.0 * self.config.value_weight * err;
    }

    fn apply_updates(&mut self) {
        self.state
            .policy_adam
            .apply(self.state.policy.logits_mut(), &self.grad_buf, Direction::Ascend);
        self.state
            .value_adam
            .apply(self.state.values.values_mut(), &self.value_grad_buf, Direction::Descend);
        self.grad_buf.fill(0.0);
        self.value_grad_buf.fill(0.0);
    }

    fn record(&self, traj: &Trajectory, credit: &EpisodeCredit, bonus: f64) -> EpisodeRecord {
        let raw = traj.rewards();
        let mean_kl = if credit.kls.is_empty() {
            0.0
        } else {
            credit.kls.iter().sum::<f64>() / credit.kls.len() as f64
        };
        EpisodeRecord {
            v: RECORD_VERSION,
            episode: self.state.episodes,
            steps: self.state.steps,
            goal: traj.goal,
            length: traj.len(),
            truncated: traj.truncated,
            raw_return: raw.iter().sum(),
            discounted_return: discounted_return(&raw, self.config.gamma).first().copied().unwrap_or(0.0),
            modified_return: credit.returns.first().copied().unwrap_or(0.0),
            mean_kl_bits: nats_to_bits(mean_kl),
            i_action_bits: self.state.estimate.action_bits(),
            i_state_bits: self.state.estimate.state_bits(),
            entropy_bonus: bonus,
            key: key_pickup(&self.mdp, traj).map(|k| key_label(k).to_string()),
        }
    }
}

/// Result of a finished Alice run.
#[derive(Debug, Clone)]
pub struct AliceOutcome {
    pub policy: GoalPolicyTable,
    pub values: ValueTable,
    pub counts: StateCounts,
    pub estimate: InfoEstimate,
    pub steps: u64,
    pub episodes: u64,
}

impl From<AliceState> for AliceOutcome {
    fn from(s: AliceState) -> Self {
        AliceOutcome {
            policy: s.policy,
            values: s.values,
            counts: s.counts,
            estimate: s.estimate,
            steps: s.steps,
            episodes: s.episodes,
        }
    }
}

/// Trains Alice with whichever regularizer the config names.
pub fn train_alice(
    mdp: &GoalMdp,
    config: &TrainConfig,
    sink: &mut dyn MetricsSink<EpisodeRecord>,
) -> Result<AliceOutcome, TrainError> {
    let mut trainer = AliceTrainer::new(mdp, config.clone())?;
    trainer.run(sink)?;
    Ok(trainer.into_state().into())
}

/// Action-information regularized REINFORCE with value baseline.
pub fn train_alice_action(
    mdp: &GoalMdp,
    config: &TrainConfig,
    sink: &mut dyn MetricsSink<EpisodeRecord>,
) -> Result<AliceOutcome, TrainError> {
    if config.regularizer != Regularizer::Action {
        return Err(TrainError::Config("train_alice_action needs regularizer = action".into()));
    }
    train_alice(mdp, config, sink)
}

/// State-information regularized REINFORCE with value baseline.
pub fn train_alice_state(
    mdp: &GoalMdp,
    config: &TrainConfig,
    sink: &mut dyn MetricsSink<EpisodeRecord>,
) -> Result<AliceOutcome, TrainError> {
    if config.regularizer != Regularizer::State {
        return Err(TrainError::Config("train_alice_state needs regularizer = state".into()));
    }
    train_alice(mdp, config, sink)
}

/// Reference REINFORCE-with-baseline loop with no information machinery at
/// all. Shares the sampling order, entropy bonus and Adam usage of
/// [`AliceTrainer`] so runs can be compared bit for bit.
pub fn train_reinforce_baseline(
    mdp: &GoalMdp,
    config: &TrainConfig,
) -> Result<(GoalPolicyTable, ValueTable, Vec<Trajectory>), TrainError> {
    let mdp = mdp
        .clone()
        .with_gamma(config.gamma)?
        .with_horizon(config.max_episode_len)?;
    let (ng, ns, na) = (mdp.num_goals(), mdp.num_states(), mdp.num_actions());
    let mut policy = GoalPolicyTable::zeros(ng, ns, na);
    let mut values = ValueTable::zeros(ng, ns);
    let mut padam = Adam::new(config.learning_rate, ng * ns * na);
    let mut vadam = Adam::new(config.learning_rate, ng * ns);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schedule = config.entropy_schedule();
    let mut pgrad = vec![0.0; ng * ns * na];
    let mut vgrad = vec![0.0; ng * ns];
    let mut probs = vec![0.0; na];
    let mut glog = vec![0.0; na];
    let mut hgrad = vec![0.0; na];
    let mut steps = 0u64;
    let mut episodes = Vec::new();
    while steps < config.total_steps {
        let traj = sample_episode(&mdp, &policy, &mut rng);
        let g = traj.goal;
        let returns = discounted_return(&traj.rewards(), config.gamma);
        for (t, st) in traj.steps.iter().enumerate() {
            let o = policy.row_offset(g, st.state);
            softmax_into(policy.row(g, st.state), &mut probs);
            log_prob_grad_into(&probs, st.action, &mut glog);
            entropy_grad_into(&probs, &mut hgrad);
            let adv = returns[t] - values.get(g, st.state);
            let bonus = schedule.value(steps + t as u64);
            for a in 0..na {
                pgrad[o + a] += adv * glog[a] + bonus * hgrad[a];
            }
            let vi = values.index(g, st.state);
            vgrad[vi] += 2.0 * config.value_weight * (values.values()[vi] - returns[t]);
            if config.update_mode == UpdateMode::PerStep {
                padam.apply(policy.logits_mut(), &pgrad, Direction::Ascend);
                vadam.apply(values.values_mut(), &vgrad, Direction::Descend);
                pgrad.fill(0.0);
                vgrad.fill(0.0);
            }
        }
        if config.update_mode == UpdateMode::PerEpisode && !traj.is_empty() {
            padam.apply(policy.logits_mut(), &pgrad, Direction::Ascend);
            vadam.apply(values.values_mut(), &vgrad, Direction::Descend);
            pgrad.fill(0.0);
            vgrad.fill(0.0);
        }
        steps += traj.len() as u64;
        episodes.push(traj);
    }
    Ok((policy, values, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::build_nav_world;

    #[test]
    fn anneal_endpoints() {
        let s = AnnealSchedule {
            start: 0.5,
            end: 0.005,
            horizon: 1000,
        };
        assert_eq!(s.value(0), 0.5);
        assert!((s.value(1000) - 0.005).abs() < 1e-15);
        assert!((s.value(500) - 0.05).abs() < 1e-12);
        assert!((s.value(5000) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.beta = 0.1;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("regularizer"), "{msg}");
        let mut c = TrainConfig::default();
        c.entropy_end = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.total_steps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn step_budget_respected() {
        let mdp = build_nav_world();
        let cfg = TrainConfig {
            total_steps: 2_000,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut recs = Vec::new();
        let out = train_alice(&mdp, &cfg, &mut recs).unwrap();
        let last = recs.last().unwrap();
        assert_eq!(out.steps, last.steps);
        assert!(out.steps >= 2_000 && out.steps < 2_000 + 100);
        assert!(recs.windows(2).all(|w| w[1].episode == w[0].episode + 1));
    }

    #[test]
    fn wrong_regularizer_entry_points() {
        let mdp = build_nav_world();
        let cfg = TrainConfig::default();
        assert!(train_alice_action(&mdp, &cfg, &mut NullSink).is_err());
        assert!(train_alice_state(&mdp, &cfg, &mut NullSink).is_err());
    }
}

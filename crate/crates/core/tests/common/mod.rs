#![allow(dead_code)]

use goalinfo::agent::{entropy, entropy_grad_into, log_prob_grad_into, softmax_into, GoalPolicyTable, ValueTable};
use goalinfo::env::{sample_episode, GoalMdp, MdpTables};
use goalinfo::info::{
    action_credit, action_grad_step, kl_to_base, kl_value, state_credit, state_grad_step, StateCounts,
};
use goalinfo::observer::{
    episode_gradient, episode_loss, gru_backward, gru_forward, tick_gradient, GruLayout, ObserverNet,
    ObserverShape, ObserverTape, TickTerms,
};
use goalinfo::oracle::exact_occupancy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|)`, with magnitudes below `1e-6` treated as
/// `1e-6` so that values that are both near zero do not blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every coordinate of `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut w = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = w[i];
            w[i] = orig + FD_STEP;
            let fp = f(&w);
            w[i] = orig - FD_STEP;
            let fm = f(&w);
            w[i] = orig;
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn random_policy(ng: usize, ns: usize, na: usize, scale: f64, seed: u64) -> GoalPolicyTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GoalPolicyTable::from_logits(ng, ns, na, uniform_vec(&mut rng, ng * ns * na, scale))
}

// Analytic gradient checks.

pub fn check_log_softmax(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = uniform_vec(&mut rng, 5, 2.0);
    let mut worst: f64 = 0.0;
    for a in 0..5 {
        let mut p = vec![0.0; 5];
        softmax_into(&z, &mut p);
        let mut g = vec![0.0; 5];
        log_prob_grad_into(&p, a, &mut g);
        let fd = central_diff(&z, |x| {
            let mut q = vec![0.0; 5];
            softmax_into(x, &mut q);
            q[a].ln()
        });
        worst = worst.max(max_rel_err(&g, &fd));
    }
    worst
}

pub fn check_entropy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = uniform_vec(&mut rng, 5, 2.0);
    let mut p = vec![0.0; 5];
    softmax_into(&z, &mut p);
    let mut g = vec![0.0; 5];
    entropy_grad_into(&p, &mut g);
    let fd = central_diff(&z, |x| {
        let mut q = vec![0.0; 5];
        softmax_into(x, &mut q);
        entropy(&q)
    });
    max_rel_err(&g, &fd)
}

/// KL to the base policy at one state, differentiated with respect to the
/// logits of every goal at that state.
pub fn check_kl(seed: u64) -> f64 {
    let (ng, ns, na) = (3, 2, 5);
    let policy = random_policy(ng, ns, na, 1.5, seed);
    let rho = [0.2, 0.5, 0.3];
    let s = 1;
    let mut worst: f64 = 0.0;
    for g in 0..ng {
        let analytic = kl_to_base(&policy, &rho, g, s).grad;
        let rows: Vec<f64> = (0..ng).flat_map(|h| policy.row(h, s).to_vec()).collect();
        let fd = central_diff(&rows, |x| {
            let mut p = policy.clone();
            for h in 0..ng {
                p.row_mut(h, s).copy_from_slice(&x[h * na..(h + 1) * na]);
            }
            kl_value(&p, &rho, g, s)
        });
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    worst
}

/// One GRU step, loss `c * h'`, against differences in the parameters and
/// the incoming state.
pub fn check_gru(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = GruLayout { input_dim: 9 };
    let params = uniform_vec(&mut rng, layout.len(), 1.0);
    let active = [2, 7];
    let h = rng.gen_range(-0.9..0.9);
    let c = 1.7;
    let cache = gru_forward(&params, layout, &active, h);
    let mut grad = vec![0.0; params.len()];
    let dh_prev = gru_backward(&params, layout, &active, &cache, c, &mut grad);
    let fd = central_diff(&params, |p| c * gru_forward(p, layout, &active, h).h);
    let fd_h = central_diff(&[h], |x| c * gru_forward(&params, layout, &active, x[0]).h);
    max_rel_err(&grad, &fd).max(rel_err(dh_prev, fd_h[0]))
}

/// A tape of `ticks` steps built by running `net` along random observations.
pub fn random_tape(net: &ObserverNet, ticks: usize, seed: u64) -> (ObserverTape, Vec<TickTerms>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sh = net.shape;
    let mut tape = ObserverTape::default();
    let mut terms = Vec::new();
    let mut h = 0.0;
    for t in 0..ticks {
        let c = net.forward(h, rng.gen_range(0..sh.bob_states));
        tape.ticks.push(c);
        tape.actions.push(rng.gen_range(0..sh.bob_actions));
        terms.push(TickTerms {
            advantage: rng.gen_range(-1.0..1.0),
            bonus: rng.gen_range(0.0..0.5),
            target: rng.gen_range(-1.0..1.0),
            value_weight: 0.5,
        });
        if t + 1 < ticks {
            let obs = (rng.gen_range(0..sh.alice_states), rng.gen_range(0..sh.alice_actions));
            let g = net.gru_step(obs.0, obs.1, h);
            h = g.h;
            tape.gru.push(g);
            tape.obs.push(obs);
        }
    }
    (tape, terms)
}

pub fn small_observer(seed: u64) -> ObserverNet {
    let shape = ObserverShape {
        alice_states: 6,
        alice_actions: 3,
        bob_states: 4,
        bob_actions: 3,
        hidden: 8,
    };
    let mut net = ObserverNet::init(shape, &mut ChaCha8Rng::seed_from_u64(seed));
    // Larger weights than the init so the GRU chain carries real signal.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for p in &mut net.params {
        *p += rng.gen_range(-0.5..0.5);
    }
    net
}

/// Full observer backprop over a 20-tick episode against differences of the
/// episode loss. Returns the worst relative error and the largest gap
/// between the episode gradient and the sum of per-tick gradients.
pub fn check_observer(seed: u64) -> (f64, f64) {
    let net = small_observer(seed);
    let (tape, terms) = random_tape(&net, 20, seed + 1);
    let mut grad = vec![0.0; net.params.len()];
    episode_gradient(&net, &tape, &terms, &mut grad);
    let mut work = net.clone();
    let fd = central_diff(&net.params, |p| {
        work.params.copy_from_slice(p);
        episode_loss(&work, &tape, &terms)
    });
    let mut summed = vec![0.0; net.params.len()];
    for (t, &term) in terms.iter().enumerate() {
        tick_gradient(&net, &tape, t, term, &mut summed);
    }
    let gap = grad.iter().zip(&summed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (max_rel_err(&grad, &fd), gap)
}

// Monte Carlo gradient protocol.

pub const SYNTH_HORIZON: usize = 5;

/// 4 states, 2 goals, 2 actions, random stochastic transitions and entry
/// rewards, no terminal states, fixed horizon and no discounting.
pub fn synthetic_mdp(seed: u64) -> GoalMdp {
    synthetic_mdp_with(seed, 4, 2, 2, &[], 1.0, SYNTH_HORIZON)
}

/// Random MDP with the given terminal states (never initial).
pub fn synthetic_mdp_with(
    seed: u64,
    ns: usize,
    na: usize,
    ng: usize,
    terminals: &[usize],
    gamma: f64,
    horizon: usize,
) -> GoalMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transitions = (0..ns * na)
        .map(|_| random_dist(&mut rng, ns).into_iter().enumerate().collect())
        .collect();
    let terminal: Vec<bool> = (0..ns).map(|s| terminals.contains(&s)).collect();
    let mut init = random_dist(&mut rng, ns);
    for (s, p) in init.iter_mut().enumerate() {
        if terminal[s] {
            *p = 0.0;
        }
    }
    let total: f64 = init.iter().sum();
    init.iter_mut().for_each(|p| *p /= total);
    GoalMdp::new(MdpTables {
        num_states: ns,
        num_actions: na,
        num_goals: ng,
        transitions,
        goal_dist: if ng == 2 { vec![0.4, 0.6] } else { random_dist(&mut rng, ng) },
        init_dist: init,
        entry_reward: uniform_vec(&mut rng, ns * ng, 1.0),
        action_penalty: vec![0.0; ns * na],
        terminal,
        gamma,
        horizon,
    })
    .unwrap()
}

/// Counts proportional to the exact joint visitation `rho(g) d(s|g)`.
pub fn frozen_counts(mdp: &GoalMdp, policy: &GoalPolicyTable) -> StateCounts {
    let occ = exact_occupancy(mdp, policy);
    let (ng, ns) = (mdp.num_goals(), mdp.num_states());
    let table = (0..ng)
        .flat_map(|g| (0..ns).map(move |s| (g, s)))
        .map(|(g, s)| 1e6 * mdp.goal_dist()[g] * occ.d(g, s))
        .collect();
    StateCounts::from_table(ng, ns, table)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Estimator {
    Action,
    State,
}

/// Per-coordinate mean and standard error of the per-episode gradient
/// `sum_t step(t)` with no baseline.
pub fn mc_gradient(
    mdp: &GoalMdp,
    policy: &GoalPolicyTable,
    est: Estimator,
    beta: f64,
    episodes: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let rho = mdp.goal_dist().to_vec();
    let values = ValueTable::zeros(mdp.num_goals(), mdp.num_states());
    let counts = frozen_counts(mdp, policy);
    let n = policy.logits().len();
    let mut sum = vec![0.0; n];
    let mut sumsq = vec![0.0; n];
    let mut ep = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..episodes {
        let traj = sample_episode(mdp, policy, &mut rng);
        ep.fill(0.0);
        match est {
            Estimator::Action => {
                let credit = action_credit(&traj, policy, &rho, beta, mdp.gamma());
                for t in 0..traj.steps.len() {
                    action_grad_step(t, &traj, policy, &values, &rho, beta, &credit).scatter_add(policy, &mut ep);
                }
            }
            Estimator::State => {
                let credit = state_credit(&traj, policy, &counts, &rho, beta, mdp.gamma());
                for t in 0..traj.steps.len() {
                    state_grad_step(t, &traj, policy, &values, &rho, beta, &credit).scatter_add(policy, &mut ep);
                }
            }
        }
        for i in 0..n {
            sum[i] += ep[i];
            sumsq[i] += ep[i] * ep[i];
        }
    }
    let m = episodes as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let se = sumsq
        .iter()
        .zip(&mean)
        .map(|(q, mu)| ((q / m - mu * mu).max(0.0) * m / (m - 1.0) / m).sqrt())
        .collect();
    (mean, se)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Largest `|mean - target| / se` over coordinates.
pub fn max_z(mean: &[f64], se: &[f64], target: &[f64]) -> f64 {
    mean.iter()
        .zip(se)
        .zip(target)
        .map(|((m, s), t)| if *s > 0.0 { (m - t).abs() / s } else if m == t { 0.0 } else { f64::INFINITY })
        .fold(0.0, f64::max)
}

//! Experiment matrix: train every Alice, freeze her, train several Bobs
//! against each, and keep the best Bob per Alice. Cells run in parallel;
//! each cell owns its output files and the coordinator writes the manifest.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::GoalPolicyTable;
use crate::config::{derive_seed, RunConfig};
use crate::env::{build_key_world_with, build_world, Game, GoalMdp, KeyLayout, Role};
use crate::info::nats_to_bits;
use crate::observer::{BobTrainer, JointRecord};
use crate::oracle::{check_enumerable, exact_action_info, exact_mean_length, exact_state_info};
use crate::persist::{save_json, AliceSnapshot, BobSnapshot, JsonlSink, PersistError};
use crate::stats::{final_window_mean, final_window_ratio, BEATS_WINDOW, KEY_WINDOW, RELATIVE_LENGTH_WINDOW};
use crate::trainer::{AliceTrainer, EpisodeRecord, MetricsSink, TrainError};

pub const MANIFEST_VERSION: u32 = 1;

/// The Alice and Bob worlds for a run config.
pub fn worlds(cfg: &RunConfig) -> (GoalMdp, GoalMdp) {
    worlds_for(cfg.game, cfg.key_layout.as_ref())
}

/// The Alice and Bob worlds of `game`; `layout` only matters for the key game.
pub fn worlds_for(game: Game, layout: Option<&KeyLayout>) -> (GoalMdp, GoalMdp) {
    match game {
        Game::Key => {
            let default = KeyLayout::default();
            let kl = layout.unwrap_or(&default);
            (build_key_world_with(kl, Role::Alice), build_key_world_with(kl, Role::Bob))
        }
        game => (build_world(game, Role::Alice), build_world(game, Role::Bob)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliceCell {
    pub beta: f64,
    pub index: usize,
    pub seed: u64,
    pub status: String,
    pub steps: u64,
    pub episodes: u64,
    /// Exact informations of the final policy, bits.
    pub action_info_bits: Option<f64>,
    pub state_info_bits: Option<f64>,
    pub mean_length: Option<f64>,
    /// Key-pickup fractions over the final training window.
    pub master_key_fraction: f64,
    pub goal_key_fraction: f64,
}

/// Final-window joint metrics of one Bob's training stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub relative_length: f64,
    pub alice_beats_bob: f64,
    pub bob_beat_or_tie: f64,
    pub bob_return: f64,
    pub master_key: f64,
}

impl WindowSummary {
    pub fn from_records(recs: &[JointRecord]) -> Self {
        let col = |f: &dyn Fn(&JointRecord) -> f64| recs.iter().map(f).collect::<Vec<f64>>();
        let ind = |b: bool| if b { 1.0 } else { 0.0 };
        WindowSummary {
            relative_length: final_window_ratio(
                &col(&|r| r.bob_len as f64),
                &col(&|r| r.alice_len as f64),
                RELATIVE_LENGTH_WINDOW,
            ),
            alice_beats_bob: final_window_mean(&col(&|r| ind(r.alice_beats_bob)), BEATS_WINDOW),
            bob_beat_or_tie: final_window_mean(&col(&|r| ind(r.bob_beat_or_tie)), BEATS_WINDOW),
            bob_return: final_window_mean(&col(&|r| r.bob_return), BEATS_WINDOW),
            master_key: final_window_mean(
                &col(&|r| ind(r.alice_key.as_deref() == Some("master"))),
                KEY_WINDOW,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BobCell {
    pub beta: f64,
    pub alice_index: usize,
    pub index: usize,
    pub seed: u64,
    pub status: String,
    pub episodes: u64,
    pub summary: Option<WindowSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestBob {
    pub beta: f64,
    pub alice_index: usize,
    pub bob_index: usize,
    /// Selection score: final-window mean discounted Bob return.
    pub score: f64,
    pub summary: WindowSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub v: u32,
    pub game: Game,
    pub regularizer: String,
    pub betas: Vec<f64>,
    pub n_alice: usize,
    pub n_bob_per_alice: usize,
    pub seed: u64,
    pub alices: Vec<AliceCell>,
    pub bobs: Vec<BobCell>,
    pub best: Vec<BestBob>,
}

impl Manifest {
    pub fn best_for_beta(&self, beta: f64) -> Vec<&BestBob> {
        self.best.iter().filter(|b| b.beta == beta).collect()
    }

    pub fn alices_for_beta(&self, beta: f64) -> Vec<&AliceCell> {
        self.alices.iter().filter(|a| a.beta == beta).collect()
    }
}

/// Frozen Alices kept in memory so callers can inspect them.
pub struct MatrixResult {
    pub manifest: Manifest,
    pub alice_policies: Vec<Option<GoalPolicyTable>>,
}

fn cell_name(beta_index: usize, beta: f64, alice: usize) -> String {
    format!("b{beta_index}_{beta:+}_a{alice}")
}

struct CellSink<'a, R> {
    records: Vec<R>,
    file: Option<&'a mut JsonlSink>,
}

impl<R: Clone + Serialize> MetricsSink<R> for CellSink<'_, R> {
    fn record(&mut self, rec: &R) -> Result<(), TrainError> {
        if let Some(f) = self.file.as_deref_mut() {
            f.record(rec)?;
        }
        self.records.push(rec.clone());
        Ok(())
    }
}

fn open_sink(out: Option<&Path>, rel: &str, run_id: &str) -> Result<Option<JsonlSink>, PersistError> {
    out.map(|dir| JsonlSink::create(&dir.join(rel).join("metrics.jsonl"), run_id))
        .transpose()
}

fn run_alice(
    cfg: &RunConfig,
    mdp: &GoalMdp,
    beta_index: usize,
    beta: f64,
    index: usize,
    out: Option<&Path>,
) -> (AliceCell, Option<GoalPolicyTable>) {
    let seed = derive_seed(cfg.seed, &[0, beta_index as u64, index as u64]);
    let tc = cfg.alice_for_beta(beta, seed);
    let mut cell = AliceCell {
        beta,
        index,
        seed,
        status: "ok".into(),
        steps: 0,
        episodes: 0,
        action_info_bits: None,
        state_info_bits: None,
        mean_length: None,
        master_key_fraction: 0.0,
        goal_key_fraction: 0.0,
    };
    let name = format!("alices/{}", cell_name(beta_index, beta, index));
    let result = (|| -> Result<GoalPolicyTable, String> {
        let mut file = open_sink(out, &name, &name).map_err(|e| e.to_string())?;
        let mut sink: CellSink<EpisodeRecord> = CellSink {
            records: Vec::new(),
            file: file.as_mut(),
        };
        let mut trainer = AliceTrainer::new(mdp, tc.clone()).map_err(|e| e.to_string())?;
        trainer.run(&mut sink).map_err(|e| e.to_string())?;
        let frac = |label: &str| {
            let xs: Vec<f64> = sink
                .records
                .iter()
                .map(|r| if r.key.as_deref() == Some(label) { 1.0 } else { 0.0 })
                .collect();
            final_window_mean(&xs, KEY_WINDOW)
        };
        cell.master_key_fraction = frac("master");
        cell.goal_key_fraction = frac("goal");
        let state = trainer.into_state();
        cell.steps = state.steps;
        cell.episodes = state.episodes;
        if check_enumerable(mdp).is_ok() {
            let frozen = mdp.clone().with_gamma(tc.gamma).and_then(|m| m.with_horizon(tc.max_episode_len));
            if let Ok(m) = frozen {
                cell.action_info_bits = Some(nats_to_bits(exact_action_info(&m, &state.policy)));
                cell.state_info_bits = Some(nats_to_bits(exact_state_info(&m, &state.policy)));
                cell.mean_length = Some(exact_mean_length(&m, &state.policy));
            }
        }
        let policy = state.policy.clone();
        if let Some(dir) = out {
            save_json(
                &dir.join(&name).join("snapshot.json"),
                &AliceSnapshot::new(cfg.game, tc.clone(), state),
            )
            .map_err(|e| e.to_string())?;
        }
        Ok(policy)
    })();
    match result {
        Ok(p) => (cell, Some(p)),
        Err(e) => {
            cell.status = format!("failed: {e}");
            (cell, None)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_bob(
    cfg: &RunConfig,
    alice: &GoalPolicyTable,
    alice_mdp: &GoalMdp,
    bob_mdp: &GoalMdp,
    beta_index: usize,
    beta: f64,
    alice_index: usize,
    index: usize,
    out: Option<&Path>,
) -> BobCell {
    let seed = derive_seed(cfg.seed, &[1, beta_index as u64, alice_index as u64, index as u64]);
    let bc = crate::observer::BobConfig {
        seed,
        ..cfg.bob.clone()
    };
    let mut cell = BobCell {
        beta,
        alice_index,
        index,
        seed,
        status: "ok".into(),
        episodes: 0,
        summary: None,
    };
    let name = format!("bobs/{}_b{index}", cell_name(beta_index, beta, alice_index));
    let result = (|| -> Result<(), String> {
        let mut file = open_sink(out, &name, &name).map_err(|e| e.to_string())?;
        let mut sink: CellSink<JointRecord> = CellSink {
            records: Vec::new(),
            file: file.as_mut(),
        };
        let mut trainer = BobTrainer::new(alice, alice_mdp, bob_mdp, bc.clone()).map_err(|e| e.to_string())?;
        trainer.run(&mut sink).map_err(|e| e.to_string())?;
        cell.summary = Some(WindowSummary::from_records(&sink.records));
        let state = trainer.into_state();
        cell.episodes = state.episodes;
        if let Some(dir) = out {
            save_json(
                &dir.join(&name).join("snapshot.json"),
                &BobSnapshot::new(cfg.game, bc.clone(), alice.clone(), state),
            )
            .map_err(|e| e.to_string())?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        cell.status = format!("failed: {e}");
    }
    cell
}

/// Runs the full matrix described by `cfg.matrix`. Per-cell failures are
/// recorded in the manifest and do not stop the other cells.
pub fn run_experiment_matrix(cfg: &RunConfig, out: Option<&Path>) -> Result<MatrixResult, PersistError> {
    let (alice_mdp, bob_mdp) = worlds(cfg);
    let m = &cfg.matrix;
    let alice_jobs: Vec<(usize, f64, usize)> = m
        .betas
        .iter()
        .enumerate()
        .flat_map(|(bi, &b)| (0..m.n_alice).map(move |i| (bi, b, i)))
        .collect();
    let alices: Vec<(AliceCell, Option<GoalPolicyTable>)> = alice_jobs
        .par_iter()
        .map(|&(bi, b, i)| run_alice(cfg, &alice_mdp, bi, b, i, out))
        .collect();

    let bob_jobs: Vec<(usize, usize)> = (0..alices.len())
        .flat_map(|ai| (0..m.n_bob_per_alice).map(move |j| (ai, j)))
        .collect();
    let bobs: Vec<BobCell> = bob_jobs
        .par_iter()
        .filter_map(|&(ai, j)| {
            let (bi, b, i) = alice_jobs[ai];
            let policy = alices[ai].1.as_ref()?;
            Some(run_bob(cfg, policy, &alice_mdp, &bob_mdp, bi, b, i, j, out))
        })
        .collect();

    let mut best = Vec::new();
    for &(_, beta, i) in &alice_jobs {
        let chosen = bobs
            .iter()
            .filter(|c| c.beta == beta && c.alice_index == i)
            .filter_map(|c| c.summary.map(|s| (c.index, s)))
            .filter(|(_, s)| s.bob_return.is_finite())
            .max_by(|x, y| x.1.bob_return.total_cmp(&y.1.bob_return));
        if let Some((j, s)) = chosen {
            best.push(BestBob {
                beta,
                alice_index: i,
                bob_index: j,
                score: s.bob_return,
                summary: s,
            });
        }
    }

    let (alice_cells, alice_policies): (Vec<_>, Vec<_>) = alices.into_iter().unzip();
    let manifest = Manifest {
        v: MANIFEST_VERSION,
        game: cfg.game,
        regularizer: m.regularizer.name().into(),
        betas: m.betas.clone(),
        n_alice: m.n_alice,
        n_bob_per_alice: m.n_bob_per_alice,
        seed: cfg.seed,
        alices: alice_cells,
        bobs,
        best,
    };
    if let Some(dir) = out {
        save_json(&dir.join("manifest.json"), &manifest)?;
        for b in &manifest.best {
            let bi = m.betas.iter().position(|&x| x == b.beta).unwrap_or(0);
            let from = dir
                .join("bobs")
                .join(format!("{}_b{}", cell_name(bi, b.beta, b.alice_index), b.bob_index))
                .join("metrics.jsonl");
            let to: PathBuf = dir
                .join("best")
                .join(format!("{}.jsonl", cell_name(bi, b.beta, b.alice_index)));
            if let Some(parent) = to.parent() {
                std::fs::create_dir_all(parent).map_err(|source| PersistError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            std::fs::copy(&from, &to).map_err(|source| PersistError::Io { path: from.clone(), source })?;
        }
    }
    Ok(MatrixResult {
        manifest,
        alice_policies,
    })
}

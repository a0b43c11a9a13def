use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use goalinfo::config::RunConfig;
use goalinfo::env::{GoalMdp, KeyLayout, Role};
use goalinfo::info::{estimate_info_empirical, nats_to_bits, CountOptions};
use goalinfo::matrix::{run_experiment_matrix, worlds, worlds_for};
use goalinfo::observer::{joint_evaluate, BobTrainer, GoalAwareBob, JointRecord, NetBob};
use goalinfo::oracle::{check_enumerable, exact_action_info, exact_state_info};
use goalinfo::persist::{
    load_snapshot, save_json, write_export, AliceSnapshot, BobSnapshot, JsonlSink, Snapshot,
};
use goalinfo::trainer::{AliceTrainer, EpisodeRecord, MetricsSink, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "goalinfo", version, about = "Train and analyse goal-information regularized agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset the config is layered over.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the step budget (Alice and Bob).
    #[arg(long)]
    steps: Option<u64>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Empirical,
    Exact,
}

#[derive(Subcommand)]
enum Command {
    /// Train one Alice, or one Bob against a saved Alice.
    Train(ConfigArgs),
    /// Run the Alice x Bob experiment matrix.
    Matrix(ConfigArgs),
    /// Report I_action and I_state of a snapshot's Alice policy.
    EstimateInfo {
        snapshot: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        mode: Mode,
        /// Minimum rollout steps in empirical mode.
        #[arg(long, default_value_t = 100_000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config supplying a custom key layout.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write policy, KL and visitation CSVs for a snapshot.
    Export {
        snapshot: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Play frozen joint episodes with a Bob snapshot.
    Evaluate {
        snapshot: PathBuf,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace the trained Bob with one that knows the goal.
        #[arg(long)]
        goal_aware: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None if args.preset.is_some() => String::new(),
        None => bail!("either --config or --preset is required"),
    };
    let mut cfg = RunConfig::from_toml(&text, args.preset.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.alice.seed = seed;
        cfg.bob.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(steps) = args.steps {
        cfg.alice.total_steps = steps;
        cfg.bob.total_steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn layout_from(config: Option<&Path>) -> Result<Option<KeyLayout>> {
    let Some(p) = config else { return Ok(None) };
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(RunConfig::from_toml(&text, None)?.key_layout)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().ok_or_else(|| anyhow!("no output directory (set out_dir or --out)"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

/// Runs episodes until the budget is spent, snapshotting every
/// `every` episodes. On failure the current state is written to
/// `diagnostic.json` before the error is returned.
fn drive<R>(
    dir: &Path,
    every: Option<u64>,
    sink: &mut JsonlSink,
    mut step: impl FnMut() -> Result<Option<R>, TrainError>,
    mut save: impl FnMut(&Path) -> Result<()>,
    episodes: impl Fn() -> u64,
) -> Result<()>
where
    JsonlSink: MetricsSink<R>,
{
    loop {
        match step() {
            Ok(Some(rec)) => {
                sink.record(&rec)?;
                if every.is_some_and(|k| episodes() % k == 0) {
                    save(&dir.join("snapshots").join(format!("ep{}.json", episodes())))?;
                }
            }
            Ok(None) => break,
            Err(e) => {
                let diag = dir.join("diagnostic.json");
                save(&diag)?;
                bail!("training aborted: {e} (state written to {})", diag.display());
            }
        }
    }
    save(&dir.join("snapshot.json"))
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let dir = out_dir(&cfg)?;
    let (alice_mdp, bob_mdp) = worlds(&cfg);
    let run_id = format!("{:?}-{:?}-{}", cfg.game, cfg.role, cfg.seed).to_lowercase();
    let mut sink = JsonlSink::create(&dir.join("metrics.jsonl"), &run_id)?;
    match cfg.role {
        Role::Alice => {
            let trainer = std::cell::RefCell::new(AliceTrainer::new(&alice_mdp, cfg.alice.clone())?);
            drive::<EpisodeRecord>(
                &dir,
                cfg.snapshot_every,
                &mut sink,
                || {
                    let mut t = trainer.borrow_mut();
                    if t.is_done() {
                        Ok(None)
                    } else {
                        t.train_episode().map(Some)
                    }
                },
                |p| {
                    let t = trainer.borrow();
                    let snap = AliceSnapshot::new(cfg.game, cfg.alice.clone(), t.state().clone());
                    Ok(save_json(p, &snap)?)
                },
                || trainer.borrow().state().episodes,
            )?;
            let t = trainer.borrow();
            println!(
                "alice: {} episodes, {} steps; I_action {:.4} bits, I_state {:.4} bits (running estimates)",
                t.state().episodes,
                t.state().steps,
                t.state().estimate.action_bits(),
                t.state().estimate.state_bits(),
            );
        }
        Role::Bob => {
            let path = cfg
                .alice_snapshot
                .as_ref()
                .ok_or_else(|| anyhow!("training Bob needs alice_snapshot in the config"))?;
            let snap = load_snapshot(path)?;
            if snap.game() != cfg.game {
                bail!("alice_snapshot is for the {:?} game, config says {:?}", snap.game(), cfg.game);
            }
            let alice = snap.alice_policy().clone();
            let trainer = std::cell::RefCell::new(BobTrainer::new(&alice, &alice_mdp, &bob_mdp, cfg.bob.clone())?);
            drive::<JointRecord>(
                &dir,
                cfg.snapshot_every,
                &mut sink,
                || {
                    let mut t = trainer.borrow_mut();
                    if t.state().steps >= t.config().total_steps {
                        Ok(None)
                    } else {
                        t.train_episode().map(Some)
                    }
                },
                |p| {
                    let t = trainer.borrow();
                    let snap = BobSnapshot::new(cfg.game, cfg.bob.clone(), alice.clone(), t.state().clone());
                    Ok(save_json(p, &snap)?)
                },
                || trainer.borrow().state().episodes,
            )?;
            let t = trainer.borrow();
            println!("bob: {} episodes, {} steps", t.state().episodes, t.state().steps);
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_matrix(args: &ConfigArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let dir = out_dir(&cfg)?;
    let result = run_experiment_matrix(&cfg, Some(&dir))?;
    let m = &result.manifest;
    let failed = m.alices.iter().filter(|a| a.status != "ok").count() + m.bobs.iter().filter(|b| b.status != "ok").count();
    for b in &m.best {
        println!(
            "beta {:+} alice {}: best bob {} (return {:.4}, relative length {:.3}, alice beats bob {:.3})",
            b.beta, b.alice_index, b.bob_index, b.score, b.summary.relative_length, b.summary.alice_beats_bob
        );
    }
    println!(
        "{} alices, {} bobs, {} best selections, {failed} failed cells; manifest in {}",
        m.alices.len(),
        m.bobs.len(),
        m.best.len(),
        dir.join("manifest.json").display()
    );
    Ok(())
}

fn snapshot_world(snap: &Snapshot, layout: Option<&KeyLayout>) -> Result<(GoalMdp, GoalMdp)> {
    let (alice, bob) = worlds_for(snap.game(), layout);
    let (gamma, horizon) = match snap {
        Snapshot::Alice(a) => (a.config.gamma, a.config.max_episode_len),
        Snapshot::Bob(b) => (b.config.gamma, b.config.max_episode_len),
    };
    let alice = alice.with_gamma(gamma)?.with_horizon(horizon)?;
    let bob = bob.with_gamma(gamma)?.with_horizon(horizon)?;
    Ok((alice, bob))
}

fn cmd_estimate_info(snapshot: &Path, mode: Mode, steps: u64, seed: u64, config: Option<&Path>) -> Result<()> {
    let snap = load_snapshot(snapshot)?;
    let (mdp, _) = snapshot_world(&snap, layout_from(config)?.as_ref())?;
    let policy = snap.alice_policy();
    let (action, state, label) = match mode {
        Mode::Exact => {
            check_enumerable(&mdp).map_err(|e| anyhow!("exact mode refused: {e}"))?;
            (exact_action_info(&mdp, policy), exact_state_info(&mdp, policy), "exact".to_string())
        }
        Mode::Empirical => {
            let opts = match &snap {
                Snapshot::Alice(a) => CountOptions {
                    include_terminal: a.config.count_terminal,
                    decay: None,
                },
                Snapshot::Bob(_) => CountOptions::default(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = estimate_info_empirical(&mdp, policy, steps, opts, &mut rng);
            (
                est.action_nats,
                est.state_nats,
                format!("empirical ({} episodes, {} steps)", est.episodes, est.steps),
            )
        }
    };
    println!("mode: {label}");
    println!("I_action: {:.6} bits ({:.6} nats)", nats_to_bits(action), action);
    println!("I_state: {:.6} bits ({:.6} nats)", nats_to_bits(state), state);
    Ok(())
}

fn cmd_export(snapshot: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let snap = load_snapshot(snapshot)?;
    let (mdp, _) = snapshot_world(&snap, layout_from(config)?.as_ref())?;
    let counts = match &snap {
        Snapshot::Alice(a) => Some(&a.state.counts),
        Snapshot::Bob(_) => None,
    };
    let manifest = write_export(out, snap.game(), &mdp, snap.alice_policy(), counts)?;
    println!(
        "exported {} goals x {} states to {} ({})",
        manifest.num_goals,
        manifest.num_states,
        out.display(),
        manifest.files.join(", ")
    );
    Ok(())
}

fn cmd_evaluate(snapshot: &Path, episodes: usize, seed: u64, goal_aware: bool, config: Option<&Path>) -> Result<()> {
    let snap = load_snapshot(snapshot)?;
    let (alice_mdp, bob_mdp) = snapshot_world(&snap, layout_from(config)?.as_ref())?;
    let summary = match (&snap, goal_aware) {
        (_, true) => {
            let mut bob = GoalAwareBob::new(&bob_mdp);
            joint_evaluate(snap.alice_policy(), &alice_mdp, &mut bob, &bob_mdp, episodes, seed).1
        }
        (Snapshot::Bob(b), false) => {
            let mut bob = NetBob::new(&b.state.net, false);
            joint_evaluate(&b.alice, &alice_mdp, &mut bob, &bob_mdp, episodes, seed).1
        }
        (Snapshot::Alice(_), false) => bail!("evaluate needs a Bob snapshot (or --goal-aware)"),
    };
    println!("{}", serde_json::to_string_pretty(&json!({ "summary": summary }))?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Matrix(a) => cmd_matrix(&a),
        Command::EstimateInfo {
            snapshot,
            mode,
            steps,
            seed,
            config,
        } => cmd_estimate_info(&snapshot, mode, steps, seed, config.as_deref()),
        Command::Export { snapshot, out, config } => cmd_export(&snapshot, &out, config.as_deref()),
        Command::Evaluate {
            snapshot,
            episodes,
            seed,
            goal_aware,
            config,
        } => cmd_evaluate(&snapshot, episodes, seed, goal_aware, config.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Snapshots, JSON-lines metrics streams and the CSV export bundle.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::GoalPolicyTable;
use crate::env::{Game, GoalMdp, Move, Role};
use crate::info::{emp_ratios, kl_value, nats_to_bits, StateCounts};
use crate::observer::{BobConfig, BobState};
use crate::oracle::{check_enumerable, exact_occupancy};
use crate::trainer::{AliceState, MetricsSink, TrainConfig, TrainError};

pub const SNAPSHOT_VERSION: u32 = 1;
pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything needed to resume or inspect an Alice run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliceSnapshot {
    pub v: u32,
    pub kind: String,
    pub game: Game,
    pub config: TrainConfig,
    pub state: AliceState,
}

impl AliceSnapshot {
    pub fn new(game: Game, config: TrainConfig, state: AliceState) -> Self {
        AliceSnapshot {
            v: SNAPSHOT_VERSION,
            kind: "alice".into(),
            game,
            config,
            state,
        }
    }
}

/// A Bob run together with the frozen Alice he was trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BobSnapshot {
    pub v: u32,
    pub kind: String,
    pub game: Game,
    pub config: BobConfig,
    pub alice: GoalPolicyTable,
    pub state: BobState,
}

impl BobSnapshot {
    pub fn new(game: Game, config: BobConfig, alice: GoalPolicyTable, state: BobState) -> Self {
        BobSnapshot {
            v: SNAPSHOT_VERSION,
            kind: "bob".into(),
            game,
            config,
            alice,
            state,
        }
    }
}

/// Either kind of snapshot, told apart by its `kind` field.
#[derive(Debug, Clone, PartialEq)]
pub enum Snapshot {
    Alice(AliceSnapshot),
    Bob(BobSnapshot),
}

impl Snapshot {
    pub fn game(&self) -> Game {
        match self {
            Snapshot::Alice(a) => a.game,
            Snapshot::Bob(b) => b.game,
        }
    }

    /// Alice's policy: the trained one, or the frozen one inside a Bob
    /// snapshot.
    pub fn alice_policy(&self) -> &GoalPolicyTable {
        match self {
            Snapshot::Alice(a) => &a.state.policy,
            Snapshot::Bob(b) => &b.alice,
        }
    }

    pub fn role(&self) -> Role {
        match self {
            Snapshot::Alice(_) => Role::Alice,
            Snapshot::Bob(_) => Role::Bob,
        }
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PersistError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value).map_err(|e| PersistError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, PersistError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PersistError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn load_snapshot(path: &Path) -> Result<Snapshot, PersistError> {
    let raw: serde_json::Value = load_json(path)?;
    let fail = |msg: String| PersistError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let v = raw.get("v").and_then(|v| v.as_u64());
    if v != Some(SNAPSHOT_VERSION as u64) {
        return Err(fail(format!("unsupported snapshot version {v:?}")));
    }
    match raw.get("kind").and_then(|k| k.as_str()) {
        Some("alice") => serde_json::from_value(raw).map(Snapshot::Alice),
        Some("bob") => serde_json::from_value(raw).map(Snapshot::Bob),
        other => return Err(fail(format!("unknown snapshot kind {other:?}"))),
    }
    .map_err(|e| fail(e.to_string()))
}

#[derive(Serialize)]
struct Tagged<'a, R> {
    run_id: &'a str,
    #[serde(flatten)]
    rec: &'a R,
}

/// Append-only JSON-lines sink. Each record is tagged with the run id and
/// flushed as it is written, so an aborted run loses nothing already
/// reported.
pub struct JsonlSink {
    run_id: String,
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path, run_id: &str) -> Result<Self, PersistError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = File::create(path).map_err(io_err(path))?;
        Ok(JsonlSink {
            run_id: run_id.to_string(),
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<R: Serialize> MetricsSink<R> for JsonlSink {
    fn record(&mut self, rec: &R) -> Result<(), TrainError> {
        let line = serde_json::to_string(&Tagged {
            run_id: &self.run_id,
            rec,
        })
        .map_err(|e| TrainError::Sink(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| TrainError::Sink(format!("{}: {e}", self.path.display())))
    }
}

/// Reads every record of a JSON-lines file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PersistError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PersistError::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub v: u32,
    pub game: Game,
    pub num_goals: usize,
    pub num_states: usize,
    pub actions: Vec<String>,
    pub files: Vec<String>,
    /// Where the visitation log-ratios come from.
    pub visitation_source: String,
}

#[derive(Serialize)]
struct PolicyRow {
    goal: usize,
    state: usize,
    x: Option<usize>,
    y: Option<usize>,
    key: Option<usize>,
    terminal: bool,
    p_left: f64,
    p_right: f64,
    p_up: f64,
    p_down: f64,
    p_stay: f64,
}

#[derive(Serialize)]
struct KlRow {
    goal: usize,
    state: usize,
    x: Option<usize>,
    y: Option<usize>,
    key: Option<usize>,
    terminal: bool,
    kl_bits: f64,
}

#[derive(Serialize)]
struct VisitRow {
    goal: usize,
    state: usize,
    x: Option<usize>,
    y: Option<usize>,
    key: Option<usize>,
    terminal: bool,
    visitation: f64,
    log_ratio_bits: Option<f64>,
    log_ratio_counts_bits: Option<f64>,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> PersistError + '_ {
    move |e| PersistError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Writes `policy.csv`, `kl.csv`, `visitation.csv` and `manifest.json` into
/// `dir`. Visitation uses the exact oracle; the count-based log ratio column
/// is filled when `counts` is given.
pub fn write_export(
    dir: &Path,
    game: Game,
    mdp: &GoalMdp,
    policy: &GoalPolicyTable,
    counts: Option<&StateCounts>,
) -> Result<ExportManifest, PersistError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    if mdp.num_actions() != Move::ALL.len() {
        return Err(PersistError::Format {
            path: dir.to_path_buf(),
            msg: "export expects the five grid actions".into(),
        });
    }
    let (ng, ns) = (mdp.num_goals(), mdp.num_states());
    let rho = mdp.goal_dist();
    let loc = |s: usize| match mdp.layout() {
        Some(l) => {
            let (p, k) = l.decode(s);
            (Some(p.x), Some(p.y), (l.key_states > 1).then_some(k.index()))
        }
        None => (None, None, None),
    };
    let occ = check_enumerable(mdp).ok().map(|_| exact_occupancy(mdp, policy));
    let marginal = occ.as_ref().map(|o| o.marginal(rho));

    let ppath = dir.join("policy.csv");
    let kpath = dir.join("kl.csv");
    let vpath = dir.join("visitation.csv");
    let mut pw = csv::Writer::from_path(&ppath).map_err(csv_err(&ppath))?;
    let mut kw = csv::Writer::from_path(&kpath).map_err(csv_err(&kpath))?;
    let mut vw = csv::Writer::from_path(&vpath).map_err(csv_err(&vpath))?;
    for g in 0..ng {
        for s in 0..ns {
            let (x, y, key) = loc(s);
            let terminal = mdp.is_terminal(s);
            let p = policy.action_probs(g, s);
            pw.serialize(PolicyRow {
                goal: g,
                state: s,
                x,
                y,
                key,
                terminal,
                p_left: p[Move::Left.index()],
                p_right: p[Move::Right.index()],
                p_up: p[Move::Up.index()],
                p_down: p[Move::Down.index()],
                p_stay: p[Move::Stay.index()],
            })
            .map_err(csv_err(&ppath))?;
            kw.serialize(KlRow {
                goal: g,
                state: s,
                x,
                y,
                key,
                terminal,
                kl_bits: nats_to_bits(kl_value(policy, rho, g, s)),
            })
            .map_err(csv_err(&kpath))?;
            let (visitation, log_ratio_bits) = match (&occ, &marginal) {
                (Some(o), Some(m)) => {
                    let d = o.d(g, s);
                    let lr = (d > 0.0 && m[s] > 0.0).then(|| nats_to_bits((d / m[s]).ln()));
                    (d, lr)
                }
                _ => (f64::NAN, None),
            };
            let log_ratio_counts_bits = counts
                .filter(|_| !terminal)
                .map(|c| nats_to_bits(emp_ratios(c, rho, g, s).log_ratio));
            vw.serialize(VisitRow {
                goal: g,
                state: s,
                x,
                y,
                key,
                terminal,
                visitation,
                log_ratio_bits,
                log_ratio_counts_bits,
            })
            .map_err(csv_err(&vpath))?;
        }
    }
    for (w, p) in [(&mut pw, &ppath), (&mut kw, &kpath), (&mut vw, &vpath)] {
        w.flush().map_err(io_err(p))?;
    }
    let manifest = ExportManifest {
        v: EXPORT_VERSION,
        game,
        num_goals: ng,
        num_states: ns,
        actions: Move::ALL.iter().map(|m| m.name().to_string()).collect(),
        files: vec!["policy.csv".into(), "kl.csv".into(), "visitation.csv".into()],
        visitation_source: if occ.is_some() { "exact" } else { "none" }.into(),
    };
    save_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

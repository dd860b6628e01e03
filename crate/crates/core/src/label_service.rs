//! Human labeling sessions.
//!
//! A session shows a participant a fixed plan of robot traces. The first
//! trace comes without messages; each later trace adds one more message
//! from a per-session random order. Every event is appended to a JSONL
//! journal (one file per session) and flushed before it is acknowledged,
//! so a store can be rebuilt from its directory.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domains::{shipped, DomainSpec};
use crate::error::{Error, Result};
use crate::harness::{Dataset, DatasetHeader};
use crate::mdp::{sample_categorical, sample_trajectory_with, Trajectory};
use crate::reconciliation::SolvedModel;
use crate::sim_user::{LabeledTransition, MessageMask};

pub const PAYLOAD_VERSION: u32 = 1;
pub const DEFAULT_TRACES: usize = 8;
pub const DEFAULT_TRACE_LEN: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("expected label for transition {expected}, got {got}")]
    Conflict { expected: usize, got: usize },
    #[error("transition {0} was already labeled differently")]
    Relabel(usize),
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(u8),
    #[error("the pretest has not been passed")]
    PretestRequired,
    #[error("session is finished")]
    Finished,
    #[error("invalid request: {0}")]
    BadRequest(String),
}

/// Instruction facts checked before labeling starts, with the expected
/// answer.
pub const PRETEST_FACTS: &[(&str, &str, bool)] = &[
    ("racks_block", "The robot cannot move through racks.", true),
    ("grey_slip", "The robot may slip and stay in place on grey cells.", true),
    (
        "station_every_step",
        "The robot must visit station #1 after every move.",
        false,
    ),
    ("shortest_route", "Otherwise the robot takes the shortest route.", true),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretestRecord {
    pub participant: String,
    pub answers: BTreeMap<String, bool>,
    pub passed: bool,
}

impl PretestRecord {
    pub fn grade(participant: &str, answers: BTreeMap<String, bool>) -> Self {
        let passed = PRETEST_FACTS
            .iter()
            .all(|(id, _, expected)| answers.get(*id) == Some(expected));
        PretestRecord {
            participant: participant.to_string(),
            answers,
            passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedTrace {
    pub trace: Trajectory,
    /// Active message ids in display order.
    pub messages: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    PretestRequired,
    Active,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub domain: String,
    pub participant: String,
    pub seed: u64,
    pub plan: Vec<PlannedTrace>,
    pub labels: Vec<LabeledTransition>,
    pub pretest: Option<PretestRecord>,
}

impl Session {
    pub fn n_transitions(&self) -> usize {
        self.plan.iter().map(|p| p.trace.len()).sum()
    }

    /// Index of the next transition to label.
    pub fn cursor(&self) -> usize {
        self.labels.len()
    }

    pub fn status(&self) -> Status {
        if !self.pretest.as_ref().is_some_and(|p| p.passed) {
            Status::PretestRequired
        } else if self.cursor() >= self.n_transitions() {
            Status::Finished
        } else {
            Status::Active
        }
    }

    /// (trace, step) of a flat transition index.
    pub fn locate(&self, index: usize) -> Option<(usize, usize)> {
        let mut rest = index;
        for (t, p) in self.plan.iter().enumerate() {
            if rest < p.trace.len() {
                return Some((t, rest));
            }
            rest -= p.trace.len();
        }
        None
    }

    /// Labeled rows from the first (message-free) trace.
    pub fn first_trace_rows(&self) -> &[LabeledTransition] {
        let n = self.plan.first().map_or(0, |p| p.trace.len());
        &self.labels[..n.min(self.labels.len())]
    }
}

/// Deterministic session plan: traces sampled from the robot's greedy
/// policy, cumulative message disclosure in a seeded random order.
pub fn plan_session(
    spec: &DomainSpec,
    robot: &SolvedModel,
    n_traces: usize,
    max_len: usize,
    seed: u64,
) -> Vec<PlannedTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = robot.policy();
    let mut order: Vec<String> = spec.messages().iter().map(|m| m.id.clone()).collect();
    order.shuffle(&mut rng);
    (0..n_traces)
        .map(|i| {
            let mut trace = Trajectory::empty(0);
            // skip draws that start in a terminal state
            for _ in 0..100 {
                let start = sample_categorical(robot.mdp.initial(), &mut rng);
                trace = sample_trajectory_with(&robot.mdp, &policy, start, max_len, &mut rng);
                if !trace.is_empty() {
                    break;
                }
            }
            PlannedTrace {
                trace,
                messages: order[..i.min(order.len())].to_vec(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum JournalEvent {
    Created { session: Session },
    Pretest { record: PretestRecord },
    Label { index: usize, row: LabeledTransition },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPayload {
    pub x: usize,
    pub y: usize,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPayload {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<CellPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessagePayload {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionPayload {
    pub index: usize,
    pub trace: usize,
    pub step: usize,
    pub from: Vec<i64>,
    pub action: String,
    pub to: Vec<i64>,
    /// The robot stayed in place after a move.
    pub stayed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextPayload {
    pub version: u32,
    pub session_id: String,
    pub status: Status,
    pub n_traces: usize,
    pub n_transitions: usize,
    pub feature_names: Vec<String>,
    pub grid: GridPayload,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transition: Option<TransitionPayload>,
    /// Feature vectors of every state in the current trace.
    pub trace_states: Vec<Vec<i64>>,
    pub messages: Vec<MessagePayload>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub pretest: Vec<PretestQuestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretestQuestion {
    pub id: String,
    pub statement: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAck {
    pub index: usize,
    pub next_index: usize,
    /// The label had already been recorded.
    pub replay: bool,
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExportFilter {
    #[default]
    None,
    /// Drop participants who found nothing inexplicable in the first trace.
    FirstTrace,
}

struct Domain {
    spec: Arc<DomainSpec>,
    robot: SolvedModel,
}

/// Sessions backed by a journal directory.
pub struct SessionStore {
    dir: PathBuf,
    n_traces: usize,
    trace_len: usize,
    domains: Mutex<HashMap<String, Arc<Domain>>>,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Session>>>>,
}

impl SessionStore {
    /// Opens (creating if needed) a journal directory and replays it.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let store = SessionStore {
            dir,
            n_traces: DEFAULT_TRACES,
            trace_len: DEFAULT_TRACE_LEN,
            domains: Mutex::new(HashMap::new()),
            sessions: Mutex::new(BTreeMap::new()),
        };
        store.replay()?;
        Ok(store)
    }

    pub fn with_plan_size(mut self, n_traces: usize, trace_len: usize) -> Self {
        self.n_traces = n_traces;
        self.trace_len = trace_len;
        self
    }

    fn replay(&self) -> Result<()> {
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut sessions = self.sessions.lock().expect("sessions lock");
        for path in paths {
            let mut session: Option<Session> = None;
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match (serde_json::from_str::<JournalEvent>(&line)?, session.as_mut()) {
                    (JournalEvent::Created { session: s }, None) => session = Some(s),
                    (JournalEvent::Pretest { record }, Some(s)) => s.pretest = Some(record),
                    (JournalEvent::Label { index, row }, Some(s)) if index == s.labels.len() => s.labels.push(row),
                    _ => {
                        return Err(Error::SchemaMismatch(format!("corrupt journal {}", path.display())));
                    }
                }
            }
            if let Some(s) = session {
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(())
    }

    fn domain(&self, name: &str) -> Result<Arc<Domain>> {
        let mut domains = self.domains.lock().expect("domains lock");
        if let Some(d) = domains.get(name) {
            return Ok(d.clone());
        }
        let spec = shipped(name).map_err(|_| SessionError::UnknownDomain(name.to_string()))?;
        let robot = SolvedModel::new(&spec, spec.robot_params())?;
        let d = Arc::new(Domain {
            spec: Arc::new(spec),
            robot,
        });
        domains.insert(name.to_string(), d.clone());
        Ok(d)
    }

    fn journal_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    fn append(&self, id: &str, event: &JournalEvent) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.journal_path(id))?;
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()).into())
    }

    /// Same (domain, participant, seed) gives the same session.
    pub fn create_session(&self, domain: &str, participant: &str, seed: u64) -> Result<Session> {
        if participant.is_empty() {
            return Err(SessionError::BadRequest("participant id is empty".into()).into());
        }
        let d = self.domain(domain)?;
        let id = session_id(domain, participant, seed);
        let mut sessions = self.sessions.lock().expect("sessions lock");
        if let Some(s) = sessions.get(&id) {
            return Ok(s.lock().expect("session lock").clone());
        }
        let session = Session {
            id: id.clone(),
            domain: domain.to_string(),
            participant: participant.to_string(),
            seed,
            plan: plan_session(&d.spec, &d.robot, self.n_traces, self.trace_len, seed),
            labels: Vec::new(),
            pretest: None,
        };
        self.append(
            &id,
            &JournalEvent::Created {
                session: session.clone(),
            },
        )?;
        sessions.insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Result<Session> {
        Ok(self.session(id)?.lock().expect("session lock").clone())
    }

    pub fn list(&self) -> Vec<String> {
        self.sessions.lock().expect("sessions lock").keys().cloned().collect()
    }

    pub fn submit_pretest(&self, id: &str, answers: BTreeMap<String, bool>) -> Result<PretestRecord> {
        let handle = self.session(id)?;
        let mut s = handle.lock().expect("session lock");
        if s.pretest.as_ref().is_some_and(|p| p.passed) {
            return Ok(s.pretest.clone().expect("checked"));
        }
        let record = PretestRecord::grade(&s.participant, answers);
        self.append(id, &JournalEvent::Pretest { record: record.clone() })?;
        s.pretest = Some(record.clone());
        Ok(record)
    }

    /// The current transition with everything the UI needs to render it.
    pub fn next(&self, id: &str) -> Result<NextPayload> {
        let s = self.get(id)?;
        let d = self.domain(&s.domain)?;
        let spec = &d.spec;
        let grid = spec.grid();
        let cells = spec
            .layout()
            .cells
            .iter()
            .map(|c| CellPayload {
                x: c.x,
                y: c.y,
                kind: serde_json::to_value(c.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
            })
            .collect();
        let status = s.status();
        let mut payload = NextPayload {
            version: PAYLOAD_VERSION,
            session_id: s.id.clone(),
            status,
            n_traces: s.plan.len(),
            n_transitions: s.n_transitions(),
            feature_names: spec.feature_decls().iter().map(|f| f.name.to_string()).collect(),
            grid: GridPayload {
                width: grid.width(),
                height: grid.height(),
                cells,
            },
            transition: None,
            trace_states: Vec::new(),
            messages: Vec::new(),
            pretest: Vec::new(),
        };
        match status {
            Status::PretestRequired => {
                payload.pretest = PRETEST_FACTS
                    .iter()
                    .map(|(id, statement, _)| PretestQuestion {
                        id: id.to_string(),
                        statement: statement.to_string(),
                    })
                    .collect();
            }
            Status::Finished => {}
            Status::Active => {
                let index = s.cursor();
                let (t, step) = s.locate(index).expect("active cursor is in range");
                let planned = &s.plan[t];
                let st = planned.trace.steps[step];
                let mut states = vec![spec.state_features(planned.trace.start)];
                states.extend(planned.trace.steps.iter().map(|x| spec.state_features(x.next)));
                payload.trace_states = states;
                payload.transition = Some(TransitionPayload {
                    index,
                    trace: t,
                    step,
                    from: spec.state_features(st.state),
                    action: spec.actions()[st.action].clone(),
                    to: spec.state_features(st.next),
                    stayed: st.state == st.next,
                });
                payload.messages = planned
                    .messages
                    .iter()
                    .filter_map(|m| spec.message(m))
                    .map(|m| MessagePayload {
                        id: m.id.clone(),
                        text: m.text.clone(),
                    })
                    .collect();
            }
        }
        Ok(payload)
    }

    /// Records a label for the transition at `index`. Re-posting an already
    /// recorded label is acknowledged without effect.
    pub fn post_label(&self, id: &str, index: usize, label: u8) -> Result<LabelAck> {
        if label > 1 {
            return Err(SessionError::InvalidLabel(label).into());
        }
        let handle = self.session(id)?;
        let mut s = handle.lock().expect("session lock");
        let cursor = s.cursor();
        if index < cursor {
            if s.labels[index].label != label {
                return Err(SessionError::Relabel(index).into());
            }
            return Ok(LabelAck {
                index,
                next_index: cursor,
                replay: true,
                finished: cursor >= s.n_transitions(),
            });
        }
        match s.status() {
            Status::PretestRequired => return Err(SessionError::PretestRequired.into()),
            Status::Finished => return Err(SessionError::Finished.into()),
            Status::Active => {}
        }
        if index != cursor {
            return Err(SessionError::Conflict {
                expected: cursor,
                got: index,
            }
            .into());
        }
        let d = self.domain(&s.domain)?;
        let (t, step) = s.locate(index).expect("active cursor is in range");
        let planned = &s.plan[t];
        let row = LabeledTransition {
            transition: planned.trace.steps[step],
            messages: MessageMask::from_ids(d.spec.messages(), &planned.messages)?,
            label,
        };
        self.append(
            id,
            &JournalEvent::Label {
                index,
                row: row.clone(),
            },
        )?;
        s.labels.push(row);
        Ok(LabelAck {
            index,
            next_index: index + 1,
            replay: false,
            finished: index + 1 >= s.n_transitions(),
        })
    }

    /// One participant's labels as a dataset.
    pub fn export_session(&self, id: &str) -> Result<Dataset> {
        let s = self.get(id)?;
        let d = self.domain(&s.domain)?;
        Ok(Dataset {
            header: DatasetHeader::new(&d.spec),
            rows: s.labels,
        })
    }

    /// All labels for a domain, optionally dropping participants who found
    /// nothing inexplicable in their first trace.
    pub fn export_study(&self, domain: &str, filter: ExportFilter) -> Result<Dataset> {
        let d = self.domain(domain)?;
        let handles: Vec<Arc<Mutex<Session>>> =
            self.sessions.lock().expect("sessions lock").values().cloned().collect();
        let mut rows = Vec::new();
        for h in handles {
            let s = h.lock().expect("session lock");
            if s.domain != domain || s.labels.is_empty() {
                continue;
            }
            if filter == ExportFilter::FirstTrace && s.first_trace_rows().iter().all(|r| r.label == 1) {
                continue;
            }
            rows.extend(s.labels.iter().cloned());
        }
        Ok(Dataset {
            header: DatasetHeader::new(&d.spec),
            rows,
        })
    }
}

fn session_id(domain: &str, participant: &str, seed: u64) -> String {
    let digest = Sha256::digest(format!("{domain}\n{participant}\n{seed}").as_bytes());
    hex::encode(&digest[..8])
}

//! Append-only judgment log with a derived current-state view.
//!
//! A store directory holds `tasks.jsonl` (the served tasks, fixed when the
//! store is created) and `judgments.jsonl` (one [`LogEntry`] per accepted
//! label, fsynced per submission). A worker resubmitting a pair appends a new
//! entry that supersedes the earlier grade; both stay in the log.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::agreement::{fleiss_kappa, majority_vote, GRADES};
use super::tasks::AnnotationTask;
use crate::error::{Error, Result};
use crate::io;
use crate::qrels::{QrelLabel, Qrels};

pub const TASKS_FILE: &str = "tasks.jsonl";
pub const LOG_FILE: &str = "judgments.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub worker_id: String,
    pub query_id: String,
    pub chunk_id: String,
    pub grade: i64,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub worker_id: String,
    pub task_id: String,
    pub query_id: String,
    pub chunk_id: String,
    pub grade: u8,
    pub timestamp: String,
    /// Grade this entry overwrote, if the worker had judged the pair before.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaces: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub accepted: usize,
    pub overwritten: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Label {
    pub chunk_id: String,
    pub grade: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total_pairs: usize,
    /// Pairs holding at least the required number of judgments.
    pub judged_pairs: usize,
    pub per_worker: BTreeMap<String, usize>,
}

type PairKey = (String, String);

#[derive(Debug, Default)]
struct View {
    next_seq: u64,
    /// Current grade per pair and worker, workers in order of first judgment.
    current: HashMap<PairKey, Vec<(String, u8)>>,
    per_worker: BTreeMap<String, usize>,
}

impl View {
    fn apply(&mut self, e: &LogEntry) -> Option<u8> {
        self.next_seq = self.next_seq.max(e.seq + 1);
        let slot = self
            .current
            .entry((e.query_id.clone(), e.chunk_id.clone()))
            .or_default();
        match slot.iter_mut().find(|(w, _)| *w == e.worker_id) {
            Some((_, g)) => Some(std::mem::replace(g, e.grade)),
            None => {
                slot.push((e.worker_id.clone(), e.grade));
                *self.per_worker.entry(e.worker_id.clone()).or_default() += 1;
                None
            }
        }
    }

    fn grades(&self, query_id: &str, chunk_id: &str) -> &[(String, u8)] {
        self.current
            .get(&(query_id.to_string(), chunk_id.to_string()))
            .map_or(&[], Vec::as_slice)
    }
}

pub struct JudgmentStore {
    dir: PathBuf,
    tasks: Vec<AnnotationTask>,
    task_index: HashMap<String, usize>,
    pair_task: HashMap<PairKey, usize>,
    required: usize,
    view: RwLock<View>,
    log: Option<Mutex<File>>,
}

impl JudgmentStore {
    /// Opens (or creates) a writable store for `tasks`. An existing store must
    /// have been created for the same tasks.
    pub fn open(dir: &Path, tasks: Vec<AnnotationTask>, required: usize) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tasks_path = dir.join(TASKS_FILE);
        if tasks_path.exists() {
            let existing: Vec<AnnotationTask> = io::read_jsonl(&tasks_path)?;
            if existing != tasks {
                return Err(Error::Invalid(format!(
                    "{} was created for a different pool",
                    dir.display()
                )));
            }
        } else {
            io::write_jsonl(&tasks_path, &tasks)?;
        }
        let mut store = Self::from_parts(dir, tasks, required)?;
        let log_path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        store.log = Some(Mutex::new(file));
        Ok(store)
    }

    /// Opens an existing store without write access, e.g. for aggregation.
    pub fn open_snapshot(dir: &Path, required: usize) -> Result<Self> {
        let tasks: Vec<AnnotationTask> = io::read_jsonl(&dir.join(TASKS_FILE))?;
        Self::from_parts(dir, tasks, required)
    }

    fn from_parts(dir: &Path, tasks: Vec<AnnotationTask>, required: usize) -> Result<Self> {
        if required == 0 {
            return Err(Error::Config(
                "required judgments must be at least 1".into(),
            ));
        }
        let mut task_index = HashMap::new();
        let mut pair_task = HashMap::new();
        for (i, t) in tasks.iter().enumerate() {
            if task_index.insert(t.task_id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate task id {}", t.task_id)));
            }
            for d in &t.docs {
                if pair_task
                    .insert((t.query_id.clone(), d.chunk_id.clone()), i)
                    .is_some()
                {
                    return Err(Error::Invalid(format!(
                        "pair ({}, {}) appears in two tasks",
                        t.query_id, d.chunk_id
                    )));
                }
            }
        }
        let mut view = View::default();
        let log_path = dir.join(LOG_FILE);
        if log_path.exists() {
            for e in io::read_jsonl::<LogEntry>(&log_path)? {
                view.apply(&e);
            }
        }
        Ok(JudgmentStore {
            dir: dir.to_path_buf(),
            tasks,
            task_index,
            pair_task,
            required,
            view: RwLock::new(view),
            log: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    pub fn task(&self, task_id: &str) -> Option<&AnnotationTask> {
        self.task_index.get(task_id).map(|&i| &self.tasks[i])
    }

    pub fn required(&self) -> usize {
        self.required
    }

    pub fn total_pairs(&self) -> usize {
        self.pair_task.len()
    }

    /// Records a single judgment against the task that serves its pair.
    pub fn record_judgment(&self, j: &Judgment) -> Result<Ack> {
        let key = (j.query_id.clone(), j.chunk_id.clone());
        let Some(&ti) = self.pair_task.get(&key) else {
            return Err(Error::UnknownTask(format!(
                "no task serves ({}, {})",
                j.query_id, j.chunk_id
            )));
        };
        let task_id = self.tasks[ti].task_id.clone();
        self.append(
            &j.worker_id,
            &task_id,
            &[Label {
                chunk_id: j.chunk_id.clone(),
                grade: j.grade,
            }],
            &j.timestamp,
        )
    }

    /// Records a worker's labels for one task. The whole submission is
    /// validated before anything is written.
    pub fn submit(&self, worker_id: &str, task_id: &str, labels: &[Label]) -> Result<Ack> {
        let timestamp = chrono::Utc::now().to_rfc3339();
        self.append(worker_id, task_id, labels, &timestamp)
    }

    fn append(
        &self,
        worker_id: &str,
        task_id: &str,
        labels: &[Label],
        timestamp: &str,
    ) -> Result<Ack> {
        let Some(log) = &self.log else {
            return Err(Error::Invalid("store opened read-only".into()));
        };
        if worker_id.trim().is_empty() {
            return Err(Error::Invalid("worker id must not be empty".into()));
        }
        let task = self
            .task(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        if labels.is_empty() {
            return Err(Error::IncompleteSubmission {
                task_id: task_id.to_string(),
                missing: task.docs.len(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for l in labels {
            if !task.contains(&l.chunk_id) {
                return Err(Error::ChunkNotInTask {
                    task_id: task_id.to_string(),
                    chunk_id: l.chunk_id.clone(),
                });
            }
            if !(0..GRADES as i64).contains(&l.grade) {
                return Err(Error::GradeOutOfRange(l.grade));
            }
            if !seen.insert(l.chunk_id.as_str()) {
                return Err(Error::Invalid(format!("{} labeled twice", l.chunk_id)));
            }
        }

        // Single writer: the log lock is held across the write and the view update.
        let mut file = log.lock();
        let mut view = self.view.write();
        let mut entries = Vec::with_capacity(labels.len());
        let mut buf = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            let prior = view
                .grades(&task.query_id, &l.chunk_id)
                .iter()
                .find(|(w, _)| w == worker_id)
                .map(|(_, g)| *g);
            let entry = LogEntry {
                seq: view.next_seq + i as u64,
                worker_id: worker_id.to_string(),
                task_id: task_id.to_string(),
                query_id: task.query_id.clone(),
                chunk_id: l.chunk_id.clone(),
                grade: l.grade as u8,
                timestamp: timestamp.to_string(),
                replaces: prior,
            };
            serde_json::to_writer(&mut buf, &entry).expect("log entry serializes");
            buf.push(b'\n');
            entries.push(entry);
        }
        let path = self.dir.join(LOG_FILE);
        file.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        file.sync_data().map_err(|e| Error::io(&path, e))?;
        let mut overwritten = 0;
        for e in &entries {
            if view.apply(e).is_some() {
                overwritten += 1;
            }
        }
        Ok(Ack {
            accepted: entries.len(),
            overwritten,
        })
    }

    fn task_complete(&self, view: &View, task: &AnnotationTask) -> bool {
        task.docs
            .iter()
            .all(|d| view.grades(&task.query_id, &d.chunk_id).len() >= self.required)
    }

    fn worker_done(view: &View, task: &AnnotationTask, worker_id: &str) -> bool {
        task.docs.iter().all(|d| {
            view.grades(&task.query_id, &d.chunk_id)
                .iter()
                .any(|(w, _)| w == worker_id)
        })
    }

    /// First task, in task order, that still needs judgments and that the
    /// worker has not fully judged yet.
    pub fn next_task(&self, worker_id: &str) -> Option<&AnnotationTask> {
        let view = self.view.read();
        self.tasks
            .iter()
            .find(|t| !self.task_complete(&view, t) && !Self::worker_done(&view, t, worker_id))
    }

    pub fn progress(&self) -> Progress {
        let view = self.view.read();
        let judged_pairs = self
            .pair_task
            .keys()
            .filter(|(q, c)| view.grades(q, c).len() >= self.required)
            .count();
        Progress {
            total_pairs: self.total_pairs(),
            judged_pairs,
            per_worker: view.per_worker.clone(),
        }
    }

    /// Current grades for a pair, one per worker in order of first judgment.
    pub fn current_grades(&self, query_id: &str, chunk_id: &str) -> Vec<(String, u8)> {
        self.view.read().grades(query_id, chunk_id).to_vec()
    }

    pub fn aggregate(&self) -> Aggregation {
        let view = self.view.read();
        let mut qrels = Qrels::default();
        let mut pending = Vec::new();
        let mut kappa_rows = Vec::new();
        let mut pairs: Vec<&PairKey> = self.pair_task.keys().collect();
        pairs.sort();
        for (q, c) in pairs {
            let grades: Vec<u8> = view.grades(q, c).iter().map(|(_, g)| *g).collect();
            match majority_vote(&grades, self.required) {
                Ok(grade) => {
                    let mut raw_counts = [0u32; 4];
                    for &g in &grades {
                        raw_counts[g as usize] += 1;
                    }
                    qrels.insert(q, c, QrelLabel { grade, raw_counts });
                    let mut row = vec![0usize; GRADES];
                    for &g in &grades[..self.required] {
                        row[g as usize] += 1;
                    }
                    kappa_rows.push(row);
                }
                Err(_) => pending.push(PendingPair {
                    query_id: q.clone(),
                    chunk_id: c.clone(),
                    judgments: grades.len(),
                }),
            }
        }
        let d = qrels.distribution();
        let kappa = if kappa_rows.is_empty() || self.required < 2 {
            None
        } else {
            fleiss_kappa(&kappa_rows).ok()
        };
        let report = AggregationReport {
            required: self.required,
            total_pairs: self.total_pairs(),
            aggregated_pairs: qrels.len(),
            distribution: GradeDistribution {
                relevant: d[3],
                related: d[2],
                weakly_related: d[1],
                irrelevant: d[0],
            },
            fleiss_kappa: kappa,
            pending,
        };
        Aggregation { qrels, report }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingPair {
    pub query_id: String,
    pub chunk_id: String,
    pub judgments: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeDistribution {
    pub relevant: usize,
    pub related: usize,
    pub weakly_related: usize,
    pub irrelevant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub required: usize,
    pub total_pairs: usize,
    pub aggregated_pairs: usize,
    pub distribution: GradeDistribution,
    /// Computed over the first `required` judgments of each aggregated pair.
    pub fleiss_kappa: Option<f64>,
    pub pending: Vec<PendingPair>,
}

#[derive(Debug, Clone)]
pub struct Aggregation {
    pub qrels: Qrels,
    pub report: AggregationReport,
}

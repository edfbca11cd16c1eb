//! Job registry. Records only move forward through
//! `queued -> running -> done | failed` and progress never decreases.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    FitFeatures,
    FitFlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done | JobState::Failed)
        )
    }

    pub fn is_finished(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    /// Fraction of epochs completed, in `[0, 1]`.
    pub progress: f64,
    /// Artifact written by the job once it is done.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Default)]
pub struct JobRegistry {
    jobs: Mutex<Vec<JobRecord>>,
}

pub fn job_id(index: usize) -> String {
    format!("j{}", index + 1)
}

fn index_of(id: &str) -> Option<usize> {
    id.strip_prefix('j')?.parse::<usize>().ok()?.checked_sub(1)
}

impl JobRegistry {
    /// Registers a queued job; ids are `j1`, `j2`, ... in submission order.
    pub fn submit(&self, kind: JobKind) -> String {
        let mut jobs = self.jobs.lock().unwrap();
        let id = job_id(jobs.len());
        jobs.push(JobRecord {
            id: id.clone(),
            kind,
            state: JobState::Queued,
            progress: 0.0,
            result_ref: None,
            error: None,
        });
        id
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        let jobs = self.jobs.lock().unwrap();
        index_of(id).and_then(|i| jobs.get(i)).cloned()
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) {
        let mut jobs = self.jobs.lock().unwrap();
        if let Some(j) = index_of(id).and_then(|i| jobs.get_mut(i)) {
            f(j);
        }
    }

    fn transition(&self, id: &str, next: JobState, f: impl FnOnce(&mut JobRecord)) {
        self.update(id, |j| {
            assert!(j.state.can_become(next), "job {}: {:?} -> {next:?}", j.id, j.state);
            j.state = next;
            f(j);
        });
    }

    pub fn start(&self, id: &str) {
        self.transition(id, JobState::Running, |_| {});
    }

    /// Raises progress; smaller values are ignored.
    pub fn progress(&self, id: &str, fraction: f64) {
        self.update(id, |j| {
            if j.state == JobState::Running && fraction > j.progress {
                j.progress = fraction.min(1.0);
            }
        });
    }

    pub fn finish(&self, id: &str, result_ref: String) {
        self.transition(id, JobState::Done, |j| {
            j.progress = 1.0;
            j.result_ref = Some(result_ref);
        });
    }

    pub fn fail(&self, id: &str, error: String) {
        self.transition(id, JobState::Failed, |j| j.error = Some(error));
    }
}

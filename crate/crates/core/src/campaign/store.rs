//! Campaign directory: the single source of truth shared by the CLI and the
//! HTTP service.
//!
//! ```text
//! spec.json      problem spec and campaign config at init
//! state.json     last committed CampaignState
//! events.jsonl   one Event per line, append-only
//! designs/       CSV + sidecar per evaluated design
//! batches/       outputs per evaluated design
//! cache/         runner result cache
//! .lock          present while a writer holds the directory
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CampaignConfig, CampaignState, StateView};
use crate::design_io::export_family;
use crate::error::{Error, Result};
use crate::runner::{ProblemSpec, Runner};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Init,
    StageOne,
    Step,
    Exit,
    Progress,
    Failed,
}

/// One line of `events.jsonl`. Transition events carry the full state view
/// after the transition, so the last one reproduces the current state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: usize,
    pub kind: EventKind,
    #[serde(default)]
    pub index: Option<usize>,
    #[serde(default)]
    pub message: Option<String>,
    #[serde(default)]
    pub state: Option<StateView>,
}

#[derive(Serialize, Deserialize)]
struct InitRecord {
    spec: ProblemSpec,
    config: CampaignConfig,
}

#[derive(Clone, Debug)]
pub struct CampaignStore {
    dir: PathBuf,
}

/// Exclusive writer access; released on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl CampaignStore {
    /// Create a new campaign directory (it may exist but must not hold a
    /// campaign already).
    pub fn init(dir: impl Into<PathBuf>, spec: ProblemSpec, config: CampaignConfig) -> Result<(Self, CampaignState)> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let store = CampaignStore { dir };
        if store.state_path().exists() {
            return Err(Error::Precondition(format!(
                "{} already holds a campaign",
                store.dir.display()
            )));
        }
        let _lock = store.lock()?;
        let state = CampaignState::new(spec.clone(), config.clone())?;
        write_atomic(
            &store.dir.join("spec.json"),
            &serde_json::to_vec_pretty(&InitRecord { spec, config })?,
        )?;
        store.commit(&state, EventKind::Init, None)?;
        Ok((store, state))
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let store = CampaignStore { dir: dir.into() };
        if !store.state_path().exists() {
            return Err(Error::Config(format!("{} is not a campaign directory", store.dir.display())));
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn state_path(&self) -> PathBuf {
        self.dir.join("state.json")
    }

    fn events_path(&self) -> PathBuf {
        self.dir.join("events.jsonl")
    }

    pub fn lock(&self) -> Result<StoreLock> {
        let path = self.dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(StoreLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn load(&self) -> Result<CampaignState> {
        let path = self.state_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Runner for this campaign, caching into `cache/`.
    pub fn runner(&self, state: &CampaignState) -> Result<Runner> {
        Ok(Runner::new(state.spec.clone())?
            .with_cache_dir(self.dir.join("cache"))
            .with_timestamps(true))
    }

    fn next_seq(&self) -> Result<usize> {
        let path = self.events_path();
        if !path.exists() {
            return Ok(0);
        }
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(BufReader::new(f).lines().count())
    }

    /// Append an event without touching the state.
    pub fn append_event(&self, kind: EventKind, index: Option<usize>, message: Option<String>, state: Option<StateView>) -> Result<Event> {
        let event = Event {
            seq: self.next_seq()?,
            kind,
            index,
            message,
            state,
        };
        let path = self.events_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(&path, e))?;
        Ok(event)
    }

    /// Persist `state` and record the transition that produced it.
    pub fn commit(&self, state: &CampaignState, kind: EventKind, index: Option<usize>) -> Result<Event> {
        write_atomic(&self.state_path(), &serde_json::to_vec_pretty(state)?)?;
        if let (Some(family), Some(outputs)) = (&state.family, &state.outputs) {
            let names = state.spec.names()?;
            export_family(&self.dir.join("designs"), family, &names)?;
            let batches = self.dir.join("batches");
            fs::create_dir_all(&batches).map_err(|e| Error::io(&batches, e))?;
            let all = [&outputs.x, &outputs.w].into_iter().chain(outputs.z.values());
            for b in all {
                let path = batches.join(format!("{}.json", b.design_id));
                if !path.exists() {
                    write_atomic(&path, &serde_json::to_vec(b)?)?;
                }
            }
        }
        self.append_event(kind, index, None, Some(state.view()))
    }

    /// Locked load, mutate, commit. On failure the error is logged as a
    /// `Failed` event and any evaluations already charged are kept.
    pub fn transact<F>(&self, f: F) -> Result<(CampaignState, Event)>
    where
        F: FnOnce(&mut CampaignState, &Runner) -> Result<(EventKind, Option<usize>)>,
    {
        let _lock = self.lock()?;
        let mut state = self.load()?;
        let runner = self.runner(&state)?;
        let spent = state.ledger.total;
        match f(&mut state, &runner) {
            Ok((kind, index)) => {
                let event = self.commit(&state, kind, index)?;
                Ok((state, event))
            }
            Err(e) => {
                let view = if state.ledger.total != spent {
                    write_atomic(&self.state_path(), &serde_json::to_vec_pretty(&state)?)?;
                    Some(state.view())
                } else {
                    None
                };
                self.append_event(EventKind::Failed, None, Some(e.to_string()), view)?;
                Err(e)
            }
        }
    }

    /// Events with `seq >= since`.
    pub fn events_since(&self, since: usize) -> Result<Vec<Event>> {
        let path = self.events_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for (k, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if k >= since && !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    /// The state view carried by the last transition event.
    pub fn replay(&self) -> Result<Option<StateView>> {
        Ok(self
            .events_since(0)?
            .into_iter()
            .rev()
            .find_map(|e| e.state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::campaign::Actor;

    #[test]
    fn init_lock_commit_replay() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ProblemSpec::builtin("mod-g-19-9-4", 32, 4);
        let (store, mut state) = CampaignStore::init(dir.path(), spec.clone(), CampaignConfig::without_bootstrap()).unwrap();
        assert!(CampaignStore::init(dir.path(), spec, CampaignConfig::default()).is_err());

        let lock = store.lock().unwrap();
        assert!(matches!(store.lock(), Err(Error::Locked(_))));
        let runner = store.runner(&state).unwrap();
        state.stage_one(&runner, Actor::Human).unwrap();
        store.commit(&state, EventKind::StageOne, None).unwrap();
        drop(lock);
        store.lock().unwrap();

        let back = store.load().unwrap();
        assert_eq!(back, state);
        assert_eq!(store.replay().unwrap().unwrap(), state.view());
        assert_eq!(store.events_since(1).unwrap().len(), 1);
        assert!(dir.path().join("designs/X.csv").exists());
        assert!(dir.path().join("batches/W.json").exists());
    }
}

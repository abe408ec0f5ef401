//! Durable session storage: one directory per session holding the item
//! images and an append-only JSON-lines event log that is replayed on load.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{create_session, now_millis, Item, Label, Progress, Response, SourceGroup, StudyReport, StudySession};
use crate::data::{load_set, save_set, ImageSet};
use crate::error::{Error, Result};
use crate::Scalar;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const ITEMS_FILE: &str = "items.imgset";
const SESSIONS_DIR: &str = "sessions";

#[derive(Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Create { session_id: String, order_seed: u64, n_per_group: usize, items: Vec<Item>, timestamp: u64 },
    Response { response: Response, overwrite: bool },
    Unblind { timestamp: u64 },
}

struct Entry {
    session: StudySession,
    log: File,
}

impl Entry {
    /// Appends one event and syncs it to disk.
    fn append(&mut self, e: &Event) -> Result<()> {
        let mut line = serde_json::to_vec(e)?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        Ok(())
    }
}

/// The next image for a reader. Carries no source information.
#[derive(Clone, Debug, PartialEq)]
pub struct NextItem {
    pub item_id: String,
    pub progress: Progress,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

/// All sessions under one data directory. Mutations of a session are
/// serialized by a per-session lock; different sessions proceed
/// independently.
pub struct SessionStore {
    root: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
}

fn poisoned() -> Error {
    Error::InvalidState("session lock poisoned".into())
}

impl SessionStore {
    /// Opens (creating if needed) `root` and replays every stored session.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let dir = root.join(SESSIONS_DIR);
        fs::create_dir_all(&dir)?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.join(EVENTS_FILE).is_file() {
                let e = replay(&path)?;
                sessions.insert(e.session.session_id.clone(), Arc::new(Mutex::new(e)));
            }
        }
        Ok(Self { root, sessions: RwLock::new(sessions) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join(SESSIONS_DIR).join(id)
    }

    fn entry(&self, id: &str) -> Result<Arc<Mutex<Entry>>> {
        self.sessions
            .read()
            .map_err(|_| poisoned())?
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id:?}")))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().map(|s| s.keys().cloned().collect()).unwrap_or_default();
        ids.sort();
        ids
    }

    /// Assembles a session and persists it under a fresh random id.
    pub fn create<T: Scalar>(
        &self,
        real: &ImageSet<T>,
        fakes: &BTreeMap<SourceGroup, ImageSet<T>>,
        n_per_group: usize,
        seed: u64,
    ) -> Result<String> {
        let mut session = create_session(real, fakes, n_per_group, seed)?;
        session.session_id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.session_dir(&session.session_id);
        fs::create_dir_all(&dir)?;
        save_set(dir.join(ITEMS_FILE), &session.images)?;
        let log = OpenOptions::new().create_new(true).append(true).open(dir.join(EVENTS_FILE))?;
        let id = session.session_id.clone();
        let create = Event::Create {
            session_id: id.clone(),
            order_seed: session.order_seed,
            n_per_group: session.n_per_group,
            items: session.items.clone(),
            timestamp: now_millis(),
        };
        let mut entry = Entry { session, log };
        entry.append(&create)?;
        self.sessions.write().map_err(|_| poisoned())?.insert(id.clone(), Arc::new(Mutex::new(entry)));
        Ok(id)
    }

    /// Runs `f` on a consistent snapshot of the session.
    pub fn with_session<R>(&self, id: &str, f: impl FnOnce(&StudySession) -> R) -> Result<R> {
        let e = self.entry(id)?;
        let guard = e.lock().map_err(|_| poisoned())?;
        Ok(f(&guard.session))
    }

    /// Records a response; it is on disk before this returns.
    pub fn record_response(
        &self,
        id: &str,
        reader_id: &str,
        item_id: &str,
        label: Label,
        overwrite: bool,
    ) -> Result<(Response, Progress)> {
        let e = self.entry(id)?;
        let mut guard = e.lock().map_err(|_| poisoned())?;
        let response = guard.session.prepare_response(reader_id, item_id, label, overwrite)?;
        guard.append(&Event::Response { response: response.clone(), overwrite })?;
        guard.session.apply(response.clone());
        let progress = guard.session.progress(reader_id);
        Ok((response, progress))
    }

    /// The first item the reader has not answered, or `None` when done.
    pub fn next_item(&self, id: &str, reader_id: &str) -> Result<(Option<NextItem>, Progress)> {
        self.with_session(id, |s| {
            let progress = s.progress(reader_id);
            let next = s.next_unanswered(reader_id).map(|k| NextItem {
                item_id: s.items[k].item_id.clone(),
                progress: progress.clone(),
                height: s.images.height(),
                width: s.images.width(),
                pixels: s.images.image(k).to_vec(),
            });
            (next, progress)
        })
    }

    /// Builds the report; an unblinded export is logged.
    pub fn report(&self, id: &str, unblind: bool) -> Result<StudyReport> {
        let e = self.entry(id)?;
        let mut guard = e.lock().map_err(|_| poisoned())?;
        if unblind {
            guard.append(&Event::Unblind { timestamp: now_millis() })?;
        }
        guard.session.report(unblind)
    }
}

fn replay(dir: &Path) -> Result<Entry> {
    let path = dir.join(EVENTS_FILE);
    let reader = BufReader::new(File::open(&path)?);
    let mut session: Option<StudySession> = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        match (event, session.as_mut()) {
            (Event::Create { session_id, order_seed, n_per_group, items, .. }, None) => {
                let images: ImageSet<f64> = load_set(dir.join(ITEMS_FILE))?;
                if images.len() != items.len() {
                    return Err(Error::Format(format!(
                        "{} lists {} items but {} holds {} images",
                        path.display(),
                        items.len(),
                        ITEMS_FILE,
                        images.len()
                    )));
                }
                session = Some(StudySession::from_parts(session_id, order_seed, n_per_group, items, images));
            }
            (Event::Response { response, .. }, Some(s)) => {
                if s.position(&response.item_id).is_none() {
                    return Err(Error::Format(format!("{}:{}: unknown item", path.display(), n + 1)));
                }
                s.apply(response)
            }
            (Event::Unblind { .. }, Some(_)) => {}
            _ => return Err(Error::Format(format!("{}:{}: event out of order", path.display(), n + 1))),
        }
    }
    let session = session.ok_or_else(|| Error::Format(format!("{} has no create event", path.display())))?;
    let log = OpenOptions::new().append(true).open(&path)?;
    Ok(Entry { session, log })
}

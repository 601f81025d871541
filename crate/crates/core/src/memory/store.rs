//! Durable journal segments.
//!
//! Layout under the storage root, per world:
//!
//! ```text
//! <world>/<local>@<domain>.mbox          journal segment (mbox, append-only)
//! <world>/<local>@<domain>.meta.json     committed entry count, byte length, lease epoch
//! <world>/<local>@<domain>.context.mbox  last written context (rewritten whole)
//! ```
//!
//! A segment is only trusted up to the byte length recorded in its sidecar;
//! anything past that is an interrupted write and is discarded on the next
//! append. Writes presenting a lease epoch lower than the one recorded are
//! rejected.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{replay, verify_replay, AgentMemory, Context, Journal, ReplayReport};
use crate::address::Address;
use crate::message::{parse_mbox, parse_mbox_prefix, serialize_mbox, FormatError, Message, ParseOptions};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt segment {path}: recovered {recovered} of {expected} entries ({detail})")]
    CorruptSegment { path: PathBuf, recovered: usize, expected: usize, detail: String },
    #[error("write fenced: lease epoch {presented} is older than {current}")]
    StaleLease { presented: u64, current: u64 },
    #[error("journal claims {claimed} persisted entries but storage holds {stored}")]
    OffsetMismatch { claimed: usize, stored: usize },
    #[error("context file: {0}")]
    Format(#[from] FormatError),
    #[error("no context file for {0}")]
    MissingContext(String),
    #[error(transparent)]
    Replay(#[from] super::MemoryError),
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub root: PathBuf,
    /// fsync the segment and sidecar on every persist.
    pub fsync: bool,
}

impl StoreConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StoreConfig { root: root.into(), fsync: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub entries: usize,
    pub bytes: u64,
    pub lease_epoch: u64,
}

/// Result of a recovering load.
#[derive(Debug)]
pub struct Loaded {
    pub memory: AgentMemory,
    /// Set when the segment was damaged and only a prefix could be read.
    pub corruption: Option<String>,
}

#[derive(Debug)]
pub struct JournalStore {
    cfg: StoreConfig,
    // fencing check and write must not interleave between realms sharing a store
    write_lock: Mutex<()>,
}

struct Paths {
    segment: PathBuf,
    meta: PathBuf,
    context: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

impl JournalStore {
    pub fn new(cfg: StoreConfig) -> Result<Self, StoreError> {
        fs::create_dir_all(&cfg.root).map_err(io_err(&cfg.root))?;
        Ok(JournalStore { cfg, write_lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.cfg.root
    }

    fn paths(&self, agent: &Address) -> Paths {
        let dir = self.cfg.root.join(&agent.world().0);
        let base = agent.key();
        Paths {
            segment: dir.join(format!("{base}.mbox")),
            meta: dir.join(format!("{base}.meta.json")),
            context: dir.join(format!("{base}.context.mbox")),
        }
    }

    pub fn segment_path(&self, agent: &Address) -> PathBuf {
        self.paths(agent).segment
    }

    pub fn context_path(&self, agent: &Address) -> PathBuf {
        self.paths(agent).context
    }

    pub fn exists(&self, agent: &Address) -> bool {
        let p = self.paths(agent);
        p.meta.exists() || p.segment.exists()
    }

    pub fn meta(&self, agent: &Address) -> Result<Option<SegmentMeta>, StoreError> {
        read_meta(&self.paths(agent).meta)
    }

    /// Agent addresses with a journal segment in `world`, sorted.
    pub fn agents(&self, world: &str) -> Result<Vec<String>, StoreError> {
        let dir = self.cfg.root.join(world);
        let mut out = Vec::new();
        let rd = match fs::read_dir(&dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        for entry in rd {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(addr) = name.strip_suffix(".mbox") {
                if !addr.ends_with(".context") {
                    out.push(addr.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Appends the journal's unpersisted entries to its segment.
    pub fn persist(&self, journal: &mut Journal, lease_epoch: u64) -> Result<(), StoreError> {
        let _guard = self.write_lock.lock();
        let p = self.paths(&journal.agent);
        let dir = p.segment.parent().expect("segment has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;

        let meta = read_meta(&p.meta)?.unwrap_or_default();
        if lease_epoch < meta.lease_epoch {
            return Err(StoreError::StaleLease { presented: lease_epoch, current: meta.lease_epoch });
        }
        if journal.persisted_offset != meta.entries {
            return Err(StoreError::OffsetMismatch { claimed: journal.persisted_offset, stored: meta.entries });
        }
        let pending = &journal.entries[journal.persisted_offset..];

        let mut chunk = String::new();
        for (i, msg) in pending.iter().enumerate() {
            if meta.entries + i > 0 {
                chunk.push('\n');
            }
            chunk.push_str(&msg.to_mbox());
        }

        // drop any torn tail left by an interrupted write
        OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(&p.segment)
            .and_then(|f| f.set_len(meta.bytes))
            .map_err(io_err(&p.segment))?;
        let mut file = OpenOptions::new().append(true).open(&p.segment).map_err(io_err(&p.segment))?;
        file.write_all(chunk.as_bytes()).map_err(io_err(&p.segment))?;
        if self.cfg.fsync {
            file.sync_all().map_err(io_err(&p.segment))?;
        }

        let next = SegmentMeta { entries: journal.entries.len(), bytes: meta.bytes + chunk.len() as u64, lease_epoch };
        write_atomic(&p.meta, serde_json::to_string(&next).expect("meta serializes").as_bytes(), self.cfg.fsync)?;
        journal.persisted_offset = journal.entries.len();
        Ok(())
    }

    /// Writes the whole context, replacing any previous copy.
    pub fn persist_context(&self, context: &Context, lease_epoch: u64) -> Result<(), StoreError> {
        let _guard = self.write_lock.lock();
        let p = self.paths(&context.agent);
        let meta = read_meta(&p.meta)?.unwrap_or_default();
        if lease_epoch < meta.lease_epoch {
            return Err(StoreError::StaleLease { presented: lease_epoch, current: meta.lease_epoch });
        }
        let dir = p.context.parent().expect("context has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_atomic(&p.context, serialize_mbox(&context.cells).as_bytes(), self.cfg.fsync)
    }

    pub fn load_context_file(&self, agent: &Address) -> Result<Option<Vec<Message>>, StoreError> {
        let path = self.paths(agent).context;
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(parse_mbox(&bytes)?)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Rebuilds journal and (replayed) context. Fails on a damaged segment.
    pub fn load(&self, agent: &Address) -> Result<(Journal, Context), StoreError> {
        let loaded = self.load_inner(agent)?;
        if let Some((recovered, expected, detail)) = loaded.1 {
            return Err(StoreError::CorruptSegment { path: self.paths(agent).segment, recovered, expected, detail });
        }
        Ok((loaded.0.journal, loaded.0.context))
    }

    /// Like [`load`](Self::load) but keeps whatever prefix could be read.
    pub fn load_recovering(&self, agent: &Address) -> Result<Loaded, StoreError> {
        let (memory, bad) = self.load_inner(agent)?;
        let corruption = bad.map(|(recovered, expected, detail)| format!("recovered {recovered} of {expected} entries: {detail}"));
        Ok(Loaded { memory, corruption })
    }

    /// Replays the stored segment and compares it with the stored context file.
    pub fn verify(&self, agent: &Address) -> Result<ReplayReport, StoreError> {
        let (journal, _) = self.load(agent)?;
        let cells = self.load_context_file(agent)?.ok_or_else(|| StoreError::MissingContext(agent.to_string()))?;
        let live = Context { agent: agent.clone(), cells, epoch: 0 };
        Ok(verify_replay(&journal, &live)?)
    }

    #[allow(clippy::type_complexity)]
    fn load_inner(&self, agent: &Address) -> Result<(AgentMemory, Option<(usize, usize, String)>), StoreError> {
        let p = self.paths(agent);
        let meta = read_meta(&p.meta)?;
        let bytes = match File::open(&p.segment) {
            Ok(mut f) => {
                let mut buf = Vec::new();
                f.read_to_end(&mut buf).map_err(io_err(&p.segment))?;
                buf
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&p.segment)(e)),
        };

        let (committed, expected, short) = match meta {
            Some(m) if (m.bytes as usize) <= bytes.len() => (&bytes[..m.bytes as usize], Some(m.entries), false),
            Some(m) => (&bytes[..], Some(m.entries), true),
            None => (&bytes[..], None, false),
        };
        let (mut entries, err) = parse_mbox_prefix(committed, &ParseOptions::default());
        let mut problem = err.map(|e| e.to_string());
        if short {
            // the last message may be cut off mid-body
            entries.pop();
            problem.get_or_insert_with(|| "segment shorter than its committed length".to_string());
        }
        if let Some(expected) = expected {
            if problem.is_none() && entries.len() != expected {
                problem = Some(format!("found {} entries", entries.len()));
            }
            entries.truncate(expected);
        }
        let expected = expected.unwrap_or(entries.len());

        let mut memory = AgentMemory::new(agent.clone());
        memory.journal.entries = entries;
        memory.journal.persisted_offset = memory.journal.entries.len();
        memory.context.cells = replay(&memory.journal).map(|r| r.reconstructed).unwrap_or_default();
        let bad = problem.map(|d| (memory.journal.entries.len(), expected, d));
        Ok((memory, bad))
    }
}

fn read_meta(path: &Path) -> Result<Option<SegmentMeta>, StoreError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| StoreError::CorruptSegment {
            path: path.to_path_buf(),
            recovered: 0,
            expected: 0,
            detail: e.to_string(),
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn write_atomic(path: &Path, data: &[u8], fsync: bool) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(data).map_err(io_err(&tmp))?;
        if fsync {
            f.sync_all().map_err(io_err(&tmp))?;
        }
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::World;

    fn setup() -> (tempfile::TempDir, JournalStore, Address) {
        let dir = tempfile::tempdir().unwrap();
        let store = JournalStore::new(StoreConfig { root: dir.path().to_path_buf(), fsync: false }).unwrap();
        let agent = World::new("w1").parse("ai@agents.localdomain").unwrap();
        (dir, store, agent)
    }

    fn msg(i: usize) -> Message {
        Message::new("u@localdomain", "ai@agents.localdomain", &format!("m{i}"), &format!("From here {i}\nbody"))
    }

    #[test]
    fn persist_then_load() {
        let (_d, store, agent) = setup();
        let mut mem = AgentMemory::new(agent.clone());
        for i in 0..10 {
            mem.append(msg(i)).unwrap();
            if i % 3 == 0 {
                store.persist(&mut mem.journal, 1).unwrap();
            }
        }
        store.persist(&mut mem.journal, 1).unwrap();
        let (journal, context) = store.load(&agent).unwrap();
        assert_eq!(journal.entries, mem.journal.entries);
        assert_eq!(context.cells, mem.context.cells);
        let raw = fs::read(store.segment_path(&agent)).unwrap();
        assert_eq!(parse_mbox(&raw).unwrap(), mem.journal.entries);
        assert_eq!(String::from_utf8(raw).unwrap(), serialize_mbox(&mem.journal.entries));
    }

    #[test]
    fn torn_tail_is_ignored() {
        let (_d, store, agent) = setup();
        let mut mem = AgentMemory::new(agent.clone());
        for i in 0..4 {
            mem.append(msg(i)).unwrap();
        }
        store.persist(&mut mem.journal, 1).unwrap();
        let mut f = OpenOptions::new().append(true).open(store.segment_path(&agent)).unwrap();
        f.write_all(b"\nFrom u@localdomain\nFrom: u@localdomain\nTo: ai@agents.local").unwrap();
        let (journal, _) = store.load(&agent).unwrap();
        assert_eq!(journal.entries.len(), 4);

        mem.append(msg(4)).unwrap();
        store.persist(&mut mem.journal, 1).unwrap();
        assert_eq!(store.load(&agent).unwrap().0.entries, mem.journal.entries);
    }

    #[test]
    fn truncated_segment_reports_corruption() {
        let (_d, store, agent) = setup();
        let mut mem = AgentMemory::new(agent.clone());
        for i in 0..5 {
            mem.append(msg(i)).unwrap();
        }
        store.persist(&mut mem.journal, 1).unwrap();
        let path = store.segment_path(&agent);
        let len = fs::metadata(&path).unwrap().len();
        OpenOptions::new().write(true).open(&path).unwrap().set_len(len - 10).unwrap();
        assert!(matches!(store.load(&agent), Err(StoreError::CorruptSegment { recovered: 4, expected: 5, .. })));
        let loaded = store.load_recovering(&agent).unwrap();
        assert_eq!(loaded.memory.journal.entries, mem.journal.entries[..4]);
        assert!(loaded.corruption.is_some());
    }

    #[test]
    fn stale_lease_is_fenced() {
        let (_d, store, agent) = setup();
        let mut mem = AgentMemory::new(agent.clone());
        mem.append(msg(0)).unwrap();
        store.persist(&mut mem.journal, 2).unwrap();
        mem.append(msg(1)).unwrap();
        assert!(matches!(store.persist(&mut mem.journal, 1), Err(StoreError::StaleLease { presented: 1, current: 2 })));
        assert!(matches!(store.persist_context(&mem.context, 1), Err(StoreError::StaleLease { .. })));
        store.persist(&mut mem.journal, 3).unwrap();
        assert_eq!(store.meta(&agent).unwrap().unwrap().lease_epoch, 3);
    }

    #[test]
    fn unknown_agent_loads_empty() {
        let (_d, store, agent) = setup();
        let (j, c) = store.load(&agent).unwrap();
        assert!(j.entries.is_empty() && c.cells.is_empty());
        assert!(!store.exists(&agent));
        assert!(store.load_context_file(&agent).unwrap().is_none());
    }

    #[test]
    fn lists_agents() {
        let (_d, store, agent) = setup();
        let mut mem = AgentMemory::new(agent.clone());
        mem.append(msg(0)).unwrap();
        store.persist(&mut mem.journal, 1).unwrap();
        store.persist_context(&mem.context, 1).unwrap();
        assert_eq!(store.agents("w1").unwrap(), vec!["ai@agents.localdomain".to_string()]);
        assert_eq!(store.load_context_file(&agent).unwrap().unwrap(), mem.context.cells);
    }
}

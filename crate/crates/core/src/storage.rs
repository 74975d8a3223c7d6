//! Per-node durable key-value storage.
//!
//! Each node keeps two independent maps, one for local-scope and one for
//! global-scope keys. Applied log entries are appended to `state.wal`
//! before the maps change; every `snapshot_every` entries the whole state is
//! written atomically to `state.snap` and the WAL is truncated. Consensus
//! state (term, vote, log) lives in `raft.wal` with the same record framing.
//!
//! Record framing: `u32 BE length | payload | u32 BE CRC32(payload)`.
//! A snapshot file is `b"EKVS" | u32 BE version (1) | one record`.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::wire::{b64, Command, CommandKind, EntryPayload, LogEntry, RequestId, Scope};

pub const STATE_SNAP: &str = "state.snap";
pub const STATE_WAL: &str = "state.wal";
pub const RAFT_WAL: &str = "raft.wal";

/// Largest accepted key.
pub const MAX_KEY: usize = 4 * 1024;
/// Largest accepted value.
pub const MAX_VALUE: usize = 1024 * 1024;
/// Request ids remembered per client for duplicate suppression.
pub const DEDUP_WINDOW: usize = 4096;

const SNAP_MAGIC: &[u8; 4] = b"EKVS";
const SNAP_VERSION: u32 = 1;

/// A flat directory of named files.
pub trait Dir: Send + Sync {
    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>>;
    fn append(&self, name: &str, bytes: &[u8], sync: bool) -> io::Result<()>;
    /// Replaces `name` atomically: write a temp file, sync, rename.
    fn write_atomic(&self, name: &str, bytes: &[u8]) -> io::Result<()>;
    fn truncate(&self, name: &str, len: u64) -> io::Result<()>;
    fn sync(&self) -> io::Result<()>;
    fn list(&self) -> io::Result<Vec<String>>;
}

/// Directory on the real filesystem.
pub struct FsDir {
    root: PathBuf,
    handles: Mutex<HashMap<String, File>>,
}

impl FsDir {
    pub fn open(root: impl AsRef<Path>) -> io::Result<Self> {
        fs::create_dir_all(root.as_ref())?;
        Ok(FsDir { root: root.as_ref().to_path_buf(), handles: Mutex::new(HashMap::new()) })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }
}

impl Dir for FsDir {
    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.root.join(name)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn append(&self, name: &str, bytes: &[u8], sync: bool) -> io::Result<()> {
        let mut handles = self.handles.lock().unwrap();
        if !handles.contains_key(name) {
            let f = OpenOptions::new().create(true).append(true).open(self.root.join(name))?;
            handles.insert(name.to_string(), f);
        }
        let f = handles.get_mut(name).unwrap();
        f.write_all(bytes)?;
        if sync {
            f.sync_data()?;
        }
        Ok(())
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let tmp = self.root.join(format!("{name}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.root.join(name))?;
        if let Ok(d) = File::open(&self.root) {
            let _ = d.sync_all();
        }
        Ok(())
    }

    fn truncate(&self, name: &str, len: u64) -> io::Result<()> {
        let mut handles = self.handles.lock().unwrap();
        handles.remove(name);
        let path = self.root.join(name);
        if len == 0 && !path.exists() {
            return Ok(());
        }
        let f = OpenOptions::new().create(true).write(true).truncate(false).open(path)?;
        f.set_len(len)?;
        f.sync_all()
    }

    fn sync(&self) -> io::Result<()> {
        for f in self.handles.lock().unwrap().values() {
            f.sync_all()?;
        }
        Ok(())
    }

    fn list(&self) -> io::Result<Vec<String>> {
        let mut out = Vec::new();
        for e in fs::read_dir(&self.root)? {
            let e = e?;
            if e.file_type()?.is_file() {
                out.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }
}

/// In-memory directory. Cloning shares the contents, which lets a simulated
/// node "crash" and recover from what it had written.
#[derive(Clone, Default)]
pub struct MemDir {
    files: Arc<Mutex<BTreeMap<String, Vec<u8>>>>,
}

impl MemDir {
    pub fn new() -> Self {
        Self::default()
    }

    /// Overwrites raw file contents; used to inject torn writes.
    pub fn put_raw(&self, name: &str, bytes: Vec<u8>) {
        self.files.lock().unwrap().insert(name.to_string(), bytes);
    }
}

impl Dir for MemDir {
    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>> {
        Ok(self.files.lock().unwrap().get(name).cloned())
    }

    fn append(&self, name: &str, bytes: &[u8], _sync: bool) -> io::Result<()> {
        self.files.lock().unwrap().entry(name.to_string()).or_default().extend_from_slice(bytes);
        Ok(())
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        self.files.lock().unwrap().insert(name.to_string(), bytes.to_vec());
        Ok(())
    }

    fn truncate(&self, name: &str, len: u64) -> io::Result<()> {
        if let Some(f) = self.files.lock().unwrap().get_mut(name) {
            f.truncate(len as usize);
        }
        Ok(())
    }

    fn sync(&self) -> io::Result<()> {
        Ok(())
    }

    fn list(&self) -> io::Result<Vec<String>> {
        Ok(self.files.lock().unwrap().keys().cloned().collect())
    }
}

/// Where a node keeps the data of each replica it hosts, one subdirectory
/// per group.
#[derive(Clone)]
pub enum DataRoot {
    /// Nothing is written anywhere.
    Volatile,
    /// Shared in-memory directories that outlive a simulated crash.
    Memory(Arc<Mutex<BTreeMap<String, MemDir>>>),
    Fs(PathBuf),
}

impl DataRoot {
    pub fn memory() -> Self {
        DataRoot::Memory(Arc::default())
    }

    pub fn options(&self, base: StorageOptions) -> StorageOptions {
        match self {
            DataRoot::Volatile => StorageOptions { persist: false, ..base },
            _ => base,
        }
    }

    pub fn open(&self, name: &str) -> Result<Arc<dyn Dir>> {
        Ok(match self {
            DataRoot::Volatile => Arc::new(MemDir::new()),
            DataRoot::Memory(m) => Arc::new(m.lock().unwrap().entry(name.to_string()).or_default().clone()),
            DataRoot::Fs(root) => Arc::new(FsDir::open(root.join(name))?),
        })
    }

    /// Recovers the state machine and consensus store for `name`.
    pub fn recover(&self, name: &str, base: StorageOptions) -> Result<(StorageEngine, RaftStore)> {
        let opts = self.options(base);
        let dir = self.open(name)?;
        let engine = StorageEngine::recover(dir.clone(), opts)?;
        Ok((engine, RaftStore::new(dir, opts)))
    }
}

/// Frames one WAL record.
pub fn frame_record(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_be_bytes());
    out
}

/// Splits a WAL image into valid records. Returns the records and the byte
/// offset just past the last valid one; anything after it is a torn tail.
pub fn scan_records(buf: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while buf.len() - pos >= 8 {
        let len = u32::from_be_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        let end = match pos.checked_add(8 + len) {
            Some(e) if e <= buf.len() => e,
            _ => break,
        };
        let payload = &buf[pos + 4..pos + 4 + len];
        let crc = u32::from_be_bytes(buf[end - 4..end].try_into().unwrap());
        if crc32fast::hash(payload) != crc {
            break;
        }
        out.push(payload);
        pos = end;
    }
    (out, pos)
}

/// Reads all valid records of `name`, truncating a torn tail in place.
fn read_wal(dir: &dyn Dir, name: &str) -> Result<Vec<Vec<u8>>> {
    let Some(buf) = dir.read(name)? else {
        return Ok(Vec::new());
    };
    let (records, valid) = scan_records(&buf);
    if valid < buf.len() {
        tracing::warn!(file = name, valid, total = buf.len(), "truncating torn WAL tail");
        dir.truncate(name, valid as u64)?;
    }
    Ok(records.into_iter().map(<[u8]>::to_vec).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageOptions {
    /// Write WAL and snapshots at all. Off means purely in-memory.
    pub persist: bool,
    /// Sync the WAL on every append.
    pub fsync: bool,
    pub snapshot_every: u64,
}

impl Default for StorageOptions {
    fn default() -> Self {
        StorageOptions { persist: true, fsync: false, snapshot_every: 1000 }
    }
}

impl StorageOptions {
    pub fn volatile() -> Self {
        StorageOptions { persist: false, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ScopedKey {
    pub scope: Scope,
    pub key: Vec<u8>,
}

impl ScopedKey {
    pub fn new(scope: Scope, key: impl Into<Vec<u8>>) -> Result<Self> {
        let key = key.into();
        if key.is_empty() || key.len() > MAX_KEY {
            return Err(Error::InvalidArgument(format!("key length {} not in [1, {MAX_KEY}]", key.len())));
        }
        Ok(ScopedKey { scope, key })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct DedupWindow {
    order: VecDeque<u64>,
    #[serde(skip)]
    seen: HashSet<u64>,
}

impl DedupWindow {
    fn contains(&self, seq: u64) -> bool {
        self.seen.contains(&seq)
    }

    fn insert(&mut self, seq: u64) {
        if self.seen.insert(seq) {
            self.order.push_back(seq);
            if self.order.len() > DEDUP_WINDOW {
                let old = self.order.pop_front().unwrap();
                self.seen.remove(&old);
            }
        }
    }

    fn rebuild(&mut self) {
        self.seen = self.order.iter().copied().collect();
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotBody {
    applied_index: u64,
    local: Vec<KvPair>,
    global: Vec<KvPair>,
    dedup: BTreeMap<u64, DedupWindow>,
}

#[derive(Serialize, Deserialize)]
struct KvPair(#[serde(with = "b64")] Vec<u8>, #[serde(with = "b64")] Vec<u8>);

/// What `apply` did with an entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied,
    /// The entry's request id was seen before; state unchanged.
    Duplicate,
    /// Not a key-value command (no-op or membership).
    Skipped,
}

/// The two-namespace key-value state machine of one replica.
pub struct StorageEngine {
    dir: Arc<dyn Dir>,
    opts: StorageOptions,
    local: HashMap<Vec<u8>, Vec<u8>>,
    global: HashMap<Vec<u8>, Vec<u8>>,
    applied_index: u64,
    dedup: BTreeMap<u64, DedupWindow>,
    since_snapshot: u64,
    replayed: usize,
    bytes: [usize; 2],
}

impl StorageEngine {
    /// Loads the snapshot, if any, then replays the WAL.
    pub fn recover(dir: Arc<dyn Dir>, opts: StorageOptions) -> Result<Self> {
        let mut engine = StorageEngine {
            dir,
            opts,
            local: HashMap::new(),
            global: HashMap::new(),
            applied_index: 0,
            dedup: BTreeMap::new(),
            since_snapshot: 0,
            replayed: 0,
            bytes: [0, 0],
        };
        if !opts.persist {
            return Ok(engine);
        }
        if let Some(snap) = engine.dir.read(STATE_SNAP)? {
            engine.load_snapshot(&snap)?;
        }
        for rec in read_wal(engine.dir.as_ref(), STATE_WAL)? {
            let entry: LogEntry = serde_json::from_slice(&rec)
                .map_err(|e| Error::Consistency(format!("undecodable WAL record: {e}")))?;
            if entry.index <= engine.applied_index {
                continue;
            }
            engine.check_order(&entry)?;
            engine.mutate(&entry);
            engine.replayed += 1;
            engine.since_snapshot += 1;
        }
        Ok(engine)
    }

    /// Fresh in-memory engine with nothing persisted.
    pub fn in_memory() -> Self {
        Self::recover(Arc::new(MemDir::new()), StorageOptions::volatile()).expect("volatile recover cannot fail")
    }

    fn load_snapshot(&mut self, snap: &[u8]) -> Result<()> {
        if snap.len() < 8 || &snap[..4] != SNAP_MAGIC {
            return Err(Error::CorruptSnapshot("bad magic".into()));
        }
        let version = u32::from_be_bytes(snap[4..8].try_into().unwrap());
        if version != SNAP_VERSION {
            return Err(Error::CorruptSnapshot(format!("unsupported version {version}")));
        }
        let (records, valid) = scan_records(&snap[8..]);
        if records.len() != 1 || valid != snap.len() - 8 {
            return Err(Error::CorruptSnapshot("body record damaged".into()));
        }
        let body: SnapshotBody =
            serde_json::from_slice(records[0]).map_err(|e| Error::CorruptSnapshot(e.to_string()))?;
        self.applied_index = body.applied_index;
        for KvPair(k, v) in body.local {
            self.bytes[0] += k.len() + v.len();
            self.local.insert(k, v);
        }
        for KvPair(k, v) in body.global {
            self.bytes[1] += k.len() + v.len();
            self.global.insert(k, v);
        }
        self.dedup = body.dedup;
        self.dedup.values_mut().for_each(DedupWindow::rebuild);
        Ok(())
    }

    fn check_order(&self, entry: &LogEntry) -> Result<()> {
        if entry.index != self.applied_index + 1 {
            return Err(Error::Consistency(format!(
                "apply of index {} after applied index {}",
                entry.index, self.applied_index
            )));
        }
        Ok(())
    }

    /// Applies the next committed entry. Out-of-order indices are fatal.
    pub fn apply(&mut self, entry: &LogEntry) -> Result<ApplyOutcome> {
        self.check_order(entry)?;
        if self.opts.persist {
            let payload = serde_json::to_vec(entry)?;
            self.dir.append(STATE_WAL, &frame_record(&payload), self.opts.fsync)?;
        }
        let outcome = self.mutate(entry);
        self.since_snapshot += 1;
        if self.opts.persist && self.since_snapshot >= self.opts.snapshot_every {
            self.snapshot()?;
        }
        Ok(outcome)
    }

    fn mutate(&mut self, entry: &LogEntry) -> ApplyOutcome {
        self.applied_index = entry.index;
        let EntryPayload::Command(cmd) = &entry.payload else {
            return ApplyOutcome::Skipped;
        };
        let RequestId { client, seq } = cmd.request_id;
        let window = self.dedup.entry(client).or_default();
        if window.contains(seq) {
            return ApplyOutcome::Duplicate;
        }
        window.insert(seq);
        self.mutate_command(cmd);
        ApplyOutcome::Applied
    }

    fn mutate_command(&mut self, cmd: &Command) {
        let slot = match cmd.scope {
            Scope::Local => 0,
            Scope::Global => 1,
        };
        let map = if slot == 0 { &mut self.local } else { &mut self.global };
        let old = match cmd.kind {
            CommandKind::Put => {
                let v = cmd.value.clone().unwrap_or_default();
                self.bytes[slot] += cmd.key.len() + v.len();
                map.insert(cmd.key.clone(), v)
            }
            CommandKind::Delete => map.remove(&cmd.key),
        };
        if let Some(old) = old {
            self.bytes[slot] -= cmd.key.len() + old.len();
        }
    }

    pub fn read(&self, scope: Scope, key: &[u8]) -> Option<&[u8]> {
        let map = match scope {
            Scope::Local => &self.local,
            Scope::Global => &self.global,
        };
        map.get(key).map(Vec::as_slice)
    }

    /// Writes the full state atomically and truncates the WAL.
    pub fn snapshot(&mut self) -> Result<()> {
        if !self.opts.persist {
            return Ok(());
        }
        let body = SnapshotBody {
            applied_index: self.applied_index,
            local: sorted_pairs(&self.local),
            global: sorted_pairs(&self.global),
            dedup: self.dedup.clone(),
        };
        let payload = serde_json::to_vec(&body)?;
        let mut file = SNAP_MAGIC.to_vec();
        file.extend_from_slice(&SNAP_VERSION.to_be_bytes());
        file.extend_from_slice(&frame_record(&payload));
        self.dir.write_atomic(STATE_SNAP, &file)?;
        self.dir.truncate(STATE_WAL, 0)?;
        self.since_snapshot = 0;
        Ok(())
    }

    pub fn sync(&self) -> Result<()> {
        Ok(self.dir.sync()?)
    }

    pub fn applied_index(&self) -> u64 {
        self.applied_index
    }

    /// WAL records replayed by the last `recover`.
    pub fn replayed_records(&self) -> usize {
        self.replayed
    }

    pub fn len(&self, scope: Scope) -> usize {
        match scope {
            Scope::Local => self.local.len(),
            Scope::Global => self.global.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.local.is_empty() && self.global.is_empty()
    }

    /// Bytes of keys plus values held in one namespace.
    pub fn bytes_used(&self, scope: Scope) -> usize {
        match scope {
            Scope::Local => self.bytes[0],
            Scope::Global => self.bytes[1],
        }
    }

    pub fn keys(&self, scope: Scope) -> Vec<Vec<u8>> {
        let map = match scope {
            Scope::Local => &self.local,
            Scope::Global => &self.global,
        };
        let mut keys: Vec<_> = map.keys().cloned().collect();
        keys.sort();
        keys
    }

    /// SHA-256 over both namespaces in key order.
    pub fn state_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.hash_into(&mut h, Scope::Local);
        self.hash_into(&mut h, Scope::Global);
        h.finalize().into()
    }

    /// Hash of one map only; learners hold no local data, so backups are
    /// compared on the global map.
    pub fn scope_hash(&self, scope: Scope) -> [u8; 32] {
        let mut h = Sha256::new();
        self.hash_into(&mut h, scope);
        h.finalize().into()
    }

    fn hash_into(&self, h: &mut Sha256, scope: Scope) {
        let (tag, map) = match scope {
            Scope::Local => (b'L', &self.local),
            Scope::Global => (b'G', &self.global),
        };
        for KvPair(k, v) in sorted_pairs(map) {
            h.update([tag]);
            h.update((k.len() as u32).to_be_bytes());
            h.update(&k);
            h.update((v.len() as u32).to_be_bytes());
            h.update(&v);
        }
    }
}

fn sorted_pairs(map: &HashMap<Vec<u8>, Vec<u8>>) -> Vec<KvPair> {
    let mut pairs: Vec<_> = map.iter().map(|(k, v)| KvPair(k.clone(), v.clone())).collect();
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    pairs
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "camelCase")]
enum RaftRecord {
    Hard { term: u64, vote: Option<String> },
    Append { entries: Vec<LogEntry> },
    Truncate { from: u64 },
}

/// Durable consensus state, recovered from `raft.wal`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaftHardState {
    pub term: u64,
    pub vote: Option<String>,
    pub log: Vec<LogEntry>,
}

/// Append-only persistence for term, vote and log.
pub struct RaftStore {
    dir: Arc<dyn Dir>,
    persist: bool,
    fsync: bool,
}

impl RaftStore {
    pub fn new(dir: Arc<dyn Dir>, opts: StorageOptions) -> Self {
        RaftStore { dir, persist: opts.persist, fsync: opts.fsync }
    }

    pub fn volatile() -> Self {
        RaftStore { dir: Arc::new(MemDir::new()), persist: false, fsync: false }
    }

    pub fn load(&self) -> Result<RaftHardState> {
        let mut state = RaftHardState::default();
        if !self.persist {
            return Ok(state);
        }
        for rec in read_wal(self.dir.as_ref(), RAFT_WAL)? {
            match serde_json::from_slice(&rec)
                .map_err(|e| Error::Consistency(format!("undecodable raft record: {e}")))?
            {
                RaftRecord::Hard { term, vote } => {
                    state.term = term;
                    state.vote = vote;
                }
                RaftRecord::Append { entries } => state.log.extend(entries),
                RaftRecord::Truncate { from } => state.log.retain(|e| e.index < from),
            }
        }
        Ok(state)
    }

    fn write(&self, rec: &RaftRecord) -> Result<()> {
        if self.persist {
            let payload = serde_json::to_vec(rec)?;
            self.dir.append(RAFT_WAL, &frame_record(&payload), self.fsync)?;
        }
        Ok(())
    }

    pub fn save_hard_state(&self, term: u64, vote: Option<&str>) -> Result<()> {
        self.write(&RaftRecord::Hard { term, vote: vote.map(str::to_string) })
    }

    pub fn append(&self, entries: &[LogEntry]) -> Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        self.write(&RaftRecord::Append { entries: entries.to_vec() })
    }

    /// Drops every entry with index >= `from`.
    pub fn truncate_from(&self, from: u64) -> Result<()> {
        self.write(&RaftRecord::Truncate { from })
    }

    pub fn sync(&self) -> Result<()> {
        Ok(self.dir.sync()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put(index: u64, scope: Scope, k: &str, v: &str) -> LogEntry {
        LogEntry {
            term: 1,
            index,
            payload: EntryPayload::Command(Command::put(scope, k, v, RequestId { client: 1, seq: index })),
        }
    }

    fn del(index: u64, scope: Scope, k: &str) -> LogEntry {
        LogEntry {
            term: 1,
            index,
            payload: EntryPayload::Command(Command::delete(scope, k, RequestId { client: 1, seq: index })),
        }
    }

    fn mem_engine(dir: &MemDir) -> StorageEngine {
        StorageEngine::recover(Arc::new(dir.clone()), StorageOptions::default()).unwrap()
    }

    #[test]
    fn put_then_read() {
        let mut s = StorageEngine::in_memory();
        s.apply(&put(1, Scope::Local, "k", "v")).unwrap();
        assert_eq!(s.read(Scope::Local, b"k"), Some(&b"v"[..]));
    }

    #[test]
    fn delete_absent_is_noop() {
        let mut s = StorageEngine::in_memory();
        assert_eq!(s.apply(&del(1, Scope::Local, "nope")).unwrap(), ApplyOutcome::Applied);
        assert_eq!(s.applied_index(), 1);
        assert!(s.read(Scope::Local, b"nope").is_none());
    }

    #[test]
    fn namespaces_are_isolated() {
        let mut s = StorageEngine::in_memory();
        s.apply(&put(1, Scope::Global, "k", "g")).unwrap();
        assert!(s.read(Scope::Local, b"k").is_none());
        s.apply(&put(2, Scope::Local, "k", "l")).unwrap();
        s.apply(&del(3, Scope::Global, "k")).unwrap();
        assert_eq!(s.read(Scope::Local, b"k"), Some(&b"l"[..]));
    }

    #[test]
    fn out_of_order_apply_is_fatal() {
        let mut s = StorageEngine::in_memory();
        assert!(matches!(s.apply(&put(2, Scope::Local, "k", "v")), Err(Error::Consistency(_))));
        s.apply(&put(1, Scope::Local, "k", "v")).unwrap();
        assert!(matches!(s.apply(&put(1, Scope::Local, "k", "v")), Err(Error::Consistency(_))));
    }

    #[test]
    fn duplicate_request_ids_apply_once() {
        let mut s = StorageEngine::in_memory();
        let rid = RequestId { client: 9, seq: 1 };
        let e1 = LogEntry { term: 1, index: 1, payload: EntryPayload::Command(Command::put(Scope::Local, "k", "a", rid)) };
        let e2 = LogEntry { term: 1, index: 2, payload: EntryPayload::Command(Command::put(Scope::Local, "k", "b", rid)) };
        assert_eq!(s.apply(&e1).unwrap(), ApplyOutcome::Applied);
        assert_eq!(s.apply(&e2).unwrap(), ApplyOutcome::Duplicate);
        assert_eq!(s.read(Scope::Local, b"k"), Some(&b"a"[..]));
        assert_eq!(s.applied_index(), 2);
    }

    #[test]
    fn fresh_start_is_empty() {
        let s = mem_engine(&MemDir::new());
        assert_eq!(s.applied_index(), 0);
        assert!(s.is_empty());
    }

    #[test]
    fn snapshot_round_trip_keeps_hash() {
        let dir = MemDir::new();
        let mut s = mem_engine(&dir);
        for i in 1..=50 {
            s.apply(&put(i, Scope::Global, &format!("k{}", i % 7), &format!("v{i}"))).unwrap();
        }
        s.snapshot().unwrap();
        let hash = s.state_hash();
        let r = mem_engine(&dir);
        assert_eq!(r.state_hash(), hash);
        assert_eq!(r.applied_index(), 50);
        assert_eq!(r.replayed_records(), 0);
    }

    #[test]
    fn torn_wal_tail_is_truncated() {
        let dir = MemDir::new();
        let mut s = mem_engine(&dir);
        for i in 1..=5 {
            s.apply(&put(i, Scope::Local, "k", &format!("v{i}"))).unwrap();
        }
        drop(s);
        let mut wal = dir.read(STATE_WAL).unwrap().unwrap();
        let full = wal.len();
        wal.truncate(full - 3);
        dir.put_raw(STATE_WAL, wal);
        let r = mem_engine(&dir);
        assert_eq!(r.applied_index(), 4);
        assert_eq!(r.read(Scope::Local, b"k"), Some(&b"v4"[..]));
        // the damaged bytes are gone, so a new append lands cleanly
        let (_, valid) = scan_records(&dir.read(STATE_WAL).unwrap().unwrap());
        assert_eq!(valid, dir.read(STATE_WAL).unwrap().unwrap().len());
    }

    #[test]
    fn corrupted_snapshot_is_fatal() {
        let dir = MemDir::new();
        let mut s = mem_engine(&dir);
        s.apply(&put(1, Scope::Local, "k", "v")).unwrap();
        s.snapshot().unwrap();
        let mut snap = dir.read(STATE_SNAP).unwrap().unwrap();
        let mid = snap.len() / 2;
        snap[mid] ^= 0xff;
        dir.put_raw(STATE_SNAP, snap);
        assert!(matches!(
            StorageEngine::recover(Arc::new(dir), StorageOptions::default()),
            Err(Error::CorruptSnapshot(_))
        ));
    }

    #[test]
    fn byte_accounting_tracks_overwrites() {
        let mut s = StorageEngine::in_memory();
        s.apply(&put(1, Scope::Global, "ab", "xyz")).unwrap();
        assert_eq!(s.bytes_used(Scope::Global), 5);
        s.apply(&put(2, Scope::Global, "ab", "x")).unwrap();
        assert_eq!(s.bytes_used(Scope::Global), 3);
        s.apply(&del(3, Scope::Global, "ab")).unwrap();
        assert_eq!(s.bytes_used(Scope::Global), 0);
        assert_eq!(s.bytes_used(Scope::Local), 0);
    }

    #[test]
    fn raft_store_replays_truncations() {
        let dir = Arc::new(MemDir::new());
        let store = RaftStore::new(dir.clone(), StorageOptions::default());
        store.save_hard_state(3, Some("a")).unwrap();
        store.append(&[put(1, Scope::Local, "k", "1"), put(2, Scope::Local, "k", "2")]).unwrap();
        store.truncate_from(2).unwrap();
        store.append(&[put(2, Scope::Local, "k", "3")]).unwrap();
        let state = RaftStore::new(dir, StorageOptions::default()).load().unwrap();
        assert_eq!(state.term, 3);
        assert_eq!(state.vote.as_deref(), Some("a"));
        assert_eq!(state.log.len(), 2);
        assert_eq!(state.log[1], put(2, Scope::Local, "k", "3"));
    }

    #[test]
    fn key_limits() {
        assert!(ScopedKey::new(Scope::Local, vec![0u8; MAX_KEY]).is_ok());
        assert!(ScopedKey::new(Scope::Local, vec![0u8; MAX_KEY + 1]).is_err());
        assert!(ScopedKey::new(Scope::Local, Vec::new()).is_err());
    }

    mod model {
        use std::collections::{BTreeMap, BTreeSet};

        use proptest::prelude::*;

        use super::*;

        #[derive(Clone, Debug)]
        enum Op {
            Put(Scope, u8, Vec<u8>),
            Del(Scope, u8),
            Noop,
        }

        fn op() -> impl Strategy<Value = (Op, u64)> {
            let scope = prop_oneof![Just(Scope::Local), Just(Scope::Global)];
            let op = prop_oneof![
                6 => (scope.clone(), 0u8..6, proptest::collection::vec(any::<u8>(), 0..8)).prop_map(|(s, k, v)| Op::Put(s, k, v)),
                3 => (scope, 0u8..6).prop_map(|(s, k)| Op::Del(s, k)),
                1 => Just(Op::Noop),
            ];
            // Small sequence numbers so retries (repeats) are common.
            (op, 0u64..40)
        }

        fn entry(index: u64, op: &Op, seq: u64) -> LogEntry {
            let rid = RequestId { client: 9, seq };
            let payload = match op {
                Op::Put(s, k, v) => EntryPayload::Command(Command::put(*s, vec![b'k', *k], v.clone(), rid)),
                Op::Del(s, k) => EntryPayload::Command(Command::delete(*s, vec![b'k', *k], rid)),
                Op::Noop => EntryPayload::Noop,
            };
            LogEntry { term: 1, index, payload }
        }

        type State = BTreeMap<(Scope, Vec<u8>), Vec<u8>>;

        /// Model state after each prefix of `ops`.
        fn model_states(ops: &[(Op, u64)]) -> Vec<State> {
            let mut state = State::new();
            let mut seen = BTreeSet::new();
            let mut out = vec![state.clone()];
            for (op, seq) in ops {
                let fresh = !matches!(op, Op::Noop) && seen.insert(*seq);
                if fresh {
                    match op {
                        Op::Put(s, k, v) => {
                            state.insert((*s, vec![b'k', *k]), v.clone());
                        }
                        Op::Del(s, k) => {
                            state.remove(&(*s, vec![b'k', *k]));
                        }
                        Op::Noop => {}
                    }
                }
                out.push(state.clone());
            }
            out
        }

        fn check(engine: &StorageEngine, want: &State) -> std::result::Result<(), TestCaseError> {
            for scope in [Scope::Local, Scope::Global] {
                let mine: BTreeMap<Vec<u8>, Vec<u8>> =
                    want.iter().filter(|((s, _), _)| *s == scope).map(|((_, k), v)| (k.clone(), v.clone())).collect();
                prop_assert_eq!(engine.len(scope), mine.len());
                prop_assert_eq!(engine.bytes_used(scope), mine.iter().map(|(k, v)| k.len() + v.len()).sum::<usize>());
                for k in 0u8..6 {
                    let key = [b'k', k];
                    prop_assert_eq!(engine.read(scope, &key), mine.get(&key[..]).map(Vec::as_slice));
                }
            }
            Ok(())
        }

        proptest! {
            #[test]
            fn engine_matches_a_map(ops in proptest::collection::vec(op(), 1..120)) {
                let states = model_states(&ops);
                let mut engine = StorageEngine::in_memory();
                for (i, (op, seq)) in ops.iter().enumerate() {
                    engine.apply(&entry(i as u64 + 1, op, *seq)).unwrap();
                    check(&engine, &states[i + 1])?;
                }
            }

            #[test]
            fn recovery_after_a_kill_is_a_prefix(
                ops in proptest::collection::vec(op(), 1..80),
                every in 3u64..20,
                cut in any::<proptest::sample::Index>(),
            ) {
                let states = model_states(&ops);
                let dir = MemDir::new();
                let opts = StorageOptions { snapshot_every: every, ..StorageOptions::default() };
                let mut engine = StorageEngine::recover(Arc::new(dir.clone()), opts).unwrap();
                for (i, (op, seq)) in ops.iter().enumerate() {
                    engine.apply(&entry(i as u64 + 1, op, *seq)).unwrap();
                }
                drop(engine);
                let snapshotted = (ops.len() as u64 / every) * every;

                // Clean restart keeps everything.
                let back = StorageEngine::recover(Arc::new(dir.clone()), opts).unwrap();
                prop_assert_eq!(back.applied_index(), ops.len() as u64);
                check(&back, &states[ops.len()])?;
                drop(back);

                // A kill mid-append leaves any prefix of the WAL.
                let wal = dir.read(STATE_WAL).unwrap().unwrap_or_default();
                let keep = cut.index(wal.len() + 1);
                dir.put_raw(STATE_WAL, wal[..keep].to_vec());
                let back = StorageEngine::recover(Arc::new(dir.clone()), opts).unwrap();
                let at = back.applied_index();
                prop_assert!(at >= snapshotted && at <= ops.len() as u64);
                check(&back, &states[at as usize])?;
            }
        }
    }
}

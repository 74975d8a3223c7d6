//! The storage engine on disk: apply committed entries, snapshot, crash
//! with a torn WAL tail, recover.
//!
//!     cargo run --example storage_recovery

use std::sync::Arc;

use edgekv::storage::{FsDir, StorageEngine, StorageOptions, STATE_WAL};
use edgekv::wire::{Command, EntryPayload, LogEntry, RequestId, Scope};

fn put(index: u64, scope: Scope, key: &str, value: &str) -> LogEntry {
    let rid = RequestId { client: 1, seq: index };
    LogEntry { term: 1, index, payload: EntryPayload::Command(Command::put(scope, key, value, rid)) }
}

fn main() -> edgekv::Result<()> {
    let dir = std::env::temp_dir().join(format!("edgekv-storage-example-{}", std::process::id()));
    let opts = StorageOptions { snapshot_every: 4, ..StorageOptions::default() };
    let open = || -> edgekv::Result<StorageEngine> { StorageEngine::recover(Arc::new(FsDir::open(&dir)?), opts) };

    let mut s = open()?;
    for i in 1..=10 {
        let scope = if i % 3 == 0 { Scope::Global } else { Scope::Local };
        s.apply(&put(i, scope, &format!("k{}", i % 4), &format!("v{i}")))?;
    }
    println!("applied 10 entries: {} local keys, {} global keys", s.len(Scope::Local), s.len(Scope::Global));
    let before = s.state_hash();
    drop(s);

    let s = open()?;
    println!("clean restart: applied index {}, {} WAL records replayed on top of the snapshot, same state {}", s.applied_index(), s.replayed_records(), s.state_hash() == before);
    drop(s);

    // Lose the last few bytes of the WAL, as if the process died mid-append.
    let wal = dir.join(STATE_WAL);
    let len = std::fs::metadata(&wal)?.len();
    std::fs::OpenOptions::new().write(true).open(&wal)?.set_len(len - 5)?;
    let s = open()?;
    println!("torn tail: recovered to index {}, k2 = {:?}", s.applied_index(), s.read(Scope::Local, b"k2").map(String::from_utf8_lossy));

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

//! Linearizability checking of key-value histories.
//!
//! Each key is an independent register, so the history is split per key and
//! every key is checked with a depth-first search over candidate
//! linearizations (Wing and Gong), memoizing `(linearized set, state)` pairs
//! that already failed (Lowe). An operation whose outcome the client never
//! learned may take effect at any point after its invocation, or never.

use std::collections::{BTreeMap, HashSet};

use crate::transport::Tick;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum KvOp {
    Put(Vec<u8>),
    Delete,
    /// A read that returned this value (`None` = not found).
    Get(Option<Vec<u8>>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryOp {
    pub client: u64,
    pub key: Vec<u8>,
    pub op: KvOp,
    pub invoked: Tick,
    /// `None` when the outcome is unknown (timed out, never answered).
    pub returned: Option<Tick>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub key: Vec<u8>,
    pub ops: usize,
}

/// Checks every key; returns the keys whose sub-history has no
/// linearization. Reads with unknown outcome carry no information and are
/// dropped.
pub fn check(history: &[HistoryOp]) -> Vec<Violation> {
    let mut per_key: BTreeMap<&[u8], Vec<&HistoryOp>> = BTreeMap::new();
    for h in history {
        if matches!(h.op, KvOp::Get(_)) && h.returned.is_none() {
            continue;
        }
        per_key.entry(&h.key).or_default().push(h);
    }
    per_key
        .into_iter()
        .filter(|(_, ops)| !check_register(ops))
        .map(|(k, ops)| Violation { key: k.to_vec(), ops: ops.len() })
        .collect()
}

struct Entry<'a> {
    op: &'a KvOp,
    invoked: Tick,
    returned: Tick,
}

/// One register starting out absent.
fn check_register(ops: &[&HistoryOp]) -> bool {
    let mut entries: Vec<Entry> =
        ops.iter().map(|h| Entry { op: &h.op, invoked: h.invoked, returned: h.returned.unwrap_or(Tick::MAX) }).collect();
    entries.sort_by_key(|e| (e.invoked, e.returned));
    let required = entries.iter().filter(|e| e.returned != Tick::MAX).count();
    let mut search = Search { entries: &entries, done: vec![false; entries.len()], failed: HashSet::new(), required };
    search.dfs(None, 0)
}

struct Search<'a> {
    entries: &'a [Entry<'a>],
    done: Vec<bool>,
    failed: HashSet<(Vec<bool>, Option<Vec<u8>>)>,
    required: usize,
}

impl Search<'_> {
    fn dfs(&mut self, state: Option<Vec<u8>>, completed: usize) -> bool {
        if completed == self.required {
            return true;
        }
        let key = (self.done.clone(), state.clone());
        if self.failed.contains(&key) {
            return false;
        }
        // An op may go next only if no pending op finished before it began.
        let horizon = self.entries.iter().zip(&self.done).filter(|(_, d)| !**d).map(|(e, _)| e.returned).min().unwrap_or(Tick::MAX);
        for i in 0..self.entries.len() {
            if self.done[i] || self.entries[i].invoked > horizon {
                continue;
            }
            let e = &self.entries[i];
            let next = match e.op {
                KvOp::Put(v) => Some(v.clone()),
                KvOp::Delete => None,
                KvOp::Get(seen) => {
                    if *seen != state {
                        continue;
                    }
                    state.clone()
                }
            };
            let counts = usize::from(e.returned != Tick::MAX);
            self.done[i] = true;
            if self.dfs(next, completed + counts) {
                return true;
            }
            self.done[i] = false;
        }
        self.failed.insert(key);
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(client: u64, op: KvOp, invoked: Tick, returned: Option<Tick>) -> HistoryOp {
        HistoryOp { client, key: b"k".to_vec(), op, invoked, returned }
    }

    fn put(v: &str) -> KvOp {
        KvOp::Put(v.as_bytes().to_vec())
    }

    fn get(v: Option<&str>) -> KvOp {
        KvOp::Get(v.map(|s| s.as_bytes().to_vec()))
    }

    #[test]
    fn sequential_history_is_linearizable() {
        let h = [op(1, put("a"), 0, Some(1)), op(1, get(Some("a")), 2, Some(3)), op(1, KvOp::Delete, 4, Some(5)), op(1, get(None), 6, Some(7))];
        assert!(check(&h).is_empty());
    }

    #[test]
    fn stale_read_after_write_completes_is_a_violation() {
        let h = [op(1, put("a"), 0, Some(1)), op(1, put("b"), 2, Some(3)), op(2, get(Some("a")), 4, Some(5))];
        assert_eq!(check(&h).len(), 1);
    }

    #[test]
    fn concurrent_read_may_see_either_value() {
        for seen in ["a", "b"] {
            let h = [op(1, put("a"), 0, Some(1)), op(1, put("b"), 2, Some(10)), op(2, get(Some(seen)), 3, Some(5))];
            assert!(check(&h).is_empty(), "read of {seen}");
        }
    }

    #[test]
    fn read_of_never_written_value_is_a_violation() {
        let h = [op(1, put("a"), 0, Some(1)), op(2, get(Some("z")), 2, Some(3))];
        assert!(!check(&h).is_empty());
    }

    #[test]
    fn unknown_write_may_or_may_not_apply() {
        let applied = [op(1, put("a"), 0, None), op(2, get(Some("a")), 5, Some(6))];
        let skipped = [op(1, put("a"), 0, None), op(2, get(None), 5, Some(6))];
        assert!(check(&applied).is_empty());
        assert!(check(&skipped).is_empty());
    }

    #[test]
    fn unknown_write_cannot_apply_before_its_invocation() {
        let h = [op(2, get(Some("a")), 0, Some(1)), op(1, put("a"), 5, None)];
        assert!(!check(&h).is_empty());
    }

    #[test]
    fn reads_cannot_go_back_in_time() {
        // Once b is observed, a later read may not see a again.
        let h = [
            op(1, put("a"), 0, Some(1)),
            op(1, put("b"), 2, Some(20)),
            op(2, get(Some("b")), 3, Some(4)),
            op(3, get(Some("a")), 5, Some(6)),
        ];
        assert!(!check(&h).is_empty());
    }

    #[test]
    fn keys_are_independent() {
        let mut h = vec![op(1, put("a"), 0, Some(1))];
        h.push(HistoryOp { client: 2, key: b"other".to_vec(), op: get(None), invoked: 2, returned: Some(3) });
        assert!(check(&h).is_empty());
    }
}

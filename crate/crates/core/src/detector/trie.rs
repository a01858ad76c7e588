use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::flows::FrameKey;

use super::state::ReasoningState;

#[derive(Debug, Default)]
struct Node {
    children: BTreeMap<FrameKey, Node>,
    state: Option<Arc<ReasoningState>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrieCounters {
    pub hits: usize,
    pub misses: usize,
    pub states_stored: usize,
}

/// Reasoning states keyed by frame-key prefixes. Inserts are first-wins:
/// a later state for an occupied prefix is discarded.
#[derive(Debug, Default)]
pub struct PrefixTrie {
    root: Mutex<Node>,
    hits: AtomicUsize,
    misses: AtomicUsize,
    stored: AtomicUsize,
}

impl PrefixTrie {
    pub fn new() -> Self {
        Self::default()
    }

    /// States stored along the longest matching prefix of `keys`, one per
    /// depth starting at depth 1. Stops at the first depth without a state.
    pub fn longest_cached_prefix(&self, keys: &[FrameKey]) -> Vec<Arc<ReasoningState>> {
        let root = self.root.lock().expect("trie lock");
        let mut node = &*root;
        let mut out = Vec::new();
        for k in keys {
            match node.children.get(k) {
                Some(child) if child.state.is_some() => {
                    out.push(child.state.clone().unwrap());
                    node = child;
                }
                _ => break,
            }
        }
        self.hits.fetch_add(out.len(), Ordering::Relaxed);
        self.misses.fetch_add(keys.len() - out.len(), Ordering::Relaxed);
        out
    }

    /// Stores `state` at `prefix` unless one is already there. Returns the
    /// state that ends up stored.
    pub fn insert(&self, prefix: &[FrameKey], state: ReasoningState) -> Arc<ReasoningState> {
        let mut root = self.root.lock().expect("trie lock");
        let mut node = &mut *root;
        for k in prefix {
            node = node.children.entry(k.clone()).or_default();
        }
        match &node.state {
            Some(s) => s.clone(),
            None => {
                let s = Arc::new(state);
                node.state = Some(s.clone());
                self.stored.fetch_add(1, Ordering::Relaxed);
                s
            }
        }
    }

    pub fn counters(&self) -> TrieCounters {
        TrieCounters {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            states_stored: self.stored.load(Ordering::Relaxed),
        }
    }

    /// Number of nodes holding a state.
    pub fn stored_nodes(&self) -> usize {
        fn walk(n: &Node) -> usize {
            usize::from(n.state.is_some()) + n.children.values().map(walk).sum::<usize>()
        }
        walk(&self.root.lock().expect("trie lock"))
    }
}

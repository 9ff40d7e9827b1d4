use super::Interaction;
use crate::tensor::rng_from_seed;
use crate::textenc::{tokenize, TokenSeq, Vocab};
use rand::seq::{IndexedRandom, SliceRandom};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    User,
    Item,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub interaction: usize,
    pub tokens: TokenSeq,
}

/// Tokenized training reviews per user and per item. Immutable once built.
#[derive(Debug, Clone)]
pub struct HistoryIndex {
    users: HashMap<String, Vec<HistoryEntry>>,
    items: HashMap<String, Vec<HistoryEntry>>,
    max_len: usize,
}

/// Indexes only the interactions listed in `train`.
pub fn build_history_index(data: &[Interaction], train: &[usize], vocab: &Vocab, max_len: usize) -> HistoryIndex {
    let mut users: HashMap<String, Vec<HistoryEntry>> = HashMap::new();
    let mut items: HashMap<String, Vec<HistoryEntry>> = HashMap::new();
    for &id in train {
        let x = &data[id];
        let entry = HistoryEntry {
            interaction: id,
            tokens: tokenize(&x.text, vocab, max_len),
        };
        users.entry(x.user.clone()).or_default().push(entry.clone());
        items.entry(x.item.clone()).or_default().push(entry);
    }
    HistoryIndex { users, items, max_len }
}

impl HistoryIndex {
    pub fn entries(&self, side: Side, id: &str) -> &[HistoryEntry] {
        let map = match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        };
        map.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Total entries across one side.
    pub fn size(&self, side: Side) -> usize {
        match side {
            Side::User => self.users.values().map(Vec::len).sum(),
            Side::Item => self.items.values().map(Vec::len).sum(),
        }
    }

    /// Every interaction id referenced by either side.
    pub fn interaction_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.users
            .values()
            .chain(self.items.values())
            .flat_map(|v| v.iter().map(|e| e.interaction))
    }

    /// The k picks as positions into `entries(side, id)`; `None` marks a
    /// placeholder.
    pub fn sample_positions(&self, side: Side, id: &str, k: usize, exclude: Option<usize>, seed: u64) -> Vec<Option<usize>> {
        let candidates: Vec<usize> = self
            .entries(side, id)
            .iter()
            .enumerate()
            .filter(|(_, e)| Some(e.interaction) != exclude)
            .map(|(pos, _)| pos)
            .collect();
        let mut rng = rng_from_seed(seed);
        if candidates.is_empty() {
            vec![None; k]
        } else if candidates.len() >= k {
            let mut picked = candidates;
            picked.shuffle(&mut rng);
            picked.truncate(k);
            picked.into_iter().map(Some).collect()
        } else {
            (0..k).map(|_| candidates.choose(&mut rng).copied()).collect()
        }
    }
}

/// k token sequences for one entity, never including `exclude`. Samples
/// without replacement when enough entries remain, with replacement when
/// some do, and returns `[CLS] [UNK]` placeholders when none do.
pub fn sample_history(
    index: &HistoryIndex,
    side: Side,
    id: &str,
    k: usize,
    exclude: Option<usize>,
    seed: u64,
) -> Vec<TokenSeq> {
    let entries = index.entries(side, id);
    index
        .sample_positions(side, id, k, exclude, seed)
        .into_iter()
        .map(|p| match p {
            Some(pos) => entries[pos].tokens.clone(),
            None => TokenSeq::placeholder(index.max_len),
        })
        .collect()
}

//! Review ingestion, seeded 8:1:1 splits, training-only history indices,
//! synthetic two-domain corpora and centroid-based domain similarity.

mod history;
mod similarity;
mod synth;

pub use history::{build_history_index, sample_history, HistoryEntry, HistoryIndex, Side};
pub use similarity::{domain_similarity, ClsEncoder, TextEncoder, DEFAULT_SIM_SAMPLES};
pub use synth::{gen_synthetic, recover_rating, SynthCorpus, SynthDomain, SynthSpec};

use crate::error::{data_err, LoidError, Result};
use crate::format::write_atomic;
use crate::tensor::{derive_seed, rng_from_seed};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One review; its interaction id is its position in the loaded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub text: String,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, rating: f64, text: impl Into<String>) -> Result<Self> {
        let i = Self {
            user: user.into(),
            item: item.into(),
            rating,
            text: text.into(),
        };
        i.validate()?;
        Ok(i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.user.is_empty() || self.item.is_empty() {
            return Err(data_err("user and item ids must be non-empty"));
        }
        if !(1.0..=5.0).contains(&self.rating) {
            return Err(data_err(format!("rating {} outside [1, 5]", self.rating)));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ReviewRecord {
    reviewerID: String,
    asin: String,
    overall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reviewText: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub interactions: Vec<Interaction>,
    /// Records without `reviewText`, dropped during loading.
    pub skipped: usize,
}

/// Parses Amazon-schema JSON Lines. Blank lines are ignored.
pub fn load_reviews(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path)?;
    parse_reviews(&text, path)
}

pub fn parse_reviews(text: &str, path: &Path) -> Result<Loaded> {
    let mut interactions = Vec::new();
    let mut skipped = 0;
    let parse_err = |line: usize, msg: String| LoidError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReviewRecord = serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let Some(text) = rec.reviewText else {
            skipped += 1;
            continue;
        };
        let i = Interaction {
            user: rec.reviewerID,
            item: rec.asin,
            rating: rec.overall,
            text,
        };
        i.validate().map_err(|e| parse_err(line_no, e.to_string()))?;
        interactions.push(i);
    }
    if skipped > 0 {
        tracing::warn!(path = %path.display(), skipped, "skipped records without reviewText");
    }
    if interactions.is_empty() {
        tracing::warn!(path = %path.display(), "no reviews loaded");
    }
    Ok(Loaded { interactions, skipped })
}

pub fn to_jsonl(interactions: &[Interaction]) -> Result<String> {
    let mut out = String::new();
    for i in interactions {
        let rec = ReviewRecord {
            reviewerID: i.user.clone(),
            asin: i.item.clone(),
            overall: i.rating,
            reviewText: Some(i.text.clone()),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_reviews(path: &Path, interactions: &[Interaction]) -> Result<()> {
    write_atomic(path, to_jsonl(interactions)?.as_bytes())
}

/// Interaction ids of the three partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const MIN_SPLIT_RECORDS: usize = 10;

/// Seeded shuffle of `0..n`, then `⌊n/10⌋` to validation, `⌊n/10⌋` to test
/// and the remainder to training.
pub fn split(n: usize, seed: u64) -> Result<Split> {
    if n < MIN_SPLIT_RECORDS {
        return Err(data_err(format!(
            "need at least {MIN_SPLIT_RECORDS} interactions to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, 0x53504c)));
    let tenth = n / 10;
    let test = order.split_off(n - tenth);
    let val = order.split_off(n - 2 * tenth);
    Ok(Split { train: order, val, test })
}

/// Distinct users and items in first-appearance order.
pub fn entity_universe(interactions: &[Interaction]) -> (Vec<String>, Vec<String>) {
    let mut seen_u = std::collections::HashSet::new();
    let mut seen_i = std::collections::HashSet::new();
    let mut users = Vec::new();
    let mut items = Vec::new();
    for x in interactions {
        if seen_u.insert(x.user.as_str()) {
            users.push(x.user.clone());
        }
        if seen_i.insert(x.item.as_str()) {
            items.push(x.item.clone());
        }
    }
    (users, items)
}

use crate::error::{data_err, LoidError, Result};
use crate::format::write_atomic;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub const CLS: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD: u32 = 2;
pub const RESERVED: [&str; 3] = ["[CLS]", "[UNK]", "[PAD]"];

/// Dense token→id map with the three reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_freq: Option<usize>,
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Builds a vocabulary of every word seen at least `min_freq` times.
/// Ids follow first occurrence in corpus order.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(data_err("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order = Vec::new();
    for doc in corpus {
        for w in words(doc.as_ref()) {
            let c = counts.entry(w.clone()).or_insert(0);
            if *c == 0 {
                order.push(w);
            }
            *c += 1;
        }
    }
    let kept = order
        .into_iter()
        .filter(|w| counts[w] >= min_freq && !RESERVED.contains(&w.as_str()));
    let mut vocab = Vocab::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(kept))?;
    vocab.min_freq = Some(min_freq);
    Ok(vocab)
}

impl Vocab {
    /// Builds from an ordered token list whose first three entries are the
    /// reserved tokens.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < 3 || tokens[..3] != RESERVED {
            return Err(LoidError::Format(
                "vocabulary must start with [CLS], [UNK], [PAD]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(LoidError::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self {
            tokens,
            index,
            min_freq: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> Option<usize> {
        self.min_freq
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string))
            .map_err(|e| LoidError::Format(format!("{}: {e}", path.display())))
    }
}

/// Token ids of one review plus the validity mask (false on padding).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    /// `[CLS] [UNK]` padded to `max_len`; stands in for an empty history.
    pub fn placeholder(max_len: usize) -> Self {
        let mut ids = vec![PAD; max_len.max(2)];
        ids[0] = CLS;
        ids[1] = UNK;
        let mask = ids.iter().map(|&i| i != PAD).collect();
        Self { ids, mask }
    }

    /// Number of leading non-padding positions.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }
}

/// `[CLS]` followed by vocabulary ids, truncated and padded to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(words(text).take(max_len - 1).map(|w| vocab.id(&w)));
    let mut mask = vec![true; ids.len()];
    ids.resize(max_len, PAD);
    mask.resize(max_len, false);
    TokenSeq { ids, mask }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab() -> Vocab {
        Vocab::from_tokens(
            ["[CLS]", "[UNK]", "[PAD]", "great", "sound"]
                .iter()
                .map(|s| s.to_string()),
        )
        .unwrap()
    }

    #[test]
    fn min_freq_filters_rare_words() {
        let v = build_vocab(&["great great sound", "great price"], 2).unwrap();
        assert!(v.contains("great"));
        assert_eq!(v.id("sound"), UNK);
        assert_eq!(v.id("price"), UNK);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn single_word_corpus() {
        let v = build_vocab(&["a"], 1).unwrap();
        assert_eq!(v.tokens(), &["[CLS]", "[UNK]", "[PAD]", "a"]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(build_vocab(&empty, 1).is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = small_vocab();
        let t = tokenize("Great sound!!", &v, 4);
        assert_eq!(t.ids, vec![0, 3, 4, 2]);
        assert_eq!(t.mask, vec![true, true, true, false]);
        assert_eq!(tokenize("", &v, 3).ids, vec![0, 2, 2]);
        assert_eq!(tokenize("Zzyx", &v, 3).ids, vec![0, 1, 2]);
        assert_eq!(tokenize("great great great great", &v, 3).ids, vec![0, 3, 3]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let v = build_vocab(&["hello world", "world"], 1).unwrap();
        v.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[CLS]\n[UNK]\n[PAD]\nhello\nworld"));
        let back = Vocab::load(&path).unwrap();
        assert_eq!(back.tokens(), v.tokens());
    }

    #[test]
    fn vocab_file_requires_reserved_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        fs::write(&path, "[UNK]\n[CLS]\n[PAD]\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }
}

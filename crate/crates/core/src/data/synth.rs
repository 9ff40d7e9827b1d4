use super::Interaction;
use crate::error::{config_err, Result};
use crate::tensor::{derive_seed, rng_from_seed, Rng};
use crate::textenc::words;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Two-domain synthetic review corpus.
///
/// Every user carries a bias and every item a quality, both normal with
/// standard deviation `entity_std`.
/// A review holds `sentiment_tokens` sentiment words, of which
/// `m ~ Binomial(sentiment_tokens, sigmoid(bias + quality))` are positive, and
/// its rating is `1 + round(4m / sentiment_tokens)`. Each sentiment word is
/// followed by a domain noise word with probability `noise_rate`; the word
/// order is then shuffled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Reviews per domain.
    pub n_interactions: usize,
    /// Words per polarity in each domain's sentiment lexicon.
    pub lexicon_size: usize,
    /// Fraction of each polarity lexicon common to both domains.
    pub shared_fraction: f64,
    pub noise_rate: f64,
    pub sentiment_tokens: usize,
    pub entity_std: f64,
    pub domain_names: [String; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 40,
            n_items: 40,
            n_interactions: 600,
            lexicon_size: 20,
            shared_fraction: 0.8,
            noise_rate: 0.5,
            sentiment_tokens: 4,
            entity_std: 1.0,
            domain_names: ["src".into(), "tgt".into()],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.n_interactions == 0 {
            return Err(config_err("synthetic counts must be at least 1"));
        }
        if self.lexicon_size == 0 || self.sentiment_tokens == 0 {
            return Err(config_err("lexicon size and sentiment tokens must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(config_err(format!("shared fraction {} outside [0, 1]", self.shared_fraction)));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(config_err(format!("noise rate {} outside [0, 1]", self.noise_rate)));
        }
        if !(self.entity_std >= 0.0 && self.entity_std.is_finite()) {
            return Err(config_err(format!("entity_std {} must be finite and non-negative", self.entity_std)));
        }
        let [a, b] = &self.domain_names;
        let valid = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric());
        if a == b || !valid(a) || !valid(b) {
            return Err(config_err("domain names must be distinct and alphanumeric"));
        }
        Ok(())
    }

    fn n_shared(&self) -> usize {
        (self.shared_fraction * self.lexicon_size as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDomain {
    pub name: String,
    pub interactions: Vec<Interaction>,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub noise: Vec<String>,
    pub sentiment_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub domains: [SynthDomain; 2],
}

fn lexicon(spec: &SynthSpec, domain: &str, polarity: &str) -> Vec<String> {
    let shared = spec.n_shared();
    (0..spec.lexicon_size)
        .map(|j| {
            if j < shared {
                format!("{polarity}{j}")
            } else {
                format!("{domain}{polarity}{j}")
            }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn quantize(positive: usize, total: usize) -> f64 {
    1.0 + (4.0 * positive as f64 / total as f64).round()
}

fn gen_domain(spec: &SynthSpec, index: usize) -> SynthDomain {
    let name = spec.domain_names[index].clone();
    let positive = lexicon(spec, &name, "pos");
    let negative = lexicon(spec, &name, "neg");
    let noise: Vec<String> = (0..spec.lexicon_size).map(|j| format!("{name}noise{j}")).collect();
    let mut rng: Rng = rng_from_seed(derive_seed(spec.seed, index as u64));
    let normal = Normal::new(0.0, spec.entity_std).expect("validated std");
    let bias: Vec<f64> = (0..spec.n_users).map(|_| normal.sample(&mut rng)).collect();
    let quality: Vec<f64> = (0..spec.n_items).map(|_| normal.sample(&mut rng)).collect();
    let n = spec.sentiment_tokens;
    let mut interactions = Vec::with_capacity(spec.n_interactions);
    for _ in 0..spec.n_interactions {
        let u = rng.random_range(0..spec.n_users);
        let i = rng.random_range(0..spec.n_items);
        let p = sigmoid(bias[u] + quality[i]);
        let m = Binomial::new(n as u64, p).expect("p in [0,1]").sample(&mut rng) as usize;
        let mut toks: Vec<&str> = Vec::with_capacity(2 * n);
        for s in 0..n {
            let lex = if s < m { &positive } else { &negative };
            toks.push(lex.choose(&mut rng).expect("non-empty lexicon"));
            if rng.random::<f64>() < spec.noise_rate {
                toks.push(noise.choose(&mut rng).expect("non-empty noise"));
            }
        }
        toks.shuffle(&mut rng);
        interactions.push(Interaction {
            user: format!("{name}-u{u}"),
            item: format!("{name}-i{i}"),
            rating: quantize(m, n),
            text: toks.join(" "),
        });
    }
    SynthDomain {
        name,
        interactions,
        positive,
        negative,
        noise,
        sentiment_tokens: n,
    }
}

pub fn gen_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    Ok(SynthCorpus {
        spec: spec.clone(),
        domains: [gen_domain(spec, 0), gen_domain(spec, 1)],
    })
}

/// Rating implied by the sentiment words of `text`, or `None` if the text does
/// not hold exactly the domain's number of sentiment words.
pub fn recover_rating(text: &str, domain: &SynthDomain) -> Option<f64> {
    let pos: HashSet<&str> = domain.positive.iter().map(String::as_str).collect();
    let neg: HashSet<&str> = domain.negative.iter().map(String::as_str).collect();
    let (mut p, mut q) = (0, 0);
    for w in words(text) {
        if pos.contains(w.as_str()) {
            p += 1;
        } else if neg.contains(w.as_str()) {
            q += 1;
        }
    }
    (p + q == domain.sentiment_tokens).then(|| quantize(p, domain.sentiment_tokens))
}

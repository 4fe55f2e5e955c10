use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{tokenize, RawDialogue};
use crate::error::{contract, Result};

/// Inverted index over a response pool with tf-idf statistics.
#[derive(Clone, Debug)]
pub struct CandidateIndex {
    pool: Vec<String>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    stop_words: HashSet<String>,
}

/// Pool indices of retrieved responses, best first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Retrieval {
    pub items: Vec<usize>,
    /// The query was empty and items are ordered by global frequency.
    pub fallback: bool,
}

impl CandidateIndex {
    pub fn build(pool: Vec<String>) -> Result<Self> {
        if pool.is_empty() {
            return contract("candidate pool is empty");
        }
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        for (doc, text) in pool.iter().enumerate() {
            let mut tf: HashMap<&str, u32> = HashMap::new();
            for tok in tokenize(text) {
                *tf.entry(tok).or_default() += 1;
            }
            for (tok, count) in tf {
                postings.entry(tok.to_string()).or_default().push((doc, count));
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable();
        }
        Ok(Self {
            pool,
            postings,
            stop_words: HashSet::new(),
        })
    }

    pub fn with_stop_words<I: IntoIterator<Item = String>>(mut self, words: I) -> Self {
        self.stop_words = words.into_iter().collect();
        self
    }

    pub fn pool(&self) -> &[String] {
        &self.pool
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// `ln((N + 1) / (df + 1)) + 1`
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.pool.len() as f64;
        ((n + 1.0) / (self.document_frequency(term) as f64 + 1.0)).ln() + 1.0
    }

    /// Top-`k` context tokens by count × idf, ties broken lexicographically.
    pub fn keywords(&self, context: &[String], k: usize) -> Vec<String> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for u in context {
            for tok in tokenize(u) {
                if !self.stop_words.contains(tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut weighted: Vec<(&str, f64)> = counts
            .into_iter()
            .map(|(t, c)| (t, c as f64 * self.idf(t)))
            .collect();
        weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        weighted.into_iter().take(k).map(|(t, _)| t.to_string()).collect()
    }

    /// Distinct, sorted query terms: the last utterance plus the top-5
    /// context keywords, minus stop words.
    pub fn query_terms(&self, last_utterance: &str, context: &[String]) -> Vec<String> {
        let mut terms: BTreeSet<String> = tokenize(last_utterance)
            .filter(|t| !self.stop_words.contains(*t))
            .map(str::to_string)
            .collect();
        terms.extend(self.keywords(context, 5));
        terms.into_iter().collect()
    }

    /// `Σ_q tf(q, doc) · idf(q)` for every pool document.
    pub fn score_all(&self, terms: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.pool.len()];
        for term in terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for &(doc, tf) in list {
                scores[doc] += tf as f64 * idf;
            }
        }
        scores
    }

    /// Top-`k` distinct responses for the query built from the dialogue.
    /// Responses equal to `exclude` are never returned.
    pub fn retrieve(
        &self,
        last_utterance: &str,
        context: &[String],
        k: usize,
        exclude: Option<&str>,
    ) -> Result<Retrieval> {
        if k > self.pool.len() {
            return contract(format!("k = {k} exceeds pool size {}", self.pool.len()));
        }
        let terms = self.query_terms(last_utterance, context);
        let (order, fallback) = if terms.is_empty() {
            (self.by_frequency(), true)
        } else {
            let scores = self.score_all(&terms);
            let mut order: Vec<usize> = (0..self.pool.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            (order, false)
        };
        let mut seen: HashSet<&str> = HashSet::new();
        let items = order
            .into_iter()
            .filter(|&i| Some(self.pool[i].as_str()) != exclude && seen.insert(self.pool[i].as_str()))
            .take(k)
            .collect();
        Ok(Retrieval { items, fallback })
    }

    /// Pool positions ordered by how often their text occurs, then by first
    /// appearance.
    fn by_frequency(&self) -> Vec<usize> {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for r in &self.pool {
            *freq.entry(r.as_str()).or_default() += 1;
        }
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.sort_by(|&a, &b| freq[self.pool[b].as_str()].cmp(&freq[self.pool[a].as_str()]));
        order
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Uniform negatives from the pool.
    Train,
    /// Negatives retrieved by the keyword query.
    Test,
}

/// Emits each positive followed by `ratio` label-0 copies with other
/// responses. Deterministic under `seed`.
pub fn negative_sample(
    positives: &[RawDialogue],
    pool: &[String],
    ratio: usize,
    mode: SamplingMode,
    seed: u64,
) -> Result<Vec<RawDialogue>> {
    if ratio == 0 {
        return contract("negative ratio must be at least 1");
    }
    let mut distinct: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for r in pool {
        if seen.insert(r.as_str()) {
            distinct.push(r);
        }
    }
    let index = match mode {
        SamplingMode::Test => Some(CandidateIndex::build(pool.to_vec())?),
        SamplingMode::Train => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(positives.len() * (ratio + 1));

    for (i, pos) in positives.iter().enumerate() {
        let negatives: Vec<String> = match &index {
            None => {
                let candidates: Vec<&str> = distinct
                    .iter()
                    .copied()
                    .filter(|r| *r != pos.response)
                    .collect();
                if candidates.len() < ratio {
                    return contract(format!(
                        "pool exhausted at positive {i}: {} candidates for ratio {ratio}",
                        candidates.len()
                    ));
                }
                index::sample(&mut rng, candidates.len(), ratio)
                    .into_iter()
                    .map(|j| candidates[j].to_string())
                    .collect()
            }
            Some(idx) => {
                let k = ratio.min(idx.len());
                let got = idx.retrieve(pos.last_utterance(), &pos.context, k, Some(&pos.response))?;
                if got.items.len() < ratio {
                    return contract(format!(
                        "pool exhausted at positive {i}: retrieved {} of {ratio}",
                        got.items.len()
                    ));
                }
                got.items.into_iter().map(|j| idx.pool()[j].clone()).collect()
            }
        };
        out.push(RawDialogue {
            label: 1,
            ..pos.clone()
        });
        for response in negatives {
            out.push(RawDialogue {
                label: 0,
                context: pos.context.clone(),
                response,
                category: pos.category.clone(),
            });
        }
    }
    Ok(out)
}

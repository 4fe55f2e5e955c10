//! TF-IDF cosine matching between a whole context and a response.

use std::collections::{BTreeMap, HashMap};

use crate::data::{tokenize, RawDialogue};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TfidfModel {
    df: HashMap<String, usize>,
    documents: usize,
}

impl TfidfModel {
    /// Counts document frequencies. Every context (utterances joined) and
    /// every response is one document.
    pub fn fit(corpus: &[RawDialogue]) -> Self {
        let mut model = Self::default();
        for d in corpus {
            model.add_document(&d.context.join(" "));
            model.add_document(&d.response);
        }
        model
    }

    pub fn from_documents<'a, I: IntoIterator<Item = &'a str>>(docs: I) -> Self {
        let mut model = Self::default();
        for d in docs {
            model.add_document(d);
        }
        model
    }

    fn add_document(&mut self, text: &str) {
        let mut terms: Vec<&str> = tokenize(text).collect();
        terms.sort_unstable();
        terms.dedup();
        for t in terms {
            *self.df.entry(t.to_string()).or_default() += 1;
        }
        self.documents += 1;
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    /// `ln((N + 1) / (df + 1)) + 1`; unseen terms get `df = 0`.
    pub fn idf(&self, term: &str) -> f64 {
        ((self.documents as f64 + 1.0) / (self.document_frequency(term) as f64 + 1.0)).ln() + 1.0
    }

    pub fn vector(&self, text: &str) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in tokenize(text) {
            *tf.entry(t.to_string()).or_default() += 1.0;
        }
        for (t, w) in tf.iter_mut() {
            *w *= self.idf(t);
        }
        tf
    }

    /// Cosine similarity of two texts; 0 when either has no tokens.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        let va = self.vector(a);
        let vb = self.vector(b);
        let dot: f64 = va.iter().filter_map(|(t, x)| vb.get(t).map(|y| x * y)).sum();
        let na = va.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.values().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na * nb)).clamp(0.0, 1.0)
        }
    }

    pub fn score(&self, context: &[String], response: &str) -> f64 {
        self.similarity(&context.join(" "), response)
    }
}

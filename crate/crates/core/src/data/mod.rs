//! Corpus ingestion: TSV dialogues, vocabulary, truncation/padding into
//! [`EncodedSample`]s, plus candidate retrieval and negative sampling.
//!
//! Text is assumed pre-tokenized; tokens are whitespace separated.

mod retrieval;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

pub use retrieval::{negative_sample, CandidateIndex, Retrieval, SamplingMode};

use crate::error::{DuaError, Result};
use crate::model::DuaConfig;
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// One ⟨context, response, label⟩ triple as text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDialogue {
    pub label: u8,
    pub context: Vec<String>,
    pub response: String,
    pub category: Option<String>,
}

impl RawDialogue {
    pub fn new(label: u8, context: Vec<String>, response: impl Into<String>) -> Self {
        Self {
            label,
            context,
            response: response.into(),
            category: None,
        }
    }

    pub fn last_utterance(&self) -> &str {
        self.context.last().map(String::as_str).unwrap_or("")
    }

    /// One TSV line without the trailing newline.
    pub fn to_tsv_line(&self) -> String {
        let mut fields = Vec::with_capacity(self.context.len() + 2);
        fields.push(match &self.category {
            Some(c) => format!("{}:{}", self.label, c),
            None => self.label.to_string(),
        });
        fields.extend(self.context.iter().cloned());
        fields.push(self.response.clone());
        fields.join("\t")
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Parses `label TAB utt₁ TAB … TAB utt_t TAB response` lines. The label
/// field may carry a category as `label:category`.
pub fn parse_tsv_corpus<R: Read>(reader: R) -> Result<Vec<RawDialogue>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(DuaError::Parse {
                line: line_no,
                msg: format!("expected at least 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let (label_text, category) = match fields[0].split_once(':') {
            Some((l, c)) => (l, Some(c.to_string())),
            None => (fields[0], None),
        };
        let label = match label_text.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DuaError::Parse {
                    line: line_no,
                    msg: format!("label must be 0 or 1, got `{other}`"),
                })
            }
        };
        out.push(RawDialogue {
            label,
            context: fields[1..fields.len() - 1].iter().map(|s| s.to_string()).collect(),
            response: fields[fields.len() - 1].to_string(),
            category,
        });
    }
    Ok(out)
}

pub fn load_tsv_corpus(path: impl AsRef<Path>) -> Result<Vec<RawDialogue>> {
    parse_tsv_corpus(fs::File::open(path)?)
}

pub fn write_tsv_corpus(dialogues: &[RawDialogue]) -> String {
    dialogues
        .iter()
        .map(|d| d.to_tsv_line() + "\n")
        .collect()
}

/// One response per non-empty line.
pub fn load_pool(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Keeps the last `max_utterances` turns.
pub fn truncate_keep_latest<T: Clone>(context: &[T], max_utterances: usize) -> Vec<T> {
    let start = context.len().saturating_sub(max_utterances);
    context[start..].to_vec()
}

/// Token ↔ id map with PAD = 0 and UNK = 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// PAD and UNK followed by `tokens` (duplicates ignored).
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(tokens.into_iter().map(Into::into))
        {
            if !vocab.index.contains_key(&t) {
                vocab.index.insert(t.clone(), vocab.tokens.len() as u32);
                vocab.tokens.push(t);
            }
        }
        vocab
    }

    /// Counts tokens over contexts and responses; tokens seen fewer than
    /// `min_count` times are left out (and encode to UNK). Ids are assigned
    /// by descending count, then lexicographically.
    pub fn build(corpus: &[RawDialogue], min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for d in corpus {
            for text in d.context.iter().chain(std::iter::once(&d.response)) {
                for tok in tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `token TAB id` per line.
    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| DuaError::Parse {
                line: i + 1,
                msg: "expected `token<TAB>id`".into(),
            })?;
            let id: usize = id.trim().parse().map_err(|_| DuaError::Parse {
                line: i + 1,
                msg: format!("bad id `{id}`"),
            })?;
            if id != tokens.len() {
                return Err(DuaError::Parse {
                    line: i + 1,
                    msg: format!("ids must be dense and ordered, expected {} got {id}", tokens.len()),
                });
            }
            tokens.push(tok.to_string());
        }
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(DuaError::Parse {
                line: 1,
                msg: format!("ids 0 and 1 must be {PAD_TOKEN} and {UNK_TOKEN}"),
            });
        }
        let vocab = Self::from_tokens(tokens[2..].iter().cloned());
        if vocab.len() != tokens.len() {
            return Err(DuaError::Parse {
                line: 0,
                msg: "duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// A dialogue as fixed-shape, zero-padded id matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    /// `max_utterances × max_words`; turns occupy the first `turns` rows.
    pub utterances: Vec<Vec<u32>>,
    pub utterance_lengths: Vec<usize>,
    pub turns: usize,
    /// `max_words` ids.
    pub response: Vec<u32>,
    pub response_length: usize,
    pub label: u8,
}

impl EncodedSample {
    pub fn utterance_ids(&self, k: usize) -> &[u32] {
        &self.utterances[k][..self.utterance_lengths[k]]
    }

    pub fn response_ids(&self) -> &[u32] {
        &self.response[..self.response_length]
    }

    /// Same sample with another label.
    pub fn with_label(&self, label: u8) -> Self {
        Self {
            label,
            ..self.clone()
        }
    }
}

fn encode_text(text: &str, vocab: &Vocabulary, max_words: usize) -> (Vec<u32>, usize) {
    let mut ids: Vec<u32> = tokenize(text).take(max_words).map(|t| vocab.id(t)).collect();
    let len = ids.len();
    ids.resize(max_words, PAD);
    (ids, len)
}

/// Truncates (latest turns, first words), maps tokens to ids and pads.
/// Utterances with no tokens are dropped. An empty context or response
/// yields [`DuaError::EmptySample`].
pub fn encode(raw: &RawDialogue, vocab: &Vocabulary, config: &DuaConfig) -> Result<EncodedSample> {
    let non_empty: Vec<&String> = raw
        .context
        .iter()
        .filter(|u| tokenize(u).next().is_some())
        .collect();
    if non_empty.is_empty() {
        return Err(DuaError::EmptySample("context has no tokens".into()));
    }
    let kept = truncate_keep_latest(&non_empty, config.max_utterances);
    let (response, response_length) = encode_text(&raw.response, vocab, config.max_words);
    if response_length == 0 {
        return Err(DuaError::EmptySample("response has no tokens".into()));
    }

    let mut utterances = vec![vec![PAD; config.max_words]; config.max_utterances];
    let mut utterance_lengths = vec![0; config.max_utterances];
    for (k, u) in kept.iter().enumerate() {
        let (ids, len) = encode_text(u, vocab, config.max_words);
        utterances[k] = ids;
        utterance_lengths[k] = len;
    }
    Ok(EncodedSample {
        utterances,
        utterance_lengths,
        turns: kept.len(),
        response,
        response_length,
        label: raw.label,
    })
}

/// Encodes a corpus, logging and skipping samples that encode to nothing.
pub fn encode_corpus(corpus: &[RawDialogue], vocab: &Vocabulary, config: &DuaConfig) -> Result<Vec<EncodedSample>> {
    let mut out = Vec::with_capacity(corpus.len());
    for (i, raw) in corpus.iter().enumerate() {
        match encode(raw, vocab, config) {
            Ok(s) => out.push(s),
            Err(DuaError::EmptySample(why)) => log::warn!("skipping sample {i}: {why}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Tokens of each retained utterance and of the response.
pub fn decode(sample: &EncodedSample, vocab: &Vocabulary) -> (Vec<Vec<String>>, Vec<String>) {
    let words = |ids: &[u32]| -> Vec<String> {
        ids.iter()
            .map(|&i| vocab.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    };
    let context = (0..sample.turns).map(|k| words(sample.utterance_ids(k))).collect();
    (context, words(sample.response_ids()))
}

/// Overwrites rows of `table` with vectors from a text embedding file
/// (`count dim` header, then `token v₁ … v_dim`). Returns how many
/// vocabulary tokens were found.
pub fn load_pretrained_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary, table: &mut Tensor) -> Result<usize> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DuaError::Parse {
        line: 1,
        msg: "empty embedding file".into(),
    })?;
    let mut head = header.split_whitespace();
    let parse_head = |s: Option<&str>| -> Result<usize> {
        s.and_then(|v| v.parse().ok()).ok_or_else(|| DuaError::Parse {
            line: 1,
            msg: format!("expected `count dim` header, got `{header}`"),
        })
    };
    let _count = parse_head(head.next())?;
    let dim = parse_head(head.next())?;
    if table.rank() != 2 || dim != table.cols() {
        return Err(DuaError::Dimension {
            op: "load_pretrained_embeddings",
            left: vec![dim],
            right: table.shape().to_vec(),
        });
    }
    let mut found = 0;
    for (i, line) in lines {
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DuaError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(DuaError::Parse {
                line: i + 1,
                msg: format!("expected {dim} values, got {}", values.len()),
            });
        }
        if let Some(&id) = vocab.index.get(tok) {
            if id != PAD {
                let row = id as usize;
                table.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(&values);
                found += 1;
            }
        }
    }
    Ok(found)
}

//! Browser demo: train a toy model on synthetic dialogues, rank candidate
//! responses and inspect attention weights.
//!
//! [`Demo`] holds the state and is plain Rust; [`WebDemo`] exposes it to
//! JavaScript with JSON strings as the exchange format.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use dua::data::{decode, encode, encode_corpus, EncodedSample, RawDialogue, Vocabulary};
use dua::eval::evaluate_model;
use dua::export::attention_exports;
use dua::fixtures::{lexical_pairs, toy_config};
use dua::model::{Dua, DuaConfig};
use dua::numerics::Gradients;
use dua::training::{accuracy, adam_step, batch_gradients, AdamState};

/// Words in the synthetic vocabulary.
pub const DEMO_WORDS: usize = 20;
const CONTEXTS: usize = 25;
const BATCH: usize = 10;
const CLIP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    /// R2@1 on held-out pairs.
    pub validation: f64,
}

pub struct Demo {
    vocab: Vocabulary,
    model: Dua,
    adam: AdamState,
    train: Vec<EncodedSample>,
    valid: Vec<EncodedSample>,
    valid_raw: Vec<RawDialogue>,
    rng: ChaCha8Rng,
    epoch: usize,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl Demo {
    pub fn new(seed: u64) -> Result<Self, String> {
        let train_raw = lexical_pairs(CONTEXTS, DEMO_WORDS, seed);
        let valid_raw = lexical_pairs(CONTEXTS, DEMO_WORDS, seed.wrapping_add(1));
        let vocab = Vocabulary::build(&train_raw, 1);
        let config = DuaConfig {
            seed,
            init_scale: 0.3,
            ..toy_config(vocab.len(), 3, 6, 8)
        };
        let model = Dua::new(config).map_err(err)?;
        Ok(Self {
            adam: AdamState::new(&model.params, 0.001),
            train: encode_corpus(&train_raw, &vocab, &model.config).map_err(err)?,
            valid: encode_corpus(&valid_raw, &vocab, &model.config).map_err(err)?,
            valid_raw,
            vocab,
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn model(&self) -> &Dua {
        &self.model
    }

    /// Runs `n` more epochs; the optimiser state carries over between calls.
    pub fn train_epochs(&mut self, n: usize) -> Result<Vec<EpochSummary>, String> {
        let mut out = Vec::with_capacity(n);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        for _ in 0..n {
            order.shuffle(&mut self.rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(BATCH) {
                let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &self.train[i]).collect();
                let (loss, mut grads): (f64, Gradients) =
                    batch_gradients(&self.model.config, &self.model.params, &batch).map_err(err)?;
                if !loss.is_finite() {
                    return Err(format!("loss is {loss} at epoch {}", self.epoch + 1));
                }
                grads.clip_global_norm(CLIP);
                adam_step(&mut self.model.params, &grads, &mut self.adam).map_err(err)?;
                loss_sum += loss * batch.len() as f64;
            }
            self.epoch += 1;
            out.push(EpochSummary {
                epoch: self.epoch,
                loss: loss_sum / self.train.len() as f64,
                train_accuracy: accuracy(&self.model, &self.train).map_err(err)?,
                validation: evaluate_model(&self.model, &self.valid, None, 2).map_err(err)?.r_at_1,
            });
        }
        Ok(out)
    }

    fn sample(&self, context: &str, response: &str) -> Result<EncodedSample, String> {
        let turns: Vec<String> = context.split("||").map(|u| u.trim().to_string()).collect();
        if turns.iter().any(String::is_empty) {
            return Err("every utterance between `||` needs at least one word".into());
        }
        encode(&RawDialogue::new(0, turns, response), &self.vocab, &self.model.config).map_err(err)
    }

    /// Scores each non-empty line of `candidates`, best first.
    pub fn rank(&self, context: &str, candidates: &str) -> Result<Vec<(String, f64)>, String> {
        let mut out = Vec::new();
        for c in candidates.lines().map(str::trim).filter(|c| !c.is_empty()) {
            let s = self.sample(context, c)?;
            out.push((c.to_string(), self.model.score(&s).map_err(err)?));
        }
        if out.is_empty() {
            return Err("no candidates".into());
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(out)
    }

    /// Self-matching weights per utterance and the response, plus the turn
    /// weights, as `[{name, tokens_query, tokens_key, weights}]`.
    pub fn attention(&self, context: &str, response: &str) -> Result<Value, String> {
        let s = self.sample(context, response)?;
        let out = self.model.forward(&s, true).map_err(err)?;
        let diag = out.diagnostics.ok_or("no diagnostics")?;
        let (ctx, resp) = decode(&s, &self.vocab);
        let exports = attention_exports(&diag, &ctx, &resp).map_err(err)?;
        let maps: Vec<Value> = exports
            .iter()
            .map(|e| {
                json!({
                    "name": e.name,
                    "tokens_query": e.tokens_query,
                    "tokens_key": e.tokens_key,
                    "weights": e.weights,
                })
            })
            .collect();
        Ok(json!({ "score": out.score, "maps": maps }))
    }

    /// A held-out context with its two candidates, positive first.
    pub fn example(&self, index: usize) -> Value {
        let i = 2 * (index % (self.valid_raw.len() / 2));
        let (pos, neg) = (&self.valid_raw[i], &self.valid_raw[i + 1]);
        json!({
            "context": pos.context.join(" || "),
            "candidates": format!("{}\n{}", pos.response, neg.response),
        })
    }
}

#[wasm_bindgen]
pub struct WebDemo {
    inner: Demo,
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
impl WebDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<WebDemo, JsError> {
        Ok(WebDemo {
            inner: Demo::new(seed as u64).map_err(js)?,
        })
    }

    pub fn epoch(&self) -> u32 {
        self.inner.epoch() as u32
    }

    pub fn param_count(&self) -> u32 {
        self.inner.model().param_count() as u32
    }

    /// JSON array of `{epoch, loss, train_accuracy, validation}`.
    pub fn train(&mut self, epochs: u32) -> Result<String, JsError> {
        let rows: Vec<Value> = self
            .inner
            .train_epochs(epochs as usize)
            .map_err(js)?
            .into_iter()
            .map(|s| {
                json!({
                    "epoch": s.epoch,
                    "loss": s.loss,
                    "train_accuracy": s.train_accuracy,
                    "validation": s.validation,
                })
            })
            .collect();
        Ok(Value::Array(rows).to_string())
    }

    /// JSON array of `{response, score}`, best first.
    pub fn rank(&self, context: &str, candidates: &str) -> Result<String, JsError> {
        let rows: Vec<Value> = self
            .inner
            .rank(context, candidates)
            .map_err(js)?
            .into_iter()
            .map(|(r, s)| json!({ "response": r, "score": s }))
            .collect();
        Ok(Value::Array(rows).to_string())
    }

    pub fn attention(&self, context: &str, response: &str) -> Result<String, JsError> {
        Ok(self.inner.attention(context, response).map_err(js)?.to_string())
    }

    pub fn example(&self, index: u32) -> String {
        self.inner.example(index as usize).to_string()
    }
}

//! The DUA discriminator: embedding → utterance GRU → turns-aware fusion →
//! self-matching flow → word/flow matching matrices → CNN matching vectors →
//! attentive turns aggregation → two-way softmax.

mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DuaConfig, Fusion};

use crate::data::EncodedSample;
use crate::error::{contract, Result};
use crate::layers::{
    cnn_match_encode, gru_sequence, self_matching_flow, AttentionParams, CnnParams, GruParams,
    ResponseMatcher,
};
use crate::numerics::{softmax_slice, Gradients, ParamStore, Tape, Var};
use crate::tensor::Tensor;

pub const EMBEDDING: &str = "embedding";
pub const UTT_GRU: &str = "utt_gru";
pub const FLOW_GRU: &str = "flow_gru";
pub const FLOW_ATT: &str = "flow_att";
pub const BILINEAR: &str = "bilinear";
pub const CNN: &str = "cnn";
pub const TURNS_GRU: &str = "turns_gru";
pub const TURNS_ATT: &str = "turns_att";
pub const MLP_W: &str = "mlp.w";
pub const MLP_B: &str = "mlp.b";
pub const OUTPUT: &str = "output";

/// Fresh parameters for `config`, drawn uniformly from `±init_scale` with a
/// generator seeded by `config.seed`. Row 0 of the embedding (PAD) is zero.
pub fn init_params(config: &DuaConfig) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let s = config.init_scale;
    let mut store = ParamStore::new();

    let mut emb = Tensor::uniform(&[config.vocab_size, config.emb_dim], s, &mut rng);
    emb.data_mut()[..config.emb_dim].fill(0.0);
    store.insert(EMBEDDING, emb);

    GruParams::init(&mut store, UTT_GRU, config.emb_dim, config.utt_hidden, s, &mut rng);
    GruParams::init(
        &mut store,
        FLOW_GRU,
        config.flow_input_dim(),
        config.flow_hidden,
        s,
        &mut rng,
    );
    if !config.ablate_maf {
        let d = config.fused_dim();
        AttentionParams::init(&mut store, FLOW_ATT, d, d, config.attention_width, s, &mut rng);
    }
    store.insert(
        BILINEAR,
        Tensor::uniform(&[config.flow_hidden, config.flow_hidden], s, &mut rng),
    );
    CnnParams::init(&mut store, CNN, config.n_filters, config.kernel_size, s, &mut rng);

    if config.ablate_cf {
        let width = config.max_utterances * config.match_dim();
        store.insert(MLP_W, Tensor::uniform(&[width, config.turns_hidden], s, &mut rng));
        store.insert(MLP_B, Tensor::uniform(&[1, config.turns_hidden], s, &mut rng));
    } else {
        GruParams::init(
            &mut store,
            TURNS_GRU,
            config.match_dim(),
            config.turns_hidden,
            s,
            &mut rng,
        );
        AttentionParams::init(
            &mut store,
            TURNS_ATT,
            config.flow_hidden,
            config.turns_hidden,
            config.attention_width,
            s,
            &mut rng,
        );
    }
    store.insert(OUTPUT, Tensor::uniform(&[config.turns_hidden, 2], s, &mut rng));
    Ok(store)
}

/// Per-sample internals surfaced for inspection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// Matching vector of every utterance, in chronological order.
    pub match_vectors: Vec<Vec<f64>>,
    /// Self-matching weights per sequence (utterances, then the response);
    /// `[seq][t][i]`. Empty when the flow is ablated.
    pub flow_attention: Vec<Vec<Vec<f64>>>,
    /// Turn attention weights; empty when context fusion is ablated.
    pub turn_attention: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutput {
    /// Probability of label 1.
    pub score: f64,
    pub logits: [f64; 2],
    pub diagnostics: Option<Diagnostics>,
}

impl MatchOutput {
    fn from_logits(logits: &Tensor, diagnostics: Option<Diagnostics>) -> Self {
        let l = [logits.data()[0], logits.data()[1]];
        let p = softmax_slice(&l);
        Self {
            score: p[1],
            logits: l,
            diagnostics,
        }
    }
}

/// Logits node of a recorded forward pass.
pub struct Recorded {
    pub logits: Var,
    pub diagnostics: Option<Diagnostics>,
}

/// Combines each sequence with `last_state`, the final hidden state of the
/// last utterance, broadcast over positions.
pub fn fuse_with_last(tape: &mut Tape, seqs: &[Var], last_state: Var, strategy: Fusion) -> Result<Vec<Var>> {
    seqs.iter()
        .map(|&s| match strategy {
            Fusion::Concat => {
                let n = tape.shape(s)[0];
                let wide = tape.repeat_rows(last_state, n)?;
                tape.concat_cols(s, wide)
            }
            Fusion::Sum => tape.add_row(s, last_state),
            Fusion::Mul => tape.mul_row(s, last_state),
        })
        .collect()
}

/// Output of the attentive turns aggregation.
pub struct Aggregated {
    pub summary: Var,
    pub logits: Var,
    pub weights: Vec<f64>,
}

/// GRU over the matching vectors (`t×match_dim`, chronological), attention
/// scored from each utterance's final flow state and its turn state, then the
/// output projection.
pub fn aggregate_and_score(
    tape: &mut Tape,
    gru: &GruParams,
    att: &AttentionParams,
    output: Var,
    matches: Var,
    flow_finals: Var,
) -> Result<Aggregated> {
    let t = tape.shape(matches)[0];
    let states = gru_sequence(tape, gru, matches, t)?;
    let from_flow = tape.matmul(flow_finals, att.w_key)?;
    let from_turns = tape.matmul(states, att.w_query)?;
    let pre = tape.add(from_flow, from_turns)?;
    let pre = tape.add_row(pre, att.bias)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul(act, att.v)?;
    let alpha = tape.softmax(scores)?;
    let alpha_t = tape.transpose(alpha)?;
    let summary = tape.matmul(alpha_t, states)?;
    let logits = tape.matmul(summary, output)?;
    let weights = tape.value(alpha).data().to_vec();
    Ok(Aggregated {
        summary,
        logits,
        weights,
    })
}

fn check_sample(config: &DuaConfig, sample: &EncodedSample) -> Result<()> {
    if sample.turns == 0 || sample.turns > config.max_utterances {
        return contract(format!(
            "sample has {} turns, expected 1..={}",
            sample.turns, config.max_utterances
        ));
    }
    if sample.response_length == 0 {
        return contract("empty response");
    }
    if let Some(k) = (0..sample.turns).find(|&k| sample.utterance_lengths[k] == 0) {
        return contract(format!("utterance {k} is empty"));
    }
    let too_long = sample.response_length > config.max_words
        || sample.utterance_lengths[..sample.turns].iter().any(|&l| l > config.max_words);
    if too_long {
        return contract(format!("sample not truncated to max_words {}", config.max_words));
    }
    let ids = sample.utterances[..sample.turns]
        .iter()
        .zip(&sample.utterance_lengths)
        .flat_map(|(u, &l)| u[..l].iter())
        .chain(sample.response_ids());
    if let Some(bad) = ids.copied().find(|&id| id as usize >= config.vocab_size) {
        return contract(format!("token id {bad} outside vocabulary of {}", config.vocab_size));
    }
    Ok(())
}

/// Records the forward pass of one sample on `tape`.
pub fn record(
    tape: &mut Tape,
    config: &DuaConfig,
    params: &ParamStore,
    sample: &EncodedSample,
    collect_diagnostics: bool,
) -> Result<Recorded> {
    check_sample(config, sample)?;
    let t = sample.turns;
    let embedding = tape.param(params, EMBEDDING)?;
    let utt_gru = GruParams::bind(tape, params, UTT_GRU)?;
    let flow_gru = GruParams::bind(tape, params, FLOW_GRU)?;
    let flow_att = if config.ablate_maf {
        None
    } else {
        Some(AttentionParams::bind(tape, params, FLOW_ATT)?)
    };
    let bilinear = tape.param(params, BILINEAR)?;
    let cnn = CnnParams::bind(tape, params, CNN, config.n_filters)?;
    let output = tape.param(params, OUTPUT)?;

    // Sequences 0..t are utterances, t is the response.
    let mut lengths: Vec<usize> = sample.utterance_lengths[..t].to_vec();
    lengths.push(sample.response_length);
    let mut embedded = Vec::with_capacity(t + 1);
    for k in 0..=t {
        let ids: Vec<usize> = if k < t {
            sample.utterance_ids(k).iter().map(|&i| i as usize).collect()
        } else {
            sample.response_ids().iter().map(|&i| i as usize).collect()
        };
        embedded.push(tape.select_rows(embedding, &ids)?);
    }

    let mut states = Vec::with_capacity(t + 1);
    for (k, &e) in embedded.iter().enumerate() {
        states.push(gru_sequence(tape, &utt_gru, e, lengths[k])?);
    }

    let fused = if config.ablate_cf {
        states
    } else {
        let last_state = tape.row(states[t - 1], lengths[t - 1] - 1)?;
        fuse_with_last(tape, &states, last_state, config.fusion)?
    };

    let mut flows = Vec::with_capacity(t + 1);
    let mut flow_attention = Vec::new();
    for (k, &f) in fused.iter().enumerate() {
        match &flow_att {
            Some(att) => {
                let out = self_matching_flow(tape, &flow_gru, att, f, lengths[k])?;
                if collect_diagnostics {
                    flow_attention.push(out.attention);
                }
                flows.push(out.states);
            }
            None => flows.push(gru_sequence(tape, &flow_gru, f, lengths[k])?),
        }
    }

    let n = config.max_words;
    let matcher = ResponseMatcher::new(tape, embedded[t], flows[t], bilinear)?;
    let mut match_vectors = Vec::with_capacity(t);
    for k in 0..t {
        let (m1, m2) = matcher.matrices(tape, embedded[k], flows[k])?;
        let m1 = tape.pad_to(m1, n, n)?;
        let m2 = tape.pad_to(m2, n, n)?;
        match_vectors.push(cnn_match_encode(tape, &cnn, m1, m2, config.pool)?);
    }

    let (logits, turn_attention) = if config.ablate_cf {
        let w = tape.param(params, MLP_W)?;
        let b = tape.param(params, MLP_B)?;
        // Right-aligned slots: the last utterance always sits in the final slot.
        let mut slots = Vec::with_capacity(config.max_utterances);
        let empty = config.max_utterances - t;
        for _ in 0..empty {
            slots.push(tape.constant(Tensor::zeros(&[1, config.match_dim()])));
        }
        slots.extend(match_vectors.iter().copied());
        let joined = tape.concat_flat(&slots)?;
        let pre = tape.matmul(joined, w)?;
        let pre = tape.add(pre, b)?;
        let hidden = tape.tanh(pre)?;
        (tape.matmul(hidden, output)?, Vec::new())
    } else {
        let turns_gru = GruParams::bind(tape, params, TURNS_GRU)?;
        let turns_att = AttentionParams::bind(tape, params, TURNS_ATT)?;
        let matches = tape.stack_rows(&match_vectors)?;
        let mut finals = Vec::with_capacity(t);
        for k in 0..t {
            finals.push(tape.row(flows[k], lengths[k] - 1)?);
        }
        let finals = tape.stack_rows(&finals)?;
        let agg = aggregate_and_score(tape, &turns_gru, &turns_att, output, matches, finals)?;
        (agg.logits, agg.weights)
    };

    let diagnostics = collect_diagnostics.then(|| Diagnostics {
        match_vectors: match_vectors
            .iter()
            .map(|&m| tape.value(m).data().to_vec())
            .collect(),
        flow_attention,
        turn_attention,
    });
    Ok(Recorded {
        logits,
        diagnostics,
    })
}

pub fn forward(
    config: &DuaConfig,
    params: &ParamStore,
    sample: &EncodedSample,
    collect_diagnostics: bool,
) -> Result<MatchOutput> {
    let mut tape = Tape::new();
    let rec = record(&mut tape, config, params, sample, collect_diagnostics)?;
    Ok(MatchOutput::from_logits(tape.value(rec.logits), rec.diagnostics))
}

/// Cross-entropy of the true class given two logits.
pub fn loss(output: &MatchOutput, label: u8) -> f64 {
    let l = output.logits;
    let max = l[0].max(l[1]);
    let lse = max + ((l[0] - max).exp() + (l[1] - max).exp()).ln();
    lse - l[usize::from(label.min(1))]
}

/// Loss value, output and parameter gradients for one sample.
pub fn loss_and_gradients(
    config: &DuaConfig,
    params: &ParamStore,
    sample: &EncodedSample,
) -> Result<(f64, MatchOutput, Gradients)> {
    if sample.label > 1 {
        return contract(format!("label {} not in {{0,1}}", sample.label));
    }
    let mut tape = Tape::new();
    let rec = record(&mut tape, config, params, sample, false)?;
    let loss = tape.cross_entropy(rec.logits, usize::from(sample.label))?;
    let grads = tape.backward(loss, params)?;
    let value = tape.value(loss).data()[0];
    Ok((value, MatchOutput::from_logits(tape.value(rec.logits), None), grads))
}

/// Config plus trained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Dua {
    pub config: DuaConfig,
    pub params: ParamStore,
}

impl Dua {
    pub fn new(config: DuaConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self { config, params })
    }

    /// Replaces the embedding table, keeping the PAD row at zero.
    pub fn set_embeddings(&mut self, table: Tensor) -> Result<()> {
        let expected = [self.config.vocab_size, self.config.emb_dim];
        if table.shape() != expected {
            return Err(crate::DuaError::Dimension {
                op: "set_embeddings",
                left: table.shape().to_vec(),
                right: expected.to_vec(),
            });
        }
        let mut table = table;
        table.data_mut()[..self.config.emb_dim].fill(0.0);
        self.params.insert(EMBEDDING, table);
        Ok(())
    }

    pub fn forward(&self, sample: &EncodedSample, collect_diagnostics: bool) -> Result<MatchOutput> {
        forward(&self.config, &self.params, sample, collect_diagnostics)
    }

    pub fn score(&self, sample: &EncodedSample) -> Result<f64> {
        Ok(self.forward(sample, false)?.score)
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }
}

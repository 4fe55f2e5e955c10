//! Small synthetic corpora and configs for tests, demos and smoke runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EncodedSample, RawDialogue, PAD};
use crate::model::DuaConfig;

/// A compact configuration: every width is `dim`, `max_words` words per
/// turn, four filters and (3,3) windows.
pub fn toy_config(vocab_size: usize, max_utterances: usize, max_words: usize, dim: usize) -> DuaConfig {
    DuaConfig {
        max_utterances,
        max_words,
        emb_dim: dim,
        utt_hidden: dim,
        flow_hidden: dim,
        turns_hidden: dim,
        attention_width: dim,
        n_filters: 4,
        kernel_size: 3,
        pool: (3, 3),
        vocab_size,
        ..DuaConfig::default()
    }
}

/// Builds a padded sample from raw id lists.
pub fn sample_from_ids(config: &DuaConfig, context: &[Vec<u32>], response: &[u32], label: u8) -> EncodedSample {
    let pad = |ids: &[u32]| {
        let mut v = ids.to_vec();
        v.resize(config.max_words, PAD);
        v
    };
    let mut utterances = vec![vec![PAD; config.max_words]; config.max_utterances];
    let mut utterance_lengths = vec![0; config.max_utterances];
    for (k, u) in context.iter().enumerate() {
        utterances[k] = pad(u);
        utterance_lengths[k] = u.len();
    }
    EncodedSample {
        utterances,
        utterance_lengths,
        turns: context.len(),
        response: pad(response),
        response_length: response.len(),
        label,
    }
}

/// A sample with random non-PAD ids and random lengths in `1..=max_words`.
pub fn random_sample<R: Rng + ?Sized>(config: &DuaConfig, turns: usize, rng: &mut R) -> EncodedSample {
    let ids = |rng: &mut R| -> Vec<u32> {
        let len = rng.gen_range(1..=config.max_words);
        (0..len).map(|_| rng.gen_range(1..config.vocab_size as u32)).collect()
    };
    let context: Vec<Vec<u32>> = (0..turns).map(|_| ids(rng)).collect();
    let response = ids(rng);
    let label = rng.gen_range(0..=1);
    sample_from_ids(config, &context, &response, label)
}

fn word(i: usize) -> String {
    format!("w{i}")
}

fn sentence(ids: &[usize]) -> String {
    ids.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ")
}

/// Draws `n` distinct ids from `0..pool` that are not in `avoid`.
fn fresh(rng: &mut ChaCha8Rng, pool: usize, n: usize, avoid: &[usize]) -> Vec<usize> {
    let mut free: Vec<usize> = (0..pool).filter(|i| !avoid.contains(i)).collect();
    free.shuffle(rng);
    free.truncate(n);
    free
}

/// Default word pool size of the generators below.
pub const SYNTHETIC_WORDS: usize = 60;

/// Pairs `(positive, negative)` per context over a pool of `words` words
/// (at least 20). Positives reuse three words of the last utterance;
/// negatives use only words absent from the context. Each pair is a ranking
/// group of 2 with the positive first.
pub fn lexical_pairs(contexts: usize, words: usize, seed: u64) -> Vec<RawDialogue> {
    assert!(words >= 20, "pool of {words} words is too small");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * contexts);
    for _ in 0..contexts {
        let turns = rng.gen_range(2..=3);
        let used = fresh(&mut rng, words, 5 * turns, &[]);
        let context: Vec<String> = used.chunks(5).map(sentence).collect();
        let last = &used[5 * (turns - 1)..];

        let mut pos: Vec<usize> = last.choose_multiple(&mut rng, 3).copied().collect();
        pos.extend(fresh(&mut rng, words, 1, &used));
        pos.shuffle(&mut rng);
        let neg = fresh(&mut rng, words, 4, &used);

        out.push(RawDialogue::new(1, context.clone(), sentence(&pos)));
        out.push(RawDialogue::new(0, context, sentence(&neg)));
    }
    out
}

/// Three-turn contexts whose positive shares three words with the last
/// utterance only. The first `distractors` negatives of each group copy
/// five words of the earlier turns; the rest use unseen words. With
/// `group_size` 2 and `distractors` 1 this yields balanced training pairs
/// alternating between distractor and random negatives when `mix` is set.
pub fn last_turn_groups(contexts: usize, group_size: usize, distractors: usize, mix: bool, seed: u64) -> Vec<RawDialogue> {
    assert!(group_size >= 2 && distractors < group_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(group_size * contexts);
    for c in 0..contexts {
        let used = fresh(&mut rng, SYNTHETIC_WORDS, 16, &[]);
        let (earlier, last) = used.split_at(12);
        let context = vec![sentence(&earlier[..6]), sentence(&earlier[6..]), sentence(last)];

        let mut pos: Vec<usize> = last.choose_multiple(&mut rng, 3).copied().collect();
        pos.extend(fresh(&mut rng, SYNTHETIC_WORDS, 1, &used));
        pos.shuffle(&mut rng);
        out.push(RawDialogue::new(1, context.clone(), sentence(&pos)));

        let n_distract = if mix { (c + 1) % 2 * distractors } else { distractors };
        for j in 1..group_size {
            let neg = if j <= n_distract {
                earlier.choose_multiple(&mut rng, 5).copied().collect()
            } else {
                fresh(&mut rng, SYNTHETIC_WORDS, 4, &used)
            };
            out.push(RawDialogue::new(0, context.clone(), sentence(&neg)));
        }
    }
    out
}

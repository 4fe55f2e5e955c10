use std::fmt;
use std::str::FromStr;

use crate::error::{DuaError, Result};
use crate::layers::match_dim;

/// How each utterance representation is combined with the last utterance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    #[default]
    Concat,
    Sum,
    Mul,
}

impl FromStr for Fusion {
    type Err = DuaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "sum" => Ok(Fusion::Sum),
            "mul" => Ok(Fusion::Mul),
            other => Err(DuaError::Config(format!("unknown fusion `{other}` (concat|sum|mul)"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Concat => "concat",
            Fusion::Sum => "sum",
            Fusion::Mul => "mul",
        })
    }
}

/// Hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct DuaConfig {
    pub max_utterances: usize,
    pub max_words: usize,
    pub emb_dim: usize,
    pub utt_hidden: usize,
    pub flow_hidden: usize,
    pub turns_hidden: usize,
    pub attention_width: usize,
    pub n_filters: usize,
    pub kernel_size: usize,
    pub pool: (usize, usize),
    pub fusion: Fusion,
    /// Drop context fusion: no turns-aware fusion, and an MLP replaces the
    /// turns GRU + attention.
    pub ablate_cf: bool,
    /// Drop the matching attention flow: a plain GRU replaces it.
    pub ablate_maf: bool,
    pub vocab_size: usize,
    pub seed: u64,
    /// Half-width of the uniform initializer.
    pub init_scale: f64,
}

impl Default for DuaConfig {
    fn default() -> Self {
        Self {
            max_utterances: 10,
            max_words: 50,
            emb_dim: 200,
            utt_hidden: 200,
            flow_hidden: 200,
            turns_hidden: 200,
            attention_width: 200,
            n_filters: 8,
            kernel_size: 3,
            pool: (3, 3),
            fusion: Fusion::Concat,
            ablate_cf: false,
            ablate_maf: false,
            vocab_size: 2,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| DuaError::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let v = value.trim().trim_start_matches('(').trim_end_matches(')');
    let mut parts = v.split(',');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), None) => Ok((parse(key, a)?, parse(key, b)?)),
        (Some(a), None, None) => {
            let n = parse(key, a)?;
            Ok((n, n))
        }
        _ => Err(DuaError::Config(format!("bad value `{value}` for `{key}`"))),
    }
}

impl DuaConfig {
    pub const KEYS: [&'static str; 16] = [
        "max_utterances",
        "max_words",
        "emb_dim",
        "utt_hidden",
        "flow_hidden",
        "turns_hidden",
        "attention_width",
        "n_filters",
        "kernel_size",
        "pool",
        "fusion",
        "ablate_cf",
        "ablate_maf",
        "vocab_size",
        "seed",
        "init_scale",
    ];

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// this struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "max_utterances" => self.max_utterances = parse(key, value)?,
            "max_words" => self.max_words = parse(key, value)?,
            "emb_dim" => self.emb_dim = parse(key, value)?,
            "utt_hidden" => self.utt_hidden = parse(key, value)?,
            "flow_hidden" => self.flow_hidden = parse(key, value)?,
            "turns_hidden" => self.turns_hidden = parse(key, value)?,
            "attention_width" => self.attention_width = parse(key, value)?,
            "n_filters" => self.n_filters = parse(key, value)?,
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "pool" => self.pool = parse_pair(key, value)?,
            "fusion" => self.fusion = value.trim().parse()?,
            "ablate_cf" => self.ablate_cf = parse(key, value)?,
            "ablate_maf" => self.ablate_maf = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "init_scale" => self.init_scale = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("max_utterances", self.max_utterances.to_string()),
            ("max_words", self.max_words.to_string()),
            ("emb_dim", self.emb_dim.to_string()),
            ("utt_hidden", self.utt_hidden.to_string()),
            ("flow_hidden", self.flow_hidden.to_string()),
            ("turns_hidden", self.turns_hidden.to_string()),
            ("attention_width", self.attention_width.to_string()),
            ("n_filters", self.n_filters.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("pool", format!("{},{}", self.pool.0, self.pool.1)),
            ("fusion", self.fusion.to_string()),
            ("ablate_cf", self.ablate_cf.to_string()),
            ("ablate_maf", self.ablate_maf.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("seed", self.seed.to_string()),
            // `{:?}` on f64 round-trips exactly.
            ("init_scale", format!("{:?}", self.init_scale)),
        ]
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DuaError::Config(format!("expected key=value, got `{line}`")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(DuaError::Config(format!("unknown key `{}`", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("max_utterances", self.max_utterances),
            ("max_words", self.max_words),
            ("emb_dim", self.emb_dim),
            ("utt_hidden", self.utt_hidden),
            ("flow_hidden", self.flow_hidden),
            ("turns_hidden", self.turns_hidden),
            ("attention_width", self.attention_width),
            ("n_filters", self.n_filters),
            ("kernel_size", self.kernel_size),
            ("pool rows", self.pool.0),
            ("pool cols", self.pool.1),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(DuaError::Config(format!("`{name}` must be positive")));
        }
        if self.vocab_size < 2 {
            return Err(DuaError::Config("vocab_size must cover PAD and UNK".into()));
        }
        if self.max_words < self.kernel_size {
            return Err(DuaError::Config(format!(
                "kernel {} larger than max_words {}",
                self.kernel_size, self.max_words
            )));
        }
        let conv = self.max_words + 1 - self.kernel_size;
        if self.pool.0 > conv || self.pool.1 > conv {
            return Err(DuaError::Config(format!(
                "pool window {:?} exceeds conv output {conv}×{conv}",
                self.pool
            )));
        }
        if !(self.init_scale >= 0.0) {
            return Err(DuaError::Config("init_scale must be non-negative".into()));
        }
        Ok(())
    }

    /// Structural variant of this config with the given ablation switches.
    pub fn with_ablation(&self, ablate_cf: bool, ablate_maf: bool) -> Self {
        Self {
            ablate_cf,
            ablate_maf,
            ..self.clone()
        }
    }

    /// Width of each fused position vector.
    pub fn fused_dim(&self) -> usize {
        match (self.ablate_cf, self.fusion) {
            (true, _) => self.utt_hidden,
            (false, Fusion::Concat) => 2 * self.utt_hidden,
            (false, Fusion::Sum | Fusion::Mul) => self.utt_hidden,
        }
    }

    /// Input width of the flow GRU.
    pub fn flow_input_dim(&self) -> usize {
        if self.ablate_maf {
            self.fused_dim()
        } else {
            2 * self.fused_dim()
        }
    }

    /// Length of one utterance's matching vector.
    pub fn match_dim(&self) -> usize {
        match_dim(
            self.max_words,
            self.max_words,
            self.kernel_size,
            self.n_filters,
            self.pool,
        )
    }
}

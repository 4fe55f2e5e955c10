//! Attention matrices as CSV files with token-annotated JSON sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::Diagnostics;

/// One weight matrix; rows are query positions, columns key positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    #[serde(skip)]
    pub name: String,
    pub tokens_query: Vec<String>,
    pub tokens_key: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

impl AttentionExport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.weights {
            let cells: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Flow attention for every utterance (`utterance_1`, ...) and the response,
/// then the turn weights as a single-row matrix keyed by utterance.
pub fn attention_exports(
    diagnostics: &Diagnostics,
    context_tokens: &[Vec<String>],
    response_tokens: &[String],
) -> Result<Vec<AttentionExport>> {
    let t = context_tokens.len();
    let mut out = Vec::new();
    if !diagnostics.flow_attention.is_empty() {
        if diagnostics.flow_attention.len() != t + 1 {
            return contract(format!(
                "{} flow matrices for {} sequences",
                diagnostics.flow_attention.len(),
                t + 1
            ));
        }
        for (k, weights) in diagnostics.flow_attention.iter().enumerate() {
            let (name, tokens) = if k < t {
                (format!("utterance_{}", k + 1), &context_tokens[k])
            } else {
                ("response".to_string(), &response_tokens.to_vec())
            };
            if weights.len() != tokens.len() {
                return contract(format!("{name}: {} rows for {} tokens", weights.len(), tokens.len()));
            }
            out.push(AttentionExport {
                name,
                tokens_query: tokens.clone(),
                tokens_key: tokens.clone(),
                weights: weights.clone(),
            });
        }
    }
    if !diagnostics.turn_attention.is_empty() {
        let keys: Vec<String> = context_tokens.iter().map(|u| u.join(" ")).collect();
        out.push(AttentionExport {
            name: "turns".into(),
            tokens_query: vec![response_tokens.join(" ")],
            tokens_key: keys,
            weights: vec![diagnostics.turn_attention.clone()],
        });
    }
    Ok(out)
}

/// Writes `<name>.csv` and `<name>.json` per export into `dir`.
pub fn write_exports(dir: impl AsRef<Path>, exports: &[AttentionExport]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for e in exports {
        let csv = dir.join(format!("{}.csv", e.name));
        fs::write(&csv, e.to_csv())?;
        let json = dir.join(format!("{}.json", e.name));
        fs::write(&json, e.to_json())?;
        written.push(csv);
        written.push(json);
    }
    Ok(written)
}

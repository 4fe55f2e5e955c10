//! Differentiable building blocks: a bias-free GRU, additive attention, the
//! self-matching flow, word/flow matching matrices and the CNN encoder that
//! turns a pair of matching matrices into a matching vector.
//!
//! Every function records onto a caller-owned [`Tape`]; parameter structs hold
//! [`Var`] handles bound from a [`ParamStore`] for the duration of one pass.

use rand::Rng;

use crate::error::{contract, DuaError, Result};
use crate::numerics::{ParamStore, Tape, Var};
use crate::tensor::Tensor;

fn key(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

/// Gate weights of the bias-free GRU.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub v_z: Var,
    pub v_r: Var,
    pub v_h: Var,
}

impl GruParams {
    pub const INPUT_WEIGHTS: [&'static str; 3] = ["w_z", "w_r", "w_h"];
    pub const RECURRENT_WEIGHTS: [&'static str; 3] = ["v_z", "v_r", "v_h"];

    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) {
        for name in Self::INPUT_WEIGHTS {
            store.insert(key(prefix, name), Tensor::uniform(&[input_dim, hidden], scale, rng));
        }
        for name in Self::RECURRENT_WEIGHTS {
            store.insert(key(prefix, name), Tensor::uniform(&[hidden, hidden], scale, rng));
        }
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut p = |n| tape.param(store, &key(prefix, n));
        let params = Self {
            w_z: p("w_z")?,
            w_r: p("w_r")?,
            w_h: p("w_h")?,
            v_z: p("v_z")?,
            v_r: p("v_r")?,
            v_h: p("v_h")?,
        };
        let hidden = tape.shape(params.v_z)[0];
        for v in [params.w_z, params.w_r, params.w_h, params.v_z, params.v_r, params.v_h] {
            if tape.shape(v)[1] != hidden {
                return Err(DuaError::Dimension {
                    op: "gru_params",
                    left: tape.shape(v).to_vec(),
                    right: vec![hidden],
                });
            }
        }
        Ok(params)
    }

    pub fn hidden(&self, tape: &Tape) -> usize {
        tape.shape(self.v_z)[0]
    }

    pub fn input_dim(&self, tape: &Tape) -> usize {
        tape.shape(self.w_z)[0]
    }
}

/// One GRU step given the input projections `x·W_z`, `x·W_r`, `x·W_h`.
fn gru_step(tape: &mut Tape, p: &GruParams, xz: Var, xr: Var, xh: Var, h_prev: Var) -> Result<Var> {
    let hz = tape.matmul(h_prev, p.v_z)?;
    let z_pre = tape.add(xz, hz)?;
    let z = tape.sigmoid(z_pre)?;

    let hr = tape.matmul(h_prev, p.v_r)?;
    let r_pre = tape.add(xr, hr)?;
    let r = tape.sigmoid(r_pre)?;

    let gated = tape.mul(r, h_prev)?;
    let hh = tape.matmul(gated, p.v_h)?;
    let cand_pre = tape.add(xh, hh)?;
    let candidate = tape.tanh(cand_pre)?;

    let keep = tape.one_minus(z)?;
    let new_part = tape.mul(z, candidate)?;
    let old_part = tape.mul(keep, h_prev)?;
    tape.add(new_part, old_part)
}

/// `h = z ⊙ h̃ + (1 − z) ⊙ h_prev` for a `1×input` row `x`.
pub fn gru_cell(tape: &mut Tape, p: &GruParams, x: Var, h_prev: Var) -> Result<Var> {
    let xz = tape.matmul(x, p.w_z)?;
    let xr = tape.matmul(x, p.w_r)?;
    let xh = tape.matmul(x, p.w_h)?;
    gru_step(tape, p, xz, xr, xh, h_prev)
}

/// Runs the GRU from a zero state over the first `length` rows of `xs`.
/// Returns `n×hidden` states; rows at and after `length` are zero.
pub fn gru_sequence(tape: &mut Tape, p: &GruParams, xs: Var, length: usize) -> Result<Var> {
    let n = tape.shape(xs)[0];
    if length == 0 || length > n {
        return contract(format!("gru_sequence length {length} outside 1..={n}"));
    }
    let valid = if length == n { xs } else { tape.slice_rows(xs, 0, length)? };
    let xz = tape.matmul(valid, p.w_z)?;
    let xr = tape.matmul(valid, p.w_r)?;
    let xh = tape.matmul(valid, p.w_h)?;
    let hidden = p.hidden(tape);

    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut states = Vec::with_capacity(length);
    for t in 0..length {
        let (zt, rt, ht) = (tape.row(xz, t)?, tape.row(xr, t)?, tape.row(xh, t)?);
        h = gru_step(tape, p, zt, rt, ht, h)?;
        states.push(h);
    }
    let stacked = tape.stack_rows(&states)?;
    if length == n {
        Ok(stacked)
    } else {
        tape.pad_to(stacked, n, hidden)
    }
}

/// Parameters of `vᵀ tanh(W_key·k + W_query·q + b)` scoring.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_key: Var,
    pub w_query: Var,
    pub bias: Var,
    pub v: Var,
}

impl AttentionParams {
    pub const NAMES: [&'static str; 4] = ["w_key", "w_query", "b", "v"];

    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        key_dim: usize,
        query_dim: usize,
        width: usize,
        scale: f64,
        rng: &mut R,
    ) {
        store.insert(key(prefix, "w_key"), Tensor::uniform(&[key_dim, width], scale, rng));
        store.insert(key(prefix, "w_query"), Tensor::uniform(&[query_dim, width], scale, rng));
        store.insert(key(prefix, "b"), Tensor::uniform(&[1, width], scale, rng));
        store.insert(key(prefix, "v"), Tensor::uniform(&[width, 1], scale, rng));
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut p = |n| tape.param(store, &key(prefix, n));
        let params = Self {
            w_key: p("w_key")?,
            w_query: p("w_query")?,
            bias: p("b")?,
            v: p("v")?,
        };
        let width = tape.shape(params.v)[0];
        let widths = [
            tape.shape(params.w_key)[1],
            tape.shape(params.w_query)[1],
            tape.shape(params.bias)[1],
        ];
        if widths.iter().any(|&w| w != width) {
            return Err(DuaError::Dimension {
                op: "attention_params",
                left: widths.to_vec(),
                right: vec![width],
            });
        }
        Ok(params)
    }
}

/// Scores rows of `keys` (already projected as `key_proj`) against one
/// projected query and pools them. Returns `(context 1×d, weights m×1)`.
pub(crate) fn attend(
    tape: &mut Tape,
    att: &AttentionParams,
    keys: Var,
    key_proj: Var,
    query_proj: Var,
) -> Result<(Var, Var)> {
    let pre = tape.add_row(key_proj, query_proj)?;
    let pre = tape.add_row(pre, att.bias)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul(act, att.v)?;
    let weights = tape.softmax(scores)?;
    let wt = tape.transpose(weights)?;
    let context = tape.matmul(wt, keys)?;
    Ok((context, weights))
}

#[derive(Clone, Debug)]
pub struct Attended {
    pub context: Var,
    /// Weight per key position, zero where masked.
    pub weights: Vec<f64>,
}

/// Additive attention of `query` over the unmasked rows of `keys`.
/// `mask[i]` is true when position `i` takes part.
pub fn additive_attention(
    tape: &mut Tape,
    att: &AttentionParams,
    keys: Var,
    query: Var,
    mask: &[bool],
) -> Result<Attended> {
    let n = tape.shape(keys)[0];
    if mask.len() != n {
        return Err(DuaError::Dimension {
            op: "additive_attention",
            left: vec![n],
            right: vec![mask.len()],
        });
    }
    let active: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if active.is_empty() {
        return contract("additive_attention with every position masked");
    }
    let keys_active = if active.len() == n {
        keys
    } else {
        tape.select_rows(keys, &active)?
    };
    let key_proj = tape.matmul(keys_active, att.w_key)?;
    let query_proj = tape.matmul(query, att.w_query)?;
    let (context, w) = attend(tape, att, keys_active, key_proj, query_proj)?;

    let mut weights = vec![0.0; n];
    for (&i, &v) in active.iter().zip(tape.value(w).data()) {
        weights[i] = v;
    }
    Ok(Attended { context, weights })
}

#[derive(Clone, Debug)]
pub struct FlowOutput {
    /// `n×hidden`, zero beyond the true length.
    pub states: Var,
    /// `attention[t][i]`: weight of key position `i` for query position `t`.
    pub attention: Vec<Vec<f64>>,
}

/// Self-matching attention flow: at step `t` the GRU reads `[f_t, c_t]` where
/// `c_t` attends with query `f_t` over every valid row of `fused`.
pub fn self_matching_flow(
    tape: &mut Tape,
    gru: &GruParams,
    att: &AttentionParams,
    fused: Var,
    length: usize,
) -> Result<FlowOutput> {
    let n = tape.shape(fused)[0];
    if length == 0 || length > n {
        return contract(format!("self_matching_flow length {length} outside 1..={n}"));
    }
    let valid = if length == n { fused } else { tape.slice_rows(fused, 0, length)? };
    let key_proj = tape.matmul(valid, att.w_key)?;
    let query_proj = tape.matmul(valid, att.w_query)?;
    let hidden = gru.hidden(tape);

    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut states = Vec::with_capacity(length);
    let mut attention = Vec::with_capacity(length);
    for t in 0..length {
        let q = tape.row(query_proj, t)?;
        let (context, weights) = attend(tape, att, valid, key_proj, q)?;
        attention.push(tape.value(weights).data().to_vec());
        let f_t = tape.row(valid, t)?;
        let input = tape.concat_cols(f_t, context)?;
        h = gru_cell(tape, gru, input, h)?;
        states.push(h);
    }
    let stacked = tape.stack_rows(&states)?;
    let states = if length == n {
        stacked
    } else {
        tape.pad_to(stacked, n, hidden)?
    };
    Ok(FlowOutput { states, attention })
}

/// Response-side factors shared by every utterance matched against it.
#[derive(Clone, Copy, Debug)]
pub struct ResponseMatcher {
    emb_t: Var,
    flow_proj_t: Var,
}

impl ResponseMatcher {
    /// Precomputes `R_embᵀ` and `A·P_rᵀ`.
    pub fn new(tape: &mut Tape, r_emb: Var, p_r: Var, bilinear: Var) -> Result<Self> {
        let emb_t = tape.transpose(r_emb)?;
        let pr_t = tape.transpose(p_r)?;
        let flow_proj_t = tape.matmul(bilinear, pr_t)?;
        Ok(Self { emb_t, flow_proj_t })
    }

    /// `(M1, M2)` with `M1 = U_emb·R_embᵀ`, `M2 = P_u·A·P_rᵀ`.
    pub fn matrices(&self, tape: &mut Tape, u_emb: Var, p_u: Var) -> Result<(Var, Var)> {
        let m1 = tape.matmul(u_emb, self.emb_t)?;
        let m2 = tape.matmul(p_u, self.flow_proj_t)?;
        Ok((m1, m2))
    }
}

/// Word-level and flow-level matching matrices. Rows of the inputs that are
/// zero (padding) yield zero rows/columns.
pub fn match_matrices(
    tape: &mut Tape,
    u_emb: Var,
    r_emb: Var,
    p_u: Var,
    p_r: Var,
    bilinear: Var,
) -> Result<(Var, Var)> {
    ResponseMatcher::new(tape, r_emb, p_r, bilinear)?.matrices(tape, u_emb, p_u)
}

/// Convolution kernels and biases for the two matching matrices.
#[derive(Clone, Debug)]
pub struct CnnParams {
    pub word: Vec<(Var, Var)>,
    pub flow: Vec<(Var, Var)>,
}

impl CnnParams {
    pub fn kernel_names(prefix: &str, n_filters: usize) -> Vec<String> {
        let mut names = Vec::with_capacity(4 * n_filters);
        for m in ["m1", "m2"] {
            for i in 0..n_filters {
                names.push(format!("{prefix}.{m}.k{i}"));
                names.push(format!("{prefix}.{m}.b{i}"));
            }
        }
        names
    }

    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        n_filters: usize,
        kernel: usize,
        scale: f64,
        rng: &mut R,
    ) {
        for m in ["m1", "m2"] {
            for i in 0..n_filters {
                store.insert(format!("{prefix}.{m}.k{i}"), Tensor::uniform(&[kernel, kernel], scale, rng));
                store.insert(format!("{prefix}.{m}.b{i}"), Tensor::uniform(&[1, 1], scale, rng));
            }
        }
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str, n_filters: usize) -> Result<Self> {
        if n_filters == 0 {
            return contract("CNN needs at least one filter");
        }
        let mut group = |m: &str| -> Result<Vec<(Var, Var)>> {
            (0..n_filters)
                .map(|i| {
                    let k = tape.param(store, &format!("{prefix}.{m}.k{i}"))?;
                    let b = tape.param(store, &format!("{prefix}.{m}.b{i}"))?;
                    Ok((k, b))
                })
                .collect()
        };
        let word = group("m1")?;
        let flow = group("m2")?;
        Ok(Self { word, flow })
    }
}

/// Length of the vector produced by [`cnn_match_encode`].
pub fn match_dim(n_u: usize, n_r: usize, kernel: usize, n_filters: usize, pool: (usize, usize)) -> usize {
    let ph = (n_u + 1 - kernel).div_ceil(pool.0);
    let pw = (n_r + 1 - kernel).div_ceil(pool.1);
    2 * n_filters * ph * pw
}

/// conv → ReLU → max-pool per kernel, flattened; word-matrix maps first.
pub fn cnn_match_encode(
    tape: &mut Tape,
    cnn: &CnnParams,
    m1: Var,
    m2: Var,
    pool: (usize, usize),
) -> Result<Var> {
    let mut pooled = Vec::with_capacity(cnn.word.len() + cnn.flow.len());
    for (matrix, kernels) in [(m1, &cnn.word), (m2, &cnn.flow)] {
        for &(k, b) in kernels {
            let c = tape.conv2d_valid(matrix, k, b)?;
            let r = tape.relu(c)?;
            pooled.push(tape.maxpool2d(r, pool)?);
        }
    }
    tape.concat_flat(&pooled)
}

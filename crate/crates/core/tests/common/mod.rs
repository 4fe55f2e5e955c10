//! Scalar-loop reference implementations used as test oracles. Nothing here
//! touches the tape; parameters are only read out of the store.
#![allow(dead_code, clippy::needless_range_loop)]

use dua::data::EncodedSample;
use dua::model::{self, DuaConfig, Fusion};
use dua::numerics::ParamStore;
use dua::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

pub fn param(store: &ParamStore, name: &str) -> Mat {
    mat(store.get(name).unwrap())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x·W` for a row vector `x`.
pub fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for j in 0..cols {
        for (i, xi) in x.iter().enumerate() {
            out[j] += xi * w[i][j];
        }
    }
    out
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub struct GruRef {
    pub w: [Mat; 3],
    pub v: [Mat; 3],
}

impl GruRef {
    pub fn load(store: &ParamStore, prefix: &str) -> Self {
        let p = |n: &str| param(store, &format!("{prefix}.{n}"));
        Self {
            w: [p("w_z"), p("w_r"), p("w_h")],
            v: [p("v_z"), p("v_r"), p("v_h")],
        }
    }

    pub fn hidden(&self) -> usize {
        self.v[0].len()
    }

    /// `z = σ(x·W_z + h·V_z)`, `r = σ(x·W_r + h·V_r)`,
    /// `h̃ = tanh(x·W_h + (r∘h)·V_h)`, `h' = z∘h̃ + (1−z)∘h`.
    pub fn cell(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let n = self.hidden();
        let mut out = vec![0.0; n];
        let mut r = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for (i, xi) in x.iter().enumerate() {
                s += xi * self.w[1][i][j];
            }
            for (k, hk) in h.iter().enumerate() {
                s += hk * self.v[1][k][j];
            }
            r[j] = sigmoid(s);
        }
        for j in 0..n {
            let mut zs = 0.0;
            let mut cs = 0.0;
            for (i, xi) in x.iter().enumerate() {
                zs += xi * self.w[0][i][j];
                cs += xi * self.w[2][i][j];
            }
            for k in 0..n {
                zs += h[k] * self.v[0][k][j];
                cs += r[k] * h[k] * self.v[2][k][j];
            }
            let z = sigmoid(zs);
            out[j] = z * cs.tanh() + (1.0 - z) * h[j];
        }
        out
    }

    pub fn run(&self, xs: &[Vec<f64>]) -> Mat {
        let mut h = vec![0.0; self.hidden()];
        let mut states = Vec::new();
        for x in xs {
            h = self.cell(x, &h);
            states.push(h.clone());
        }
        states
    }
}

pub struct AttRef {
    pub w_key: Mat,
    pub w_query: Mat,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
}

impl AttRef {
    pub fn load(store: &ParamStore, prefix: &str) -> Self {
        let p = |n: &str| param(store, &format!("{prefix}.{n}"));
        Self {
            w_key: p("w_key"),
            w_query: p("w_query"),
            b: p("b")[0].clone(),
            v: p("v").iter().map(|r| r[0]).collect(),
        }
    }

    /// `vᵀ tanh(k·W_key + q·W_query + b)` per key, softmax-normalised.
    pub fn weights(&self, keys: &[Vec<f64>], query: &[f64]) -> Vec<f64> {
        let width = self.b.len();
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| {
                let mut s = 0.0;
                for j in 0..width {
                    let mut pre = self.b[j];
                    for (i, ki) in k.iter().enumerate() {
                        pre += ki * self.w_key[i][j];
                    }
                    for (i, qi) in query.iter().enumerate() {
                        pre += qi * self.w_query[i][j];
                    }
                    s += self.v[j] * pre.tanh();
                }
                s
            })
            .collect();
        softmax(&scores)
    }

    pub fn pool(&self, keys: &[Vec<f64>], query: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = self.weights(keys, query);
        let mut ctx = vec![0.0; keys[0].len()];
        for (k, a) in keys.iter().zip(&w) {
            for (c, x) in ctx.iter_mut().zip(k) {
                *c += a * x;
            }
        }
        (ctx, w)
    }
}

/// Self-matching flow: each step feeds `[f_t, c_t]` to the GRU.
pub fn flow_ref(gru: &GruRef, att: &AttRef, fused: &[Vec<f64>]) -> (Mat, Mat) {
    let mut h = vec![0.0; gru.hidden()];
    let mut states = Vec::new();
    let mut attention = Vec::new();
    for f in fused {
        let (c, w) = att.pool(fused, f);
        let mut input = f.clone();
        input.extend(c);
        h = gru.cell(&input, &h);
        states.push(h.clone());
        attention.push(w);
    }
    (states, attention)
}

pub fn conv_ref(x: &Mat, k: &Mat, bias: f64) -> Mat {
    let (oh, ow) = (x.len() - k.len() + 1, x[0].len() - k[0].len() + 1);
    let mut out = vec![vec![0.0; ow]; oh];
    for i in 0..oh {
        for j in 0..ow {
            let mut s = bias;
            for a in 0..k.len() {
                for b in 0..k[0].len() {
                    s += x[i + a][j + b] * k[a][b];
                }
            }
            out[i][j] = s;
        }
    }
    out
}

/// Ceil-mode max-pooling over non-overlapping windows.
pub fn pool_ref(x: &Mat, window: (usize, usize)) -> Mat {
    let (h, w) = (x.len(), x[0].len());
    let mut out = Vec::new();
    let mut i0 = 0;
    while i0 < h {
        let mut row = Vec::new();
        let mut j0 = 0;
        while j0 < w {
            let mut best = f64::NEG_INFINITY;
            for i in i0..(i0 + window.0).min(h) {
                for j in j0..(j0 + window.1).min(w) {
                    best = best.max(x[i][j]);
                }
            }
            row.push(best);
            j0 += window.1;
        }
        out.push(row);
        i0 += window.0;
    }
    out
}

pub fn pad_ref(m: &Mat, rows: usize, cols: usize) -> Mat {
    let mut out = vec![vec![0.0; cols]; rows];
    for (i, r) in m.iter().enumerate() {
        out[i][..r.len()].copy_from_slice(r);
    }
    out
}

/// Word maps then flow maps, each conv → ReLU → pool, flattened row-major.
pub fn cnn_ref(store: &ParamStore, prefix: &str, n_filters: usize, m1: &Mat, m2: &Mat, pool: (usize, usize)) -> Vec<f64> {
    let mut out = Vec::new();
    for (name, m) in [("m1", m1), ("m2", m2)] {
        for f in 0..n_filters {
            let k = param(store, &format!("{prefix}.{name}.k{f}"));
            let b = param(store, &format!("{prefix}.{name}.b{f}"))[0][0];
            let c = conv_ref(m, &k, b);
            let r: Mat = c.iter().map(|row| row.iter().map(|v| v.max(0.0)).collect()).collect();
            for row in pool_ref(&r, pool) {
                out.extend(row);
            }
        }
    }
    out
}

/// Turns GRU over match vectors, attention from final flow states, output
/// projection. Returns `(logits, weights)`.
pub fn aggregate_ref(gru: &GruRef, att: &AttRef, output: &Mat, matches: &[Vec<f64>], finals: &[Vec<f64>]) -> ([f64; 2], Vec<f64>) {
    let h = gru.run(matches);
    let width = att.b.len();
    let scores: Vec<f64> = (0..h.len())
        .map(|i| {
            let mut s = 0.0;
            for j in 0..width {
                let mut pre = att.b[j];
                for (a, x) in finals[i].iter().enumerate() {
                    pre += x * att.w_key[a][j];
                }
                for (a, x) in h[i].iter().enumerate() {
                    pre += x * att.w_query[a][j];
                }
                s += att.v[j] * pre.tanh();
            }
            s
        })
        .collect();
    let alpha = softmax(&scores);
    let mut summary = vec![0.0; gru.hidden()];
    for (hi, a) in h.iter().zip(&alpha) {
        for (s, x) in summary.iter_mut().zip(hi) {
            *s += a * x;
        }
    }
    let l = vec_mat(&summary, output);
    ([l[0], l[1]], alpha)
}

/// Straight-line evaluation of the whole model for one sample.
pub fn dua_reference(cfg: &DuaConfig, store: &ParamStore, sample: &EncodedSample) -> ([f64; 2], f64) {
    let emb = param(store, model::EMBEDDING);
    let t = sample.turns;
    let mut seqs: Vec<Mat> = (0..t)
        .map(|k| sample.utterance_ids(k).iter().map(|&i| emb[i as usize].clone()).collect())
        .collect();
    seqs.push(sample.response_ids().iter().map(|&i| emb[i as usize].clone()).collect());

    let utt = GruRef::load(store, model::UTT_GRU);
    let states: Vec<Mat> = seqs.iter().map(|s| utt.run(s)).collect();
    let last = states[t - 1].last().unwrap().clone();
    let fused: Vec<Mat> = if cfg.ablate_cf {
        states.clone()
    } else {
        states
            .iter()
            .map(|s| {
                s.iter()
                    .map(|row| match cfg.fusion {
                        Fusion::Concat => row.iter().chain(&last).copied().collect(),
                        Fusion::Sum => row.iter().zip(&last).map(|(a, b)| a + b).collect(),
                        Fusion::Mul => row.iter().zip(&last).map(|(a, b)| a * b).collect(),
                    })
                    .collect()
            })
            .collect()
    };

    let flow_gru = GruRef::load(store, model::FLOW_GRU);
    let flows: Vec<Mat> = if cfg.ablate_maf {
        fused.iter().map(|f| flow_gru.run(f)).collect()
    } else {
        let att = AttRef::load(store, model::FLOW_ATT);
        fused.iter().map(|f| flow_ref(&flow_gru, &att, f).0).collect()
    };

    let a = param(store, model::BILINEAR);
    let n = cfg.max_words;
    let r_emb_t = transpose(&seqs[t]);
    let a_pr_t = matmul(&a, &transpose(&flows[t]));
    let matches: Vec<Vec<f64>> = (0..t)
        .map(|k| {
            let m1 = pad_ref(&matmul(&seqs[k], &r_emb_t), n, n);
            let m2 = pad_ref(&matmul(&flows[k], &a_pr_t), n, n);
            cnn_ref(store, model::CNN, cfg.n_filters, &m1, &m2, cfg.pool)
        })
        .collect();

    let output = param(store, model::OUTPUT);
    let logits = if cfg.ablate_cf {
        let mut joined = vec![0.0; (cfg.max_utterances - t) * cfg.match_dim()];
        for m in &matches {
            joined.extend(m);
        }
        let w = param(store, model::MLP_W);
        let b = &param(store, model::MLP_B)[0];
        let hidden: Vec<f64> = vec_mat(&joined, &w).iter().zip(b).map(|(x, b)| (x + b).tanh()).collect();
        let l = vec_mat(&hidden, &output);
        [l[0], l[1]]
    } else {
        let gru = GruRef::load(store, model::TURNS_GRU);
        let att = AttRef::load(store, model::TURNS_ATT);
        let finals: Mat = flows[..t].iter().map(|f| f.last().unwrap().clone()).collect();
        aggregate_ref(&gru, &att, &output, &matches, &finals).0
    };
    let p = softmax(&logits);
    (logits, p[1])
}

/// Ranking metrics by explicit rank counting. Returns
/// `[AP, RR, P@1, R@1, R@2, R@5]`, or `None` without positives.
pub fn brute_metrics(scores: &[f64], labels: &[u8]) -> Option<[f64; 6]> {
    let n = scores.len();
    let total = labels.iter().filter(|&&l| l == 1).count();
    if total == 0 {
        return None;
    }
    // rank (1-based) of each candidate: higher scores first, ties by index
    let rank: Vec<usize> = (0..n)
        .map(|i| {
            1 + (0..n)
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
        })
        .collect();
    let at_rank = |r: usize| (0..n).find(|&i| rank[i] == r).unwrap();

    let mut ap = 0.0;
    let mut hits = 0;
    for r in 1..=n {
        let i = at_rank(r);
        if labels[i] == 1 {
            hits = (0..n).filter(|&j| labels[j] == 1 && rank[j] <= r).count();
            ap += hits as f64 / r as f64;
        }
    }
    ap /= hits as f64;
    let first = (1..=n).find(|&r| labels[at_rank(r)] == 1).unwrap();
    let recall = |k: usize| {
        let inside = (0..n).filter(|&i| labels[i] == 1 && rank[i] <= k).count();
        inside as f64 / total as f64
    };
    Some([
        ap,
        1.0 / first as f64,
        f64::from(labels[at_rank(1)]),
        recall(1),
        recall(2),
        recall(5),
    ])
}

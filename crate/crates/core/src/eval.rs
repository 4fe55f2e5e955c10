//! Grouped ranking metrics: MAP, MRR, P@1 and R_n@k.
//!
//! A group is one context with its `n` scored candidates. Groups without a
//! positive candidate are counted as skipped and left out of every average.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::data::EncodedSample;
use crate::error::{contract, DuaError, Result};
use crate::model::Dua;

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub score: f64,
    pub label: u8,
    pub category: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedGroup {
    pub id: usize,
    pub candidates: Vec<Candidate>,
}

impl RankedGroup {
    pub fn new(id: usize, scores: &[f64], labels: &[u8]) -> Self {
        Self {
            id,
            candidates: scores
                .iter()
                .zip(labels)
                .map(|(&score, &label)| Candidate {
                    score,
                    label,
                    category: None,
                })
                .collect(),
        }
    }

    pub fn positives(&self) -> usize {
        self.candidates.iter().filter(|c| c.label == 1).count()
    }
}

/// Candidate indices by descending score; ties keep input order.
pub fn rank_group(group: &RankedGroup) -> Result<Vec<usize>> {
    if group.candidates.is_empty() {
        return contract(format!("group {} is empty", group.id));
    }
    if group.candidates.iter().any(|c| c.score.is_nan()) {
        return contract(format!("group {} has a NaN score", group.id));
    }
    let mut order: Vec<usize> = (0..group.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        group.candidates[b]
            .score
            .partial_cmp(&group.candidates[a].score)
            .expect("scores are not NaN")
    });
    Ok(order)
}

fn ranked_labels(group: &RankedGroup) -> Result<Option<Vec<u8>>> {
    if group.positives() == 0 {
        return Ok(None);
    }
    Ok(Some(rank_group(group)?.into_iter().map(|i| group.candidates[i].label).collect()))
}

/// Fraction of the group's positives ranked within the top `k` (clamped to
/// the group size). `None` when the group has no positive.
pub fn recall_at_k(group: &RankedGroup, k: usize) -> Result<Option<f64>> {
    if k == 0 {
        return contract("recall@0 is undefined");
    }
    Ok(ranked_labels(group)?.map(|labels| {
        let total = labels.iter().filter(|&&l| l == 1).count();
        let hit = labels.iter().take(k).filter(|&&l| l == 1).count();
        hit as f64 / total as f64
    }))
}

/// Mean over positives of precision at that positive's rank.
pub fn average_precision(group: &RankedGroup) -> Result<Option<f64>> {
    Ok(ranked_labels(group)?.map(|labels| {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if l == 1 {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        sum / hits as f64
    }))
}

pub fn reciprocal_rank(group: &RankedGroup) -> Result<Option<f64>> {
    Ok(ranked_labels(group)?.map(|labels| {
        let first = labels.iter().position(|&l| l == 1).expect("has a positive");
        1.0 / (first + 1) as f64
    }))
}

pub fn precision_at_1(group: &RankedGroup) -> Result<Option<f64>> {
    Ok(ranked_labels(group)?.map(|labels| f64::from(labels[0])))
}

/// Metric used to pick the best epoch during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Metric {
    Map,
    Mrr,
    P1,
    #[default]
    R1,
    R2,
    R5,
}

impl Metric {
    pub fn of(self, report: &MetricsReport) -> f64 {
        match self {
            Metric::Map => report.map,
            Metric::Mrr => report.mrr,
            Metric::P1 => report.p_at_1,
            Metric::R1 => report.r_at_1,
            Metric::R2 => report.r_at_2,
            Metric::R5 => report.r_at_5,
        }
    }
}

impl FromStr for Metric {
    type Err = DuaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "map" => Ok(Metric::Map),
            "mrr" => Ok(Metric::Mrr),
            "p@1" | "p1" => Ok(Metric::P1),
            "r@1" | "r1" => Ok(Metric::R1),
            "r@2" | "r2" => Ok(Metric::R2),
            "r@5" | "r5" => Ok(Metric::R5),
            other => Err(DuaError::Config(format!("unknown metric `{other}`"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Map => "map",
            Metric::Mrr => "mrr",
            Metric::P1 => "p@1",
            Metric::R1 => "r@1",
            Metric::R2 => "r@2",
            Metric::R5 => "r@5",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub map: f64,
    pub mrr: f64,
    pub p_at_1: f64,
    pub r_at_1: f64,
    pub r_at_2: f64,
    pub r_at_5: f64,
    /// Candidates per group (0 when groups differ in size).
    pub group_size: usize,
    pub total: usize,
    pub skipped: usize,
    pub per_category: BTreeMap<String, MetricsReport>,
}

impl MetricsReport {
    pub fn scored(&self) -> usize {
        self.total - self.skipped
    }

    /// Averages every metric over groups that have a positive.
    pub fn from_groups(groups: &[RankedGroup]) -> Result<Self> {
        let mut report = Self::aggregate(groups)?;
        let mut by_category: BTreeMap<String, Vec<RankedGroup>> = BTreeMap::new();
        for g in groups {
            if let Some(cat) = g.candidates.first().and_then(|c| c.category.clone()) {
                by_category.entry(cat).or_default().push(g.clone());
            }
        }
        for (cat, gs) in by_category {
            report.per_category.insert(cat, Self::aggregate(&gs)?);
        }
        Ok(report)
    }

    fn aggregate(groups: &[RankedGroup]) -> Result<Self> {
        let mut sums = [0.0; 6];
        let mut scored = 0usize;
        for g in groups {
            let Some(ap) = average_precision(g)? else { continue };
            let values = [
                ap,
                reciprocal_rank(g)?.expect("has a positive"),
                precision_at_1(g)?.expect("has a positive"),
                recall_at_k(g, 1)?.expect("has a positive"),
                recall_at_k(g, 2)?.expect("has a positive"),
                recall_at_k(g, 5)?.expect("has a positive"),
            ];
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            scored += 1;
        }
        let mean = |s: f64| if scored == 0 { 0.0 } else { s / scored as f64 };
        let sizes: Vec<usize> = groups.iter().map(|g| g.candidates.len()).collect();
        let group_size = match sizes.first() {
            Some(&n) if sizes.iter().all(|&s| s == n) => n,
            _ => 0,
        };
        Ok(Self {
            map: mean(sums[0]),
            mrr: mean(sums[1]),
            p_at_1: mean(sums[2]),
            r_at_1: mean(sums[3]),
            r_at_2: mean(sums[4]),
            r_at_5: mean(sums[5]),
            group_size,
            total: groups.len(),
            skipped: groups.len() - scored,
            per_category: BTreeMap::new(),
        })
    }

    fn kv_lines(&self, prefix: &str, out: &mut String) {
        let n = self.group_size;
        for (k, v) in [
            ("map".to_string(), self.map),
            ("mrr".to_string(), self.mrr),
            ("p@1".to_string(), self.p_at_1),
            (format!("r{n}@1"), self.r_at_1),
            (format!("r{n}@2"), self.r_at_2),
            (format!("r{n}@5"), self.r_at_5),
        ] {
            out.push_str(&format!("{prefix}{k}={v}\n"));
        }
        out.push_str(&format!("{prefix}groups={}\n{prefix}skipped={}\n", self.total, self.skipped));
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        self.kv_lines("", &mut out);
        for (cat, r) in &self.per_category {
            r.kv_lines(&format!("category.{cat}."), &mut out);
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.group_size;
        let header = format!(
            "{:<16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "", "MAP", "MRR", "P@1",
            format!("R{n}@1"), format!("R{n}@2"), format!("R{n}@5"), "groups"
        );
        writeln!(f, "{header}")?;
        let mut row = |name: &str, r: &MetricsReport| {
            writeln!(
                f,
                "{:<16} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7}",
                name, r.map, r.mrr, r.p_at_1, r.r_at_1, r.r_at_2, r.r_at_5, r.scored()
            )
        };
        row("all", self)?;
        for (cat, r) in &self.per_category {
            row(cat, r)?;
        }
        if self.skipped > 0 {
            writeln!(f, "({} of {} groups skipped: no positive candidate)", self.skipped, self.total)?;
        }
        Ok(())
    }
}

/// Splits parallel score/label/category lists into consecutive groups of `n`.
pub fn group_scores(
    scores: &[f64],
    labels: &[u8],
    categories: Option<&[Option<String>]>,
    n: usize,
) -> Result<Vec<RankedGroup>> {
    if n == 0 || !scores.len().is_multiple_of(n) {
        return contract(format!("{} candidates do not split into groups of {n}", scores.len()));
    }
    if labels.len() != scores.len() || categories.is_some_and(|c| c.len() != scores.len()) {
        return contract("scores, labels and categories differ in length");
    }
    Ok((0..scores.len() / n)
        .map(|g| RankedGroup {
            id: g,
            candidates: (g * n..(g + 1) * n)
                .map(|i| Candidate {
                    score: scores[i],
                    label: labels[i],
                    category: categories.and_then(|c| c[i].clone()),
                })
                .collect(),
        })
        .collect())
}

pub fn evaluate_scores(
    scores: &[f64],
    labels: &[u8],
    categories: Option<&[Option<String>]>,
    n: usize,
) -> Result<MetricsReport> {
    MetricsReport::from_groups(&group_scores(scores, labels, categories, n)?)
}

/// Scores every sample with `score` (in parallel when enabled).
pub fn score_all<F>(samples: &[EncodedSample], score: F) -> Result<Vec<f64>>
where
    F: Fn(&EncodedSample) -> Result<f64> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        samples.par_iter().map(score).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        samples.iter().map(score).collect()
    }
}

/// Scores a test corpus of consecutive groups of `n` with the model.
pub fn evaluate_model(
    model: &Dua,
    corpus: &[EncodedSample],
    categories: Option<&[Option<String>]>,
    n: usize,
) -> Result<MetricsReport> {
    if n == 0 || !corpus.len().is_multiple_of(n) {
        return contract(format!("{} samples do not split into groups of {n}", corpus.len()));
    }
    let scores = score_all(corpus, |s| model.score(s))?;
    let labels: Vec<u8> = corpus.iter().map(|s| s.label).collect();
    evaluate_scores(&scores, &labels, categories, n)
}

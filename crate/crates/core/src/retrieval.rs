//! Cosine-similarity retrieval and ranking metrics at every hierarchy level.
//!
//! All metrics use binary relevance per level over the full ranked list.
//! Each query is ranked once and that ranking feeds every level and cutoff.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::encoder::{forward, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{dot, normalize_rows, DenseMatrix};
use crate::sampler::EvalSplit;
use crate::taxonomy::{relevant_mask, HierLabel, HierLevel};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

/// Unit-norm database embeddings with their labels.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    embeddings: DenseMatrix,
    labels: Vec<HierLabel>,
    image_ids: Vec<String>,
}

impl EmbeddingIndex {
    pub fn new(embeddings: DenseMatrix, labels: Vec<HierLabel>, image_ids: Vec<String>) -> Result<Self> {
        let n = embeddings.rows();
        if n == 0 {
            return Err(Error::InsufficientData("empty index".into()));
        }
        if labels.len() != n || image_ids.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} embeddings, {} labels, {} ids",
                labels.len(),
                image_ids.len()
            )));
        }
        let (embeddings, _) = normalize_rows(&embeddings).map_err(|e| match e {
            Error::Degenerate(msg) => Error::Degenerate(format!("index {msg}")),
            other => other,
        })?;
        Ok(Self {
            embeddings,
            labels,
            image_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &DenseMatrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[HierLabel] {
        &self.labels
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }
}

/// Unit-norm embeddings of `records`; a zero embedding is an error naming
/// the record.
pub fn embed_records(params: &EncoderParams, records: &[ImageRecord]) -> Result<DenseMatrix> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no records to embed".into()));
    }
    let rows: Vec<&[f64]> = records.iter().map(|r| r.features.as_slice()).collect();
    let x = DenseMatrix::from_rows(&rows)?;
    let z = forward(params, &x)?;
    normalize_rows(&z).map(|(u, _)| u).map_err(|_| {
        let bad = (0..z.rows())
            .find(|&r| z.row(r).iter().all(|v| *v == 0.0) || !z.row(r).iter().all(|v| v.is_finite()))
            .unwrap_or(0);
        Error::Degenerate(format!("record {} has a zero embedding", records[bad].image_id))
    })
}

pub fn build_index(params: &EncoderParams, records: &[ImageRecord]) -> Result<EmbeddingIndex> {
    let embeddings = embed_records(params, records)?;
    EmbeddingIndex::new(
        embeddings,
        records.iter().map(|r| r.label.clone()).collect(),
        records.iter().map(|r| r.image_id.clone()).collect(),
    )
}

/// Database indices sorted by descending similarity, ties by ascending index.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub similarities: Vec<f64>,
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Orders precomputed scores (higher first).
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let similarities = order.iter().map(|&i| scores[i]).collect();
        Self { order, similarities }
    }

    /// Relevance flags in rank order.
    fn hits<'a>(&'a self, relevant: &'a [bool]) -> impl Iterator<Item = bool> + 'a {
        self.order.iter().map(move |&i| relevant[i])
    }
}

pub fn rank(index: &EmbeddingIndex, query: &[f64]) -> Result<Ranking> {
    if query.len() != index.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query of dimension {} for index of dimension {}",
            query.len(),
            index.dim()
        )));
    }
    let scores: Vec<f64> = index
        .embeddings
        .row_iter()
        .map(|row| dot(row, query).clamp(-1.0, 1.0))
        .collect();
    Ok(Ranking::from_scores(&scores))
}

fn check_mask(ranking: &Ranking, relevant: &[bool]) -> Result<usize> {
    if relevant.len() != ranking.len() {
        return Err(Error::DimensionMismatch(format!(
            "mask of length {} for ranking of {}",
            relevant.len(),
            ranking.len()
        )));
    }
    let r = relevant.iter().filter(|v| **v).count();
    if r == 0 {
        return Err(Error::InsufficientData("no relevant items for this query".into()));
    }
    Ok(r)
}

/// Mean of precision@k over the ranks `k` holding relevant items.
pub fn average_precision(ranking: &Ranking, relevant: &[bool]) -> Result<f64> {
    let r = check_mask(ranking, relevant)?;
    let mut found = 0usize;
    let mut sum = 0.0;
    for (pos, hit) in ranking.hits(relevant).enumerate() {
        if hit {
            found += 1;
            sum += found as f64 / (pos + 1) as f64;
        }
    }
    Ok(sum / r as f64)
}

/// Binary-gain nDCG with `log2(rank + 1)` discount over the full list.
pub fn ndcg(ranking: &Ranking, relevant: &[bool]) -> Result<f64> {
    let r = check_mask(ranking, relevant)?;
    let dcg: f64 = ranking
        .hits(relevant)
        .enumerate()
        .filter(|(_, hit)| *hit)
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..r).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    Ok(dcg / idcg)
}

fn first_hit(ranking: &Ranking, relevant: &[bool]) -> Option<usize> {
    ranking.hits(relevant).position(|h| h).map(|p| p + 1)
}

/// `1/r` for the first relevant rank `r <= k`, else 0.
pub fn mrr_at_k(ranking: &Ranking, relevant: &[bool], k: usize) -> f64 {
    match first_hit(ranking, relevant) {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    }
}

/// 1 when any relevant item is within the top `k`.
pub fn acc_at_k(ranking: &Ranking, relevant: &[bool], k: usize) -> f64 {
    match first_hit(ranking, relevant) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// Metric values of one query at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLevelMetrics {
    pub relevant: usize,
    pub ap: f64,
    pub ndcg: f64,
    pub mrr: Vec<f64>,
    pub acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub image_id: String,
    /// Indexed like [`HierLevel::ALL`]; `None` when nothing is relevant.
    pub levels: [Option<QueryLevelMetrics>; 3],
}

fn validate_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig("cutoffs must be non-empty and >= 1".into()));
    }
    Ok(())
}

/// Scores one ranking at every level and cutoff.
pub fn score_query(
    image_id: &str,
    label: &HierLabel,
    ranking: &Ranking,
    database: &[HierLabel],
    ks: &[usize],
) -> Result<QueryMetrics> {
    let mut levels: [Option<QueryLevelMetrics>; 3] = [None, None, None];
    for (slot, level) in HierLevel::ALL.iter().enumerate() {
        let mask = relevant_mask(label, database, *level);
        let relevant = mask.iter().filter(|v| **v).count();
        if relevant == 0 {
            continue;
        }
        levels[slot] = Some(QueryLevelMetrics {
            relevant,
            ap: average_precision(ranking, &mask)?,
            ndcg: ndcg(ranking, &mask)?,
            mrr: ks.iter().map(|&k| mrr_at_k(ranking, &mask, k)).collect(),
            acc: ks.iter().map(|&k| acc_at_k(ranking, &mask, k)).collect(),
        });
    }
    Ok(QueryMetrics {
        image_id: image_id.to_string(),
        levels,
    })
}

/// Per-query metrics for every query of `split`.
pub fn evaluate_queries(params: &EncoderParams, split: &EvalSplit, ks: &[usize]) -> Result<Vec<QueryMetrics>> {
    validate_ks(ks)?;
    if split.database.is_empty() {
        return Err(Error::InsufficientData("evaluation database is empty".into()));
    }
    let index = build_index(params, &split.database)?;
    if split.queries.is_empty() {
        return Ok(Vec::new());
    }
    let queries = embed_records(params, &split.queries)?;
    (0..split.queries.len())
        .into_par_iter()
        .map(|q| {
            let ranking = rank(&index, queries.row(q))?;
            let rec = &split.queries[q];
            score_query(&rec.image_id, &rec.label, &ranking, index.labels(), ks)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: HierLevel,
    pub map: f64,
    pub ndcg: f64,
    /// Keyed by cutoff.
    pub mrr: BTreeMap<usize, f64>,
    pub acc: BTreeMap<usize, f64>,
    /// Queries with at least one relevant item at this level.
    pub queries: usize,
    /// Queries left out because nothing was relevant.
    pub excluded: usize,
    pub mean_relevant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub query_count: usize,
    pub database_size: usize,
    pub levels: Vec<LevelMetrics>,
}

impl MetricsReport {
    /// Averages per-query metrics in query order.
    pub fn from_queries(per_query: &[QueryMetrics], ks: &[usize], database_size: usize) -> Self {
        let levels = HierLevel::ALL
            .iter()
            .enumerate()
            .map(|(slot, &level)| {
                let scored: Vec<&QueryLevelMetrics> =
                    per_query.iter().filter_map(|q| q.levels[slot].as_ref()).collect();
                let n = scored.len();
                let mean = |f: &dyn Fn(&QueryLevelMetrics) -> f64| -> f64 {
                    if n == 0 {
                        0.0
                    } else {
                        scored.iter().map(|m| f(m)).sum::<f64>() / n as f64
                    }
                };
                let mut mrr = BTreeMap::new();
                let mut acc = BTreeMap::new();
                for (ki, &k) in ks.iter().enumerate() {
                    mrr.insert(k, mean(&|m| m.mrr[ki]));
                    acc.insert(k, mean(&|m| m.acc[ki]));
                }
                LevelMetrics {
                    level,
                    map: mean(&|m| m.ap),
                    ndcg: mean(&|m| m.ndcg),
                    mrr,
                    acc,
                    queries: n,
                    excluded: per_query.len() - n,
                    mean_relevant: mean(&|m| m.relevant as f64),
                }
            })
            .collect();
        Self {
            ks: ks.to_vec(),
            query_count: per_query.len(),
            database_size,
            levels,
        }
    }

    pub fn level(&self, level: HierLevel) -> &LevelMetrics {
        self.levels
            .iter()
            .find(|l| l.level == level)
            .expect("report covers every level")
    }

    /// Flat `(level, metric, K, value, queries)` rows.
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut out = Vec::new();
        for l in &self.levels {
            out.push(MetricRow::new(l, "mAP", None, l.map));
            out.push(MetricRow::new(l, "nDCG", None, l.ndcg));
            for (&k, &v) in &l.mrr {
                out.push(MetricRow::new(l, "MRR", Some(k), v));
            }
            for (&k, &v) in &l.acc {
                out.push(MetricRow::new(l, "Acc", Some(k), v));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,metric,K,value,queries\n");
        for r in self.rows() {
            let k = r.k.map(|k| k.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", r.level, r.metric, k, r.value, r.queries));
        }
        s
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Serialize(e.to_string()))?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub level: HierLevel,
    pub metric: &'static str,
    pub k: Option<usize>,
    pub value: f64,
    pub queries: usize,
}

impl MetricRow {
    fn new(l: &LevelMetrics, metric: &'static str, k: Option<usize>, value: f64) -> Self {
        Self {
            level: l.level,
            metric,
            k,
            value,
            queries: l.queries,
        }
    }
}

/// Embeds the database, ranks every query once and reports per-level means.
pub fn evaluate(params: &EncoderParams, split: &EvalSplit, ks: &[usize]) -> Result<MetricsReport> {
    let per_query = evaluate_queries(params, split, ks)?;
    Ok(MetricsReport::from_queries(&per_query, ks, split.database.len()))
}

//! Multi-seed CL/HMCL/Baseline comparison, PCA projections of selected
//! subclasses, and flat MRR@K/Acc@K curves.
//!
//! "Baseline" is the randomly initialized encoder of each seed, evaluated
//! without any training.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitSpec};
use crate::encoder::{eval_split_for, init_params, train, EncoderParams, EvalTarget, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::LossMode;
use crate::numerics::pca2;
use crate::retrieval::{embed_records, evaluate, MetricsReport};
use crate::taxonomy::HierLevel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Baseline,
    Cl,
    Hmcl,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "Baseline",
            Method::Cl => "CL",
            Method::Hmcl => "HMCL",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub level: HierLevel,
    pub metric: String,
    pub k: Option<usize>,
    pub mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: f64,
    pub seeds: usize,
}

/// Reports of one seed for each method.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub reports: BTreeMap<Method, MetricsReport>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains CL and HMCL for one seed and evaluates both plus the untrained
/// encoder on the test split.
pub fn run_seed(ds: &Dataset, split: &SplitSpec, cfg_base: &TrainConfig, seed: u64) -> Result<SeedResult> {
    let eval = eval_split_for(ds, split, EvalTarget::Test, cfg_base.queries_per_patent)?;
    let ks = crate::retrieval::DEFAULT_KS;
    let mut reports = BTreeMap::new();

    let base_cfg = TrainConfig {
        seed,
        ..cfg_base.clone()
    };
    let baseline = init_params(ds.d_in(), &base_cfg);
    reports.insert(Method::Baseline, evaluate(&baseline, &eval, &ks)?);

    for (method, mode) in [(Method::Cl, LossMode::Cl), (Method::Hmcl, LossMode::Hmcl)] {
        let cfg = TrainConfig {
            loss_mode: mode,
            ..base_cfg.clone()
        };
        let (params, _) = train(ds, split, &cfg)?;
        reports.insert(method, evaluate(&params, &eval, &ks)?);
    }
    Ok(SeedResult { seed, reports })
}

/// Method, level, row position within the report, and cutoff.
type CellKey = (Method, HierLevel, usize, Option<usize>);

/// Aggregates `(method, level, metric, K)` across seeds.
pub fn aggregate(results: &[SeedResult]) -> Vec<ComparisonRow> {
    let mut cells: BTreeMap<CellKey, (String, Vec<f64>)> = BTreeMap::new();
    for r in results {
        for (&method, report) in &r.reports {
            for (pos, row) in report.rows().into_iter().enumerate() {
                cells
                    .entry((method, row.level, pos, row.k))
                    .or_insert_with(|| (row.metric.to_string(), Vec::new()))
                    .1
                    .push(row.value);
            }
        }
    }
    cells
        .into_iter()
        .map(|((method, level, _, k), (metric, values))| {
            let (mean, std) = mean_std(&values);
            ComparisonRow {
                method,
                level,
                metric,
                k,
                mean,
                std,
                seeds: values.len(),
            }
        })
        .collect()
}

/// Runs every seed (in parallel) and aggregates in seed-list order.
pub fn run_comparison(
    ds: &Dataset,
    split: &SplitSpec,
    cfg_base: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<ComparisonRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("comparison needs at least one seed".into()));
    }
    let results = seeds
        .par_iter()
        .map(|&s| run_seed(ds, split, cfg_base, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&results))
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("method,level,metric,K,mean,std,seeds\n");
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method, r.level, r.metric, k, r.mean, r.std, r.seeds
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub x: f64,
    pub y: f64,
    pub subclass: u32,
    pub main_class: u32,
    pub image_id: String,
}

/// First two principal components of the unit embeddings of every record
/// in `subclasses`.
pub fn project_subclasses(params: &EncoderParams, ds: &Dataset, subclasses: &[u32]) -> Result<Vec<ProjectionRow>> {
    let known = ds.subclasses();
    if let Some(&bad) = subclasses.iter().find(|s| !known.contains(s)) {
        return Err(Error::UnknownSubclass(bad));
    }
    let records: Vec<_> = ds
        .records()
        .iter()
        .filter(|r| subclasses.contains(&r.label.subclass()))
        .cloned()
        .collect();
    if records.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "projection needs at least 3 records, found {}",
            records.len()
        )));
    }
    let z = embed_records(params, &records)?;
    let p = pca2(&z)?;
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| ProjectionRow {
            x: p.projection.get(i, 0),
            y: p.projection.get(i, 1),
            subclass: r.label.subclass(),
            main_class: r.label.main_class(),
            image_id: r.image_id.clone(),
        })
        .collect())
}

pub fn projection_csv(rows: &[ProjectionRow]) -> String {
    let mut s = String::from("x,y,subclass,main_class,image_id\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.x, r.y, r.subclass, r.main_class, r.image_id));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: String,
    pub level: HierLevel,
    pub metric: &'static str,
    pub k: usize,
    pub value: f64,
}

/// MRR@K and Acc@K rows of `report`, labelled with `method`.
pub fn curves_mrr_acc(report: &MetricsReport, method: &str) -> Vec<CurveRow> {
    let mut out = Vec::new();
    for l in &report.levels {
        for (metric, values) in [("MRR", &l.mrr), ("Acc", &l.acc)] {
            for (&k, &value) in values {
                out.push(CurveRow {
                    method: method.to_string(),
                    level: l.level,
                    metric,
                    k,
                    value,
                });
            }
        }
    }
    out
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("method,level,metric,K,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.method, r.level, r.metric, r.k, r.value));
    }
    s
}

/// Mean cosine similarity between unit embeddings grouped by relation:
/// same subclass, sibling subclass (same main class), different main class.
/// Pairs of an image with itself are left out.
pub fn geometry_similarities(params: &EncoderParams, ds: &Dataset) -> Result<[f64; 3]> {
    let z = embed_records(params, ds.records())?;
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    let recs = ds.records();
    for i in 0..recs.len() {
        for j in i + 1..recs.len() {
            let (a, b) = (&recs[i].label, &recs[j].label);
            let slot = if a.subclass() == b.subclass() {
                0
            } else if a.main_class() == b.main_class() {
                1
            } else {
                2
            };
            sums[slot] += crate::numerics::dot(z.row(i), z.row(j));
            counts[slot] += 1;
        }
    }
    if counts.contains(&0) {
        return Err(Error::InsufficientData(
            "geometry needs sibling subclasses and several main classes".into(),
        ));
    }
    Ok([
        sums[0] / counts[0] as f64,
        sums[1] / counts[1] as f64,
        sums[2] / counts[2] as f64,
    ])
}

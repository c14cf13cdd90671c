//! Training batches (K patents × 2 images) and the query/database partition
//! used for evaluation.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::taxonomy::HierLabel;

/// `K` anchor/positive pairs, one per distinct patent.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub anchor_records: Vec<ImageRecord>,
    pub positive_records: Vec<ImageRecord>,
    pub labels: Vec<HierLabel>,
}

impl TrainBatch {
    pub fn k(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub queries: Vec<ImageRecord>,
    pub database: Vec<ImageRecord>,
    /// Patents that could not contribute queries without emptying their
    /// same-patent database entries.
    pub skipped_patents: Vec<String>,
}

/// Record indices of the given patents that have at least two images, in
/// sorted patent order.
fn eligible_patents(ds: &Dataset, patents: &[String]) -> Vec<Vec<usize>> {
    let wanted: HashSet<&str> = patents.iter().map(String::as_str).collect();
    ds.patents()
        .into_iter()
        .filter(|(p, idx)| wanted.contains(p) && idx.len() >= 2)
        .map(|(_, idx)| idx)
        .collect()
}

fn pair_batch<R: Rng + ?Sized>(ds: &Dataset, groups: &[&Vec<usize>], rng: &mut R) -> TrainBatch {
    let mut anchor_records = Vec::with_capacity(groups.len());
    let mut positive_records = Vec::with_capacity(groups.len());
    let mut labels = Vec::with_capacity(groups.len());
    for idx in groups {
        let pick = index::sample(rng, idx.len(), 2);
        let a = &ds.records()[idx[pick.index(0)]];
        let p = &ds.records()[idx[pick.index(1)]];
        labels.push(a.label.clone());
        anchor_records.push(a.clone());
        positive_records.push(p.clone());
    }
    TrainBatch {
        anchor_records,
        positive_records,
        labels,
    }
}

/// Draws `k` distinct patents uniformly from `train` and two distinct images
/// of each; the first image is the anchor.
pub fn sample_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    train: &[String],
    k: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    let eligible = eligible_patents(ds, train);
    if k == 0 || eligible.len() < k {
        return Err(Error::InsufficientData(format!(
            "batch of {k} patents requested, {} eligible",
            eligible.len()
        )));
    }
    let chosen = index::sample(rng, eligible.len(), k);
    let groups: Vec<&Vec<usize>> = chosen.iter().map(|i| &eligible[i]).collect();
    Ok(pair_batch(ds, &groups, rng))
}

/// One epoch: the eligible patents reshuffled and cut into
/// `floor(P / k)` disjoint batches.
pub fn epoch_batches<R: Rng + ?Sized>(
    ds: &Dataset,
    train: &[String],
    k: usize,
    rng: &mut R,
) -> Result<Vec<TrainBatch>> {
    let eligible = eligible_patents(ds, train);
    if k == 0 || eligible.len() < k {
        return Err(Error::InsufficientData(format!(
            "batch of {k} patents requested, {} eligible",
            eligible.len()
        )));
    }
    let mut order: Vec<&Vec<usize>> = eligible.iter().collect();
    order.shuffle(rng);
    Ok(order
        .chunks_exact(k)
        .map(|groups| pair_batch(ds, groups, rng))
        .collect())
}

/// With probability `p`, adds `N(0, sigma²·I)` to each record's features.
pub fn feature_noise<R: Rng + ?Sized>(batch: &TrainBatch, sigma: f64, p: f64, rng: &mut R) -> TrainBatch {
    let mut out = batch.clone();
    let perturb = |r: &mut ImageRecord, rng: &mut R| {
        if rng.random::<f64>() < p {
            for v in r.features.iter_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    };
    for r in out.anchor_records.iter_mut() {
        perturb(r, rng);
    }
    for r in out.positive_records.iter_mut() {
        perturb(r, rng);
    }
    out
}

/// Picks `queries_per_patent` images of each patent in `patents` as queries;
/// every other image of those patents forms the database.
///
/// A patent with no more than `queries_per_patent` images would leave no
/// same-patent item to retrieve, so it is skipped as a query source and all
/// of its images stay in the database.
pub fn build_eval_split<R: Rng + ?Sized>(
    ds: &Dataset,
    patents: &[String],
    queries_per_patent: usize,
    rng: &mut R,
) -> Result<EvalSplit> {
    if queries_per_patent == 0 {
        return Err(Error::InvalidConfig("queries_per_patent must be >= 1".into()));
    }
    let wanted: HashSet<&str> = patents.iter().map(String::as_str).collect();
    let mut queries = Vec::new();
    let mut database = Vec::new();
    let mut skipped_patents = Vec::new();
    for (patent, idx) in ds.patents() {
        if !wanted.contains(patent) {
            continue;
        }
        if idx.len() <= queries_per_patent {
            skipped_patents.push(patent.to_string());
            database.extend(idx.iter().map(|&i| ds.records()[i].clone()));
            continue;
        }
        let pick = index::sample(rng, idx.len(), queries_per_patent).into_vec();
        let chosen: HashSet<usize> = pick.iter().copied().collect();
        for &p in &pick {
            queries.push(ds.records()[idx[p]].clone());
        }
        for (pos, &i) in idx.iter().enumerate() {
            if !chosen.contains(&pos) {
                database.push(ds.records()[i].clone());
            }
        }
    }
    if !skipped_patents.is_empty() {
        log::info!(
            "{} patents have <= {queries_per_patent} images and were skipped as query sources",
            skipped_patents.len()
        );
    }
    if database.is_empty() {
        return Err(Error::InsufficientData("evaluation database is empty".into()));
    }
    Ok(EvalSplit {
        queries,
        database,
        skipped_patents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::taxonomy::{relevance_matrix, ScoreConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(patents: usize, images: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            main_classes: 1,
            subclasses_per_main: 1,
            patents_per_subclass: patents,
            images_per_patent: images,
            d_in: 4,
            seed: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn all_patents(ds: &Dataset) -> Vec<String> {
        ds.patents().keys().map(|p| p.to_string()).collect()
    }

    #[test]
    fn exhaustive_draw_uses_every_patent() {
        let ds = dataset(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&ds, &all_patents(&ds), 2, &mut rng).unwrap();
        let mut ids: Vec<&str> = b.labels.iter().map(|l| l.patent_id()).collect();
        ids.sort();
        assert_eq!(ids, vec!["P0101-001", "P0101-002"]);
        for i in 0..2 {
            assert_eq!(b.anchor_records[i].label, b.positive_records[i].label);
            assert_ne!(b.anchor_records[i].image_id, b.positive_records[i].image_id);
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let ds = dataset(10, 4);
        let train = all_patents(&ds);
        let a = sample_batch(&ds, &train, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_batch(&ds, &train, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_image_patents_are_ineligible() {
        let mut records = dataset(2, 2).records().to_vec();
        records.pop(); // second patent now has one image
        let ds = Dataset::new(records).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&ds, &all_patents(&ds), 2, &mut rng).is_err());
        assert!(sample_batch(&ds, &all_patents(&ds), 1, &mut rng).is_ok());
    }

    #[test]
    fn batch_invariants_hold() {
        let ds = generate_synthetic(&SyntheticSpec { seed: 3, ..SyntheticSpec::default() }).unwrap();
        let train = all_patents(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for batch in epoch_batches(&ds, &train, 16, &mut rng).unwrap() {
            let h = relevance_matrix(&batch.labels, &batch.labels, &ScoreConfig::default()).unwrap();
            for i in 0..batch.k() {
                assert_eq!(h.get(i, i), 1.0);
            }
            let ids: HashSet<&str> = batch
                .anchor_records
                .iter()
                .chain(&batch.positive_records)
                .map(|r| r.image_id.as_str())
                .collect();
            assert_eq!(ids.len(), 2 * batch.k());
            let patents: HashSet<&str> = batch.labels.iter().map(|l| l.patent_id()).collect();
            assert_eq!(patents.len(), batch.k());
        }
    }

    #[test]
    fn epoch_has_floor_p_over_k_batches() {
        let ds = dataset(10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(epoch_batches(&ds, &all_patents(&ds), 3, &mut rng).unwrap().len(), 3);
    }

    #[test]
    fn noise_probability_zero_is_identity() {
        let ds = dataset(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&ds, &all_patents(&ds), 4, &mut rng).unwrap();
        assert_eq!(feature_noise(&b, 1.0, 0.0, &mut rng), b);

        let tiny = feature_noise(&b, 1e-12, 1.0, &mut rng);
        for (x, y) in tiny.anchor_records.iter().zip(&b.anchor_records) {
            for (u, v) in x.features.iter().zip(&y.features) {
                assert!((u - v).abs() < 1e-10);
            }
        }
        assert_eq!(tiny.labels, b.labels);
    }

    #[test]
    fn noise_norm_matches_chi_expectation() {
        let ds = generate_synthetic(&SyntheticSpec {
            main_classes: 1,
            subclasses_per_main: 1,
            patents_per_subclass: 20,
            images_per_patent: 2,
            d_in: 1000,
            seed: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&ds, &all_patents(&ds), 20, &mut rng).unwrap();
        let noisy = feature_noise(&b, 1.0, 1.0, &mut rng);
        let mut total = 0.0;
        for (x, y) in noisy.anchor_records.iter().zip(&b.anchor_records) {
            let d: f64 = x.features.iter().zip(&y.features).map(|(u, v)| (u - v).powi(2)).sum();
            total += d.sqrt();
        }
        let mean = total / 20.0;
        assert!((mean - 1000f64.sqrt()).abs() < 0.1 * 1000f64.sqrt(), "{mean}");
    }

    #[test]
    fn eval_split_protocol() {
        let ds = dataset(3, 4);
        let patents = all_patents(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = build_eval_split(&ds, &patents, 2, &mut rng).unwrap();
        assert_eq!(s.queries.len(), 6);
        assert_eq!(s.database.len(), 6);
        let q: HashSet<&str> = s.queries.iter().map(|r| r.image_id.as_str()).collect();
        assert!(s.database.iter().all(|r| !q.contains(r.image_id.as_str())));
        let again = build_eval_split(&ds, &patents, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s, build_eval_split(&ds, &patents, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
        assert_eq!(again.queries.len(), 6);
    }

    #[test]
    fn two_image_patents_are_skipped_as_queries() {
        let mut records = dataset(2, 4).records().to_vec();
        records.truncate(6); // second patent keeps 2 images
        let ds = Dataset::new(records).unwrap();
        let s = build_eval_split(&ds, &all_patents(&ds), 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.skipped_patents, vec!["P0101-002".to_string()]);
        assert_eq!(s.queries.len(), 2);
        assert_eq!(s.database.len(), 4);
        for q in &s.queries {
            assert!(s.database.iter().any(|d| d.label.patent_id() == q.label.patent_id()));
        }
    }

    #[test]
    fn eval_split_rejects_empty_database() {
        let ds = dataset(2, 2);
        assert!(build_eval_split(&ds, &[], 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}

//! Records, JSONL ingestion, patent-level splits, the nested-Gaussian
//! synthetic generator and the hashed text featurizer.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::l2_normalize;
use crate::taxonomy::HierLabel;

/// Default split ratios for train / validation / test.
pub const DEFAULT_RATIOS: [f64; 3] = [0.7225, 0.1275, 0.15];

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub label: HierLabel,
    pub features: Vec<f64>,
    pub text: Option<String>,
}

/// On-disk shape of one JSONL line.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    image_id: String,
    patent_id: String,
    subclass: u32,
    main_class: u32,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ImageRecord>,
    d_in: usize,
}

impl Dataset {
    /// Validates and wraps records. Errors name the offending record using a
    /// one-based position, matching JSONL line numbers.
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut builder = DatasetBuilder::default();
        for (i, r) in records.into_iter().enumerate() {
            builder.push(i + 1, r)?;
        }
        builder.finish()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices grouped by patent, in sorted patent order.
    pub fn patents(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.label.patent_id()).or_default().push(i);
        }
        map
    }

    pub fn subclasses(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.label.subclass()).collect()
    }

    pub fn main_classes(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.label.main_class()).collect()
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = RecordLine {
                image_id: r.image_id.clone(),
                patent_id: r.label.patent_id().to_string(),
                subclass: r.label.subclass(),
                main_class: r.label.main_class(),
                features: r.features.clone(),
                text: r.text.clone(),
            };
            let s = serde_json::to_string(&line).map_err(|e| Error::Serialize(e.to_string()))?;
            writeln!(w, "{s}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Default)]
struct DatasetBuilder {
    records: Vec<ImageRecord>,
    d_in: Option<usize>,
    ids: HashSet<String>,
    patent_nodes: HashMap<String, (u32, u32)>,
}

impl DatasetBuilder {
    fn push(&mut self, line: usize, r: ImageRecord) -> Result<()> {
        if r.image_id.is_empty() {
            return Err(Error::InvalidRecord {
                line,
                message: "empty image_id".into(),
            });
        }
        let expected = *self.d_in.get_or_insert(r.features.len());
        if expected == 0 {
            return Err(Error::InvalidRecord {
                line,
                message: "empty feature vector".into(),
            });
        }
        if r.features.len() != expected {
            return Err(Error::LineDimension {
                line,
                expected,
                found: r.features.len(),
            });
        }
        if r.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord {
                line,
                message: "non-finite feature".into(),
            });
        }
        if r.features.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidRecord {
                line,
                message: "all-zero feature vector".into(),
            });
        }
        let node = (r.label.main_class(), r.label.subclass());
        match self.patent_nodes.get(r.label.patent_id()) {
            Some(prev) if *prev != node => {
                return Err(Error::Hierarchy {
                    line,
                    message: format!(
                        "patent {} filed under subclass {} and {}",
                        r.label.patent_id(),
                        prev.1,
                        node.1
                    ),
                })
            }
            Some(_) => {}
            None => {
                self.patent_nodes.insert(r.label.patent_id().to_string(), node);
            }
        }
        if !self.ids.insert(r.image_id.clone()) {
            return Err(Error::DuplicateImage {
                line,
                image_id: r.image_id,
            });
        }
        self.records.push(r);
        Ok(())
    }

    fn finish(self) -> Result<Dataset> {
        Ok(Dataset {
            records: self.records,
            d_in: self.d_in.unwrap_or(0),
        })
    }
}

/// Reads and validates a dataset, one JSON object per non-blank line.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut builder = DatasetBuilder::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: lineno,
            message: e.to_string(),
        })?;
        let label = HierLabel::new(parsed.main_class, parsed.subclass, parsed.patent_id).map_err(
            |e| Error::Hierarchy {
                line: lineno,
                message: e.to_string(),
            },
        )?;
        builder.push(
            lineno,
            ImageRecord {
                image_id: parsed.image_id,
                label,
                features: parsed.features,
                text: parsed.text,
            },
        )?;
    }
    builder.finish()
}

/// Patent-level partition of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl SplitSpec {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Serialize(e.to_string()))?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Serialize(format!("{}: {e}", path.display())))
    }

    /// Checks disjointness and that the split covers exactly `ds`'s patents.
    pub fn validate_against(&self, ds: &Dataset) -> Result<()> {
        let mut seen = HashSet::new();
        for p in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(p.as_str()) {
                return Err(Error::InvalidConfig(format!("patent {p} appears in two splits")));
            }
        }
        let patents = ds.patents();
        if seen.len() != patents.len() || patents.keys().any(|p| !seen.contains(p)) {
            return Err(Error::InvalidConfig(
                "split does not cover the dataset's patents".into(),
            ));
        }
        Ok(())
    }
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(Error::InvalidConfig(format!("negative split ratio in {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Shuffles patents with a seeded RNG and partitions them: `floor(r·P)` for
/// train and validation, the remainder to test.
///
/// Test patents are taken from those with at least two images; single-image
/// patents only ever land in train or validation.
pub fn split_by_patent(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<SplitSpec> {
    validate_ratios(ratios)?;
    let patents = ds.patents();
    let total = patents.len();
    let eligible = patents.values().filter(|v| v.len() >= 2).count();
    if eligible < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 patents with 2 or more images, found {eligible}"
        )));
    }

    // tolerance keeps e.g. 0.7225 * 400 from flooring to 288
    let count = |r: f64| ((r * total as f64) + 1e-9).floor() as usize;
    let n_train = count(ratios[0]);
    let n_val = count(ratios[1]).min(total - n_train);
    let n_test = total - n_train - n_val;
    if n_test > eligible {
        return Err(Error::InsufficientData(format!(
            "{n_test} test patents requested but only {eligible} have 2 or more images"
        )));
    }

    let mut order: Vec<(&str, usize)> = patents.iter().map(|(p, v)| (*p, v.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut test = Vec::with_capacity(n_test);
    let mut rest = Vec::with_capacity(total - n_test);
    for &(p, n) in order.iter().rev() {
        if test.len() < n_test && n >= 2 {
            test.push(p.to_string());
        } else {
            rest.push(p.to_string());
        }
    }
    test.reverse();
    rest.reverse();
    let val = rest.split_off(n_train);
    let train = rest;

    if val.is_empty() {
        log::warn!("validation split is empty ({total} patents)");
    }
    Ok(SplitSpec {
        train,
        val,
        test,
        seed,
        ratios,
    })
}

/// Parameters of the nested-Gaussian synthetic taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub main_classes: usize,
    pub subclasses_per_main: usize,
    pub patents_per_subclass: usize,
    pub images_per_patent: usize,
    pub d_in: usize,
    pub spread_main: f64,
    pub spread_sub: f64,
    pub spread_patent: f64,
    pub spread_image: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            main_classes: 8,
            subclasses_per_main: 2,
            patents_per_subclass: 6,
            images_per_patent: 4,
            d_in: 32,
            spread_main: 0.8,
            spread_sub: 0.6,
            spread_patent: 0.4,
            spread_image: 1.6,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("main_classes", self.main_classes),
            ("subclasses_per_main", self.subclasses_per_main),
            ("patents_per_subclass", self.patents_per_subclass),
            ("d_in", self.d_in),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.images_per_patent < 2 {
            return Err(Error::InvalidConfig(format!(
                "images_per_patent must be >= 2, got {}",
                self.images_per_patent
            )));
        }
        if self.main_classes > 99 || self.subclasses_per_main > 99 {
            return Err(Error::InvalidConfig(
                "main_classes and subclasses_per_main must fit two-digit codes (<= 99)".into(),
            ));
        }
        let spreads = [
            self.spread_main,
            self.spread_sub,
            self.spread_patent,
            self.spread_image,
        ];
        if spreads.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig("spreads must be finite and >= 0".into()));
        }
        if self.spread_main + self.spread_sub + self.spread_patent + self.spread_image == 0.0 {
            return Err(Error::InvalidConfig("all spreads are zero".into()));
        }
        Ok(())
    }
}

const OBJECT_NAMES: &[&str] = &[
    "seat", "bed", "table", "lamp", "bottle", "chair", "handle", "vehicle", "shoe", "watch",
    "phone", "cup", "box", "fan", "tool", "toy", "brush", "valve", "hinge", "clip",
];

/// Object name attached to every image of a subclass.
pub fn object_name(subclass: u32) -> String {
    let noun = OBJECT_NAMES[(subclass as usize * 7 + subclass as usize / 100) % OBJECT_NAMES.len()];
    format!("{noun}-{subclass}")
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, sd: f64) -> Vec<f64> {
    (0..d).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn offset(base: &[f64], delta: &[f64]) -> Vec<f64> {
    base.iter().zip(delta).map(|(a, b)| a + b).collect()
}

/// Samples the nested-Gaussian dataset described by `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_in;
    let mut records = Vec::new();
    let mut image_counter = 0usize;
    for m in 1..=spec.main_classes {
        let main_code = m as u32;
        let main_mean = gaussian(&mut rng, d, spec.spread_main);
        for s in 1..=spec.subclasses_per_main {
            let sub_code = main_code * 100 + s as u32;
            let sub_mean = offset(&main_mean, &gaussian(&mut rng, d, spec.spread_sub));
            for p in 1..=spec.patents_per_subclass {
                let patent_id = format!("P{sub_code:04}-{p:03}");
                let patent_mean = offset(&sub_mean, &gaussian(&mut rng, d, spec.spread_patent));
                for _ in 0..spec.images_per_patent {
                    let features = offset(&patent_mean, &gaussian(&mut rng, d, spec.spread_image));
                    records.push(ImageRecord {
                        image_id: format!("img-{image_counter:06}"),
                        label: HierLabel::new(main_code, sub_code, patent_id.clone())?,
                        features,
                        text: Some(object_name(sub_code)),
                    });
                    image_counter += 1;
                }
            }
        }
    }
    Dataset::new(records)
}

/// Caption wrapped around an object name before featurization.
pub fn caption(object: &str) -> String {
    format!("This is a patent image of a {object}.")
}

fn hash_feature(seed: u64, bytes: &[u8]) -> u64 {
    // FNV-1a followed by a splitmix64 finalizer
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Deterministic signed feature-hashing embedding of the captioned text.
///
/// Each whitespace token contributes itself plus its boundary-marked
/// character trigrams; every feature adds ±1 to one of `d` buckets.
pub fn text_features(text: &str, d: usize, seed: u64) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Err(Error::InvalidConfig("empty text".into()));
    }
    if d == 0 {
        return Err(Error::InvalidConfig("text dimension must be >= 1".into()));
    }
    let mut v = vec![0.0; d];
    let mut add = |feature: &[u8]| {
        let h = hash_feature(seed, feature);
        let bucket = (h % d as u64) as usize;
        v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    };
    for token in caption(text).split_whitespace() {
        let token = token.trim_matches(|c: char| c.is_ascii_punctuation() && c != '-');
        if token.is_empty() {
            continue;
        }
        let lower = token.to_lowercase();
        add(lower.as_bytes());
        let marked: Vec<u8> = std::iter::once(b'<')
            .chain(lower.bytes())
            .chain(std::iter::once(b'>'))
            .collect();
        for gram in marked.windows(3) {
            let mut f = Vec::with_capacity(4);
            f.push(b'#');
            f.extend_from_slice(gram);
            add(&f);
        }
    }
    // all features cancelled out: fall back to a single bucket
    if v.iter().all(|x| *x == 0.0) {
        v[(hash_feature(seed, text.as_bytes()) % d as u64) as usize] = 1.0;
    }
    l2_normalize(&v)
}

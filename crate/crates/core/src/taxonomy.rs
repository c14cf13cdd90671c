//! Three-level design taxonomy (main class → subclass → patent) and the
//! pairwise relevance score used to weight positives.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Position of a record in the taxonomy.
///
/// Subclass codes are four-digit integers whose leading two digits are the
/// main class, so `1402` lives under main class `14`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HierLabel {
    main_class: u32,
    subclass: u32,
    patent_id: String,
}

impl HierLabel {
    pub fn new(main_class: u32, subclass: u32, patent_id: impl Into<String>) -> Result<Self> {
        let patent_id = patent_id.into();
        if patent_id.is_empty() {
            return Err(Error::InvalidConfig("empty patent_id".into()));
        }
        if subclass / 100 != main_class {
            return Err(Error::InvalidConfig(format!(
                "subclass {subclass} does not belong to main class {main_class}"
            )));
        }
        Ok(Self {
            main_class,
            subclass,
            patent_id,
        })
    }

    pub fn main_class(&self) -> u32 {
        self.main_class
    }

    pub fn subclass(&self) -> u32 {
        self.subclass
    }

    pub fn patent_id(&self) -> &str {
        &self.patent_id
    }

    /// True when `other` shares this label's node at `level` (or a finer one).
    pub fn matches_at(&self, other: &HierLabel, level: HierLevel) -> bool {
        match level {
            HierLevel::PatentId => self.patent_id == other.patent_id,
            HierLevel::Subclass => self.subclass == other.subclass,
            HierLevel::MainClass => self.main_class == other.main_class,
        }
    }
}

impl fmt::Display for HierLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.main_class, self.subclass, self.patent_id)
    }
}

/// Hierarchy levels, fine to coarse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HierLevel {
    PatentId,
    Subclass,
    MainClass,
}

impl HierLevel {
    pub const ALL: [HierLevel; 3] = [HierLevel::PatentId, HierLevel::Subclass, HierLevel::MainClass];

    pub fn as_str(self) -> &'static str {
        match self {
            HierLevel::PatentId => "patent_id",
            HierLevel::Subclass => "subclass",
            HierLevel::MainClass => "main_class",
        }
    }
}

impl fmt::Display for HierLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Relevance scalars for same-patent, same-subclass and same-main-class pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub s_p: f64,
    pub s_s: f64,
    pub s_m: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            s_p: 1.0,
            s_s: 0.35,
            s_m: 0.2,
        }
    }
}

impl ScoreConfig {
    pub fn new(s_p: f64, s_s: f64, s_m: f64) -> Result<Self> {
        let cfg = Self { s_p, s_s, s_m };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Scores that only reward the same patent; turns the hierarchical loss
    /// into the single-positive one.
    pub fn patent_only() -> Self {
        Self {
            s_p: 1.0,
            s_s: 0.0,
            s_m: 0.0,
        }
    }

    /// Requires `s_p > s_s > s_m > 0`, except that coarser levels may be
    /// switched off with zero (`s_s >= s_m == 0`).
    pub fn validate(&self) -> Result<()> {
        let Self { s_p, s_s, s_m } = *self;
        if ![s_p, s_s, s_m].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite relevance score".into()));
        }
        let ordered = s_p > 0.0 && s_p > s_s && s_s >= 0.0 && s_m >= 0.0;
        let strict_coarse = if s_m > 0.0 { s_s > s_m } else { true };
        if !(ordered && strict_coarse) {
            return Err(Error::InvalidConfig(format!(
                "relevance scores must satisfy s_p > s_s > s_m >= 0, got ({s_p}, {s_s}, {s_m})"
            )));
        }
        Ok(())
    }
}

/// Relevance of candidate `b` for anchor `a`: the score of the finest shared
/// level, or zero.
pub fn relevance(a: &HierLabel, b: &HierLabel, cfg: &ScoreConfig) -> f64 {
    if a.patent_id == b.patent_id {
        cfg.s_p
    } else if a.subclass == b.subclass {
        cfg.s_s
    } else if a.main_class == b.main_class {
        cfg.s_m
    } else {
        0.0
    }
}

/// `K × K` matrix of [`relevance`] between anchors and candidates.
pub fn relevance_matrix(
    anchors: &[HierLabel],
    candidates: &[HierLabel],
    cfg: &ScoreConfig,
) -> Result<DenseMatrix> {
    if anchors.len() != candidates.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} anchors vs {} candidates",
            anchors.len(),
            candidates.len()
        )));
    }
    if anchors.is_empty() {
        return Err(Error::InsufficientData("empty label batch".into()));
    }
    let k = anchors.len();
    let mut h = DenseMatrix::zeros(k, k);
    for (i, a) in anchors.iter().enumerate() {
        for (j, b) in candidates.iter().enumerate() {
            h.set(i, j, relevance(a, b, cfg));
        }
    }
    Ok(h)
}

/// Marks database items relevant to `query` at `level`.
pub fn relevant_mask(query: &HierLabel, database: &[HierLabel], level: HierLevel) -> Vec<bool> {
    database.iter().map(|d| query.matches_at(d, level)).collect()
}

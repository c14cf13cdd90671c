//! Contrastive objectives over a batch of anchor/positive embeddings.
//!
//! Every loss works on temperature-scaled cosine logits
//! `S_ij = cos(z_i, k_j) / tau` and returns its value (mean over anchors)
//! together with exact gradients for every input matrix. Gradients are
//! propagated by hand through the row normalization, so no autodiff is
//! involved.
//!
//! * [`contrastive_loss`]: single positive per anchor (InfoNCE).
//! * [`hier_loss`]: each anchor spreads its target mass over every
//!   candidate in proportion to its taxonomy relevance `h_ij / H_i`.
//! * [`language_term`]: the same weighted objective against frozen text
//!   embeddings, scaled by `lambda`.
//! * [`total_loss`]: hierarchical term plus the language term when active.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_row, normalize_rows, unit_sim_matrix, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Temperature dividing every cosine similarity.
    pub tau: f64,
    /// Weight of the image-text term.
    pub lambda: f64,
    /// Average the anchor→candidate and candidate→anchor directions.
    #[serde(default)]
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.2,
            symmetric: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Embeddings entering the loss: `K` anchors, their `K` positives and
/// optionally `K` text embeddings.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub anchors: DenseMatrix,
    pub positives: DenseMatrix,
    pub text: Option<DenseMatrix>,
}

impl BatchEmbeddings {
    pub fn new(
        anchors: DenseMatrix,
        positives: DenseMatrix,
        text: Option<DenseMatrix>,
    ) -> Result<Self> {
        let batch = Self {
            anchors,
            positives,
            text,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn k(&self) -> usize {
        self.anchors.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.anchors.shape();
        if self.positives.shape() != shape {
            return Err(Error::DimensionMismatch(format!(
                "anchors {:?} vs positives {:?}",
                shape,
                self.positives.shape()
            )));
        }
        if let Some(t) = &self.text {
            if t.shape() != shape {
                return Err(Error::DimensionMismatch(format!(
                    "anchors {:?} vs text {:?}",
                    shape,
                    t.shape()
                )));
            }
        }
        if shape.0 < 2 {
            return Err(Error::InsufficientData(format!(
                "contrastive batch needs K >= 2, got {}",
                shape.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_anchors: DenseMatrix,
    pub grad_positives: DenseMatrix,
    pub grad_text: Option<DenseMatrix>,
}

impl LossOutput {
    fn zeros_like(batch: &BatchEmbeddings) -> Self {
        let (k, d) = batch.anchors.shape();
        Self {
            value: 0.0,
            grad_anchors: DenseMatrix::zeros(k, d),
            grad_positives: DenseMatrix::zeros(k, d),
            grad_text: batch.text.as_ref().map(|_| DenseMatrix::zeros(k, d)),
        }
    }

    /// Element-wise sum of two outputs over the same batch.
    pub fn accumulate(&mut self, other: &LossOutput) -> Result<()> {
        self.value += other.value;
        self.grad_anchors.add_scaled(&other.grad_anchors, 1.0)?;
        self.grad_positives.add_scaled(&other.grad_positives, 1.0)?;
        match (&mut self.grad_text, &other.grad_text) {
            (Some(a), Some(b)) => a.add_scaled(b, 1.0)?,
            (None, Some(b)) => self.grad_text = Some(b.clone()),
            _ => {}
        }
        Ok(())
    }
}

/// Loss over raw logits, summed over rows, with its gradient.
#[derive(Debug, Clone)]
pub struct LogitLoss {
    pub per_row: Vec<f64>,
    pub grad: DenseMatrix,
}

impl LogitLoss {
    pub fn total(&self) -> f64 {
        self.per_row.iter().sum()
    }
}

/// `h_ij / H_i` with `H_i = Σ_j h_ij`. Rejects negative entries and rows
/// whose sum is not positive.
pub fn row_weights(h: &DenseMatrix) -> Result<DenseMatrix> {
    let mut w = h.clone();
    for i in 0..h.rows() {
        let row = h.row(i);
        if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidRelevance(format!("row {i} has a negative or non-finite score")));
        }
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidRelevance(format!("row {i} has no positive")));
        }
        w.row_mut(i).iter_mut().for_each(|v| *v /= total);
    }
    Ok(w)
}

/// `Σ_i −log softmax(S_i)[i]` and its logit gradient `p_il − δ_il`.
pub fn single_positive_logit_loss(logits: &DenseMatrix) -> Result<LogitLoss> {
    let (k, n) = logits.shape();
    if k > n {
        return Err(Error::DimensionMismatch(format!(
            "{k} anchors but only {n} candidates"
        )));
    }
    let mut per_row = Vec::with_capacity(k);
    let mut grad = DenseMatrix::zeros(k, n);
    for i in 0..k {
        let logp = log_softmax_row(logits.row(i))?;
        per_row.push(-logp[i]);
        let g = grad.row_mut(i);
        for (l, lp) in logp.iter().enumerate() {
            g[l] = lp.exp();
        }
        g[i] -= 1.0;
    }
    Ok(LogitLoss { per_row, grad })
}

/// `Σ_i Σ_j −w_ij log softmax(S_i)[j]` for row-normalized weights `w`.
///
/// The gradient is `∂/∂S_il = p_il Σ_j w_ij − w_il`.
pub fn weighted_logit_loss(logits: &DenseMatrix, weights: &DenseMatrix) -> Result<LogitLoss> {
    if logits.shape() != weights.shape() {
        return Err(Error::DimensionMismatch(format!(
            "logits {:?} vs weights {:?}",
            logits.shape(),
            weights.shape()
        )));
    }
    let (k, n) = logits.shape();
    let mut per_row = Vec::with_capacity(k);
    let mut grad = DenseMatrix::zeros(k, n);
    for i in 0..k {
        let logp = log_softmax_row(logits.row(i))?;
        let w = weights.row(i);
        let mut loss = 0.0;
        let mut mass = 0.0;
        for (wj, lp) in w.iter().zip(&logp) {
            loss += -wj * lp;
            mass += wj;
        }
        per_row.push(loss);
        let g = grad.row_mut(i);
        for l in 0..n {
            g[l] = logp[l].exp() * mass - w[l];
        }
    }
    Ok(LogitLoss { per_row, grad })
}

enum Target<'a> {
    Single,
    Weighted(&'a DenseMatrix),
}

/// Value and gradients of one direction: queries scored against keys.
struct Directional {
    value: f64,
    grad_queries: DenseMatrix,
    grad_keys: DenseMatrix,
}

fn directional(
    queries: &DenseMatrix,
    keys: &DenseMatrix,
    target: Target<'_>,
    tau: f64,
    scale: f64,
) -> Result<Directional> {
    let (uq, nq) = normalize_rows(queries)?;
    let (uk, nk) = normalize_rows(keys)?;
    let cos = unit_sim_matrix(&uq, &uk);
    let mut logits = cos.clone();
    logits.scale(1.0 / tau);

    let ll = match target {
        Target::Single => single_positive_logit_loss(&logits)?,
        Target::Weighted(w) => weighted_logit_loss(&logits, w)?,
    };
    let k = queries.rows() as f64;
    let value = scale * ll.total() / k;

    // dL/dcos = scale / (K tau) * dL/dS
    let mut g_cos = ll.grad;
    g_cos.scale(scale / (k * tau));

    let d = queries.cols();
    let mut grad_queries = DenseMatrix::zeros(queries.rows(), d);
    let mut grad_keys = DenseMatrix::zeros(keys.rows(), d);
    for i in 0..uq.rows() {
        let ui = uq.row(i);
        for j in 0..uk.rows() {
            let g = g_cos.get(i, j);
            if g == 0.0 {
                continue;
            }
            let c = cos.get(i, j);
            let kj = uk.row(j);
            let gq = grad_queries.row_mut(i);
            for t in 0..d {
                gq[t] += g * (kj[t] - c * ui[t]);
            }
            let gk = grad_keys.row_mut(j);
            for t in 0..d {
                gk[t] += g * (ui[t] - c * kj[t]);
            }
        }
    }
    for (i, n) in nq.iter().enumerate() {
        grad_queries.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    for (j, n) in nk.iter().enumerate() {
        grad_keys.row_mut(j).iter_mut().for_each(|v| *v /= n);
    }

    Ok(Directional {
        value,
        grad_queries,
        grad_keys,
    })
}

fn check_relevance(h: &DenseMatrix, k: usize) -> Result<()> {
    if h.shape() != (k, k) {
        return Err(Error::DimensionMismatch(format!(
            "relevance matrix {:?} for batch of {k}",
            h.shape()
        )));
    }
    Ok(())
}

/// Runs a (possibly symmetric) objective between `anchors` and `keys`,
/// returning the value and the anchor and key gradients.
fn run_pair(
    anchors: &DenseMatrix,
    keys: &DenseMatrix,
    h: Option<&DenseMatrix>,
    cfg: &LossConfig,
    scale: f64,
) -> Result<(f64, DenseMatrix, DenseMatrix)> {
    let forward_w = h.map(row_weights).transpose()?;
    fn target(w: &Option<DenseMatrix>) -> Target<'_> {
        match w {
            Some(w) => Target::Weighted(w),
            None => Target::Single,
        }
    }
    if !cfg.symmetric {
        let out = directional(anchors, keys, target(&forward_w), cfg.tau, scale)?;
        return Ok((out.value, out.grad_queries, out.grad_keys));
    }
    let backward_w = h.map(|h| row_weights(&h.transpose())).transpose()?;
    let fwd = directional(anchors, keys, target(&forward_w), cfg.tau, 0.5 * scale)?;
    let bwd = directional(keys, anchors, target(&backward_w), cfg.tau, 0.5 * scale)?;
    let mut ga = fwd.grad_queries;
    ga.add_scaled(&bwd.grad_keys, 1.0)?;
    let mut gk = fwd.grad_keys;
    gk.add_scaled(&bwd.grad_queries, 1.0)?;
    Ok((fwd.value + bwd.value, ga, gk))
}

/// Single-positive contrastive loss over the anchor/positive pairs.
pub fn contrastive_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<LossOutput> {
    batch.validate()?;
    cfg.validate()?;
    let (value, ga, gp) = run_pair(&batch.anchors, &batch.positives, None, cfg, 1.0)?;
    Ok(LossOutput {
        value,
        grad_anchors: ga,
        grad_positives: gp,
        grad_text: None,
    })
}

/// Hierarchical multi-positive contrastive loss with relevance matrix `h`.
pub fn hier_loss(batch: &BatchEmbeddings, h: &DenseMatrix, cfg: &LossConfig) -> Result<LossOutput> {
    batch.validate()?;
    cfg.validate()?;
    check_relevance(h, batch.k())?;
    let (value, ga, gp) = run_pair(&batch.anchors, &batch.positives, Some(h), cfg, 1.0)?;
    Ok(LossOutput {
        value,
        grad_anchors: ga,
        grad_positives: gp,
        grad_text: None,
    })
}

/// Image-text term weighted by `cfg.lambda`. A zero `lambda` yields a zero
/// value and zero gradients.
pub fn language_term(batch: &BatchEmbeddings, h: &DenseMatrix, cfg: &LossConfig) -> Result<LossOutput> {
    batch.validate()?;
    cfg.validate()?;
    check_relevance(h, batch.k())?;
    let text = batch
        .text
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("language term requires text embeddings".into()))?;
    let mut out = LossOutput::zeros_like(batch);
    if cfg.lambda == 0.0 {
        return Ok(out);
    }
    let (value, ga, gt) = run_pair(&batch.anchors, text, Some(h), cfg, cfg.lambda)?;
    out.value = value;
    out.grad_anchors = ga;
    out.grad_text = Some(gt);
    Ok(out)
}

/// [`hier_loss`] plus [`language_term`] when text is present and `lambda > 0`.
pub fn total_loss(batch: &BatchEmbeddings, h: &DenseMatrix, cfg: &LossConfig) -> Result<LossOutput> {
    let mut out = hier_loss(batch, h, cfg)?;
    if batch.text.is_some() {
        out.grad_text = Some(DenseMatrix::zeros(batch.k(), batch.anchors.cols()));
        if cfg.lambda > 0.0 {
            out.accumulate(&language_term(batch, h, cfg)?)?;
        }
    }
    Ok(out)
}

/// Which image-image objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Single positive per anchor.
    Cl,
    /// Taxonomy-weighted multi-positive.
    Hmcl,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Cl => "CL",
            LossMode::Hmcl => "HMCL",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cl" => Ok(LossMode::Cl),
            "hmcl" => Ok(LossMode::Hmcl),
            other => Err(Error::InvalidConfig(format!("unknown loss mode {other:?}"))),
        }
    }
}

/// Training objective for `mode`. In CL mode the relevance matrix is
/// ignored and the language term, if active, uses same-pair targets only.
pub fn objective(
    batch: &BatchEmbeddings,
    mode: LossMode,
    h: &DenseMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    match mode {
        LossMode::Hmcl => total_loss(batch, h, cfg),
        LossMode::Cl => {
            let mut out = contrastive_loss(batch, cfg)?;
            if batch.text.is_some() {
                out.grad_text = Some(DenseMatrix::zeros(batch.k(), batch.anchors.cols()));
                if cfg.lambda > 0.0 {
                    let eye = DenseMatrix::identity(batch.k());
                    out.accumulate(&language_term(batch, &eye, cfg)?)?;
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use crate::numerics::cosine_sim;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        let v = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        DenseMatrix::from_vec(rows, cols, v).unwrap()
    }

    fn cfg(tau: f64, lambda: f64) -> LossConfig {
        LossConfig {
            tau,
            lambda,
            symmetric: false,
        }
    }

    /// Direct evaluation of the weighted objective with nested loops, using
    /// plain `exp`/`ln` instead of the shared log-softmax kernel.
    fn naive_weighted(q: &DenseMatrix, k: &DenseMatrix, h: &DenseMatrix, tau: f64) -> f64 {
        let n = q.rows();
        let mut total = 0.0;
        for i in 0..n {
            let hi: f64 = (0..n).map(|j| h.get(i, j)).sum();
            let denom: f64 = (0..n)
                .map(|l| (cosine_sim(q.row(i), k.row(l)).unwrap() / tau).exp())
                .sum();
            for j in 0..n {
                let num = (cosine_sim(q.row(i), k.row(j)).unwrap() / tau).exp();
                total += -(h.get(i, j) / hi) * (num / denom).ln();
            }
        }
        total / n as f64
    }

    fn naive_single(q: &DenseMatrix, k: &DenseMatrix, tau: f64) -> f64 {
        let n = q.rows();
        let mut total = 0.0;
        for i in 0..n {
            let denom: f64 = (0..n)
                .map(|l| (cosine_sim(q.row(i), k.row(l)).unwrap() / tau).exp())
                .sum();
            let num = (cosine_sim(q.row(i), k.row(i)).unwrap() / tau).exp();
            total += -(num / denom).ln();
        }
        total / n as f64
    }

    fn three_level_h(k: usize) -> DenseMatrix {
        // patents i; subclass i/2; main class i/4
        let mut h = DenseMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let v = if i == j {
                    1.0
                } else if i / 2 == j / 2 {
                    0.35
                } else if i / 4 == j / 4 {
                    0.2
                } else {
                    0.0
                };
                h.set(i, j, v);
            }
        }
        h
    }

    #[test]
    fn contrastive_uniform_similarities_give_ln2() {
        let a = DenseMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let batch = BatchEmbeddings::new(a.clone(), a, None).unwrap();
        let out = contrastive_loss(&batch, &cfg(0.1, 0.0)).unwrap();
        assert_abs_diff_eq!(out.value, std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(out.grad_text.is_none());
    }

    #[test]
    fn contrastive_orthonormal_closed_form() {
        let e = DenseMatrix::identity(2);
        let batch = BatchEmbeddings::new(e.clone(), e, None).unwrap();
        let out = contrastive_loss(&batch, &cfg(0.1, 0.0)).unwrap();
        let expected = -((10f64).exp() / ((10f64).exp() + 1.0)).ln();
        assert_abs_diff_eq!(out.value, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(out.value, 4.539889921682063e-05, epsilon = 1e-15);
    }

    #[test]
    fn contrastive_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 4, 8);
        let p = random_matrix(&mut rng, 4, 8);
        let expected = naive_single(&a, &p, 0.1);
        let batch = BatchEmbeddings::new(a, p, None).unwrap();
        let out = contrastive_loss(&batch, &cfg(0.1, 0.0)).unwrap();
        assert_abs_diff_eq!(out.value, expected, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_rejects_single_pair() {
        let a = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(BatchEmbeddings::new(a.clone(), a, None).is_err());
    }

    #[test]
    fn hier_reduces_to_contrastive_with_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = BatchEmbeddings::new(
            random_matrix(&mut rng, 6, 5),
            random_matrix(&mut rng, 6, 5),
            None,
        )
        .unwrap();
        let c = cfg(0.1, 0.2);
        let a = contrastive_loss(&batch, &c).unwrap();
        let b = hier_loss(&batch, &DenseMatrix::identity(6), &c).unwrap();
        assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-12);
        assert_eq!(a.grad_anchors.values(), b.grad_anchors.values());
    }

    #[test]
    fn hier_uniform_weights_and_similarities_give_ln2() {
        let a = DenseMatrix::from_rows(&[[0.0, 2.0], [0.0, 1.0]]).unwrap();
        let batch = BatchEmbeddings::new(a.clone(), a, None).unwrap();
        let h = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let out = hier_loss(&batch, &h, &cfg(0.1, 0.0)).unwrap();
        assert_abs_diff_eq!(out.value, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn hier_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 4, 8);
        let p = random_matrix(&mut rng, 4, 8);
        let h = three_level_h(4);
        let expected = naive_weighted(&a, &p, &h, 0.1);
        let out = hier_loss(&BatchEmbeddings::new(a, p, None).unwrap(), &h, &cfg(0.1, 0.0)).unwrap();
        assert_abs_diff_eq!(out.value, expected, epsilon = 1e-12);
    }

    #[test]
    fn hier_rejects_zero_row() {
        let e = DenseMatrix::identity(2);
        let batch = BatchEmbeddings::new(e.clone(), e, None).unwrap();
        let h = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            hier_loss(&batch, &h, &cfg(0.1, 0.0)),
            Err(Error::InvalidRelevance(_))
        ));
    }

    #[test]
    fn language_term_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 4, 6);
        let p = random_matrix(&mut rng, 4, 6);
        let t = random_matrix(&mut rng, 4, 6);
        let h = three_level_h(4);

        let batch = BatchEmbeddings::new(a.clone(), p.clone(), Some(t.clone())).unwrap();
        let off = language_term(&batch, &h, &cfg(0.1, 0.0)).unwrap();
        assert_eq!(off.value, 0.0);
        assert_eq!(off.grad_anchors.max_abs(), 0.0);
        assert_eq!(off.grad_text.as_ref().unwrap().max_abs(), 0.0);

        let same = BatchEmbeddings::new(a.clone(), p.clone(), Some(p.clone())).unwrap();
        let lt = language_term(&same, &h, &cfg(0.1, 1.0)).unwrap();
        let hl = hier_loss(&same, &h, &cfg(0.1, 1.0)).unwrap();
        assert_abs_diff_eq!(lt.value, hl.value, epsilon = 1e-12);

        let lt = language_term(&batch, &h, &cfg(0.1, 0.2)).unwrap();
        assert_abs_diff_eq!(lt.value, 0.2 * naive_weighted(&a, &t, &h, 0.1), epsilon = 1e-12);

        let no_text = BatchEmbeddings::new(a, p, None).unwrap();
        assert!(language_term(&no_text, &h, &cfg(0.1, 0.2)).is_err());
    }

    #[test]
    fn total_loss_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 4, 6);
        let p = random_matrix(&mut rng, 4, 6);
        let t = random_matrix(&mut rng, 4, 6);
        let h = three_level_h(4);
        let c = cfg(0.1, 0.2);

        let plain = BatchEmbeddings::new(a.clone(), p.clone(), None).unwrap();
        let tl = total_loss(&plain, &h, &c).unwrap();
        let hl = hier_loss(&plain, &h, &c).unwrap();
        assert_eq!(tl.value, hl.value);
        assert_eq!(tl.grad_anchors, hl.grad_anchors);

        let eye = DenseMatrix::identity(4);
        let cl = contrastive_loss(&plain, &c).unwrap();
        assert_abs_diff_eq!(total_loss(&plain, &eye, &c).unwrap().value, cl.value, epsilon = 1e-12);

        let with_text = BatchEmbeddings::new(a.clone(), p.clone(), Some(t.clone())).unwrap();
        let expected = naive_weighted(&a, &p, &h, 0.1) + 0.2 * naive_weighted(&a, &t, &h, 0.1);
        assert_abs_diff_eq!(total_loss(&with_text, &h, &c).unwrap().value, expected, epsilon = 1e-12);
    }

    #[test]
    fn cl_objective_equals_patent_only_hmcl_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 5, 4);
        let p = random_matrix(&mut rng, 5, 4);
        let t = random_matrix(&mut rng, 5, 4);
        let batch = BatchEmbeddings::new(a, p, Some(t)).unwrap();
        let h = DenseMatrix::identity(5);
        let c = cfg(0.1, 0.2);
        let cl = objective(&batch, LossMode::Cl, &h, &c).unwrap();
        let hm = objective(&batch, LossMode::Hmcl, &h, &c).unwrap();
        assert_eq!(cl.value.to_bits(), hm.value.to_bits());
        assert_eq!(cl.grad_anchors, hm.grad_anchors);
        assert_eq!(cl.grad_positives, hm.grad_positives);
        assert_eq!(cl.grad_text, hm.grad_text);
    }

    #[test]
    fn symmetric_mode_averages_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 4, 3);
        let p = random_matrix(&mut rng, 4, 3);
        let mut h = three_level_h(4);
        h.set(0, 3, 0.1); // make it asymmetric
        let sym = LossConfig {
            tau: 0.2,
            lambda: 0.0,
            symmetric: true,
        };
        let out = hier_loss(&BatchEmbeddings::new(a.clone(), p.clone(), None).unwrap(), &h, &sym).unwrap();
        let expected = 0.5 * (naive_weighted(&a, &p, &h, 0.2) + naive_weighted(&p, &a, &h.transpose(), 0.2));
        assert_abs_diff_eq!(out.value, expected, epsilon = 1e-12);
    }

    #[test]
    fn weighted_logit_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_matrix(&mut rng, 5, 5);
        let h = three_level_h(5);
        let w = row_weights(&h).unwrap();
        for i in 0..5 {
            let sum: f64 = w.row(i).iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
        let ll = weighted_logit_loss(&s, &w).unwrap();
        for i in 0..5 {
            let max = s.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.row(i).iter().map(|v| (v - max).exp()).sum();
            for l in 0..5 {
                let p = (s.get(i, l) - max).exp() / z;
                assert_abs_diff_eq!(ll.grad.get(i, l), p - w.get(i, l), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn temperature_preserves_probability_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let order = |tau: f64| {
            let scaled: Vec<f64> = logits.iter().map(|v| v / tau).collect();
            let lp = log_softmax_row(&scaled).unwrap();
            let mut idx: Vec<usize> = (0..lp.len()).collect();
            idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]));
            idx
        };
        assert_eq!(order(1.0), order(0.1));
        assert_eq!(order(1.0), order(3.0));
    }

    #[test]
    fn losses_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let k = rng.random_range(2..8);
            let batch = BatchEmbeddings::new(
                random_matrix(&mut rng, k, 3),
                random_matrix(&mut rng, k, 3),
                Some(random_matrix(&mut rng, k, 3)),
            )
            .unwrap();
            let h = three_level_h(k);
            assert!(total_loss(&batch, &h, &cfg(0.1, 0.2)).unwrap().value >= 0.0);
            assert!(contrastive_loss(&batch, &cfg(0.1, 0.2)).unwrap().value >= 0.0);
        }
    }
}

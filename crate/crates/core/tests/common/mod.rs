//! Helpers shared by the integration tests: random inputs, naive oracles and
//! finite differences.
#![allow(dead_code, clippy::needless_range_loop)]

use hiercl::loss::BatchEmbeddings;
use hiercl::numerics::DenseMatrix;
use hiercl::taxonomy::{HierLabel, ScoreConfig};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseMatrix {
    let values = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    DenseMatrix::from_vec(rows, cols, values).unwrap()
}

pub fn random_batch<R: Rng>(rng: &mut R, k: usize, d: usize, text: bool) -> BatchEmbeddings {
    let anchors = gaussian_matrix(rng, k, d);
    let positives = gaussian_matrix(rng, k, d);
    let text = text.then(|| gaussian_matrix(rng, k, d));
    BatchEmbeddings::new(anchors, positives, text).unwrap()
}

/// Labels drawn from a 2 main x 2 sub x 3 patent tree, so batches contain
/// every kind of relationship.
pub fn random_labels<R: Rng>(rng: &mut R, k: usize) -> Vec<HierLabel> {
    (0..k)
        .map(|_| {
            let main = rng.random_range(1..=2u32);
            let sub = main * 100 + rng.random_range(1..=2u32);
            let patent = format!("P{sub}-{}", rng.random_range(0..3u32));
            HierLabel::new(main, sub, patent).unwrap()
        })
        .collect()
}

/// Relevance matrix where row `i` is anchor `i` and the diagonal is always
/// a same-patent pair, as in training batches.
pub fn batch_relevance(labels: &[HierLabel], scores: &ScoreConfig) -> DenseMatrix {
    hiercl::taxonomy::relevance_matrix(labels, labels, scores).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Mean over anchors of `-sum_j w_ij log softmax(sim_i / tau)_j`, computed
/// with plain loops.
pub fn naive_weighted(a: &DenseMatrix, b: &DenseMatrix, h: &DenseMatrix, tau: f64) -> f64 {
    let k = a.rows();
    let mut total = 0.0;
    for i in 0..k {
        let logits: Vec<f64> = (0..k).map(|j| cos(a.row(i), b.row(j)) / tau).collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        let hi: f64 = (0..k).map(|j| h.get(i, j)).sum();
        for j in 0..k {
            total -= h.get(i, j) / hi * (logits[j] - lse);
        }
    }
    total / k as f64
}

/// Hierarchical loss plus `lambda` times the language term.
pub fn naive_total(batch: &BatchEmbeddings, h: &DenseMatrix, tau: f64, lambda: f64) -> f64 {
    let mut v = naive_weighted(&batch.anchors, &batch.positives, h, tau);
    if let Some(t) = &batch.text {
        v += lambda * naive_weighted(&batch.anchors, t, h, tau);
    }
    v
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &DenseMatrix, step: f64, mut f: impl FnMut(&DenseMatrix) -> f64) -> DenseMatrix {
    let mut g = DenseMatrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.values().len() {
        let orig = probe.values()[idx];
        probe.values_mut()[idx] = orig + step;
        let up = f(&probe);
        probe.values_mut()[idx] = orig - step;
        let down = f(&probe);
        probe.values_mut()[idx] = orig;
        g.values_mut()[idx] = (up - down) / (2.0 * step);
    }
    g
}

/// Largest elementwise relative error, with a floor on the denominator so
/// near-zero entries are compared absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Brute-force retrieval metrics. Positions come from pairwise comparison
/// counts rather than a sort.
pub struct Oracle {
    pub positions: Vec<usize>,
}

impl Oracle {
    pub fn new(scores: &[f64]) -> Self {
        let n = scores.len();
        let mut positions = vec![0; n];
        for i in 0..n {
            let mut beaten_by = 0;
            for j in 0..n {
                if scores[j] > scores[i] || (scores[j] == scores[i] && j < i) {
                    beaten_by += 1;
                }
            }
            positions[i] = beaten_by;
        }
        Self { positions }
    }

    /// Relevance flags by rank position.
    fn by_rank(&self, relevant: &[bool]) -> Vec<bool> {
        let mut out = vec![false; relevant.len()];
        for (i, &p) in self.positions.iter().enumerate() {
            out[p] = relevant[i];
        }
        out
    }

    pub fn ap(&self, relevant: &[bool]) -> f64 {
        let flags = self.by_rank(relevant);
        let total = flags.iter().filter(|f| **f).count();
        let mut sum = 0.0;
        for p in 0..flags.len() {
            if flags[p] {
                let hits_so_far = flags[..=p].iter().filter(|f| **f).count();
                sum += hits_so_far as f64 / (p + 1) as f64;
            }
        }
        sum / total as f64
    }

    pub fn ndcg(&self, relevant: &[bool]) -> f64 {
        let flags = self.by_rank(relevant);
        let total = flags.iter().filter(|f| **f).count();
        let mut dcg = 0.0;
        for p in 0..flags.len() {
            if flags[p] {
                dcg += 1.0 / ((p + 2) as f64).log2();
            }
        }
        let mut idcg = 0.0;
        for p in 0..total {
            idcg += 1.0 / ((p + 2) as f64).log2();
        }
        dcg / idcg
    }

    pub fn mrr(&self, relevant: &[bool], k: usize) -> f64 {
        let flags = self.by_rank(relevant);
        for p in 0..k.min(flags.len()) {
            if flags[p] {
                return 1.0 / (p + 1) as f64;
            }
        }
        0.0
    }

    pub fn acc(&self, relevant: &[bool], k: usize) -> f64 {
        let flags = self.by_rank(relevant);
        if flags[..k.min(flags.len())].iter().any(|f| *f) {
            1.0
        } else {
            0.0
        }
    }
}

/// One random end-to-end configuration: encoder, inputs, labels and loss
/// settings.
pub struct EndToEnd {
    pub params: hiercl::encoder::EncoderParams,
    pub xa: DenseMatrix,
    pub xp: DenseMatrix,
    pub text: Option<DenseMatrix>,
    pub h: DenseMatrix,
    pub mode: hiercl::loss::LossMode,
    pub cfg: hiercl::loss::LossConfig,
}

impl EndToEnd {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        use hiercl::encoder::{EncoderParams, Layer};
        let k = rng.random_range(2..=6);
        let d_in = rng.random_range(2..=5);
        let d_out = rng.random_range(2..=4);
        let layers = if rng.random_bool(0.5) {
            vec![Layer::random(d_in, d_out, rng)]
        } else {
            let hidden = rng.random_range(2..=5);
            vec![Layer::random(d_in, hidden, rng), Layer::random(hidden, d_out, rng)]
        };
        let mut params = EncoderParams::new(layers).unwrap();
        // nonzero biases so their gradients are exercised away from the origin
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let labels = random_labels(rng, k);
        let scores = ScoreConfig::default();
        let mode = if rng.random_bool(0.25) {
            hiercl::loss::LossMode::Cl
        } else {
            hiercl::loss::LossMode::Hmcl
        };
        let h = match mode {
            hiercl::loss::LossMode::Hmcl => batch_relevance(&labels, &scores),
            hiercl::loss::LossMode::Cl => DenseMatrix::identity(k),
        };
        Self {
            params,
            xa: gaussian_matrix(rng, k, d_in),
            xp: gaussian_matrix(rng, k, d_in),
            text: rng.random_bool(0.5).then(|| gaussian_matrix(rng, k, d_out)),
            h,
            mode,
            cfg: hiercl::loss::LossConfig {
                tau: rng.random_range(0.2..1.0),
                lambda: rng.random_range(0.1..1.0),
                symmetric: rng.random_bool(0.3),
            },
        }
    }

    fn loss_at(&self, params: &hiercl::encoder::EncoderParams) -> hiercl::loss::LossOutput {
        use hiercl::encoder::forward;
        let batch = BatchEmbeddings::new(
            forward(params, &self.xa).unwrap(),
            forward(params, &self.xp).unwrap(),
            self.text.clone(),
        )
        .unwrap();
        hiercl::loss::objective(&batch, self.mode, &self.h, &self.cfg).unwrap()
    }

    /// Largest relative error between the backpropagated parameter gradient
    /// and central differences with the given step.
    pub fn param_grad_error(&self, step: f64) -> f64 {
        use hiercl::encoder::backward;
        let out = self.loss_at(&self.params);
        let mut analytic = backward(&self.params, &self.xa, &out.grad_anchors).unwrap().params;
        let gp = backward(&self.params, &self.xp, &out.grad_positives).unwrap().params;
        for (a, g) in analytic.tensors_mut().into_iter().zip(gp.tensors()) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
        let analytic: Vec<f64> = analytic.tensors().concat();

        let mut probe = self.params.clone();
        let mut numeric = Vec::with_capacity(analytic.len());
        let n_tensors = probe.tensors().len();
        for t in 0..n_tensors {
            let len = probe.tensors()[t].len();
            for i in 0..len {
                let orig = probe.tensors()[t][i];
                probe.tensors_mut()[t][i] = orig + step;
                let up = self.loss_at(&probe).value;
                probe.tensors_mut()[t][i] = orig - step;
                let down = self.loss_at(&probe).value;
                probe.tensors_mut()[t][i] = orig;
                numeric.push((up - down) / (2.0 * step));
            }
        }
        max_rel_err(&analytic, &numeric)
    }

    /// Largest relative error of the loss gradients with respect to the
    /// embedding matrices (anchors, positives, and text when present).
    pub fn embedding_grad_error(&self, step: f64) -> f64 {
        use hiercl::encoder::forward;
        let za = forward(&self.params, &self.xa).unwrap();
        let zp = forward(&self.params, &self.xp).unwrap();
        let eval = |a: &DenseMatrix, p: &DenseMatrix, t: &Option<DenseMatrix>| {
            let batch = BatchEmbeddings::new(a.clone(), p.clone(), t.clone()).unwrap();
            hiercl::loss::objective(&batch, self.mode, &self.h, &self.cfg).unwrap()
        };
        let out = eval(&za, &zp, &self.text);
        let mut worst = max_rel_err(
            out.grad_anchors.values(),
            numeric_grad(&za, step, |m| eval(m, &zp, &self.text).value).values(),
        );
        worst = worst.max(max_rel_err(
            out.grad_positives.values(),
            numeric_grad(&zp, step, |m| eval(&za, m, &self.text).value).values(),
        ));
        if let Some(t) = &self.text {
            let gt = out.grad_text.as_ref().expect("text gradient present");
            worst = worst.max(max_rel_err(
                gt.values(),
                numeric_grad(t, step, |m| eval(&za, &zp, &Some(m.clone())).value).values(),
            ));
        }
        worst
    }
}

/// Random scores with deliberate ties and a relevance mask with at least
/// one relevant item.
pub fn random_instance<R: Rng>(rng: &mut R) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(1..=20);
    let levels = rng.random_range(1..=6);
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    let mut relevant: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    let forced = rng.random_range(0..n);
    relevant[forced] = true;
    (scores, relevant)
}

/// Checks that per-query Acc@K and MRR@K never decrease from the patent to
/// the subclass to the main-class level, and that relevant-set sizes nest.
/// Returns the number of (query, level pair) comparisons made.
pub fn check_nesting(per_query: &[hiercl::retrieval::QueryMetrics]) -> Result<usize, String> {
    let mut checks = 0;
    for q in per_query {
        for w in 0..2 {
            let (Some(fine), Some(coarse)) = (&q.levels[w], &q.levels[w + 1]) else {
                if q.levels[w].is_some() && q.levels[w + 1].is_none() {
                    return Err(format!("{}: coarse level has no relevant items", q.image_id));
                }
                continue;
            };
            if fine.relevant > coarse.relevant {
                return Err(format!("{}: relevant sets do not nest", q.image_id));
            }
            for (i, (f, c)) in fine.acc.iter().zip(&coarse.acc).enumerate() {
                if f > c {
                    return Err(format!("{}: Acc at cutoff #{i} decreases", q.image_id));
                }
            }
            for (i, (f, c)) in fine.mrr.iter().zip(&coarse.mrr).enumerate() {
                if f > c {
                    return Err(format!("{}: MRR at cutoff #{i} decreases", q.image_id));
                }
            }
            checks += 1;
        }
    }
    Ok(checks)
}

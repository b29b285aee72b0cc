//! Alignment objectives: the cross-scale alignment loss over batch score
//! matrices, the cross-modal projection matching and classification losses
//! on global features, their weighted combination, and exact gradients via
//! the reverse-mode tape in [`tape`].
//!
//! Losses exist twice on purpose: a plain scalar path used for evaluation
//! and finite-difference probing, and a tape path used for training. The
//! gradient check drives the plain path numerically and compares it against
//! the tape adjoints, so the two implementations cross-validate each other.

pub mod adam;
pub mod tape;

use crate::attention::{
    batch_similarity, NormAxis, ProjectionParams, Temperatures,
};
use crate::error::{Error, Result};
use crate::feature::FeatureSet;
use crate::mat::Mat;
use tape::{NodeId, Tape};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Binary match matrix of a batch plus its row- and column-normalized
/// target distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchLabels {
    y: Mat,
    q_rows: Mat,
    q_cols: Mat,
}

impl MatchLabels {
    /// Builds labels from per-item person ids of matched image/caption
    /// pairs: `y[i][j] = 1` when image `i` and caption `j` share a person.
    pub fn from_matched_ids(image_persons: &[u32], text_persons: &[u32]) -> Result<Self> {
        if image_persons.is_empty() || image_persons.len() != text_persons.len() {
            return Err(Error::InvalidBatch(format!(
                "{} image ids vs {} caption ids",
                image_persons.len(),
                text_persons.len()
            )));
        }
        let b = image_persons.len();
        let mut y = Mat::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                if image_persons[i] == text_persons[j] {
                    y.set(i, j, 1.0);
                }
            }
        }
        Self::from_match_matrix(y)
    }

    pub fn from_match_matrix(y: Mat) -> Result<Self> {
        let b = y.rows();
        if b == 0 || y.cols() != b {
            return Err(Error::InvalidBatch("match matrix must be square and non-empty".into()));
        }
        for v in y.data() {
            if *v != 0.0 && *v != 1.0 {
                return Err(Error::InvalidLabel("match matrix entries must be 0 or 1".into()));
            }
        }
        let mut q_rows = Mat::zeros(b, b);
        let mut q_cols = Mat::zeros(b, b);
        for i in 0..b {
            let row_sum: f64 = y.row(i).iter().sum();
            if row_sum == 0.0 {
                return Err(Error::InvalidBatch(format!(
                    "image {i} has no matching caption in batch"
                )));
            }
            for j in 0..b {
                q_rows.set(i, j, y.get(i, j) / row_sum);
            }
        }
        for j in 0..b {
            let col_sum: f64 = (0..b).map(|i| y.get(i, j)).sum();
            if col_sum == 0.0 {
                return Err(Error::InvalidBatch(format!(
                    "caption {j} has no matching image in batch"
                )));
            }
            for i in 0..b {
                q_cols.set(i, j, y.get(i, j) / col_sum);
            }
        }
        Ok(Self { y, q_rows, q_cols })
    }

    pub fn batch_size(&self) -> usize {
        self.y.rows()
    }

    pub fn matches(&self) -> &Mat {
        &self.y
    }

    pub fn q_rows(&self) -> &Mat {
        &self.q_rows
    }

    pub fn q_cols(&self) -> &Mat {
        &self.q_cols
    }
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_cmpm: f64,
    pub w_cmpc: f64,
    pub w_csal: f64,
}

impl LossWeights {
    pub fn new(w_cmpm: f64, w_cmpc: f64, w_csal: f64) -> Result<Self> {
        for (name, w) in [("w_cmpm", w_cmpm), ("w_cmpc", w_cmpc), ("w_csal", w_csal)] {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::InvalidHyperparameter(format!(
                    "{name} must be non-negative, got {w}"
                )));
            }
        }
        Ok(Self { w_cmpm, w_cmpc, w_csal })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_cmpm: 1.0, w_cmpc: 1.0, w_csal: 0.1 }
    }
}

/// Identity classifier weights for the projection classification loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub weights: Mat,
}

impl ClassifierParams {
    pub fn new(weights: Mat) -> Result<Self> {
        if weights.rows() == 0 || !weights.is_finite() {
            return Err(Error::InvalidInput("classifier weights must be finite and non-empty".into()));
        }
        Ok(Self { weights })
    }

    pub fn seeded(identity_count: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut weights = Mat::zeros(identity_count, dim);
        for v in weights.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        Self { weights }
    }

    pub fn identity_count(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Loss-side configuration: softmax temperature used to turn raw pair
/// scores into distributions, the epsilon guarding log denominators, and
/// the study-only switch that feeds raw scores into the alignment loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau_loss: f64,
    pub eps: f64,
    pub raw_csal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau_loss: 10.0, eps: 1e-8, raw_csal: false }
    }
}

/// A training batch of matched image/caption pairs.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub images: Vec<FeatureSet>,
    pub texts: Vec<FeatureSet>,
    pub person_ids: Vec<u32>,
    pub labels: MatchLabels,
}

impl TrainBatch {
    pub fn new(images: Vec<FeatureSet>, texts: Vec<FeatureSet>, person_ids: Vec<u32>) -> Result<Self> {
        if images.len() != texts.len() || images.len() != person_ids.len() {
            return Err(Error::InvalidBatch(format!(
                "batch sides disagree: {} images, {} texts, {} ids",
                images.len(),
                texts.len(),
                person_ids.len()
            )));
        }
        let labels = MatchLabels::from_matched_ids(&person_ids, &person_ids)?;
        Ok(Self { images, texts, person_ids, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn check_square(name: &str, m: &Mat, b: usize) -> Result<()> {
    if m.rows() != b || m.cols() != b {
        return Err(Error::DimensionMismatch(format!(
            "{name} must be {b}x{b}, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

fn kl_row(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter().zip(q).map(|(pv, qv)| pv * (pv.ln() - (qv + eps).ln())).sum()
}

fn softmax_scaled(row: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = row.iter().map(|v| v * tau).collect();
    crate::mat::softmax(&logits)
}

/// Cross-scale alignment loss over the two batch score matrices.
///
/// Scores are softmax-normalized (inverse temperature `tau_loss`) per image
/// over captions and per caption over images before entering the
/// p*log(p/(q+eps)) terms. With `raw_csal` the positive raw scores are used
/// as weights directly.
pub fn csal(sim_i2t: &Mat, sim_t2i: &Mat, labels: &MatchLabels, cfg: &LossConfig) -> Result<f64> {
    let b = labels.batch_size();
    check_square("sim_i2t", sim_i2t, b)?;
    check_square("sim_t2i", sim_t2i, b)?;
    if cfg.eps <= 0.0 {
        return Err(Error::InvalidHyperparameter(format!("eps must be positive, got {}", cfg.eps)));
    }

    let mut loss_i = 0.0;
    let mut loss_t = 0.0;
    if cfg.raw_csal {
        for i in 0..b {
            for j in 0..b {
                let s = sim_i2t.get(i, j);
                if s > 0.0 {
                    loss_i += s * (s.ln() - (labels.q_rows.get(i, j) + cfg.eps).ln());
                }
                let sp = sim_t2i.get(i, j);
                if sp > 0.0 {
                    loss_t += sp * (sp.ln() - (labels.q_cols.get(i, j) + cfg.eps).ln());
                }
            }
        }
    } else {
        for i in 0..b {
            let p = softmax_scaled(sim_i2t.row(i), cfg.tau_loss);
            loss_i += kl_row(&p, labels.q_rows.row(i), cfg.eps);
        }
        for j in 0..b {
            let col: Vec<f64> = (0..b).map(|i| sim_t2i.get(i, j)).collect();
            let p = softmax_scaled(&col, cfg.tau_loss);
            let q: Vec<f64> = (0..b).map(|i| labels.q_cols.get(i, j)).collect();
            loss_t += kl_row(&p, &q, cfg.eps);
        }
    }
    Ok((loss_i + loss_t) / b as f64)
}

fn row_unit(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let n = crate::mat::norm(m.row(r));
        if n > 0.0 {
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
    }
    out
}

/// Cross-modal projection matching on global features: softmax over the
/// projections of one side onto the unit directions of the other, matched
/// against the normalized label distribution, averaged over directions.
pub fn cmpm(img_globals: &Mat, txt_globals: &Mat, labels: &MatchLabels, eps: f64) -> Result<f64> {
    let b = labels.batch_size();
    if img_globals.rows() != b || txt_globals.rows() != b || img_globals.cols() != txt_globals.cols() {
        return Err(Error::DimensionMismatch(format!(
            "global features must be {b} x D on both sides, got {}x{} and {}x{}",
            img_globals.rows(),
            img_globals.cols(),
            txt_globals.rows(),
            txt_globals.cols()
        )));
    }
    let zbar = row_unit(txt_globals);
    let xbar = row_unit(img_globals);

    let mut loss_i2t = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = (0..b).map(|j| crate::mat::dot(img_globals.row(i), zbar.row(j))).collect();
        let p = crate::mat::softmax(&logits);
        loss_i2t += kl_row(&p, labels.q_rows.row(i), eps);
    }
    let mut loss_t2i = 0.0;
    for j in 0..b {
        let logits: Vec<f64> = (0..b).map(|i| crate::mat::dot(txt_globals.row(j), xbar.row(i))).collect();
        let p = crate::mat::softmax(&logits);
        let q: Vec<f64> = (0..b).map(|i| labels.q_cols.get(i, j)).collect();
        loss_t2i += kl_row(&p, &q, eps);
    }
    Ok((loss_i2t / b as f64 + loss_t2i / b as f64) / 2.0)
}

/// Cross-modal projection classification: each global feature is projected
/// onto its matched partner's unit direction and classified over identities
/// with a norm-softmax (unit classifier rows), averaged over directions.
pub fn cmpc(
    img_globals: &Mat,
    txt_globals: &Mat,
    person_ids: &[u32],
    classifier: &ClassifierParams,
) -> Result<f64> {
    let b = person_ids.len();
    if img_globals.rows() != b || txt_globals.rows() != b {
        return Err(Error::DimensionMismatch(format!(
            "{b} ids for {} image and {} text globals",
            img_globals.rows(),
            txt_globals.rows()
        )));
    }
    if classifier.dim() != img_globals.cols() {
        return Err(Error::DimensionMismatch(format!(
            "classifier dim {} vs feature dim {}",
            classifier.dim(),
            img_globals.cols()
        )));
    }
    let c = classifier.identity_count();
    for &pid in person_ids {
        if pid as usize >= c {
            return Err(Error::InvalidLabel(format!("identity {pid} outside classifier range {c}")));
        }
    }
    let what = row_unit(&classifier.weights);
    let zbar = row_unit(txt_globals);
    let xbar = row_unit(img_globals);

    let ce = |feat: &[f64], pid: usize| -> f64 {
        let logits: Vec<f64> = (0..c).map(|k| crate::mat::dot(feat, what.row(k))).collect();
        let p = crate::mat::softmax(&logits);
        -p[pid].ln()
    };

    let mut ce_img = 0.0;
    let mut ce_txt = 0.0;
    for i in 0..b {
        let d = crate::mat::dot(img_globals.row(i), zbar.row(i));
        let xhat: Vec<f64> = zbar.row(i).iter().map(|v| v * d).collect();
        ce_img += ce(&xhat, person_ids[i] as usize);

        let e = crate::mat::dot(txt_globals.row(i), xbar.row(i));
        let zhat: Vec<f64> = xbar.row(i).iter().map(|v| v * e).collect();
        ce_txt += ce(&zhat, person_ids[i] as usize);
    }
    Ok((ce_img / b as f64 + ce_txt / b as f64) / 2.0)
}

/// Stacks the value-projected global feature of every set into a B x D
/// matrix. The value projections double as the global embedding map, so the
/// auxiliary losses train the same space the pair scores live in.
pub fn projected_globals(sets: &[FeatureSet], weight: &Mat) -> Result<Mat> {
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let global = set.global().ok_or_else(|| {
            Error::InvalidInput(format!("feature set {} has no global entry", set.owner_id()))
        })?;
        rows.push(global.values().to_vec());
    }
    Mat::from_rows(&rows)?.matmul_nt(weight)
}

/// The composite objective on a batch, computed on the plain scalar path.
pub fn total_loss(
    batch: &TrainBatch,
    params: &ProjectionParams,
    classifier: &ClassifierParams,
    weights: &LossWeights,
    temps: &Temperatures,
    axis: NormAxis,
    cfg: &LossConfig,
) -> Result<f64> {
    let (sim_i2t, sim_t2i) = batch_similarity(&batch.images, &batch.texts, params, temps, axis)?;
    let img_globals = projected_globals(&batch.images, &params.w_iv)?;
    let txt_globals = projected_globals(&batch.texts, &params.w_tv)?;
    let l_cmpm = cmpm(&img_globals, &txt_globals, &batch.labels, cfg.eps)?;
    let l_cmpc = cmpc(&img_globals, &txt_globals, &batch.person_ids, classifier)?;
    let l_csal = csal(&sim_i2t, &sim_t2i, &batch.labels, cfg)?;
    let total = weights.w_cmpm * l_cmpm + weights.w_cmpc * l_cmpc + weights.w_csal * l_csal;
    if !total.is_finite() {
        return Err(Error::Numeric { tensor: "total_loss".into() });
    }
    Ok(total)
}

/// Gradients of the composite objective with respect to every learnable
/// tensor, including the input feature matrices of the batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w_iq: Mat,
    pub w_iv: Mat,
    pub w_tk: Mat,
    pub w_tv: Mat,
    pub classifier: Mat,
    pub image_features: Vec<Mat>,
    pub text_features: Vec<Mat>,
}

struct LossGraph {
    tape: Tape,
    loss: NodeId,
    w_iq: NodeId,
    w_iv: NodeId,
    w_tk: NodeId,
    w_tv: NodeId,
    classifier: NodeId,
    image_features: Vec<NodeId>,
    text_features: Vec<NodeId>,
}

fn ln_plus_eps(m: &Mat, eps: f64) -> Mat {
    let data = m.data().iter().map(|v| (v + eps).ln()).collect();
    Mat::from_vec(m.rows(), m.cols(), data).expect("shape preserved")
}

fn global_row_index(set: &FeatureSet) -> Result<usize> {
    set.entries()
        .iter()
        .position(|(tag, _)| tag.branch == crate::feature::Branch::Global)
        .ok_or_else(|| Error::InvalidInput(format!("feature set {} has no global entry", set.owner_id())))
}

fn build_loss_graph(
    batch: &TrainBatch,
    params: &ProjectionParams,
    classifier: &ClassifierParams,
    weights: &LossWeights,
    temps: &Temperatures,
    axis: NormAxis,
    cfg: &LossConfig,
) -> Result<LossGraph> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::InvalidBatch("batch must be non-empty".into()));
    }
    let mut tape = Tape::new();

    let w_iq = tape.leaf(params.w_iq.clone(), "w_iq")?;
    let w_iv = tape.leaf(params.w_iv.clone(), "w_iv")?;
    let w_tk = tape.leaf(params.w_tk.clone(), "w_tk")?;
    let w_tv = tape.leaf(params.w_tv.clone(), "w_tv")?;
    let w_cls = tape.leaf(classifier.weights.clone(), "classifier")?;
    let w_iq_t = tape.transpose(w_iq)?;
    let w_iv_t = tape.transpose(w_iv)?;
    let w_tk_t = tape.transpose(w_tk)?;
    let w_tv_t = tape.transpose(w_tv)?;

    // Per-set projections, computed once and shared across pairs.
    let mut image_leaves = Vec::with_capacity(b);
    let mut vis_queries = Vec::with_capacity(b);
    let mut vis_queries_t = Vec::with_capacity(b);
    let mut vis_values = Vec::with_capacity(b);
    for (i, set) in batch.images.iter().enumerate() {
        let leaf = tape.leaf(set.matrix(), &format!("image[{i}]"))?;
        image_leaves.push(leaf);
        let q = tape.matmul(leaf, w_iq_t)?;
        let qhat = tape.row_unit(q)?;
        vis_queries.push(qhat);
        vis_queries_t.push(tape.transpose(qhat)?);
        vis_values.push(tape.matmul(leaf, w_iv_t)?);
    }
    let mut text_leaves = Vec::with_capacity(b);
    let mut txt_keys = Vec::with_capacity(b);
    let mut txt_keys_t = Vec::with_capacity(b);
    let mut txt_values = Vec::with_capacity(b);
    for (j, set) in batch.texts.iter().enumerate() {
        let leaf = tape.leaf(set.matrix(), &format!("text[{j}]"))?;
        text_leaves.push(leaf);
        let k = tape.matmul(leaf, w_tk_t)?;
        let khat = tape.row_unit(k)?;
        txt_keys.push(khat);
        txt_keys_t.push(tape.transpose(khat)?);
        txt_values.push(tape.matmul(leaf, w_tv_t)?);
    }

    let normalize = |tape: &mut Tape, s: NodeId| -> Result<NodeId> {
        match axis {
            NormAxis::Queries => tape.norm_cols(s),
            NormAxis::Keys => tape.norm_rows(s),
        }
    };

    // One attention direction: unit queries against unit keys, focal
    // filtering, softmax pooling of the key-side values, per-row cosine to
    // the query-side values, averaged.
    let attend = |tape: &mut Tape,
                      qhat: NodeId,
                      khat_t: NodeId,
                      key_values: NodeId,
                      query_values: NodeId,
                      tau: f64|
     -> Result<NodeId> {
        let raw = tape.matmul(qhat, khat_t)?;
        let s = tape.relu(raw)?;
        let s_hat = normalize(tape, s)?;
        let s_tilde = tape.focal(s_hat)?;
        let alpha = tape.row_softmax(s_tilde, tau)?;
        let pooled = tape.matmul(alpha, key_values)?;
        let relevance = tape.row_cosine(query_values, pooled)?;
        tape.mean(relevance)
    };

    let mut i2t_scores = Vec::with_capacity(b * b);
    let mut t2i_scores = Vec::with_capacity(b * b);
    for i in 0..b {
        for j in 0..b {
            i2t_scores.push(attend(
                &mut tape,
                vis_queries[i],
                txt_keys_t[j],
                txt_values[j],
                vis_values[i],
                temps.tau_i2t,
            )?);
        }
    }
    for i in 0..b {
        for j in 0..b {
            t2i_scores.push(attend(
                &mut tape,
                txt_keys[j],
                vis_queries_t[i],
                vis_values[i],
                txt_values[j],
                temps.tau_t2i,
            )?);
        }
    }
    let sim_i2t = tape.stack_scalars(&i2t_scores, b, b)?;
    let sim_t2i = tape.stack_scalars(&t2i_scores, b, b)?;

    let lnq_rows = ln_plus_eps(batch.labels.q_rows(), cfg.eps);
    let lnq_cols_t = ln_plus_eps(&batch.labels.q_cols().transpose(), cfg.eps);

    // Alignment loss. The text direction works on the transposed matrix so
    // each caption row holds its distribution over images.
    let csal_node = if cfg.raw_csal {
        let term_i = tape.kl_raw_positive(sim_i2t, lnq_rows.clone())?;
        let sim_t2i_t = tape.transpose(sim_t2i)?;
        let term_t = tape.kl_raw_positive(sim_t2i_t, lnq_cols_t.clone())?;
        let sum = tape.add(term_i, term_t)?;
        tape.scale(sum, 1.0 / b as f64)?
    } else {
        let kl_term = |tape: &mut Tape, scores: NodeId, lnq: &Mat| -> Result<NodeId> {
            let scaled = tape.scale(scores, cfg.tau_loss)?;
            let lp = tape.row_log_softmax(scaled)?;
            let p = tape.exp(lp)?;
            let lnq_node = tape.constant(lnq.clone())?;
            let gap = tape.sub(lp, lnq_node)?;
            let weighted = tape.mul_elem(p, gap)?;
            tape.sum(weighted)
        };
        let term_i = kl_term(&mut tape, sim_i2t, &lnq_rows)?;
        let sim_t2i_t = tape.transpose(sim_t2i)?;
        let term_t = kl_term(&mut tape, sim_t2i_t, &lnq_cols_t)?;
        let sum = tape.add(term_i, term_t)?;
        tape.scale(sum, 1.0 / b as f64)?
    };

    // Global features through the value projections.
    let img_rows: Vec<(NodeId, usize)> = batch
        .images
        .iter()
        .enumerate()
        .map(|(i, set)| Ok((vis_values[i], global_row_index(set)?)))
        .collect::<Result<_>>()?;
    let txt_rows: Vec<(NodeId, usize)> = batch
        .texts
        .iter()
        .enumerate()
        .map(|(j, set)| Ok((txt_values[j], global_row_index(set)?)))
        .collect::<Result<_>>()?;
    let img_globals = tape.stack_rows(&img_rows)?;
    let txt_globals = tape.stack_rows(&txt_rows)?;

    // Projection matching.
    let zbar = tape.row_unit(txt_globals)?;
    let xbar = tape.row_unit(img_globals)?;
    let cmpm_dir = |tape: &mut Tape, feats: NodeId, dirs: NodeId, lnq: &Mat| -> Result<NodeId> {
        let dirs_t = tape.transpose(dirs)?;
        let logits = tape.matmul(feats, dirs_t)?;
        let lp = tape.row_log_softmax(logits)?;
        let p = tape.exp(lp)?;
        let lnq_node = tape.constant(lnq.clone())?;
        let gap = tape.sub(lp, lnq_node)?;
        let weighted = tape.mul_elem(p, gap)?;
        tape.sum(weighted)
    };
    let cmpm_i2t = cmpm_dir(&mut tape, img_globals, zbar, &lnq_rows)?;
    let cmpm_t2i = cmpm_dir(&mut tape, txt_globals, xbar, &lnq_cols_t)?;
    let cmpm_sum = tape.add(cmpm_i2t, cmpm_t2i)?;
    let cmpm_node = tape.scale(cmpm_sum, 0.5 / b as f64)?;

    // Projection classification with unit classifier rows.
    let labels_idx: Vec<usize> = batch.person_ids.iter().map(|&p| p as usize).collect();
    let what = tape.row_unit(w_cls)?;
    let what_t = tape.transpose(what)?;
    let cmpc_dir = |tape: &mut Tape, feats: NodeId, dirs: NodeId| -> Result<NodeId> {
        let d = tape.row_dot(feats, dirs)?;
        let projected = tape.scale_rows(dirs, d)?;
        let logits = tape.matmul(projected, what_t)?;
        let lp = tape.row_log_softmax(logits)?;
        let picked = tape.gather_cols(lp, &labels_idx)?;
        tape.sum(picked)
    };
    let cmpc_img = cmpc_dir(&mut tape, img_globals, zbar)?;
    let cmpc_txt = cmpc_dir(&mut tape, txt_globals, xbar)?;
    let cmpc_sum = tape.add(cmpc_img, cmpc_txt)?;
    let cmpc_node = tape.scale(cmpc_sum, -0.5 / b as f64)?;

    let weighted_cmpm = tape.scale(cmpm_node, weights.w_cmpm)?;
    let weighted_cmpc = tape.scale(cmpc_node, weights.w_cmpc)?;
    let weighted_csal = tape.scale(csal_node, weights.w_csal)?;
    let partial = tape.add(weighted_cmpm, weighted_cmpc)?;
    let loss = tape.add(partial, weighted_csal)?;

    Ok(LossGraph {
        tape,
        loss,
        w_iq,
        w_iv,
        w_tk,
        w_tv,
        classifier: w_cls,
        image_features: image_leaves,
        text_features: text_leaves,
    })
}

/// Loss value plus exact gradients of every learnable tensor in one pass.
pub fn loss_and_gradients(
    batch: &TrainBatch,
    params: &ProjectionParams,
    classifier: &ClassifierParams,
    weights: &LossWeights,
    temps: &Temperatures,
    axis: NormAxis,
    cfg: &LossConfig,
) -> Result<(f64, Gradients)> {
    let graph = build_loss_graph(batch, params, classifier, weights, temps, axis, cfg)?;
    let loss = graph.tape.value(graph.loss).get(0, 0);
    let grads = graph.tape.backward(graph.loss)?;
    let take = |id: NodeId| grads[id.index()].clone();
    let gradients = Gradients {
        w_iq: take(graph.w_iq),
        w_iv: take(graph.w_iv),
        w_tk: take(graph.w_tk),
        w_tv: take(graph.w_tv),
        classifier: take(graph.classifier),
        image_features: graph.image_features.iter().map(|&id| take(id)).collect(),
        text_features: graph.text_features.iter().map(|&id| take(id)).collect(),
    };
    Ok((loss, gradients))
}

/// Exact derivatives of [`total_loss`] for every learnable tensor.
pub fn gradients(
    batch: &TrainBatch,
    params: &ProjectionParams,
    classifier: &ClassifierParams,
    weights: &LossWeights,
    temps: &Temperatures,
    axis: NormAxis,
    cfg: &LossConfig,
) -> Result<Gradients> {
    Ok(loss_and_gradients(batch, params, classifier, weights, temps, axis, cfg)?.1)
}

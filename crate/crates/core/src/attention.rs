//! Contextual non-local attention between visual and textual feature sets.
//!
//! Both directions share one pipeline: project the sets into queries, keys
//! and values; take the clamped cosine similarity between every query and
//! every key; normalize over the query axis; filter out entries at or below
//! their row mean (focal filtering); pool the opposite side's values with a
//! temperature softmax; and average the per-query cosine between each value
//! and its pooled context. The intermediate matrices are retained in an
//! [`AttentionState`] for export and testing.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature::{FeatureSet, FeatureVector, ScaleTag};
use crate::mat::{cosine, Mat};

/// Which axis the similarity matrix is normalized over before focal
/// filtering. `Queries` divides each entry by its column sum (the sum over
/// the query index); `Keys` divides by the row sum instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormAxis {
    #[default]
    Queries,
    Keys,
}

impl NormAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "queries" => Ok(NormAxis::Queries),
            "keys" => Ok(NormAxis::Keys),
            _ => Err(Error::Config(format!("norm_axis must be 'queries' or 'keys', got {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NormAxis::Queries => "queries",
            NormAxis::Keys => "keys",
        }
    }
}

/// Inverse softmax temperatures for the two attention directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub tau_i2t: f64,
    pub tau_t2i: f64,
}

impl Temperatures {
    pub fn new(tau_i2t: f64, tau_t2i: f64) -> Result<Self> {
        if tau_i2t <= 0.0 || tau_t2i <= 0.0 || !tau_i2t.is_finite() || !tau_t2i.is_finite() {
            return Err(Error::InvalidHyperparameter(format!(
                "temperatures must be positive, got ({tau_i2t}, {tau_t2i})"
            )));
        }
        Ok(Self { tau_i2t, tau_t2i })
    }
}

impl Default for Temperatures {
    fn default() -> Self {
        Self { tau_i2t: 20.0, tau_t2i: 20.0 }
    }
}

/// The four learned linear projections: visual queries and values, textual
/// keys and values. All are square and bias-free.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub w_iq: Mat,
    pub w_iv: Mat,
    pub w_tk: Mat,
    pub w_tv: Mat,
}

impl ProjectionParams {
    pub fn new(w_iq: Mat, w_iv: Mat, w_tk: Mat, w_tv: Mat) -> Result<Self> {
        let dim = w_iq.rows();
        for (name, w) in [("w_iq", &w_iq), ("w_iv", &w_iv), ("w_tk", &w_tk), ("w_tv", &w_tv)] {
            if w.rows() != dim || w.cols() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "{name} must be {dim}x{dim}, got {}x{}",
                    w.rows(),
                    w.cols()
                )));
            }
            if !w.is_finite() {
                return Err(Error::Numeric { tensor: name.to_string() });
            }
        }
        Ok(Self { w_iq, w_iv, w_tk, w_tv })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w_iq: Mat::identity(dim),
            w_iv: Mat::identity(dim),
            w_tk: Mat::identity(dim),
            w_tv: Mat::identity(dim),
        }
    }

    /// Seeded uniform init on [-1/sqrt(D), +1/sqrt(D)].
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut draw = |_: usize| {
            let mut m = Mat::zeros(dim, dim);
            for v in m.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            m
        };
        let w_iq = draw(0);
        let w_iv = draw(1);
        let w_tk = draw(2);
        let w_tv = draw(3);
        Self { w_iq, w_iv, w_tk, w_tv }
    }

    pub fn dim(&self) -> usize {
        self.w_iq.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Direction::ImageToText),
            "t2i" => Ok(Direction::TextToImage),
            _ => Err(Error::Format(format!("unknown direction {s:?}"))),
        }
    }
}

/// Intermediate attention matrices of one scored pair, retained for export.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub direction: Direction,
    /// Raw clamped cosine similarities, query rows by key columns.
    pub s: Mat,
    /// After normalization over the configured axis.
    pub s_hat: Mat,
    /// After focal filtering.
    pub s_tilde: Mat,
    /// Row-wise softmax pooling weights.
    pub alpha: Mat,
    pub query_tags: Vec<ScaleTag>,
    pub key_tags: Vec<ScaleTag>,
}

/// Bidirectional similarity of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub i2t: f64,
    pub t2i: f64,
}

/// Applies a linear projection to every vector of a feature set, preserving
/// order. Each output is `weight * v`.
pub fn project(features: &FeatureSet, weight: &Mat) -> Result<Vec<FeatureVector>> {
    if weight.cols() != features.dim() {
        return Err(Error::DimensionMismatch(format!(
            "projection is {}x{} but features have dim {}",
            weight.rows(),
            weight.cols(),
            features.dim()
        )));
    }
    let projected = features.matrix().matmul_nt(weight)?;
    (0..projected.rows())
        .map(|r| FeatureVector::new(projected.row(r).to_vec()))
        .collect()
}

fn project_mat(features: &Mat, weight: &Mat) -> Result<Mat> {
    features.matmul_nt(weight)
}

fn vectors_to_mat(vectors: &[FeatureVector]) -> Result<Mat> {
    if vectors.is_empty() {
        return Err(Error::InvalidInput("need at least one vector".into()));
    }
    let rows: Vec<Vec<f64>> = vectors.iter().map(|v| v.values().to_vec()).collect();
    Mat::from_rows(&rows)
}

fn clamped_cosine_mat(queries: &Mat, keys: &Mat) -> Result<Mat> {
    if queries.cols() != keys.cols() {
        return Err(Error::DimensionMismatch(format!(
            "query dim {} vs key dim {}",
            queries.cols(),
            keys.cols()
        )));
    }
    let mut out = Mat::zeros(queries.rows(), keys.rows());
    for a in 0..queries.rows() {
        for b in 0..keys.rows() {
            out.set(a, b, cosine(queries.row(a), keys.row(b)).max(0.0));
        }
    }
    Ok(out)
}

/// `s[a][b] = max(cos(q_a, k_b), 0)`; zero vectors contribute 0.
pub fn clamped_cosine_matrix(queries: &[FeatureVector], keys: &[FeatureVector]) -> Result<Mat> {
    clamped_cosine_mat(&vectors_to_mat(queries)?, &vectors_to_mat(keys)?)
}

pub(crate) const NORM_EPS: f64 = 1e-8;

/// Divides each entry by the sum over the chosen axis plus a small epsilon,
/// so all-zero columns (or rows) stay zero.
pub fn normalize_over_axis(s: &Mat, axis: NormAxis) -> Mat {
    let mut out = Mat::zeros(s.rows(), s.cols());
    match axis {
        NormAxis::Queries => {
            let mut col_sums = vec![0.0; s.cols()];
            for a in 0..s.rows() {
                for (b, sum) in col_sums.iter_mut().enumerate() {
                    *sum += s.get(a, b);
                }
            }
            for a in 0..s.rows() {
                for b in 0..s.cols() {
                    out.set(a, b, s.get(a, b) / (col_sums[b] + NORM_EPS));
                }
            }
        }
        NormAxis::Keys => {
            for a in 0..s.rows() {
                let row_sum: f64 = s.row(a).iter().sum();
                for b in 0..s.cols() {
                    out.set(a, b, s.get(a, b) / (row_sum + NORM_EPS));
                }
            }
        }
    }
    out
}

/// Normalization over the query axis: each column divided by its sum.
pub fn normalize_over_queries(s: &Mat) -> Mat {
    normalize_over_axis(s, NormAxis::Queries)
}

/// Focal filtering: keep an entry only when it exceeds its row mean,
/// rescaled by the entry itself.
///
/// `s_tilde[a][b] = max(n * s_hat[a][b] - sum_c s_hat[a][c], 0) * s_hat[a][b]`
pub fn focal_filter(s_hat: &Mat) -> Mat {
    let n = s_hat.cols() as f64;
    let mut out = Mat::zeros(s_hat.rows(), s_hat.cols());
    for a in 0..s_hat.rows() {
        let row_sum: f64 = s_hat.row(a).iter().sum();
        for b in 0..s_hat.cols() {
            let v = s_hat.get(a, b);
            out.set(a, b, (n * v - row_sum).max(0.0) * v);
        }
    }
    out
}

fn row_softmax_scaled(m: &Mat, tau: f64) -> Mat {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for a in 0..m.rows() {
        let logits: Vec<f64> = m.row(a).iter().map(|v| v * tau).collect();
        let p = crate::mat::softmax(&logits);
        out.row_mut(a).copy_from_slice(&p);
    }
    out
}

/// Temperature softmax over each row of `s_tilde`, then a weighted sum of
/// the value vectors. Returns the weight matrix and the pooled contexts.
pub fn attention_pool(
    s_tilde: &Mat,
    values: &[FeatureVector],
    tau: f64,
) -> Result<(Mat, Vec<FeatureVector>)> {
    if tau <= 0.0 {
        return Err(Error::InvalidHyperparameter(format!("tau must be positive, got {tau}")));
    }
    if values.len() != s_tilde.cols() {
        return Err(Error::DimensionMismatch(format!(
            "{} values for {} attention columns",
            values.len(),
            s_tilde.cols()
        )));
    }
    let value_mat = vectors_to_mat(values)?;
    let alpha = row_softmax_scaled(s_tilde, tau);
    let pooled = alpha.matmul(&value_mat)?;
    let out = (0..pooled.rows())
        .map(|r| FeatureVector::new(pooled.row(r).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((alpha, out))
}

/// Projected representation of one feature set, computed once per set and
/// reused across pairings.
#[derive(Debug, Clone)]
pub struct ProjectedSet {
    /// Visual queries or textual keys, depending on the modality.
    pub contrast: Mat,
    /// Value vectors of the same modality.
    pub values: Mat,
    pub tags: Vec<ScaleTag>,
}

pub fn project_visual(image: &FeatureSet, params: &ProjectionParams) -> Result<ProjectedSet> {
    let mat = image.matrix();
    Ok(ProjectedSet {
        contrast: project_mat(&mat, &params.w_iq)?,
        values: project_mat(&mat, &params.w_iv)?,
        tags: image.tags(),
    })
}

pub fn project_textual(text: &FeatureSet, params: &ProjectionParams) -> Result<ProjectedSet> {
    let mat = text.matrix();
    Ok(ProjectedSet {
        contrast: project_mat(&mat, &params.w_tk)?,
        values: project_mat(&mat, &params.w_tv)?,
        tags: text.tags(),
    })
}

/// One direction of the attention pipeline over already-projected sets.
/// `queries`/`query_values` belong to the side being scored, `keys` /
/// `key_values` to the side being attended.
fn attend(
    queries: &ProjectedSet,
    keys: &ProjectedSet,
    tau: f64,
    axis: NormAxis,
    direction: Direction,
) -> Result<(f64, AttentionState)> {
    let s = clamped_cosine_mat(&queries.contrast, &keys.contrast)?;
    let s_hat = normalize_over_axis(&s, axis);
    let s_tilde = focal_filter(&s_hat);
    let alpha = row_softmax_scaled(&s_tilde, tau);
    let pooled = alpha.matmul(&keys.values)?;
    let m = queries.values.rows();
    let mut acc = 0.0;
    for a in 0..m {
        acc += cosine(queries.values.row(a), pooled.row(a));
    }
    let score = acc / m as f64;
    Ok((
        score,
        AttentionState {
            direction,
            s,
            s_hat,
            s_tilde,
            alpha,
            query_tags: queries.tags.clone(),
            key_tags: keys.tags.clone(),
        },
    ))
}

fn check_pair_dims(image: &FeatureSet, text: &FeatureSet, params: &ProjectionParams) -> Result<()> {
    if image.dim() != text.dim() || image.dim() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "image dim {}, text dim {}, projection dim {}",
            image.dim(),
            text.dim(),
            params.dim()
        )));
    }
    Ok(())
}

/// Image-to-text pair similarity: visual queries attend textual keys, the
/// attended textual values are compared to the visual values, and the
/// per-query relevances are averaged.
pub fn pair_similarity_i2t(
    image: &FeatureSet,
    text: &FeatureSet,
    params: &ProjectionParams,
    temps: &Temperatures,
    axis: NormAxis,
) -> Result<(f64, AttentionState)> {
    check_pair_dims(image, text, params)?;
    let vis = project_visual(image, params)?;
    let txt = project_textual(text, params)?;
    attend(&vis, &txt, temps.tau_i2t, axis, Direction::ImageToText)
}

/// Text-to-image pair similarity: textual keys act as queries over the
/// visual queries, pooling visual values against textual values.
pub fn pair_similarity_t2i(
    text: &FeatureSet,
    image: &FeatureSet,
    params: &ProjectionParams,
    temps: &Temperatures,
    axis: NormAxis,
) -> Result<(f64, AttentionState)> {
    check_pair_dims(image, text, params)?;
    let vis = project_visual(image, params)?;
    let txt = project_textual(text, params)?;
    attend(&txt, &vis, temps.tau_t2i, axis, Direction::TextToImage)
}

/// Scores every image against every text. Entry `(i, j)` of each output is
/// the pair score for image `i` and text `j`.
pub fn batch_similarity(
    images: &[FeatureSet],
    texts: &[FeatureSet],
    params: &ProjectionParams,
    temps: &Temperatures,
    axis: NormAxis,
) -> Result<(Mat, Mat)> {
    if images.is_empty() || texts.is_empty() {
        return Err(Error::InvalidBatch("batch must be non-empty".into()));
    }
    if images.len() != texts.len() {
        return Err(Error::InvalidBatch(format!(
            "{} images vs {} texts",
            images.len(),
            texts.len()
        )));
    }
    let vis: Vec<ProjectedSet> = images
        .iter()
        .map(|set| {
            check_pair_dims(set, &texts[0], params)?;
            project_visual(set, params)
        })
        .collect::<Result<_>>()?;
    let txt: Vec<ProjectedSet> = texts
        .iter()
        .map(|set| project_textual(set, params))
        .collect::<Result<_>>()?;
    let b = images.len();
    let mut sim_i2t = Mat::zeros(b, b);
    let mut sim_t2i = Mat::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let (fwd, _) = attend(&vis[i], &txt[j], temps.tau_i2t, axis, Direction::ImageToText)?;
            let (bwd, _) = attend(&txt[j], &vis[i], temps.tau_t2i, axis, Direction::TextToImage)?;
            sim_i2t.set(i, j, fwd);
            sim_t2i.set(i, j, bwd);
        }
    }
    Ok((sim_i2t, sim_t2i))
}

/// Both direction scores for one pair.
pub fn pair_score(
    image: &FeatureSet,
    text: &FeatureSet,
    params: &ProjectionParams,
    temps: &Temperatures,
    axis: NormAxis,
) -> Result<PairScore> {
    Ok(PairScore {
        i2t: pair_similarity_i2t(image, text, params, temps, axis)?.0,
        t2i: pair_similarity_t2i(text, image, params, temps, axis)?.0,
    })
}

/// Bundles the scoring configuration used across ranking and training.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub params: ProjectionParams,
    pub temps: Temperatures,
    pub axis: NormAxis,
}

impl Scorer {
    pub fn new(params: ProjectionParams, temps: Temperatures, axis: NormAxis) -> Self {
        Self { params, temps, axis }
    }

    pub fn score_i2t(&self, image: &FeatureSet, text: &FeatureSet) -> Result<(f64, AttentionState)> {
        pair_similarity_i2t(image, text, &self.params, &self.temps, self.axis)
    }

    pub fn score_t2i(&self, text: &FeatureSet, image: &FeatureSet) -> Result<(f64, AttentionState)> {
        pair_similarity_t2i(text, image, &self.params, &self.temps, self.axis)
    }

    pub fn batch(&self, images: &[FeatureSet], texts: &[FeatureSet]) -> Result<(Mat, Mat)> {
        batch_similarity(images, texts, &self.params, &self.temps, self.axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::Branch;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector::new(values.to_vec()).unwrap()
    }

    fn set_of(owner: &str, rows: &[Vec<f64>]) -> FeatureSet {
        let entries = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let tag = if i == 0 {
                    ScaleTag::new(Branch::Global, 0)
                } else {
                    ScaleTag::new(Branch::Patch, (i - 1) as u16)
                };
                (tag, fv(r))
            })
            .collect();
        FeatureSet::new(owner, entries).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, owner: &str, count: usize, dim: usize) -> FeatureSet {
        let rows: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        set_of(owner, &rows)
    }

    #[test]
    fn project_identity_and_zero() {
        let set = set_of("x", &[vec![1.0, 2.0], vec![-0.5, 0.25]]);
        let id = project(&set, &Mat::identity(2)).unwrap();
        assert_eq!(id[0].values(), &[1.0, 2.0]);
        assert_eq!(id[1].values(), &[-0.5, 0.25]);
        let zero = project(&set, &Mat::zeros(2, 2)).unwrap();
        assert_eq!(zero[0].values(), &[0.0, 0.0]);
    }

    #[test]
    fn project_swap_matrix() {
        let set = set_of("x", &[vec![1.0, 2.0]]);
        let swap = Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = project(&set, &swap).unwrap();
        assert_eq!(out[0].values(), &[2.0, 1.0]);
    }

    #[test]
    fn clamped_cosine_examples() {
        let q = [fv(&[1.0, 0.0])];
        let orth = [fv(&[0.0, 1.0])];
        assert_eq!(clamped_cosine_matrix(&q, &orth).unwrap().get(0, 0), 0.0);

        let anti = [fv(&[-1.0, 0.0])];
        assert_eq!(clamped_cosine_matrix(&q, &anti).unwrap().get(0, 0), 0.0);

        let diag = [fv(&[1.0, 1.0])];
        let s = clamped_cosine_matrix(&diag, &q).unwrap();
        assert!((s.get(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn normalize_columns_examples() {
        let s = Mat::from_vec(2, 3, vec![1.0, 2.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let n = normalize_over_queries(&s);
        assert!((n.get(0, 0) - 0.5).abs() < 1e-7);
        assert!((n.get(1, 0) - 0.5).abs() < 1e-7);
        assert!((n.get(0, 1) - 1.0).abs() < 1e-7);
        assert!((n.get(1, 1) - 0.0).abs() < 1e-12);
        // All-zero column stays zero.
        assert_eq!(n.get(0, 2), 0.0);
        assert_eq!(n.get(1, 2), 0.0);
    }

    #[test]
    fn focal_filter_examples() {
        let row = Mat::from_vec(1, 2, vec![0.7, 0.3]).unwrap();
        let f = focal_filter(&row);
        assert!((f.get(0, 0) - 0.28).abs() < 1e-12);
        assert_eq!(f.get(0, 1), 0.0);

        let uniform = Mat::from_vec(1, 3, vec![0.2, 0.2, 0.2]).unwrap();
        let fu = focal_filter(&uniform);
        assert!(fu.data().iter().all(|&v| v == 0.0));

        let peak = Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let fp = focal_filter(&peak);
        assert_eq!(fp.get(0, 0), 1.0);
        assert_eq!(fp.get(0, 1), 0.0);
    }

    #[test]
    fn attention_pool_examples() {
        let values = vec![fv(&[1.0, 0.0]), fv(&[0.0, 1.0])];
        let uniform = Mat::from_vec(1, 2, vec![0.4, 0.4]).unwrap();
        let (_, pooled) = attention_pool(&uniform, &values, 20.0).unwrap();
        assert!((pooled[0].values()[0] - 0.5).abs() < 1e-12);

        let focal = Mat::from_vec(1, 2, vec![0.28, 0.0]).unwrap();
        let (alpha, _) = attention_pool(&focal, &values, 20.0).unwrap();
        assert!((alpha.get(0, 0) - 0.99632).abs() < 1e-5);
        assert!((alpha.get(0, 1) - 0.00368).abs() < 1e-5);

        let single = Mat::from_vec(1, 1, vec![0.9]).unwrap();
        let (_, one) = attention_pool(&single, &values[..1], 3.0).unwrap();
        assert_eq!(one[0].values(), values[0].values());
    }

    #[test]
    fn pair_identity_scores_one() {
        let image = set_of("i", &[vec![0.3, 0.4]]);
        let text = set_of("t", &[vec![0.3, 0.4]]);
        let params = ProjectionParams::identity(2);
        let temps = Temperatures::default();
        let (score, state) =
            pair_similarity_i2t(&image, &text, &params, &temps, NormAxis::Queries).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
        assert_eq!(state.alpha.rows(), 1);
    }

    #[test]
    fn pair_orthogonal_values_score_zero() {
        let image = set_of("i", &[vec![1.0, 0.0]]);
        let text = set_of("t", &[vec![0.0, 1.0]]);
        let params = ProjectionParams::identity(2);
        let temps = Temperatures::default();
        let (score, _) =
            pair_similarity_i2t(&image, &text, &params, &temps, NormAxis::Queries).unwrap();
        assert!(score.abs() < 1e-12);
    }

    #[test]
    fn pair_scores_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ProjectionParams::seeded(4, 1);
        let temps = Temperatures::default();
        for _ in 0..100 {
            let image = random_set(&mut rng, "i", 3, 4);
            let text = random_set(&mut rng, "t", 5, 4);
            let score = pair_score(&image, &text, &params, &temps, NormAxis::Queries).unwrap();
            assert!(score.i2t >= -1.0 - 1e-12 && score.i2t <= 1.0 + 1e-12);
            assert!(score.t2i >= -1.0 - 1e-12 && score.t2i <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn t2i_symmetric_inputs_match_i2t() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let set = random_set(&mut rng, "s", 3, 4);
            // Same sets, identity projections: queries and keys coincide, so
            // both directions run the identical computation.
            let params = ProjectionParams::identity(4);
            let temps = Temperatures::default();
            let (i2t, _) =
                pair_similarity_i2t(&set, &set, &params, &temps, NormAxis::Queries).unwrap();
            let (t2i, _) =
                pair_similarity_t2i(&set, &set, &params, &temps, NormAxis::Queries).unwrap();
            assert!((i2t - t2i).abs() < 1e-12);
        }
    }

    #[test]
    fn t2i_singleton_identical_scores_one() {
        let image = set_of("i", &[vec![0.6, -0.8]]);
        let text = set_of("t", &[vec![0.6, -0.8]]);
        let params = ProjectionParams::identity(2);
        let temps = Temperatures::default();
        let (score, _) =
            pair_similarity_t2i(&text, &image, &params, &temps, NormAxis::Queries).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_pair_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ProjectionParams::seeded(4, 9);
        let temps = Temperatures::default();
        let images: Vec<FeatureSet> = (0..3).map(|i| random_set(&mut rng, &format!("i{i}"), 3, 4)).collect();
        let texts: Vec<FeatureSet> = (0..3).map(|j| random_set(&mut rng, &format!("t{j}"), 4, 4)).collect();
        let (sim_i2t, sim_t2i) =
            batch_similarity(&images, &texts, &params, &temps, NormAxis::Queries).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let ps = pair_score(&images[i], &texts[j], &params, &temps, NormAxis::Queries).unwrap();
                assert_eq!(sim_i2t.get(i, j), ps.i2t);
                assert_eq!(sim_t2i.get(i, j), ps.t2i);
            }
        }
    }

    #[test]
    fn batch_of_one_reduces_to_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ProjectionParams::seeded(3, 2);
        let temps = Temperatures::default();
        let images = vec![random_set(&mut rng, "i", 2, 3)];
        let texts = vec![random_set(&mut rng, "t", 2, 3)];
        let (a, b) = batch_similarity(&images, &texts, &params, &temps, NormAxis::Queries).unwrap();
        let ps = pair_score(&images[0], &texts[0], &params, &temps, NormAxis::Queries).unwrap();
        assert_eq!(a.get(0, 0), ps.i2t);
        assert_eq!(b.get(0, 0), ps.t2i);
    }

    #[test]
    fn batch_permutation_permutes_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = ProjectionParams::seeded(3, 3);
        let temps = Temperatures::default();
        let images: Vec<FeatureSet> = (0..3).map(|i| random_set(&mut rng, &format!("i{i}"), 2, 3)).collect();
        let texts: Vec<FeatureSet> = (0..3).map(|j| random_set(&mut rng, &format!("t{j}"), 2, 3)).collect();
        let (base, _) = batch_similarity(&images, &texts, &params, &temps, NormAxis::Queries).unwrap();
        let perm_images: Vec<FeatureSet> = vec![images[2].clone(), images[0].clone(), images[1].clone()];
        let (permuted, _) =
            batch_similarity(&perm_images, &texts, &params, &temps, NormAxis::Queries).unwrap();
        for j in 0..3 {
            assert_eq!(permuted.get(0, j), base.get(2, j));
            assert_eq!(permuted.get(1, j), base.get(0, j));
            assert_eq!(permuted.get(2, j), base.get(1, j));
        }
    }

    #[test]
    fn batch_rejects_empty_or_ragged() {
        let params = ProjectionParams::identity(2);
        let temps = Temperatures::default();
        let a = vec![set_of("i", &[vec![1.0, 0.0]])];
        assert!(matches!(
            batch_similarity(&[], &[], &params, &temps, NormAxis::Queries),
            Err(Error::InvalidBatch(_))
        ));
        assert!(matches!(
            batch_similarity(&a, &[], &params, &temps, NormAxis::Queries),
            Err(Error::InvalidBatch(_))
        ));
    }

    #[test]
    fn set_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ProjectionParams::seeded(4, 4);
        let temps = Temperatures::default();
        for _ in 0..50 {
            let image = random_set(&mut rng, "i", 4, 4);
            let text = random_set(&mut rng, "t", 5, 4);
            let (base_fwd, _) =
                pair_similarity_i2t(&image, &text, &params, &temps, NormAxis::Queries).unwrap();
            let (base_bwd, _) =
                pair_similarity_t2i(&text, &image, &params, &temps, NormAxis::Queries).unwrap();

            let mut entries = image.entries().to_vec();
            entries.reverse();
            let image_perm = FeatureSet::new("i", entries).unwrap();
            let mut tentries = text.entries().to_vec();
            tentries.rotate_left(2);
            let text_perm = FeatureSet::new("t", tentries).unwrap();

            let (fwd, _) =
                pair_similarity_i2t(&image_perm, &text_perm, &params, &temps, NormAxis::Queries).unwrap();
            let (bwd, _) =
                pair_similarity_t2i(&text_perm, &image_perm, &params, &temps, NormAxis::Queries).unwrap();
            assert!((fwd - base_fwd).abs() < 1e-6);
            assert!((bwd - base_bwd).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let queries: Vec<FeatureVector> =
                (0..3).map(|_| fv(&(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())).collect();
            let keys: Vec<FeatureVector> =
                (0..3).map(|_| fv(&(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())).collect();
            let base = clamped_cosine_matrix(&queries, &keys).unwrap();
            let mut scaled = queries.clone();
            let c = rng.gen_range(0.1..10.0);
            scaled[1] = fv(&queries[1].values().iter().map(|v| v * c).collect::<Vec<_>>());
            let after = clamped_cosine_matrix(&scaled, &keys).unwrap();
            for (x, y) in base.data().iter().zip(after.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn focal_zeroing_characterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let rows = rng.gen_range(1..5);
            let cols = rng.gen_range(1..6);
            let mut s = Mat::zeros(rows, cols);
            for v in s.data_mut() {
                *v = rng.gen_range(0.0..1.0_f64).max(0.0);
            }
            let s_hat = normalize_over_queries(&s);
            let s_tilde = focal_filter(&s_hat);
            for a in 0..rows {
                let row_sum: f64 = s_hat.row(a).iter().sum();
                for b in 0..cols {
                    let v = s_hat.get(a, b);
                    let above_mean = (cols as f64) * v - row_sum > 0.0;
                    if above_mean && v > 0.0 {
                        assert!(s_tilde.get(a, b) > 0.0);
                    } else {
                        assert_eq!(s_tilde.get(a, b), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn alpha_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ProjectionParams::seeded(4, 5);
        let temps = Temperatures::default();
        for _ in 0..100 {
            let image = random_set(&mut rng, "i", 3, 4);
            let text = random_set(&mut rng, "t", 4, 4);
            let (_, state) =
                pair_similarity_i2t(&image, &text, &params, &temps, NormAxis::Queries).unwrap();
            for a in 0..state.alpha.rows() {
                let sum: f64 = state.alpha.row(a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}

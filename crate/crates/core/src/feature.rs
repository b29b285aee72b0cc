//! Feature maps, stripe partitioning, split&shuffle, pooling and the
//! scale-tagged feature sets consumed by the alignment pipeline.
//!
//! A visual item arrives as three per-branch feature maps (global, region,
//! patch). The region and patch maps are horizontally striped, each stripe
//! is mean-pooled into one local feature vector, and the results are
//! collected into a [`FeatureSet`] alongside the pooled global vector.
//! Textual items arrive as ready-made feature sets with the same tagging
//! scheme (sentence, sub-sentence, word).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Spatial grid of activations at one backbone scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    /// Row-major layout: `data[(r * width + c) * channels + ch]`.
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "feature map data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature map contains non-finite values".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// The contiguous slice covering rows `[row_start, row_end)`.
    fn row_block(&self, row_start: usize, row_end: usize) -> &[f64] {
        let stride = self.width * self.channels;
        &self.data[row_start * stride..row_end * stride]
    }
}

/// One horizontal stripe of a parent feature map, rows `[row_start, row_end)`.
#[derive(Debug, Clone, Copy)]
pub struct StripeBlock<'a> {
    row_start: usize,
    row_end: usize,
    map: &'a FeatureMap,
}

impl<'a> StripeBlock<'a> {
    pub fn new(map: &'a FeatureMap, row_start: usize, row_end: usize) -> Result<Self> {
        if row_start >= row_end || row_end > map.height {
            return Err(Error::InvalidInput(format!(
                "stripe rows [{row_start}, {row_end}) invalid for height {}",
                map.height
            )));
        }
        Ok(Self { row_start, row_end, map })
    }

    pub fn row_start(&self) -> usize {
        self.row_start
    }

    pub fn row_end(&self) -> usize {
        self.row_end
    }

    pub fn row_count(&self) -> usize {
        self.row_end - self.row_start
    }

    fn raw(&self) -> &[f64] {
        self.map.row_block(self.row_start, self.row_end)
    }
}

/// Branch of the multi-scale extraction a feature came from.
///
/// For text the same three levels are used for sentence, sub-sentence and
/// word features respectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Global,
    Region,
    Patch,
}

impl Branch {
    pub fn code(self) -> u8 {
        match self {
            Branch::Global => 0,
            Branch::Region => 1,
            Branch::Patch => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Branch::Global),
            1 => Ok(Branch::Region),
            2 => Ok(Branch::Patch),
            _ => Err(Error::Format(format!("unknown branch code {code}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Region => "region",
            Branch::Patch => "patch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Branch::Global),
            "region" => Ok(Branch::Region),
            "patch" => Ok(Branch::Patch),
            _ => Err(Error::Format(format!("unknown branch name {s:?}"))),
        }
    }
}

/// Identifies one feature within a set: which branch, which stripe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScaleTag {
    pub branch: Branch,
    pub stripe_index: u16,
}

impl ScaleTag {
    pub fn new(branch: Branch, stripe_index: u16) -> Self {
        Self { branch, stripe_index }
    }

    pub fn label(&self) -> String {
        format!("{}{}", self.branch.name(), self.stripe_index)
    }
}

/// A D-dimensional feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    normalized: bool,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("feature vector must have dim > 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature vector contains non-finite values".into()));
        }
        Ok(Self { values, normalized: false })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Unit-normalizes a feature vector. The zero vector maps to itself so that
/// degenerate inputs flow through batch runs instead of aborting them.
pub fn l2_normalize(v: &FeatureVector) -> FeatureVector {
    let n = crate::mat::norm(&v.values);
    if n == 0.0 {
        return v.clone();
    }
    FeatureVector {
        values: v.values.iter().map(|x| x / n).collect(),
        normalized: true,
    }
}

/// Ordered, scale-tagged list of feature vectors for one image or caption.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    owner_id: String,
    entries: Vec<(ScaleTag, FeatureVector)>,
}

impl FeatureSet {
    pub fn new(owner_id: impl Into<String>, entries: Vec<(ScaleTag, FeatureVector)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("feature set must contain at least one entry".into()));
        }
        let dim = entries[0].1.dim();
        for (tag, v) in &entries {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "feature set mixes dims {} and {}",
                    dim,
                    v.dim()
                )));
            }
            if entries.iter().filter(|(t, _)| t == tag).count() != 1 {
                return Err(Error::InvalidInput(format!(
                    "duplicate scale tag {} in feature set",
                    tag.label()
                )));
            }
        }
        Ok(Self { owner_id: owner_id.into(), entries })
    }

    pub fn owner_id(&self) -> &str {
        &self.owner_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].1.dim()
    }

    pub fn entries(&self) -> &[(ScaleTag, FeatureVector)] {
        &self.entries
    }

    pub fn tags(&self) -> Vec<ScaleTag> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    /// Entry count per branch, in (global, region, patch) order.
    pub fn branch_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for (tag, _) in &self.entries {
            match tag.branch {
                Branch::Global => counts.0 += 1,
                Branch::Region => counts.1 += 1,
                Branch::Patch => counts.2 += 1,
            }
        }
        counts
    }

    /// First entry tagged as the global branch, if any.
    pub fn global(&self) -> Option<&FeatureVector> {
        self.entries
            .iter()
            .find(|(tag, _)| tag.branch == Branch::Global)
            .map(|(_, v)| v)
    }

    /// Restricts the set to the given branches, preserving order.
    pub fn restrict(&self, branches: &[Branch]) -> Result<FeatureSet> {
        let entries: Vec<_> = self
            .entries
            .iter()
            .filter(|(tag, _)| branches.contains(&tag.branch))
            .cloned()
            .collect();
        FeatureSet::new(self.owner_id.clone(), entries)
    }

    /// Stacks the entry vectors as matrix rows, in set order.
    pub fn matrix(&self) -> Mat {
        let rows: Vec<Vec<f64>> = self.entries.iter().map(|(_, v)| v.values().to_vec()).collect();
        Mat::from_rows(&rows).expect("feature set invariants guarantee a rectangular matrix")
    }

    /// Same tags and owner with vectors replaced by the matrix rows.
    pub fn with_matrix(&self, matrix: &Mat) -> Result<FeatureSet> {
        if matrix.rows() != self.len() || matrix.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "replacement matrix {}x{} for a set of {} vectors of dim {}",
                matrix.rows(),
                matrix.cols(),
                self.len(),
                self.dim()
            )));
        }
        let entries = self
            .entries
            .iter()
            .enumerate()
            .map(|(r, (tag, _))| Ok((*tag, FeatureVector::new(matrix.row(r).to_vec())?)))
            .collect::<Result<Vec<_>>>()?;
        FeatureSet::new(self.owner_id.clone(), entries)
    }
}

/// Equally partitions a map into `n` horizontal stripes, top to bottom.
/// When the height is not divisible by `n`, the top `height mod n` stripes
/// absorb one extra row each.
pub fn partition_stripes(map: &FeatureMap, n: usize) -> Result<Vec<StripeBlock<'_>>> {
    if n < 1 || n > map.height {
        return Err(Error::InvalidPartition(format!(
            "cannot cut height {} into {} stripes",
            map.height, n
        )));
    }
    let base = map.height / n;
    let remainder = map.height % n;
    let mut stripes = Vec::with_capacity(n);
    let mut row = 0;
    for i in 0..n {
        let rows = base + usize::from(i < remainder);
        stripes.push(StripeBlock::new(map, row, row + rows)?);
        row += rows;
    }
    Ok(stripes)
}

/// Re-concatenates stripes along the vertical axis in permuted order.
/// Output row block `k` holds `stripes[perm[k]]`.
pub fn shuffle_stripes(stripes: &[StripeBlock<'_>], perm: &[usize]) -> Result<FeatureMap> {
    if stripes.is_empty() {
        return Err(Error::InvalidInput("no stripes to shuffle".into()));
    }
    if perm.len() != stripes.len() {
        return Err(Error::InvalidPermutation(format!(
            "permutation length {} does not match {} stripes",
            perm.len(),
            stripes.len()
        )));
    }
    let mut seen = vec![false; stripes.len()];
    for &p in perm {
        if p >= stripes.len() || seen[p] {
            return Err(Error::InvalidPermutation(format!(
                "indices must cover 0..{} exactly once",
                stripes.len()
            )));
        }
        seen[p] = true;
    }
    let width = stripes[0].map.width;
    let channels = stripes[0].map.channels;
    let mut height = 0;
    for s in stripes {
        if s.map.width != width || s.map.channels != channels {
            return Err(Error::DimensionMismatch(
                "stripes must share width and channel count".into(),
            ));
        }
        height += s.row_count();
    }
    let mut data = Vec::with_capacity(height * width * channels);
    for &p in perm {
        data.extend_from_slice(stripes[p].raw());
    }
    FeatureMap::new(height, width, channels, data)
}

/// Channel-wise mean over all cells of the stripe.
pub fn pool_stripe(stripe: &StripeBlock<'_>) -> Result<FeatureVector> {
    let width = stripe.map.width;
    let channels = stripe.map.channels;
    let cells = stripe.row_count() * width;
    if cells == 0 || channels == 0 {
        return Err(Error::InvalidInput("cannot pool an empty stripe".into()));
    }
    let mut sums = vec![0.0; channels];
    for row in stripe.row_start..stripe.row_end {
        for col in 0..width {
            for (s, v) in sums.iter_mut().zip(stripe.map.cell(row, col)) {
                *s += v;
            }
        }
    }
    let inv = 1.0 / cells as f64;
    FeatureVector::new(sums.into_iter().map(|s| s * inv).collect())
}

fn pool_whole_map(map: &FeatureMap) -> Result<FeatureVector> {
    let stripe = StripeBlock::new(map, 0, map.height())
        .map_err(|_| Error::InvalidInput("cannot pool an empty feature map".into()))?;
    pool_stripe(&stripe)
}

fn striped_vectors(map: &FeatureMap, n: usize, shuffled: Option<&FeatureMap>) -> Result<Vec<FeatureVector>> {
    let source = shuffled.unwrap_or(map);
    partition_stripes(source, n)?
        .iter()
        .map(pool_stripe)
        .collect()
}

fn random_perm(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(rng);
    perm
}

/// Assembles the visual feature set: one pooled global vector, `n1` region
/// stripe vectors and `n2` patch stripe vectors, each scale-tagged.
///
/// When `shuffle_seed` is given, split&shuffle runs on the region and patch
/// maps before striping. This is a training-time measure; evaluation passes
/// `None` and keeps the identity order.
pub fn build_visual_feature_set(
    owner_id: &str,
    global_map: &FeatureMap,
    region_map: &FeatureMap,
    patch_map: &FeatureMap,
    n1: usize,
    n2: usize,
    shuffle_seed: Option<u64>,
) -> Result<FeatureSet> {
    let channels = global_map.channels();
    if region_map.channels() != channels || patch_map.channels() != channels {
        return Err(Error::DimensionMismatch(format!(
            "branch maps disagree on channels: {} / {} / {}",
            channels,
            region_map.channels(),
            patch_map.channels()
        )));
    }

    let (region_shuffled, patch_shuffled) = match shuffle_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let region_stripes = partition_stripes(region_map, n1)?;
            let region_perm = random_perm(region_stripes.len(), &mut rng);
            let shuffled_region = shuffle_stripes(&region_stripes, &region_perm)?;
            let patch_stripes = partition_stripes(patch_map, n2)?;
            let patch_perm = random_perm(patch_stripes.len(), &mut rng);
            let shuffled_patch = shuffle_stripes(&patch_stripes, &patch_perm)?;
            (Some(shuffled_region), Some(shuffled_patch))
        }
        None => (None, None),
    };

    let mut entries = Vec::with_capacity(1 + n1 + n2);
    entries.push((ScaleTag::new(Branch::Global, 0), pool_whole_map(global_map)?));
    for (i, v) in striped_vectors(region_map, n1, region_shuffled.as_ref())?.into_iter().enumerate() {
        entries.push((ScaleTag::new(Branch::Region, i as u16), v));
    }
    for (i, v) in striped_vectors(patch_map, n2, patch_shuffled.as_ref())?.into_iter().enumerate() {
        entries.push((ScaleTag::new(Branch::Patch, i as u16), v));
    }
    FeatureSet::new(owner_id, entries)
}

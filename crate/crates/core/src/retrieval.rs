//! Gallery ranking, Top-K evaluation and re-ranking by visual neighbors.
//!
//! A textual query is ranked against the gallery by the image-to-text pair
//! score. Re-ranking compares the query's nearest gallery images with each
//! gallery image's nearest images (both by global features only) and fuses
//! the Jaccard agreement of those neighbor sets with the original score.

use std::collections::{BTreeMap, BTreeSet};

use crate::attention::Scorer;
use crate::error::{Error, Result};
use crate::feature::{Branch, FeatureSet, FeatureVector, ScaleTag};
use crate::mat::cosine;

/// One gallery image: its full feature set plus the global feature used for
/// nearest-neighbor search.
#[derive(Debug, Clone)]
pub struct GalleryEntry {
    pub image_id: u32,
    pub person_id: u32,
    pub features: FeatureSet,
    pub global: FeatureVector,
}

/// The collection of candidate images searched by textual queries.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    entries: Vec<GalleryEntry>,
}

impl GalleryIndex {
    pub fn new(entries: Vec<GalleryEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidGallery("gallery must be non-empty".into()));
        }
        let dim = entries[0].global.dim();
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.image_id) {
                return Err(Error::InvalidGallery(format!("duplicate image id {}", e.image_id)));
            }
            if e.global.dim() != dim {
                return Err(Error::InvalidGallery(format!(
                    "global dims disagree: {} vs {}",
                    dim,
                    e.global.dim()
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn person_of(&self) -> BTreeMap<u32, u32> {
        self.entries.iter().map(|e| (e.image_id, e.person_id)).collect()
    }
}

/// Retrieval output for one query: image ids with non-increasing scores.
/// Ties are broken by ascending image id so rankings are reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: u32,
    items: Vec<(u32, f64)>,
}

impl RankedList {
    pub fn from_scores(query_id: u32, mut scores: Vec<(u32, f64)>) -> Result<Self> {
        if scores.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::Numeric { tensor: format!("scores of query {query_id}") });
        }
        scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut seen = BTreeSet::new();
        for (id, _) in &scores {
            if !seen.insert(*id) {
                return Err(Error::InvalidInput(format!("duplicate image id {id} in ranking")));
            }
        }
        Ok(Self { query_id, items: scores })
    }

    pub fn items(&self) -> &[(u32, f64)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Zero-based position of an image in the list.
    pub fn rank_of(&self, image_id: u32) -> Option<usize> {
        self.items.iter().position(|(id, _)| *id == image_id)
    }
}

/// The `l` nearest neighbor ids of one anchor (an image or a query).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    pub anchor_id: u32,
    members: BTreeSet<u32>,
}

impl NeighborSet {
    pub fn new(anchor_id: u32, members: BTreeSet<u32>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidInput("neighbor set must be non-empty".into()));
        }
        Ok(Self { anchor_id, members })
    }

    pub fn members(&self) -> &BTreeSet<u32> {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Accuracy table of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    query_count: usize,
    per_k: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn new(query_count: usize, per_k: Vec<(usize, f64)>) -> Result<Self> {
        let mut prev: Option<(usize, f64)> = None;
        for &(k, acc) in &per_k {
            if !(0.0..=100.0).contains(&acc) {
                return Err(Error::InvalidInput(format!("accuracy {acc} out of range at K={k}")));
            }
            if let Some((pk, pa)) = prev {
                if k <= pk || acc + 1e-9 < pa {
                    return Err(Error::InvalidInput(
                        "accuracies must be non-decreasing in K".into(),
                    ));
                }
            }
            prev = Some((k, acc));
        }
        Ok(Self { query_count, per_k })
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn per_k(&self) -> &[(usize, f64)] {
        &self.per_k
    }

    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.per_k.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a)
    }
}

/// Ranks every gallery image against a textual query by image-to-text pair
/// similarity, descending.
pub fn rank_gallery(
    query_id: u32,
    query_text: &FeatureSet,
    gallery: &GalleryIndex,
    scorer: &Scorer,
) -> Result<RankedList> {
    if gallery.is_empty() {
        return Err(Error::InvalidGallery("cannot rank an empty gallery".into()));
    }
    let mut scores = Vec::with_capacity(gallery.len());
    for entry in gallery.entries() {
        let (score, _) = scorer.score_i2t(&entry.features, query_text)?;
        scores.push((entry.image_id, score));
    }
    RankedList::from_scores(query_id, scores)
}

/// Percentage of queries whose top-K images contain the true person. K
/// values beyond the gallery size count the whole list.
pub fn topk_accuracy(
    rankings: &[RankedList],
    truth: &BTreeMap<u32, u32>,
    gallery_persons: &BTreeMap<u32, u32>,
    k: usize,
) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    if rankings.is_empty() {
        return Err(Error::InvalidInput("no rankings to evaluate".into()));
    }
    let mut hits = 0usize;
    for ranking in rankings {
        let want = truth.get(&ranking.query_id).ok_or_else(|| {
            Error::InconsistentIndex(format!("query {} missing from truth map", ranking.query_id))
        })?;
        let take = k.min(ranking.len());
        let mut hit = false;
        for (image_id, _) in &ranking.items()[..take] {
            let person = gallery_persons.get(image_id).ok_or_else(|| {
                Error::InconsistentIndex(format!("image {image_id} missing from gallery map"))
            })?;
            if person == want {
                hit = true;
                break;
            }
        }
        hits += usize::from(hit);
    }
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

fn top_l_ids(mut scored: Vec<(u32, f64)>, l: usize) -> BTreeSet<u32> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(l).map(|(id, _)| id).collect()
}

/// For every gallery image, the `l` most cosine-similar other images by
/// global feature. An image is never its own neighbor.
pub fn visual_knn(gallery: &GalleryIndex, l: usize) -> Result<BTreeMap<u32, NeighborSet>> {
    if l < 1 || l >= gallery.len() {
        return Err(Error::InvalidParameter(format!(
            "l must satisfy 1 <= l < gallery size, got l={l} for {} images",
            gallery.len()
        )));
    }
    let mut out = BTreeMap::new();
    for anchor in gallery.entries() {
        let scored: Vec<(u32, f64)> = gallery
            .entries()
            .iter()
            .filter(|e| e.image_id != anchor.image_id)
            .map(|e| (e.image_id, cosine(anchor.global.values(), e.global.values())))
            .collect();
        let members = top_l_ids(scored, l);
        out.insert(anchor.image_id, NeighborSet::new(anchor.image_id, members)?);
    }
    Ok(out)
}

fn global_only(set: &FeatureSet) -> Result<FeatureSet> {
    set.restrict(&[Branch::Global])
        .map_err(|_| Error::InvalidInput(format!("feature set {} has no global entry", set.owner_id())))
}

fn singleton_image_set(entry: &GalleryEntry) -> Result<FeatureSet> {
    FeatureSet::new(
        entry.image_id.to_string(),
        vec![(ScaleTag::new(Branch::Global, 0), entry.global.clone())],
    )
}

/// The `l` gallery images closest to a textual query, comparing only the
/// global features through the learned projections.
pub fn query_knn(
    query_id: u32,
    query_text: &FeatureSet,
    gallery: &GalleryIndex,
    l: usize,
    scorer: &Scorer,
) -> Result<NeighborSet> {
    if l < 1 || l > gallery.len() {
        return Err(Error::InvalidParameter(format!(
            "l must satisfy 1 <= l <= gallery size, got l={l} for {} images",
            gallery.len()
        )));
    }
    let text_global = global_only(query_text)?;
    let mut scored = Vec::with_capacity(gallery.len());
    for entry in gallery.entries() {
        let image_global = singleton_image_set(entry)?;
        let (score, _) = scorer.score_i2t(&image_global, &text_global)?;
        scored.push((entry.image_id, score));
    }
    NeighborSet::new(query_id, top_l_ids(scored, l))
}

/// `1 - |a intersect b| / |a union b|`.
pub fn jaccard_distance(a: &NeighborSet, b: &NeighborSet) -> Result<f64> {
    if a.members.is_empty() || b.members.is_empty() {
        return Err(Error::InvalidInput("jaccard distance of empty sets".into()));
    }
    let intersection = a.members.intersection(&b.members).count() as f64;
    let union = a.members.union(&b.members).count() as f64;
    Ok(1.0 - intersection / union)
}

/// How the original similarity and the Jaccard comparison are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RvnMode {
    /// Average the min-max normalized similarity with the Jaccard
    /// similarity `1 - D_J`, so neighbor agreement raises the score.
    #[default]
    Fused,
    /// Average the raw similarity with the Jaccard distance itself.
    Literal,
}

impl RvnMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(RvnMode::Fused),
            "literal" => Ok(RvnMode::Literal),
            _ => Err(Error::Config(format!("rvn_mode must be 'fused' or 'literal', got {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RvnMode::Fused => "fused",
            RvnMode::Literal => "literal",
        }
    }
}

/// Re-sorts an initial ranking by fusing each image's score with the
/// Jaccard agreement between the query's neighbor set and the image's.
pub fn rerank_rvn(
    initial: &RankedList,
    query_neighbors: &NeighborSet,
    image_neighbors: &BTreeMap<u32, NeighborSet>,
    l: usize,
    mode: RvnMode,
) -> Result<RankedList> {
    if query_neighbors.len() != l {
        return Err(Error::InvalidParameter(format!(
            "query neighbor set has {} members, expected l={l}",
            query_neighbors.len()
        )));
    }
    let scores: Vec<f64> = initial.items().iter().map(|(_, s)| *s).collect();
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalize = |s: f64| if max > min { (s - min) / (max - min) } else { 0.5 };

    let mut combined = Vec::with_capacity(initial.len());
    for &(image_id, score) in initial.items() {
        let neighbors = image_neighbors.get(&image_id).ok_or_else(|| {
            Error::InconsistentIndex(format!("image {image_id} has no neighbor set"))
        })?;
        if neighbors.len() != l {
            return Err(Error::InvalidParameter(format!(
                "image {image_id} neighbor set has {} members, expected l={l}",
                neighbors.len()
            )));
        }
        let dj = jaccard_distance(neighbors, query_neighbors)?;
        let fused = match mode {
            RvnMode::Fused => 0.5 * normalize(score) + 0.5 * (1.0 - dj),
            RvnMode::Literal => 0.5 * score + 0.5 * dj,
        };
        combined.push((image_id, fused));
    }
    RankedList::from_scores(initial.query_id, combined)
}

//! Loads manifest-described datasets into feature sets.

use std::path::Path;

use crate::config::{FeatureScales, RunConfig};
use crate::error::{Error, Result};
use crate::feature::{build_visual_feature_set, Branch, FeatureSet};
use crate::io::feature_files::{read_feature_map, read_feature_set};
use crate::io::manifest::{DatasetManifest, Split};

#[derive(Debug, Clone)]
pub struct ImageItem {
    pub image_id: u32,
    pub person_id: u32,
    pub features: FeatureSet,
}

#[derive(Debug, Clone)]
pub struct CaptionItem {
    pub caption_id: u32,
    pub image_id: u32,
    pub person_id: u32,
    pub features: FeatureSet,
}

#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub images: Vec<ImageItem>,
    pub captions: Vec<CaptionItem>,
}

/// Per-image shuffle stream derived from the run seed (splitmix-style mix
/// so neighboring image ids decorrelate).
pub fn shuffle_seed_for(run_seed: u64, image_id: u32) -> u64 {
    let mut z = run_seed
        .wrapping_add(super::SHUFFLE_SEED_SALT)
        .wrapping_add((image_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn restrict(set: FeatureSet, scales: FeatureScales) -> Result<FeatureSet> {
    match scales {
        FeatureScales::Full => Ok(set),
        FeatureScales::Global => set.restrict(&[Branch::Global]),
    }
}

fn check_dim(what: &str, set: &FeatureSet, dim: usize) -> Result<()> {
    if set.dim() != dim {
        return Err(Error::Config(format!(
            "{what} has feature dim {} but the config expects dim {dim}",
            set.dim()
        )));
    }
    Ok(())
}

/// Loads one split. During training the region and patch maps run through
/// split&shuffle before striping; evaluation keeps the identity order.
pub fn load_split(
    manifest: &DatasetManifest,
    base_dir: &Path,
    split: Split,
    cfg: &RunConfig,
    training: bool,
) -> Result<LoadedSplit> {
    let mut images = Vec::new();
    for record in manifest.images_in(split) {
        let global = read_feature_map(&base_dir.join(&record.global_path))?;
        let region = read_feature_map(&base_dir.join(&record.region_path))?;
        let patch = read_feature_map(&base_dir.join(&record.patch_path))?;
        let shuffle_seed = training.then(|| shuffle_seed_for(cfg.seed, record.image_id));
        let set = build_visual_feature_set(
            &record.image_id.to_string(),
            &global,
            &region,
            &patch,
            cfg.n1,
            cfg.n2,
            shuffle_seed,
        )?;
        check_dim(&format!("image {}", record.image_id), &set, cfg.dim)?;
        images.push(ImageItem {
            image_id: record.image_id,
            person_id: record.person_id,
            features: restrict(set, cfg.feature_scales)?,
        });
    }
    let mut captions = Vec::new();
    for record in manifest.captions_in(split) {
        let set = read_feature_set(
            &base_dir.join(&record.feature_path),
            &record.caption_id.to_string(),
        )?;
        check_dim(&format!("caption {}", record.caption_id), &set, cfg.dim)?;
        captions.push(CaptionItem {
            caption_id: record.caption_id,
            image_id: record.image_id,
            person_id: record.person_id,
            features: restrict(set, cfg.feature_scales)?,
        });
    }
    Ok(LoadedSplit { images, captions })
}

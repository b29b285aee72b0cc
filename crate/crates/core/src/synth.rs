//! Synthetic dataset generation with planted cross-modal identity
//! structure.
//!
//! Every identity gets one latent unit code. Visual feature maps are built
//! stripe by stripe: each stripe's cells are constant, equal to the code
//! (on branches carrying signal) plus isotropic Gaussian noise, so mean
//! pooling recovers exactly code-plus-noise. Captions get matching feature
//! sets at sentence, sub-sentence and word scales, plus a token list whose
//! comma structure reproduces the sub-sentence spans.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::feature::{Branch, FeatureMap, FeatureSet, FeatureVector, ScaleTag};
use crate::io::feature_files::{write_feature_map, write_feature_set};
use crate::io::manifest::{CaptionRecord, DatasetManifest, ImageRecord, Split};
use crate::locality::split_subsentences;

/// Which branches carry the planted identity signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchMask {
    pub global: bool,
    pub region: bool,
    pub patch: bool,
}

impl BranchMask {
    pub fn all() -> Self {
        Self { global: true, region: true, patch: true }
    }

    pub fn only(branch: Branch) -> Self {
        Self {
            global: branch == Branch::Global,
            region: branch == Branch::Region,
            patch: branch == Branch::Patch,
        }
    }

    pub fn contains(&self, branch: Branch) -> bool {
        match branch {
            Branch::Global => self.global,
            Branch::Region => self.region,
            Branch::Patch => self.patch,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::all());
        }
        let mut mask = Self { global: false, region: false, patch: false };
        for part in s.split(',') {
            match Branch::parse(part.trim()) {
                Ok(Branch::Global) => mask.global = true,
                Ok(Branch::Region) => mask.region = true,
                Ok(Branch::Patch) => mask.patch = true,
                Err(_) => {
                    return Err(Error::Config(format!(
                        "signal_scales must be 'all' or a comma list of global/region/patch, got {s:?}"
                    )))
                }
            }
        }
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.global || self.region || self.patch) {
            return Err(Error::Config("signal_scales must name at least one branch".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        if self.global && self.region && self.patch {
            return "all".to_string();
        }
        let mut parts = Vec::new();
        if self.global {
            parts.push("global");
        }
        if self.region {
            parts.push("region");
        }
        if self.patch {
            parts.push("patch");
        }
        parts.join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub identity_count: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    pub dim: usize,
    /// Region-branch stripe count for visual maps.
    pub n1: usize,
    /// Patch-branch stripe count for visual maps.
    pub n2: usize,
    /// Sub-sentence count per caption.
    pub text_regions: usize,
    /// Word count per caption.
    pub text_patches: usize,
    pub noise_sigma: f64,
    pub signal_scales: BranchMask,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("identity_count", self.identity_count),
            ("images_per_identity", self.images_per_identity),
            ("captions_per_image", self.captions_per_image),
            ("dim", self.dim),
            ("n1", self.n1),
            ("n2", self.n2),
            ("text_regions", self.text_regions),
            ("text_patches", self.text_patches),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1, got {v}")));
            }
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.text_patches < self.text_regions {
            return Err(Error::Config(format!(
                "text_patches ({}) must cover text_regions ({})",
                self.text_patches, self.text_regions
            )));
        }
        self.signal_scales.validate()
    }
}

struct Generator {
    rng: ChaCha8Rng,
    dim: usize,
    sigma: f64,
}

impl Generator {
    fn gaussian_vec(&mut self) -> Vec<f64> {
        (0..self.dim).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn unit_code(&mut self) -> Vec<f64> {
        let mut v = self.gaussian_vec();
        let n = crate::mat::norm(&v);
        if n > 0.0 {
            for x in &mut v {
                *x /= n;
            }
        } else {
            v[0] = 1.0;
        }
        v
    }

    /// One planted vector: code on signal branches plus isotropic noise.
    fn planted(&mut self, code: &[f64], carries_signal: bool) -> Vec<f64> {
        let noise = self.gaussian_vec();
        code.iter()
            .zip(&noise)
            .map(|(c, n)| if carries_signal { c + self.sigma * n } else { self.sigma * n })
            .collect()
    }
}

/// Builds a constant-per-stripe feature map whose stripe means are exactly
/// the supplied vectors.
fn striped_map(stripe_vectors: &[Vec<f64>], rows_per_stripe: usize, width: usize) -> Result<FeatureMap> {
    let channels = stripe_vectors[0].len();
    let height = stripe_vectors.len() * rows_per_stripe;
    let mut data = Vec::with_capacity(height * width * channels);
    for vector in stripe_vectors {
        for _ in 0..rows_per_stripe * width {
            data.extend_from_slice(vector);
        }
    }
    FeatureMap::new(height, width, channels, data)
}

fn split_counts(images_per_identity: usize) -> (usize, usize, usize) {
    let k = images_per_identity;
    let test = if k >= 2 { (k / 4).max(1) } else { 0 };
    let val = if k >= 4 { (k / 4).max(1) } else { 0 };
    (k - val - test, val, test)
}

fn caption_tokens(text_patches: usize, text_regions: usize) -> Vec<String> {
    // Distribute words over sub-sentences, separating groups with commas.
    let base = text_patches / text_regions;
    let extra = text_patches % text_regions;
    let mut tokens = Vec::new();
    let mut word = 0;
    for g in 0..text_regions {
        if g > 0 {
            tokens.push(",".to_string());
        }
        let count = base + usize::from(g < extra);
        for _ in 0..count {
            tokens.push(format!("w{word}"));
            word += 1;
        }
    }
    tokens
}

/// Generates the dataset files under `out_dir`: a `manifest.txt`, one
/// feature-map file per image branch and one feature-set file per caption.
/// Identical configurations produce byte-identical files.
pub fn gen_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let features_dir = out_dir.join("features");
    std::fs::create_dir_all(&features_dir)?;

    let mut gen = Generator {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        dim: cfg.dim,
        sigma: cfg.noise_sigma,
    };
    let codes: Vec<Vec<f64>> = (0..cfg.identity_count).map(|_| gen.unit_code()).collect();
    let (train, val, _test) = split_counts(cfg.images_per_identity);

    let tokens = caption_tokens(cfg.text_patches, cfg.text_regions);
    let spans = split_subsentences(&tokens)?;
    debug_assert_eq!(spans.len(), cfg.text_regions);

    let mut images = Vec::new();
    let mut captions = Vec::new();
    let mut image_id = 0u32;
    let mut caption_id = 0u32;

    for (person, code) in codes.iter().enumerate() {
        for slot in 0..cfg.images_per_identity {
            let split = if slot < train {
                Split::Train
            } else if slot < train + val {
                Split::Val
            } else {
                Split::Test
            };

            let global_vec = gen.planted(code, cfg.signal_scales.global);
            let region_vecs: Vec<Vec<f64>> =
                (0..cfg.n1).map(|_| gen.planted(code, cfg.signal_scales.region)).collect();
            let patch_vecs: Vec<Vec<f64>> =
                (0..cfg.n2).map(|_| gen.planted(code, cfg.signal_scales.patch)).collect();

            let global_map = striped_map(&[global_vec], 4, 2)?;
            let region_map = striped_map(&region_vecs, 3, 2)?;
            let patch_map = striped_map(&patch_vecs, 2, 2)?;

            let global_path = format!("features/img_{image_id}_g.nafm");
            let region_path = format!("features/img_{image_id}_r.nafm");
            let patch_path = format!("features/img_{image_id}_p.nafm");
            write_feature_map(&out_dir.join(&global_path), &global_map)?;
            write_feature_map(&out_dir.join(&region_path), &region_map)?;
            write_feature_map(&out_dir.join(&patch_path), &patch_map)?;

            images.push(ImageRecord {
                image_id,
                person_id: person as u32,
                split,
                global_path,
                region_path,
                patch_path,
            });

            for _ in 0..cfg.captions_per_image {
                let mut entries = Vec::with_capacity(1 + cfg.text_regions + cfg.text_patches);
                entries.push((
                    ScaleTag::new(Branch::Global, 0),
                    FeatureVector::new(gen.planted(code, cfg.signal_scales.global))?,
                ));
                for r in 0..cfg.text_regions {
                    entries.push((
                        ScaleTag::new(Branch::Region, r as u16),
                        FeatureVector::new(gen.planted(code, cfg.signal_scales.region))?,
                    ));
                }
                for w in 0..cfg.text_patches {
                    entries.push((
                        ScaleTag::new(Branch::Patch, w as u16),
                        FeatureVector::new(gen.planted(code, cfg.signal_scales.patch))?,
                    ));
                }
                let set = FeatureSet::new(format!("cap{caption_id}"), entries)?;
                let feature_path = format!("features/cap_{caption_id}.nafs");
                write_feature_set(&out_dir.join(&feature_path), &set)?;

                captions.push(CaptionRecord {
                    caption_id,
                    image_id,
                    person_id: person as u32,
                    feature_path,
                    tokens: tokens.clone(),
                    spans: spans.clone(),
                });
                caption_id += 1;
            }
            image_id += 1;
        }
    }

    let manifest = DatasetManifest::new(images, captions)?;
    manifest.write(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Path of the manifest written by [`gen_synthetic`].
pub fn manifest_path(data_dir: &Path) -> PathBuf {
    data_dir.join("manifest.txt")
}

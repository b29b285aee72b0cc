//! The training loop: identity-stratified batch sampling, loss and
//! gradients on the tape, Adam updates, loss logging and checkpointing.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::ProjectionParams;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::checkpoint::pack_model;
use crate::io::manifest::{DatasetManifest, Split};
use crate::io::report::render_loss_log;
use crate::mat::Mat;
use crate::objective::adam::{adam_step, AdamHyper, AdamState};
use crate::objective::{loss_and_gradients, ClassifierParams, TrainBatch};
use crate::synth::manifest_path;

use super::data::{load_split, CaptionItem, ImageItem};

/// Identity-stratified sampler: batches draw distinct identities first (a
/// shuffled cycle over all identities), then one image of the identity,
/// then one caption of that image, so every image's matched caption is in
/// the batch by construction.
struct BatchSampler {
    groups: Vec<(u32, Vec<usize>)>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(images: &[ImageItem], seed: u64) -> Result<Self> {
        let mut by_person: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (idx, item) in images.iter().enumerate() {
            by_person.entry(item.person_id).or_default().push(idx);
        }
        if by_person.is_empty() {
            return Err(Error::InvalidInput("train split has no images".into()));
        }
        let groups: Vec<(u32, Vec<usize>)> = by_person.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self { groups, order, cursor: 0, rng })
    }

    fn next_group(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let g = self.order[self.cursor];
        self.cursor += 1;
        g
    }

    fn next_batch(
        &mut self,
        batch_size: usize,
        images: &[ImageItem],
        captions_by_image: &BTreeMap<u32, Vec<usize>>,
        captions: &[CaptionItem],
    ) -> Result<Vec<(usize, usize)>> {
        let mut picks = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let group = self.next_group();
            let image_indices = &self.groups[group].1;
            let img_idx = image_indices[self.rng.gen_range(0..image_indices.len())];
            let image_id = images[img_idx].image_id;
            let cap_indices = captions_by_image.get(&image_id).ok_or_else(|| {
                Error::InvalidInput(format!("image {image_id} has no captions"))
            })?;
            let cap_idx = cap_indices[self.rng.gen_range(0..cap_indices.len())];
            debug_assert_eq!(captions[cap_idx].image_id, image_id);
            picks.push((img_idx, cap_idx));
        }
        Ok(picks)
    }
}

/// Per-item Adam slots for optionally learnable input embeddings. Each
/// item keeps its own step counter so bias correction stays exact under
/// sparse updates.
struct EmbeddingBank {
    slots: BTreeMap<(bool, u32), AdamState>,
    hyper: AdamHyper,
    lr: f64,
}

impl EmbeddingBank {
    fn update(&mut self, key: (bool, u32), features: &mut crate::feature::FeatureSet, grad: &Mat) -> Result<()> {
        let mut matrix = features.matrix();
        let state = self
            .slots
            .entry(key)
            .or_insert_with(|| AdamState::new(&[(matrix.rows(), matrix.cols())]));
        adam_step(&mut [&mut matrix], &[grad], &[self.lr], state, &self.hyper)?;
        *features = features.with_matrix(&matrix)?;
        Ok(())
    }
}

fn accumulate_grad(map: &mut BTreeMap<usize, Mat>, idx: usize, grad: &Mat) {
    match map.get_mut(&idx) {
        Some(existing) => {
            for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                *e += g;
            }
        }
        None => {
            map.insert(idx, grad.clone());
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub loss_log: Vec<(u64, f64)>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Runs the configured number of optimization steps and writes the
/// checkpoint plus a per-step loss log under the output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.validate_data_dir()?;
    let manifest = DatasetManifest::read(&manifest_path(&cfg.data_dir))?;
    let split = load_split(&manifest, &cfg.data_dir, Split::Train, cfg, true)?;
    let mut images = split.images;
    let mut captions = split.captions;
    if images.is_empty() || captions.is_empty() {
        return Err(Error::InvalidInput("train split is empty".into()));
    }
    for item in &images {
        if item.person_id as usize >= cfg.identity_count {
            return Err(Error::InvalidLabel(format!(
                "image {} has person {} outside identity_count {}",
                item.image_id, item.person_id, cfg.identity_count
            )));
        }
    }

    let mut captions_by_image: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (idx, cap) in captions.iter().enumerate() {
        captions_by_image.entry(cap.image_id).or_default().push(idx);
    }

    let mut params = ProjectionParams::seeded(cfg.dim, cfg.seed);
    let mut classifier =
        ClassifierParams::seeded(cfg.identity_count, cfg.dim, cfg.seed ^ super::CLASSIFIER_SEED_SALT);
    let dim = cfg.dim;
    let mut adam = AdamState::new(&[(dim, dim), (dim, dim), (dim, dim), (dim, dim), (cfg.identity_count, dim)]);
    let hyper = AdamHyper { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps_opt };
    let mut embeddings = cfg.train_embeddings.then(|| EmbeddingBank {
        slots: BTreeMap::new(),
        hyper,
        lr: cfg.lr_backbone,
    });

    let mut sampler = BatchSampler::new(&images, cfg.seed ^ super::SAMPLER_SEED_SALT)?;
    let temps = cfg.temperatures()?;
    let weights = cfg.loss_weights()?;
    let loss_cfg = cfg.loss_config();

    let mut loss_log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let picks = sampler.next_batch(cfg.batch_size, &images, &captions_by_image, &captions)?;
        let batch = TrainBatch::new(
            picks.iter().map(|&(i, _)| images[i].features.clone()).collect(),
            picks.iter().map(|&(_, c)| captions[c].features.clone()).collect(),
            picks.iter().map(|&(i, _)| images[i].person_id).collect(),
        )?;
        let (loss, grads) =
            loss_and_gradients(&batch, &params, &classifier, &weights, &temps, cfg.norm_axis, &loss_cfg)
                .map_err(|e| match e {
                    Error::Numeric { tensor } => {
                        Error::Numeric { tensor: format!("{tensor} at step {step}") }
                    }
                    other => other,
                })?;
        if !loss.is_finite() {
            return Err(Error::Numeric { tensor: format!("loss at step {step}") });
        }
        adam_step(
            &mut [
                &mut params.w_iq,
                &mut params.w_iv,
                &mut params.w_tk,
                &mut params.w_tv,
                &mut classifier.weights,
            ],
            &[&grads.w_iq, &grads.w_iv, &grads.w_tk, &grads.w_tv, &grads.classifier],
            &[cfg.lr_heads; 5],
            &mut adam,
            &hyper,
        )?;
        if let Some(bank) = embeddings.as_mut() {
            // A batch can repeat an item; its total gradient is the sum over
            // occurrences, applied as one update.
            let mut image_grads: BTreeMap<usize, Mat> = BTreeMap::new();
            let mut caption_grads: BTreeMap<usize, Mat> = BTreeMap::new();
            for (slot, &(img_idx, cap_idx)) in picks.iter().enumerate() {
                accumulate_grad(&mut image_grads, img_idx, &grads.image_features[slot]);
                accumulate_grad(&mut caption_grads, cap_idx, &grads.text_features[slot]);
            }
            for (img_idx, grad) in image_grads {
                let image_id = images[img_idx].image_id;
                bank.update((true, image_id), &mut images[img_idx].features, &grad)?;
            }
            for (cap_idx, grad) in caption_grads {
                let caption_id = captions[cap_idx].caption_id;
                bank.update((false, caption_id), &mut captions[cap_idx].features, &grad)?;
            }
        }
        loss_log.push((step, loss));
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    let checkpoint_path = cfg.out_dir.join("checkpoint.nafc");
    pack_model(&params, &classifier, &adam, cfg.digest())?.write(&checkpoint_path)?;
    let log_path = cfg.out_dir.join("train_log.tsv");
    std::fs::write(&log_path, render_loss_log(&loss_log))?;
    Ok(TrainOutcome { loss_log, checkpoint_path, log_path })
}

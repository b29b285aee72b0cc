//! Evaluation: gallery construction from the test split, per-query ranking
//! (parallel, deterministic merge), Top-K accuracy, optional re-ranking by
//! visual neighbors, and attention dumps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attention::Scorer;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::checkpoint::{unpack_model, Checkpoint};
use crate::io::manifest::{DatasetManifest, Split};
use crate::io::report::{
    export_attention, render_eval_report, write_attention_records, write_rankings, AttentionRecord,
};
use crate::retrieval::{
    query_knn, rank_gallery, rerank_rvn, topk_accuracy, visual_knn, EvalReport, GalleryEntry,
    GalleryIndex, NeighborSet, RankedList,
};
use crate::synth::manifest_path;

use super::data::{load_split, CaptionItem, LoadedSplit};

pub const TOP_K: [usize; 3] = [1, 5, 10];

#[derive(Debug)]
pub struct EvalOutcome {
    pub initial: EvalReport,
    pub reranked: Option<EvalReport>,
    pub report_path: PathBuf,
    pub rankings_path: PathBuf,
    pub rvn_rankings_path: Option<PathBuf>,
    pub attention_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RankOutcome {
    pub rankings_path: PathBuf,
    pub rvn_rankings_path: Option<PathBuf>,
}

fn load_eval_side(cfg: &RunConfig, checkpoint_path: &Path) -> Result<(Scorer, GalleryIndex, Vec<CaptionItem>)> {
    cfg.validate()?;
    cfg.validate_data_dir()?;
    let checkpoint = Checkpoint::read(checkpoint_path)?;
    let (params, _classifier, _adam) = unpack_model(&checkpoint)?;
    if params.dim() != cfg.dim {
        return Err(Error::CheckpointIncompatible(format!(
            "checkpoint dim {} does not match config dim {}",
            params.dim(),
            cfg.dim
        )));
    }
    let manifest = DatasetManifest::read(&manifest_path(&cfg.data_dir))?;
    let LoadedSplit { images, captions } =
        load_split(&manifest, &cfg.data_dir, Split::Test, cfg, false)?;
    if captions.is_empty() {
        return Err(Error::InvalidInput("test split has no captions".into()));
    }
    let entries = images
        .into_iter()
        .map(|item| {
            let global = item.features.global().cloned().ok_or_else(|| {
                Error::InvalidInput(format!("image {} has no global feature", item.image_id))
            })?;
            Ok(GalleryEntry {
                image_id: item.image_id,
                person_id: item.person_id,
                features: item.features,
                global,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gallery = GalleryIndex::new(entries)?;
    let scorer = super::scorer_from(cfg, params)?;
    Ok((scorer, gallery, captions))
}

fn compute_rankings(
    gallery: &GalleryIndex,
    captions: &[CaptionItem],
    scorer: &Scorer,
) -> Result<Vec<RankedList>> {
    captions
        .par_iter()
        .map(|cap| rank_gallery(cap.caption_id, &cap.features, gallery, scorer))
        .collect()
}

fn compute_rvn_rankings(
    cfg: &RunConfig,
    gallery: &GalleryIndex,
    captions: &[CaptionItem],
    scorer: &Scorer,
    initial: &[RankedList],
) -> Result<Vec<RankedList>> {
    let l = cfg.rvn_l;
    let image_neighbors = visual_knn(gallery, l)?;
    captions
        .par_iter()
        .zip(initial.par_iter())
        .map(|(cap, ranking)| {
            let query_neighbors: NeighborSet =
                query_knn(cap.caption_id, &cap.features, gallery, l, scorer)?;
            rerank_rvn(ranking, &query_neighbors, &image_neighbors, l, cfg.rvn_mode)
        })
        .collect()
}

fn accuracy_report(
    rankings: &[RankedList],
    truth: &BTreeMap<u32, u32>,
    gallery_persons: &BTreeMap<u32, u32>,
) -> Result<EvalReport> {
    let mut per_k = Vec::with_capacity(TOP_K.len());
    for k in TOP_K {
        per_k.push((k, topk_accuracy(rankings, truth, gallery_persons, k)?));
    }
    EvalReport::new(rankings.len(), per_k)
}

fn attention_dump(
    gallery: &GalleryIndex,
    captions: &[CaptionItem],
    rankings: &[RankedList],
    scorer: &Scorer,
) -> Result<Vec<AttentionRecord>> {
    let mut records = Vec::with_capacity(captions.len() * 2);
    for (cap, ranking) in captions.iter().zip(rankings) {
        let top_image = ranking.items()[0].0;
        let entry = gallery
            .entries()
            .iter()
            .find(|e| e.image_id == top_image)
            .ok_or_else(|| Error::InconsistentIndex(format!("image {top_image} not in gallery")))?;
        let (_, fwd) = scorer.score_i2t(&entry.features, &cap.features)?;
        let (_, bwd) = scorer.score_t2i(&cap.features, &entry.features)?;
        records.push(export_attention(&fwd, top_image, cap.caption_id));
        records.push(export_attention(&bwd, top_image, cap.caption_id));
    }
    Ok(records)
}

/// Ranks every test caption against the test gallery and reports Top-K
/// accuracy, with the re-ranked variant alongside when enabled.
pub fn evaluate(cfg: &RunConfig, checkpoint_path: &Path) -> Result<EvalOutcome> {
    let (scorer, gallery, captions) = load_eval_side(cfg, checkpoint_path)?;
    let truth: BTreeMap<u32, u32> = captions.iter().map(|c| (c.caption_id, c.person_id)).collect();
    let gallery_persons = gallery.person_of();

    let rankings = compute_rankings(&gallery, &captions, &scorer)?;
    let initial = accuracy_report(&rankings, &truth, &gallery_persons)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let rankings_path = cfg.out_dir.join("rankings.tsv");
    write_rankings(&rankings_path, &rankings)?;

    let mut report_text = render_eval_report("initial", &initial);
    let mut reranked = None;
    let mut rvn_rankings_path = None;
    if cfg.rerank {
        let rvn = compute_rvn_rankings(cfg, &gallery, &captions, &scorer, &rankings)?;
        let report = accuracy_report(&rvn, &truth, &gallery_persons)?;
        report_text.push_str(&render_eval_report("rvn", &report));
        let path = cfg.out_dir.join("rankings_rvn.tsv");
        write_rankings(&path, &rvn)?;
        rvn_rankings_path = Some(path);
        reranked = Some(report);
    }
    let report_path = cfg.out_dir.join("eval_report.txt");
    std::fs::write(&report_path, &report_text)?;

    let mut attention_path = None;
    if cfg.dump_attn {
        let records = attention_dump(&gallery, &captions, &rankings, &scorer)?;
        let path = cfg.out_dir.join("attention.txt");
        write_attention_records(&path, &records)?;
        attention_path = Some(path);
    }

    Ok(EvalOutcome {
        initial,
        reranked,
        report_path,
        rankings_path,
        rvn_rankings_path,
        attention_path,
    })
}

/// Writes rankings (and re-ranked rankings when requested) without
/// computing accuracy tables.
pub fn rank(cfg: &RunConfig, checkpoint_path: &Path, with_rvn: bool) -> Result<RankOutcome> {
    let (scorer, gallery, captions) = load_eval_side(cfg, checkpoint_path)?;
    let rankings = compute_rankings(&gallery, &captions, &scorer)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let rankings_path = cfg.out_dir.join("rankings.tsv");
    write_rankings(&rankings_path, &rankings)?;
    let mut rvn_rankings_path = None;
    if with_rvn {
        let rvn = compute_rvn_rankings(cfg, &gallery, &captions, &scorer, &rankings)?;
        let path = cfg.out_dir.join("rankings_rvn.tsv");
        write_rankings(&path, &rvn)?;
        rvn_rankings_path = Some(path);
    }
    Ok(RankOutcome { rankings_path, rvn_rankings_path })
}

/// Exports the attention matrices of one caption against one image (the
/// caption's top-1 image when none is given).
pub fn export_attention_for(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    caption_id: u32,
    image_id: Option<u32>,
) -> Result<PathBuf> {
    let (scorer, gallery, captions) = load_eval_side(cfg, checkpoint_path)?;
    let caption = captions
        .iter()
        .find(|c| c.caption_id == caption_id)
        .ok_or_else(|| Error::InvalidInput(format!("caption {caption_id} not in test split")))?;
    let target = match image_id {
        Some(id) => id,
        None => rank_gallery(caption_id, &caption.features, &gallery, &scorer)?.items()[0].0,
    };
    let entry = gallery
        .entries()
        .iter()
        .find(|e| e.image_id == target)
        .ok_or_else(|| Error::InvalidInput(format!("image {target} not in test gallery")))?;
    let (_, fwd) = scorer.score_i2t(&entry.features, &caption.features)?;
    let (_, bwd) = scorer.score_t2i(&caption.features, &entry.features)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("attention.txt");
    write_attention_records(
        &path,
        &[
            export_attention(&fwd, target, caption_id),
            export_attention(&bwd, target, caption_id),
        ],
    )?;
    Ok(path)
}

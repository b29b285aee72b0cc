//! Dataset manifest: a line-delimited text index of images and captions.
//!
//! Image lines bind an image id to its person, split and the three branch
//! feature-map files. Caption lines bind a caption id to its image, the
//! caption's feature-set file, the token list and the sub-sentence spans.
//! Fields are tab-separated; tokens are space-separated within their field;
//! spans are `start-end` pairs joined by commas.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::locality::Span;

pub const HEADER: &str = "# nafs-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u32,
    pub person_id: u32,
    pub split: Split,
    pub global_path: String,
    pub region_path: String,
    pub patch_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub caption_id: u32,
    pub image_id: u32,
    pub person_id: u32,
    pub feature_path: String,
    pub tokens: Vec<String>,
    pub spans: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
}

impl DatasetManifest {
    pub fn new(images: Vec<ImageRecord>, captions: Vec<CaptionRecord>) -> Result<Self> {
        let manifest = Self { images, captions };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut image_persons: BTreeMap<u32, u32> = BTreeMap::new();
        for img in &self.images {
            if image_persons.insert(img.image_id, img.person_id).is_some() {
                return Err(Error::Format(format!("duplicate image id {}", img.image_id)));
            }
        }
        let mut caption_ids = std::collections::BTreeSet::new();
        for cap in &self.captions {
            if !caption_ids.insert(cap.caption_id) {
                return Err(Error::Format(format!("duplicate caption id {}", cap.caption_id)));
            }
            match image_persons.get(&cap.image_id) {
                None => {
                    return Err(Error::Format(format!(
                        "caption {} references missing image {}",
                        cap.caption_id, cap.image_id
                    )))
                }
                Some(&person) if person != cap.person_id => {
                    return Err(Error::Format(format!(
                        "caption {} person {} disagrees with image {} person {person}",
                        cap.caption_id, cap.person_id, cap.image_id
                    )))
                }
                _ => {}
            }
            if cap.tokens.is_empty() {
                return Err(Error::Format(format!("caption {} has no tokens", cap.caption_id)));
            }
            for tok in &cap.tokens {
                if tok.is_empty() || tok.chars().any(|c| c.is_whitespace()) {
                    return Err(Error::Format(format!(
                        "caption {} token {tok:?} is empty or contains whitespace",
                        cap.caption_id
                    )));
                }
            }
            for span in &cap.spans {
                span.validate(cap.tokens.len())?;
            }
        }
        Ok(())
    }

    pub fn images_in(&self, split: Split) -> Vec<&ImageRecord> {
        self.images.iter().filter(|i| i.split == split).collect()
    }

    /// Captions whose image belongs to the split.
    pub fn captions_in(&self, split: Split) -> Vec<&CaptionRecord> {
        let ids: std::collections::BTreeSet<u32> =
            self.images_in(split).iter().map(|i| i.image_id).collect();
        self.captions.iter().filter(|c| ids.contains(&c.image_id)).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for img in &self.images {
            out.push_str(&format!(
                "image\t{}\t{}\t{}\t{}\t{}\t{}\n",
                img.image_id,
                img.person_id,
                img.split.name(),
                img.global_path,
                img.region_path,
                img.patch_path
            ));
        }
        for cap in &self.captions {
            let tokens = cap.tokens.join(" ");
            let spans = cap
                .spans
                .iter()
                .map(|s| format!("{}-{}", s.start, s.end))
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&format!(
                "caption\t{}\t{}\t{}\t{}\t{}\t{}\n",
                cap.caption_id, cap.image_id, cap.person_id, cap.feature_path, tokens, spans
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(line) if line == HEADER => {}
            other => {
                return Err(Error::Format(format!(
                    "manifest must start with {HEADER:?}, found {other:?}"
                )))
            }
        }
        let mut images = Vec::new();
        let mut captions = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let ctx = |msg: String| Error::Format(format!("manifest line {}: {msg}", lineno + 2));
            let parse_u32 = |s: &str, what: &str| -> Result<u32> {
                s.parse::<u32>().map_err(|_| ctx(format!("bad {what} {s:?}")))
            };
            match fields.first().copied() {
                Some("image") => {
                    if fields.len() != 7 {
                        return Err(ctx(format!("image record needs 7 fields, found {}", fields.len())));
                    }
                    images.push(ImageRecord {
                        image_id: parse_u32(fields[1], "image id")?,
                        person_id: parse_u32(fields[2], "person id")?,
                        split: Split::parse(fields[3])?,
                        global_path: fields[4].to_string(),
                        region_path: fields[5].to_string(),
                        patch_path: fields[6].to_string(),
                    });
                }
                Some("caption") => {
                    if fields.len() != 7 {
                        return Err(ctx(format!(
                            "caption record needs 7 fields, found {}",
                            fields.len()
                        )));
                    }
                    let tokens: Vec<String> =
                        fields[5].split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
                    let mut spans = Vec::new();
                    if !fields[6].is_empty() {
                        for pair in fields[6].split(',') {
                            let (start, end) = pair
                                .split_once('-')
                                .ok_or_else(|| ctx(format!("bad span {pair:?}")))?;
                            spans.push(Span::new(
                                start.parse().map_err(|_| ctx(format!("bad span start {start:?}")))?,
                                end.parse().map_err(|_| ctx(format!("bad span end {end:?}")))?,
                            ));
                        }
                    }
                    captions.push(CaptionRecord {
                        caption_id: parse_u32(fields[1], "caption id")?,
                        image_id: parse_u32(fields[2], "image id")?,
                        person_id: parse_u32(fields[3], "person id")?,
                        feature_path: fields[4].to_string(),
                        tokens,
                        spans,
                    });
                }
                other => return Err(ctx(format!("unknown record kind {other:?}"))),
            }
        }
        Self::new(images, captions)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

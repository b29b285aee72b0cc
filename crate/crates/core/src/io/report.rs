//! Text outputs: attention records, ranking files, accuracy tables and
//! training loss logs. Floats are text-encoded with nine significant
//! digits; a parsed record re-serializes to identical bytes.

use std::fs;
use std::path::Path;

use crate::attention::{AttentionState, Direction};
use crate::error::{Error, Result};
use crate::feature::{Branch, ScaleTag};
use crate::mat::Mat;
use crate::retrieval::{EvalReport, RankedList};

/// Nine significant digits: one leading digit plus eight decimals.
pub fn format_sig(v: f64) -> String {
    format!("{v:.8e}")
}

/// Self-contained record of one scored pair's attention matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub image_id: u32,
    pub caption_id: u32,
    pub direction: Direction,
    pub query_tags: Vec<ScaleTag>,
    pub key_tags: Vec<ScaleTag>,
    pub s: Mat,
    pub s_hat: Mat,
    pub s_tilde: Mat,
    pub alpha: Mat,
}

/// Builds the exportable record for one retained attention state.
pub fn export_attention(state: &AttentionState, image_id: u32, caption_id: u32) -> AttentionRecord {
    AttentionRecord {
        image_id,
        caption_id,
        direction: state.direction,
        query_tags: state.query_tags.clone(),
        key_tags: state.key_tags.clone(),
        s: state.s.clone(),
        s_hat: state.s_hat.clone(),
        s_tilde: state.s_tilde.clone(),
        alpha: state.alpha.clone(),
    }
}

fn tags_field(tags: &[ScaleTag]) -> String {
    tags.iter().map(|t| t.label()).collect::<Vec<_>>().join(",")
}

fn parse_tag(s: &str) -> Result<ScaleTag> {
    let digits_at = s
        .find(|c: char| c.is_ascii_digit())
        .ok_or_else(|| Error::Format(format!("scale tag {s:?} has no index")))?;
    let branch = Branch::parse(&s[..digits_at])?;
    let index: u16 = s[digits_at..]
        .parse()
        .map_err(|_| Error::Format(format!("bad stripe index in tag {s:?}")))?;
    Ok(ScaleTag::new(branch, index))
}

fn mat_field(m: &Mat) -> String {
    m.data().iter().map(|v| format_sig(*v)).collect::<Vec<_>>().join(",")
}

fn parse_mat(field: &str, rows: usize, cols: usize) -> Result<Mat> {
    let data: Vec<f64> = field
        .split(',')
        .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("bad float {s:?}"))))
        .collect::<Result<_>>()?;
    if data.len() != rows * cols {
        return Err(Error::Format(format!(
            "expected {} floats for a {rows}x{cols} matrix, found {}",
            rows * cols,
            data.len()
        )));
    }
    Mat::from_vec(rows, cols, data)
}

impl AttentionRecord {
    pub fn to_line(&self) -> String {
        format!(
            "attn\timage={}\tcaption={}\tdir={}\trows={}\tcols={}\tqtags={}\tktags={}\ts={}\ts_hat={}\ts_tilde={}\talpha={}",
            self.image_id,
            self.caption_id,
            self.direction.name(),
            self.s.rows(),
            self.s.cols(),
            tags_field(&self.query_tags),
            tags_field(&self.key_tags),
            mat_field(&self.s),
            mat_field(&self.s_hat),
            mat_field(&self.s_tilde),
            mat_field(&self.alpha),
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 12 || fields[0] != "attn" {
            return Err(Error::Format("attention record needs 12 tab-separated fields".into()));
        }
        let field = |idx: usize, key: &str| -> Result<&str> {
            fields[idx]
                .strip_prefix(&format!("{key}="))
                .ok_or_else(|| Error::Format(format!("field {idx} must start with {key}=")))
        };
        let image_id: u32 = field(1, "image")?
            .parse()
            .map_err(|_| Error::Format("bad image id".into()))?;
        let caption_id: u32 = field(2, "caption")?
            .parse()
            .map_err(|_| Error::Format("bad caption id".into()))?;
        let direction = Direction::parse(field(3, "dir")?)?;
        let rows: usize = field(4, "rows")?.parse().map_err(|_| Error::Format("bad rows".into()))?;
        let cols: usize = field(5, "cols")?.parse().map_err(|_| Error::Format("bad cols".into()))?;
        let parse_tags = |s: &str| -> Result<Vec<ScaleTag>> {
            s.split(',').map(parse_tag).collect()
        };
        let query_tags = parse_tags(field(6, "qtags")?)?;
        let key_tags = parse_tags(field(7, "ktags")?)?;
        if query_tags.len() != rows || key_tags.len() != cols {
            return Err(Error::Format(format!(
                "tag counts {}x{} disagree with shape {rows}x{cols}",
                query_tags.len(),
                key_tags.len()
            )));
        }
        Ok(Self {
            image_id,
            caption_id,
            direction,
            query_tags,
            key_tags,
            s: parse_mat(field(8, "s")?, rows, cols)?,
            s_hat: parse_mat(field(9, "s_hat")?, rows, cols)?,
            s_tilde: parse_mat(field(10, "s_tilde")?, rows, cols)?,
            alpha: parse_mat(field(11, "alpha")?, rows, cols)?,
        })
    }
}

pub fn render_attention_records(records: &[AttentionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_attention_records(text: &str) -> Result<Vec<AttentionRecord>> {
    text.lines().filter(|l| !l.is_empty()).map(AttentionRecord::from_line).collect()
}

pub fn write_attention_records(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    fs::write(path, render_attention_records(records))?;
    Ok(())
}

/// Ranking lines: `query_id  rank  image_id  score`, tab-separated, rank
/// starting at 1.
pub fn render_rankings(rankings: &[RankedList]) -> String {
    let mut out = String::new();
    for ranking in rankings {
        for (rank, (image_id, score)) in ranking.items().iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                ranking.query_id,
                rank + 1,
                image_id,
                format_sig(*score)
            ));
        }
    }
    out
}

pub fn parse_rankings(text: &str) -> Result<Vec<RankedList>> {
    let mut per_query: Vec<(u32, Vec<(u32, f64)>)> = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!("ranking line needs 4 fields: {line:?}")));
        }
        let query: u32 = fields[0].parse().map_err(|_| Error::Format("bad query id".into()))?;
        let image: u32 = fields[2].parse().map_err(|_| Error::Format("bad image id".into()))?;
        let score: f64 = fields[3].parse().map_err(|_| Error::Format("bad score".into()))?;
        match per_query.last_mut() {
            Some((q, items)) if *q == query => items.push((image, score)),
            _ => per_query.push((query, vec![(image, score)])),
        }
    }
    per_query
        .into_iter()
        .map(|(q, items)| RankedList::from_scores(q, items))
        .collect()
}

pub fn write_rankings(path: &Path, rankings: &[RankedList]) -> Result<()> {
    fs::write(path, render_rankings(rankings))?;
    Ok(())
}

/// Accuracy table with a label line, query count, and one `K accuracy` row
/// per requested K.
pub fn render_eval_report(label: &str, report: &EvalReport) -> String {
    let mut out = format!("label: {label}\nqueries: {}\nK\taccuracy\n", report.query_count());
    for (k, acc) in report.per_k() {
        out.push_str(&format!("{k}\t{acc:.2}\n"));
    }
    out
}

pub fn render_loss_log(entries: &[(u64, f64)]) -> String {
    let mut out = String::from("step\tloss\n");
    for (step, loss) in entries {
        out.push_str(&format!("{step}\t{}\n", format_sig(*loss)));
    }
    out
}

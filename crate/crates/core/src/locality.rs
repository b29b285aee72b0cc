//! Sub-sentence spans and locality-constrained attention.
//!
//! Captions are split at comma tokens into sub-sentence spans. A span's
//! representation is produced by attending a caller-supplied query vector
//! (the classification-token analog) over the token key/value embeddings,
//! with the softmax restricted to the tokens inside the span.

use crate::error::{Error, Result};
use crate::feature::{Branch, FeatureSet, FeatureVector, ScaleTag};
use crate::mat::dot;

pub const COMMA_TOKEN: &str = ",";

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn validate(&self, token_count: usize) -> Result<()> {
        if self.start >= self.end || self.end > token_count {
            return Err(Error::InvalidSpan(format!(
                "span [{}, {}) invalid for {} tokens",
                self.start, self.end, token_count
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// A tokenized caption together with its sub-sentence spans.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Vec<String>,
    spans: Vec<Span>,
}

impl TokenSequence {
    /// Validates that spans are ordered, disjoint and in range.
    pub fn new(tokens: Vec<String>, spans: Vec<Span>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("token sequence must be non-empty".into()));
        }
        let mut last_end = 0;
        for span in &spans {
            span.validate(tokens.len())?;
            if span.start < last_end {
                return Err(Error::InvalidSpan(format!(
                    "span [{}, {}) overlaps or is out of order",
                    span.start, span.end
                )));
            }
            last_end = span.end;
        }
        Ok(Self { tokens, spans })
    }

    /// Tokenizes and derives spans in one step.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let spans = split_subsentences(&tokens)?;
        Self::new(tokens, spans)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }
}

/// Splits a token list at comma tokens into sub-sentence spans. Commas are
/// excluded from the spans and empty spans (consecutive commas, leading or
/// trailing commas) are dropped.
pub fn split_subsentences(tokens: &[String]) -> Result<Vec<Span>> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty token list".into()));
    }
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, tok) in tokens.iter().enumerate() {
        if tok == COMMA_TOKEN {
            if i > start {
                spans.push(Span::new(start, i));
            }
            start = i + 1;
        }
    }
    if tokens.len() > start {
        spans.push(Span::new(start, tokens.len()));
    }
    Ok(spans)
}

/// Boolean attention mask: one row per span, one column per token.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl LocalityMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }
}

/// Builds the mask whose row `r` allows exactly the tokens of span `r`.
pub fn build_locality_mask(spans: &[Span], token_count: usize) -> Result<LocalityMask> {
    let mut allowed = vec![false; spans.len() * token_count];
    for (r, span) in spans.iter().enumerate() {
        span.validate(token_count)?;
        for c in span.start..span.end {
            allowed[r * token_count + c] = true;
        }
    }
    Ok(LocalityMask { rows: spans.len(), cols: token_count, allowed })
}

/// Softmax attention restricted to the allowed token set.
///
/// Output is `sum_{i in U} softmax_U(q . k_i) v_i`. With `scaled` the logits
/// are divided by `sqrt(dim)`; the default leaves raw dot products.
pub fn masked_attention(
    query: &[f64],
    keys: &[FeatureVector],
    values: &[FeatureVector],
    allowed: &[bool],
    scaled: bool,
) -> Result<FeatureVector> {
    if keys.len() != values.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} keys vs {} values",
            keys.len(),
            values.len()
        )));
    }
    if allowed.len() != keys.len() {
        return Err(Error::DimensionMismatch(format!(
            "mask row length {} does not match {} keys",
            allowed.len(),
            keys.len()
        )));
    }
    let active: Vec<usize> = (0..keys.len()).filter(|&i| allowed[i]).collect();
    if active.is_empty() {
        return Err(Error::EmptyContext);
    }
    let scale = if scaled { 1.0 / (query.len() as f64).sqrt() } else { 1.0 };
    let mut logits = Vec::with_capacity(active.len());
    for &i in &active {
        if keys[i].dim() != query.len() {
            return Err(Error::DimensionMismatch(format!(
                "query dim {} vs key dim {}",
                query.len(),
                keys[i].dim()
            )));
        }
        logits.push(dot(query, keys[i].values()) * scale);
    }
    let weights = crate::mat::softmax(&logits);
    let dim = values[active[0]].dim();
    let mut out = vec![0.0; dim];
    for (w, &i) in weights.iter().zip(&active) {
        if values[i].dim() != dim {
            return Err(Error::DimensionMismatch("value dims disagree".into()));
        }
        for (o, v) in out.iter_mut().zip(values[i].values()) {
            *o += w * v;
        }
    }
    FeatureVector::new(out)
}

/// Builds a textual feature set from token embeddings: one sentence-level
/// vector (query attends over every token), one vector per sub-sentence span
/// (query attends within the span), and the value embedding of every
/// non-comma token at word level.
pub fn build_textual_feature_set(
    owner_id: &str,
    sentence_query: &[f64],
    keys: &[FeatureVector],
    values: &[FeatureVector],
    sequence: &TokenSequence,
) -> Result<FeatureSet> {
    if keys.len() != sequence.tokens().len() {
        return Err(Error::DimensionMismatch(format!(
            "{} key embeddings for {} tokens",
            keys.len(),
            sequence.tokens().len()
        )));
    }
    let full_mask = vec![true; keys.len()];
    let mut entries = Vec::new();
    entries.push((
        ScaleTag::new(Branch::Global, 0),
        masked_attention(sentence_query, keys, values, &full_mask, false)?,
    ));
    let mask = build_locality_mask(sequence.spans(), keys.len())?;
    for (i, _) in sequence.spans().iter().enumerate() {
        entries.push((
            ScaleTag::new(Branch::Region, i as u16),
            masked_attention(sentence_query, keys, values, mask.row(i), false)?,
        ));
    }
    let mut word_idx = 0u16;
    for (i, tok) in sequence.tokens().iter().enumerate() {
        if tok != COMMA_TOKEN {
            entries.push((ScaleTag::new(Branch::Patch, word_idx), values[i].clone()));
            word_idx += 1;
        }
    }
    FeatureSet::new(owner_id, entries)
}

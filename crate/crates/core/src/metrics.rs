//! Leaf scores: raw IoU for grounding, normalized exact match for VQA.

use thiserror::Error;

use crate::model::{AnswerValue, BoxCoords, BoxError, MetricKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("invalid box: {0}")]
    InvalidBox(#[from] BoxError),
    #[error("{kind:?} cannot score a {variant} answer")]
    VariantMismatch { kind: MetricKind, variant: &'static str },
}

/// Intersection over union. Two zero-area boxes score 0.
pub fn iou(a: &BoxCoords, b: &BoxCoords) -> Result<f64, MetricError> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, trim, collapse whitespace, strip terminal punctuation and one
/// leading article.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    let stripped = collapsed.trim_end_matches(|c: char| c.is_ascii_punctuation() && c != ')' && c != ']');
    let mut words: Vec<&str> = stripped.split(' ').filter(|w| !w.is_empty()).collect();
    if words.len() > 1 && ARTICLES.contains(&words[0]) {
        words.remove(0);
    }
    words.join(" ")
}

pub fn vqa_accuracy(pred: &str, gold: &str) -> f64 {
    if normalize_answer(pred) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

fn variant(a: &AnswerValue) -> &'static str {
    match a {
        AnswerValue::Text(_) => "text",
        AnswerValue::Box(_) => "box",
    }
}

/// Leaf score in [0, 1] for `pred` against `gold` under `kind`.
pub fn score(kind: MetricKind, pred: &AnswerValue, gold: &AnswerValue) -> Result<f64, MetricError> {
    match (kind, pred, gold) {
        (MetricKind::VqaAccuracy, AnswerValue::Text(p), AnswerValue::Text(g)) => Ok(vqa_accuracy(p, g)),
        (MetricKind::GroundingIou, AnswerValue::Box(p), AnswerValue::Box(g)) => iou(p, g),
        (kind, p, g) => {
            let offending = if kind.accepts(p) { g } else { p };
            Err(MetricError::VariantMismatch { kind, variant: variant(offending) })
        }
    }
}

/// Thresholded grounding hit, used only for hit-rate reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitRate {
    pub iou_threshold: f64,
}

impl Default for HitRate {
    fn default() -> Self {
        HitRate { iou_threshold: 0.5 }
    }
}

impl HitRate {
    pub fn hit(&self, iou_value: f64) -> bool {
        iou_value >= self.iou_threshold
    }
}

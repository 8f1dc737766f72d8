//! Task descriptions and the answer space.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scoring rule for a task; also fixes which [`AnswerValue`] variant is expected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    VqaAccuracy,
    GroundingIou,
}

impl MetricKind {
    pub fn accepts(self, answer: &AnswerValue) -> bool {
        matches!(
            (self, answer),
            (MetricKind::VqaAccuracy, AnswerValue::Text(_)) | (MetricKind::GroundingIou, AnswerValue::Box(_))
        )
    }
}

/// One image-query instance. `image_ref` is an opaque handle; the engine never
/// decodes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub title: String,
    pub description: String,
    pub query: String,
    pub image_ref: String,
    pub metric_kind: MetricKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BoxError {
    #[error("box coordinates must be finite and non-negative")]
    OutOfRange,
    #[error("box corners are inverted (x1 <= x2 and y1 <= y2 required)")]
    Inverted,
    #[error("cannot parse a box from {0:?}")]
    Unparseable(String),
}

/// Axis-aligned box in absolute pixels, corner form.
///
/// Deserialization does not validate; call [`BoxCoords::validate`] before use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxCoords {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoxCoords {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        BoxCoords { x1, y1, x2, y2 }
    }
}

impl From<BoxCoords> for [f64; 4] {
    fn from(b: BoxCoords) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoxCoords {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        let b = BoxCoords { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), BoxError> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(BoxError::OutOfRange);
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(BoxError::Inverted);
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Parses the first `ImagePatch(x1, y1, x2, y2)`, `[x1, y1, x2, y2]` or
    /// `(x1, y1, x2, y2)` group in `text`. Trailing annotations such as
    /// `, patch name: clock_1` are ignored. The result is validated.
    pub fn parse(text: &str) -> Result<Self, BoxError> {
        let unparseable = || BoxError::Unparseable(text.to_string());
        let body = if let Some(pos) = text.find("ImagePatch(") {
            let rest = &text[pos + "ImagePatch(".len()..];
            &rest[..rest.find(')').ok_or_else(unparseable)?]
        } else {
            let trimmed = text.trim();
            let (open, close) = match trimmed.chars().next() {
                Some('[') => ('[', ']'),
                Some('(') => ('(', ')'),
                _ => return Err(unparseable()),
            };
            let inner = trimmed.strip_prefix(open).ok_or_else(unparseable)?;
            &inner[..inner.find(close).ok_or_else(unparseable)?]
        };
        let nums: Vec<f64> = body
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| unparseable())?;
        match nums.as_slice() {
            [x1, y1, x2, y2] => BoxCoords::new(*x1, *y1, *x2, *y2),
            _ => Err(unparseable()),
        }
    }
}

impl fmt::Display for BoxCoords {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImagePatch({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

/// An element of the output space: free text (VQA) or a box (grounding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerValue {
    Text(String),
    Box(BoxCoords),
}

impl AnswerValue {
    pub fn text(s: impl Into<String>) -> Self {
        AnswerValue::Text(s.into().trim().to_string())
    }

    pub fn validate(&self) -> Result<(), BoxError> {
        match self {
            AnswerValue::Text(_) => Ok(()),
            AnswerValue::Box(b) => b.validate(),
        }
    }

    /// Interprets a rendered `final_answer` value for a task of the given kind.
    pub fn from_rendered(kind: MetricKind, rendered: &str) -> Result<Self, BoxError> {
        match kind {
            MetricKind::VqaAccuracy => Ok(AnswerValue::text(strip_quotes(rendered.trim()))),
            MetricKind::GroundingIou => BoxCoords::parse(rendered).map(AnswerValue::Box),
        }
    }
}

impl fmt::Display for AnswerValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerValue::Text(t) => f.write_str(t),
            AnswerValue::Box(b) => b.fmt(f),
        }
    }
}

fn strip_quotes(s: &str) -> &str {
    for q in ['"', '\''] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return &s[1..s.len() - 1];
        }
    }
    s
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named contiguous range inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Flat parameter vector of the detector, split into the segments
/// `backbone`, `neck`, `head_face` and `head_body`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    segments: Vec<Segment>,
    values: Vec<f64>,
}

impl DetectorParams {
    pub fn new(segments: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.start != next {
                return Err(Error::Layout(format!("segment `{}` is not contiguous", s.name)));
            }
            next += s.len;
        }
        if next != values.len() {
            return Err(Error::Layout(format!(
                "segments cover {next} values but the vector holds {}",
                values.len()
            )));
        }
        Ok(DetectorParams { segments, values })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.segment(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn same_layout(&self, other: &DetectorParams) -> bool {
        self.segments == other.segments
    }

    pub fn check_layout(&self, other: &DetectorParams) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Layout("parameter vectors have different segment tables".into()))
        }
    }

    /// Overwrites every value with the corresponding value of `other`.
    pub fn copy_from(&mut self, other: &DetectorParams) -> Result<()> {
        self.check_layout(other)?;
        self.values.copy_from_slice(&other.values);
        Ok(())
    }

    /// Bitwise equality of the two vectors, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &DetectorParams) -> bool {
        self.same_layout(other)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

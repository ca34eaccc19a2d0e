//! Dense parameter storage, small feed-forward networks with hand-written
//! reverse-mode gradients, Adam, finite-difference checking and checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
pub mod ops;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RftfError};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    decode_params, encode_params, load_checkpoint, save_checkpoint, sidecar_path, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{
    central_difference, grad_check, relative_error, GradCheckReport, FD_STEP, REL_ERROR_FLOOR,
};
pub use mlp::{backward, backward_accumulate, forward, forward_cached, Activation, ForwardCache, GradScope, MlpSpec};

/// A named, contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat `f64` parameter store with a segment table.
///
/// The segment table always tiles `0..len` without gaps or overlaps, and every
/// stored value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<Segment>) -> Result<Self> {
        let len = validate_layout(&layout)?;
        Ok(Self {
            values: vec![0.0; len],
            layout,
        })
    }

    pub fn from_parts(layout: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let len = validate_layout(&layout)?;
        if len != values.len() {
            return Err(RftfError::Config(format!(
                "segment table covers {len} values but {} were supplied",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(RftfError::numerical(
                format!("parameter {i}"),
                format!("non-finite value {}", values[i]),
            ));
        }
        Ok(Self { values, layout })
    }

    /// Same layout, new values. Panics if the length differs.
    pub fn with_values(&self, values: &[f64]) -> Self {
        assert_eq!(values.len(), self.values.len(), "parameter length mismatch");
        Self {
            values: values.to_vec(),
            layout: self.layout.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn range_of(&self, name: &str) -> Option<Range<usize>> {
        self.layout.iter().find(|s| s.name == name).map(Segment::range)
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.range_of(name).map(|r| &self.values[r])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.range_of(name)?;
        Some(&mut self.values[r])
    }

    pub fn ensure_finite(&self, location: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(RftfError::numerical(
                format!("{location}, parameter {i}"),
                format!("non-finite value {}", self.values[i]),
            )),
        }
    }
}

fn validate_layout(layout: &[Segment]) -> Result<usize> {
    let mut sorted: Vec<&Segment> = layout.iter().collect();
    sorted.sort_by_key(|s| s.offset);
    let mut end = 0usize;
    for seg in sorted {
        if seg.offset != end {
            return Err(RftfError::Config(format!(
                "segment `{}` starts at {} but the previous segment ends at {end}",
                seg.name, seg.offset
            )));
        }
        end += seg.len();
    }
    for (i, a) in layout.iter().enumerate() {
        if layout[i + 1..].iter().any(|b| b.name == a.name) {
            return Err(RftfError::Config(format!("duplicate segment `{}`", a.name)));
        }
    }
    Ok(end)
}

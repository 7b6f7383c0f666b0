use super::{Matrix, NnError};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_STORE_ID: AtomicUsize = AtomicUsize::new(1);

fn fresh_id() -> usize {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a named slice inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceId(pub usize);

/// A named, matrix-shaped window into the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector plus its layout manifest.
///
/// Slices are appended contiguously, so they are disjoint and their
/// concatenation covers `values` exactly.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamStore {
    #[serde(skip, default = "fresh_id")]
    id: usize,
    values: Vec<f64>,
    layout: Vec<ParamSlice>,
}

impl Clone for ParamStore {
    // Clones share the identity of the original so that gradients computed
    // against a snapshot can still be applied to the live store.
    fn clone(&self) -> Self {
        Self {
            id: self.id,
            values: self.values.clone(),
            layout: self.layout.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values && self.layout == other.layout
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            values: Vec::new(),
            layout: Vec::new(),
        }
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    /// Appends a `rows x cols` slice initialised by `init`.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        mut init: impl FnMut() -> f64,
    ) -> SliceId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter slice `{name}`"
        );
        let offset = self.values.len();
        self.values.extend((0..rows * cols).map(|_| init()));
        self.layout.push(ParamSlice {
            name,
            offset,
            rows,
            cols,
        });
        SliceId(self.layout.len() - 1)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> SliceId {
        self.add(name, rows, cols, || 0.0)
    }

    pub fn find(&self, name: &str) -> Option<SliceId> {
        self.layout
            .iter()
            .position(|s| s.name == name)
            .map(SliceId)
    }

    pub fn meta(&self, id: SliceId) -> &ParamSlice {
        &self.layout[id.0]
    }

    pub fn slice(&self, id: SliceId) -> &[f64] {
        &self.values[self.layout[id.0].range()]
    }

    pub fn slice_mut(&mut self, id: SliceId) -> &mut [f64] {
        let r = self.layout[id.0].range();
        &mut self.values[r]
    }

    pub fn matrix(&self, id: SliceId) -> Matrix {
        let m = &self.layout[id.0];
        Matrix::from_vec(m.rows, m.cols, self.slice(id).to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[ParamSlice] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Name of the slice containing flat index `i`.
    pub fn slice_name_at(&self, i: usize) -> Option<&str> {
        self.layout
            .iter()
            .find(|s| s.range().contains(&i))
            .map(|s| s.name.as_str())
    }

    /// Checks that slices are disjoint, ordered and cover the whole vector.
    pub fn validate(&self) -> Result<(), NnError> {
        let mut cursor = 0;
        for s in &self.layout {
            if s.offset != cursor {
                return Err(NnError::BadLayout(format!(
                    "slice `{}` starts at {} but previous slice ended at {}",
                    s.name, s.offset, cursor
                )));
            }
            cursor += s.len();
        }
        if cursor != self.values.len() {
            return Err(NnError::BadLayout(format!(
                "layout covers {} values, store holds {}",
                cursor,
                self.values.len()
            )));
        }
        Ok(())
    }

    /// Overwrites the values from another store with an identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if self.layout != other.layout {
            return Err(NnError::BadLayout("layouts differ".into()));
        }
        self.values.copy_from_slice(&other.values);
        Ok(())
    }
}

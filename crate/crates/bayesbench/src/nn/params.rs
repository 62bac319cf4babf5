//! Flat parameter vectors plus the named shape registry that maps layers to
//! slices of the vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat parameter vector of length P. Immutable once published; training
/// code builds new vectors rather than mutating shared ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    data: Vec<f64>,
}

impl ParameterVector {
    pub fn new(data: Vec<f64>) -> Self {
        ParameterVector { data }
    }

    pub fn zeros(len: usize) -> Self {
        ParameterVector { data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(data: Vec<f64>) -> Self {
        ParameterVector { data }
    }
}

/// One named slice of the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Registry mapping named layers to slices; total slice length equals P and
/// flatten/unflatten round-trips exactly.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let offset = self.total;
        let entry = ParamEntry { name: name.into(), offset, shape };
        self.total += entry.len();
        self.entries.push(entry);
        offset
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Split a flat vector into per-entry owned pieces.
    pub fn unflatten(&self, theta: &ParameterVector) -> Result<Vec<(String, Vec<f64>)>> {
        if theta.len() != self.total {
            return Err(Error::Argument(format!(
                "parameter vector has length {}, layout expects {}",
                theta.len(),
                self.total
            )));
        }
        Ok(self
            .entries
            .iter()
            .map(|e| (e.name.clone(), theta.as_slice()[e.offset..e.offset + e.len()].to_vec()))
            .collect())
    }

    /// Inverse of [`ParamLayout::unflatten`].
    pub fn flatten(&self, pieces: &[(String, Vec<f64>)]) -> Result<ParameterVector> {
        let mut data = vec![0.0; self.total];
        if pieces.len() != self.entries.len() {
            return Err(Error::Argument("piece count does not match layout".into()));
        }
        for (entry, (name, piece)) in self.entries.iter().zip(pieces) {
            if &entry.name != name || piece.len() != entry.len() {
                return Err(Error::Argument(format!(
                    "piece `{name}` does not match layout entry `{}`",
                    entry.name
                )));
            }
            data[entry.offset..entry.offset + entry.len()].copy_from_slice(piece);
        }
        Ok(ParameterVector::new(data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut layout = ParamLayout::default();
        layout.push("a.weight", vec![2, 3]);
        layout.push("a.bias", vec![3]);
        layout.push("b.weight", vec![3, 1]);
        assert_eq!(layout.total_len(), 12);
        let theta = ParameterVector::new((0..12).map(|i| i as f64 * 0.5).collect());
        let pieces = layout.unflatten(&theta).unwrap();
        let back = layout.flatten(&pieces).unwrap();
        assert_eq!(back, theta);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut layout = ParamLayout::default();
        layout.push("w", vec![4]);
        assert!(layout.unflatten(&ParameterVector::zeros(5)).is_err());
    }
}

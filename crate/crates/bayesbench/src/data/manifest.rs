//! JSON dataset manifests: `{name, split, sha256, count, shape}`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Split};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub sha256: String,
    pub count: usize,
    pub shape: Vec<usize>,
}

impl DatasetManifest {
    /// Hash covers the raw input bytes followed by the labels, so any change
    /// to either invalidates downstream artifacts.
    pub fn of(d: &Dataset) -> DatasetManifest {
        let mut hasher = Sha256::new();
        for &v in d.inputs.iter() {
            hasher.update(v.to_le_bytes());
        }
        for &y in &d.labels {
            hasher.update(y.to_le_bytes());
        }
        DatasetManifest {
            name: d.name.clone(),
            split: d.split,
            sha256: format!("{:x}", hasher.finalize()),
            count: d.len(),
            shape: d.inputs.shape().to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn hash_changes_with_content() {
        let d1 = Dataset::new(Array4::zeros((2, 1, 2, 2)), vec![0, 1], 2, "a", Split::Train)
            .unwrap();
        let mut d2 = d1.clone();
        d2.inputs[[0, 0, 0, 0]] = 0.5;
        let m1 = DatasetManifest::of(&d1);
        let m2 = DatasetManifest::of(&d2);
        assert_ne!(m1.sha256, m2.sha256);
        assert_eq!(m1, DatasetManifest::of(&d1));
        let json = serde_json::to_string(&m1).unwrap();
        let back: DatasetManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m1);
    }
}

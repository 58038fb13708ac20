use std::collections::HashMap;
use std::io::BufRead;

use super::{CaptureDescriptor, ExtractorPort, SimError};
use crate::embedding::{EmbeddingRecord, FeatureVector};
use crate::ids::ModelInstanceId;

/// Serves externally computed embeddings keyed by `(identity, image, instance)`.
#[derive(Debug, Clone, Default)]
pub struct FileExtractor {
    dim: Option<usize>,
    instances: Vec<ModelInstanceId>,
    vectors: HashMap<(String, String, ModelInstanceId), FeatureVector>,
}

impl FileExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one record. The first record fixes the store's dimension.
    pub fn ingest(&mut self, record: EmbeddingRecord) -> Result<(), SimError> {
        let dim = *self.dim.get_or_insert(record.vector.len());
        if record.vector.len() != dim {
            return Err(SimError::DimMismatch {
                expected: dim,
                actual: record.vector.len(),
            });
        }
        let vector = FeatureVector::new(record.vector)?.normalize()?;
        let instance = ModelInstanceId::new(record.instance);
        if !self.instances.contains(&instance) {
            self.instances.push(instance.clone());
        }
        self.vectors
            .insert((record.identity, record.image, instance), vector);
        Ok(())
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, SimError> {
        let mut store = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record = EmbeddingRecord::from_json_line(&line).map_err(|e| SimError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            store.ingest(record)?;
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn file_extract(
        &self,
        capture: &CaptureDescriptor,
        instance: &ModelInstanceId,
    ) -> Result<FeatureVector, SimError> {
        let (identity, image) = capture.keys();
        let key = (identity, image, instance.clone());
        self.vectors.get(&key).cloned().ok_or_else(|| {
            let (identity, image, instance) = key;
            SimError::MissingRecord {
                identity,
                image,
                instance,
            }
        })
    }
}

impl ExtractorPort for FileExtractor {
    fn extract(
        &self,
        capture: &CaptureDescriptor,
        instance: &ModelInstanceId,
    ) -> Result<FeatureVector, SimError> {
        self.file_extract(capture, instance)
    }

    fn instances(&self) -> Vec<ModelInstanceId> {
        self.instances.clone()
    }

    fn dim(&self) -> usize {
        self.dim.unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(instance: &str, vector: Vec<f32>) -> EmbeddingRecord {
        EmbeddingRecord {
            identity: "alice".into(),
            instance: instance.into(),
            image: "front".into(),
            vector,
        }
    }

    #[test]
    fn round_trip_normalizes() {
        let mut store = FileExtractor::new();
        store.ingest(rec("m0", vec![3.0, 4.0])).unwrap();
        let v = store
            .extract(&CaptureDescriptor::keyed("alice", "front"), &"m0".into())
            .unwrap();
        assert_eq!(v.components(), &[0.6, 0.8]);
        assert_eq!(store.instances(), vec![ModelInstanceId::new("m0")]);
    }

    #[test]
    fn missing_instance() {
        let mut store = FileExtractor::new();
        store.ingest(rec("m0", vec![1.0, 0.0])).unwrap();
        assert!(matches!(
            store.extract(&CaptureDescriptor::keyed("alice", "front"), &"m1".into()),
            Err(SimError::MissingRecord { .. })
        ));
    }

    #[test]
    fn mixed_dims_rejected_at_ingest() {
        let mut store = FileExtractor::new();
        store.ingest(rec("m0", vec![1.0, 0.0])).unwrap();
        assert!(matches!(
            store.ingest(rec("m1", vec![1.0, 0.0, 0.0])),
            Err(SimError::DimMismatch {
                expected: 2,
                actual: 3
            })
        ));
    }

    #[test]
    fn reads_jsonl() {
        let text =
            "{\"identity\":\"id0\",\"instance\":\"m0\",\"image\":\"img1\",\"vector\":[0,2]}\n\n";
        let store = FileExtractor::from_reader(text.as_bytes()).unwrap();
        assert_eq!(store.len(), 1);
        let v = store
            .extract(&CaptureDescriptor::indexed(0, 1), &"m0".into())
            .unwrap();
        assert_eq!(v.components(), &[0.0, 1.0]);
    }
}

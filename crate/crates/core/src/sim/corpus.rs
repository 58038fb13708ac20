use std::collections::HashMap;
use std::io::BufRead;
use std::ops::Range;

use rayon::prelude::*;

use super::world::{image_noise, latent_identity, observe};
use super::{identity_key, image_key, SimError, SimWorld, SimWorldConfig};
use crate::embedding::{cosine_from_parts, squared_norm, EmbeddingRecord, FeatureVector};
use crate::ids::ModelInstanceId;

/// One captured image of one identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub identity: u32,
    pub image: String,
}

/// All embeddings of a sample population under every model instance, held in
/// memory for evaluation.
///
/// Samples are grouped contiguously by identity. Every sample has an
/// embedding under every instance.
#[derive(Debug, Clone)]
pub struct Corpus {
    dim: usize,
    instances: Vec<ModelInstanceId>,
    identities: Vec<String>,
    identity_groups: Vec<Option<String>>,
    identity_ranges: Vec<Range<usize>>,
    samples: Vec<Sample>,
    /// Per instance: `samples.len() * dim` normalized components, row-major.
    embeddings: Vec<Vec<f32>>,
    sq_norms: Vec<Vec<f64>>,
    seed: Option<u64>,
    config_digest: Option<String>,
}

impl Corpus {
    /// Extracts every capture of the world under every instance.
    pub fn synthesize(world: &SimWorld) -> Result<Self, SimError> {
        Self::synthesize_range(world, 0..world.config().num_identities)
    }

    /// Like [`Corpus::synthesize`], restricted to the identities in `range`.
    /// Identity names keep their world index (`id{i}`).
    pub fn synthesize_range(world: &SimWorld, range: Range<usize>) -> Result<Self, SimError> {
        let cfg = world.config();
        if range.is_empty() || range.end > cfg.num_identities {
            return Err(SimError::IndexOutOfRange {
                what: "identity",
                index: range.end as u64,
                limit: cfg.num_identities as u64,
            });
        }
        let observations: Vec<Vec<f64>> = range
            .clone()
            .into_par_iter()
            .map(|i| -> Result<Vec<Vec<f64>>, SimError> {
                let latent = latent_identity(cfg, i);
                let sigma = cfg.effective_sigma(i, None)?;
                Ok((0..cfg.images_per_identity)
                    .map(|j| observe(&latent, &image_noise(cfg, i, j), sigma))
                    .collect())
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();

        let embeddings = (0..cfg.num_instances)
            .map(|k| {
                let rows: Vec<FeatureVector> = observations
                    .par_iter()
                    .map(|u| world.project(k, u))
                    .collect::<Result<_, _>>()?;
                Ok(rows
                    .into_iter()
                    .flat_map(FeatureVector::into_components)
                    .collect())
            })
            .collect::<Result<Vec<Vec<f32>>, SimError>>()?;

        let m = cfg.images_per_identity;
        let count = range.len();
        let samples = (0..count as u32)
            .flat_map(|i| {
                (0..m as u32).map(move |j| Sample {
                    identity: i,
                    image: image_key(j),
                })
            })
            .collect();
        let mut corpus = Self::assemble(
            cfg.dim,
            world.instance_ids(),
            range.map(|i| identity_key(i as u32)).collect(),
            (0..count).map(|i| i * m..(i + 1) * m).collect(),
            samples,
            embeddings,
        );
        corpus.attach_config(cfg);
        Ok(corpus)
    }

    fn assemble(
        dim: usize,
        instances: Vec<ModelInstanceId>,
        identities: Vec<String>,
        identity_ranges: Vec<Range<usize>>,
        samples: Vec<Sample>,
        embeddings: Vec<Vec<f32>>,
    ) -> Self {
        let sq_norms = embeddings
            .iter()
            .map(|e| e.chunks_exact(dim).map(squared_norm).collect())
            .collect();
        Self {
            dim,
            instances,
            identity_groups: vec![None; identities.len()],
            identities,
            identity_ranges,
            samples,
            embeddings,
            sq_norms,
            seed: None,
            config_digest: None,
        }
    }

    /// Records provenance and group membership from the generating config.
    pub fn attach_config(&mut self, cfg: &SimWorldConfig) {
        self.seed = Some(cfg.master_seed);
        self.config_digest = Some(cfg.digest());
        for (i, name) in self.identities.iter().enumerate() {
            let index = name
                .strip_prefix("id")
                .and_then(|s| s.parse::<usize>().ok())
                .unwrap_or(i);
            self.identity_groups[i] = cfg.group_of(index).map(str::to_owned);
        }
    }

    /// Builds a corpus from embedding records. Vectors are normalized on the
    /// way in; the `(identity, image)` grid must be complete for every
    /// instance. Identities, images and instances keep first-seen order.
    pub fn from_records<I>(records: I) -> Result<Self, SimError>
    where
        I: IntoIterator<Item = Result<EmbeddingRecord, SimError>>,
    {
        let mut dim = None;
        let mut instance_pos: HashMap<String, usize> = HashMap::new();
        let mut instances = Vec::new();
        let mut identity_pos: HashMap<String, usize> = HashMap::new();
        let mut identities: Vec<String> = Vec::new();
        let mut images_of: Vec<Vec<String>> = Vec::new();
        let mut vectors: HashMap<(usize, usize, String), Vec<f32>> = HashMap::new();

        for record in records {
            let r = record?;
            let d = *dim.get_or_insert(r.vector.len());
            if r.vector.len() != d {
                return Err(SimError::DimMismatch {
                    expected: d,
                    actual: r.vector.len(),
                });
            }
            let k = *instance_pos.entry(r.instance.clone()).or_insert_with(|| {
                instances.push(ModelInstanceId::new(r.instance.clone()));
                instances.len() - 1
            });
            let i = *identity_pos.entry(r.identity.clone()).or_insert_with(|| {
                identities.push(r.identity.clone());
                images_of.push(Vec::new());
                identities.len() - 1
            });
            if !images_of[i].contains(&r.image) {
                images_of[i].push(r.image.clone());
            }
            let v = FeatureVector::new(r.vector)?.normalize()?;
            vectors.insert((k, i, r.image), v.into_components());
        }
        let dim = dim.ok_or_else(|| SimError::Parse {
            line: 0,
            message: "corpus contains no records".into(),
        })?;

        let mut samples = Vec::new();
        let mut ranges = Vec::with_capacity(identities.len());
        for (i, imgs) in images_of.iter().enumerate() {
            let start = samples.len();
            samples.extend(imgs.iter().map(|img| Sample {
                identity: i as u32,
                image: img.clone(),
            }));
            ranges.push(start..samples.len());
        }
        let mut embeddings = Vec::with_capacity(instances.len());
        for (k, id) in instances.iter().enumerate() {
            let mut flat = Vec::with_capacity(samples.len() * dim);
            for s in &samples {
                let v = vectors
                    .remove(&(k, s.identity as usize, s.image.clone()))
                    .ok_or_else(|| SimError::MissingRecord {
                        identity: identities[s.identity as usize].clone(),
                        image: s.image.clone(),
                        instance: id.clone(),
                    })?;
                flat.extend_from_slice(&v);
            }
            embeddings.push(flat);
        }
        Ok(Self::assemble(
            dim, instances, identities, ranges, samples, embeddings,
        ))
    }

    /// Reads the embedding record text format (one JSON object per line).
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, SimError> {
        Self::from_records(
            reader
                .lines()
                .enumerate()
                .filter_map(|(n, line)| match line {
                    Err(e) => Some(Err(SimError::Io(e))),
                    Ok(l) if l.trim().is_empty() => None,
                    Ok(l) => {
                        Some(
                            EmbeddingRecord::from_json_line(&l).map_err(|e| SimError::Parse {
                                line: n + 1,
                                message: e.to_string(),
                            }),
                        )
                    }
                }),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn instances(&self) -> &[ModelInstanceId] {
        &self.instances
    }

    pub fn instance_index(&self, id: &ModelInstanceId) -> Option<usize> {
        self.instances.iter().position(|x| x == id)
    }

    pub fn identities(&self) -> &[String] {
        &self.identities
    }

    pub fn identity_ranges(&self) -> &[Range<usize>] {
        &self.identity_ranges
    }

    pub fn identity_group(&self, identity: usize) -> Option<&str> {
        self.identity_groups[identity].as_deref()
    }

    pub fn group_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.identity_groups.iter().flatten().cloned().collect();
        labels.sort();
        labels.dedup();
        labels
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn config_digest(&self) -> Option<&str> {
        self.config_digest.as_deref()
    }

    pub fn embedding(&self, instance: usize, sample: usize) -> &[f32] {
        &self.embeddings[instance][sample * self.dim..(sample + 1) * self.dim]
    }

    /// Cosine score between sample `a` under instance `ka` and sample `b`
    /// under instance `kb`. Bit-identical to [`crate::embedding::cosine_similarity`]
    /// on the same vectors.
    pub fn score(&self, ka: usize, a: usize, kb: usize, b: usize) -> f64 {
        let dot = crate::embedding::dot_f32(self.embedding(ka, a), self.embedding(kb, b));
        cosine_from_parts(dot, self.sq_norms[ka][a], self.sq_norms[kb][b]).value()
    }

    /// Copy of this corpus in which instance `dst` carries `src`'s embeddings.
    pub fn with_instance_duplicated(&self, src: usize, dst: usize) -> Self {
        let mut c = self.clone();
        c.embeddings[dst] = c.embeddings[src].clone();
        c.sq_norms[dst] = c.sq_norms[src].clone();
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;
    use crate::sim::{generate_corpus, CaptureDescriptor, ExtractorPort};

    fn small_world() -> SimWorld {
        SimWorld::new(SimWorldConfig::new(3, 4, 3, 1.2, 5).with_dim(32)).unwrap()
    }

    #[test]
    fn synthesized_matches_file_round_trip() {
        let w = small_world();
        let direct = Corpus::synthesize(&w).unwrap();
        let mut buf = Vec::new();
        generate_corpus(&w, &mut buf).unwrap();
        let loaded = Corpus::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(loaded.instances(), direct.instances());
        assert_eq!(loaded.identities(), direct.identities());
        assert_eq!(loaded.samples(), direct.samples());
        for k in 0..3 {
            for s in 0..direct.sample_count() {
                assert_eq!(loaded.embedding(k, s), direct.embedding(k, s));
            }
        }
    }

    #[test]
    fn corpus_score_equals_cosine_similarity() {
        let w = small_world();
        let c = Corpus::synthesize(&w).unwrap();
        let m = |k| ModelInstanceId::indexed(k);
        let a = w.extract(&CaptureDescriptor::indexed(1, 2), &m(0)).unwrap();
        let b = w.extract(&CaptureDescriptor::indexed(3, 0), &m(2)).unwrap();
        let expected = cosine_similarity(&a, &b).unwrap().value();
        assert_eq!(c.score(0, 5, 2, 9).to_bits(), expected.to_bits());
    }

    #[test]
    fn range_matches_full_corpus() {
        let w = small_world();
        let full = Corpus::synthesize(&w).unwrap();
        let part = Corpus::synthesize_range(&w, 2..4).unwrap();
        assert_eq!(part.identities(), &["id2".to_owned(), "id3".to_owned()]);
        assert_eq!(part.embedding(1, 0), full.embedding(1, 6));
        assert!(Corpus::synthesize_range(&w, 3..9).is_err());
    }

    #[test]
    fn incomplete_grid_is_rejected() {
        let rec = |inst: &str, id: &str| {
            Ok(EmbeddingRecord {
                identity: id.into(),
                instance: inst.into(),
                image: "img0".into(),
                vector: vec![1.0, 0.0],
            })
        };
        let err = Corpus::from_records(vec![rec("m0", "a"), rec("m0", "b"), rec("m1", "a")]);
        assert!(matches!(err, Err(SimError::MissingRecord { .. })));
    }

    #[test]
    fn mixed_dims_rejected() {
        let err = Corpus::from_records(vec![
            Ok(EmbeddingRecord {
                identity: "a".into(),
                instance: "m0".into(),
                image: "i".into(),
                vector: vec![1.0, 0.0],
            }),
            Ok(EmbeddingRecord {
                identity: "b".into(),
                instance: "m0".into(),
                image: "i".into(),
                vector: vec![1.0, 0.0, 0.0],
            }),
        ]);
        assert!(matches!(
            err,
            Err(SimError::DimMismatch {
                expected: 2,
                actual: 3
            })
        ));
    }
}

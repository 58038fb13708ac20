use std::collections::HashMap;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::haar::{haar_orthogonal, InstanceTransform};
use super::seed::{derive_seed, stream_rng};
use super::{identity_key, image_key, CaptureDescriptor, ExtractorPort, SimError, SimWorldConfig};
use crate::embedding::{dot_f64, EmbeddingRecord, FeatureVector};
use crate::ids::ModelInstanceId;

/// A synthetic population observed through `N` independent matcher instances.
///
/// Identity `i` has a latent unit direction `v_i`. Image `j` of that identity
/// is the latent observation `u_ij = v_i + (sigma_eff / sqrt(D)) n_ij`, which
/// does not depend on the instance. Instance `k` extracts
/// `normalize(O_k u_ij)`. Same-instance scores are therefore invariant to the
/// instance, while cross-instance scores compare two unrelated directions.
#[derive(Debug, Clone)]
pub struct SimWorld {
    config: SimWorldConfig,
    transforms: Vec<InstanceTransform>,
    by_name: HashMap<ModelInstanceId, usize>,
}

impl SimWorld {
    pub fn new(config: SimWorldConfig) -> Result<Self, SimError> {
        config.validate()?;
        let transforms: Vec<InstanceTransform> = (0..config.num_instances)
            .into_par_iter()
            .map(|k| InstanceTransform {
                instance_id: ModelInstanceId::indexed(k),
                matrix: haar_orthogonal(Self::instance_seed(config.master_seed, k), config.dim),
            })
            .collect();
        let by_name = transforms
            .iter()
            .enumerate()
            .map(|(k, t)| (t.instance_id.clone(), k))
            .collect();
        Ok(Self {
            config,
            transforms,
            by_name,
        })
    }

    /// Seed of instance `k`'s transform.
    pub fn instance_seed(master_seed: u64, k: usize) -> u64 {
        derive_seed(master_seed, "instance", &[k as u64])
    }

    pub fn config(&self) -> &SimWorldConfig {
        &self.config
    }

    pub fn transforms(&self) -> &[InstanceTransform] {
        &self.transforms
    }

    pub fn instance_ids(&self) -> Vec<ModelInstanceId> {
        self.transforms
            .iter()
            .map(|t| t.instance_id.clone())
            .collect()
    }

    pub fn instance_index(&self, id: &ModelInstanceId) -> Result<usize, SimError> {
        self.by_name
            .get(id)
            .copied()
            .ok_or_else(|| SimError::UnknownInstance(id.clone()))
    }

    /// Latent unit direction of an identity.
    pub fn latent_identity(&self, identity: usize) -> Vec<f64> {
        latent_identity(&self.config, identity)
    }

    /// Per-coordinate standard-normal noise of one image.
    pub fn image_noise(&self, identity: usize, image: usize) -> Vec<f64> {
        image_noise(&self.config, identity, image)
    }

    fn check_indices(&self, identity: u32, image: u32) -> Result<(), SimError> {
        if identity as usize >= self.config.num_identities {
            return Err(SimError::IndexOutOfRange {
                what: "identity",
                index: identity.into(),
                limit: self.config.num_identities as u64,
            });
        }
        if image as usize >= self.config.images_per_identity {
            return Err(SimError::IndexOutOfRange {
                what: "image",
                index: image.into(),
                limit: self.config.images_per_identity as u64,
            });
        }
        Ok(())
    }

    /// The instance-independent latent observation of a capture.
    pub fn latent_observation(&self, capture: &CaptureDescriptor) -> Result<Vec<f64>, SimError> {
        let (identity, image) = capture.indices().ok_or_else(|| {
            SimError::UnresolvableCapture(format!("{capture:?} does not name a synthetic capture"))
        })?;
        self.check_indices(identity, image)?;
        let sigma = self
            .config
            .effective_sigma(identity as usize, capture.group_label())?;
        Ok(observe(
            &self.latent_identity(identity as usize),
            &self.image_noise(identity as usize, image as usize),
            sigma,
        ))
    }

    /// `normalize(O_k u)` for a latent observation `u`.
    pub fn project(&self, instance: usize, observation: &[f64]) -> Result<FeatureVector, SimError> {
        let projected = self.transforms[instance].matrix.apply(observation);
        let components = projected.iter().map(|&x| x as f32).collect();
        Ok(FeatureVector::new(components)?.normalize()?)
    }

    pub fn synth_extract(
        &self,
        capture: &CaptureDescriptor,
        instance: &ModelInstanceId,
    ) -> Result<FeatureVector, SimError> {
        let k = self.instance_index(instance)?;
        let u = self.latent_observation(capture)?;
        self.project(k, &u)
    }
}

pub(crate) fn latent_identity(config: &SimWorldConfig, identity: usize) -> Vec<f64> {
    let mut rng = stream_rng(config.master_seed, "identity", &[identity as u64]);
    let mut v: Vec<f64> = (0..config.dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = dot_f64(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub(crate) fn image_noise(config: &SimWorldConfig, identity: usize, image: usize) -> Vec<f64> {
    let mut rng = stream_rng(
        config.master_seed,
        "image",
        &[identity as u64, image as u64],
    );
    (0..config.dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

pub(crate) fn observe(latent: &[f64], noise: &[f64], sigma: f64) -> Vec<f64> {
    let scale = sigma / (latent.len() as f64).sqrt();
    latent
        .iter()
        .zip(noise)
        .map(|(v, n)| v + scale * n)
        .collect()
}

impl ExtractorPort for SimWorld {
    fn extract(
        &self,
        capture: &CaptureDescriptor,
        instance: &ModelInstanceId,
    ) -> Result<FeatureVector, SimError> {
        self.synth_extract(capture, instance)
    }

    fn instances(&self) -> Vec<ModelInstanceId> {
        self.instance_ids()
    }

    fn dim(&self) -> usize {
        self.config.dim
    }
}

/// Writes every `(instance, identity, image)` embedding as one record line,
/// ordered by instance, then identity, then image. Returns the record count.
pub fn generate_corpus<W: Write>(world: &SimWorld, out: &mut W) -> Result<usize, SimError> {
    let cfg = world.config();
    let captures: Vec<(u32, u32)> = (0..cfg.num_identities as u32)
        .flat_map(|i| (0..cfg.images_per_identity as u32).map(move |j| (i, j)))
        .collect();
    let observations: Vec<Vec<f64>> = captures
        .par_iter()
        .map(|&(i, j)| world.latent_observation(&CaptureDescriptor::indexed(i, j)))
        .collect::<Result<_, _>>()?;

    let mut written = 0;
    for (k, t) in world.transforms().iter().enumerate() {
        let vectors: Vec<FeatureVector> = observations
            .par_iter()
            .map(|u| world.project(k, u))
            .collect::<Result<_, _>>()?;
        for (&(i, j), v) in captures.iter().zip(vectors) {
            let record = EmbeddingRecord {
                identity: identity_key(i),
                instance: t.instance_id.to_string(),
                image: image_key(j),
                vector: v.into_components(),
            };
            out.write_all(record.to_json_line().as_bytes())?;
            out.write_all(b"\n")?;
            written += 1;
        }
    }
    out.flush()?;
    Ok(written)
}

//! Synthetic per-identity datasets, train/test splitting, cross-identity
//! impostor sampling, and the embedding file loader.
//!
//! Identities are Gaussian clusters in embedding space: identity `k` gets a
//! center drawn once from a zero-mean isotropic Gaussian scaled by
//! `cluster_center_scale`, and each sample is that center plus isotropic
//! noise. Private samples never leave the structures in this module except
//! through explicit training and evaluation calls.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FedverError, Result};
use crate::seeding::stream_rng;

pub const DEFAULT_SPLIT_RATIO: f64 = 0.9;

/// One embedding-space sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedverError::invalid("feature vector has non-finite entry"));
        }
        Ok(FeatureVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// All samples of one identity plus a disjoint train/test index split.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityDataset {
    pub identity_id: u64,
    pub samples: Vec<FeatureVector>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl IdentityDataset {
    pub fn train_samples(&self) -> impl Iterator<Item = &FeatureVector> {
        self.train_indices.iter().map(|&i| &self.samples[i])
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &FeatureVector> {
        self.test_indices.iter().map(|&i| &self.samples[i])
    }

    pub fn dimension(&self) -> usize {
        self.samples.first().map_or(0, FeatureVector::dimension)
    }
}

/// Knobs for the synthetic identity generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub dimension: usize,
    pub cluster_center_scale: f64,
    pub within_cluster_stddev: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            n_identities: 20,
            samples_per_identity: 100,
            dimension: 16,
            cluster_center_scale: 1.0,
            within_cluster_stddev: 0.3,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(FedverError::config("n_identities", "must be at least 2"));
        }
        if self.samples_per_identity < 2 {
            return Err(FedverError::config(
                "samples_per_identity",
                "must be at least 2",
            ));
        }
        if self.dimension < 1 {
            return Err(FedverError::config("dimension", "must be at least 1"));
        }
        // Also rejects NaN, unlike `<= 0.0`.
        if self.within_cluster_stddev.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(FedverError::config(
                "within_cluster_stddev",
                "must be positive",
            ));
        }
        if !self.cluster_center_scale.is_finite() {
            return Err(FedverError::config("cluster_center_scale", "must be finite"));
        }
        Ok(())
    }
}

/// Generates `n_identities` Gaussian identity clusters, fully determined by
/// `config.seed`. Datasets come pre-split at the default 90/10 ratio; use
/// [`split_dataset`] to re-split.
pub fn generate_identities(config: &SynthesisConfig) -> Result<Vec<IdentityDataset>> {
    config.validate()?;

    let mut center_rng = stream_rng("synth.centers", &[config.seed]);
    let mut datasets = Vec::with_capacity(config.n_identities);
    for identity in 0..config.n_identities as u64 {
        let center: Vec<f64> = (0..config.dimension)
            .map(|_| config.cluster_center_scale * center_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut sample_rng = stream_rng("synth.samples", &[config.seed, identity]);
        let samples = (0..config.samples_per_identity)
            .map(|_| {
                let values = center
                    .iter()
                    .map(|&c| {
                        c + config.within_cluster_stddev
                            * sample_rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                FeatureVector::new(values)
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = IdentityDataset {
            identity_id: identity,
            samples,
            train_indices: Vec::new(),
            test_indices: Vec::new(),
        };
        datasets.push(split_dataset(&ds, DEFAULT_SPLIT_RATIO, config.seed)?);
    }
    Ok(datasets)
}

/// Re-splits a dataset into train/test indices. The shuffle seed is derived
/// from (seed, identity_id) so adding identities never changes existing
/// splits. `|train| = floor(ratio * n)` clamped to leave at least one sample
/// on each side.
pub fn split_dataset(ds: &IdentityDataset, ratio: f64, seed: u64) -> Result<IdentityDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(FedverError::invalid(format!(
            "split ratio must be in (0,1), got {ratio}"
        )));
    }
    let n = ds.samples.len();
    if n < 2 {
        return Err(FedverError::invalid(format!(
            "identity {} has {n} samples; need at least 2 to split",
            ds.identity_id
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng("split", &[seed, ds.identity_id]);
    indices.shuffle(&mut rng);

    let n_train = ((ratio * n as f64).floor() as usize).clamp(1, n - 1);
    let mut train_indices = indices[..n_train].to_vec();
    let mut test_indices = indices[n_train..].to_vec();
    train_indices.sort_unstable();
    test_indices.sort_unstable();

    Ok(IdentityDataset {
        identity_id: ds.identity_id,
        samples: ds.samples.clone(),
        train_indices,
        test_indices,
    })
}

/// Draws `count` impostor vectors for `target_identity`, each from the train
/// partition of a uniformly chosen non-target identity.
pub fn sample_cross_identity_impostors(
    target_identity: u64,
    pool: &[IdentityDataset],
    count: usize,
    seed: u64,
) -> Result<Vec<FeatureVector>> {
    if count < 1 {
        return Err(FedverError::invalid("impostor count must be at least 1"));
    }
    let sources: Vec<&IdentityDataset> = pool
        .iter()
        .filter(|ds| ds.identity_id != target_identity && !ds.train_indices.is_empty())
        .collect();
    if sources.is_empty() {
        return Err(FedverError::invalid(format!(
            "no identity other than {target_identity} available as impostor source"
        )));
    }
    let mut rng = stream_rng("impostor", &[seed, target_identity]);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let source = sources[rng.gen_range(0..sources.len())];
        let idx = source.train_indices[rng.gen_range(0..source.train_indices.len())];
        out.push(source.samples[idx].clone());
    }
    Ok(out)
}

/// Loads precomputed embeddings from the text format: one sample per line,
/// comma-separated integer identity label followed by the embedding values.
/// Lines beginning with `#` are ignored. Dimension is inferred from the
/// first data line and enforced thereafter.
pub fn load_embeddings(path: &Path) -> Result<Vec<IdentityDataset>> {
    let text = fs::read_to_string(path).map_err(|e| FedverError::io(path, e))?;
    let mut dimension: Option<usize> = None;
    // BTreeMap keeps identity order stable by label.
    let mut by_identity: BTreeMap<u64, Vec<FeatureVector>> = BTreeMap::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split(',');
        let label_field = fields.next().unwrap().trim();
        let label: u64 = label_field.parse().map_err(|_| FedverError::Parse {
            line,
            message: format!("identity label {label_field:?} is not a non-negative integer"),
        })?;
        let values = fields
            .map(|f| {
                let f = f.trim();
                f.parse::<f64>().map_err(|_| FedverError::Parse {
                    line,
                    message: format!("value {f:?} is not a real number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(FedverError::Parse {
                line,
                message: "row has a label but no embedding values".into(),
            });
        }
        match dimension {
            None => dimension = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(FedverError::Parse {
                    line,
                    message: format!("dimension mismatch: expected {d} values, got {}", values.len()),
                });
            }
            _ => {}
        }
        let vector = FeatureVector::new(values).map_err(|e| FedverError::Parse {
            line,
            message: e.to_string(),
        })?;
        by_identity.entry(label).or_default().push(vector);
    }

    if by_identity.is_empty() {
        return Err(FedverError::invalid(format!(
            "no data rows in embedding file {}",
            path.display()
        )));
    }
    by_identity
        .into_iter()
        .map(|(identity_id, samples)| {
            let ds = IdentityDataset {
                identity_id,
                samples,
                train_indices: Vec::new(),
                test_indices: Vec::new(),
            };
            split_dataset(&ds, DEFAULT_SPLIT_RATIO, 0)
        })
        .collect()
}

/// Writes datasets in the embedding text format accepted by
/// [`load_embeddings`].
pub fn save_embeddings(path: &Path, datasets: &[IdentityDataset]) -> Result<()> {
    let mut out = String::new();
    for ds in datasets {
        for sample in &ds.samples {
            out.push_str(&ds.identity_id.to_string());
            for v in sample.values() {
                out.push(',');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
    }
    let mut file = fs::File::create(path).map_err(|e| FedverError::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| FedverError::io(path, e))
}

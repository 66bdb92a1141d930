//! Round orchestration: device lifecycle, local training dispatch, plaintext
//! FedAvg or secure-aggregated averaging, global-model redistribution, and
//! the individual and pooled baselines.
//!
//! Aggregation interfaces accept only [`ParamVector`]s (plaintext) or
//! [`MaskedShare`]s (secure); no interface in this module accepts device
//! feature vectors, so raw data never reaches the aggregator.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{FeatureVector, IdentityDataset};
use crate::error::{FedverError, Result};
use crate::model::{
    train_autoencoder, train_verifier, Autoencoder, Label, LabeledSample, MlpVerifier,
    OptimizerConfig, TrainReport,
};
use crate::param::{weighted_sum, Layout, ParamVector};
use crate::secure::{aggregate, mask, setup_pairwise_seeds, FixedPointCodec, MaskedShare};
use crate::seeding::{derive_seed, stream_rng};

/// One edge device: its private identity data, impostor pool, current local
/// model, and RNG stream seed.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub device_id: u64,
    pub identity: IdentityDataset,
    pub impostors: Vec<FeatureVector>,
    pub local_model: ParamVector,
    /// Training items used locally; basis for proportional weights.
    pub sample_count: usize,
    pub rng_seed: u64,
}

impl DeviceState {
    pub fn new(
        device_id: u64,
        identity: IdentityDataset,
        impostors: Vec<FeatureVector>,
        local_model: ParamVector,
        sample_count: usize,
        rng_seed: u64,
    ) -> Result<Self> {
        if sample_count == 0 {
            return Err(FedverError::device(device_id, "sample_count must be at least 1"));
        }
        Ok(DeviceState {
            device_id,
            identity,
            impostors,
            local_model,
            sample_count,
            rng_seed,
        })
    }
}

/// Normalized per-device aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    p: Vec<f64>,
}

impl AggregationWeights {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(FedverError::invalid("empty weight vector"));
        }
        if p.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(FedverError::invalid("weights must be non-negative and finite"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(FedverError::invalid(format!(
                "weights must sum to 1, got {sum}"
            )));
        }
        Ok(AggregationWeights { p })
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    Proportional,
    Uniform,
}

/// Builds aggregation weights from per-device sample counts.
pub fn make_weights(sample_counts: &[usize], scheme: WeightScheme) -> Result<AggregationWeights> {
    if sample_counts.is_empty() {
        return Err(FedverError::invalid("empty sample count list"));
    }
    if sample_counts.contains(&0) {
        return Err(FedverError::invalid("sample counts must be at least 1"));
    }
    let p = match scheme {
        WeightScheme::Uniform => {
            vec![1.0 / sample_counts.len() as f64; sample_counts.len()]
        }
        WeightScheme::Proportional => {
            let total: usize = sample_counts.iter().sum();
            sample_counts
                .iter()
                .map(|&c| c as f64 / total as f64)
                .collect()
        }
    };
    AggregationWeights::new(p)
}

/// Weighted federated average: coordinatewise Σ p_k · w_k.
pub fn fedavg(models: &[(ParamVector, f64)]) -> Result<ParamVector> {
    AggregationWeights::new(models.iter().map(|(_, w)| *w).collect())?;
    weighted_sum(models)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorMode {
    Plaintext,
    Secure,
}

impl AggregatorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorMode::Plaintext => "plaintext",
            AggregatorMode::Secure => "secure",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round_index: usize,
    pub participants: Vec<u64>,
    pub aggregator_mode: AggregatorMode,
    pub weights: Vec<f64>,
    pub global_model: ParamVector,
    pub per_device_train_reports: Vec<(u64, TrainReport)>,
}

/// Builds one device's local training and validation sets and runs local
/// SGD. Implemented by the two model families.
pub trait LocalTrainer: Sync {
    fn layout(&self) -> &Layout;

    /// Trains from `init` on the device's private data.
    fn train_device(
        &self,
        device: &DeviceState,
        init: &ParamVector,
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<(ParamVector, TrainReport)>;

    /// Trains one model on the union of all devices' training data (the
    /// privacy-violating pooled reference).
    fn train_pooled(
        &self,
        devices: &[DeviceState],
        init: &ParamVector,
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<(ParamVector, TrainReport)>;
}

/// Carves a validation subset out of `items`, shuffled deterministically.
fn carve_validation<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    if fraction <= 0.0 || items.len() < 2 {
        return (items.to_vec(), Vec::new());
    }
    let n_val = ((items.len() as f64 * fraction).floor() as usize)
        .clamp(1, items.len() - 1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut stream_rng("local.valsplit", &[seed]));
    let val: Vec<T> = order[..n_val].iter().map(|&i| items[i].clone()).collect();
    let train: Vec<T> = order[n_val..].iter().map(|&i| items[i].clone()).collect();
    (train, val)
}

/// Supervised family: genuine train samples plus impostors, binary labels.
pub struct SupervisedTrainer {
    template: MlpVerifier,
    pub validation_fraction: f64,
}

impl SupervisedTrainer {
    pub fn new(template: MlpVerifier, validation_fraction: f64) -> Self {
        SupervisedTrainer {
            template,
            validation_fraction,
        }
    }

    pub fn template(&self) -> &MlpVerifier {
        &self.template
    }

    fn device_samples(device: &DeviceState) -> Vec<LabeledSample> {
        let mut items: Vec<LabeledSample> = device
            .identity
            .train_samples()
            .map(|x| LabeledSample {
                x: x.clone(),
                label: Label::Genuine,
            })
            .collect();
        items.extend(device.impostors.iter().map(|x| LabeledSample {
            x: x.clone(),
            label: Label::Impostor,
        }));
        items
    }

    fn train_on(
        &self,
        items: &[LabeledSample],
        init: &ParamVector,
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<(ParamVector, TrainReport)> {
        let (train, val) = carve_validation(items, self.validation_fraction, seed);
        let model = self.template.with_params(init.clone())?;
        train_verifier(&model, &train, &val, opt, seed)
    }
}

impl LocalTrainer for SupervisedTrainer {
    fn layout(&self) -> &Layout {
        self.template.layout()
    }

    fn train_device(
        &self,
        device: &DeviceState,
        init: &ParamVector,
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<(ParamVector, TrainReport)> {
        self.train_on(&Self::device_samples(device), init, opt, seed)
    }

    fn train_pooled(
        &self,
        devices: &[DeviceState],
        init: &ParamVector,
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<(ParamVector, TrainReport)> {
        let items: Vec<LabeledSample> = devices.iter().flat_map(Self::device_samples).collect();
        self.train_on(&items, init, opt, seed)
    }
}

/// Unsupervised family: the autoencoder trains on genuine samples only.
pub struct UnsupervisedTrainer {
    template: Autoencoder,
    pub validation_fraction: f64,
}

impl UnsupervisedTrainer {
    pub fn new(template: Autoencoder, validation_fraction: f64) -> Self {
        UnsupervisedTrainer {
            template,
            validation_fraction,
        }
    }

    pub fn template(&self) -> &Autoencoder {
        &self.template
    }

    fn device_samples(device: &DeviceState) -> Vec<FeatureVector> {
        device.identity.train_samples().cloned().collect()
    }

    fn train_on(
        &self,
        items: &[FeatureVector],
        init: &ParamVector,
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<(ParamVector, TrainReport)> {
        let (train, val) = carve_validation(items, self.validation_fraction, seed);
        let model = self.template.with_params(init.clone())?;
        train_autoencoder(&model, &train, &val, opt, seed)
    }
}

impl LocalTrainer for UnsupervisedTrainer {
    fn layout(&self) -> &Layout {
        self.template.layout()
    }

    fn train_device(
        &self,
        device: &DeviceState,
        init: &ParamVector,
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<(ParamVector, TrainReport)> {
        self.train_on(&Self::device_samples(device), init, opt, seed)
    }

    fn train_pooled(
        &self,
        devices: &[DeviceState],
        init: &ParamVector,
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<(ParamVector, TrainReport)> {
        let items: Vec<FeatureVector> = devices.iter().flat_map(Self::device_samples).collect();
        self.train_on(&items, init, opt, seed)
    }
}

/// One federated round: every device trains from the current global model,
/// the submissions are averaged (plaintext FedAvg or masked secure sum),
/// and the result is written back to every device.
///
/// Device training tasks run in parallel; each owns a seed derived from
/// (round_seed, device_id), so results are independent of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    devices: &mut [DeviceState],
    global_model: &ParamVector,
    mode: AggregatorMode,
    trainer: &dyn LocalTrainer,
    opt: &OptimizerConfig,
    weight_scheme: WeightScheme,
    codec: Option<&FixedPointCodec>,
    round_index: usize,
    round_seed: u64,
) -> Result<RoundRecord> {
    if devices.is_empty() {
        return Err(FedverError::invalid("round needs at least one device"));
    }
    match (mode, codec) {
        (AggregatorMode::Secure, None) => {
            return Err(FedverError::config("codec", "required in secure mode"))
        }
        (AggregatorMode::Plaintext, Some(_)) => {
            return Err(FedverError::config("codec", "only valid in secure mode"))
        }
        _ => {}
    }

    // Fixed device-id ordering before aggregation keeps results independent
    // of execution interleaving.
    let mut order: Vec<usize> = (0..devices.len()).collect();
    order.sort_by_key(|&i| devices[i].device_id);

    let trained: Vec<(ParamVector, TrainReport)> = order
        .par_iter()
        .map(|&i| {
            let device = &devices[i];
            let seed = derive_seed("round.train", &[round_seed, device.device_id]);
            trainer
                .train_device(device, global_model, opt, seed)
                .map_err(|e| FedverError::device(device.device_id, e.to_string()))
        })
        .collect::<Result<_>>()?;

    let participants: Vec<u64> = order.iter().map(|&i| devices[i].device_id).collect();
    let sample_counts: Vec<usize> = order.iter().map(|&i| devices[i].sample_count).collect();
    let weights = make_weights(&sample_counts, weight_scheme)?;

    let new_global = match mode {
        AggregatorMode::Plaintext => {
            let pairs: Vec<(ParamVector, f64)> = trained
                .iter()
                .map(|(m, _)| m.clone())
                .zip(weights.values().iter().copied())
                .collect();
            fedavg(&pairs)?
        }
        AggregatorMode::Secure => {
            let codec = codec.unwrap();
            if codec.n_devices != devices.len() {
                return Err(FedverError::config(
                    "codec.n_devices",
                    format!(
                        "codec sized for {} devices but round has {}",
                        codec.n_devices,
                        devices.len()
                    ),
                ));
            }
            let seeds = setup_pairwise_seeds(&participants, round_seed)?;
            let n = devices.len() as f64;
            let shares: Vec<MaskedShare> = trained
                .iter()
                .zip(participants.iter().zip(weights.values()))
                .map(|((model, _), (&device_id, &p))| {
                    // The masked sum is unweighted; devices pre-scale by
                    // n * p_k so it realizes the weighted average.
                    let scaled = model.scale(n * p);
                    let clip = codec.clip_fraction(scaled.values());
                    if clip > 0.01 {
                        eprintln!(
                            "warning: device {device_id}: {:.1}% of coordinates clip at R = {}",
                            100.0 * clip,
                            codec.clip_range
                        );
                    }
                    let encoded = codec.encode(&scaled)?;
                    mask(codec, &encoded, device_id, &seeds, round_index as u64)
                })
                .collect::<Result<_>>()?;
            aggregate(codec, &shares, trainer.layout())?
        }
    };

    let per_device_train_reports: Vec<(u64, TrainReport)> = participants
        .iter()
        .zip(&trained)
        .map(|(&id, (_, report))| (id, report.clone()))
        .collect();

    for device in devices.iter_mut() {
        device.local_model = new_global.clone();
    }

    Ok(RoundRecord {
        round_index,
        participants,
        aggregator_mode: mode,
        weights: weights.values().to_vec(),
        global_model: new_global,
        per_device_train_reports,
    })
}

/// Individual baseline: each device trains from its own initialization on
/// its own data only, with no communication.
pub fn run_individual_baseline(
    devices: &[DeviceState],
    trainer: &dyn LocalTrainer,
    opt: &OptimizerConfig,
) -> Result<BTreeMap<u64, ParamVector>> {
    let results: Vec<(u64, ParamVector)> = devices
        .par_iter()
        .map(|device| {
            let init = crate::model::init_params(
                trainer.layout(),
                crate::model::InitScheme::UniformScaled,
                derive_seed("baseline.init", &[device.rng_seed]),
            );
            let seed = derive_seed("baseline.train", &[device.rng_seed]);
            let (params, _) = trainer
                .train_device(device, &init, opt, seed)
                .map_err(|e| FedverError::device(device.device_id, e.to_string()))?;
            Ok((device.device_id, params))
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().collect())
}

/// Pooled baseline: one model trained on the union of all devices' training
/// data. With a single device and matching seed this coincides with its
/// individual model.
pub fn run_pooled_baseline(
    devices: &[DeviceState],
    trainer: &dyn LocalTrainer,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<ParamVector> {
    if devices.is_empty() {
        return Err(FedverError::invalid("pooled baseline needs at least one device"));
    }
    let init = crate::model::init_params(
        trainer.layout(),
        crate::model::InitScheme::UniformScaled,
        derive_seed("baseline.init", &[seed]),
    );
    let train_seed = derive_seed("baseline.train", &[seed]);
    let (params, _) = trainer.train_pooled(devices, &init, opt, train_seed)?;
    Ok(params)
}

/// Chains `n_rounds` rounds, feeding each round's global model into the
/// next. Devices start from a shared initial global model derived from
/// `seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_federation(
    devices: &mut [DeviceState],
    n_rounds: usize,
    mode: AggregatorMode,
    trainer: &dyn LocalTrainer,
    opt: &OptimizerConfig,
    weight_scheme: WeightScheme,
    codec: Option<&FixedPointCodec>,
    seed: u64,
) -> Result<Vec<RoundRecord>> {
    if n_rounds < 1 {
        return Err(FedverError::invalid("n_rounds must be at least 1"));
    }
    let mut global = crate::model::init_params(
        trainer.layout(),
        crate::model::InitScheme::UniformScaled,
        derive_seed("fed.init", &[seed]),
    );
    for device in devices.iter_mut() {
        device.local_model = global.clone();
    }
    let mut records = Vec::with_capacity(n_rounds);
    for round_index in 0..n_rounds {
        let round_seed = derive_seed("fed.round", &[seed, round_index as u64]);
        let record = run_round(
            devices,
            &global,
            mode,
            trainer,
            opt,
            weight_scheme,
            codec,
            round_index,
            round_seed,
        )?;
        global = record.global_model.clone();
        records.push(record);
    }
    Ok(records)
}

//! The experiment matrix runner: builds per-device datasets, trains the
//! impostor generator when requested, runs the individual / federated /
//! pooled conditions, evaluates per-device verification error, and writes
//! all report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::json;

use crate::config::{AggregatorChoice, ExperimentConfig, ImpostorSource, Mode};
use crate::data::{generate_identities, sample_cross_identity_impostors, FeatureVector, IdentityDataset};
use crate::error::{FedverError, Result};
use crate::eval::{
    compute_eer, score_supervised, score_unsupervised, summarize, t_test, DistributionSummary,
    TTestResult, TrialScore,
};
use crate::fed::{
    run_federation, run_individual_baseline, run_pooled_baseline, AggregatorMode, DeviceState,
    LocalTrainer, RoundRecord, SupervisedTrainer, UnsupervisedTrainer,
};
use crate::gan::{gan_sample, train_gan, GanModel};
use crate::model::{Autoencoder, Label, MlpVerifier};
use crate::param::ParamVector;
use crate::secure::FixedPointCodec;
use crate::seeding::{derive_seed, stream_rng};

/// Which training/aggregation pipeline produced a condition's models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Individual,
    FedPlain,
    FedSecure,
    Pooled,
}

impl System {
    pub fn as_str(self) -> &'static str {
        match self {
            System::Individual => "individual",
            System::FedPlain => "fed-plain",
            System::FedSecure => "fed-secure",
            System::Pooled => "pooled",
        }
    }
}

/// Where a condition's impostor samples come from (training for the
/// supervised verifier; evaluation trials for both modes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpostorKind {
    Cross,
    Gan,
}

impl ImpostorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ImpostorKind::Cross => "cross",
            ImpostorKind::Gan => "gan",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionSpec {
    pub mode: Mode,
    pub impostor: ImpostorKind,
    pub system: System,
}

impl ConditionSpec {
    pub fn name(&self) -> String {
        format!(
            "{}-{}-{}",
            self.mode.as_str(),
            self.impostor.as_str(),
            self.system.as_str()
        )
    }
}

/// One device's evaluation outcome under one condition.
#[derive(Debug, Clone, Copy)]
pub struct DeviceEval {
    pub device_id: u64,
    pub eer_percent: f64,
    pub threshold: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub name: String,
    pub spec: ConditionSpec,
    pub devices: Vec<DeviceEval>,
    pub summary: DistributionSummary,
    /// Model label (e.g. "global", "device3") -> parameter content hash.
    pub model_hashes: Vec<(String, String)>,
}

impl ConditionResult {
    pub fn eer_values(&self) -> Vec<f64> {
        self.devices.iter().map(|d| d.eer_percent).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub conditions: Vec<ConditionResult>,
    pub files: Vec<String>,
    pub duration_seconds: f64,
}

/// The condition list for a config: either the single configured pipeline
/// (with its individual and pooled references) or the full matrix.
pub fn plan_conditions(config: &ExperimentConfig) -> Vec<ConditionSpec> {
    if config.run_matrix {
        let mut plan = Vec::new();
        for impostor in [ImpostorKind::Cross, ImpostorKind::Gan] {
            for system in [System::Individual, System::FedPlain, System::FedSecure] {
                plan.push(ConditionSpec {
                    mode: Mode::Supervised,
                    impostor,
                    system,
                });
            }
        }
        plan.push(ConditionSpec {
            mode: Mode::Supervised,
            impostor: ImpostorKind::Cross,
            system: System::Pooled,
        });
        for system in [
            System::Individual,
            System::FedPlain,
            System::FedSecure,
            System::Pooled,
        ] {
            plan.push(ConditionSpec {
                mode: Mode::Unsupervised,
                impostor: ImpostorKind::Cross,
                system,
            });
        }
        return plan;
    }

    let impostor = match config.impostor_source {
        ImpostorSource::Gan => ImpostorKind::Gan,
        ImpostorSource::CrossIdentity | ImpostorSource::None => ImpostorKind::Cross,
    };
    let fed_system = match config.aggregator {
        AggregatorChoice::None => System::FedPlain,
        AggregatorChoice::Secure => System::FedSecure,
    };
    let mut plan = vec![
        ConditionSpec {
            mode: config.mode,
            impostor,
            system: System::Individual,
        },
        ConditionSpec {
            mode: config.mode,
            impostor,
            system: fed_system,
        },
    ];
    if config.pooled_baseline {
        plan.push(ConditionSpec {
            mode: config.mode,
            impostor,
            system: System::Pooled,
        });
    }
    plan
}

/// Draws evaluation impostor trials for one device from the *test*
/// partitions of the other identities, keeping them disjoint from the
/// train-partition impostors used during training.
fn sample_eval_impostors(
    target_identity: u64,
    pool: &[IdentityDataset],
    count: usize,
    seed: u64,
) -> Result<Vec<FeatureVector>> {
    let sources: Vec<&IdentityDataset> = pool
        .iter()
        .filter(|ds| ds.identity_id != target_identity && !ds.test_indices.is_empty())
        .collect();
    if sources.is_empty() {
        return Err(FedverError::invalid(format!(
            "no identity other than {target_identity} available for evaluation impostors"
        )));
    }
    use rand::Rng;
    let mut rng = stream_rng("eval.impostor", &[seed, target_identity]);
    Ok((0..count)
        .map(|_| {
            let source = sources[rng.gen_range(0..sources.len())];
            let idx = source.test_indices[rng.gen_range(0..source.test_indices.len())];
            source.samples[idx].clone()
        })
        .collect())
}

enum ConditionModels {
    PerDevice(BTreeMap<u64, ParamVector>),
    Shared(ParamVector),
}

impl ConditionModels {
    fn for_device(&self, device_id: u64) -> Result<&ParamVector> {
        match self {
            ConditionModels::Shared(p) => Ok(p),
            ConditionModels::PerDevice(map) => map.get(&device_id).ok_or_else(|| {
                FedverError::device(device_id, "no trained model for device")
            }),
        }
    }
}

struct ExperimentContext<'a> {
    config: &'a ExperimentConfig,
    identities: Vec<IdentityDataset>,
    gan: Option<GanModel>,
    verifier: MlpVerifier,
    autoencoder: Autoencoder,
}

impl ExperimentContext<'_> {
    fn trainer(&self, spec: &ConditionSpec) -> Box<dyn LocalTrainer + '_> {
        match spec.mode {
            Mode::Supervised => Box::new(SupervisedTrainer::new(
                self.verifier.clone(),
                self.config.validation_fraction,
            )),
            Mode::Unsupervised => Box::new(UnsupervisedTrainer::new(
                self.autoencoder.clone(),
                self.config.validation_fraction,
            )),
        }
    }

    /// Fresh device states for one condition. The supervised verifier sees
    /// genuine training samples plus the condition's impostor pool; the
    /// autoencoder trains on genuine samples only.
    fn build_devices(&self, spec: &ConditionSpec) -> Result<Vec<DeviceState>> {
        let config = self.config;
        let layout = match spec.mode {
            Mode::Supervised => self.verifier.layout(),
            Mode::Unsupervised => self.autoencoder.layout(),
        };
        (0..config.n_devices as u64)
            .map(|device_id| {
                let identity = self.identities[device_id as usize].clone();
                let impostors = match (spec.mode, spec.impostor) {
                    (Mode::Unsupervised, _) => Vec::new(),
                    (Mode::Supervised, ImpostorKind::Cross) => sample_cross_identity_impostors(
                        identity.identity_id,
                        &self.identities,
                        config.impostors_per_device,
                        derive_seed("experiment.train.impostor", &[config.seed]),
                    )?,
                    (Mode::Supervised, ImpostorKind::Gan) => gan_sample(
                        self.gan.as_ref().expect("gan trained before device builds"),
                        config.impostors_per_device,
                        derive_seed("experiment.gan.impostor", &[config.seed, device_id]),
                    )?,
                };
                let sample_count = identity.train_indices.len() + impostors.len();
                DeviceState::new(
                    device_id,
                    identity,
                    impostors,
                    ParamVector::zeros(layout.clone()),
                    sample_count,
                    derive_seed("experiment.device", &[config.seed, device_id]),
                )
            })
            .collect()
    }

    fn run_condition(
        &self,
        spec: &ConditionSpec,
        transcript: &mut Vec<serde_json::Value>,
    ) -> Result<ConditionResult> {
        let config = self.config;
        let name = spec.name();
        let mut devices = self.build_devices(spec)?;
        let trainer = self.trainer(spec);

        let codec = match spec.system {
            System::FedSecure => {
                let cc = config.codec.as_ref().ok_or_else(|| {
                    FedverError::config("codec", "required for the secure condition")
                })?;
                Some(FixedPointCodec::new(cc.clip_range, cc.bits, config.n_devices)?)
            }
            _ => None,
        };

        let (models, mut model_hashes) = match spec.system {
            System::Individual => {
                let map = run_individual_baseline(&devices, trainer.as_ref(), &config.optimizer)?;
                let hashes = map
                    .iter()
                    .map(|(id, p)| (format!("device{id}"), p.content_hash()))
                    .collect();
                (ConditionModels::PerDevice(map), hashes)
            }
            System::Pooled => {
                let params = run_pooled_baseline(
                    &devices,
                    trainer.as_ref(),
                    &config.optimizer,
                    derive_seed("experiment.pooled", &[config.seed]),
                )?;
                let hashes = vec![("pooled".to_string(), params.content_hash())];
                (ConditionModels::Shared(params), hashes)
            }
            System::FedPlain | System::FedSecure => {
                let mode = if spec.system == System::FedSecure {
                    AggregatorMode::Secure
                } else {
                    AggregatorMode::Plaintext
                };
                let records = run_federation(
                    &mut devices,
                    config.n_rounds,
                    mode,
                    trainer.as_ref(),
                    &config.optimizer,
                    config.weight_scheme,
                    codec.as_ref(),
                    config.seed,
                )?;
                for record in &records {
                    transcript.push(round_transcript_entry(&name, record));
                }
                let global = records.last().unwrap().global_model.clone();
                let hashes = vec![("global".to_string(), global.content_hash())];
                (ConditionModels::Shared(global), hashes)
            }
        };
        model_hashes.sort();

        let mut evals = Vec::with_capacity(devices.len());
        for device in &devices {
            let params = models.for_device(device.device_id)?;
            evals.push(self.evaluate_device(spec, device, params)?);
        }

        let eers: Vec<f64> = evals.iter().map(|e| e.eer_percent).collect();
        let summary = summarize(&eers, config.histogram_bins)?;
        Ok(ConditionResult {
            name,
            spec: *spec,
            devices: evals,
            summary,
            model_hashes,
        })
    }

    fn evaluate_device(
        &self,
        spec: &ConditionSpec,
        device: &DeviceState,
        params: &ParamVector,
    ) -> Result<DeviceEval> {
        let config = self.config;
        let genuine: Vec<&FeatureVector> = device.identity.test_samples().collect();
        let n_impostor = config.eval_impostors_per_device.unwrap_or(genuine.len());
        let impostors = match spec.impostor {
            ImpostorKind::Cross => sample_eval_impostors(
                device.identity.identity_id,
                &self.identities,
                n_impostor,
                derive_seed("experiment.eval.impostor", &[config.seed]),
            )?,
            ImpostorKind::Gan => gan_sample(
                self.gan.as_ref().expect("gan trained before evaluation"),
                n_impostor,
                derive_seed("experiment.eval.gan", &[config.seed, device.device_id]),
            )?,
        };

        let mut trials = Vec::with_capacity(genuine.len() + impostors.len());
        match spec.mode {
            Mode::Supervised => {
                let model = self.verifier.with_params(params.clone())?;
                for x in &genuine {
                    trials.push(TrialScore::new(score_supervised(&model, x)?, Label::Genuine)?);
                }
                for x in &impostors {
                    trials.push(TrialScore::new(score_supervised(&model, x)?, Label::Impostor)?);
                }
            }
            Mode::Unsupervised => {
                let encoder = self.autoencoder.with_params(params.clone())?;
                let enrollment: Vec<FeatureVector> =
                    device.identity.train_samples().cloned().collect();
                for x in &genuine {
                    trials.push(TrialScore::new(
                        score_unsupervised(&encoder, &enrollment, x)?,
                        Label::Genuine,
                    )?);
                }
                for x in &impostors {
                    trials.push(TrialScore::new(
                        score_unsupervised(&encoder, &enrollment, x)?,
                        Label::Impostor,
                    )?);
                }
            }
        }
        let eer = compute_eer(&trials)?;
        Ok(DeviceEval {
            device_id: device.device_id,
            eer_percent: eer.eer_percent(),
            threshold: eer.threshold,
            n_genuine: eer.n_genuine,
            n_impostor: eer.n_impostor,
        })
    }
}

fn round_transcript_entry(condition: &str, record: &RoundRecord) -> serde_json::Value {
    let losses: BTreeMap<String, f64> = record
        .per_device_train_reports
        .iter()
        .map(|(id, report)| (id.to_string(), report.final_train_loss))
        .collect();
    let epochs: BTreeMap<String, usize> = record
        .per_device_train_reports
        .iter()
        .map(|(id, report)| (id.to_string(), report.epochs_run))
        .collect();
    json!({
        "condition": condition,
        "round": record.round_index,
        "aggregator": record.aggregator_mode.as_str(),
        "participants": record.participants,
        "weights": record.weights,
        "global_model_hash": record.global_model.content_hash(),
        "final_train_loss": losses,
        "epochs_run": epochs,
    })
}

/// Runs the configured experiment end to end and writes every report file
/// into `config.output_dir`. Deterministic given the config (the manifest's
/// `duration_seconds` field is the one exception).
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let started = Instant::now();

    let mut synthesis = config.synthesis.clone();
    synthesis.seed = derive_seed("experiment.synth", &[config.seed]);
    let identities = generate_identities(&synthesis)?;
    let dimension = synthesis.dimension;

    let needs_gan = config.run_matrix || config.impostor_source == ImpostorSource::Gan;
    // The impostor generator is fit once, on the pooled training samples of
    // every identity, before any device training starts.
    let gan = if needs_gan {
        let pooled: Vec<FeatureVector> = identities
            .iter()
            .flat_map(|ds| ds.train_samples().cloned())
            .collect();
        let model = GanModel::new(
            config.gan.latent_dim,
            dimension,
            &config.gan.hidden_dims,
            &config.gan.hidden_dims,
            derive_seed("experiment.gan.init", &[config.seed]),
        )?;
        let train_config = config
            .gan
            .train_config(derive_seed("experiment.gan.train", &[config.seed]));
        let (trained, _) = train_gan(&model, &pooled, &train_config)?;
        Some(trained)
    } else {
        None
    };

    let mut verifier_dims = vec![dimension];
    verifier_dims.extend_from_slice(&config.hidden_dims);
    let verifier = MlpVerifier::new(&verifier_dims)?;

    let mut encoder_dims = vec![dimension];
    encoder_dims.extend_from_slice(&config.encoder_dims);
    let autoencoder = Autoencoder::new(&encoder_dims)?;

    let ctx = ExperimentContext {
        config,
        identities,
        gan,
        verifier,
        autoencoder,
    };

    let mut transcript = Vec::new();
    let mut conditions = Vec::new();
    for spec in plan_conditions(config) {
        let result = ctx
            .run_condition(&spec, &mut transcript)
            .map_err(|e| FedverError::invalid(format!("condition {}: {e}", spec.name())))?;
        conditions.push(result);
    }

    let duration_seconds = started.elapsed().as_secs_f64();
    let files = write_report_files(config, &conditions, &transcript, duration_seconds)?;
    Ok(ExperimentReport {
        config: config.clone(),
        conditions,
        files,
        duration_seconds,
    })
}

/// Pairs each condition with its natural reference for significance
/// testing: federated and pooled systems against the individual baseline
/// with the same mode and impostor source, plus secure against plaintext.
fn comparison_pairs(conditions: &[ConditionResult]) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    let find = |mode: Mode, impostor: ImpostorKind, system: System| {
        conditions
            .iter()
            .find(|c| c.spec == ConditionSpec { mode, impostor, system })
            .map(|c| c.name.clone())
    };
    for c in conditions {
        if c.spec.system == System::Individual {
            continue;
        }
        if let Some(baseline) = find(c.spec.mode, c.spec.impostor, System::Individual) {
            pairs.push((baseline, c.name.clone()));
        }
        if c.spec.system == System::FedSecure {
            if let Some(plain) = find(c.spec.mode, c.spec.impostor, System::FedPlain) {
                pairs.push((plain, c.name.clone()));
            }
        }
    }
    pairs
}

fn write_report_files(
    config: &ExperimentConfig,
    conditions: &[ConditionResult],
    transcript: &[serde_json::Value],
    duration_seconds: f64,
) -> Result<Vec<String>> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| FedverError::io(dir, e))?;
    let write = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| FedverError::io(&path, e))
    };

    write("config_echo.txt", config.to_config_string())?;

    let mut jsonl = String::new();
    for entry in transcript {
        jsonl.push_str(&entry.to_string());
        jsonl.push('\n');
    }
    write("transcript.jsonl", jsonl)?;

    let mut eer_csv = String::from("condition,device_id,eer_percent,threshold,n_genuine,n_impostor\n");
    for c in conditions {
        for d in &c.devices {
            eer_csv.push_str(&format!(
                "{},{},{:?},{:?},{},{}\n",
                c.name, d.device_id, d.eer_percent, d.threshold, d.n_genuine, d.n_impostor
            ));
        }
    }
    write("eer.csv", eer_csv)?;

    let mut summary_csv =
        String::from("condition,min,lower_quartile,median,upper_quartile,max\n");
    for c in conditions {
        let s = &c.summary;
        summary_csv.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?}\n",
            c.name, s.min, s.lower_quartile, s.median, s.upper_quartile, s.max
        ));
    }
    write("summary.csv", summary_csv)?;

    let mut hist_csv = String::from("condition,bin_index,bin_low,bin_high,count\n");
    for c in conditions {
        for (i, &count) in c.summary.counts.iter().enumerate() {
            hist_csv.push_str(&format!(
                "{},{},{:?},{:?},{}\n",
                c.name, i, c.summary.bin_edges[i], c.summary.bin_edges[i + 1], count
            ));
        }
    }
    write("histogram.csv", hist_csv)?;

    let mut tests = Vec::new();
    for (a, b) in comparison_pairs(conditions) {
        let entry = match compare_named(conditions, &a, &b) {
            Ok(result) => json!({
                "condition_a": a,
                "condition_b": b,
                "t_statistic": result.t_statistic,
                "degrees_of_freedom": result.degrees_of_freedom,
                "p_value": result.p_value,
                "significant_at_0_05": result.significant_at_0_05,
            }),
            // Degenerate EER vectors (e.g. every device at 0) have no
            // variance to test; record why instead of failing the run.
            Err(e) => json!({
                "condition_a": a,
                "condition_b": b,
                "error": e.to_string(),
            }),
        };
        tests.push(entry);
    }
    write(
        "ttest.json",
        format!("{:#}\n", serde_json::Value::Array(tests)),
    )?;

    let file_names = [
        "config_echo.txt",
        "transcript.jsonl",
        "eer.csv",
        "summary.csv",
        "histogram.csv",
        "ttest.json",
        "manifest.json",
    ];
    let hashes: BTreeMap<String, String> = conditions
        .iter()
        .flat_map(|c| {
            c.model_hashes
                .iter()
                .map(move |(label, hash)| (format!("{}/{label}", c.name), hash.clone()))
        })
        .collect();
    let manifest = json!({
        "artifact": "fedver",
        "format_version": 1,
        "seed": config.seed,
        "conditions": conditions.iter().map(|c| c.name.clone()).collect::<Vec<_>>(),
        "files": file_names,
        "model_hashes": hashes,
        "duration_seconds": duration_seconds,
    });
    write("manifest.json", format!("{manifest:#}\n"))?;

    Ok(file_names.iter().map(|s| s.to_string()).collect())
}

fn compare_named(conditions: &[ConditionResult], a: &str, b: &str) -> Result<TTestResult> {
    let get = |name: &str| {
        conditions
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| FedverError::UnknownCondition(name.to_string()))
    };
    t_test(&get(a)?.eer_values(), &get(b)?.eer_values())
}

/// Welch's t-test between the per-device EER vectors of two named
/// conditions from a finished run.
pub fn compare_conditions(
    report: &ExperimentReport,
    condition_a: &str,
    condition_b: &str,
) -> Result<TTestResult> {
    compare_named(&report.conditions, condition_a, condition_b)
}

/// Reads a written `eer.csv` back into condition -> per-device EER vectors,
/// so comparisons can run on a finished report directory.
pub fn load_eer_table(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| FedverError::io(path, e))?;
    let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(FedverError::Parse {
                line: idx + 1,
                message: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let eer: f64 = fields[2].parse().map_err(|_| FedverError::Parse {
            line: idx + 1,
            message: format!("invalid eer_percent {:?}", fields[2]),
        })?;
        table.entry(fields[0].to_string()).or_default().push(eer);
    }
    Ok(table)
}

/// Comparison against a report directory's `eer.csv`.
pub fn compare_from_dir(dir: &Path, condition_a: &str, condition_b: &str) -> Result<TTestResult> {
    let table = load_eer_table(&dir.join("eer.csv"))?;
    let get = |name: &str| {
        table
            .get(name)
            .ok_or_else(|| FedverError::UnknownCondition(name.to_string()))
    };
    t_test(get(condition_a)?, get(condition_b)?)
}

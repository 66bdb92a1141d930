//! Experiment configuration: a line-oriented `key = value` format with
//! dotted section prefixes (e.g. `optimizer.momentum = 0.9`). Unknown keys
//! are rejected so typos fail loudly instead of silently using a default.

use std::path::{Path, PathBuf};

use crate::data::SynthesisConfig;
use crate::error::{FedverError, Result};
use crate::fed::WeightScheme;
use crate::gan::GanTrainConfig;
use crate::model::{ClassWeighting, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Supervised,
    Unsupervised,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Unsupervised => "unsupervised",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorChoice {
    None,
    Secure,
}

impl AggregatorChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorChoice::None => "none",
            AggregatorChoice::Secure => "secure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpostorSource {
    CrossIdentity,
    Gan,
    None,
}

impl ImpostorSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ImpostorSource::CrossIdentity => "cross_identity",
            ImpostorSource::Gan => "gan",
            ImpostorSource::None => "none",
        }
    }
}

/// Fixed-point codec parameters; the device count is filled in at run time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    pub clip_range: f64,
    pub bits: u32,
}

/// GAN architecture and training settings for the impostor generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub disc_steps_per_gen_step: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            latent_dim: 8,
            hidden_dims: vec![16],
            iterations: 500,
            batch_size: 32,
            lr_generator: 0.05,
            lr_discriminator: 0.05,
            disc_steps_per_gen_step: 1,
        }
    }
}

impl GanConfig {
    pub fn train_config(&self, seed: u64) -> GanTrainConfig {
        GanTrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr_generator: self.lr_generator,
            lr_discriminator: self.lr_discriminator,
            disc_steps_per_gen_step: self.disc_steps_per_gen_step,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub aggregator: AggregatorChoice,
    pub impostor_source: ImpostorSource,
    pub n_devices: usize,
    pub n_rounds: usize,
    /// Training impostor samples supplied to each device.
    pub impostors_per_device: usize,
    /// Evaluation impostor trials per device; default equals each device's
    /// genuine trial count.
    pub eval_impostors_per_device: Option<usize>,
    /// Run the full condition matrix instead of the single configured
    /// condition.
    pub run_matrix: bool,
    pub pooled_baseline: bool,
    pub histogram_bins: usize,
    pub weight_scheme: WeightScheme,
    pub validation_fraction: f64,
    /// Hidden layer widths of the supervised verifier MLP.
    pub hidden_dims: Vec<usize>,
    /// Encoder widths after the input layer; the last entry is the
    /// bottleneck (embedding) dimension.
    pub encoder_dims: Vec<usize>,
    pub synthesis: SynthesisConfig,
    pub optimizer: OptimizerConfig,
    pub codec: Option<CodecConfig>,
    pub gan: GanConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Supervised,
            aggregator: AggregatorChoice::None,
            impostor_source: ImpostorSource::CrossIdentity,
            n_devices: 20,
            n_rounds: 1,
            impostors_per_device: 100,
            eval_impostors_per_device: None,
            run_matrix: false,
            pooled_baseline: true,
            histogram_bins: 10,
            weight_scheme: WeightScheme::Proportional,
            validation_fraction: 0.2,
            hidden_dims: vec![32, 16],
            encoder_dims: vec![32, 8],
            synthesis: SynthesisConfig::default(),
            optimizer: OptimizerConfig::default(),
            codec: None,
            gan: GanConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_devices < 1 {
            return Err(FedverError::config("n_devices", "must be at least 1"));
        }
        if self.n_devices > self.synthesis.n_identities {
            return Err(FedverError::config(
                "n_devices",
                format!(
                    "needs {} identities but synthesis.n_identities is {}",
                    self.n_devices, self.synthesis.n_identities
                ),
            ));
        }
        if self.n_rounds < 1 {
            return Err(FedverError::config("n_rounds", "must be at least 1"));
        }
        if self.histogram_bins < 1 {
            return Err(FedverError::config("histogram_bins", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(FedverError::config(
                "validation_fraction",
                "must be in [0, 1)",
            ));
        }
        if self.encoder_dims.is_empty() {
            return Err(FedverError::config("encoder_dims", "must not be empty"));
        }
        let needs_codec = self.aggregator == AggregatorChoice::Secure || self.run_matrix;
        match (&self.codec, needs_codec) {
            (None, true) => {
                return Err(FedverError::config(
                    "codec",
                    "required when aggregator = secure or run_matrix = true",
                ))
            }
            (Some(_), false) => {
                return Err(FedverError::config(
                    "codec",
                    "only valid when aggregator = secure or run_matrix = true",
                ))
            }
            _ => {}
        }
        if let Some(codec) = &self.codec {
            // Full constructor-level validation happens when the codec is
            // instantiated with the device count.
            if !(codec.clip_range.is_finite() && codec.clip_range > 0.0) {
                return Err(FedverError::config("codec.clip_range", "must be positive"));
            }
        }
        if !self.run_matrix {
            // The impostor generator only serves the supervised verifier;
            // the autoencoder never trains on impostors.
            if self.mode == Mode::Unsupervised && self.impostor_source == ImpostorSource::Gan {
                return Err(FedverError::config(
                    "impostor_source",
                    "gan applies to supervised mode only",
                ));
            }
            if self.mode == Mode::Supervised && self.impostor_source == ImpostorSource::None {
                return Err(FedverError::config(
                    "impostor_source",
                    "supervised mode needs impostor samples",
                ));
            }
        }
        self.optimizer.validate().map_err(|e| {
            FedverError::config("optimizer", e.to_string())
        })?;
        self.gan.train_config(0).validate().map_err(|e| {
            FedverError::config("gan", e.to_string())
        })?;
        Ok(())
    }

    /// Serializes every key in a fixed order; `parse` of the result yields
    /// an equal config.
    pub fn to_config_string(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("mode", self.mode.as_str().to_string());
        push("aggregator", self.aggregator.as_str().to_string());
        push("impostor_source", self.impostor_source.as_str().to_string());
        push("n_devices", self.n_devices.to_string());
        push("n_rounds", self.n_rounds.to_string());
        push("impostors_per_device", self.impostors_per_device.to_string());
        if let Some(n) = self.eval_impostors_per_device {
            push("eval_impostors_per_device", n.to_string());
        }
        push("run_matrix", self.run_matrix.to_string());
        push("pooled_baseline", self.pooled_baseline.to_string());
        push("histogram_bins", self.histogram_bins.to_string());
        push(
            "weight_scheme",
            match self.weight_scheme {
                WeightScheme::Proportional => "proportional",
                WeightScheme::Uniform => "uniform",
            }
            .to_string(),
        );
        push("validation_fraction", format!("{:?}", self.validation_fraction));
        push("hidden_dims", list(&self.hidden_dims));
        push("encoder_dims", list(&self.encoder_dims));
        push("seed", self.seed.to_string());
        push("output_dir", self.output_dir.display().to_string());
        push("synthesis.n_identities", self.synthesis.n_identities.to_string());
        push(
            "synthesis.samples_per_identity",
            self.synthesis.samples_per_identity.to_string(),
        );
        push("synthesis.dimension", self.synthesis.dimension.to_string());
        push(
            "synthesis.cluster_center_scale",
            format!("{:?}", self.synthesis.cluster_center_scale),
        );
        push(
            "synthesis.within_cluster_stddev",
            format!("{:?}", self.synthesis.within_cluster_stddev),
        );
        push("optimizer.momentum", format!("{:?}", self.optimizer.momentum));
        push("optimizer.weight_decay", format!("{:?}", self.optimizer.weight_decay));
        push("optimizer.lr_initial", format!("{:?}", self.optimizer.lr_initial));
        push("optimizer.lr_final", format!("{:?}", self.optimizer.lr_final));
        push("optimizer.epochs", self.optimizer.epochs.to_string());
        push("optimizer.batch_size", self.optimizer.batch_size.to_string());
        push("optimizer.patience", self.optimizer.patience.to_string());
        push(
            "optimizer.class_weighting",
            match self.optimizer.class_weighting {
                ClassWeighting::Mean => "mean",
                ClassWeighting::Balanced => "balanced",
            }
            .to_string(),
        );
        if let Some(codec) = &self.codec {
            push("codec.clip_range", format!("{:?}", codec.clip_range));
            push("codec.bits", codec.bits.to_string());
        }
        push("gan.latent_dim", self.gan.latent_dim.to_string());
        push("gan.hidden_dims", list(&self.gan.hidden_dims));
        push("gan.iterations", self.gan.iterations.to_string());
        push("gan.batch_size", self.gan.batch_size.to_string());
        push("gan.lr_generator", format!("{:?}", self.gan.lr_generator));
        push("gan.lr_discriminator", format!("{:?}", self.gan.lr_discriminator));
        push("gan.disc_steps_per_gen_step", self.gan.disc_steps_per_gen_step.to_string());
        s
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> FedverError {
    FedverError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| parse_err(line, format!("invalid value {value:?} for key {key:?}")))
}

fn parse_usize_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_value(key, part.trim(), line))
        .collect()
}

/// Parses the line-oriented config text. Lines are `key = value`; blank
/// lines and lines starting with `#` are skipped; unknown keys are errors.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    let mut codec_range: Option<f64> = None;
    let mut codec_bits: Option<u32> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("expected `key = value`, got {line:?}")))?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(parse_err(line_no, format!("empty value for key {key:?}")));
        }
        match key {
            "mode" => {
                config.mode = match value {
                    "supervised" => Mode::Supervised,
                    "unsupervised" => Mode::Unsupervised,
                    _ => return Err(parse_err(line_no, format!("unknown mode {value:?}"))),
                }
            }
            "aggregator" => {
                config.aggregator = match value {
                    "none" => AggregatorChoice::None,
                    "secure" => AggregatorChoice::Secure,
                    _ => return Err(parse_err(line_no, format!("unknown aggregator {value:?}"))),
                }
            }
            "impostor_source" => {
                config.impostor_source = match value {
                    "cross_identity" => ImpostorSource::CrossIdentity,
                    "gan" => ImpostorSource::Gan,
                    "none" => ImpostorSource::None,
                    _ => {
                        return Err(parse_err(
                            line_no,
                            format!("unknown impostor_source {value:?}"),
                        ))
                    }
                }
            }
            "n_devices" => config.n_devices = parse_value(key, value, line_no)?,
            "n_rounds" => config.n_rounds = parse_value(key, value, line_no)?,
            "impostors_per_device" => {
                config.impostors_per_device = parse_value(key, value, line_no)?
            }
            "eval_impostors_per_device" => {
                config.eval_impostors_per_device = Some(parse_value(key, value, line_no)?)
            }
            "run_matrix" => config.run_matrix = parse_value(key, value, line_no)?,
            "pooled_baseline" => config.pooled_baseline = parse_value(key, value, line_no)?,
            "histogram_bins" => config.histogram_bins = parse_value(key, value, line_no)?,
            "weight_scheme" => {
                config.weight_scheme = match value {
                    "proportional" => WeightScheme::Proportional,
                    "uniform" => WeightScheme::Uniform,
                    _ => {
                        return Err(parse_err(
                            line_no,
                            format!("unknown weight_scheme {value:?}"),
                        ))
                    }
                }
            }
            "validation_fraction" => {
                config.validation_fraction = parse_value(key, value, line_no)?
            }
            "hidden_dims" => config.hidden_dims = parse_usize_list(key, value, line_no)?,
            "encoder_dims" => config.encoder_dims = parse_usize_list(key, value, line_no)?,
            "seed" => config.seed = parse_value(key, value, line_no)?,
            "output_dir" => config.output_dir = PathBuf::from(value),
            "synthesis.n_identities" => {
                config.synthesis.n_identities = parse_value(key, value, line_no)?
            }
            "synthesis.samples_per_identity" => {
                config.synthesis.samples_per_identity = parse_value(key, value, line_no)?
            }
            "synthesis.dimension" => {
                config.synthesis.dimension = parse_value(key, value, line_no)?
            }
            "synthesis.cluster_center_scale" => {
                config.synthesis.cluster_center_scale = parse_value(key, value, line_no)?
            }
            "synthesis.within_cluster_stddev" => {
                config.synthesis.within_cluster_stddev = parse_value(key, value, line_no)?
            }
            "optimizer.momentum" => config.optimizer.momentum = parse_value(key, value, line_no)?,
            "optimizer.weight_decay" => {
                config.optimizer.weight_decay = parse_value(key, value, line_no)?
            }
            "optimizer.lr_initial" => {
                config.optimizer.lr_initial = parse_value(key, value, line_no)?
            }
            "optimizer.lr_final" => {
                config.optimizer.lr_final = parse_value(key, value, line_no)?
            }
            "optimizer.epochs" => config.optimizer.epochs = parse_value(key, value, line_no)?,
            "optimizer.batch_size" => {
                config.optimizer.batch_size = parse_value(key, value, line_no)?
            }
            "optimizer.patience" => config.optimizer.patience = parse_value(key, value, line_no)?,
            "optimizer.class_weighting" => {
                config.optimizer.class_weighting = match value {
                    "mean" => ClassWeighting::Mean,
                    "balanced" => ClassWeighting::Balanced,
                    _ => {
                        return Err(parse_err(
                            line_no,
                            format!("unknown class_weighting {value:?}"),
                        ))
                    }
                }
            }
            "codec.clip_range" => codec_range = Some(parse_value(key, value, line_no)?),
            "codec.bits" => codec_bits = Some(parse_value(key, value, line_no)?),
            "gan.latent_dim" => config.gan.latent_dim = parse_value(key, value, line_no)?,
            "gan.hidden_dims" => config.gan.hidden_dims = parse_usize_list(key, value, line_no)?,
            "gan.iterations" => config.gan.iterations = parse_value(key, value, line_no)?,
            "gan.batch_size" => config.gan.batch_size = parse_value(key, value, line_no)?,
            "gan.lr_generator" => config.gan.lr_generator = parse_value(key, value, line_no)?,
            "gan.lr_discriminator" => {
                config.gan.lr_discriminator = parse_value(key, value, line_no)?
            }
            "gan.disc_steps_per_gen_step" => {
                config.gan.disc_steps_per_gen_step = parse_value(key, value, line_no)?
            }
            _ => return Err(parse_err(line_no, format!("unknown key {key:?}"))),
        }
    }

    match (codec_range, codec_bits) {
        (None, None) => {}
        (Some(clip_range), Some(bits)) => config.codec = Some(CodecConfig { clip_range, bits }),
        _ => {
            return Err(FedverError::config(
                "codec",
                "both codec.clip_range and codec.bits are required",
            ))
        }
    }

    config.validate()?;
    Ok(config)
}

/// Loads and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FedverError::io(path, e))?;
    parse_config(&text)
}

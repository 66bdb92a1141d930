//! Small MLP GAN for on-device impostor synthesis.
//!
//! The generator maps standard-Gaussian latents to feature vectors; the
//! discriminator scores real-vs-generated. Training alternates SGD on the
//! minimax objective, with the non-saturating generator loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::FeatureVector;
use crate::error::{FedverError, Result};
use crate::mlp::{Activation, Mlp};
use crate::model::{init_params, InitScheme};
use crate::param::ParamVector;
use crate::seeding::stream_rng;

pub const DEFAULT_LATENT_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GanModel {
    generator: Mlp,
    discriminator: Mlp,
    latent_dim: usize,
    gen_params: ParamVector,
    disc_params: ParamVector,
}

impl GanModel {
    /// Builds a generator `latent_dim -> gen_hidden.. -> data_dim` (linear
    /// output) and discriminator `data_dim -> disc_hidden.. -> 1` (sigmoid),
    /// initialized with the uniform-scaled scheme from `seed`.
    pub fn new(
        latent_dim: usize,
        data_dim: usize,
        gen_hidden: &[usize],
        disc_hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if latent_dim == 0 || data_dim == 0 {
            return Err(FedverError::invalid("gan dimensions must be positive"));
        }
        let mut gen_dims = vec![latent_dim];
        gen_dims.extend_from_slice(gen_hidden);
        gen_dims.push(data_dim);
        let generator = Mlp::with_hidden_tanh(gen_dims, Activation::Identity)?;

        let mut disc_dims = vec![data_dim];
        disc_dims.extend_from_slice(disc_hidden);
        disc_dims.push(1);
        let discriminator = Mlp::with_hidden_tanh(disc_dims, Activation::Sigmoid)?;

        let gen_params = init_params(&generator.layout("gen."), InitScheme::UniformScaled, seed);
        let disc_params = init_params(
            &discriminator.layout("disc."),
            InitScheme::UniformScaled,
            seed.wrapping_add(1),
        );
        Ok(GanModel {
            generator,
            discriminator,
            latent_dim,
            gen_params,
            disc_params,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.generator.output_dim()
    }

    pub fn generator_params(&self) -> &ParamVector {
        &self.gen_params
    }

    pub fn discriminator_params(&self) -> &ParamVector {
        &self.disc_params
    }

    /// Same architecture with replaced discriminator parameters.
    pub fn with_discriminator_params(&self, params: ParamVector) -> Result<GanModel> {
        if !params.same_layout(&self.disc_params) {
            return Err(FedverError::LayoutMismatch(
                "discriminator parameter layout differs".to_string(),
            ));
        }
        let mut model = self.clone();
        model.disc_params = params;
        Ok(model)
    }

    pub fn generate(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.generator.forward(self.gen_params.values(), z)
    }

    pub fn discriminate(&self, x: &[f64]) -> Result<f64> {
        Ok(self.discriminator.forward(self.disc_params.values(), x)?[0])
    }

    /// Shared parameter-record format with a small GAN header.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"FVGN");
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&(self.latent_dim as u32).to_le_bytes());
        for dims in [self.generator.dims(), self.discriminator.dims()] {
            out.push(dims.len() as u8);
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for params in [&self.gen_params, &self.disc_params] {
            let bytes = params.to_bytes();
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<GanModel> {
        let invalid = || FedverError::invalid("truncated gan record");
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(invalid());
            }
            let out = &bytes[pos..pos + n];
            pos += n;
            Ok(out)
        };
        if take(4)? != b"FVGN" {
            return Err(FedverError::invalid("bad gan record magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != 1 {
            return Err(FedverError::invalid("unsupported gan record version"));
        }
        let latent_dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut all_dims = Vec::new();
        for _ in 0..2 {
            let n = take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(n);
            for _ in 0..n {
                dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            all_dims.push(dims);
        }
        let mut params = Vec::new();
        for _ in 0..2 {
            let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            params.push(ParamVector::from_bytes(take(len)?)?);
        }
        let generator = Mlp::with_hidden_tanh(all_dims[0].clone(), Activation::Identity)?;
        let discriminator = Mlp::with_hidden_tanh(all_dims[1].clone(), Activation::Sigmoid)?;
        let disc_params = params.pop().unwrap();
        let gen_params = params.pop().unwrap();
        if gen_params.len() != generator.param_count()
            || disc_params.len() != discriminator.param_count()
        {
            return Err(FedverError::invalid("gan record parameter count mismatch"));
        }
        Ok(GanModel {
            generator,
            discriminator,
            latent_dim,
            gen_params,
            disc_params,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub disc_steps_per_gen_step: usize,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            iterations: 2000,
            batch_size: 32,
            lr_generator: 0.05,
            lr_discriminator: 0.05,
            disc_steps_per_gen_step: 1,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FedverError::config("batch_size", "must be positive"));
        }
        if self.disc_steps_per_gen_step == 0 {
            return Err(FedverError::config(
                "disc_steps_per_gen_step",
                "must be positive",
            ));
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(FedverError::config("lr_generator", "learning rates must be positive"));
        }
        Ok(())
    }
}

/// Per-step loss traces recorded during GAN training.
#[derive(Debug, Clone, Default)]
pub struct GanTraces {
    pub discriminator_losses: Vec<f64>,
    pub generator_losses: Vec<f64>,
}

/// Discriminator loss/gradient on a real batch plus a generated batch:
/// `-(mean ln D(x) + mean ln(1 - D(G(z))))`.
pub fn discriminator_loss_and_gradient(
    model: &GanModel,
    real: &[&FeatureVector],
    fake: &[Vec<f64>],
) -> Result<(f64, ParamVector)> {
    if real.is_empty() || fake.is_empty() {
        return Err(FedverError::invalid("empty discriminator batch"));
    }
    let params = model.disc_params.values();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let w_real = 1.0 / real.len() as f64;
    for x in real {
        let trace = model.discriminator.forward_trace(params, x.values())?;
        let score = trace.output()[0];
        loss -= w_real * score.ln();
        let delta = [w_real * (score - 1.0)];
        model
            .discriminator
            .accumulate_backward(params, &trace, &delta, &mut grad)?;
    }
    let w_fake = 1.0 / fake.len() as f64;
    for x in fake {
        let trace = model.discriminator.forward_trace(params, x)?;
        let score = trace.output()[0];
        loss -= w_fake * (1.0 - score).ln();
        let delta = [w_fake * score];
        model
            .discriminator
            .accumulate_backward(params, &trace, &delta, &mut grad)?;
    }
    Ok((loss, model.disc_params.with_values(grad)?))
}

/// Non-saturating generator loss/gradient: `-mean ln D(G(z))`,
/// backpropagated through the (frozen) discriminator into the generator.
pub fn generator_loss_and_gradient(
    model: &GanModel,
    latents: &[Vec<f64>],
) -> Result<(f64, ParamVector)> {
    if latents.is_empty() {
        return Err(FedverError::invalid("empty generator batch"));
    }
    let gen_params = model.gen_params.values();
    let disc_params = model.disc_params.values();
    let mut grad = vec![0.0; gen_params.len()];
    let mut disc_scratch = vec![0.0; disc_params.len()];
    let mut loss = 0.0;
    let w = 1.0 / latents.len() as f64;
    for z in latents {
        let gen_trace = model.generator.forward_trace(gen_params, z)?;
        let fake = gen_trace.output();
        let disc_trace = model.discriminator.forward_trace(disc_params, fake)?;
        let score = disc_trace.output()[0];
        loss -= w * score.ln();
        let delta = [w * (score - 1.0)];
        let input_grad = model.discriminator.accumulate_backward(
            disc_params,
            &disc_trace,
            &delta,
            &mut disc_scratch,
        )?;
        // Generator output is linear, so dL/dz at its output equals dL/da.
        model
            .generator
            .accumulate_backward(gen_params, &gen_trace, &input_grad, &mut grad)?;
    }
    Ok((loss, model.gen_params.with_values(grad)?))
}

/// Alternating SGD on the minimax objective; deterministic given
/// `config.seed`. `config.iterations == 0` returns the model unchanged.
pub fn train_gan(
    model: &GanModel,
    data: &[FeatureVector],
    config: &GanTrainConfig,
) -> Result<(GanModel, GanTraces)> {
    config.validate()?;
    if data.len() < config.batch_size {
        return Err(FedverError::invalid(format!(
            "gan training needs at least batch_size ({}) samples, got {}",
            config.batch_size,
            data.len()
        )));
    }
    if data.iter().any(|x| x.dimension() != model.data_dim()) {
        return Err(FedverError::DimensionMismatch {
            expected: model.data_dim(),
            actual: data.iter().map(FeatureVector::dimension).max().unwrap_or(0),
        });
    }

    let mut model = model.clone();
    let mut traces = GanTraces::default();
    let mut rng = stream_rng("gan.train", &[config.seed]);

    for _ in 0..config.iterations {
        for _ in 0..config.disc_steps_per_gen_step {
            let real: Vec<&FeatureVector> = (0..config.batch_size)
                .map(|_| &data[rng.gen_range(0..data.len())])
                .collect();
            let fake: Vec<Vec<f64>> = (0..config.batch_size)
                .map(|_| {
                    let z: Vec<f64> = (0..model.latent_dim)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    model.generate(&z)
                })
                .collect::<Result<_>>()?;
            let (loss, grad) = discriminator_loss_and_gradient(&model, &real, &fake)?;
            traces.discriminator_losses.push(loss);
            let updated: Vec<f64> = model
                .disc_params
                .values()
                .iter()
                .zip(grad.values())
                .map(|(p, g)| p - config.lr_discriminator * g)
                .collect();
            model.disc_params = model.disc_params.with_values(updated)?;
        }

        let latents: Vec<Vec<f64>> = (0..config.batch_size)
            .map(|_| {
                (0..model.latent_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let (loss, grad) = generator_loss_and_gradient(&model, &latents)?;
        traces.generator_losses.push(loss);
        let updated: Vec<f64> = model
            .gen_params
            .values()
            .iter()
            .zip(grad.values())
            .map(|(p, g)| p - config.lr_generator * g)
            .collect();
        model.gen_params = model.gen_params.with_values(updated)?;
    }
    Ok((model, traces))
}

/// Draws `count` synthetic vectors, each `generator(z)` with z standard
/// Gaussian; deterministic given `seed`.
pub fn gan_sample(model: &GanModel, count: usize, seed: u64) -> Result<Vec<FeatureVector>> {
    if count < 1 {
        return Err(FedverError::invalid("sample count must be at least 1"));
    }
    let mut rng = stream_rng("gan.sample", &[seed]);
    (0..count)
        .map(|_| {
            let z: Vec<f64> = (0..model.latent_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            FeatureVector::new(model.generate(&z)?)
        })
        .collect()
}

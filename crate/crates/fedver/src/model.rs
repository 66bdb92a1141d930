//! The supervised verifier, the unsupervised autoencoder, their losses and
//! gradients, parameter initialization, and local mini-batch SGD with
//! momentum, weight decay, log-decaying learning rate, and early stopping.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::FeatureVector;
use crate::error::{FedverError, Result};
use crate::mlp::{Activation, Mlp};
use crate::param::{Layout, ParamVector};
use crate::seeding::stream_rng;

/// Trial/training label: genuine (target 1) or impostor (target 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Genuine,
    Impostor,
}

impl Label {
    pub fn target(self) -> f64 {
        match self {
            Label::Genuine => 1.0,
            Label::Impostor => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Genuine => "genuine",
            Label::Impostor => "impostor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: FeatureVector,
    pub label: Label,
}

/// How per-sample losses are combined across the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassWeighting {
    /// Plain mean over the batch.
    Mean,
    /// Each class contributes equally; guards against the impostor-heavy
    /// batches collapsing the model to "always impostor".
    Balanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Early-stopping epochs without validation improvement.
    pub patience: usize,
    pub class_weighting: ClassWeighting,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_initial: 1e-2,
            lr_final: 1e-8,
            epochs: 100,
            batch_size: 64,
            patience: 10,
            class_weighting: ClassWeighting::Balanced,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FedverError::config("momentum", "must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(FedverError::config("weight_decay", "must be non-negative"));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(FedverError::config("lr_initial", "learning rates must be positive"));
        }
        if self.lr_final > self.lr_initial {
            return Err(FedverError::config("lr_final", "must not exceed lr_initial"));
        }
        if self.epochs == 0 {
            return Err(FedverError::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(FedverError::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Log-decaying schedule: lr(0) = lr_initial, lr(T-1) = lr_final.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_initial;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_initial * (self.lr_final / self.lr_initial).powf(frac)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub final_validation_loss: Option<f64>,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Zeros,
    UniformScaled,
}

/// Initializes parameters: `UniformScaled` draws weights uniformly in
/// ±sqrt(6/(fan_in+fan_out)) and zeroes biases.
pub fn init_params(layout: &Layout, scheme: InitScheme, seed: u64) -> ParamVector {
    match scheme {
        InitScheme::Zeros => ParamVector::zeros(layout.clone()),
        InitScheme::UniformScaled => {
            let mut rng = stream_rng("init", &[seed]);
            let mut values = Vec::new();
            for entry in layout {
                if entry.name.ends_with(".bias") || entry.shape.len() < 2 {
                    values.extend(std::iter::repeat_n(0.0, entry.len()));
                } else {
                    let fan_out = entry.shape[0] as f64;
                    let fan_in = entry.shape[1] as f64;
                    let bound = (6.0 / (fan_in + fan_out)).sqrt();
                    values.extend((0..entry.len()).map(|_| rng.gen_range(-bound..=bound)));
                }
            }
            ParamVector::new(layout.clone(), values).expect("layout length matches by construction")
        }
    }
}

fn sample_weights(labels: &[Label], weighting: ClassWeighting) -> Vec<f64> {
    let n = labels.len() as f64;
    match weighting {
        ClassWeighting::Mean => vec![1.0 / n; labels.len()],
        ClassWeighting::Balanced => {
            let n_genuine = labels.iter().filter(|l| **l == Label::Genuine).count();
            let n_impostor = labels.len() - n_genuine;
            if n_genuine == 0 || n_impostor == 0 {
                return vec![1.0 / n; labels.len()];
            }
            labels
                .iter()
                .map(|l| match l {
                    Label::Genuine => 0.5 / n_genuine as f64,
                    Label::Impostor => 0.5 / n_impostor as f64,
                })
                .collect()
        }
    }
}

/// L2 penalty over weight entries (biases excluded) and its gradient added
/// in place.
fn add_weight_decay(layout: &Layout, params: &[f64], weight_decay: f64, grad: &mut [f64]) -> f64 {
    if weight_decay == 0.0 {
        return 0.0;
    }
    let mut penalty = 0.0;
    let mut offset = 0;
    for entry in layout {
        let len = entry.len();
        if !entry.name.ends_with(".bias") {
            for i in offset..offset + len {
                penalty += params[i] * params[i];
                grad[i] += weight_decay * params[i];
            }
        }
        offset += len;
    }
    weight_decay * penalty / 2.0
}

// ---------------------------------------------------------------------------
// Supervised verifier
// ---------------------------------------------------------------------------

/// MLP verifier: tanh hidden units, single sigmoid output read as the
/// genuine-probability score.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpVerifier {
    mlp: Mlp,
    params: ParamVector,
}

impl MlpVerifier {
    /// `layer_dims` runs input dimension through hidden sizes; the single
    /// sigmoid output is appended automatically.
    pub fn new(layer_dims: &[usize]) -> Result<Self> {
        let mut dims = layer_dims.to_vec();
        dims.push(1);
        let mlp = Mlp::with_hidden_tanh(dims, Activation::Sigmoid)?;
        let params = ParamVector::zeros(mlp.layout(""));
        Ok(MlpVerifier { mlp, params })
    }

    pub fn layout(&self) -> &Layout {
        self.params.layout()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if !params.same_layout(&self.params) {
            return Err(FedverError::LayoutMismatch(
                "verifier parameters have a different layout".into(),
            ));
        }
        Ok(MlpVerifier {
            mlp: self.mlp.clone(),
            params,
        })
    }

    pub fn forward(&self, x: &FeatureVector) -> Result<f64> {
        let out = self.mlp.forward(self.params.values(), x.values())?;
        Ok(out[0])
    }
}

/// Verification score of `x` under the supervised model; strictly in (0,1).
pub fn forward_verifier(model: &MlpVerifier, x: &FeatureVector) -> Result<f64> {
    model.forward(x)
}

/// Mean binary cross-entropy (per `weighting`) plus `weight_decay/2` times
/// the squared L2 norm of the weights, with its exact gradient.
pub fn loss_and_gradient_verifier(
    model: &MlpVerifier,
    batch: &[LabeledSample],
    weight_decay: f64,
    weighting: ClassWeighting,
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(FedverError::invalid("empty batch"));
    }
    let params = model.params.values();
    let labels: Vec<Label> = batch.iter().map(|s| s.label).collect();
    let weights = sample_weights(&labels, weighting);

    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (sample, &w) in batch.iter().zip(&weights) {
        let trace = model.mlp.forward_trace(params, sample.x.values())?;
        let score = trace.output()[0];
        let y = sample.label.target();
        loss -= w * (y * score.ln() + (1.0 - y) * (1.0 - score).ln());
        // dL/dz for sigmoid + cross-entropy.
        let delta = [w * (score - y)];
        model
            .mlp
            .accumulate_backward(params, &trace, &delta, &mut grad)?;
    }
    loss += add_weight_decay(model.params.layout(), params, weight_decay, &mut grad);
    Ok((loss, model.params.with_values(grad)?))
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

/// Symmetric autoencoder. Hidden layers are tanh; the bottleneck and the
/// reconstruction output are linear. After training, the decoder is
/// discarded and [`encode`] provides the verification embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    mlp: Mlp,
    n_encoder_layers: usize,
    params: ParamVector,
}

impl Autoencoder {
    /// `encoder_dims` runs input dimension through the bottleneck; the
    /// decoder mirrors it back to the input dimension.
    pub fn new(encoder_dims: &[usize]) -> Result<Self> {
        if encoder_dims.len() < 2 {
            return Err(FedverError::invalid(
                "encoder needs at least input and bottleneck dims",
            ));
        }
        let n_encoder_layers = encoder_dims.len() - 1;
        let mut dims = encoder_dims.to_vec();
        dims.extend(encoder_dims.iter().rev().skip(1));

        let n_layers = dims.len() - 1;
        let mut activations = vec![Activation::Tanh; n_layers];
        activations[n_encoder_layers - 1] = Activation::Identity; // bottleneck
        activations[n_layers - 1] = Activation::Identity; // reconstruction
        let mlp = Mlp::new(dims, activations)?;
        let params = ParamVector::zeros(mlp.layout(""));
        Ok(Autoencoder {
            mlp,
            n_encoder_layers,
            params,
        })
    }

    pub fn layout(&self) -> &Layout {
        self.params.layout()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.mlp.dims()[self.n_encoder_layers]
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if !params.same_layout(&self.params) {
            return Err(FedverError::LayoutMismatch(
                "autoencoder parameters have a different layout".into(),
            ));
        }
        Ok(Autoencoder {
            mlp: self.mlp.clone(),
            n_encoder_layers: self.n_encoder_layers,
            params,
        })
    }

    pub fn reconstruct(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        self.mlp.forward(self.params.values(), x.values())
    }
}

/// Encoder forward pass: the prefix of the full autoencoder pass.
pub fn encode(model: &Autoencoder, x: &FeatureVector) -> Result<Vec<f64>> {
    let trace =
        model
            .mlp
            .forward_trace_prefix(model.params.values(), x.values(), model.n_encoder_layers)?;
    Ok(trace.output().to_vec())
}

/// Mean squared reconstruction error (mean over coordinates and batch) plus
/// the weight-decay penalty, with its exact gradient.
pub fn loss_and_gradient_autoencoder(
    model: &Autoencoder,
    batch: &[FeatureVector],
    weight_decay: f64,
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(FedverError::invalid("empty batch"));
    }
    let params = model.params.values();
    let d = model.input_dim() as f64;
    let w = 1.0 / batch.len() as f64;

    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for x in batch {
        let trace = model.mlp.forward_trace(params, x.values())?;
        let recon = trace.output();
        let mut delta = Vec::with_capacity(recon.len());
        for (r, t) in recon.iter().zip(x.values()) {
            let diff = r - t;
            loss += w * diff * diff / d;
            delta.push(w * 2.0 * diff / d);
        }
        model
            .mlp
            .accumulate_backward(params, &trace, &delta, &mut grad)?;
    }
    loss += add_weight_decay(model.params.layout(), params, weight_decay, &mut grad);
    Ok((loss, model.params.with_values(grad)?))
}

// ---------------------------------------------------------------------------
// Local training
// ---------------------------------------------------------------------------

/// Objective handed to the shared SGD loop: batch loss/gradient over sample
/// indices plus a validation loss.
pub(crate) trait SgdObjective {
    fn n_train(&self) -> usize;
    fn loss_grad(&self, params: &ParamVector, batch: &[usize]) -> Result<(f64, ParamVector)>;
    fn validation_loss(&self, params: &ParamVector) -> Result<Option<f64>>;
}

/// Mini-batch SGD with momentum and weight decay, per-epoch shuffling seeded
/// from (seed, epoch), log-decaying learning rate, and early stopping on the
/// validation loss. Returns the best-validation parameters (final parameters
/// when no validation data is supplied).
pub(crate) fn train_sgd<O: SgdObjective>(
    objective: &O,
    init: &ParamVector,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<(ParamVector, TrainReport)> {
    opt.validate()?;
    let n = objective.n_train();
    if n == 0 {
        return Err(FedverError::invalid("empty training data"));
    }

    let mut params = init.clone();
    let mut velocity = vec![0.0; params.len()];
    let mut loss_trace = Vec::new();
    let mut best: Option<(f64, ParamVector)> = None;
    let mut epochs_since_improve = 0;
    let mut epochs_run = 0;
    let mut final_validation_loss = None;

    for epoch in 0..opt.epochs {
        let lr = opt.learning_rate(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng("epoch", &[seed, epoch as u64]));

        let mut epoch_loss = 0.0;
        for batch in order.chunks(opt.batch_size) {
            let (loss, grad) = objective.loss_grad(&params, batch)?;
            epoch_loss += loss * batch.len() as f64;
            let new_values: Vec<f64> = params
                .values()
                .iter()
                .zip(velocity.iter_mut().zip(grad.values()))
                .map(|(&p, (v, &g))| {
                    *v = opt.momentum * *v - lr * g;
                    p + *v
                })
                .collect();
            params = params.with_values(new_values)?;
        }
        epoch_loss /= n as f64;
        loss_trace.push(epoch_loss);
        epochs_run = epoch + 1;

        if let Some(val) = objective.validation_loss(&params)? {
            final_validation_loss = Some(val);
            let improved = best.as_ref().is_none_or(|(b, _)| val < *b);
            if improved {
                best = Some((val, params.clone()));
                epochs_since_improve = 0;
            } else {
                epochs_since_improve += 1;
                if epochs_since_improve >= opt.patience {
                    break;
                }
            }
        }
    }

    let final_train_loss = *loss_trace.last().unwrap();
    let (final_params, final_validation_loss) = match best {
        Some((val, p)) => (p, Some(val)),
        None => (params, final_validation_loss),
    };
    Ok((
        final_params,
        TrainReport {
            epochs_run,
            final_train_loss,
            final_validation_loss,
            loss_trace,
        },
    ))
}

struct VerifierObjective<'a> {
    model: &'a MlpVerifier,
    train: &'a [LabeledSample],
    validation: &'a [LabeledSample],
    opt: &'a OptimizerConfig,
}

impl SgdObjective for VerifierObjective<'_> {
    fn n_train(&self) -> usize {
        self.train.len()
    }

    fn loss_grad(&self, params: &ParamVector, batch: &[usize]) -> Result<(f64, ParamVector)> {
        let samples: Vec<LabeledSample> = batch.iter().map(|&i| self.train[i].clone()).collect();
        let model = self.model.with_params(params.clone())?;
        loss_and_gradient_verifier(
            &model,
            &samples,
            self.opt.weight_decay,
            self.opt.class_weighting,
        )
    }

    fn validation_loss(&self, params: &ParamVector) -> Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let model = self.model.with_params(params.clone())?;
        let (loss, _) =
            loss_and_gradient_verifier(&model, self.validation, 0.0, self.opt.class_weighting)?;
        Ok(Some(loss))
    }
}

/// Local training of the supervised verifier; deterministic given `seed`.
pub fn train_verifier(
    model: &MlpVerifier,
    train: &[LabeledSample],
    validation: &[LabeledSample],
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<(ParamVector, TrainReport)> {
    let objective = VerifierObjective {
        model,
        train,
        validation,
        opt,
    };
    train_sgd(&objective, model.params(), opt, seed)
}

struct AutoencoderObjective<'a> {
    model: &'a Autoencoder,
    train: &'a [FeatureVector],
    validation: &'a [FeatureVector],
    opt: &'a OptimizerConfig,
}

impl SgdObjective for AutoencoderObjective<'_> {
    fn n_train(&self) -> usize {
        self.train.len()
    }

    fn loss_grad(&self, params: &ParamVector, batch: &[usize]) -> Result<(f64, ParamVector)> {
        let samples: Vec<FeatureVector> = batch.iter().map(|&i| self.train[i].clone()).collect();
        let model = self.model.with_params(params.clone())?;
        loss_and_gradient_autoencoder(&model, &samples, self.opt.weight_decay)
    }

    fn validation_loss(&self, params: &ParamVector) -> Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let model = self.model.with_params(params.clone())?;
        let (loss, _) = loss_and_gradient_autoencoder(&model, self.validation, 0.0)?;
        Ok(Some(loss))
    }
}

/// Local training of the autoencoder; deterministic given `seed`.
pub fn train_autoencoder(
    model: &Autoencoder,
    train: &[FeatureVector],
    validation: &[FeatureVector],
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<(ParamVector, TrainReport)> {
    let objective = AutoencoderObjective {
        model,
        train,
        validation,
        opt,
    };
    train_sgd(&objective, model.params(), opt, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::LayoutEntry;
    use crate::testsupport::{finite_difference_grad, max_relative_error};
    use rand::Rng;

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector::new(values.to_vec()).unwrap()
    }

    fn labeled(values: &[f64], label: Label) -> LabeledSample {
        LabeledSample {
            x: fv(values),
            label,
        }
    }

    #[test]
    fn zero_params_score_half() {
        let model = MlpVerifier::new(&[4, 3]).unwrap();
        let score = forward_verifier(&model, &fv(&[1.0, -2.0, 0.5, 3.0])).unwrap();
        assert_eq!(score, 0.5);
    }

    #[test]
    fn single_layer_sigmoid_of_zero() {
        let model = MlpVerifier::new(&[1]).unwrap();
        let model = model
            .with_params(model.params().with_values(vec![1.0, 0.0]).unwrap())
            .unwrap();
        assert_eq!(forward_verifier(&model, &fv(&[0.0])).unwrap(), 0.5);
    }

    #[test]
    fn forward_matches_hand_computed_composition() {
        // d=2, one hidden unit: score = sigmoid(w2 * tanh(w1.x + b1) + b2)
        let model = MlpVerifier::new(&[2, 1]).unwrap();
        let params = model
            .params()
            .with_values(vec![0.7, -0.4, 0.2, 1.5, -0.1])
            .unwrap();
        let model = model.with_params(params).unwrap();
        let x = [1.0, -1.0];
        let h = (0.7 * 1.0 + (-0.4) * (-1.0) + 0.2f64).tanh();
        let expected = 1.0 / (1.0 + (-(1.5 * h - 0.1f64)).exp());
        let score = forward_verifier(&model, &fv(&x)).unwrap();
        assert!((score - expected).abs() < 1e-14);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let model = MlpVerifier::new(&[4, 3]).unwrap();
        assert!(forward_verifier(&model, &fv(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn score_strictly_inside_unit_interval_for_huge_weights() {
        let model = MlpVerifier::new(&[1]).unwrap();
        let model = model
            .with_params(model.params().with_values(vec![1e6, 1e6]).unwrap())
            .unwrap();
        let score = forward_verifier(&model, &fv(&[1.0])).unwrap();
        assert!(score > 0.0 && score < 1.0);
    }

    #[test]
    fn confident_correct_predictions_have_tiny_cross_entropy() {
        // Single linear unit with a huge weight separates x = +1 / -1.
        let model = MlpVerifier::new(&[1]).unwrap();
        let model = model
            .with_params(model.params().with_values(vec![50.0, 0.0]).unwrap())
            .unwrap();
        let batch = vec![
            labeled(&[1.0], Label::Genuine),
            labeled(&[-1.0], Label::Impostor),
        ];
        let (loss, _) =
            loss_and_gradient_verifier(&model, &batch, 0.0, ClassWeighting::Mean).unwrap();
        assert!(loss < 0.01, "loss {loss}");
    }

    #[test]
    fn verifier_gradient_matches_finite_differences() {
        let model = MlpVerifier::new(&[2, 1]).unwrap();
        let init = init_params(model.layout(), InitScheme::UniformScaled, 3);
        let model = model.with_params(init).unwrap();
        let batch = vec![
            labeled(&[0.3, -0.7], Label::Genuine),
            labeled(&[-1.2, 0.4], Label::Impostor),
            labeled(&[0.9, 0.9], Label::Genuine),
        ];
        let (_, grad) =
            loss_and_gradient_verifier(&model, &batch, 0.01, ClassWeighting::Mean).unwrap();
        let numeric = finite_difference_grad(
            |p| {
                let m = model
                    .with_params(model.params().with_values(p.to_vec()).unwrap())
                    .unwrap();
                loss_and_gradient_verifier(&m, &batch, 0.01, ClassWeighting::Mean)
                    .unwrap()
                    .0
            },
            model.params().values(),
            1e-5,
        );
        assert!(max_relative_error(grad.values(), &numeric) < 1e-4);
    }

    #[test]
    fn duplicating_batch_leaves_loss_and_grad_unchanged() {
        let model = MlpVerifier::new(&[2, 2]).unwrap();
        let init = init_params(model.layout(), InitScheme::UniformScaled, 5);
        let model = model.with_params(init).unwrap();
        let batch = vec![
            labeled(&[0.1, 0.2], Label::Genuine),
            labeled(&[-0.4, 0.8], Label::Impostor),
        ];
        let doubled: Vec<LabeledSample> =
            batch.iter().chain(batch.iter()).cloned().collect();
        let (l1, g1) =
            loss_and_gradient_verifier(&model, &batch, 0.0, ClassWeighting::Mean).unwrap();
        let (l2, g2) =
            loss_and_gradient_verifier(&model, &doubled, 0.0, ClassWeighting::Mean).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let model = MlpVerifier::new(&[2]).unwrap();
        assert!(loss_and_gradient_verifier(&model, &[], 0.0, ClassWeighting::Mean).is_err());
        let ae = Autoencoder::new(&[2, 1]).unwrap();
        assert!(loss_and_gradient_autoencoder(&ae, &[], 0.0).is_err());
    }

    #[test]
    fn identity_autoencoder_has_zero_loss() {
        // 2 -> 2 -> 2, fully linear; both layers set to the identity map.
        let ae = Autoencoder::new(&[2, 2]).unwrap();
        let values = vec![
            1.0, 0.0, 0.0, 1.0, 0.0, 0.0, // encoder: I, b = 0
            1.0, 0.0, 0.0, 1.0, 0.0, 0.0, // decoder: I, b = 0
        ];
        let ae = ae
            .with_params(ae.params().with_values(values).unwrap())
            .unwrap();
        let batch = vec![fv(&[0.3, -0.8]), fv(&[2.0, 5.0])];
        let (loss, _) = loss_and_gradient_autoencoder(&ae, &batch, 0.0).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn autoencoder_gradient_matches_finite_differences() {
        let ae = Autoencoder::new(&[3, 2, 2]).unwrap();
        let init = init_params(ae.layout(), InitScheme::UniformScaled, 11);
        let ae = ae.with_params(init).unwrap();
        let batch = vec![fv(&[0.5, -0.2, 0.9]), fv(&[-1.0, 0.3, 0.1])];
        let (_, grad) = loss_and_gradient_autoencoder(&ae, &batch, 0.01).unwrap();
        let numeric = finite_difference_grad(
            |p| {
                let m = ae
                    .with_params(ae.params().with_values(p.to_vec()).unwrap())
                    .unwrap();
                loss_and_gradient_autoencoder(&m, &batch, 0.01).unwrap().0
            },
            ae.params().values(),
            1e-5,
        );
        assert!(max_relative_error(grad.values(), &numeric) < 1e-4);
    }

    #[test]
    fn batch_loss_is_mean_of_per_sample_losses() {
        let ae = Autoencoder::new(&[2, 1]).unwrap();
        let init = init_params(ae.layout(), InitScheme::UniformScaled, 2);
        let ae = ae.with_params(init).unwrap();
        let batch = vec![fv(&[0.4, 0.6]), fv(&[-0.3, 0.2]), fv(&[1.0, -1.0])];
        let (batch_loss, _) = loss_and_gradient_autoencoder(&ae, &batch, 0.0).unwrap();
        let mean: f64 = batch
            .iter()
            .map(|x| {
                loss_and_gradient_autoencoder(&ae, std::slice::from_ref(x), 0.0)
                    .unwrap()
                    .0
            })
            .sum::<f64>()
            / batch.len() as f64;
        assert!((batch_loss - mean).abs() < 1e-12);
    }

    #[test]
    fn encode_zero_params_gives_zero_embedding() {
        let ae = Autoencoder::new(&[3, 2]).unwrap();
        let emb = encode(&ae, &fv(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(emb, vec![0.0, 0.0]);
    }

    #[test]
    fn encode_is_prefix_of_full_forward() {
        let ae = Autoencoder::new(&[3, 2, 2]).unwrap();
        let init = init_params(ae.layout(), InitScheme::UniformScaled, 8);
        let ae = ae.with_params(init).unwrap();
        let x = fv(&[0.1, -0.5, 0.7]);
        // Reconstruct by running the decoder layers on the embedding: the
        // full pass must match exactly.
        let full = ae.reconstruct(&x).unwrap();
        let emb = encode(&ae, &x).unwrap();
        // Decoder = layers n_encoder.. of the same mlp; rebuild it by hand.
        let dec = Mlp::new(vec![2, 2, 3], vec![Activation::Tanh, Activation::Identity]).unwrap();
        let enc_len = Mlp::new(
            vec![3, 2, 2],
            vec![Activation::Tanh, Activation::Identity],
        )
        .unwrap()
        .param_count();
        let dec_params = &ae.params().values()[enc_len..];
        let via_decoder = dec.forward(dec_params, &emb).unwrap();
        for (a, b) in full.iter().zip(&via_decoder) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_set_linear_encoder() {
        // 2 -> 1 linear encoder, w = (1,1), b = 0, x = (2,3) -> embedding 5.
        let ae = Autoencoder::new(&[2, 1]).unwrap();
        let ae = ae
            .with_params(
                ae.params()
                    .with_values(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
                    .unwrap(),
            )
            .unwrap();
        let emb = encode(&ae, &fv(&[2.0, 3.0])).unwrap();
        assert_eq!(emb, vec![5.0]);
    }

    #[test]
    fn lr_schedule_hits_configured_endpoints() {
        let opt = OptimizerConfig {
            epochs: 100,
            ..OptimizerConfig::default()
        };
        assert_eq!(opt.learning_rate(0), 1e-2);
        assert!((opt.learning_rate(99) - 1e-8).abs() < 1e-22);
        for t in 1..100 {
            assert!(opt.learning_rate(t) < opt.learning_rate(t - 1));
        }
    }

    #[test]
    fn one_step_sgd_matches_hand_stepped_gradient_descent() {
        let model = MlpVerifier::new(&[2, 1]).unwrap();
        let init = init_params(model.layout(), InitScheme::UniformScaled, 21);
        let model = model.with_params(init.clone()).unwrap();
        let data = vec![
            labeled(&[0.5, 0.5], Label::Genuine),
            labeled(&[-0.5, -0.5], Label::Impostor),
            labeled(&[0.2, 0.8], Label::Genuine),
        ];
        let opt = OptimizerConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            lr_initial: 0.1,
            lr_final: 0.1,
            epochs: 1,
            batch_size: data.len(),
            class_weighting: ClassWeighting::Mean,
            ..OptimizerConfig::default()
        };
        let (trained, report) = train_verifier(&model, &data, &[], &opt, 99).unwrap();
        assert_eq!(report.epochs_run, 1);
        let (_, grad) =
            loss_and_gradient_verifier(&model, &data, 0.0, ClassWeighting::Mean).unwrap();
        for ((t, i), g) in trained.values().iter().zip(init.values()).zip(grad.values()) {
            assert!((t - (i - 0.1 * g)).abs() < 1e-14);
        }
    }

    #[test]
    fn training_reduces_validation_loss_on_separable_data() {
        let model = MlpVerifier::new(&[2, 4]).unwrap();
        let init = init_params(model.layout(), InitScheme::UniformScaled, 31);
        let model = model.with_params(init).unwrap();
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for i in 0..20 {
            let t = i as f64 / 20.0;
            train.push(labeled(&[1.0 + t, 1.0 - t], Label::Genuine));
            train.push(labeled(&[-1.0 - t, -1.0 + t], Label::Impostor));
            if i < 5 {
                valid.push(labeled(&[1.0 + t + 0.05, 1.0 - t], Label::Genuine));
                valid.push(labeled(&[-1.0 - t, -1.0 + t - 0.05], Label::Impostor));
            }
        }
        let opt = OptimizerConfig {
            epochs: 50,
            lr_initial: 0.5,
            lr_final: 0.01,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let (_, _) = train_verifier(&model, &train, &valid, &opt, 1).unwrap();
        let (initial_val, _) =
            loss_and_gradient_verifier(&model, &valid, 0.0, ClassWeighting::Balanced).unwrap();
        let (trained, report) = train_verifier(&model, &train, &valid, &opt, 1).unwrap();
        let trained_model = model.with_params(trained).unwrap();
        let (final_val, _) =
            loss_and_gradient_verifier(&trained_model, &valid, 0.0, ClassWeighting::Balanced)
                .unwrap();
        assert!(
            final_val < initial_val,
            "validation {initial_val} -> {final_val} after {} epochs",
            report.epochs_run
        );
    }

    #[test]
    fn training_is_deterministic_and_layout_stable() {
        let model = MlpVerifier::new(&[2, 3]).unwrap();
        let init = init_params(model.layout(), InitScheme::UniformScaled, 17);
        let model = model.with_params(init).unwrap();
        let data = vec![
            labeled(&[0.5, 0.1], Label::Genuine),
            labeled(&[-0.5, -0.3], Label::Impostor),
            labeled(&[0.4, 0.6], Label::Genuine),
            labeled(&[-0.8, 0.1], Label::Impostor),
        ];
        let opt = OptimizerConfig {
            epochs: 5,
            batch_size: 2,
            ..OptimizerConfig::default()
        };
        let (a, _) = train_verifier(&model, &data, &data, &opt, 7).unwrap();
        let (b, _) = train_verifier(&model, &data, &data, &opt, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.same_layout(model.params()));
    }

    #[test]
    fn empty_training_data_is_an_error() {
        let model = MlpVerifier::new(&[2]).unwrap();
        let opt = OptimizerConfig::default();
        assert!(train_verifier(&model, &[], &[], &opt, 0).is_err());
    }

    #[test]
    fn init_zeros_and_determinism() {
        let model = MlpVerifier::new(&[4, 4]).unwrap();
        let zeros = init_params(model.layout(), InitScheme::Zeros, 0);
        assert!(zeros.values().iter().all(|&v| v == 0.0));
        let a = init_params(model.layout(), InitScheme::UniformScaled, 9);
        let b = init_params(model.layout(), InitScheme::UniformScaled, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn init_uniform_scaled_statistics() {
        // One 4 -> 4 weight layer, many seeds: bound sqrt(6/8), mean near 0.
        let layout = vec![LayoutEntry::new("layer0.weight", vec![4, 4])];
        let bound = (6.0f64 / 8.0).sqrt();
        let mut sum = 0.0;
        let mut count = 0usize;
        for seed in 0..625 {
            let p = init_params(&layout, InitScheme::UniformScaled, seed);
            for &v in p.values() {
                assert!(v.abs() <= bound);
                sum += v;
                count += 1;
            }
        }
        assert_eq!(count, 10000);
        assert!((sum / count as f64).abs() < 0.02);
        // Biases stay zero under uniform_scaled.
        let layout = vec![
            LayoutEntry::new("layer0.weight", vec![4, 4]),
            LayoutEntry::new("layer0.bias", vec![4]),
        ];
        let p = init_params(&layout, InitScheme::UniformScaled, 1);
        assert!(p.entry_values(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences_on_random_configs() {
        let mut rng = crate::seeding::stream_rng("model.gradcheck", &[0]);
        for trial in 0..10u64 {
            let d = rng.gen_range(1..=3);
            let hidden = rng.gen_range(1..=3);
            let model = MlpVerifier::new(&[d, hidden]).unwrap();
            let init = init_params(model.layout(), InitScheme::UniformScaled, trial);
            let model = model.with_params(init).unwrap();
            let batch: Vec<LabeledSample> = (0..rng.gen_range(1..=4))
                .map(|i| {
                    let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    labeled(
                        &x,
                        if i % 2 == 0 {
                            Label::Genuine
                        } else {
                            Label::Impostor
                        },
                    )
                })
                .collect();
            let (_, grad) =
                loss_and_gradient_verifier(&model, &batch, 0.005, ClassWeighting::Balanced)
                    .unwrap();
            let numeric = finite_difference_grad(
                |p| {
                    let m = model
                        .with_params(model.params().with_values(p.to_vec()).unwrap())
                        .unwrap();
                    loss_and_gradient_verifier(&m, &batch, 0.005, ClassWeighting::Balanced)
                        .unwrap()
                        .0
                },
                model.params().values(),
                1e-5,
            );
            assert!(
                max_relative_error(grad.values(), &numeric) < 1e-4,
                "trial {trial}"
            );
        }
    }
}

//! Verification scoring, equal error rate, distribution summaries, and
//! Welch's two-sample t-test.

use serde::Serialize;

use crate::data::FeatureVector;
use crate::error::{FedverError, Result};
use crate::model::{encode, forward_verifier, Autoencoder, Label, MlpVerifier};

/// One verification attempt: a score and the ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialScore {
    pub score: f64,
    pub label: Label,
}

impl TrialScore {
    pub fn new(score: f64, label: Label) -> Result<Self> {
        if !score.is_finite() {
            return Err(FedverError::invalid("trial score must be finite"));
        }
        Ok(TrialScore { score, label })
    }
}

/// Equal error rate: the operating point where acceptance and rejection
/// error rates coincide. Stored as a fraction; reported as percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

impl EerResult {
    pub fn eer_percent(&self) -> f64 {
        100.0 * self.eer
    }
}

/// Five-number summary plus an equal-width histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSummary {
    pub min: f64,
    pub lower_quartile: f64,
    pub median: f64,
    pub upper_quartile: f64,
    pub max: f64,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub significant_at_0_05: bool,
}

/// Supervised verification score: the verifier's genuine probability.
pub fn score_supervised(model: &MlpVerifier, x: &FeatureVector) -> Result<f64> {
    forward_verifier(model, x)
}

/// Unsupervised verification score: cosine similarity between the probe
/// embedding and the mean enrollment embedding. Zero-norm embeddings score
/// 0 by convention.
pub fn score_unsupervised(
    encoder: &Autoencoder,
    enrollment: &[FeatureVector],
    probe: &FeatureVector,
) -> Result<f64> {
    if enrollment.is_empty() {
        return Err(FedverError::invalid("empty enrollment set"));
    }
    let mut mean = vec![0.0; encoder.bottleneck_dim()];
    for sample in enrollment {
        let emb = encode(encoder, sample)?;
        for (m, e) in mean.iter_mut().zip(&emb) {
            *m += e / enrollment.len() as f64;
        }
    }
    let probe_emb = encode(encoder, probe)?;
    Ok(cosine(&probe_emb, &mean))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Computes the EER by sweeping thresholds over the sorted distinct scores
/// (plus one position above the maximum). At each threshold θ,
/// FAR = fraction of impostors with score ≥ θ and FRR = fraction of
/// genuines with score < θ; the EER is (FAR+FRR)/2 at the threshold
/// minimizing |FAR − FRR|, ties broken toward the lower threshold.
pub fn compute_eer(trials: &[TrialScore]) -> Result<EerResult> {
    let genuine: Vec<f64> = trials
        .iter()
        .filter(|t| t.label == Label::Genuine)
        .map(|t| t.score)
        .collect();
    let impostor: Vec<f64> = trials
        .iter()
        .filter(|t| t.label == Label::Impostor)
        .map(|t| t.score)
        .collect();
    if genuine.is_empty() || impostor.is_empty() {
        return Err(FedverError::invalid(
            "EER needs at least one genuine and one impostor trial",
        ));
    }

    let mut thresholds: Vec<f64> = trials.iter().map(|t| t.score).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let mut best: Option<(f64, f64, f64)> = None; // (|FAR-FRR|, eer, threshold)
    for &theta in &thresholds {
        let far = impostor.iter().filter(|&&s| s >= theta).count() as f64
            / impostor.len() as f64;
        let frr =
            genuine.iter().filter(|&&s| s < theta).count() as f64 / genuine.len() as f64;
        let gap = (far - frr).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, (far + frr) / 2.0, theta));
        }
    }
    let (_, eer, threshold) = best.unwrap();
    Ok(EerResult {
        eer,
        threshold,
        n_genuine: genuine.len(),
        n_impostor: impostor.len(),
    })
}

/// Quartiles via linear interpolation between closest ranks; equal-width
/// histogram bins spanning [min, max].
pub fn summarize(values: &[f64], n_bins: usize) -> Result<DistributionSummary> {
    if values.is_empty() {
        return Err(FedverError::invalid("cannot summarize an empty list"));
    }
    if n_bins < 1 {
        return Err(FedverError::invalid("n_bins must be at least 1"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FedverError::invalid("cannot summarize non-finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |p: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };

    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let width = (max - min) / n_bins as f64;
    let bin_edges: Vec<f64> = (0..=n_bins).map(|i| min + i as f64 * width).collect();
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        let idx = if width == 0.0 {
            0
        } else {
            (((v - min) / width) as usize).min(n_bins - 1)
        };
        counts[idx] += 1;
    }

    Ok(DistributionSummary {
        min,
        lower_quartile: quantile(0.25),
        median: quantile(0.5),
        upper_quartile: quantile(0.75),
        max,
        bin_edges,
        counts,
    })
}

fn mean_and_variance(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's two-sample two-sided t-test. The p-value comes from the
/// regularized incomplete beta function evaluated by continued fraction.
pub fn t_test(sample_a: &[f64], sample_b: &[f64]) -> Result<TTestResult> {
    for (name, sample) in [("a", sample_a), ("b", sample_b)] {
        if sample.len() < 2 {
            return Err(FedverError::invalid(format!(
                "sample {name} needs at least 2 values"
            )));
        }
        let (_, var) = mean_and_variance(sample);
        if var == 0.0 {
            return Err(FedverError::invalid(format!(
                "sample {name} has zero variance"
            )));
        }
    }
    let (mean_a, var_a) = mean_and_variance(sample_a);
    let (mean_b, var_b) = mean_and_variance(sample_b);
    let (na, nb) = (sample_a.len() as f64, sample_b.len() as f64);
    let se_a = var_a / na;
    let se_b = var_b / nb;
    let t = (mean_a - mean_b) / (se_a + se_b).sqrt();
    // Welch-Satterthwaite degrees of freedom.
    let df = (se_a + se_b) * (se_a + se_b)
        / (se_a * se_a / (na - 1.0) + se_b * se_b / (nb - 1.0));
    let p_value = if t == 0.0 {
        1.0
    } else {
        regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    };
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value,
        significant_at_0_05: p_value < 0.05,
    })
}

/// Lanczos approximation of ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta I_x(a, b), continued fraction (Lentz) to
/// absolute tolerance 1e-10.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0 && (0.0..=1.0).contains(&x));
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() / a) * beta_continued_fraction(a, b, x)
    } else {
        1.0 - regularized_incomplete_beta(b, a, 1.0 - x)
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TOL: f64 = 1e-10;
    const TINY: f64 = 1e-300;
    const MAX_ITER: usize = 500;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // Even step.
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < TOL {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trials(genuine: &[f64], impostor: &[f64]) -> Vec<TrialScore> {
        genuine
            .iter()
            .map(|&s| TrialScore::new(s, Label::Genuine).unwrap())
            .chain(
                impostor
                    .iter()
                    .map(|&s| TrialScore::new(s, Label::Impostor).unwrap()),
            )
            .collect()
    }

    /// Exhaustive sweep over every candidate threshold, independent of the
    /// implementation's bookkeeping.
    fn eer_oracle(genuine: &[f64], impostor: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
        thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds.dedup();
        thresholds.push(f64::INFINITY);
        let mut best_gap = f64::INFINITY;
        let mut best_eer = 0.0;
        for &theta in &thresholds {
            let far = impostor.iter().filter(|&&s| s >= theta).count() as f64
                / impostor.len() as f64;
            let frr =
                genuine.iter().filter(|&&s| s < theta).count() as f64 / genuine.len() as f64;
            if (far - frr).abs() < best_gap {
                best_gap = (far - frr).abs();
                best_eer = (far + frr) / 2.0;
            }
        }
        best_eer
    }

    #[test]
    fn perfect_separation_gives_zero() {
        let result = compute_eer(&trials(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        assert_eq!(result.eer, 0.0);
        assert_eq!(result.n_genuine, 2);
        assert_eq!(result.n_impostor, 2);
    }

    #[test]
    fn identical_distributions_give_half() {
        let result = compute_eer(&trials(&[0.1, 0.4, 0.7], &[0.1, 0.4, 0.7])).unwrap();
        assert!((result.eer - 0.5).abs() < 1e-15);
    }

    #[test]
    fn partial_overlap_matches_exhaustive_sweep() {
        let genuine = [0.9, 0.6, 0.4];
        let impostor = [0.5, 0.3, 0.1];
        let result = compute_eer(&trials(&genuine, &impostor)).unwrap();
        assert!((result.eer - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(result.threshold, 0.5);
        assert_eq!(result.eer, eer_oracle(&genuine, &impostor));
    }

    #[test]
    fn missing_class_is_an_error() {
        assert!(compute_eer(&trials(&[0.5], &[])).is_err());
        assert!(compute_eer(&trials(&[], &[0.5])).is_err());
    }

    #[test]
    fn eer_invariant_under_monotone_transforms() {
        let genuine = [0.9, 0.6, 0.4, 0.55];
        let impostor = [0.5, 0.3, 0.1, 0.45, 0.2];
        let base = compute_eer(&trials(&genuine, &impostor)).unwrap().eer;
        let transforms: [fn(f64) -> f64; 3] =
            [|s| s.exp(), |s| 3.0 * s + 1.0, |s| s * s * s];
        for f in transforms {
            let g: Vec<f64> = genuine.iter().map(|&s| f(s)).collect();
            let i: Vec<f64> = impostor.iter().map(|&s| f(s)).collect();
            let eer = compute_eer(&trials(&g, &i)).unwrap().eer;
            assert!((eer - base).abs() < 1e-15);
        }
    }

    #[test]
    fn eer_label_swap_duality() {
        let genuine = [0.9, 0.6, 0.4, 0.55];
        let impostor = [0.5, 0.3, 0.1, 0.45, 0.2];
        let base = compute_eer(&trials(&genuine, &impostor)).unwrap().eer;
        // Swap labels and negate scores.
        let g: Vec<f64> = impostor.iter().map(|&s| -s).collect();
        let i: Vec<f64> = genuine.iter().map(|&s| -s).collect();
        let swapped = compute_eer(&trials(&g, &i)).unwrap().eer;
        assert!((swapped - base).abs() < 1e-12);
    }

    #[test]
    fn summary_of_symmetric_odd_set() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0], 5).unwrap();
        assert_eq!(
            (s.min, s.lower_quartile, s.median, s.upper_quartile, s.max),
            (1.0, 2.0, 3.0, 4.0, 5.0)
        );
    }

    #[test]
    fn summary_of_constant_values() {
        let s = summarize(&[2.5; 7], 4).unwrap();
        assert_eq!(s.min, 2.5);
        assert_eq!(s.max, 2.5);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.counts, vec![7, 0, 0, 0]);
    }

    #[test]
    fn summary_counts_and_quartiles_match_sort_oracle() {
        let mut rng = crate::seeding::stream_rng("eval.test.summary", &[1]);
        use rand::Rng;
        let values: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = summarize(&values, 10).unwrap();
        assert_eq!(s.counts.iter().sum::<usize>(), 100);
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = |p: f64| {
            let h = 99.0 * p;
            let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
            sorted[lo] + (h - h.floor()) * (sorted[hi] - sorted[lo])
        };
        assert!((s.lower_quartile - rank(0.25)).abs() < 1e-12);
        assert!((s.median - rank(0.5)).abs() < 1e-12);
        assert!((s.upper_quartile - rank(0.75)).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_give_p_one() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let result = t_test(&a, &a).unwrap();
        assert_eq!(result.t_statistic, 0.0);
        assert_eq!(result.p_value, 1.0);
        assert!(!result.significant_at_0_05);
    }

    /// Two-sided p by Simpson integration of the t-density.
    fn p_value_by_integration(t: f64, df: f64) -> f64 {
        let t = t.abs();
        let log_norm = ln_gamma((df + 1.0) / 2.0)
            - ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let density =
            |x: f64| (log_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        // integrate density over [-t, t]; p = 1 - that mass
        let n = 20_000;
        let h = 2.0 * t / n as f64;
        let mut acc = density(-t) + density(t);
        for i in 1..n {
            let x = -t + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * density(x);
        }
        1.0 - acc * h / 3.0
    }

    #[test]
    fn shifted_sample_matches_hand_formula_and_integration() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [1.1, 2.1, 3.1, 4.1, 5.1];
        let result = t_test(&a, &b).unwrap();
        // t = -0.1 / sqrt(2 * 2.5 / 5) = -0.1 exactly.
        assert!((result.t_statistic - (-0.1)).abs() < 1e-14);
        assert!((result.degrees_of_freedom - 8.0).abs() < 1e-10);
        let p_oracle = p_value_by_integration(result.t_statistic, result.degrees_of_freedom);
        assert!(
            (result.p_value - p_oracle).abs() < 1e-6,
            "p {} vs oracle {p_oracle}",
            result.p_value
        );
    }

    #[test]
    fn extreme_separation_is_significant() {
        let a = [0.0, 0.01, 0.02];
        let b = [10.0, 10.01, 10.02];
        let result = t_test(&a, &b).unwrap();
        assert!(result.p_value < 1e-6);
        assert!(result.significant_at_0_05);
    }

    #[test]
    fn t_test_is_antisymmetric() {
        let a = [1.0, 2.5, 3.0, 4.5];
        let b = [2.0, 3.5, 5.0];
        let ab = t_test(&a, &b).unwrap();
        let ba = t_test(&b, &a).unwrap();
        assert_eq!(ab.t_statistic, -ba.t_statistic);
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        assert_eq!(ab.degrees_of_freedom, ba.degrees_of_freedom);
    }

    #[test]
    fn degenerate_samples_are_errors() {
        assert!(t_test(&[1.0], &[1.0, 2.0]).is_err());
        assert!(t_test(&[1.0, 1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ln_gamma_matches_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-12);
        assert!((ln_gamma(2.0)).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-10);
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-10);
    }

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector::new(values.to_vec()).unwrap()
    }

    fn linear_encoder(weights: &[f64], in_dim: usize, out_dim: usize) -> Autoencoder {
        // Zero-bias linear encoder in_dim -> out_dim; decoder params zeroed.
        let ae = Autoencoder::new(&[in_dim, out_dim]).unwrap();
        let mut values = vec![0.0; ae.params().len()];
        values[..weights.len()].copy_from_slice(weights);
        ae.with_params(ae.params().with_values(values).unwrap())
            .unwrap()
    }

    #[test]
    fn probe_equal_to_enrollment_mean_scores_one() {
        let enc = linear_encoder(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let enrollment = vec![fv(&[1.0, 1.0]), fv(&[3.0, 3.0])];
        let probe = fv(&[2.0, 2.0]);
        let score = score_unsupervised(&enc, &enrollment, &probe).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_probe_scores_zero() {
        let enc = linear_encoder(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let enrollment = vec![fv(&[1.0, 0.0])];
        let probe = fv(&[0.0, 1.0]);
        let score = score_unsupervised(&enc, &enrollment, &probe).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn hand_computed_cosine() {
        // Encoder 2 -> 2: rows (1, 1) and (1, -1).
        let enc = linear_encoder(&[1.0, 1.0, 1.0, -1.0], 2, 2);
        // Enrollment embeddings: (3, -1) and (1, 1); mean (2, 0).
        let enrollment = vec![fv(&[1.0, 2.0]), fv(&[1.0, 0.0])];
        // Probe (2, 1) -> embedding (3, 1).
        let probe = fv(&[2.0, 1.0]);
        let expected = 6.0 / (10.0f64.sqrt() * 2.0);
        let score = score_unsupervised(&enc, &enrollment, &probe).unwrap();
        assert!((score - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_embedding_scores_zero() {
        let enc = linear_encoder(&[0.0, 0.0], 2, 1);
        let score =
            score_unsupervised(&enc, &[fv(&[1.0, 1.0])], &fv(&[2.0, 2.0])).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn cosine_scale_invariance_under_linear_zero_bias_encoder() {
        let enc = linear_encoder(&[0.5, -1.0, 2.0, 0.3], 2, 2);
        let enrollment = vec![fv(&[1.0, 2.0]), fv(&[0.5, -0.5])];
        let probe = fv(&[0.7, 0.9]);
        let base = score_unsupervised(&enc, &enrollment, &probe).unwrap();
        for c in [0.1, 2.0, 100.0] {
            let scaled = fv(&[0.7 * c, 0.9 * c]);
            let score = score_unsupervised(&enc, &enrollment, &scaled).unwrap();
            assert!((score - base).abs() < 1e-12, "c = {c}");
        }
    }

    proptest! {
        #[test]
        fn quartile_ordering_holds(values in prop::collection::vec(-1e3f64..1e3, 1..60),
                                   n_bins in 1usize..12) {
            let s = summarize(&values, n_bins).unwrap();
            prop_assert!(s.min <= s.lower_quartile);
            prop_assert!(s.lower_quartile <= s.median);
            prop_assert!(s.median <= s.upper_quartile);
            prop_assert!(s.upper_quartile <= s.max);
            prop_assert_eq!(s.counts.iter().sum::<usize>(), values.len());
        }

        #[test]
        fn eer_matches_oracle_on_random_scores(
            genuine in prop::collection::vec(0.0f64..1.0, 1..25),
            impostor in prop::collection::vec(0.0f64..1.0, 1..25),
        ) {
            let result = compute_eer(&trials(&genuine, &impostor)).unwrap();
            prop_assert_eq!(result.eer, eer_oracle(&genuine, &impostor));
            prop_assert!((0.0..=1.0).contains(&result.eer));
        }
    }
}

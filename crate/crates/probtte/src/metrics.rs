//! Evaluation metrics: RMSE / MAE / MAPE, closed-form Gaussian CRPS, and
//! central-interval coverage.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::inference::GaussianPrediction;
use crate::rng::substream;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// How point metrics score a probabilistic prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ScoringMode {
    /// Score the predictive mean (deterministic).
    MeanBased,
    /// Score one draw per trip, deterministic per seed.
    SampleBased { seed: u64 },
}

/// Aggregated metrics over an evaluation set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_s: f64,
    pub mae_s: f64,
    /// Fraction, not percent.
    pub mape: f64,
    /// Mean CRPS in raw seconds.
    pub crps_s: f64,
    /// Mean CRPS of the standardized targets (raw divided by the model's
    /// target scale), for comparison against normalized reports.
    pub crps_standardized: f64,
    pub coverage90: f64,
    pub n: usize,
    pub scoring_mode: ScoringMode,
}

fn scored_values(
    preds: &[GaussianPrediction],
    mode: ScoringMode,
) -> Vec<f64> {
    match mode {
        ScoringMode::MeanBased => preds.iter().map(|p| p.mean_s).collect(),
        ScoringMode::SampleBased { seed } => {
            let mut rng = substream(seed, "metric-sample");
            preds
                .iter()
                .map(|p| p.mean_s + p.std_s() * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
    }
}

/// RMSE, MAE and MAPE of the predictions against ground truth.
pub fn point_metrics(
    preds: &[GaussianPrediction],
    truths: &[f64],
    mode: ScoringMode,
) -> Result<(f64, f64, f64)> {
    if preds.len() != truths.len() {
        return Err(Error::dimension(format!(
            "{} predictions vs {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::validation("empty evaluation set"));
    }
    if truths.iter().any(|&t| t <= 0.0) {
        return Err(Error::validation("MAPE requires positive ground truth"));
    }
    let values = scored_values(preds, mode);
    let n = truths.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut ape = 0.0;
    for (v, t) in values.iter().zip(truths) {
        let e = v - t;
        se += e * e;
        ae += e.abs();
        ape += (e / t).abs();
    }
    Ok(((se / n).sqrt(), ae / n, ape / n))
}

/// Closed-form CRPS of a Gaussian: `sigma [z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)]`
/// with `z = (truth - mean) / sigma`.
pub fn crps_gaussian(mean: f64, std: f64, truth: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::validation(format!("CRPS requires positive std, got {std}")));
    }
    let z = (truth - mean) / std;
    Ok(std
        * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z)
            - 1.0 / std::f64::consts::PI.sqrt()))
}

/// Mean CRPS of the predictions, raw seconds.
pub fn mean_crps(preds: &[GaussianPrediction], truths: &[f64]) -> Result<f64> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::validation("CRPS needs equal-length non-empty inputs"));
    }
    let mut acc = 0.0;
    for (p, &t) in preds.iter().zip(truths) {
        acc += crps_gaussian(p.mean_s, p.std_s(), t)?;
    }
    Ok(acc / preds.len() as f64)
}

/// Fraction of truths inside the central predictive interval at `level`.
pub fn coverage(preds: &[GaussianPrediction], truths: &[f64], level: f64) -> Result<f64> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::validation(format!("coverage level {level} must be in (0,1)")));
    }
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::validation("coverage needs equal-length non-empty inputs"));
    }
    let hits = preds
        .iter()
        .zip(truths)
        .filter(|(p, &t)| {
            let (lo, hi) = p.interval(level);
            lo <= t && t <= hi
        })
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::PredictionComponents;
    use approx::assert_relative_eq;

    fn pred(mean: f64, var: f64) -> GaussianPrediction {
        GaussianPrediction {
            mean_s: mean,
            var_s2: var,
            components: PredictionComponents {
                prior_mean_s: mean,
                day_correction_s: 0.0,
                day_var_s2: var / 2.0,
                trip_var_s2: var / 2.0,
            },
        }
    }

    #[test]
    fn perfect_means_score_zero() {
        let preds = vec![pred(10.0, 1.0), pred(20.0, 4.0)];
        let (rmse, mae, mape) =
            point_metrics(&preds, &[10.0, 20.0], ScoringMode::MeanBased).unwrap();
        assert_eq!((rmse, mae, mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn simple_arithmetic_case() {
        let preds = vec![pred(110.0, 25.0)];
        let (rmse, mae, mape) =
            point_metrics(&preds, &[100.0], ScoringMode::MeanBased).unwrap();
        assert_relative_eq!(rmse, 10.0);
        assert_relative_eq!(mae, 10.0);
        assert_relative_eq!(mape, 0.10);
    }

    #[test]
    fn zero_truth_rejected_for_mape() {
        let preds = vec![pred(1.0, 1.0)];
        assert!(point_metrics(&preds, &[0.0], ScoringMode::MeanBased).is_err());
        assert!(point_metrics(&preds, &[1.0, 2.0], ScoringMode::MeanBased).is_err());
    }

    #[test]
    fn sample_based_mae_approaches_folded_normal_mean() {
        // Predictions centered on the truth with sigma = 5: the expected
        // absolute error of a draw is 5 sqrt(2/pi) ~ 3.989.
        let n = 200_000;
        let preds: Vec<GaussianPrediction> = (0..n).map(|_| pred(100.0, 25.0)).collect();
        let truths = vec![100.0; n];
        let (_, mae, _) =
            point_metrics(&preds, &truths, ScoringMode::SampleBased { seed: 11 }).unwrap();
        let expected = 5.0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mae - expected).abs() < 0.05, "mae {mae} vs {expected}");
    }

    #[test]
    fn sample_based_is_deterministic_per_seed() {
        let preds = vec![pred(10.0, 4.0); 8];
        let truths = vec![11.0; 8];
        let a = point_metrics(&preds, &truths, ScoringMode::SampleBased { seed: 5 }).unwrap();
        let b = point_metrics(&preds, &truths, ScoringMode::SampleBased { seed: 5 }).unwrap();
        let c = point_metrics(&preds, &truths, ScoringMode::SampleBased { seed: 6 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn crps_standard_normal_at_truth() {
        // crps(0, 1, 0) = 1/sqrt(pi) (2 - sqrt(2)) ~ 0.23370.
        let c = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        assert!((c - 0.23370).abs() < 1e-4, "crps {c}");
    }

    #[test]
    fn crps_degenerates_to_absolute_error() {
        let c = crps_gaussian(5.0, 1e-9, 7.0).unwrap();
        assert_relative_eq!(c, 2.0, epsilon = 1e-6);
        assert!(crps_gaussian(5.0, 0.0, 7.0).is_err());
    }

    #[test]
    fn crps_is_positively_homogeneous() {
        let one = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        let two = crps_gaussian(0.0, 2.0, 0.0).unwrap();
        assert_relative_eq!(two, 2.0 * one, epsilon = 1e-12);
    }

    #[test]
    fn crps_is_minimized_at_the_truth() {
        // Grid check over the mean for fixed sigma.
        let truth = 3.0;
        let at_truth = crps_gaussian(truth, 1.5, truth).unwrap();
        for i in -20..=20 {
            if i == 0 {
                continue;
            }
            let mu = truth + 0.25 * i as f64;
            assert!(crps_gaussian(mu, 1.5, truth).unwrap() > at_truth);
        }
    }

    #[test]
    fn coverage_extremes() {
        let preds = vec![pred(10.0, 1.0); 4];
        assert_eq!(coverage(&preds, &[10.0; 4], 0.9).unwrap(), 1.0);
        let far = vec![20.0; 4]; // 10 sigma away
        assert_eq!(coverage(&preds, &far, 0.9).unwrap(), 0.0);
        assert!(coverage(&preds, &[10.0; 4], 1.0).is_err());
    }

    #[test]
    fn coverage_concentrates_for_calibrated_predictions() {
        // Truths drawn from the predictive distribution itself.
        let mut rng = substream(99, "coverage-test");
        let n = 4000;
        let preds: Vec<GaussianPrediction> = (0..n).map(|_| pred(50.0, 9.0)).collect();
        let truths: Vec<f64> = (0..n)
            .map(|_| 50.0 + 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let c = coverage(&preds, &truths, 0.9).unwrap();
        assert!((0.85..=0.95).contains(&c), "coverage {c}");
    }

    #[test]
    fn quantile_matches_cdf() {
        for p in [0.05, 0.5, 0.95, 0.975] {
            assert_relative_eq!(normal_cdf(normal_quantile(p)), p, epsilon = 1e-9);
        }
        assert_relative_eq!(normal_quantile(0.95), 1.6448536269514722, epsilon = 1e-9);
    }
}

//! Conditional travel-time inference.
//!
//! The day-level effect is `eta = L z` with `z ~ N(0, I_{r_L})`, so the
//! posterior of `z` given completed trips is Gaussian with an `r_L x r_L`
//! covariance: `z_cov = (I + V_oᵀ Lambda_o^-1 V_o)^-1` and
//! `z_mean = z_cov V_oᵀ Lambda_o^-1 (v - A_o mu)`. This is the well-posed
//! form of the dense conditional on `eta` (whose `|V| x |V|` covariance
//! `L Lᵀ` is singular for low rank) and never touches a `|V| x |V|` matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{assign_bucket, Batch, SubTripSet};
use crate::error::{Error, Result};
use crate::model::likelihood::{assemble, solve_woodbury};
use crate::model::ModelParams;
use crate::network::LinkId;
use crate::rng::substream;

/// Floor on predictive variance, seconds squared.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Posterior of the day-level latent `z` for one bucket.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    pub bucket: usize,
    pub z_mean: DVector<f64>,
    pub z_cov: DMatrix<f64>,
    pub n_obs: usize,
}

impl PosteriorState {
    /// The prior: `z ~ N(0, I)`.
    pub fn prior(bucket: usize, r_l: usize) -> Self {
        Self {
            bucket,
            z_mean: DVector::zeros(r_l),
            z_cov: DMatrix::identity(r_l, r_l),
            n_obs: 0,
        }
    }
}

/// Predictive travel-time distribution for one trip, in seconds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GaussianPrediction {
    pub mean_s: f64,
    pub var_s2: f64,
    pub components: PredictionComponents,
}

/// Diagnostic decomposition of a prediction (seconds / seconds squared).
#[derive(Debug, Clone, serde::Serialize)]
pub struct PredictionComponents {
    /// `A mu`: the unconditional mean.
    pub prior_mean_s: f64,
    /// `A L z_mean`: shift from conditioning on completed trips.
    pub day_correction_s: f64,
    /// `(A L) z_cov (A L)ᵀ`: remaining day-level uncertainty.
    pub day_var_s2: f64,
    /// `A Sigma_p Aᵀ`: trip-level noise.
    pub trip_var_s2: f64,
}

impl GaussianPrediction {
    pub fn std_s(&self) -> f64 {
        self.var_s2.sqrt()
    }

    /// Central interval at the given level, e.g. 0.9.
    pub fn interval(&self, level: f64) -> (f64, f64) {
        let z = crate::metrics::normal_quantile(0.5 + level / 2.0);
        let half = z * self.std_s();
        (self.mean_s - half, self.mean_s + half)
    }
}

/// Condition the day-level latent on completed (augmented) trips.
///
/// All observations must share the posterior's bucket; rows are built exactly
/// as the data module builds batch rows. Cost after the block solves is
/// `O(r_L^3 + n_rows r_L)`.
pub fn condition(
    observed: &[SubTripSet],
    params: &ModelParams,
    bucket: usize,
) -> Result<PosteriorState> {
    let r_l = params.r_l();
    if observed.is_empty() {
        return Ok(PosteriorState::prior(bucket, r_l));
    }
    let p = params.bucket_count();
    let day = observed[0].parent.day;
    let mut batch = Batch {
        day,
        bucket,
        rows: Vec::new(),
        blocks: Vec::new(),
        targets: Vec::new(),
    };
    for set in observed {
        let b = assign_bucket(set.parent.depart_s, p)?;
        if b != bucket {
            return Err(Error::validation(format!(
                "conditioning trip {} is in bucket {b}, posterior is for bucket {bucket}",
                set.parent.trip_id
            )));
        }
        if set.parent.day != day {
            return Err(Error::validation(format!(
                "conditioning trip {} is on day {}, expected {day}",
                set.parent.trip_id, set.parent.day
            )));
        }
        batch.push_group(set);
    }
    let assembled = assemble(&batch, params)?;
    let solves = solve_woodbury(&batch, &assembled, r_l)?;
    let z_cov = solves.core_chol.inverse();
    let z_mean = solves.core_solve_vt_u.clone();
    Ok(PosteriorState { bucket, z_mean, z_cov, n_obs: batch.row_count() })
}

fn query_terms(
    query: &[LinkId],
    params: &ModelParams,
    bucket: usize,
) -> Result<(f64, DVector<f64>, f64)> {
    if query.is_empty() {
        return Err(Error::validation("query trip has no links"));
    }
    params.check_links(query.iter())?;
    let bp = params.bucket(bucket)?;
    let mu = bp.mu();
    let d = bp.diag_d();
    let prior_mean: f64 = query.iter().map(|&l| mu[l as usize]).sum();
    let a_l = ModelParams::sum_rows(&bp.l, query);
    let a_h = ModelParams::sum_rows(&bp.h, query);
    let trip_var = a_h.dot(&a_h) + query.iter().map(|&l| d[l as usize]).sum::<f64>();
    Ok((prior_mean, a_l, trip_var))
}

/// Predictive distribution of a query trip given a posterior state.
pub fn predict(
    query: &[LinkId],
    posterior: &PosteriorState,
    params: &ModelParams,
) -> Result<GaussianPrediction> {
    if posterior.z_mean.len() != params.r_l() {
        return Err(Error::dimension(format!(
            "posterior rank {} does not match model rank {}",
            posterior.z_mean.len(),
            params.r_l()
        )));
    }
    let (prior_mean, a_l, trip_var) = query_terms(query, params, posterior.bucket)?;
    let correction = a_l.dot(&posterior.z_mean);
    let day_var = (&posterior.z_cov * &a_l).dot(&a_l);

    let scale = params.scale();
    let mean_s = scale.mean_to_seconds(prior_mean + correction);
    let day_var_s2 = scale.var_to_seconds(day_var);
    let trip_var_s2 = scale.var_to_seconds(trip_var);
    Ok(GaussianPrediction {
        mean_s,
        var_s2: (day_var_s2 + trip_var_s2).max(VARIANCE_FLOOR),
        components: PredictionComponents {
            prior_mean_s: scale.mean_to_seconds(prior_mean),
            day_correction_s: scale.scale * correction,
            day_var_s2,
            trip_var_s2,
        },
    })
}

/// Predictive distribution under the prior (no completed trips):
/// `N(a mu, |a L|^2 + |a H|^2 + sum D)` in model units.
pub fn predict_prior(
    query: &[LinkId],
    params: &ModelParams,
    bucket: usize,
) -> Result<GaussianPrediction> {
    predict(query, &PosteriorState::prior(bucket, params.r_l()), params)
}

/// How sampled travel times treat the Gaussian's support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Report draws as-is; negative times expose the model assumption.
    Raw,
    /// Clamp draws at one second.
    Physical,
}

/// `n` i.i.d. draws from the predictive distribution, deterministic per seed.
pub fn sample(pred: &GaussianPrediction, n: usize, seed: u64, mode: SampleMode) -> Vec<f64> {
    let mut rng = substream(seed, "predictive-sample");
    let sd = pred.std_s();
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let x = pred.mean_s + sd * z;
            match mode {
                SampleMode::Raw => x,
                SampleMode::Physical => x.max(1.0),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{subsample, Trip};
    use crate::model::{softplus_inv, BucketParams, TargetScale};
    use approx::assert_relative_eq;

    fn one_link_params(sigma_d2: f64, sigma_p2_h: f64, sigma_p2_d: f64, mu: f64) -> ModelParams {
        // L = [sqrt(sigma_d2)], H = [sqrt(sigma_p2_h)], D = sigma_p2_d.
        let l = sigma_d2.sqrt();
        let h = sigma_p2_h.sqrt().max(1e-12);
        ModelParams::new(
            1,
            1,
            1,
            TargetScale::default(),
            vec![BucketParams {
                l: DMatrix::from_element(1, 1, l),
                h: DMatrix::from_element(1, 1, h),
                w_mu: DVector::from_element(1, mu / l),
                w_d: DVector::from_element(1, softplus_inv(sigma_p2_d) / h),
                diag_override: None,
            }],
        )
        .unwrap()
    }

    fn one_link_trip(v: f64) -> SubTripSet {
        let trip = Trip {
            trip_id: "obs".into(),
            day: 0,
            depart_s: 0,
            links: vec![0],
            checkpoints: vec![(1, v)],
        };
        subsample(&trip, 0, 1.0).unwrap()
    }

    #[test]
    fn zero_observations_give_prior() {
        let params = one_link_params(1.0, 1.0, 1.0, 5.0);
        let post = condition(&[], &params, 0).unwrap();
        assert_eq!(post.n_obs, 0);
        assert_eq!(post.z_mean, DVector::zeros(1));
        assert_eq!(post.z_cov, DMatrix::identity(1, 1));
        let a = predict(&[0], &post, &params).unwrap();
        let b = predict_prior(&[0], &params, 0).unwrap();
        assert_eq!(a.mean_s, b.mean_s);
        assert_eq!(a.var_s2, b.var_s2);
    }

    #[test]
    fn scalar_shrinkage_case() {
        // mu = 5, sigma_d^2 = 1, sigma_p^2 = 3 (H part 1, D part 2), v = 9:
        // posterior mean 6.0, predictive variance 3.75 for a repeat query.
        let params = one_link_params(1.0, 1.0, 2.0, 5.0);
        let post = condition(&[one_link_trip(9.0)], &params, 0).unwrap();
        let pred = predict(&[0], &post, &params).unwrap();
        assert_relative_eq!(pred.mean_s, 6.0, epsilon = 1e-6);
        assert_relative_eq!(pred.var_s2, 3.75, epsilon = 1e-6);
        assert_relative_eq!(pred.components.prior_mean_s, 5.0, epsilon = 1e-9);
        assert_relative_eq!(pred.components.day_correction_s, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn prior_prediction_assembles_scalars() {
        // Single link, L row [1], w_mu [5], H row ~0, D = 2 -> N(5, 3).
        let params = one_link_params(1.0, 0.0, 2.0, 5.0);
        let pred = predict_prior(&[0], &params, 0).unwrap();
        assert_relative_eq!(pred.mean_s, 5.0, epsilon = 1e-9);
        assert_relative_eq!(pred.var_s2, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn orthogonal_links_add_variances() {
        let mut l = DMatrix::zeros(2, 2);
        l[(0, 0)] = 1.0;
        l[(1, 1)] = 2.0;
        let mut h = DMatrix::zeros(2, 2);
        h[(0, 0)] = 0.5;
        h[(1, 1)] = 0.25;
        let params = ModelParams::new(
            2,
            2,
            2,
            TargetScale::default(),
            vec![BucketParams {
                l,
                h,
                w_mu: DVector::zeros(2),
                w_d: DVector::zeros(2),
                diag_override: None,
            }],
        )
        .unwrap();
        let p0 = predict_prior(&[0], &params, 0).unwrap();
        let p1 = predict_prior(&[1], &params, 0).unwrap();
        let both = predict_prior(&[0, 1], &params, 0).unwrap();
        assert_relative_eq!(both.var_s2, p0.var_s2 + p1.var_s2, epsilon = 1e-12);
    }

    #[test]
    fn bucket_mismatch_is_rejected() {
        let params = ModelParams::init(3, 2, 2, 24, 1, TargetScale::default()).unwrap();
        let mut set = one_link_trip(100.0);
        set.parent.depart_s = 12 * 3600; // bucket 12
        assert!(condition(&[set], &params, 3).is_err());
    }

    #[test]
    fn unknown_link_is_rejected() {
        let params = one_link_params(1.0, 1.0, 1.0, 5.0);
        assert!(predict_prior(&[7], &params, 0).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_concentrates() {
        let pred = GaussianPrediction {
            mean_s: 0.0,
            var_s2: 1.0,
            components: PredictionComponents {
                prior_mean_s: 0.0,
                day_correction_s: 0.0,
                day_var_s2: 0.5,
                trip_var_s2: 0.5,
            },
        };
        let a = sample(&pred, 10, 3, SampleMode::Raw);
        let b = sample(&pred, 10, 3, SampleMode::Raw);
        assert_eq!(a, b);

        let n = 1_000_000;
        let draws = sample(&pred, n, 42, SampleMode::Raw);
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        let var: f64 = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "sample variance {var}");
    }

    #[test]
    fn degenerate_variance_collapses_to_mean() {
        let pred = GaussianPrediction {
            mean_s: 42.0,
            var_s2: VARIANCE_FLOOR,
            components: PredictionComponents {
                prior_mean_s: 42.0,
                day_correction_s: 0.0,
                day_var_s2: 0.0,
                trip_var_s2: 0.0,
            },
        };
        for x in sample(&pred, 100, 9, SampleMode::Raw) {
            assert_relative_eq!(x, 42.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn physical_mode_clamps_at_one_second() {
        let pred = GaussianPrediction {
            mean_s: 0.0,
            var_s2: 100.0,
            components: PredictionComponents {
                prior_mean_s: 0.0,
                day_correction_s: 0.0,
                day_var_s2: 50.0,
                trip_var_s2: 50.0,
            },
        };
        let raw = sample(&pred, 1000, 5, SampleMode::Raw);
        let phys = sample(&pred, 1000, 5, SampleMode::Physical);
        assert!(raw.iter().any(|&x| x < 1.0));
        assert!(phys.iter().all(|&x| x >= 1.0));
    }

    #[test]
    fn variance_never_increases_with_conditioning() {
        let params = one_link_params(2.0, 0.5, 1.0, 5.0);
        let prior = predict_prior(&[0], &params, 0).unwrap();
        let mut obs = Vec::new();
        let mut prev_day_var = f64::INFINITY;
        for i in 0..5 {
            obs.push(one_link_trip(5.0 + i as f64));
            let post = condition(&obs, &params, 0).unwrap();
            let pred = predict(&[0], &post, &params).unwrap();
            assert!(pred.var_s2 <= prior.var_s2 + 1e-9);
            assert!(pred.components.day_var_s2 <= prev_day_var + 1e-12);
            prev_day_var = pred.components.day_var_s2;
        }
    }
}

//! Maximum-likelihood training loop and evaluation policies.
//!
//! Each step builds the augmented batch Gaussian, evaluates the NLL through
//! the Woodbury path, and applies an adaptive-moment update to the batch's
//! bucket parameters. Buckets are trained jointly in one loop; validation NLL
//! drives early stopping and checkpoint selection.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{assign_bucket, make_batches, subsample, SubTripSet, Trip};
use crate::error::{Error, Result};
use crate::inference::{condition, predict, predict_prior, GaussianPrediction};
use crate::metrics::{coverage, mean_crps, point_metrics, MetricsReport, ScoringMode};
use crate::model::{nll, nll_and_grad, Gradients, ModelParams, TargetScale};
use crate::network::RoadNetwork;
use crate::rng::substream;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Trips per joint batch.
    pub b: usize,
    /// Extra sub-trips per trip.
    pub k: usize,
    /// Sub-sampling stride rate; `None` means `1/(k+1)`.
    pub eta: Option<f64>,
    /// Time buckets per day.
    pub p: usize,
    pub r_l: usize,
    pub r_h: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// Early-stop patience on validation NLL, in epochs.
    pub patience: usize,
    pub seed: u64,
    /// Standardize targets by the training-set mean.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            b: 64,
            k: 2,
            eta: None,
            p: 24,
            r_l: 36,
            r_h: 36,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 100,
            patience: 10,
            seed: 0,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(1.0 / (self.k as f64 + 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.p == 0 || self.r_l == 0 || self.r_h == 0 || self.epochs == 0 {
            return Err(Error::validation("b, p, r_l, r_h, epochs must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::validation("moment decays must lie in (0,1)"));
        }
        let eta = self.eta();
        if self.k > 0 && !(eta > 0.0 && eta <= 1.0 / self.k as f64) {
            return Err(Error::validation(format!(
                "eta {eta} must lie in (0, 1/k] for k={}",
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean NLL per batch row, per epoch, on the training split.
    pub train_nll: Vec<f64>,
    /// Mean full-trip NLL per row on the validation split.
    pub val_nll: Vec<f64>,
    pub best_epoch: usize,
    /// Wall-clock seconds per epoch (zeroed by deterministic runs).
    pub epoch_seconds: Vec<f64>,
    /// Set when training aborted on a non-finite likelihood.
    pub diverged: Option<String>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: TrainReport,
}

/// Random 70/15/15 split, deterministic per seed.
pub fn split_trips(trips: &[Trip], seed: u64) -> (Vec<Trip>, Vec<Trip>, Vec<Trip>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..trips.len()).collect();
    idx.shuffle(&mut substream(seed, "split"));
    let n = trips.len();
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let pick = |range: &[usize]| range.iter().map(|&i| trips[i].clone()).collect();
    (
        pick(&idx[..n_train]),
        pick(&idx[n_train..(n_train + n_val).min(n)]),
        pick(&idx[(n_train + n_val).min(n)..]),
    )
}

/// Adam state for one bucket's tensors.
struct AdamState {
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    fn new(n_links: usize, r_l: usize, r_h: usize) -> Self {
        Self {
            step: 0,
            m: Gradients::zeros(n_links, r_l, r_h),
            v: Gradients::zeros(n_links, r_l, r_h),
        }
    }
}

fn adam_update_slice(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    bias1: f64,
    bias2: f64,
) {
    const EPS: f64 = 1e-8;
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let mhat = m[i] / bias1;
        let vhat = v[i] / bias2;
        theta[i] -= lr * mhat / (vhat.sqrt() + EPS);
    }
}

fn adam_step(
    params: &mut ModelParams,
    bucket: usize,
    grad: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let bias1 = 1.0 - config.beta1.powi(state.step as i32);
    let bias2 = 1.0 - config.beta2.powi(state.step as i32);
    let bp = params.bucket_mut(bucket)?;
    let (lr, b1, b2) = (config.learning_rate, config.beta1, config.beta2);
    adam_update_slice(
        bp.l.as_mut_slice(), grad.l.as_slice(),
        state.m.l.as_mut_slice(), state.v.l.as_mut_slice(),
        lr, b1, b2, bias1, bias2,
    );
    adam_update_slice(
        bp.h.as_mut_slice(), grad.h.as_slice(),
        state.m.h.as_mut_slice(), state.v.h.as_mut_slice(),
        lr, b1, b2, bias1, bias2,
    );
    adam_update_slice(
        bp.w_mu.as_mut_slice(), grad.w_mu.as_slice(),
        state.m.w_mu.as_mut_slice(), state.v.w_mu.as_mut_slice(),
        lr, b1, b2, bias1, bias2,
    );
    adam_update_slice(
        bp.w_d.as_mut_slice(), grad.w_d.as_slice(),
        state.m.w_d.as_mut_slice(), state.v.w_d.as_mut_slice(),
        lr, b1, b2, bias1, bias2,
    );
    Ok(())
}

/// Mean full-trip NLL per row under canonical batching (no augmentation,
/// fixed shuffle seed). Returns 0 for an empty list.
pub fn dataset_mean_nll(trips: &[Trip], params: &ModelParams, b: usize, seed: u64) -> Result<f64> {
    if trips.is_empty() {
        return Ok(0.0);
    }
    let batches = make_batches(trips, b, 0, 1.0, params.bucket_count(), seed)?;
    let mut total = 0.0;
    let mut rows = 0usize;
    for batch in &batches {
        total += nll(batch, params)?;
        rows += batch.row_count();
    }
    Ok(total / rows as f64)
}

/// Least-squares warm start on link counts.
///
/// The mean rides on the day factor (`mu = L w_mu`), so a cold start forces
/// the optimizer to grow `L` toward the mean structure first, inflating the
/// day covariance on the way. Instead, regress standardized totals on the
/// per-link visit counts, place the fitted per-link means in `L`'s first
/// column scaled to the observed between-day spread of the residuals, and
/// set `w_mu` accordingly. Initial means then match the data and the initial
/// day-level variance matches its moment estimate.
fn warm_start_mean(params: &mut ModelParams, trips: &[Trip]) -> Result<()> {
    let p = params.bucket_count();
    let n = params.link_count();
    let scale = params.scale();

    let mut by_bucket: Vec<Vec<&Trip>> = vec![Vec::new(); p];
    for t in trips {
        by_bucket[assign_bucket(t.depart_s, p)?].push(t);
    }
    for (bucket, members) in by_bucket.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        // Per-link mean times: ridge solve of (A'A + lambda I) m = A' y.
        let mut gram: DMatrix<f64> = DMatrix::zeros(n, n);
        let mut rhs: DVector<f64> = DVector::zeros(n);
        for t in members {
            let y = scale.standardize(t.total_s());
            for &a in &t.links {
                rhs[a as usize] += y;
                for &b in &t.links {
                    gram[(a as usize, b as usize)] += 1.0;
                }
            }
        }
        for i in 0..n {
            gram[(i, i)] += 1e-3;
        }
        let Some(chol) = Cholesky::new(gram) else {
            continue;
        };
        let m = chol.solve(&rhs);

        // Between-day spread of the mean residual sets the initial scale of
        // the day factor's mean-aligned column.
        let mut day_sums: std::collections::BTreeMap<i64, (f64, usize)> =
            std::collections::BTreeMap::new();
        let mut mean_total = 0.0;
        for t in members {
            let fitted: f64 = t.links.iter().map(|&l| m[l as usize]).sum();
            let resid = scale.standardize(t.total_s()) - fitted;
            let e = day_sums.entry(t.day).or_insert((0.0, 0));
            e.0 += resid;
            e.1 += 1;
            mean_total += fitted;
        }
        mean_total /= members.len() as f64;
        let shifts: Vec<f64> = day_sums.values().map(|(s, c)| s / *c as f64).collect();
        let s_day = if shifts.len() > 1 {
            let mu = shifts.iter().sum::<f64>() / shifts.len() as f64;
            (shifts.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>()
                / (shifts.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        let gamma = (s_day / mean_total.abs().max(1e-9)).max(0.01);

        let r_l = params.r_l();
        let bp = params.bucket_mut(bucket)?;
        for i in 0..n {
            bp.l[(i, 0)] = gamma * m[i];
        }
        bp.w_mu = DVector::zeros(r_l);
        bp.w_mu[0] = 1.0 / gamma;
    }
    Ok(())
}

/// Run the training loop on `trips` (which are split 70/15/15 internally; the
/// test split is untouched and recoverable via [`split_trips`] with the same
/// seed). Returns the best-validation checkpoint.
pub fn train(trips: &[Trip], net: &RoadNetwork, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if trips.is_empty() {
        return Err(Error::validation("empty training dataset"));
    }
    let (train_set, val_set, _) = split_trips(trips, config.seed);
    train_on_splits(&train_set, &val_set, net, config)
}

/// Training loop over explicit train/validation splits.
pub fn train_on_splits(
    train_set: &[Trip],
    val_set: &[Trip],
    net: &RoadNetwork,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::validation("empty training split"));
    }
    // Scale-only standardization: a shift would make the per-trip mean
    // unrepresentable as a link sum, while a pure scale commutes with it.
    // The standard deviation puts the variance target near softplus(0),
    // where the diagonal initializes.
    let scale = if config.standardize {
        let n = train_set.len() as f64;
        let mean = train_set.iter().map(|t| t.total_s()).sum::<f64>() / n;
        let var = train_set.iter().map(|t| (t.total_s() - mean).powi(2)).sum::<f64>() / n;
        TargetScale {
            shift: 0.0,
            scale: var.sqrt().max(0.01 * mean.abs()).max(1e-9),
        }
    } else {
        TargetScale::default()
    };
    let mut params = ModelParams::init(
        net.link_count(),
        config.r_l,
        config.r_h,
        config.p,
        config.seed,
        scale,
    )?;
    warm_start_mean(&mut params, train_set)?;

    let mut states: Vec<AdamState> = (0..config.p)
        .map(|_| AdamState::new(net.link_count(), config.r_l, config.r_h))
        .collect();

    let mut report = TrainReport {
        train_nll: Vec::new(),
        val_nll: Vec::new(),
        best_epoch: 0,
        epoch_seconds: Vec::new(),
        diverged: None,
    };
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut stale_epochs = 0usize;

    'epochs: for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let epoch_seed = config
            .seed
            .wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut batches =
            make_batches(train_set, config.b, config.k, config.eta(), config.p, epoch_seed)?;
        // Interleave buckets within the epoch.
        use rand::seq::SliceRandom;
        batches.shuffle(&mut substream(config.seed, &format!("batch-order-{epoch}")));

        let mut epoch_nll = 0.0;
        let mut epoch_rows = 0usize;
        for batch in &batches {
            let step = nll_and_grad(batch, &params).and_then(|(value, grad)| {
                if !value.is_finite() {
                    return Err(Error::numerical(format!("non-finite NLL ({value})")));
                }
                adam_step(&mut params, batch.bucket, &grad, &mut states[batch.bucket], config)?;
                Ok(value)
            });
            match step {
                Ok(value) => {
                    epoch_nll += value;
                    epoch_rows += batch.row_count();
                }
                Err(Error::Numerical(msg)) => {
                    report.diverged = Some(format!("epoch {epoch}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        report.train_nll.push(epoch_nll / epoch_rows.max(1) as f64);

        let val = if val_set.is_empty() {
            *report.train_nll.last().unwrap()
        } else {
            // Marginal (single-trip) NLL: joint batches amortize inflated
            // shared variance and would miss miscalibration.
            match dataset_mean_nll(val_set, &params, 1, 0) {
                Ok(v) => v,
                Err(Error::Numerical(msg)) => {
                    report.diverged = Some(format!("epoch {epoch} validation: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        };
        report.val_nll.push(val);
        report.epoch_seconds.push(t0.elapsed().as_secs_f64());

        if val.is_finite() && val < best_val {
            best_val = val;
            best_params = params.clone();
            report.best_epoch = epoch;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs > config.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome { params: best_params, report })
}

/// How evaluation builds each trip's predictive distribution.
#[derive(Debug, Clone, Copy)]
pub enum EvalPolicy<'a> {
    /// Unconditional prior prediction.
    Prior,
    /// Condition on completed trips from the pool: same `(day, bucket)`,
    /// strictly earlier departure, nearest departures first, capped at
    /// `max_obs` trips, augmented with `subsample(k, eta)`.
    Conditional {
        pool: &'a [Trip],
        max_obs: usize,
        k: usize,
        eta: f64,
    },
}

/// Per-trip evaluation record (for the CSV dump).
#[derive(Debug, Clone, Serialize)]
pub struct TripPrediction {
    pub trip_id: String,
    pub truth_s: f64,
    pub mean_s: f64,
    pub var_s2: f64,
    pub n_conditioning: usize,
}

/// Predict one trip under a policy.
pub fn predict_trip(
    trip: &Trip,
    params: &ModelParams,
    policy: EvalPolicy<'_>,
) -> Result<(GaussianPrediction, usize)> {
    let bucket = assign_bucket(trip.depart_s, params.bucket_count())?;
    match policy {
        EvalPolicy::Prior => Ok((predict_prior(&trip.links, params, bucket)?, 0)),
        EvalPolicy::Conditional { pool, max_obs, k, eta } => {
            let mut candidates: Vec<&Trip> = pool
                .iter()
                .filter(|c| {
                    c.day == trip.day
                        && c.trip_id != trip.trip_id
                        && c.depart_s < trip.depart_s
                        && assign_bucket(c.depart_s, params.bucket_count())
                            .map(|b| b == bucket)
                            .unwrap_or(false)
                })
                .collect();
            candidates.sort_by_key(|c| (std::cmp::Reverse(c.depart_s), c.trip_id.clone()));
            candidates.truncate(max_obs);
            if candidates.is_empty() {
                return Ok((predict_prior(&trip.links, params, bucket)?, 0));
            }
            let sets: Vec<SubTripSet> = candidates
                .iter()
                .map(|c| subsample(c, k, eta))
                .collect::<Result<_>>()?;
            let posterior = condition(&sets, params, bucket)?;
            Ok((predict(&trip.links, &posterior, params)?, candidates.len()))
        }
    }
}

/// Evaluate a test set: RMSE/MAE/MAPE, CRPS (raw and standardized), and 90%
/// interval coverage, plus the per-trip records.
pub fn evaluate(
    test: &[Trip],
    params: &ModelParams,
    policy: EvalPolicy<'_>,
    scoring: ScoringMode,
) -> Result<(MetricsReport, Vec<TripPrediction>)> {
    if test.is_empty() {
        return Err(Error::validation("empty evaluation set"));
    }
    let mut preds = Vec::with_capacity(test.len());
    let mut truths = Vec::with_capacity(test.len());
    let mut records = Vec::with_capacity(test.len());
    for trip in test {
        let (pred, n_obs) = predict_trip(trip, params, policy)?;
        records.push(TripPrediction {
            trip_id: trip.trip_id.clone(),
            truth_s: trip.total_s(),
            mean_s: pred.mean_s,
            var_s2: pred.var_s2,
            n_conditioning: n_obs,
        });
        truths.push(trip.total_s());
        preds.push(pred);
    }
    let (rmse_s, mae_s, mape) = point_metrics(&preds, &truths, scoring)?;
    let crps_s = mean_crps(&preds, &truths)?;
    let report = MetricsReport {
        rmse_s,
        mae_s,
        mape,
        crps_s,
        crps_standardized: crps_s / params.scale().scale,
        coverage90: coverage(&preds, &truths, 0.9)?,
        n: test.len(),
        scoring_mode: scoring,
    };
    Ok((report, records))
}

//! Synthetic networks and trip corpora with known ground truth.
//!
//! The generator draws exactly from the model's own hierarchy: one latent
//! `z_i` per day gives the day effect `eta_i = L* z_i`; each trip adds
//! low-rank-plus-diagonal trip noise restricted to its links; per-link times
//! sum into checkpoint elapsed times. No truncation is applied, so oracle
//! likelihoods and calibration checks are well-posed against the truth.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Trip;
use crate::error::{Error, Result};
use crate::model::{softplus_inv, BucketParams, ModelParams, TargetScale};
use crate::network::{LinkId, RoadNetwork};
use crate::rng::substream;

/// True parameters plus the network they live on.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub params: ModelParams,
    pub network: RoadNetwork,
    pub length_scale: f64,
    pub seed: u64,
}

/// Grid road network: `width x height` intersections, every street carries
/// one directed link per direction. Link coords sit at street midpoints.
pub fn gen_network(width: usize, height: usize) -> Result<RoadNetwork> {
    if width < 2 || height < 2 {
        return Err(Error::validation(format!(
            "grid must be at least 2x2, got {width}x{height}"
        )));
    }
    let inter = |ix: usize, iy: usize| iy * width + ix;
    // Streets between adjacent intersections, in scan order.
    let mut streets: Vec<(usize, usize)> = Vec::new();
    for iy in 0..height {
        for ix in 0..width {
            if ix + 1 < width {
                streets.push((inter(ix, iy), inter(ix + 1, iy)));
            }
            if iy + 1 < height {
                streets.push((inter(ix, iy), inter(ix, iy + 1)));
            }
        }
    }
    let n_links = 2 * streets.len();
    let mut link_tail = vec![0usize; n_links];
    let mut link_head = vec![0usize; n_links];
    let mut coords = vec![[0.0f64; 2]; n_links];
    for (s, &(u, v)) in streets.iter().enumerate() {
        let (ux, uy) = ((u % width) as f64, (u / width) as f64);
        let (vx, vy) = ((v % width) as f64, (v / width) as f64);
        link_tail[2 * s] = u;
        link_head[2 * s] = v;
        link_tail[2 * s + 1] = v;
        link_head[2 * s + 1] = u;
        // 30% along the street from each direction's tail, so the two
        // directions carry distinct coordinates.
        coords[2 * s] = [ux + 0.3 * (vx - ux), uy + 0.3 * (vy - uy)];
        coords[2 * s + 1] = [vx + 0.3 * (ux - vx), vy + 0.3 * (uy - vy)];
    }
    // Out-links per intersection.
    let mut out_links: Vec<Vec<usize>> = vec![Vec::new(); width * height];
    for l in 0..n_links {
        out_links[link_tail[l]].push(l);
    }
    // Connect a -> b when head(a) = tail(b), excluding immediate U-turns.
    let mut edges = Vec::new();
    for a in 0..n_links {
        for &b in &out_links[link_head[a]] {
            if link_head[b] != link_tail[a] {
                edges.push((a as LinkId, b as LinkId));
            }
        }
    }
    RoadNetwork::new(n_links, edges, Some(coords))
}

/// Radial-basis features of the link midpoints at `centers`.
fn rbf_features(coords: &[[f64; 2]], centers: &[[f64; 2]], length_scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(coords.len(), centers.len(), |i, c| {
        let dx = coords[i][0] - centers[c][0];
        let dy = coords[i][1] - centers[c][1];
        (-(dx * dx + dy * dy) / (2.0 * length_scale * length_scale)).exp()
    })
}

fn lsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    a.clone()
        .svd(true, true)
        .solve(b, 1e-10)
        .expect("SVD least squares cannot fail with computed factors")
}

/// Build smooth ground-truth parameters.
///
/// `L*` rows come from long-range radial-basis features (day-level link std
/// about 15% of the link mean), `H*` rows from short-range features (trip
/// level about 8%), and `w_d*` is fitted so the diagonal adds about 6%.
/// Link means land around 35-55 seconds.
pub fn gen_ground_truth(
    net: &RoadNetwork,
    r_l: usize,
    r_h: usize,
    seed: u64,
    length_scale: f64,
) -> Result<GroundTruth> {
    let coords = net
        .coords()
        .ok_or_else(|| Error::validation("ground truth generation needs link coords"))?;
    if !(length_scale > 0.0) {
        return Err(Error::validation("length scale must be positive"));
    }
    let n = net.link_count();
    let mut rng = substream(seed, "truth");
    let (min_x, max_x) = coords.iter().fold((f64::MAX, f64::MIN), |(lo, hi), c| {
        (lo.min(c[0]), hi.max(c[0]))
    });
    let (min_y, max_y) = coords.iter().fold((f64::MAX, f64::MIN), |(lo, hi), c| {
        (lo.min(c[1]), hi.max(c[1]))
    });
    let draw_centers = |count: usize, rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> {
        (0..count)
            .map(|_| {
                [
                    rng.random_range(min_x..=max_x.max(min_x + 1e-9)),
                    rng.random_range(min_y..=max_y.max(min_y + 1e-9)),
                ]
            })
            .collect()
    };

    let f = rbf_features(coords, &draw_centers(r_l, &mut rng), length_scale);

    // Smooth link means mapped into [35, 55] s.
    let w_raw = DVector::from_fn(r_l, |_, _| 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal));
    let raw = &f * &w_raw;
    let (lo, hi) = raw.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    let span = (hi - lo).max(1e-9);
    let target = raw.map(|x| 35.0 + 20.0 * (x - lo) / span);
    let w0 = lsq(&f, &target);
    let mu = &f * &w0;

    let mean_mu = mu.mean();
    let mean_f_norm = (0..n).map(|i| f.row(i).norm()).sum::<f64>() / n as f64;
    let beta = 0.15 * mean_mu / mean_f_norm.max(1e-12);
    let l = &f * beta;
    let w_mu = w0 / beta;

    let g = rbf_features(coords, &draw_centers(r_h, &mut rng), length_scale / 4.0);
    let mean_g_norm = (0..n).map(|i| g.row(i).norm()).sum::<f64>() / n as f64;
    let gamma = 0.08 * mean_mu / mean_g_norm.max(1e-12);
    let h = &g * gamma;

    let d_target = mu.map(|m| softplus_inv((0.06 * m).powi(2)));
    let w_d = lsq(&h, &d_target);

    let params = ModelParams::new(
        n,
        r_l,
        r_h,
        TargetScale::default(),
        vec![BucketParams { l, h, w_mu, w_d, diag_override: None }],
    )?;
    Ok(GroundTruth { params, network: net.clone(), length_scale, seed })
}

/// One day's latent effect `eta = L* z`, `z ~ N(0, I)`.
pub fn sample_day_effect(truth: &GroundTruth, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let bp = &truth.params.buckets()[0];
    let z = DVector::from_fn(truth.params.r_l(), |_, _| rng.sample::<f64, _>(StandardNormal));
    &bp.l * z
}

/// Per-link times for one trip on `path`: `mu + eta + eps` with
/// `eps ~ N(0, H_T H_Tᵀ + D_T)` drawn exactly through the factor form.
pub fn sample_path_times(
    truth: &GroundTruth,
    path: &[LinkId],
    eta: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let bp = &truth.params.buckets()[0];
    let mu = bp.mu();
    let d = bp.diag_d();
    let zeta = DVector::from_fn(truth.params.r_h(), |_, _| rng.sample::<f64, _>(StandardNormal));
    path.iter()
        .map(|&l| {
            let li = l as usize;
            let xi: f64 = rng.sample(StandardNormal);
            mu[li] + eta[li] + bp.h.row(li).transpose().dot(&zeta) + d[li].sqrt() * xi
        })
        .collect()
}

/// Self-avoiding random walk over the link graph.
fn random_walk(
    adj: &[Vec<LinkId>],
    target_len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<LinkId> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let start = rng.random_range(0..n) as LinkId;
    let mut walk = vec![start];
    visited[start as usize] = true;
    while walk.len() < target_len {
        let here = *walk.last().unwrap() as usize;
        let options: Vec<LinkId> = adj[here]
            .iter()
            .copied()
            .filter(|&l| !visited[l as usize])
            .collect();
        if options.is_empty() {
            break;
        }
        let next = options[rng.random_range(0..options.len())];
        visited[next as usize] = true;
        walk.push(next);
    }
    walk
}

/// Generate `n_days x trips_per_day` trips with checkpoints at every
/// `checkpoint_rate`-th link.
///
/// Trips whose raw Gaussian draw produces a non-monotone checkpoint sequence
/// (possible but ~1e-8 per link at the generated scales) are redrawn, so the
/// emitted corpus always satisfies the trip invariants.
pub fn gen_trips(
    truth: &GroundTruth,
    n_days: usize,
    trips_per_day: usize,
    walk_len_range: (usize, usize),
    checkpoint_rate: usize,
    seed: u64,
) -> Result<Vec<Trip>> {
    let (min_len, max_len) = walk_len_range;
    if n_days == 0 || trips_per_day == 0 || min_len == 0 || max_len < min_len {
        return Err(Error::validation("counts and walk length range must be positive"));
    }
    if checkpoint_rate == 0 {
        return Err(Error::validation("checkpoint rate must be >= 1"));
    }
    let adj = truth.network.adjacency();
    let bp = &truth.params.buckets()[0];
    let mu = bp.mu();

    let mut trips = Vec::with_capacity(n_days * trips_per_day);
    for day in 0..n_days {
        let mut rng = substream(seed, &format!("gen-day-{day}"));
        let eta = sample_day_effect(truth, &mut rng);
        for q in 0..trips_per_day {
            let target_len = rng.random_range(min_len..=max_len);
            let mut path = random_walk(&adj, target_len, &mut rng);
            for _ in 0..20 {
                if path.len() >= 2.min(target_len) {
                    break;
                }
                path = random_walk(&adj, target_len, &mut rng);
            }
            let mean_total: f64 = path.iter().map(|&l| mu[l as usize]).sum();
            debug_assert!(mean_total > 0.0, "true mean trip time must be positive");

            let depart = rng.random_range(0..crate::data::SECONDS_PER_DAY);
            let mut trip = None;
            for _ in 0..100 {
                let times = sample_path_times(truth, &path, &eta, &mut rng);
                let mut checkpoints = Vec::new();
                let mut acc = 0.0;
                for (i, t) in times.iter().enumerate() {
                    acc += t;
                    let covered = i + 1;
                    if covered % checkpoint_rate == 0 || covered == path.len() {
                        checkpoints.push((covered, acc));
                    }
                }
                let monotone = checkpoints.windows(2).all(|w| w[1].1 > w[0].1)
                    && checkpoints.first().is_some_and(|c| c.1 > 0.0);
                if monotone {
                    trip = Some(Trip {
                        trip_id: format!("d{day:03}-q{q:04}"),
                        day: day as i64,
                        depart_s: depart,
                        links: path.clone(),
                        checkpoints,
                    });
                    break;
                }
            }
            trips.push(trip.ok_or_else(|| {
                Error::numerical(
                    "could not draw a monotone trip in 100 attempts; \
                     ground-truth scales put too much mass on negative times",
                )
            })?);
        }
    }
    Ok(trips)
}

/// Mean per-row NLL of `trips` under the true parameters; the attainable
/// reference for recovery tests. Returns 0 for an empty list.
pub fn oracle_nll(trips: &[Trip], truth: &GroundTruth) -> Result<f64> {
    crate::training::dataset_mean_nll(trips, &truth.params, 64, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grid_counts() {
        let net = gen_network(2, 2).unwrap();
        assert_eq!(net.link_count(), 8); // 4 streets, two directions each
        let net = gen_network(10, 10).unwrap();
        assert_eq!(net.link_count(), 360); // 180 streets
        assert!(gen_network(1, 2).is_err());
    }

    #[test]
    fn grid_edges_exclude_u_turns() {
        let net = gen_network(3, 3).unwrap();
        for &(a, b) in net.edges() {
            assert_ne!(b, a ^ 1, "U-turn edge {a}->{b}");
        }
    }

    #[test]
    fn infinite_length_scale_gives_rank_one_day_covariance() {
        let net = gen_network(4, 4).unwrap();
        let truth = gen_ground_truth(&net, 4, 3, 1, 1e9).unwrap();
        let l = &truth.params.buckets()[0].l;
        // All rows identical: Sigma_d correlations all 1.
        let first = l.row(0).clone_owned();
        for i in 1..l.nrows() {
            assert_relative_eq!((l.row(i) - &first).norm(), 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn shrinking_length_scale_decorrelates_day_covariance() {
        // As the length scale shrinks, feature rows decouple and Sigma_d*
        // approaches diagonal; compare mean absolute correlations.
        let net = gen_network(4, 4).unwrap();
        let mean_abs_corr = |ls: f64| -> f64 {
            let truth = gen_ground_truth(&net, 6, 3, 2, ls).unwrap();
            let l = &truth.params.buckets()[0].l;
            let n = l.nrows();
            let mut acc = 0.0;
            let mut count = 0usize;
            for i in 0..n {
                for j in 0..i {
                    let (ri, rj) = (l.row(i), l.row(j));
                    let denom = ri.norm() * rj.norm();
                    if denom > 1e-12 {
                        acc += (ri.dot(&rj) / denom).abs();
                        count += 1;
                    }
                }
            }
            acc / count.max(1) as f64
        };
        let smooth = mean_abs_corr(3.0);
        let rough = mean_abs_corr(0.05);
        assert!(smooth > 0.6, "long scale should correlate, got {smooth}");
        assert!(rough < 0.5 * smooth, "short scale {rough} vs long {smooth}");
    }

    #[test]
    fn nearby_links_correlate_more_than_distant_ones() {
        let net = gen_network(6, 6).unwrap();
        let truth = gen_ground_truth(&net, 8, 4, 3, 2.0).unwrap();
        let coords = net.coords().unwrap();
        let l = &truth.params.buckets()[0].l;
        let corr = |a: usize, b: usize| -> f64 {
            let ra = l.row(a);
            let rb = l.row(b);
            ra.dot(&rb) / (ra.norm() * rb.norm()).max(1e-300)
        };
        let dist = |a: usize, b: usize| -> f64 {
            let dx = coords[a][0] - coords[b][0];
            let dy = coords[a][1] - coords[b][1];
            (dx * dx + dy * dy).sqrt()
        };
        // Nearby vs distant needs a real distance gap; at similar distances
        // the finite random feature map fluctuates.
        let mut rng = substream(9, "triples");
        let n = net.link_count();
        let mut checked = 0;
        while checked < 100 {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            let c = rng.random_range(0..n);
            let (near, far) = if dist(a, b) < dist(a, c) { (b, c) } else { (c, b) };
            if dist(a, far) - dist(a, near) < 1.5 {
                continue;
            }
            checked += 1;
            assert!(
                corr(a, near) >= corr(a, far) - 1e-12,
                "links {near}/{far} around {a}: near corr {} < far corr {}",
                corr(a, near),
                corr(a, far)
            );
        }
    }

    #[test]
    fn zero_variance_limit_makes_totals_deterministic() {
        // The mean rides on L (mu = L w_mu), so exact zero variance with a
        // nonzero mean is a limit: shrink L by c while growing w_mu by 1/c.
        let net = gen_network(3, 3).unwrap();
        let base = gen_ground_truth(&net, 3, 2, 4, 2.0).unwrap();
        let n = net.link_count();
        let mu_target = base.params.mu_vector(0).unwrap();
        let c = 1e-9;
        let mut l = DMatrix::zeros(n, 1);
        l.set_column(0, &(&mu_target * c));
        let params = ModelParams::new(
            n,
            1,
            1,
            TargetScale::default(),
            vec![BucketParams {
                l,
                h: DMatrix::zeros(n, 1),
                w_mu: DVector::from_element(1, 1.0 / c),
                w_d: DVector::zeros(1),
                diag_override: Some(DVector::zeros(n)),
            }],
        )
        .unwrap();
        let truth = GroundTruth { params, network: net.clone(), length_scale: 2.0, seed: 4 };
        let trips = gen_trips(&truth, 2, 5, (3, 6), 1, 11).unwrap();
        let mu = truth.params.mu_vector(0).unwrap();
        for t in &trips {
            let expected: f64 = t.links.iter().map(|&l| mu[l as usize]).sum();
            assert_relative_eq!(t.total_s(), expected, max_relative = 1e-6);
        }
    }

    #[test]
    fn monte_carlo_matches_closed_form_on_fixed_path() {
        let net = gen_network(4, 4).unwrap();
        let truth = gen_ground_truth(&net, 4, 3, 7, 2.0).unwrap();
        let path: Vec<LinkId> = vec![0, 2, 4];
        let bp = &truth.params.buckets()[0];
        let a_mu: f64 = path.iter().map(|&l| bp.mu()[l as usize]).sum();
        let cov_day = truth.params.trip_cov(&path, &path, 0).unwrap();
        let a_h = ModelParams::sum_rows(&bp.h, &path);
        let d = bp.diag_d();
        let cov_trip = a_h.dot(&a_h) + path.iter().map(|&l| d[l as usize]).sum::<f64>();
        let total_var = cov_day + cov_trip;

        let n = 10_000;
        let mut rng = substream(100, "mc");
        let mut totals = Vec::with_capacity(n);
        for _ in 0..n {
            let eta = sample_day_effect(&truth, &mut rng);
            let t = sample_path_times(&truth, &path, &eta, &mut rng);
            totals.push(t.iter().sum::<f64>());
        }
        let mean: f64 = totals.iter().sum::<f64>() / n as f64;
        let var: f64 =
            totals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (total_var / n as f64).sqrt();
        assert!((mean - a_mu).abs() < 3.0 * se, "mean {mean} vs {a_mu}");
        assert!((var - total_var).abs() < 0.1 * total_var, "var {var} vs {total_var}");
    }

    #[test]
    fn same_day_trips_covary_cross_day_trips_do_not() {
        let net = gen_network(4, 4).unwrap();
        let truth = gen_ground_truth(&net, 4, 3, 8, 2.0).unwrap();
        let path: Vec<LinkId> = vec![1, 3];
        let cov_day = truth.params.trip_cov(&path, &path, 0).unwrap();

        let n = 20_000;
        let mut rng = substream(200, "mc2");
        let mut same_products = Vec::new();
        let mut cross_products = Vec::new();
        let bp = &truth.params.buckets()[0];
        let a_mu: f64 = path.iter().map(|&l| bp.mu()[l as usize]).sum();
        for _ in 0..n {
            let eta1 = sample_day_effect(&truth, &mut rng);
            let eta2 = sample_day_effect(&truth, &mut rng);
            let t1: f64 = sample_path_times(&truth, &path, &eta1, &mut rng).iter().sum();
            let t2: f64 = sample_path_times(&truth, &path, &eta1, &mut rng).iter().sum();
            let t3: f64 = sample_path_times(&truth, &path, &eta2, &mut rng).iter().sum();
            same_products.push((t1 - a_mu) * (t2 - a_mu));
            cross_products.push((t1 - a_mu) * (t3 - a_mu));
        }
        let same: f64 = same_products.iter().sum::<f64>() / n as f64;
        let cross: f64 = cross_products.iter().sum::<f64>() / n as f64;
        assert!((same - cov_day).abs() < 0.15 * cov_day + 1.0, "same-day {same} vs {cov_day}");
        assert!(cross.abs() < 0.15 * cov_day + 1.0, "cross-day {cross}");
    }

    #[test]
    fn corpus_is_deterministic_per_seed() {
        let net = gen_network(3, 3).unwrap();
        let truth = gen_ground_truth(&net, 3, 2, 5, 2.0).unwrap();
        let a = gen_trips(&truth, 2, 10, (3, 8), 2, 77).unwrap();
        let b = gen_trips(&truth, 2, 10, (3, 8), 2, 77).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.trip_id, y.trip_id);
            assert_eq!(x.links, y.links);
            assert_eq!(x.checkpoints, y.checkpoints);
        }
    }

    #[test]
    fn generated_trips_validate_and_have_positive_means() {
        let net = gen_network(5, 5).unwrap();
        let truth = gen_ground_truth(&net, 5, 4, 6, 2.0).unwrap();
        let trips = gen_trips(&truth, 3, 20, (5, 15), 2, 13).unwrap();
        assert_eq!(trips.len(), 60);
        for t in &trips {
            t.validate(&net).unwrap();
            assert!(t.total_s() > 0.0);
        }
        let mu = truth.params.mu_vector(0).unwrap();
        for &m in mu.iter() {
            assert!(m > 10.0 && m < 120.0, "link mean {m} out of the designed range");
        }
    }
}

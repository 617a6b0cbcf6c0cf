//! Stage-1 pseudo labels from voxel-intensity clustering.
//!
//! All three fitters work on scalar intensities and return models whose
//! classes are ordered by ascending intensity, so class 0 is always the
//! darkest cluster.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Provenance, Volume};

pub const GMM_VARIANCE_FLOOR: f64 = 1e-8;
/// A mixture component with less total responsibility than this has collapsed.
const GMM_MIN_COMPONENT_MASS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    Kmeans,
    MultiOtsu,
    Gmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClusterParams {
    Centroids { centroids: Vec<f64> },
    Thresholds { thresholds: Vec<f64> },
    Mixture { components: Vec<GaussianComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub method: ClusterMethod,
    pub k: usize,
    pub params: ClusterParams,
    /// Within-cluster sum of squares of the final assignment.
    pub objective: f64,
    /// Per-iteration objective: J for k-means, mean log-likelihood for GMM.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub fit_seconds: f64,
}

impl ClusterModel {
    /// Sorted class centers, derived from whichever parameters the method fits.
    pub fn centroids(&self) -> Option<&[f64]> {
        match &self.params {
            ClusterParams::Centroids { centroids } => Some(centroids),
            _ => None,
        }
    }

    pub fn thresholds(&self) -> Option<&[f64]> {
        match &self.params {
            ClusterParams::Thresholds { thresholds } => Some(thresholds),
            _ => None,
        }
    }

    pub fn components(&self) -> Option<&[GaussianComponent]> {
        match &self.params {
            ClusterParams::Mixture { components } => Some(components),
            _ => None,
        }
    }
}

fn count_distinct(pixels: &[f64]) -> usize {
    let mut sorted = pixels.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    sorted.len()
}

fn check_finite(pixels: &[f64]) -> Result<()> {
    if pixels.iter().any(|p| !p.is_finite()) {
        return Err(Error::Clustering("pixels contain non-finite values".into()));
    }
    Ok(())
}

/// Index of the nearest centroid; ties go to the lowest index.
#[inline]
pub fn nearest_centroid(p: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &mu) in centroids.iter().enumerate() {
        let d = (p - mu) * (p - mu);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Total within-cluster sum of squares for a given assignment and centers.
pub fn within_cluster_ss(pixels: &[f64], labels: &[u8], centers: &[f64]) -> f64 {
    pixels
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let d = p - centers[l as usize];
            d * d
        })
        .sum()
}

fn class_means(pixels: &[f64], labels: &[u8], k: usize) -> Vec<f64> {
    let mut sum = vec![0.0; k];
    let mut n = vec![0usize; k];
    for (&p, &l) in pixels.iter().zip(labels) {
        sum[l as usize] += p;
        n[l as usize] += 1;
    }
    sum.iter()
        .zip(&n)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect()
}

fn objective_of(pixels: &[f64], labels: &[u8], k: usize) -> f64 {
    let means = class_means(pixels, labels, k);
    let means: Vec<f64> = means.iter().map(|m| if m.is_nan() { 0.0 } else { *m }).collect();
    within_cluster_ss(pixels, labels, &means)
}

fn kmeans_pp_init(pixels: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(pixels[rng.random_range(0..pixels.len())]);
    let mut d2: Vec<f64> = pixels.iter().map(|&p| (p - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = pixels.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Guard against landing on a zero-distance point through rounding.
            if d2[pick] == 0.0 {
                pick = d2
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
            }
            pixels[pick]
        } else {
            pixels[rng.random_range(0..pixels.len())]
        };
        centroids.push(next);
        for (d, &p) in d2.iter_mut().zip(pixels) {
            *d = d.min((p - next).powi(2));
        }
    }
    centroids
}

/// Lloyd's iteration on scalar data with k-means++ seeding.
pub fn kmeans_fit(pixels: &[f64], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterModel> {
    let start = Instant::now();
    if k == 0 {
        return Err(Error::Clustering("K must be at least 1".into()));
    }
    check_finite(pixels)?;
    if pixels.len() < k {
        return Err(Error::Clustering(format!(
            "{} pixels cannot form {k} clusters",
            pixels.len()
        )));
    }
    let distinct = count_distinct(pixels);
    if distinct < k {
        return Err(Error::Clustering(format!(
            "only {distinct} distinct values for K={k} ({} short)",
            k - distinct
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(pixels, k, &mut rng);
    let mut labels = vec![0u8; pixels.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        let mut j = 0.0;
        for (l, &p) in labels.iter_mut().zip(pixels) {
            let c = nearest_centroid(p, &centroids);
            *l = c as u8;
            j += (p - centroids[c]).powi(2);
            sum[c] += p;
            count[c] += 1;
        }
        history.push(j);
        let mut movement: f64 = 0.0;
        for c in 0..k {
            if count[c] > 0 {
                let next = sum[c] / count[c] as f64;
                movement = movement.max((next - centroids[c]).abs());
                centroids[c] = next;
            }
        }
        if movement < tol {
            break;
        }
    }

    centroids.sort_by(f64::total_cmp);
    for (l, &p) in labels.iter_mut().zip(pixels) {
        *l = nearest_centroid(p, &centroids) as u8;
    }
    let objective = within_cluster_ss(pixels, &labels, &centroids);
    Ok(ClusterModel {
        method: ClusterMethod::Kmeans,
        k,
        params: ClusterParams::Centroids { centroids },
        objective,
        history,
        iterations,
        fit_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Histogram of `pixels` over `[min, max]` with `num_bins` equal bins.
pub struct Histogram {
    pub counts: Vec<u64>,
    pub min: f64,
    pub width: f64,
}

impl Histogram {
    pub fn build(pixels: &[f64], num_bins: usize) -> Self {
        let (min, max) = pixels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
            (lo.min(p), hi.max(p))
        });
        let width = if max > min { (max - min) / num_bins as f64 } else { 1.0 };
        let mut counts = vec![0u64; num_bins];
        for &p in pixels {
            counts[Self::bin_of(p, min, width, num_bins)] += 1;
        }
        Self { counts, min, width }
    }

    fn bin_of(p: f64, min: f64, width: f64, num_bins: usize) -> usize {
        (((p - min) / width).floor().max(0.0) as usize).min(num_bins - 1)
    }

    pub fn center(&self, b: usize) -> f64 {
        self.min + (b as f64 + 0.5) * self.width
    }

    /// Upper edge of bin `b`.
    pub fn edge(&self, b: usize) -> f64 {
        self.min + (b as f64 + 1.0) * self.width
    }
}

/// Between-class variance of a histogram split after the given last-bins.
pub fn between_class_variance(hist: &Histogram, last_bins: &[usize]) -> f64 {
    let total: f64 = hist.counts.iter().map(|&c| c as f64).sum();
    let mut score = 0.0;
    let mut mean_total = 0.0;
    let mut start = 0;
    let ends = last_bins.iter().copied().chain(std::iter::once(hist.counts.len() - 1));
    for end in ends {
        let (mut w, mut s) = (0.0, 0.0);
        for b in start..=end {
            let p = hist.counts[b] as f64 / total;
            w += p;
            s += p * hist.center(b);
        }
        if w > 0.0 {
            score += s * s / w;
        }
        mean_total += s;
        start = end + 1;
    }
    score - mean_total * mean_total
}

/// Optimal multi-level Otsu thresholds by dynamic programming over the
/// histogram (exact: equivalent to enumerating every threshold tuple).
pub fn multi_otsu_fit(pixels: &[f64], k: usize, num_bins: usize) -> Result<ClusterModel> {
    let start = Instant::now();
    check_finite(pixels)?;
    if k < 2 {
        return Err(Error::Clustering("multi-Otsu needs K >= 2".into()));
    }
    if num_bins < k {
        return Err(Error::Clustering(format!("{num_bins} bins cannot hold {k} classes")));
    }
    if pixels.is_empty() {
        return Err(Error::Clustering("no pixels".into()));
    }
    let hist = Histogram::build(pixels, num_bins);
    let occupied = hist.counts.iter().filter(|&&c| c > 0).count();
    if occupied < k {
        return Err(Error::Clustering(format!(
            "degenerate histogram: {occupied} occupied bins for K={k}"
        )));
    }

    let total: f64 = pixels.len() as f64;
    let mut cw = vec![0.0; num_bins + 1];
    let mut cs = vec![0.0; num_bins + 1];
    for b in 0..num_bins {
        let p = hist.counts[b] as f64 / total;
        cw[b + 1] = cw[b] + p;
        cs[b + 1] = cs[b] + p * hist.center(b);
    }
    // Score of one class spanning bins a..=b.
    let term = |a: usize, b: usize| {
        let w = cw[b + 1] - cw[a];
        let s = cs[b + 1] - cs[a];
        if w > 0.0 {
            s * s / w
        } else {
            0.0
        }
    };

    // best[c][b]: best score splitting bins 0..=b into c+1 classes.
    let mut best = vec![vec![f64::NEG_INFINITY; num_bins]; k];
    let mut arg = vec![vec![0usize; num_bins]; k];
    for b in 0..num_bins {
        best[0][b] = term(0, b);
    }
    for c in 1..k {
        for b in c..num_bins {
            let mut top = f64::NEG_INFINITY;
            let mut top_a = c - 1;
            for a in (c - 1)..b {
                let v = best[c - 1][a] + term(a + 1, b);
                if v > top {
                    top = v;
                    top_a = a;
                }
            }
            best[c][b] = top;
            arg[c][b] = top_a;
        }
    }
    let mut last_bins = vec![0usize; k - 1];
    let mut b = num_bins - 1;
    for c in (1..k).rev() {
        b = arg[c][b];
        last_bins[c - 1] = b;
    }
    let thresholds: Vec<f64> = last_bins.iter().map(|&b| hist.edge(b)).collect();
    let model_params = ClusterParams::Thresholds { thresholds };
    let mut model = ClusterModel {
        method: ClusterMethod::MultiOtsu,
        k,
        params: model_params,
        objective: 0.0,
        history: vec![between_class_variance(&hist, &last_bins)],
        iterations: 1,
        fit_seconds: 0.0,
    };
    let labels = assign_labels(pixels, &model);
    model.objective = objective_of(pixels, &labels, k);
    model.fit_seconds = start.elapsed().as_secs_f64();
    Ok(model)
}

#[inline]
fn log_gauss(x: f64, c: &GaussianComponent) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_3;
    c.weight.ln() - 0.5 * (LN_2PI + c.variance.ln()) - (x - c.mean).powi(2) / (2.0 * c.variance)
}

/// Expectation-maximization for a 1D Gaussian mixture, initialized from
/// [`kmeans_fit`] with the same seed.
pub fn gmm_fit(pixels: &[f64], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterModel> {
    let start = Instant::now();
    let init = kmeans_fit(pixels, k, seed, max_iter, tol)?;
    let centroids = init.centroids().expect("kmeans returns centroids").to_vec();
    let n = pixels.len() as f64;

    let mut comps: Vec<GaussianComponent> = {
        let labels: Vec<u8> = pixels.iter().map(|&p| nearest_centroid(p, &centroids) as u8).collect();
        let mut cnt = vec![0.0; k];
        let mut ss = vec![0.0; k];
        for (&p, &l) in pixels.iter().zip(&labels) {
            cnt[l as usize] += 1.0;
            ss[l as usize] += (p - centroids[l as usize]).powi(2);
        }
        (0..k)
            .map(|j| GaussianComponent {
                weight: (cnt[j] / n).max(1.0 / n),
                mean: centroids[j],
                variance: if cnt[j] > 0.0 {
                    (ss[j] / cnt[j]).max(GMM_VARIANCE_FLOOR)
                } else {
                    GMM_VARIANCE_FLOOR
                },
            })
            .collect()
    };
    let wsum: f64 = comps.iter().map(|c| c.weight).sum();
    comps.iter_mut().for_each(|c| c.weight /= wsum);

    let mut history = Vec::new();
    let mut resp = vec![0.0; k];
    let mut iterations = 0;
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut mass = vec![0.0; k];
        let mut sum = vec![0.0; k];
        let mut sum_sq = vec![0.0; k];
        let mut ll = 0.0;
        for &x in pixels {
            let mut top = f64::NEG_INFINITY;
            for (r, c) in resp.iter_mut().zip(&comps) {
                *r = log_gauss(x, c);
                top = top.max(*r);
            }
            let mut z = 0.0;
            for r in resp.iter_mut() {
                *r = (*r - top).exp();
                z += *r;
            }
            ll += top + z.ln();
            for j in 0..k {
                let r = resp[j] / z;
                mass[j] += r;
                sum[j] += r * x;
                sum_sq[j] += r * x * x;
            }
        }
        let mean_ll = ll / n;
        history.push(mean_ll);
        for j in 0..k {
            if mass[j] < GMM_MIN_COMPONENT_MASS {
                return Err(Error::Clustering(format!(
                    "mixture component {j} collapsed (responsibility mass {:.3e}); try a smaller K than {k}",
                    mass[j]
                )));
            }
            let mean = sum[j] / mass[j];
            let var = (sum_sq[j] / mass[j] - mean * mean).max(GMM_VARIANCE_FLOOR);
            comps[j] = GaussianComponent {
                weight: mass[j] / n,
                mean,
                variance: var,
            };
        }
        if (mean_ll - prev_ll).abs() < tol {
            break;
        }
        prev_ll = mean_ll;
    }
    let wsum: f64 = comps.iter().map(|c| c.weight).sum();
    comps.iter_mut().for_each(|c| c.weight /= wsum);
    comps.sort_by(|a, b| a.mean.total_cmp(&b.mean));

    let mut model = ClusterModel {
        method: ClusterMethod::Gmm,
        k,
        params: ClusterParams::Mixture { components: comps },
        objective: 0.0,
        history,
        iterations,
        fit_seconds: 0.0,
    };
    let labels = assign_labels(pixels, &model);
    model.objective = objective_of(pixels, &labels, k);
    model.fit_seconds = start.elapsed().as_secs_f64();
    Ok(model)
}

/// Per-pixel class under a fitted model. Ties resolve to the lowest index.
pub fn assign_one(p: f64, model: &ClusterModel) -> u8 {
    match &model.params {
        ClusterParams::Centroids { centroids } => nearest_centroid(p, centroids) as u8,
        ClusterParams::Thresholds { thresholds } => thresholds.iter().filter(|&&t| p >= t).count() as u8,
        ClusterParams::Mixture { components } => {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, c) in components.iter().enumerate() {
                let v = log_gauss(p, c);
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best as u8
        }
    }
}

pub fn assign_labels(pixels: &[f64], model: &ClusterModel) -> Vec<u8> {
    pixels.iter().map(|&p| assign_one(p, model)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    pub method: ClusterMethod,
    pub k: usize,
    pub seed: u64,
    /// Voxels drawn (with replacement) to fit on; all voxels are assigned.
    pub subsample: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub num_bins: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            method: ClusterMethod::Kmeans,
            k: 3,
            seed: 0,
            subsample: 1_000_000,
            max_iter: 300,
            tol: 1e-7,
            num_bins: 256,
        }
    }
}

/// Fits on a subsample of the volume, then labels every voxel.
pub fn generate_pseudolabels(volume: &Volume, cfg: &PseudoLabelConfig) -> Result<(LabelVolume, ClusterModel)> {
    let (lo, hi) = volume.value_range();
    if lo < 0.0 || hi > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "pseudo labels expect a normalized volume, value range is [{lo}, {hi}]"
        )));
    }
    if cfg.k < 2 {
        return Err(Error::Clustering(format!("K must be at least 2, got {}", cfg.k)));
    }
    let data = volume.data();
    let sample: Vec<f64> = if data.len() <= cfg.subsample {
        data.iter().map(|&v| v as f64).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5a3b_1e00_0001);
        (0..cfg.subsample)
            .map(|_| data[rng.random_range(0..data.len())] as f64)
            .collect()
    };
    let start = Instant::now();
    let mut model = match cfg.method {
        ClusterMethod::Kmeans => kmeans_fit(&sample, cfg.k, cfg.seed, cfg.max_iter, cfg.tol)?,
        ClusterMethod::MultiOtsu => multi_otsu_fit(&sample, cfg.k, cfg.num_bins)?,
        ClusterMethod::Gmm => gmm_fit(&sample, cfg.k, cfg.seed, cfg.max_iter, cfg.tol)?,
    };
    model.fit_seconds = start.elapsed().as_secs_f64();
    let labels: Vec<u8> = data.iter().map(|&v| assign_one(v as f64, &model)).collect();
    let labels = LabelVolume::new(volume.shape(), labels, cfg.k, Provenance::Pseudo)?;
    Ok((labels, model))
}

#[derive(Debug, Clone, Serialize)]
pub struct PseudoLabelReport<'a> {
    pub method: ClusterMethod,
    pub k: usize,
    pub seed: u64,
    pub model: &'a ClusterModel,
    pub objective: f64,
    pub fit_seconds: f64,
}

impl<'a> PseudoLabelReport<'a> {
    pub fn new(cfg: &PseudoLabelConfig, model: &'a ClusterModel) -> Self {
        Self {
            method: model.method,
            k: model.k,
            seed: cfg.seed,
            model,
            objective: model.objective,
            fit_seconds: model.fit_seconds,
        }
    }
}

//! Non-iid federated datasets: the synthetic generator, IDX loading and the
//! two-digits-per-device partitioner, plus a flat binary cache.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub const NUM_CLASSES: usize = 10;
pub const SYNTHETIC_DIM: usize = 60;

/// Weight tolerance for `sum(p_k) == 1`.
pub const WEIGHT_TOL: f64 = 1e-12;

/// One device's private dataset: row-major features and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
    pub dim: usize,
}

impl LocalDataset {
    pub fn new(features: Vec<f64>, labels: Vec<u8>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("dataset must contain at least one sample".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "feature buffer has {} entries, expected {} x {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if labels.iter().any(|&y| y as usize >= NUM_CLASSES) {
            return Err(Error::Data("label out of range".into()));
        }
        Ok(LocalDataset {
            features,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// The full federation: per-device datasets, weights `p_k = n_k / n`, and a
/// held-out test set.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub locals: Vec<LocalDataset>,
    pub p: Vec<f64>,
    pub test: LocalDataset,
}

impl FederatedDataset {
    pub fn from_locals(locals: Vec<LocalDataset>, test: LocalDataset) -> Result<Self> {
        if locals.is_empty() {
            return Err(Error::Data("need at least one device".into()));
        }
        let dim = locals[0].dim;
        if locals.iter().any(|d| d.dim != dim) || test.dim != dim {
            return Err(Error::Data("inconsistent feature dimensions".into()));
        }
        let total: usize = locals.iter().map(|d| d.len()).sum();
        let p = locals
            .iter()
            .map(|d| d.len() as f64 / total as f64)
            .collect();
        Ok(FederatedDataset { locals, p, test })
    }

    pub fn n_devices(&self) -> usize {
        self.locals.len()
    }

    pub fn dim(&self) -> usize {
        self.locals[0].dim
    }

    pub fn total_samples(&self) -> usize {
        self.locals.iter().map(|d| d.len()).sum()
    }
}

/// Parameters of the synthetic non-iid generator.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n_devices: usize,
    /// Spread of per-device model means (variance of mu_k).
    pub alpha_tilde: f64,
    /// Spread of per-device feature means (variance of B_k).
    pub beta_tilde: f64,
    /// Calibration target for the total sample count.
    pub total_samples: usize,
    /// Fraction of each device's samples held out into the pooled test set.
    pub holdout: f64,
    /// Minimum samples per device.
    pub n_min: usize,
}

impl SyntheticConfig {
    pub fn new(n_devices: usize, alpha_tilde: f64, beta_tilde: f64) -> Self {
        SyntheticConfig {
            n_devices,
            alpha_tilde,
            beta_tilde,
            total_samples: 200 * n_devices,
            holdout: 0.2,
            n_min: 50,
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng, mean: f64, var: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + var.sqrt() * z
}

/// Heavy-tailed sample counts: `n_k = max(n_min, round(c * Z_k))` with
/// `Z_k ~ Pareto(shape 1.5)` and `c` calibrated so the counts sum near the
/// target.
fn power_law_counts(
    rng: &mut ChaCha8Rng,
    n: usize,
    target_total: usize,
    floor: usize,
) -> Vec<usize> {
    let pareto = Pareto::new(1.0, 1.5).expect("valid pareto");
    let z: Vec<f64> = (0..n).map(|_| pareto.sample(rng)).collect();
    let sum: f64 = z.iter().sum();
    let c = target_total as f64 / sum;
    z.iter()
        .map(|&zi| ((c * zi).round() as usize).max(floor))
        .collect()
}

/// Generate the synthetic federation.
///
/// Device `k` draws a private softmax model `W_k x + b_k` whose entries are
/// `N(mu_k, 1)` with `mu_k ~ N(0, alpha_tilde)`, and a private feature center
/// `v_{k,j} ~ N(B_k, 1)` with `B_k ~ N(0, beta_tilde)` fixed per feature.
/// Feature `j` of every sample is `N(v_{k,j}, j^-1.2)` and the label is the
/// argmax class of the private model.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<FederatedDataset> {
    if cfg.n_devices == 0 {
        return Err(Error::Config("n_devices must be at least 1".into()));
    }
    if cfg.alpha_tilde < 0.0 || cfg.beta_tilde < 0.0 {
        return Err(Error::Config("alpha_tilde and beta_tilde must be >= 0".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::Config("holdout must lie in [0, 1)".into()));
    }
    let mut rng = rng::split(seed, 0x5e7, 0);
    let counts = power_law_counts(&mut rng, cfg.n_devices, cfg.total_samples, cfg.n_min);

    let mut locals = Vec::with_capacity(cfg.n_devices);
    let mut test_features = Vec::new();
    let mut test_labels = Vec::new();
    for &n_k in &counts {
        let mu_k = gauss(&mut rng, 0.0, cfg.alpha_tilde);
        let w: Vec<f64> = (0..NUM_CLASSES * SYNTHETIC_DIM)
            .map(|_| gauss(&mut rng, mu_k, 1.0))
            .collect();
        let b: Vec<f64> = (0..NUM_CLASSES).map(|_| gauss(&mut rng, mu_k, 1.0)).collect();
        let b_k = gauss(&mut rng, 0.0, cfg.beta_tilde);
        let v: Vec<f64> = (0..SYNTHETIC_DIM).map(|_| gauss(&mut rng, b_k, 1.0)).collect();

        let mut features = Vec::with_capacity(n_k * SYNTHETIC_DIM);
        let mut labels = Vec::with_capacity(n_k);
        for _ in 0..n_k {
            let start = features.len();
            for (j, &vj) in v.iter().enumerate() {
                let var = ((j + 1) as f64).powf(-1.2);
                features.push(gauss(&mut rng, vj, var));
            }
            let x = &features[start..];
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for class in 0..NUM_CLASSES {
                let row = &w[class * SYNTHETIC_DIM..(class + 1) * SYNTHETIC_DIM];
                let score: f64 = row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b[class];
                if score > best_score {
                    best_score = score;
                    best = class;
                }
            }
            labels.push(best as u8);
        }

        // Hold out the trailing fraction into the pooled test set.
        let n_test = ((n_k as f64) * cfg.holdout).floor() as usize;
        let n_train = n_k - n_test;
        if n_train == 0 {
            return Err(Error::Config("holdout leaves a device empty".into()));
        }
        test_features.extend_from_slice(&features[n_train * SYNTHETIC_DIM..]);
        test_labels.extend_from_slice(&labels[n_train..]);
        features.truncate(n_train * SYNTHETIC_DIM);
        labels.truncate(n_train);
        locals.push(LocalDataset::new(features, labels, SYNTHETIC_DIM)?);
    }
    if test_labels.is_empty() {
        // Degenerate holdout settings: reuse the first device's data so the
        // struct invariant (non-empty test set) holds.
        let d = &locals[0];
        test_features = d.features.clone();
        test_labels = d.labels.clone();
    }
    let test = LocalDataset::new(test_features, test_labels, SYNTHETIC_DIM)?;
    FederatedDataset::from_locals(locals, test)
}

// ---------------------------------------------------------------------------
// IDX parsing

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(buf: &[u8], offset: usize) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(offset..offset + 4)
        .ok_or_else(|| Error::Data(format!("IDX file truncated at offset {offset}")))?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(bytes))
}

/// Parse an IDX image file into flattened `[0, 1]`-scaled rows.
pub fn load_idx_images(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let buf = std::fs::read(path)?;
    let magic = read_be_u32(&buf, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX image magic {magic:#010x} at offset 0 in {}",
            path.display()
        )));
    }
    let n = read_be_u32(&buf, 4)? as usize;
    let rows = read_be_u32(&buf, 8)? as usize;
    let cols = read_be_u32(&buf, 12)? as usize;
    let dim = rows * cols;
    let body = buf
        .get(16..16 + n * dim)
        .ok_or_else(|| Error::Data(format!("IDX image body truncated at offset 16 (need {} bytes)", n * dim)))?;
    let features = body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((features, n, dim))
}

/// Parse an IDX label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let buf = std::fs::read(path)?;
    let magic = read_be_u32(&buf, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX label magic {magic:#010x} at offset 0 in {}",
            path.display()
        )));
    }
    let n = read_be_u32(&buf, 4)? as usize;
    let body = buf
        .get(8..8 + n)
        .ok_or_else(|| Error::Data("IDX label body truncated at offset 8".into()))?;
    Ok(body.to_vec())
}

/// Load an image/label IDX pair, checking the counts agree.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<(Vec<f64>, Vec<u8>, usize)> {
    let (features, n, dim) = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    if y.len() != n {
        return Err(Error::Data(format!(
            "image count {n} does not match label count {}",
            y.len()
        )));
    }
    Ok((features, y, dim))
}

// ---------------------------------------------------------------------------
// Non-iid partition

/// Partition labeled data into `n_devices` local datasets, two label-sorted
/// shards per device, with power-law shard sizes.
pub fn partition_noniid(
    features: &[f64],
    labels: &[u8],
    dim: usize,
    n_devices: usize,
    shard_floor: usize,
    seed: u64,
) -> Result<Vec<LocalDataset>> {
    let total = labels.len();
    if features.len() != total * dim {
        return Err(Error::Data("feature/label size mismatch".into()));
    }
    let n_shards = 2 * n_devices;
    if total < n_shards * shard_floor.max(1) {
        return Err(Error::Data(format!(
            "{total} samples cannot fill {n_shards} shards of at least {shard_floor}"
        )));
    }

    let mut rng = rng::split(seed, 0x9a7, 0);

    // Label-sorted order (stable, so ties keep file order).
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by_key(|&i| labels[i]);

    // Contiguous runs of equal labels in the sorted order.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut run_start = 0;
    for j in 1..=total {
        if j == total || labels[order[j]] != labels[order[run_start]] {
            runs.push((run_start, j));
            run_start = j;
        }
    }

    let floor = shard_floor.max(1);
    let mut shard_bounds: Vec<(usize, usize)> = Vec::with_capacity(n_shards);
    if n_shards >= runs.len() {
        // Cut each label run into its own shards so every shard is
        // label-pure and each device ends up with at most two labels.
        // Shards per run: start at one each, then grow the run with the
        // largest remaining per-shard count.
        let mut per_run = vec![1usize; runs.len()];
        let mut left = n_shards - runs.len();
        while left > 0 {
            let i = (0..runs.len())
                .filter(|&i| per_run[i] < runs[i].1 - runs[i].0)
                .max_by(|&i, &j| {
                    let a = (runs[i].1 - runs[i].0) as f64 / per_run[i] as f64;
                    let b = (runs[j].1 - runs[j].0) as f64 / per_run[j] as f64;
                    a.partial_cmp(&b).unwrap()
                })
                .ok_or_else(|| Error::Data("fewer samples than shards".into()))?;
            per_run[i] += 1;
            left -= 1;
        }
        for (&(lo, hi), &shards_here) in runs.iter().zip(&per_run) {
            let count = hi - lo;
            let run_floor = floor.min(count / shards_here).max(1);
            let mut sizes = power_law_counts(&mut rng, shards_here, count, run_floor);
            balance_to_total(&mut sizes, count, run_floor);
            let mut start = lo;
            for &s in &sizes {
                shard_bounds.push((start, start + s));
                start += s;
            }
            debug_assert_eq!(start, hi);
        }
    } else {
        // Too few shards to keep them label-pure; fall back to plain cuts of
        // the sorted sequence.
        let mut sizes = power_law_counts(&mut rng, n_shards, total, floor);
        balance_to_total(&mut sizes, total, floor);
        let mut start = 0usize;
        for &s in &sizes {
            shard_bounds.push((start, start + s));
            start += s;
        }
        debug_assert_eq!(start, total);
    }

    // Random shard-to-device assignment without replacement.
    let mut shard_ids: Vec<usize> = (0..n_shards).collect();
    shard_ids.shuffle(&mut rng);

    let mut locals = Vec::with_capacity(n_devices);
    for device in 0..n_devices {
        let mut f = Vec::new();
        let mut y = Vec::new();
        for &shard in &shard_ids[2 * device..2 * device + 2] {
            let (lo, hi) = shard_bounds[shard];
            for &i in &order[lo..hi] {
                f.extend_from_slice(&features[i * dim..(i + 1) * dim]);
                y.push(labels[i]);
            }
        }
        locals.push(LocalDataset::new(f, y, dim)?);
    }
    Ok(locals)
}

/// Nudge sizes so they sum exactly to `total` while respecting the floor.
fn balance_to_total(sizes: &mut [usize], total: usize, floor: usize) {
    let mut sum: usize = sizes.iter().sum();
    while sum != total {
        if sum < total {
            // Grow the smallest shard.
            let i = (0..sizes.len()).min_by_key(|&i| sizes[i]).unwrap();
            sizes[i] += 1;
            sum += 1;
        } else {
            // Shrink the largest shard that can still give.
            let i = (0..sizes.len())
                .filter(|&i| sizes[i] > floor)
                .max_by_key(|&i| sizes[i])
                .expect("floor * shards <= total");
            sizes[i] -= 1;
            sum -= 1;
        }
    }
}

// ---------------------------------------------------------------------------
// FEDC1 cache

const CACHE_MAGIC: &[u8; 5] = b"FEDC1";

/// Serialize a federation to the flat binary cache layout: the `FEDC1` magic,
/// little-endian u32 counts (devices, dim, test size, then per-device sizes),
/// then per-device bodies as little-endian f32 row-major features followed by
/// label bytes, then the test body in the same form.
pub fn save_cache(path: &Path, fed: &FederatedDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(fed.n_devices() as u32).to_le_bytes())?;
    w.write_all(&(fed.dim() as u32).to_le_bytes())?;
    w.write_all(&(fed.test.len() as u32).to_le_bytes())?;
    for d in &fed.locals {
        w.write_all(&(d.len() as u32).to_le_bytes())?;
    }
    for d in fed.locals.iter().chain(std::iter::once(&fed.test)) {
        for &x in &d.features {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        w.write_all(&d.labels)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a federation from the `FEDC1` cache layout.
pub fn load_cache(path: &Path) -> Result<FederatedDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Data("bad cache magic, expected FEDC1".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut next_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let n_devices = next_u32(&mut r)? as usize;
    let dim = next_u32(&mut r)? as usize;
    let n_test = next_u32(&mut r)? as usize;
    let counts: Vec<usize> = (0..n_devices)
        .map(|_| next_u32(&mut r).map(|v| v as usize))
        .collect::<Result<_>>()?;

    let read_body = |r: &mut BufReader<File>, n: usize| -> Result<LocalDataset> {
        let mut features = Vec::with_capacity(n * dim);
        let mut fbuf = [0u8; 4];
        for _ in 0..n * dim {
            r.read_exact(&mut fbuf)?;
            features.push(f32::from_le_bytes(fbuf) as f64);
        }
        let mut labels = vec![0u8; n];
        r.read_exact(&mut labels)?;
        LocalDataset::new(features, labels, dim)
    };
    let locals = counts
        .iter()
        .map(|&n| read_body(&mut r, n))
        .collect::<Result<Vec<_>>>()?;
    let test = read_body(&mut r, n_test)?;
    FederatedDataset::from_locals(locals, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn weights_sum_to_one() {
        let cfg = SyntheticConfig::new(20, 1.0, 1.0);
        let fed = generate_synthetic(&cfg, 3).unwrap();
        let sum: f64 = fed.p.iter().sum();
        assert!((sum - 1.0).abs() < WEIGHT_TOL);
        assert!(fed.p.iter().all(|&p| p > 0.0));
        assert_eq!(fed.n_devices(), 20);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig::new(5, 1.0, 1.0);
        let a = generate_synthetic(&cfg, 11).unwrap();
        let b = generate_synthetic(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg, 12).unwrap();
        assert_ne!(a, c);
    }

    /// Mean chi-square distance between per-device label histograms and the
    /// pooled histogram.
    fn label_heterogeneity(fed: &FederatedDataset) -> f64 {
        let mut global = [0f64; NUM_CLASSES];
        for d in &fed.locals {
            for &y in &d.labels {
                global[y as usize] += 1.0;
            }
        }
        let total: f64 = global.iter().sum();
        for g in &mut global {
            *g /= total;
        }
        let mut acc = 0.0;
        for d in &fed.locals {
            let mut hist = [0f64; NUM_CLASSES];
            for &y in &d.labels {
                hist[y as usize] += 1.0;
            }
            let n = d.len() as f64;
            for (h, g) in hist.iter().zip(&global) {
                if *g > 0.0 {
                    let diff = h / n - g;
                    acc += diff * diff / g;
                }
            }
        }
        acc / fed.n_devices() as f64
    }

    #[test]
    fn heterogeneity_grows_with_alpha_beta() {
        let hetero = generate_synthetic(&SyntheticConfig::new(50, 1.0, 1.0), 21).unwrap();
        let iid = generate_synthetic(&SyntheticConfig::new(50, 0.0, 0.0), 21).unwrap();
        assert!(
            label_heterogeneity(&hetero) > label_heterogeneity(&iid),
            "hetero {} vs iid {}",
            label_heterogeneity(&hetero),
            label_heterogeneity(&iid)
        );
    }

    /// Two-sample Kolmogorov-Smirnov statistic.
    fn ks_stat(a: &mut Vec<f64>, b: &mut Vec<f64>) -> f64 {
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (n, m) = (a.len(), b.len());
        let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
        while i < n && j < m {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
        }
        d
    }

    #[test]
    fn zero_spread_gives_identical_model_distributions() {
        let fed_cfg = SyntheticConfig::new(2, 0.0, 0.0);
        // Regenerate the per-device model entries the same way the generator
        // does, and KS-test entries across two devices. With alpha_tilde = 0
        // both devices draw W, b from N(0, 1), so the test must not reject
        // at the 0.1% level.
        let mut rng = rng::split(77, 0x5e7, 0);
        let _counts = power_law_counts(&mut rng, 2, 400, 50);
        let mut draws: Vec<Vec<f64>> = Vec::new();
        for _ in 0..2 {
            let mu = gauss(&mut rng, 0.0, 0.0);
            assert_eq!(mu, 0.0);
            let w: Vec<f64> = (0..NUM_CLASSES * SYNTHETIC_DIM)
                .map(|_| gauss(&mut rng, mu, 1.0))
                .collect();
            draws.push(w);
        }
        let _ = fed_cfg;
        let mut a = draws.remove(0);
        let mut b = draws.remove(0);
        let (n, m) = (a.len() as f64, b.len() as f64);
        let d = ks_stat(&mut a, &mut b);
        // alpha = 0.001 => c(alpha) = sqrt(-ln(alpha/2)/2) ~ 1.9495
        let threshold = 1.9495 * ((n + m) / (n * m)).sqrt();
        assert!(d < threshold, "KS {d} >= {threshold}");
    }

    #[test]
    fn feature_variance_follows_power_law() {
        let mut cfg = SyntheticConfig::new(3, 1.0, 1.0);
        cfg.total_samples = 3000;
        cfg.n_min = 400;
        cfg.holdout = 0.0;
        let fed = generate_synthetic(&cfg, 5).unwrap();
        let d = &fed.locals[0];
        assert!(d.len() >= 200);
        for j in [0usize, 4, 19] {
            let mean: f64 = (0..d.len()).map(|i| d.row(i)[j]).sum::<f64>() / d.len() as f64;
            let var: f64 = (0..d.len())
                .map(|i| (d.row(i)[j] - mean).powi(2))
                .sum::<f64>()
                / (d.len() - 1) as f64;
            let expected = ((j + 1) as f64).powf(-1.2);
            assert!(
                (var - expected).abs() / expected < 0.2,
                "feature {j}: var {var} vs expected {expected}"
            );
        }
    }

    fn idx_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        // Hand-built 2-image 2x2 IDX pair with known pixels.
        let images = dir.join("imgs.idx");
        let labels = dir.join("lbls.idx");
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 255, 255, 204, 153, 0]);
        std::fs::write(&images, img).unwrap();
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7, 3]);
        std::fs::write(&labels, lbl).unwrap();
        (images, labels)
    }

    #[test]
    fn idx_fixture_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_fixture(dir.path());
        let (features, y, dim) = load_mnist(&images, &labels).unwrap();
        assert_eq!(dim, 4);
        assert_eq!(y, vec![7, 3]);
        let expected = [
            0.0,
            51.0 / 255.0,
            102.0 / 255.0,
            1.0,
            1.0,
            204.0 / 255.0,
            153.0 / 255.0,
            0.0,
        ];
        for (got, want) in features.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn idx_errors_identify_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.idx");
        std::fs::write(&empty, []).unwrap();
        let err = load_idx_images(&empty).unwrap_err().to_string();
        assert!(err.contains("offset 0"), "{err}");

        let truncated = dir.path().join("trunc.idx");
        let mut buf = Vec::new();
        buf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        buf.extend_from_slice(&5u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&truncated, buf).unwrap();
        let err = load_idx_images(&truncated).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn idx_count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = idx_fixture(dir.path());
        let labels = dir.path().join("one.idx");
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&1u32.to_be_bytes());
        lbl.push(1);
        std::fs::write(&labels, lbl).unwrap();
        assert!(load_mnist(&images, &labels).is_err());
    }

    fn toy_labeled_data(total: usize) -> (Vec<f64>, Vec<u8>) {
        let labels: Vec<u8> = (0..total).map(|i| (i % NUM_CLASSES) as u8).collect();
        let features: Vec<f64> = (0..total * 2).map(|i| i as f64).collect();
        (features, labels)
    }

    #[test]
    fn partition_two_labels_per_device() {
        let (features, labels) = toy_labeled_data(2000);
        let locals = partition_noniid(&features, &labels, 2, 10, 20, 9).unwrap();
        assert_eq!(locals.len(), 10);
        let total: usize = locals.iter().map(|d| d.len()).sum();
        assert_eq!(total, 2000);
        let mut union = HashSet::new();
        let mut sizes = HashSet::new();
        for d in &locals {
            let distinct: HashSet<u8> = d.labels.iter().copied().collect();
            assert!(distinct.len() <= 2, "device holds {} labels", distinct.len());
            union.extend(distinct);
            sizes.insert(d.len());
        }
        assert_eq!(union.len(), NUM_CLASSES);
        assert!(sizes.len() > 1, "shard sizes should be non-constant");
    }

    #[test]
    fn partition_single_device_takes_everything() {
        let (features, labels) = toy_labeled_data(300);
        let locals = partition_noniid(&features, &labels, 2, 1, 10, 1).unwrap();
        assert_eq!(locals.len(), 1);
        assert_eq!(locals[0].len(), 300);
    }

    #[test]
    fn partition_rejects_insufficient_samples() {
        let (features, labels) = toy_labeled_data(100);
        assert!(partition_noniid(&features, &labels, 2, 10, 100, 1).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let cfg = SyntheticConfig::new(4, 1.0, 1.0);
        let fed = generate_synthetic(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.fedc");
        save_cache(&path, &fed).unwrap();
        let loaded = load_cache(&path).unwrap();
        assert_eq!(loaded.n_devices(), fed.n_devices());
        assert_eq!(loaded.test.labels, fed.test.labels);
        // Features pass through f32, so compare at f32 precision.
        for (a, b) in loaded.locals.iter().zip(&fed.locals) {
            assert_eq!(a.labels, b.labels);
            for (x, y) in a.features.iter().zip(&b.features) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

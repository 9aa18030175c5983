//! Per-domain channel statistics and inter-domain covariance noise.
//!
//! Each source domain keeps a ring buffer of spatially pooled bottleneck
//! vectors. For a pair of domains the bank estimates the cross-covariance
//! `E[(u - ū)(v - v̄)ᵀ]` over randomly paired buffer entries, projects it onto
//! the PSD cone and samples `ξ ~ N(0, Σ)` from its Cholesky factor.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use sdfa_autograd::Scalar;
use serde::{Deserialize, Serialize};

use crate::augment::FeatureMap;
use crate::error::{Result, SdfaError};

/// Eigenvalue floor applied by [`psd_project`].
pub const EIG_FLOOR: f64 = 1e-6;

/// Spatial mean of every channel.
pub fn pool_features<T: Scalar>(z: &FeatureMap<T>) -> Vec<f64> {
    let hw = z.height() * z.width();
    z.values()
        .chunks(hw)
        .map(|plane| plane.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / hw as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStats {
    domain_id: usize,
    channels: usize,
    capacity: usize,
    buffer: VecDeque<Vec<f64>>,
    running_mean: Vec<f64>,
    count: u64,
}

impl DomainStats {
    pub fn new(domain_id: usize, channels: usize, capacity: usize) -> Self {
        assert!(capacity > 0, "ring buffer capacity must be positive");
        Self {
            domain_id,
            channels,
            capacity,
            buffer: VecDeque::with_capacity(capacity),
            running_mean: vec![0.0; channels],
            count: 0,
        }
    }

    pub fn domain_id(&self) -> usize {
        self.domain_id
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Total number of vectors ever observed.
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn buffer(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.buffer.iter().map(Vec::as_slice)
    }

    /// Appends pooled vectors, evicting the oldest beyond capacity. The mean is
    /// recomputed from the buffer so it never drifts.
    pub fn update(&mut self, pooled: &[Vec<f64>]) -> Result<()> {
        if let Some(bad) = pooled.iter().find(|v| v.len() != self.channels) {
            return Err(SdfaError::Shape(format!(
                "domain {}: pooled vector of length {}, expected {}",
                self.domain_id,
                bad.len(),
                self.channels
            )));
        }
        for v in pooled {
            if self.buffer.len() == self.capacity {
                self.buffer.pop_front();
            }
            self.buffer.push_back(v.clone());
            self.count += 1;
        }
        let n = self.buffer.len().max(1) as f64;
        self.running_mean = vec![0.0; self.channels];
        for v in &self.buffer {
            for (m, x) in self.running_mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut self.running_mean {
            *m /= n;
        }
        Ok(())
    }
}

/// Cross-covariance of paired entries, centered at each buffer's mean.
pub fn cross_covariance(a: &DomainStats, b: &DomainStats, pairing: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    if a.channels != b.channels {
        return Err(SdfaError::Shape(format!(
            "domains {} and {} have {} vs {} channels",
            a.domain_id, b.domain_id, a.channels, b.channels
        )));
    }
    if pairing.is_empty() {
        return Err(SdfaError::InsufficientStats("empty pairing".into()));
    }
    let c = a.channels;
    let ma = DVector::from_column_slice(&a.running_mean);
    let mb = DVector::from_column_slice(&b.running_mean);
    let mut acc = DMatrix::<f64>::zeros(c, c);
    for &(i, j) in pairing {
        let u = DVector::from_column_slice(&a.buffer[i]) - &ma;
        let v = DVector::from_column_slice(&b.buffer[j]) - &mb;
        acc.ger(1.0, &u, &v, 1.0);
    }
    Ok(acc / pairing.len() as f64)
}

/// Random one-to-one pairing of `min(n_a, n_b)` entries drawn without
/// replacement from each buffer.
pub fn random_pairing<R: Rng>(n_a: usize, n_b: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let m = n_a.min(n_b);
    let ia = sample(rng, n_a, m);
    let ib = sample(rng, n_b, m);
    ia.iter().zip(ib.iter()).collect()
}

/// Raw inter-domain covariance between two domains' buffers.
pub fn pair_covariance<R: Rng>(a: &DomainStats, b: &DomainStats, rng: &mut R) -> Result<DMatrix<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(SdfaError::InsufficientStats(format!(
            "domain {} has {} and domain {} has {} buffered vectors",
            a.domain_id,
            a.len(),
            b.domain_id,
            b.len()
        )));
    }
    let pairing = random_pairing(a.len(), b.len(), rng);
    cross_covariance(a, b, &pairing)
}

/// Symmetrizes, clamps eigenvalues at [`EIG_FLOOR`] and factors the result.
/// Returns `(sigma_psd, chol)` with `chol` lower triangular.
pub fn psd_project(raw: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !raw.is_square() {
        return Err(SdfaError::Shape(format!(
            "covariance is {}x{}",
            raw.nrows(),
            raw.ncols()
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(SdfaError::NonFinite("covariance input".into()));
    }
    let sym = (raw + raw.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.map(|l| l.max(EIG_FLOOR));
    let v = &eig.eigenvectors;
    let mut psd = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    // exact symmetry; the reconstruction is symmetric only up to rounding
    psd = (&psd + psd.transpose()) * 0.5;
    let chol = match psd.clone().cholesky() {
        Some(ch) => ch.l(),
        None => {
            let n = psd.nrows();
            let jittered = &psd + DMatrix::<f64>::identity(n, n) * EIG_FLOOR;
            jittered
                .cholesky()
                .ok_or_else(|| SdfaError::NonFinite("cholesky of projected covariance".into()))?
                .l()
        }
    };
    Ok((psd, chol))
}

/// `ξ = L u` with `u` standard normal.
pub fn draw_noise<R: Rng>(chol: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let n = chol.nrows();
    let u = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (chol * u).iter().copied().collect()
}

/// Standard normal vector, the fallback before statistics exist.
pub fn standard_noise<R: Rng>(channels: usize, rng: &mut R) -> Vec<f64> {
    (0..channels).map(|_| rng.sample(StandardNormal)).collect()
}

/// Pairs `current` with another domain drawn uniformly from `available`.
pub fn pick_domain_pair<R: Rng>(current: usize, available: &[usize], rng: &mut R) -> Result<(usize, usize)> {
    let others: Vec<usize> = available.iter().copied().filter(|&d| d != current).collect();
    if available.len() < 2 || others.is_empty() {
        return Err(SdfaError::InsufficientStats(format!(
            "need at least two domains with statistics, have {available:?}"
        )));
    }
    Ok((current, others[rng.gen_range(0..others.len())]))
}

#[derive(Clone, Debug)]
pub struct PairCovariance {
    pub sigma_raw: DMatrix<f64>,
    pub sigma_psd: DMatrix<f64>,
    pub chol: DMatrix<f64>,
}

impl PairCovariance {
    pub fn from_raw(sigma_raw: DMatrix<f64>) -> Result<Self> {
        let (sigma_psd, chol) = psd_project(&sigma_raw)?;
        Ok(Self {
            sigma_raw,
            sigma_psd,
            chol,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    /// Ring buffer capacity per domain.
    pub capacity: usize,
    /// Steps between covariance recomputations.
    pub refresh_every: u64,
    /// Buffered vectors every domain needs before covariance noise is used.
    pub min_warm: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            capacity: 256,
            refresh_every: 50,
            min_warm: 8,
        }
    }
}

/// Where a noise draw came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseSource {
    Pair(usize, usize),
    StandardNormal,
}

/// Statistics for all source domains plus the cached pair covariances.
#[derive(Clone, Debug)]
pub struct CovarianceBank {
    cfg: BankConfig,
    channels: usize,
    stats: BTreeMap<usize, DomainStats>,
    cache: BTreeMap<(usize, usize), PairCovariance>,
    last_refresh: Option<u64>,
}

impl CovarianceBank {
    pub fn new(channels: usize, domains: &[usize], cfg: BankConfig) -> Self {
        let stats = domains
            .iter()
            .map(|&d| (d, DomainStats::new(d, channels, cfg.capacity)))
            .collect();
        Self {
            cfg,
            channels,
            stats,
            cache: BTreeMap::new(),
            last_refresh: None,
        }
    }

    pub fn config(&self) -> &BankConfig {
        &self.cfg
    }

    pub fn domains(&self) -> Vec<usize> {
        self.stats.keys().copied().collect()
    }

    pub fn stats(&self, domain: usize) -> Option<&DomainStats> {
        self.stats.get(&domain)
    }

    pub fn observe(&mut self, domain: usize, pooled: &[Vec<f64>]) -> Result<()> {
        let channels = self.channels;
        let capacity = self.cfg.capacity;
        self.stats
            .entry(domain)
            .or_insert_with(|| DomainStats::new(domain, channels, capacity))
            .update(pooled)
    }

    /// Every registered domain holds at least `min_warm` vectors.
    pub fn is_warm(&self) -> bool {
        self.stats.len() >= 2 && self.stats.values().all(|s| s.len() >= self.cfg.min_warm)
    }

    pub fn cached(&self, a: usize, b: usize) -> Option<&PairCovariance> {
        self.cache.get(&(a.min(b), a.max(b)))
    }

    /// Recomputes every pair covariance when the bank is warm and the cache is
    /// empty or `refresh_every` steps old. Returns whether a refresh happened.
    pub fn maybe_refresh<R: Rng>(&mut self, step: u64, rng: &mut R) -> Result<bool> {
        if !self.is_warm() {
            return Ok(false);
        }
        let due = match self.last_refresh {
            None => true,
            Some(last) => step >= last + self.cfg.refresh_every,
        };
        if !due {
            return Ok(false);
        }
        let ids = self.domains();
        let mut cache = BTreeMap::new();
        for (k, &a) in ids.iter().enumerate() {
            for &b in &ids[k + 1..] {
                let raw = pair_covariance(&self.stats[&a], &self.stats[&b], rng)?;
                cache.insert((a, b), PairCovariance::from_raw(raw)?);
            }
        }
        self.cache = cache;
        self.last_refresh = Some(step);
        Ok(true)
    }

    /// Noise for a sample of `domain`: covariance-shaped once warm, standard
    /// normal before.
    pub fn sample_noise<R: Rng>(&self, domain: usize, rng: &mut R) -> Result<(Vec<f64>, NoiseSource)> {
        if self.cache.is_empty() {
            return Ok((standard_noise(self.channels, rng), NoiseSource::StandardNormal));
        }
        let (a, b) = pick_domain_pair(domain, &self.domains(), rng)?;
        let cov = self
            .cached(a, b)
            .ok_or_else(|| SdfaError::InsufficientStats(format!("no covariance for pair ({a}, {b})")))?;
        Ok((draw_noise(&cov.chol, rng), NoiseSource::Pair(a, b)))
    }
}

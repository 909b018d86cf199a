//! Synthetic multi-environment CSI.
//!
//! Each environment is a geometric cluster model seen from an 8x8 uniform
//! planar array: a user is dropped at a random direction inside the
//! environment's sector, and its channel is a Rician mix of the line-of-sight
//! steering vector and a handful of scattered paths around fixed per-site
//! cluster directions. Channels are stored normalized to unit per-antenna
//! gain; the site's large-scale path loss is applied when multi-user CSI is
//! assembled.

mod format;

pub use format::{read_dataset, write_dataset, CSIF_MAGIC, CSIF_VERSION};

use num_complex::Complex32;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phy::{CMatrix, ChannelMatrix, SystemConfig, C64};

/// Stream reserved for the site geometry; samples use their index as stream.
const GEOMETRY_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub env_id: String,
    pub los: bool,
    pub n_clusters: usize,
    /// Angular jitter of a scattered path around its cluster centre (rad).
    pub angle_spread: f64,
    pub mean_azimuth: f64,
    pub mean_elevation: f64,
    /// Width of the azimuth sector users are dropped in (rad). Elevation
    /// varies over a quarter of it.
    pub sector_width: f64,
    /// LOS-to-scattered power ratio; 0 for NLOS.
    pub rician_k: f64,
    /// Spread of the per-cluster power in dB.
    pub gain_db_spread: f64,
    /// Large-scale attenuation applied to every user of this site (dB).
    pub path_loss_db: f64,
    pub seed: u64,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self {
            env_id: "site".into(),
            los: true,
            n_clusters: 4,
            angle_spread: 0.1,
            mean_azimuth: 0.0,
            mean_elevation: 0.5,
            sector_width: 1.0,
            rician_k: 5.0,
            gain_db_spread: 4.0,
            path_loss_db: 0.0,
            seed: 0,
        }
    }
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::invalid(format!(
                "{}: n_clusters must be >= 1",
                self.env_id
            )));
        }
        if !(self.angle_spread > 0.0) {
            return Err(Error::invalid(format!(
                "{}: angle_spread must be > 0",
                self.env_id
            )));
        }
        if !(self.rician_k >= 0.0) {
            return Err(Error::invalid(format!(
                "{}: rician_k must be >= 0",
                self.env_id
            )));
        }
        if !(self.sector_width >= 0.0) || !(self.gain_db_spread >= 0.0) {
            return Err(Error::invalid(format!(
                "{}: spreads must be >= 0",
                self.env_id
            )));
        }
        if self.env_id.len() > u16::MAX as usize {
            return Err(Error::invalid("env_id too long"));
        }
        Ok(())
    }

    /// Amplitude factor of the large-scale path loss.
    pub fn path_amplitude(&self) -> f64 {
        10f64.powf(-self.path_loss_db / 20.0)
    }
}

/// Unit per-antenna-gain single-user channels of one environment split.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentDataset {
    pub spec: EnvironmentSpec,
    pub n_tx: usize,
    pub channels: Vec<Vec<Complex32>>,
}

impl EnvironmentDataset {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Replaces the generation parameters, e.g. after reading a file that only
    /// records the id and LOS flag.
    pub fn with_spec(mut self, spec: EnvironmentSpec) -> Self {
        self.spec = spec;
        self
    }

    /// Dataset restricted to the given sample indices.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            spec: self.spec.clone(),
            n_tx: self.n_tx,
            channels: indices.iter().map(|&i| self.channels[i].clone()).collect(),
        }
    }

    /// Splits off the last `round(n * holdout_fraction)` samples.
    pub fn split(&self, holdout_fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&holdout_fraction) {
            return Err(Error::invalid(format!(
                "holdout fraction {holdout_fraction} outside [0, 1]"
            )));
        }
        let n_hold = (self.len() as f64 * holdout_fraction).round() as usize;
        let cut = self.len() - n_hold;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head), self.subset(&tail)))
    }

    /// Mean of `|h_i|^2` over every antenna of every stored channel.
    pub fn mean_antenna_gain(&self) -> f64 {
        if self.channels.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .channels
            .iter()
            .flat_map(|h| h.iter())
            .map(|z| (z.norm_sqr()) as f64)
            .sum();
        total / (self.channels.len() * self.n_tx) as f64
    }
}

/// Planar array layout: the most nearly square `rows x cols` factorization
/// of `n_tx` (`rows <= cols`); a prime count degenerates to a linear array.
pub fn array_shape(n_tx: usize) -> Result<(usize, usize)> {
    if n_tx == 0 {
        return Err(Error::invalid("antenna count must be positive"));
    }
    let mut rows = (n_tx as f64).sqrt().floor() as usize;
    while !n_tx.is_multiple_of(rows) {
        rows -= 1;
    }
    Ok((rows, n_tx / rows))
}

/// Half-wavelength UPA response towards (azimuth, elevation); elevation is
/// measured from the array broadside.
pub fn steering_vector(azimuth: f64, elevation: f64, cfg: &SystemConfig) -> Result<Vec<C64>> {
    let (rows, cols) = array_shape(cfg.n_tx)?;
    let (sin_el, _) = elevation.sin_cos();
    let du = std::f64::consts::PI * sin_el * azimuth.cos();
    let dv = std::f64::consts::PI * sin_el * azimuth.sin();
    let mut out = Vec::with_capacity(cfg.n_tx);
    for m in 0..rows {
        for n in 0..cols {
            out.push(C64::from_polar(1.0, m as f64 * du + n as f64 * dv));
        }
    }
    Ok(out)
}

/// Per-site scatterer layout, fixed by the environment seed.
#[derive(Debug, Clone)]
struct SiteGeometry {
    cluster_dirs: Vec<(f64, f64)>,
    cluster_amps: Vec<f64>,
}

impl SiteGeometry {
    fn new(spec: &EnvironmentSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(GEOMETRY_STREAM);
        let half = 0.5 * spec.sector_width.max(spec.angle_spread);
        let cluster_dirs = (0..spec.n_clusters)
            .map(|_| {
                let az = spec.mean_azimuth + rng.gen_range(-half..=half);
                let el = spec.mean_elevation + rng.gen_range(-0.5 * half..=0.5 * half);
                (az, el)
            })
            .collect();
        let db = Normal::new(0.0, spec.gain_db_spread).expect("validated spread");
        let powers: Vec<f64> = (0..spec.n_clusters)
            .map(|_| 10f64.powf(db.sample(&mut rng) / 10.0))
            .collect();
        let total: f64 = powers.iter().sum();
        let cluster_amps = powers.iter().map(|p| (p / total).sqrt()).collect();
        Self {
            cluster_dirs,
            cluster_amps,
        }
    }
}

fn draw_channel<R: Rng>(
    spec: &EnvironmentSpec,
    geometry: &SiteGeometry,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<Vec<C64>> {
    let half = 0.5 * spec.sector_width;
    let ue_az = spec.mean_azimuth
        + if half > 0.0 {
            rng.gen_range(-half..=half)
        } else {
            0.0
        };
    let ue_el = spec.mean_elevation
        + if half > 0.0 {
            rng.gen_range(-0.5 * half..=0.5 * half)
        } else {
            0.0
        };

    let los_weight = (spec.rician_k / (spec.rician_k + 1.0)).sqrt();
    let nlos_weight = (1.0 / (spec.rician_k + 1.0)).sqrt();

    let mut h = vec![C64::new(0.0, 0.0); cfg.n_tx];
    let los_phase = C64::from_polar(los_weight, rng.gen::<f64>() * std::f64::consts::TAU);
    for (acc, a) in h.iter_mut().zip(steering_vector(ue_az, ue_el, cfg)?) {
        *acc += los_phase * a;
    }
    for (&(az, el), &amp) in geometry.cluster_dirs.iter().zip(&geometry.cluster_amps) {
        let jitter_az: f64 = StandardNormal.sample(rng);
        let jitter_el: f64 = StandardNormal.sample(rng);
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        let gain = C64::new(re, im) * (nlos_weight * amp * std::f64::consts::FRAC_1_SQRT_2);
        let a = steering_vector(
            az + spec.angle_spread * jitter_az,
            el + spec.angle_spread * jitter_el,
            cfg,
        )?;
        for (acc, ai) in h.iter_mut().zip(a) {
            *acc += gain * ai;
        }
    }

    let norm2: f64 = h.iter().map(|z| z.norm_sqr()).sum();
    if !(norm2 > 0.0) {
        return Err(Error::Numerical("generated an all-zero channel".into()));
    }
    let scale = (cfg.n_tx as f64 / norm2).sqrt();
    Ok(h.into_iter().map(|z| z * scale).collect())
}

/// One user channel, normalized to unit per-antenna gain.
pub fn sample_channel<R: Rng>(
    spec: &EnvironmentSpec,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<Vec<C64>> {
    spec.validate()?;
    draw_channel(spec, &SiteGeometry::new(spec), cfg, rng)
}

/// Generates `n` channels. Sample `i` uses its own RNG stream derived from
/// `(spec.seed, i)`, so the output does not depend on evaluation order.
pub fn generate_dataset(
    spec: &EnvironmentSpec,
    cfg: &SystemConfig,
    n: usize,
) -> Result<EnvironmentDataset> {
    spec.validate()?;
    array_shape(cfg.n_tx)?;
    let geometry = SiteGeometry::new(spec);
    let channels = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let h = draw_channel(spec, &geometry, cfg, &mut rng)?;
            Ok(h.into_iter()
                .map(|z| Complex32::new(z.re as f32, z.im as f32))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnvironmentDataset {
        spec: spec.clone(),
        n_tx: cfg.n_tx,
        channels,
    })
}

/// Draws `N_U` distinct users and stacks their channels, scaled by the
/// site's path loss. A pool of exactly `N_U` channels is used in stored order.
pub fn build_multiuser_csi<R: Rng>(
    dataset: &EnvironmentDataset,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<ChannelMatrix> {
    if dataset.n_tx != cfg.n_tx {
        return Err(Error::DimensionMismatch {
            context: "dataset antennas",
            expected: cfg.n_tx,
            got: dataset.n_tx,
        });
    }
    if dataset.len() < cfg.n_users {
        return Err(Error::InsufficientSamples {
            need: cfg.n_users,
            have: dataset.len(),
        });
    }
    let picks: Vec<usize> = if dataset.len() == cfg.n_users {
        (0..cfg.n_users).collect()
    } else {
        index::sample(rng, dataset.len(), cfg.n_users).into_vec()
    };
    let amp = dataset.spec.path_amplitude();
    let h = CMatrix::from_fn(cfg.n_users, cfg.n_tx, |u, i| {
        let z = dataset.channels[picks[u]][i];
        C64::new(z.re as f64 * amp, z.im as f64 * amp)
    });
    ChannelMatrix::new(h)
}

/// `n` multi-user CSIs drawn from `dataset` with a dedicated RNG.
pub fn sample_csis(
    dataset: &EnvironmentDataset,
    cfg: &SystemConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<ChannelMatrix>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| build_multiuser_csi(dataset, cfg, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SystemConfig {
        SystemConfig::default()
    }

    fn direction_error(a: &[C64], b: &[C64]) -> f64 {
        let inner: C64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
        let na: f64 = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        1.0 - inner.norm() / (na * nb)
    }

    #[test]
    fn broadside_is_all_ones() {
        let a = steering_vector(0.7, 0.0, &cfg()).unwrap();
        assert_eq!(a.len(), 64);
        assert!(a.iter().all(|z| (z - C64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn steering_unit_modulus_and_direct_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (az1, el1, az2, el2) = (
                rng.gen::<f64>() * 6.0,
                rng.gen::<f64>(),
                rng.gen::<f64>() * 6.0,
                rng.gen::<f64>(),
            );
            let a = steering_vector(az1, el1, &cfg()).unwrap();
            let b = steering_vector(az2, el2, &cfg()).unwrap();
            assert!(a.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
            let inner: C64 = a.iter().zip(&b).map(|(x, y)| x.conj() * y).sum();
            // separable closed form: product of two geometric sums
            let pi = std::f64::consts::PI;
            let du = pi * (el2.sin() * az2.cos() - el1.sin() * az1.cos());
            let dv = pi * (el2.sin() * az2.sin() - el1.sin() * az1.sin());
            let sum_u: C64 = (0..8).map(|m| C64::from_polar(1.0, m as f64 * du)).sum();
            let sum_v: C64 = (0..8).map(|n| C64::from_polar(1.0, n as f64 * dv)).sum();
            assert!((inner.norm() - (sum_u * sum_v).norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn rectangular_arrays() {
        assert_eq!(array_shape(64).unwrap(), (8, 8));
        assert_eq!(array_shape(8).unwrap(), (2, 4));
        assert_eq!(array_shape(12).unwrap(), (3, 4));
        assert_eq!(array_shape(7).unwrap(), (1, 7));
        assert!(array_shape(0).is_err());
        let c = SystemConfig { n_tx: 12, ..cfg() };
        let (az, el) = (0.4f64, 0.3f64);
        let a = steering_vector(az, el, &c).unwrap();
        let du = std::f64::consts::PI * el.sin() * az.cos();
        let dv = std::f64::consts::PI * el.sin() * az.sin();
        // element (row 2, col 3) sits at index 2*4 + 3
        assert!((a[11] - C64::from_polar(1.0, 2.0 * du + 3.0 * dv)).norm() < 1e-12);
    }

    #[test]
    fn strong_los_follows_steering_vector() {
        let spec = EnvironmentSpec {
            rician_k: 1e6,
            sector_width: 0.0,
            mean_azimuth: 0.4,
            mean_elevation: 0.6,
            ..EnvironmentSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = sample_channel(&spec, &cfg(), &mut rng).unwrap();
        let a = steering_vector(0.4, 0.6, &cfg()).unwrap();
        assert!(direction_error(&h, &a) < 1e-2);
    }

    #[test]
    fn nlos_has_no_deterministic_los() {
        let spec = EnvironmentSpec {
            los: false,
            rician_k: 0.0,
            sector_width: 0.0,
            n_clusters: 3,
            mean_azimuth: 0.3,
            mean_elevation: 0.8,
            ..EnvironmentSpec::default()
        };
        let data = generate_dataset(&spec, &cfg(), 400).unwrap();
        let a = steering_vector(0.3, 0.8, &cfg()).unwrap();
        // coherent average of the projections onto the mean direction vanishes
        let mean_proj: C64 = data
            .channels
            .iter()
            .map(|h| {
                h.iter()
                    .zip(&a)
                    .map(|(x, y)| y.conj() * C64::new(x.re as f64, x.im as f64))
                    .sum::<C64>()
            })
            .sum::<C64>()
            / 400.0;
        assert!(mean_proj.norm() < 0.1 * 64.0);
        assert!((data.mean_antenna_gain() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let spec = EnvironmentSpec::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let mut r2 = ChaCha8Rng::seed_from_u64(10);
        let a = sample_channel(&spec, &cfg(), &mut r1).unwrap();
        let b = sample_channel(&spec, &cfg(), &mut r2).unwrap();
        assert!(a
            .iter()
            .zip(&b)
            .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits()));

        let d1 = generate_dataset(&spec, &cfg(), 50).unwrap();
        let d2 = generate_dataset(&spec, &cfg(), 50).unwrap();
        assert_eq!(d1, d2);
        // prefix property of per-sample streams
        let d3 = generate_dataset(&spec, &cfg(), 20).unwrap();
        assert_eq!(&d1.channels[..20], &d3.channels[..]);
    }

    #[test]
    fn dataset_normalized() {
        let data = generate_dataset(&EnvironmentSpec::default(), &cfg(), 300).unwrap();
        assert!((data.mean_antenna_gain() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn exact_pool_is_used_in_order() {
        let c = SystemConfig {
            n_users: 3,
            ..cfg()
        };
        let data = generate_dataset(&EnvironmentSpec::default(), &c, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = build_multiuser_csi(&data, &c, &mut rng).unwrap();
        for u in 0..3 {
            let row = h.user(u);
            assert!(row
                .iter()
                .zip(&data.channels[u])
                .all(|(a, b)| a.re == b.re as f64 && a.im == b.im as f64));
        }
    }

    #[test]
    fn insufficient_pool_rejected() {
        let data = generate_dataset(&EnvironmentSpec::default(), &cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_multiuser_csi(&data, &cfg(), &mut rng),
            Err(Error::InsufficientSamples { need: 4, have: 3 })
        ));
    }

    #[test]
    fn selection_is_deterministic_and_distinct() {
        let data = generate_dataset(&EnvironmentSpec::default(), &cfg(), 30).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let a = build_multiuser_csi(&data, &cfg(), &mut r1).unwrap();
            let b = build_multiuser_csi(&data, &cfg(), &mut r2).unwrap();
            assert_eq!(a, b);
            for u in 0..4 {
                for v in (u + 1)..4 {
                    assert_ne!(a.user(u), a.user(v));
                }
            }
        }
    }

    #[test]
    fn selection_frequencies_are_uniform() {
        // tag each of 100 channels by putting its index in antenna 0
        let c = cfg();
        let channels: Vec<Vec<Complex32>> = (0..100)
            .map(|i| {
                let mut h = vec![Complex32::new(1.0, 0.0); 64];
                h[0] = Complex32::new(i as f32, 0.0);
                h
            })
            .collect();
        let data = EnvironmentDataset {
            spec: EnvironmentSpec::default(),
            n_tx: 64,
            channels,
        };
        let draws = 10_000;
        let mut counts = [0usize; 100];
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..draws {
            let h = build_multiuser_csi(&data, &c, &mut rng).unwrap();
            for u in 0..4 {
                counts[h.matrix()[(u, 0)].re.round() as usize] += 1;
            }
        }
        let p = 4.0 / 100.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for &n in &counts {
            assert!((n as f64 - mean).abs() < 4.0 * sd, "count {n} vs {mean}");
        }
    }

    #[test]
    fn path_loss_scales_rows() {
        let spec = EnvironmentSpec {
            path_loss_db: 20.0,
            ..EnvironmentSpec::default()
        };
        let data = generate_dataset(&spec, &cfg(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = build_multiuser_csi(&data, &cfg(), &mut rng).unwrap();
        let row_gain: f64 = h.user(0).iter().map(|z| z.norm_sqr()).sum::<f64>() / 64.0;
        assert!((row_gain - 0.01).abs() < 1e-8);
    }

    fn mean_abs_correlation(a: &EnvironmentDataset, b: &EnvironmentDataset, same: bool) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, x) in a.channels.iter().enumerate() {
            for (j, y) in b.channels.iter().enumerate() {
                if same && i == j {
                    continue;
                }
                let inner: Complex32 = x.iter().zip(y).map(|(p, q)| p.conj() * q).sum();
                total += inner.norm() as f64 / 64.0;
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn disjoint_sites_are_separable() {
        for seed in 0..10 {
            let west = EnvironmentSpec {
                mean_azimuth: -1.2,
                sector_width: 0.6,
                seed,
                ..EnvironmentSpec::default()
            };
            let east = EnvironmentSpec {
                mean_azimuth: 1.2,
                sector_width: 0.6,
                seed: seed + 100,
                ..EnvironmentSpec::default()
            };
            let a = generate_dataset(&west, &cfg(), 40).unwrap();
            let b = generate_dataset(&east, &cfg(), 40).unwrap();
            let within =
                0.5 * (mean_abs_correlation(&a, &a, true) + mean_abs_correlation(&b, &b, true));
            let across = mean_abs_correlation(&a, &b, false);
            assert!(
                across < within,
                "seed {seed}: across {across} within {within}"
            );
        }
    }
}

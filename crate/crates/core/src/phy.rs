//! Downlink link model: SINR, per-user rate, transmit energy and precoder
//! power normalization, plus a Monte-Carlo transmission simulator that is
//! used as an independent check on the closed-form SINR.
//!
//! Conventions: a [`ChannelMatrix`] stores one channel vector `h_u` per row,
//! so the effective gain of beam `w_j` at user `u` is `h_u^H w_j`. Transmit
//! symbols have unit power, and the power scale `gamma` multiplies the beam
//! amplitudes by `sqrt(gamma)`, which makes radiated power linear in `gamma`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Transmit antennas `N_T`.
    pub n_tx: usize,
    /// Single-antenna users `N_U`.
    pub n_users: usize,
    /// Maximum total transmit power in watts.
    pub p_tx: f64,
    /// Fixed power drawn by one active RF chain, in watts.
    pub p_rf: f64,
    /// Receiver noise power in watts.
    pub noise_power: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            n_tx: 64,
            n_users: 4,
            p_tx: 20.0,
            p_rf: 1.0,
            noise_power: 1e-13,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_tx < self.n_users {
            return Err(Error::invalid(format!(
                "need n_tx >= n_users >= 1, got n_tx={} n_users={}",
                self.n_tx, self.n_users
            )));
        }
        if !(self.p_tx > 0.0 && self.p_tx.is_finite()) {
            return Err(Error::invalid("p_tx must be positive"));
        }
        if !(self.p_rf >= 0.0 && self.p_rf.is_finite()) {
            return Err(Error::invalid("p_rf must be non-negative"));
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return Err(Error::invalid("noise_power must be positive"));
        }
        Ok(())
    }

    /// Energy of the most expensive configuration: full power, every antenna on.
    pub fn max_energy(&self) -> f64 {
        self.p_tx + self.n_tx as f64 * self.p_rf
    }
}

/// Multi-user CSI, `N_U x N_T`, one channel vector `h_u` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix(CMatrix);

impl ChannelMatrix {
    pub fn new(h: CMatrix) -> Result<Self> {
        if h.nrows() == 0 || h.ncols() == 0 {
            return Err(Error::invalid("empty channel matrix"));
        }
        if h.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("channel matrix has non-finite entries"));
        }
        Ok(Self(h))
    }

    pub fn from_users(users: &[Vec<C64>]) -> Result<Self> {
        let n_tx = users.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = users.iter().find(|h| h.len() != n_tx) {
            return Err(Error::DimensionMismatch {
                context: "channel vector",
                expected: n_tx,
                got: bad.len(),
            });
        }
        Self::new(CMatrix::from_fn(users.len(), n_tx, |u, i| users[u][i]))
    }

    pub fn n_users(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_tx(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    /// Channel vector of user `u`.
    pub fn user(&self, u: usize) -> Vec<C64> {
        self.0.row(u).iter().copied().collect()
    }

    pub fn check(&self, cfg: &SystemConfig) -> Result<()> {
        if self.n_users() != cfg.n_users {
            return Err(Error::DimensionMismatch {
                context: "channel users",
                expected: cfg.n_users,
                got: self.n_users(),
            });
        }
        if self.n_tx() != cfg.n_tx {
            return Err(Error::DimensionMismatch {
                context: "channel antennas",
                expected: cfg.n_tx,
                got: self.n_tx(),
            });
        }
        Ok(())
    }
}

/// Joint decision: precoder `W` (`N_T x N_U`), antenna mask and power scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingSolution {
    pub precoder: CMatrix,
    pub mask: Vec<bool>,
    pub gamma: f64,
}

impl PrecodingSolution {
    /// All antennas on, full power.
    pub fn full_power(precoder: CMatrix) -> Self {
        let n = precoder.nrows();
        Self {
            precoder,
            mask: vec![true; n],
            gamma: 1.0,
        }
    }

    pub fn active_antennas(&self) -> usize {
        self.mask.iter().filter(|&&on| on).count()
    }

    pub fn transmit_power(&self) -> f64 {
        self.precoder.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn check(&self, cfg: &SystemConfig) -> Result<()> {
        if self.precoder.nrows() != cfg.n_tx || self.mask.len() != cfg.n_tx {
            return Err(Error::DimensionMismatch {
                context: "precoder antennas",
                expected: cfg.n_tx,
                got: self.precoder.nrows().max(self.mask.len()),
            });
        }
        if self.precoder.ncols() != cfg.n_users {
            return Err(Error::DimensionMismatch {
                context: "precoder users",
                expected: cfg.n_users,
                got: self.precoder.ncols(),
            });
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// One realization of the downlink signal model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionSample {
    /// Unit-power symbols, one per user.
    pub symbols: Vec<C64>,
    /// Additive noise seen by each user.
    pub noise: Vec<C64>,
    /// Received scalar at each user.
    pub received: Vec<C64>,
}

/// `h^H (mask .* w_j)` for every beam `j`, without the power scale.
pub(crate) fn masked_gains(h: &[C64], solution: &PrecodingSolution) -> Vec<C64> {
    let w = &solution.precoder;
    (0..w.ncols())
        .map(|j| {
            h.iter()
                .zip(solution.mask.iter())
                .enumerate()
                .filter(|(_, (_, &on))| on)
                .map(|(i, (hi, _))| hi.conj() * w[(i, j)])
                .sum()
        })
        .collect()
}

fn check_user(h: &[C64], solution: &PrecodingSolution, u: usize, cfg: &SystemConfig) -> Result<()> {
    solution.check(cfg)?;
    if h.len() != cfg.n_tx {
        return Err(Error::DimensionMismatch {
            context: "channel vector",
            expected: cfg.n_tx,
            got: h.len(),
        });
    }
    if u >= cfg.n_users {
        return Err(Error::invalid(format!("user index {u} out of range")));
    }
    Ok(())
}

/// SINR of user `u` with effective beams `sqrt(gamma) * (mask .* w_j)`.
pub fn sinr(h: &[C64], solution: &PrecodingSolution, u: usize, cfg: &SystemConfig) -> Result<f64> {
    check_user(h, solution, u, cfg)?;
    let gains = masked_gains(h, solution);
    let signal = solution.gamma * gains[u].norm_sqr();
    let interference: f64 = gains
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != u)
        .map(|(_, g)| solution.gamma * g.norm_sqr())
        .sum();
    Ok(signal / (interference + cfg.noise_power))
}

/// Spectral efficiency in b/s/Hz for a given SINR.
pub fn user_rate(sinr_value: f64) -> Result<f64> {
    if sinr_value.is_nan() || sinr_value < 0.0 {
        return Err(Error::invalid(format!("negative SINR {sinr_value}")));
    }
    Ok(sinr_value.ln_1p() / std::f64::consts::LN_2)
}

pub fn user_rates(
    h: &ChannelMatrix,
    solution: &PrecodingSolution,
    cfg: &SystemConfig,
) -> Result<Vec<f64>> {
    h.check(cfg)?;
    (0..cfg.n_users)
        .map(|u| user_rate(sinr(&h.user(u), solution, u, cfg)?))
        .collect()
}

pub fn sum_rate(
    h: &ChannelMatrix,
    solution: &PrecodingSolution,
    cfg: &SystemConfig,
) -> Result<f64> {
    Ok(user_rates(h, solution, cfg)?.iter().sum())
}

/// Transmit power plus RF-chain cost of the active antennas, in watts.
pub fn energy(solution: &PrecodingSolution, cfg: &SystemConfig) -> f64 {
    solution.gamma * cfg.p_tx + cfg.p_rf * solution.active_antennas() as f64
}

/// Rescales `w_raw` so that its total power equals `p_tx`.
pub fn normalize_precoder(w_raw: &CMatrix, cfg: &SystemConfig) -> Result<CMatrix> {
    let power: f64 = w_raw.iter().map(|z| z.norm_sqr()).sum();
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::invalid(
            "cannot normalize a zero or non-finite precoder",
        ));
    }
    let scale = (cfg.p_tx / power).sqrt();
    Ok(w_raw.map(|z| z * scale))
}

fn qpsk<R: Rng>(rng: &mut R) -> C64 {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    C64::new(
        if rng.gen::<bool>() { a } else { -a },
        if rng.gen::<bool>() { a } else { -a },
    )
}

fn complex_gaussian<R: Rng>(rng: &mut R, power: f64) -> C64 {
    // |z|^2 ~ Exp(mean = power), uniform phase
    let u: f64 = 1.0 - rng.gen::<f64>();
    let radius = (-power * u.ln()).sqrt();
    let phase = rng.gen::<f64>() * std::f64::consts::TAU;
    C64::from_polar(radius, phase)
}

/// Draws one use of the channel: unit-power QPSK symbols for every user and
/// circularly-symmetric Gaussian noise of power `noise_power`.
pub fn transmit<R: Rng>(
    h: &ChannelMatrix,
    solution: &PrecodingSolution,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<TransmissionSample> {
    h.check(cfg)?;
    solution.check(cfg)?;
    let symbols: Vec<C64> = (0..cfg.n_users).map(|_| qpsk(rng)).collect();
    let noise: Vec<C64> = (0..cfg.n_users)
        .map(|_| complex_gaussian(rng, cfg.noise_power))
        .collect();
    let amp = solution.gamma.sqrt();
    let received = (0..cfg.n_users)
        .map(|u| {
            let gains = masked_gains(&h.user(u), solution);
            let clean: C64 = gains.iter().zip(&symbols).map(|(g, x)| g * x).sum();
            clean * amp + noise[u]
        })
        .collect();
    Ok(TransmissionSample {
        symbols,
        noise,
        received,
    })
}

/// Empirical SINR of user `u` over `n_symbols` simulated transmissions.
///
/// Noise magnitudes are drawn by stratified inverse-CDF sampling (one draw per
/// probability stratum, shuffled) with uniform phases, so each noise sample is
/// still marginally complex Gaussian while the empirical noise power converges
/// much faster than with plain i.i.d. draws.
pub fn simulate_sinr(
    h: &[C64],
    solution: &PrecodingSolution,
    u: usize,
    cfg: &SystemConfig,
    n_symbols: usize,
    seed: u64,
) -> Result<f64> {
    check_user(h, solution, u, cfg)?;
    if n_symbols == 0 {
        return Err(Error::invalid("n_symbols must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = solution.gamma.sqrt();
    let gains: Vec<C64> = masked_gains(h, solution)
        .into_iter()
        .map(|g| g * amp)
        .collect();

    let n = n_symbols as f64;
    let mut magnitudes: Vec<f64> = (0..n_symbols)
        .map(|k| {
            let p = (k as f64 + rng.gen::<f64>()) / n;
            (-cfg.noise_power * (1.0 - p).max(f64::MIN_POSITIVE).ln()).sqrt()
        })
        .collect();
    magnitudes.shuffle(&mut rng);

    let mut signal = 0.0;
    let mut disturbance = 0.0;
    let mut symbols = vec![C64::new(0.0, 0.0); gains.len()];
    for radius in magnitudes {
        for x in symbols.iter_mut() {
            *x = qpsk(&mut rng);
        }
        let noise = C64::from_polar(radius, rng.gen::<f64>() * std::f64::consts::TAU);
        // y_u minus the wanted term, accumulated directly to avoid cancellation
        let others: C64 = gains
            .iter()
            .zip(&symbols)
            .enumerate()
            .filter(|&(j, _)| j != u)
            .map(|(_, (g, x))| g * x)
            .sum();
        signal += (gains[u] * symbols[u]).norm_sqr();
        disturbance += (others + noise).norm_sqr();
    }
    if disturbance == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(signal / disturbance)
}

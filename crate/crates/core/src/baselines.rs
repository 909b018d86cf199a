//! Fully-digital reference precoders: zero forcing and WMMSE.

use num_complex::Complex64;

use crate::channelgen::{sample_csis, EnvironmentDataset};
use crate::error::{Error, Result};
use crate::phy::{
    normalize_precoder, CMatrix, ChannelMatrix, PrecodingSolution, SystemConfig, C64,
};

/// Largest tolerated condition number of `H H^H` for zero forcing.
pub const MAX_ZF_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmmseOptions {
    pub max_iter: usize,
    /// Stop once an iteration improves the sum-rate by less than this (b/s/Hz).
    pub tol: f64,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WmmseReport {
    pub precoder: CMatrix,
    /// Precoder updates performed.
    pub iterations: usize,
    /// Sum-rate of the initializer followed by the sum-rate after each update.
    pub rate_trace: Vec<f64>,
}

impl WmmseReport {
    pub fn final_rate(&self) -> f64 {
        *self
            .rate_trace
            .last()
            .expect("trace holds the initial rate")
    }

    pub fn solution(&self) -> PrecodingSolution {
        PrecodingSolution::full_power(self.precoder.clone())
    }
}

/// `G` with rows `h_u^H`, so that `G W` holds the effective gains.
fn downlink(h: &ChannelMatrix) -> CMatrix {
    h.matrix().map(|z| z.conj())
}

fn hermitian_extremes(m: &CMatrix) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let lo = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Zero forcing `W = G^H (G G^H)^{-1}`, scaled to full power.
pub fn zf_precoder(h: &ChannelMatrix, cfg: &SystemConfig) -> Result<PrecodingSolution> {
    h.check(cfg)?;
    let g = downlink(h);
    let gram = &g * g.adjoint();
    let (lo, hi) = hermitian_extremes(&gram);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_ZF_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let inv = gram
        .cholesky()
        .ok_or(Error::Singular { condition })?
        .inverse();
    let w = normalize_precoder(&(g.adjoint() * inv), cfg)?;
    Ok(PrecodingSolution::full_power(w))
}

fn rates_from_gains(gains: &CMatrix, noise: f64) -> f64 {
    (0..gains.nrows())
        .map(|u| {
            let signal = gains[(u, u)].norm_sqr();
            let disturbance: f64 = gains
                .row(u)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != u)
                .map(|(_, z)| z.norm_sqr())
                .sum::<f64>()
                + noise;
            (signal / disturbance).ln_1p() / std::f64::consts::LN_2
        })
        .sum()
}

/// Precoder for a fixed receiver/weight pair, as a function of the dual
/// variable: `W(mu) = G^H (D K + mu I)^{-1} C`, with `K = G G^H`,
/// `D = diag(lambda |a|^2)` and `C = diag(lambda a)`.
struct DualProblem<'a> {
    g: &'a CMatrix,
    kernel: CMatrix,
    d: Vec<f64>,
    c: Vec<C64>,
}

impl DualProblem<'_> {
    fn coefficients(&self, mu: f64) -> Option<CMatrix> {
        let n = self.d.len();
        let mut system = CMatrix::from_fn(n, n, |i, j| self.kernel[(i, j)] * self.d[i]);
        for i in 0..n {
            system[(i, i)] += Complex64::new(mu, 0.0);
        }
        let rhs = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.c.clone()));
        let x = system.lu().solve(&rhs)?;
        x.iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
            .then_some(x)
    }

    /// `tr(X^H K X)`, the transmit power of `G^H X`.
    fn power(&self, mu: f64) -> f64 {
        match self.coefficients(mu) {
            Some(x) => (x.adjoint() * &self.kernel * &x).trace().re,
            None => f64::INFINITY,
        }
    }

    fn precoder(&self, mu: f64) -> Result<CMatrix> {
        let x = self
            .coefficients(mu)
            .ok_or_else(|| Error::Bisection(format!("singular precoder system at mu={mu:e}")))?;
        Ok(self.g.adjoint() * x)
    }

    /// Smallest `mu >= 0` whose precoder fits the power budget.
    fn solve_mu(&self, p_tx: f64) -> Result<f64> {
        let p0 = self.power(0.0);
        if p0 <= p_tx {
            return Ok(0.0);
        }
        let scale = self
            .kernel
            .diagonal()
            .iter()
            .zip(&self.d)
            .map(|(k, d)| k.re * d)
            .fold(0.0, f64::max);
        let mut hi = if scale > 0.0 { scale * 1e-6 } else { 1e-12 };
        let mut doublings = 0;
        while self.power(hi) > p_tx {
            hi *= 2.0;
            doublings += 1;
            if doublings > 2000 || !hi.is_finite() {
                return Err(Error::Bisection(format!(
                    "no feasible bracket: power {:e} at mu={hi:e}, budget {p_tx}",
                    self.power(hi)
                )));
            }
        }
        let mut lo = if doublings == 0 { 0.0 } else { hi / 2.0 };
        for _ in 0..400 {
            let p_hi = self.power(hi);
            if p_tx - p_hi <= 1e-10 * p_tx {
                return Ok(hi);
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                return Ok(hi);
            }
            if self.power(mid) > p_tx {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }
}

/// Iterative WMMSE sum-rate maximization, initialized with full-power ZF.
pub fn wmmse_precoder(
    h: &ChannelMatrix,
    cfg: &SystemConfig,
    opts: WmmseOptions,
) -> Result<WmmseReport> {
    if opts.max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("tol must be positive"));
    }
    let mut w = zf_precoder(h, cfg)?.precoder;
    let g = downlink(h);
    let kernel = &g * g.adjoint();
    let n_users = cfg.n_users;

    let mut rate_trace = vec![rates_from_gains(&(&g * &w), cfg.noise_power)];
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let gains = &g * &w;
        let mut d = Vec::with_capacity(n_users);
        let mut c = Vec::with_capacity(n_users);
        for u in 0..n_users {
            let disturbance: f64 = gains
                .row(u)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != u)
                .map(|(_, z)| z.norm_sqr())
                .sum::<f64>()
                + cfg.noise_power;
            let total = disturbance + gains[(u, u)].norm_sqr();
            let receiver = gains[(u, u)] / total;
            // MMSE e_u = disturbance / total, weight 1 / e_u
            let weight = total / disturbance;
            d.push(weight * receiver.norm_sqr());
            c.push(receiver * weight);
        }
        let problem = DualProblem {
            g: &g,
            kernel: kernel.clone(),
            d,
            c,
        };
        let mu = problem.solve_mu(cfg.p_tx)?;
        w = problem.precoder(mu)?;
        iterations += 1;

        let rate = rates_from_gains(&(&g * &w), cfg.noise_power);
        if !rate.is_finite() {
            return Err(Error::Numerical(format!(
                "WMMSE rate became {rate} at iteration {iterations}"
            )));
        }
        let previous = *rate_trace.last().unwrap();
        rate_trace.push(rate);
        if rate - previous < opts.tol {
            break;
        }
    }
    Ok(WmmseReport {
        precoder: w,
        iterations,
        rate_trace,
    })
}

/// Mean WMMSE sum-rate over `n_eval` multi-user CSIs drawn from the dataset.
pub fn wmmse_rate_bound(
    dataset: &EnvironmentDataset,
    cfg: &SystemConfig,
    n_eval: usize,
    seed: u64,
    opts: WmmseOptions,
) -> Result<f64> {
    if n_eval == 0 {
        return Err(Error::invalid("n_eval must be at least 1"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid(format!(
            "dataset {} is empty",
            dataset.spec.env_id
        )));
    }
    let csis = sample_csis(dataset, cfg, n_eval, seed)?;
    let mut total = 0.0;
    for h in &csis {
        total += wmmse_precoder(h, cfg, opts)?.final_rate();
    }
    Ok(total / n_eval as f64)
}

/// Inter-user leakage `|h_u^H w_j|`, normalized by `||h_u|| ||w_j||`, maximized over `u != j`.
pub fn max_relative_leakage(h: &ChannelMatrix, w: &CMatrix) -> f64 {
    let g = downlink(h);
    let gains = &g * w;
    let mut worst: f64 = 0.0;
    for u in 0..gains.nrows() {
        let hn = g.row(u).norm();
        for j in 0..gains.ncols() {
            if u != j {
                worst = worst.max(gains[(u, j)].norm() / (hn * w.column(j).norm()));
            }
        }
    }
    worst
}

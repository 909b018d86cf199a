use crate::error::{Error, Result};
use crate::nn::{flatten_channels, HeadVars, RateRequest, Tape, Tensor, Var};
use crate::phy::{energy, user_rates, ChannelMatrix, PrecodingSolution, SystemConfig};

/// Per-user request used to ask for the highest achievable rates.
pub const MAX_RATE_REQUEST: f64 = 1e3;

pub fn max_rate_request(n_users: usize) -> RateRequest {
    RateRequest::uniform(n_users, MAX_RATE_REQUEST).expect("positive constant")
}

pub fn is_max_rate(request: &RateRequest) -> bool {
    !request.is_empty() && request.targets().iter().all(|&t| t >= MAX_RATE_REQUEST)
}

fn check_request(request: &RateRequest, cfg: &SystemConfig) -> Result<()> {
    if request.len() != cfg.n_users {
        return Err(Error::DimensionMismatch {
            context: "rate request",
            expected: cfg.n_users,
            got: request.len(),
        });
    }
    Ok(())
}

/// Mean squared gap between achieved and requested per-user rates.
pub fn loss_adaptive_rate(
    h: &ChannelMatrix,
    solution: &PrecodingSolution,
    request: &RateRequest,
    cfg: &SystemConfig,
) -> Result<f64> {
    check_request(request, cfg)?;
    let rates = user_rates(h, solution, cfg)?;
    Ok(rates
        .iter()
        .zip(request.targets())
        .map(|(r, t)| (r - t) * (r - t))
        .sum::<f64>()
        / rates.len() as f64)
}

/// Energy divided by its maximum `P_TX + N_T P_RF`.
pub fn normalized_energy(solution: &PrecodingSolution, cfg: &SystemConfig) -> f64 {
    energy(solution, cfg) / cfg.max_energy()
}

pub fn blend(l_ar: f64, l_ec_normalized: f64, mu: f64) -> f64 {
    mu * l_ar + (1.0 - mu) * l_ec_normalized
}

pub fn loss_total(
    h: &ChannelMatrix,
    solution: &PrecodingSolution,
    request: &RateRequest,
    cfg: &SystemConfig,
    mu: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid(format!("mu = {mu} outside [0, 1]")));
    }
    let l_ar = loss_adaptive_rate(h, solution, request, cfg)?;
    Ok(blend(l_ar, normalized_energy(solution, cfg), mu))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Maximize the sum-rate of the precoder alone (all antennas, `γ = 1`).
    SumRate,
    /// `μ L_AR + (1-μ) L_EC` on the full solution. Samples carrying the
    /// max-rate request are scored by their negative mean user rate instead.
    RateEnergy { mu: f64 },
}

/// Totals over the samples of one graph.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub samples: usize,
    pub sum_rate: f64,
    pub tracked: usize,
    pub l_ar: f64,
    pub energy: f64,
    pub loss: f64,
}

impl LossStats {
    pub fn merge(&mut self, other: &LossStats) {
        self.samples += other.samples;
        self.sum_rate += other.sum_rate;
        self.tracked += other.tracked;
        self.l_ar += other.l_ar;
        self.energy += other.energy;
        self.loss += other.loss;
    }

    pub fn mean_sum_rate(&self) -> f64 {
        self.sum_rate / self.samples.max(1) as f64
    }

    pub fn mean_l_ar(&self) -> f64 {
        self.l_ar / self.tracked.max(1) as f64
    }

    pub fn mean_energy(&self) -> f64 {
        self.energy / self.samples.max(1) as f64
    }
}

/// Appends the objective to a graph. The returned loss is a sum of
/// per-sample terms divided by `denominator`, so chunks of one batch add up
/// to the batch mean.
pub fn objective_graph(
    tape: &mut Tape<'_>,
    out: &HeadVars,
    channels: &[ChannelMatrix],
    requests: &[RateRequest],
    objective: Objective,
    cfg: &SystemConfig,
    denominator: usize,
) -> Result<(Var, LossStats)> {
    let b = channels.len();
    let nu = cfg.n_users;
    let inv = 1.0 / denominator as f64;
    let flat = flatten_channels(channels);

    let (loss, stats) = match objective {
        Objective::SumRate => {
            let ones = tape.constant(Tensor::filled(b, cfg.n_tx, 1.0));
            let full = tape.constant(Tensor::filled(b, 1, 1.0));
            let rates = tape.rates(out.precoder, ones, full, flat, nu, cfg.noise_power);
            let total: f64 = tape.value(rates).data.iter().sum();
            let loss = tape.weighted_sum(rates, Tensor::filled(b, nu, -inv));
            let stats = LossStats {
                samples: b,
                sum_rate: total,
                energy: b as f64 * (cfg.p_tx + cfg.n_tx as f64 * cfg.p_rf) / cfg.max_energy(),
                ..LossStats::default()
            };
            (loss, stats)
        }
        Objective::RateEnergy { mu } => {
            let rates = tape.rates(out.precoder, out.mask, out.gamma, flat, nu, cfg.noise_power);
            let mut targets = Vec::with_capacity(b * nu);
            let mut w_track = Vec::with_capacity(b * nu);
            let mut w_max = Vec::with_capacity(b * nu);
            let mut w_energy = Vec::with_capacity(b);
            let mut tracked = 0;
            for r in requests {
                if is_max_rate(r) {
                    targets.extend(std::iter::repeat_n(0.0, nu));
                    w_track.extend(std::iter::repeat_n(0.0, nu));
                    w_max.extend(std::iter::repeat_n(-inv / nu as f64, nu));
                    w_energy.push(0.0);
                } else {
                    tracked += 1;
                    targets.extend_from_slice(r.targets());
                    w_track.extend(std::iter::repeat_n(mu * inv / nu as f64, nu));
                    w_max.extend(std::iter::repeat_n(0.0, nu));
                    w_energy.push((1.0 - mu) * inv);
                }
            }
            let targets = Tensor::from_vec(b, nu, targets);
            let gap = tape.sub_const(rates, &targets);
            let sq = tape.square(gap);
            let track_mask = Tensor::from_vec(
                b,
                nu,
                w_track
                    .iter()
                    .map(|&w| if w > 0.0 { 1.0 } else { 0.0 })
                    .collect(),
            );
            let l_ar_total = tape
                .value(sq)
                .data
                .iter()
                .zip(&track_mask.data)
                .map(|(a, m)| a * m)
                .sum::<f64>()
                / nu as f64;
            let track = tape.weighted_sum(sq, Tensor::from_vec(b, nu, w_track));
            let maxr = tape.weighted_sum(rates, Tensor::from_vec(b, nu, w_max));
            let active = tape.row_sum(out.mask);
            let max_e = cfg.max_energy();
            let e = tape.combine(&[(out.gamma, cfg.p_tx / max_e), (active, cfg.p_rf / max_e)]);
            let energy_total: f64 = tape.value(e).data.iter().sum();
            let en = tape.weighted_sum(e, Tensor::from_vec(b, 1, w_energy));
            let loss = tape.combine(&[(track, 1.0), (maxr, 1.0), (en, 1.0)]);
            let stats = LossStats {
                samples: b,
                sum_rate: tape.value(rates).data.iter().sum(),
                tracked,
                l_ar: l_ar_total,
                energy: energy_total,
                ..LossStats::default()
            };
            (loss, stats)
        }
    };
    let value = tape.value(loss).data[0];
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value}")));
    }
    Ok((
        loss,
        LossStats {
            loss: value,
            ..stats
        },
    ))
}

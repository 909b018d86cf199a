//! Evaluation harness: max-sum-rate comparisons, rate-power sweeps, the
//! cross-site table and FLOP accounting.

pub mod flops;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use flops::{
    flop_count, forward_flop_audit, forward_flops, round_significant, Algorithm, FlopReport,
    LayerFlops,
};

use crate::baselines::{wmmse_precoder, zf_precoder, WmmseOptions};
use crate::channelgen::{sample_csis, EnvironmentDataset};
use crate::error::{Error, Result};
use crate::nn::{forward_batch, FeatureExtractor, Mode, OutputHead, RateRequest};
use crate::phy::{energy, user_rates, ChannelMatrix, PrecodingSolution, SystemConfig};
use crate::training::{max_rate_request, sample_rate_requirements};

/// Anything that maps a CSI and a rate request to a precoding solution.
pub trait Precoder {
    fn name(&self) -> &str;

    fn solve(&self, h: &ChannelMatrix, request: &RateRequest) -> Result<PrecodingSolution>;

    fn solve_batch(
        &self,
        channels: &[ChannelMatrix],
        requests: &[RateRequest],
    ) -> Result<Vec<PrecodingSolution>> {
        channels
            .iter()
            .zip(requests)
            .map(|(h, r)| self.solve(h, r))
            .collect()
    }
}

pub struct ZfPrecoder {
    pub cfg: SystemConfig,
}

impl Precoder for ZfPrecoder {
    fn name(&self) -> &str {
        "zf"
    }

    fn solve(&self, h: &ChannelMatrix, _: &RateRequest) -> Result<PrecodingSolution> {
        zf_precoder(h, &self.cfg)
    }
}

pub struct WmmsePrecoder {
    pub cfg: SystemConfig,
    pub opts: WmmseOptions,
}

impl Precoder for WmmsePrecoder {
    fn name(&self) -> &str {
        "wmmse"
    }

    fn solve(&self, h: &ChannelMatrix, _: &RateRequest) -> Result<PrecodingSolution> {
        Ok(wmmse_precoder(h, &self.cfg, self.opts)?.solution())
    }
}

/// Foundation model with one output head, evaluated in eval mode.
pub struct ModelPrecoder<'a> {
    pub name: String,
    pub extractor: &'a FeatureExtractor,
    pub head: &'a OutputHead,
    pub cfg: SystemConfig,
}

impl Precoder for ModelPrecoder<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn solve(&self, h: &ChannelMatrix, request: &RateRequest) -> Result<PrecodingSolution> {
        Ok(self
            .solve_batch(std::slice::from_ref(h), std::slice::from_ref(request))?
            .remove(0))
    }

    fn solve_batch(
        &self,
        channels: &[ChannelMatrix],
        requests: &[RateRequest],
    ) -> Result<Vec<PrecodingSolution>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Ok(forward_batch(
            self.extractor,
            self.head,
            channels,
            requests,
            &self.cfg,
            Mode::Eval,
            &mut rng,
        )?
        .into_iter()
        .map(|o| o.solution)
        .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxRateReport {
    pub env_id: String,
    pub n_eval: usize,
    pub seed: u64,
    pub model: f64,
    pub model_energy: f64,
    pub zf: f64,
    pub wmmse: f64,
}

fn mean_rates(
    channels: &[ChannelMatrix],
    solutions: &[PrecodingSolution],
    cfg: &SystemConfig,
) -> Result<(f64, f64)> {
    let mut rate = 0.0;
    let mut power = 0.0;
    for (h, s) in channels.iter().zip(solutions) {
        rate += user_rates(h, s, cfg)?.iter().sum::<f64>();
        power += energy(s, cfg);
    }
    let n = channels.len() as f64;
    Ok((rate / n, power / n))
}

/// Mean sum-rate of `model` asked for the highest rates, next to ZF and
/// WMMSE on the same CSIs.
pub fn max_sum_rate_eval(
    model: &dyn Precoder,
    dataset: &EnvironmentDataset,
    cfg: &SystemConfig,
    n_eval: usize,
    seed: u64,
) -> Result<MaxRateReport> {
    if n_eval == 0 {
        return Err(Error::invalid("n_eval must be at least 1"));
    }
    let channels = sample_csis(dataset, cfg, n_eval, seed)?;
    let requests = vec![max_rate_request(cfg.n_users); n_eval];
    let (model_rate, model_energy) =
        mean_rates(&channels, &model.solve_batch(&channels, &requests)?, cfg)?;
    let zf = ZfPrecoder { cfg: cfg.clone() };
    let wmmse = WmmsePrecoder {
        cfg: cfg.clone(),
        opts: WmmseOptions::default(),
    };
    Ok(MaxRateReport {
        env_id: dataset.spec.env_id.clone(),
        n_eval,
        seed,
        model: model_rate,
        model_energy,
        zf: mean_rates(&channels, &zf.solve_batch(&channels, &requests)?, cfg)?.0,
        wmmse: mean_rates(&channels, &wmmse.solve_batch(&channels, &requests)?, cfg)?.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub requested_sum_rate: f64,
    pub achieved_sum_rate: f64,
    pub energy: f64,
    /// Empty when no user asked for a positive rate.
    pub mean_relative_rate_error: Option<f64>,
}

/// Mean over users with a positive target of `|R_u - R_u*| / R_u*`.
pub fn relative_rate_error(achieved: &[f64], request: &RateRequest) -> Option<f64> {
    let errors: Vec<f64> = achieved
        .iter()
        .zip(request.targets())
        .filter(|(_, &t)| t > 0.0)
        .map(|(r, t)| (r - t).abs() / t)
        .collect();
    (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64)
}

pub fn tradeoff_point(
    h: &ChannelMatrix,
    solution: &PrecodingSolution,
    request: &RateRequest,
    cfg: &SystemConfig,
) -> Result<TradeoffPoint> {
    let rates = user_rates(h, solution, cfg)?;
    Ok(TradeoffPoint {
        requested_sum_rate: request.total(),
        achieved_sum_rate: rates.iter().sum(),
        energy: energy(solution, cfg),
        mean_relative_rate_error: relative_rate_error(&rates, request),
    })
}

/// `n_points` random requests scaled to the site's rate bound, sorted by
/// achieved sum-rate.
pub fn tradeoff_sweep(
    model: &dyn Precoder,
    dataset: &EnvironmentDataset,
    rmax: f64,
    cfg: &SystemConfig,
    n_points: usize,
    seed: u64,
) -> Result<Vec<TradeoffPoint>> {
    let channels = sample_csis(dataset, cfg, n_points, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let requests = (0..n_points)
        .map(|_| sample_rate_requirements(rmax, cfg.n_users, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let solutions = model.solve_batch(&channels, &requests)?;
    let mut points = channels
        .iter()
        .zip(&solutions)
        .zip(&requests)
        .map(|((h, s), r)| tradeoff_point(h, s, r, cfg))
        .collect::<Result<Vec<_>>>()?;
    sort_points(&mut points);
    Ok(points)
}

pub fn sort_points(points: &mut [TradeoffPoint]) {
    points.sort_by(|a, b| {
        a.achieved_sum_rate
            .total_cmp(&b.achieved_sum_rate)
            .then(a.requested_sum_rate.total_cmp(&b.requested_sum_rate))
            .then(a.energy.total_cmp(&b.energy))
    });
}

/// Mean of the per-point errors, skipping points without positive targets.
pub fn mean_relative_error(points: &[TradeoffPoint]) -> Option<f64> {
    let errors: Vec<f64> = points
        .iter()
        .filter_map(|p| p.mean_relative_rate_error)
        .collect();
    (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Mean requested sum-rate and mean energy within each of `bins` equal-count
/// groups ordered by requested sum-rate.
pub fn energy_by_request(points: &[TradeoffPoint], bins: usize) -> Vec<(f64, f64)> {
    let mut sorted: Vec<&TradeoffPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.requested_sum_rate.total_cmp(&b.requested_sum_rate));
    let n = sorted.len();
    (0..bins)
        .filter_map(|b| {
            let group = &sorted[b * n / bins..(b + 1) * n / bins];
            (!group.is_empty()).then(|| {
                let k = group.len() as f64;
                (
                    group.iter().map(|p| p.requested_sum_rate).sum::<f64>() / k,
                    group.iter().map(|p| p.energy).sum::<f64>() / k,
                )
            })
        })
        .collect()
}

/// Ranks starting at 1, ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "spearman lengths");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub n_points: usize,
    pub mean_relative_rate_error: Option<f64>,
    /// Rank correlation of decile energy against decile request.
    pub energy_trend: Option<f64>,
    pub deciles: Vec<(f64, f64)>,
}

pub fn summarize_sweep(points: &[TradeoffPoint]) -> SweepSummary {
    let deciles = energy_by_request(points, 10);
    let (x, y): (Vec<f64>, Vec<f64>) = deciles.iter().copied().unzip();
    SweepSummary {
        n_points: points.len(),
        mean_relative_rate_error: mean_relative_error(points),
        energy_trend: if x.len() >= 2 { spearman(&x, &y) } else { None },
        deciles,
    }
}

pub fn write_points_csv<W: Write>(points: &[TradeoffPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv<R: Read>(input: R) -> Result<Vec<TradeoffPoint>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Mean max-rate sum-rate of every head on every environment; entry
/// `(i, j)` is head `i` on environment `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSiteMatrix {
    pub env_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CrossSiteMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        let k = self.env_ids.len();
        (0..k).map(|i| self.values[i][i]).sum::<f64>() / k as f64
    }

    /// `None` for a single environment.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let k = self.env_ids.len();
        if k < 2 {
            return None;
        }
        let total: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .sum();
        Some(total / (k * (k - 1)) as f64)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["head".to_string()];
        header.extend(self.env_ids.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.env_ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let env_ids: Vec<String> = r.headers()?.iter().skip(1).map(String::from).collect();
        let mut values = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.get(0) != env_ids.get(i).map(String::as_str) {
                return Err(Error::Malformed(format!(
                    "row {i} is not labelled {:?}",
                    env_ids.get(i)
                )));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::Malformed(format!("{v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != env_ids.len() {
                return Err(Error::Malformed(format!(
                    "row {i} has {} entries",
                    row.len()
                )));
            }
            values.push(row);
        }
        if values.len() != env_ids.len() {
            return Err(Error::Malformed("cross-site table is not square".into()));
        }
        Ok(Self { env_ids, values })
    }
}

pub fn cross_site_matrix(
    heads: &[&dyn Precoder],
    datasets: &[EnvironmentDataset],
    cfg: &SystemConfig,
    n_eval: usize,
    seed: u64,
) -> Result<CrossSiteMatrix> {
    if heads.len() != datasets.len() {
        return Err(Error::DimensionMismatch {
            context: "heads per environment",
            expected: datasets.len(),
            got: heads.len(),
        });
    }
    if n_eval == 0 {
        return Err(Error::invalid("n_eval must be at least 1"));
    }
    let csis = datasets
        .iter()
        .map(|d| sample_csis(d, cfg, n_eval, seed))
        .collect::<Result<Vec<_>>>()?;
    let requests = vec![max_rate_request(cfg.n_users); n_eval];
    let values = heads
        .iter()
        .map(|head| {
            csis.iter()
                .map(|hs| Ok(mean_rates(hs, &head.solve_batch(hs, &requests)?, cfg)?.0))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossSiteMatrix {
        env_ids: datasets.iter().map(|d| d.spec.env_id.clone()).collect(),
        values,
    })
}

/// `{stem}-{hash prefix}-s{seed}.{ext}`
pub fn report_file_name(stem: &str, config_hash: &str, seed: u64, ext: &str) -> String {
    let short = &config_hash[..config_hash.len().min(12)];
    format!("{stem}-{short}-s{seed}.{ext}")
}

//! Losses, site weighting and the two training phases.

pub mod gradcheck;
pub mod losses;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{
    blend, is_max_rate, loss_adaptive_rate, loss_total, max_rate_request, normalized_energy,
    objective_graph, LossStats, Objective, MAX_RATE_REQUEST,
};
pub use optim::Adam;

use crate::baselines::{wmmse_rate_bound, WmmseOptions};
use crate::channelgen::{build_multiuser_csi, EnvironmentDataset};
use crate::error::{Error, Result};
pub use crate::nn::RateRequest;
use crate::nn::{
    extractor_graph, head_graph, token_features, FeatureExtractor, Mode, ModelHyper, OutputHead,
    Parameters, Tape, Tensor,
};
use crate::phy::{ChannelMatrix, SystemConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the rate-tracking term against normalized energy.
    pub mu: f64,
    /// Upper clamp `T` of the pre-training site weights.
    pub clamp_threshold: f64,
    /// Adam step size of the multi-objective phase.
    pub learning_rate: f64,
    /// Adam step size of site-aware pre-training.
    pub pretrain_learning_rate: f64,
    /// Samples per environment per batch.
    pub batch_size: usize,
    /// Multi-objective epochs.
    pub epochs: usize,
    /// Site-aware pre-training epochs.
    pub pretrain_epochs: usize,
    pub batches_per_epoch: usize,
    /// Smoothing of the per-environment sum-rate that drives the site weights.
    pub rate_ema_decay: f64,
    /// Share of multi-objective samples carrying the max-rate request.
    pub max_rate_fraction: f64,
    /// Samples per autodiff graph; bounds memory, not results.
    pub chunk_size: usize,
    /// Samples per environment used to estimate `R_e^max` with WMMSE.
    pub rmax_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: 0.99,
            clamp_threshold: 100.0,
            learning_rate: 1e-4,
            pretrain_learning_rate: 1e-4,
            batch_size: 1000,
            epochs: 10,
            pretrain_epochs: 10,
            batches_per_epoch: 1,
            rate_ema_decay: 0.9,
            max_rate_fraction: 0.1,
            chunk_size: 100,
            rmax_samples: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The same settings with `learning_rate` taken from
    /// `pretrain_learning_rate`, for a [`Trainer`] that runs phase one.
    pub fn for_pretraining(&self) -> Self {
        Self {
            learning_rate: self.pretrain_learning_rate,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::invalid(format!(
                "mu = {} must lie in (0, 1)",
                self.mu
            )));
        }
        if !(self.clamp_threshold >= 1.0) {
            return Err(Error::invalid(format!(
                "clamp_threshold = {} must be >= 1",
                self.clamp_threshold
            )));
        }
        for lr in [self.learning_rate, self.pretrain_learning_rate] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid("learning rates must be positive"));
            }
        }
        if self.batch_size == 0
            || self.batches_per_epoch == 0
            || self.chunk_size == 0
            || self.rmax_samples == 0
        {
            return Err(Error::invalid(
                "batch_size, batches_per_epoch, chunk_size and rmax_samples must be >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.rate_ema_decay) {
            return Err(Error::invalid("rate_ema_decay must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.max_rate_fraction) {
            return Err(Error::invalid("max_rate_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Random per-user targets whose sum is `β · rmax` with `β ~ U(0,1)`.
pub fn sample_rate_requirements<R: Rng + ?Sized>(
    rmax: f64,
    n_users: usize,
    rng: &mut R,
) -> Result<RateRequest> {
    if !(rmax > 0.0 && rmax.is_finite()) {
        return Err(Error::invalid(format!("rmax = {rmax} must be positive")));
    }
    if n_users == 0 {
        return Err(Error::invalid("n_users must be >= 1"));
    }
    loop {
        let raw: Vec<f64> = (0..n_users).map(|_| rng.gen::<f64>()).collect();
        let beta: f64 = rng.gen();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            let scale = beta * rmax / total;
            return RateRequest::new(raw.into_iter().map(|r| r * scale).collect());
        }
    }
}

/// Multi-objective request: the max-rate request with probability
/// `max_rate_fraction`, otherwise [`sample_rate_requirements`].
pub fn sample_training_request<R: Rng + ?Sized>(
    rmax: f64,
    n_users: usize,
    max_rate_fraction: f64,
    rng: &mut R,
) -> Result<RateRequest> {
    if max_rate_fraction > 0.0 && rng.gen::<f64>() < max_rate_fraction {
        Ok(max_rate_request(n_users))
    } else {
        sample_rate_requirements(rmax, n_users, rng)
    }
}

/// `(R_e - R_e^max)^2` clamped to `[1, T]`.
pub fn clamp_weights(rates: &[f64], rmax: &[f64], clamp_threshold: f64) -> Vec<f64> {
    rates
        .iter()
        .zip(rmax)
        .map(|(r, m)| ((r - m) * (r - m)).clamp(1.0, clamp_threshold))
        .collect()
}

pub fn normalize_weights(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteWeights {
    pub alpha: Vec<f64>,
    pub rmax: Vec<f64>,
    /// Smoothed recent sum-rate per environment.
    pub last_rates: Vec<f64>,
    pub clamp_threshold: f64,
    pub decay: f64,
}

impl SiteWeights {
    pub fn new(rmax: Vec<f64>, clamp_threshold: f64, decay: f64) -> Result<Self> {
        if rmax.is_empty() {
            return Err(Error::invalid("at least one environment is required"));
        }
        if clamp_threshold < 1.0 {
            return Err(Error::invalid("clamp_threshold must be >= 1"));
        }
        let k = rmax.len();
        let mut w = Self {
            alpha: vec![1.0 / k as f64; k],
            last_rates: vec![0.0; k],
            rmax,
            clamp_threshold,
            decay,
        };
        w.refresh();
        Ok(w)
    }

    /// Recomputes `alpha` from the current rates and returns the clamped,
    /// not yet normalized weights.
    pub fn refresh(&mut self) -> Vec<f64> {
        let clamped = clamp_weights(&self.last_rates, &self.rmax, self.clamp_threshold);
        self.alpha = normalize_weights(&clamped);
        clamped
    }

    pub fn observe(&mut self, rates: &[f64]) {
        for (avg, r) in self.last_rates.iter_mut().zip(rates) {
            *avg = self.decay * *avg + (1.0 - self.decay) * r;
        }
    }
}

/// Shared extractor and one head per training environment.
#[derive(Debug, Clone, PartialEq)]
pub struct FoundationModel {
    pub extractor: FeatureExtractor,
    pub heads: BTreeMap<String, OutputHead>,
}

impl FoundationModel {
    pub fn new<R: Rng + ?Sized>(
        hyper: ModelHyper,
        env_ids: &[String],
        rng: &mut R,
    ) -> Result<Self> {
        let extractor = FeatureExtractor::new(hyper, rng)?;
        let heads = env_ids
            .iter()
            .map(|id| (id.clone(), OutputHead::new(&extractor.hyper, rng)))
            .collect();
        Ok(Self { extractor, heads })
    }

    pub fn hyper(&self) -> &ModelHyper {
        &self.extractor.hyper
    }

    pub fn head(&self, env_id: &str) -> Result<&OutputHead> {
        self.heads
            .get(env_id)
            .ok_or_else(|| Error::invalid(format!("no output head for environment {env_id:?}")))
    }
}

/// A training environment with its WMMSE sum-rate anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEnv {
    pub dataset: EnvironmentDataset,
    pub rmax: f64,
}

impl TrainEnv {
    pub fn id(&self) -> &str {
        &self.dataset.spec.env_id
    }

    /// Estimates `R_e^max` for every dataset.
    pub fn prepare(
        datasets: Vec<EnvironmentDataset>,
        cfg: &SystemConfig,
        n_eval: usize,
        seed: u64,
    ) -> Result<Vec<Self>> {
        datasets
            .into_iter()
            .map(|dataset| {
                let rmax = wmmse_rate_bound(&dataset, cfg, n_eval, seed, WmmseOptions::default())?;
                Ok(Self { dataset, rmax })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub channels: Vec<ChannelMatrix>,
    pub requests: Vec<RateRequest>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Draws `n` CSIs from `dataset`, each paired with `request(rng)`.
    pub fn sample<R: Rng>(
        dataset: &EnvironmentDataset,
        cfg: &SystemConfig,
        n: usize,
        rng: &mut R,
        mut request: impl FnMut(&mut R) -> Result<RateRequest>,
    ) -> Result<Self> {
        let mut channels = Vec::with_capacity(n);
        let mut requests = Vec::with_capacity(n);
        for _ in 0..n {
            channels.push(build_multiuser_csi(dataset, cfg, rng)?);
            requests.push(request(rng)?);
        }
        Ok(Self { channels, requests })
    }
}

/// Gradient of one environment's batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTerms {
    pub extractor: Vec<Tensor>,
    pub head: Vec<Tensor>,
    pub stats: LossStats,
}

fn zeros_like(ts: &[&Tensor]) -> Vec<Tensor> {
    ts.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
}

/// Mean batch loss and its gradient for extractor and head, accumulated over
/// graphs of at most `chunk_size` samples.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient(
    extractor: &FeatureExtractor,
    head: &OutputHead,
    batch: &Batch,
    objective: Objective,
    cfg: &SystemConfig,
    mode: Mode,
    chunk_size: usize,
    dropout_seed: u64,
) -> Result<GradientTerms> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut ext_grad = zeros_like(&extractor.tensors());
    let mut head_grad = zeros_like(&head.tensors());
    let mut stats = LossStats::default();
    for (hs, rs) in batch
        .channels
        .chunks(chunk_size)
        .zip(batch.requests.chunks(chunk_size))
    {
        let mut tape = Tape::new();
        let ep = extractor.bind(&mut tape);
        let hp = head.bind(&mut tape);
        let feats = extractor_graph(&mut tape, &ep, extractor, hs, rs, mode, &mut rng)?;
        let out = head_graph(&mut tape, &hp, &extractor.hyper, feats, rs, cfg, None)?;
        let (loss, s) = objective_graph(&mut tape, &out, hs, rs, objective, cfg, batch.len())?;
        stats.merge(&s);
        let mut g = tape.backward(loss)?;
        for (acc, v) in ext_grad.iter_mut().zip(&ep) {
            acc.add_assign(&g.take(*v));
        }
        for (acc, v) in head_grad.iter_mut().zip(&hp) {
            acc.add_assign(&g.take(*v));
        }
    }
    for (i, t) in ext_grad.iter().chain(&head_grad).enumerate() {
        if !t.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter tensor {i}"
            )));
        }
    }
    Ok(GradientTerms {
        extractor: ext_grad,
        head: head_grad,
        stats,
    })
}

/// `Σ_e w_e g_e` over gradient lists of identical shapes.
pub fn combine_gradients(terms: &[&[Tensor]], weights: &[f64]) -> Vec<Tensor> {
    assert_eq!(terms.len(), weights.len(), "one weight per gradient");
    assert!(!terms.is_empty(), "nothing to combine");
    let mut out: Vec<Tensor> = terms[0]
        .iter()
        .map(|t| Tensor::zeros(t.rows, t.cols))
        .collect();
    for (g, &w) in terms.iter().zip(weights) {
        for (acc, t) in out.iter_mut().zip(g.iter()) {
            acc.add_scaled(t, w);
        }
    }
    out
}

/// Frozen-extractor token features with the inputs they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `(n * (N_U+1)) x D`.
    pub features: Tensor,
    pub channels: Vec<ChannelMatrix>,
    pub requests: Vec<RateRequest>,
    seq_len: usize,
}

impl FeatureSet {
    pub fn build(
        extractor: &FeatureExtractor,
        channels: Vec<ChannelMatrix>,
        requests: Vec<RateRequest>,
    ) -> Result<Self> {
        let features = token_features(extractor, &channels, &requests)?;
        Ok(Self {
            features,
            channels,
            requests,
            seq_len: extractor.hyper.seq_len(),
        })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn concat(sets: &[FeatureSet]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::invalid("no feature sets to concatenate"))?;
        let mut data = Vec::new();
        let mut channels = Vec::new();
        let mut requests = Vec::new();
        for s in sets {
            if s.seq_len != first.seq_len || s.features.cols != first.features.cols {
                return Err(Error::invalid("feature sets come from different models"));
            }
            data.extend_from_slice(&s.features.data);
            channels.extend(s.channels.iter().cloned());
            requests.extend(s.requests.iter().cloned());
        }
        let cols = first.features.cols;
        Ok(Self {
            features: Tensor::from_vec(data.len() / cols, cols, data),
            channels,
            requests,
            seq_len: first.seq_len,
        })
    }

    fn select(&self, indices: &[usize]) -> (Tensor, Vec<ChannelMatrix>, Vec<RateRequest>) {
        let block = self.seq_len * self.features.cols;
        let mut data = Vec::with_capacity(indices.len() * block);
        for &i in indices {
            data.extend_from_slice(&self.features.data[i * block..(i + 1) * block]);
        }
        (
            Tensor::from_vec(indices.len() * self.seq_len, self.features.cols, data),
            indices.iter().map(|&i| self.channels[i].clone()).collect(),
            indices.iter().map(|&i| self.requests[i].clone()).collect(),
        )
    }
}

/// Head-only gradient on the samples `indices` of a feature set.
pub fn head_gradient(
    head: &OutputHead,
    hyper: &ModelHyper,
    set: &FeatureSet,
    indices: &[usize],
    objective: Objective,
    cfg: &SystemConfig,
) -> Result<(Vec<Tensor>, LossStats)> {
    let (feats, channels, requests) = set.select(indices);
    let mut tape = Tape::new();
    let hp = head.bind(&mut tape);
    let f = tape.constant(feats);
    let out = head_graph(&mut tape, &hp, hyper, f, &requests, cfg, None)?;
    let (loss, stats) = objective_graph(
        &mut tape,
        &out,
        &channels,
        &requests,
        objective,
        cfg,
        indices.len(),
    )?;
    let mut g = tape.backward(loss)?;
    Ok((hp.iter().map(|v| g.take(*v)).collect(), stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 1000,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

/// Trains `head` on frozen features. With `sampling_weights`, every batch is
/// drawn with replacement proportionally to them; otherwise each epoch is a
/// shuffled pass. Returns per-epoch statistics.
pub fn train_head(
    head: &mut OutputHead,
    hyper: &ModelHyper,
    set: &FeatureSet,
    sampling_weights: Option<&[f64]>,
    objective: Objective,
    cfg: &SystemConfig,
    opts: &HeadTrainConfig,
) -> Result<Vec<LossStats>> {
    if set.is_empty() {
        return Err(Error::invalid("no samples to train the head on"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let sampler = match sampling_weights {
        Some(w) => {
            if w.len() != set.len() {
                return Err(Error::DimensionMismatch {
                    context: "sampling weights",
                    expected: set.len(),
                    got: w.len(),
                });
            }
            Some(
                WeightedIndex::new(w)
                    .map_err(|e| Error::invalid(format!("sampling weights: {e}")))?,
            )
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Adam::new(opts.learning_rate, &head.tensors());
    let n_batches = set.len().div_ceil(opts.batch_size);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..set.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut stats = LossStats::default();
        for b in 0..n_batches {
            let indices: Vec<usize> = match &sampler {
                Some(dist) => (0..opts.batch_size)
                    .map(|_| dist.sample(&mut rng))
                    .collect(),
                None => {
                    order[b * opts.batch_size..((b + 1) * opts.batch_size).min(set.len())].to_vec()
                }
            };
            let (grad, s) = head_gradient(head, hyper, set, &indices, objective, cfg)?;
            opt.step(head.tensors_mut(), &grad);
            stats.merge(&s);
        }
        history.push(stats);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMetrics {
    pub env_id: String,
    pub sum_rate: f64,
    pub loss: f64,
    pub l_ar: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub envs: Vec<EnvMetrics>,
    /// Normalized site weights of the last batch (uniform `1/k` in phase 2).
    pub alpha: Vec<f64>,
    /// Clamped weights before normalization (phase 1 only).
    pub alpha_clamped: Vec<f64>,
    pub loss: f64,
}

impl EpochMetrics {
    pub fn mean_sum_rate(&self) -> f64 {
        self.envs.iter().map(|e| e.sum_rate).sum::<f64>() / self.envs.len().max(1) as f64
    }

    pub fn write_json_line<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

/// Runs both phases over a fixed list of environments.
pub struct Trainer {
    pub model: FoundationModel,
    pub weights: SiteWeights,
    cfg: TrainConfig,
    sys: SystemConfig,
    ext_opt: Adam,
    head_opts: BTreeMap<String, Adam>,
    rng: ChaCha8Rng,
    epochs_done: usize,
}

impl Trainer {
    /// Heads missing from `model` are created for every environment.
    pub fn new(
        mut model: FoundationModel,
        envs: &[TrainEnv],
        sys: &SystemConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        sys.validate()?;
        model.extractor.hyper.check_system(sys)?;
        if envs.is_empty() {
            return Err(Error::invalid(
                "at least one training environment is required",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for env in envs {
            if !model.heads.contains_key(env.id()) {
                let head = OutputHead::new(&model.extractor.hyper, &mut rng);
                model.heads.insert(env.id().to_owned(), head);
            }
        }
        let ext_opt = Adam::new(cfg.learning_rate, &model.extractor.tensors());
        let head_opts = model
            .heads
            .iter()
            .map(|(id, h)| (id.clone(), Adam::new(cfg.learning_rate, &h.tensors())))
            .collect();
        let weights = SiteWeights::new(
            envs.iter().map(|e| e.rmax).collect(),
            cfg.clamp_threshold,
            cfg.rate_ema_decay,
        )?;
        Ok(Self {
            model,
            weights,
            cfg: cfg.clone(),
            sys: sys.clone(),
            ext_opt,
            head_opts,
            rng,
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_model(self) -> FoundationModel {
        self.model
    }

    fn check_envs(&self, envs: &[TrainEnv]) -> Result<()> {
        if envs.len() != self.weights.rmax.len() {
            return Err(Error::DimensionMismatch {
                context: "training environments",
                expected: self.weights.rmax.len(),
                got: envs.len(),
            });
        }
        Ok(())
    }

    /// Gradients of every environment for one batch.
    fn env_gradients(
        &mut self,
        envs: &[TrainEnv],
        objective: Objective,
    ) -> Result<Vec<GradientTerms>> {
        let nu = self.sys.n_users;
        let frac = self.cfg.max_rate_fraction;
        let mut out = Vec::with_capacity(envs.len());
        for env in envs {
            let batch = match objective {
                Objective::SumRate => Batch::sample(
                    &env.dataset,
                    &self.sys,
                    self.cfg.batch_size,
                    &mut self.rng,
                    |_| Ok(max_rate_request(nu)),
                )?,
                Objective::RateEnergy { .. } => {
                    let rmax = env.rmax;
                    Batch::sample(
                        &env.dataset,
                        &self.sys,
                        self.cfg.batch_size,
                        &mut self.rng,
                        |r| sample_training_request(rmax, nu, frac, r),
                    )?
                }
            };
            let seed = self.rng.gen();
            let head = self.model.head(env.id())?;
            let terms = batch_gradient(
                &self.model.extractor,
                head,
                &batch,
                objective,
                &self.sys,
                Mode::Train,
                self.cfg.chunk_size,
                seed,
            )
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "environment {} epoch {}: {msg}",
                    env.id(),
                    self.epochs_done + 1
                )),
                other => other,
            })?;
            out.push(terms);
        }
        Ok(out)
    }

    fn apply(&mut self, envs: &[TrainEnv], ext_grad: &[Tensor], terms: &[GradientTerms]) {
        self.ext_opt
            .step(self.model.extractor.tensors_mut(), ext_grad);
        for (env, t) in envs.iter().zip(terms) {
            let head = self
                .model
                .heads
                .get_mut(env.id())
                .expect("head created in new");
            self.head_opts
                .get_mut(env.id())
                .expect("optimizer created in new")
                .step(head.tensors_mut(), &t.head);
        }
    }

    fn metrics(envs: &[TrainEnv], totals: &[LossStats], batches: usize) -> Vec<EnvMetrics> {
        envs.iter()
            .zip(totals)
            .map(|(env, s)| EnvMetrics {
                env_id: env.id().to_owned(),
                sum_rate: s.mean_sum_rate(),
                loss: s.loss / batches as f64,
                l_ar: s.mean_l_ar(),
                energy: s.mean_energy(),
            })
            .collect()
    }

    /// Site-aware weighted sum-rate ascent.
    pub fn pretrain_epoch(&mut self, envs: &[TrainEnv]) -> Result<EpochMetrics> {
        self.check_envs(envs)?;
        let mut totals = vec![LossStats::default(); envs.len()];
        let mut clamped = Vec::new();
        for _ in 0..self.cfg.batches_per_epoch {
            clamped = self.weights.refresh();
            let alpha = self.weights.alpha.clone();
            let terms = self.env_gradients(envs, Objective::SumRate)?;
            let grads: Vec<&[Tensor]> = terms.iter().map(|t| t.extractor.as_slice()).collect();
            let ext_grad = combine_gradients(&grads, &alpha);
            self.apply(envs, &ext_grad, &terms);
            let rates: Vec<f64> = terms.iter().map(|t| t.stats.mean_sum_rate()).collect();
            self.weights.observe(&rates);
            for (acc, t) in totals.iter_mut().zip(&terms) {
                acc.merge(&t.stats);
            }
        }
        self.epochs_done += 1;
        let envs_m = Self::metrics(envs, &totals, self.cfg.batches_per_epoch);
        Ok(EpochMetrics {
            phase: "pretrain".into(),
            epoch: self.epochs_done,
            loss: envs_m
                .iter()
                .zip(&self.weights.alpha)
                .map(|(e, a)| a * e.loss)
                .sum(),
            envs: envs_m,
            alpha: self.weights.alpha.clone(),
            alpha_clamped: clamped,
        })
    }

    /// Rate-energy training with the extractor gradient averaged over environments.
    pub fn multiobjective_epoch(&mut self, envs: &[TrainEnv]) -> Result<EpochMetrics> {
        self.check_envs(envs)?;
        let k = envs.len();
        let uniform = vec![1.0 / k as f64; k];
        let objective = Objective::RateEnergy { mu: self.cfg.mu };
        let mut totals = vec![LossStats::default(); k];
        for _ in 0..self.cfg.batches_per_epoch {
            let terms = self.env_gradients(envs, objective)?;
            let grads: Vec<&[Tensor]> = terms.iter().map(|t| t.extractor.as_slice()).collect();
            let ext_grad = combine_gradients(&grads, &uniform);
            self.apply(envs, &ext_grad, &terms);
            for (acc, t) in totals.iter_mut().zip(&terms) {
                acc.merge(&t.stats);
            }
        }
        self.epochs_done += 1;
        let envs_m = Self::metrics(envs, &totals, self.cfg.batches_per_epoch);
        Ok(EpochMetrics {
            phase: "train".into(),
            epoch: self.epochs_done,
            loss: envs_m.iter().map(|e| e.loss).sum::<f64>() / k as f64,
            envs: envs_m,
            alpha: uniform,
            alpha_clamped: Vec::new(),
        })
    }
}

/// Builds a feature set whose requests follow the multi-objective mix.
pub fn request_feature_set<R: Rng>(
    extractor: &FeatureExtractor,
    dataset: &EnvironmentDataset,
    rmax: f64,
    cfg: &SystemConfig,
    n: usize,
    max_rate_fraction: f64,
    rng: &mut R,
) -> Result<FeatureSet> {
    let nu = cfg.n_users;
    let batch = Batch::sample(dataset, cfg, n, rng, |r| {
        sample_training_request(rmax, nu, max_rate_fraction, r)
    })?;
    FeatureSet::build(extractor, batch.channels, batch.requests)
}

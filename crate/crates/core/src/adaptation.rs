//! Deployment to a new site: environment fingerprints, similarity ranking and
//! the zero-shot, few-shot and full-dataset head protocols.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{wmmse_rate_bound, WmmseOptions};
use crate::channelgen::{sample_csis, EnvironmentDataset};
use crate::error::{Error, Result};
use crate::nn::{pooled_features, FeatureExtractor, OutputHead, RateRequest};
use crate::phy::{ChannelMatrix, SystemConfig};
use crate::training::{
    request_feature_set, train_head, FeatureSet, HeadTrainConfig, Objective, TrainEnv,
};

/// Mean pooled extractor output over a set of CSIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    psi: Vec<f64>,
    n_samples: usize,
}

impl FeatureVector {
    pub fn new(psi: Vec<f64>, n_samples: usize) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::invalid("feature vector needs at least one sample"));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature vector is not finite"));
        }
        Ok(Self { psi, n_samples })
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn norm(&self) -> f64 {
        self.psi.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.psi.iter().map(|v| v * factor).collect(),
            self.n_samples,
        )
    }
}

/// Eval-mode fingerprint of `samples`, fed with an all-zeros request.
pub fn feature_vector(
    extractor: &FeatureExtractor,
    samples: &[ChannelMatrix],
) -> Result<FeatureVector> {
    if samples.is_empty() {
        return Err(Error::invalid("feature vector of an empty sample set"));
    }
    let zeros: Vec<RateRequest> = samples
        .iter()
        .map(|_| RateRequest::zeros(extractor.hyper.n_users))
        .collect();
    let pooled = pooled_features(extractor, samples, &zeros)?;
    let mut psi = vec![0.0; pooled.cols];
    for row in pooled.data.chunks(pooled.cols) {
        for (acc, v) in psi.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = samples.len() as f64;
    psi.iter_mut().for_each(|v| *v /= n);
    FeatureVector::new(psi, samples.len())
}

pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.psi.len() != b.psi.len() {
        return Err(Error::DimensionMismatch {
            context: "feature vectors",
            expected: a.psi.len(),
            got: b.psi.len(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.psi.iter().zip(&b.psi).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Fingerprint of one training environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentProfile {
    pub env_id: String,
    pub features: FeatureVector,
}

pub fn profile_environment(
    extractor: &FeatureExtractor,
    dataset: &EnvironmentDataset,
    cfg: &SystemConfig,
    n_samples: usize,
    seed: u64,
) -> Result<EnvironmentProfile> {
    let csis = sample_csis(dataset, cfg, n_samples, seed)?;
    Ok(EnvironmentProfile {
        env_id: dataset.spec.env_id.clone(),
        features: feature_vector(extractor, &csis)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub env_id: String,
    pub score: f64,
}

/// Every profile scored against `target`, most similar first, ties by id.
pub fn rank_environments(
    profiles: &[EnvironmentProfile],
    target: &FeatureVector,
) -> Result<Vec<Similarity>> {
    let mut ranked = profiles
        .iter()
        .map(|p| {
            Ok(Similarity {
                env_id: p.env_id.clone(),
                score: cosine_similarity(&p.features, target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.env_id.cmp(&b.env_id),
        o => o,
    });
    Ok(ranked)
}

/// The `n_select` training environments closest to the deployment samples.
pub fn select_similar_environments(
    extractor: &FeatureExtractor,
    profiles: &[EnvironmentProfile],
    deploy_samples: &[ChannelMatrix],
    n_select: usize,
) -> Result<Vec<Similarity>> {
    if n_select > profiles.len() {
        return Err(Error::invalid(format!(
            "cannot select {n_select} of {} environments",
            profiles.len()
        )));
    }
    let target = feature_vector(extractor, deploy_samples)?;
    let mut ranked = rank_environments(profiles, &target)?;
    ranked.truncate(n_select);
    Ok(ranked)
}

/// JSON object mapping env_id to similarity.
pub fn write_similarity_report<W: Write>(ranking: &[Similarity], out: W) -> Result<()> {
    let map: BTreeMap<&str, f64> = ranking
        .iter()
        .map(|s| (s.env_id.as_str(), s.score))
        .collect();
    serde_json::to_writer_pretty(out, &map)?;
    Ok(())
}

pub fn read_similarity_report(text: &str) -> Result<BTreeMap<String, f64>> {
    Ok(serde_json::from_str(text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployMode {
    ZeroShot,
    FewShot,
    Full,
}

impl std::str::FromStr for DeployMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_shot" | "zero-shot" => Ok(Self::ZeroShot),
            "few_shot" | "few-shot" => Ok(Self::FewShot),
            "full" => Ok(Self::Full),
            other => Err(Error::invalid(format!("unknown deployment mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Environments used to augment few-shot training.
    pub n_select: usize,
    /// Deployment CSIs used for the similarity ranking.
    pub similarity_samples: usize,
    /// CSIs per training environment in its fingerprint.
    pub profile_samples: usize,
    /// CSI and request pairs cached per environment for head training. A
    /// full-dataset head draws this many local pairs per training environment.
    pub head_samples: usize,
    /// CSI and request pairs built from the few local channels.
    pub local_samples: usize,
    /// Sampling weight of a local pair relative to an augmented one.
    pub local_weight: f64,
    /// Head epochs for the default and full-dataset heads.
    pub epochs: usize,
    /// Share of `epochs` spent on a few-shot head.
    pub few_shot_fraction: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mu: f64,
    pub max_rate_fraction: f64,
    pub rmax_samples: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            n_select: 5,
            similarity_samples: 10,
            profile_samples: 200,
            head_samples: 2000,
            local_samples: 200,
            local_weight: 10.0,
            epochs: 10,
            few_shot_fraction: 0.2,
            batch_size: 1000,
            learning_rate: 1e-4,
            mu: 0.99,
            max_rate_fraction: 0.1,
            rmax_samples: 200,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("similarity_samples", self.similarity_samples),
            ("profile_samples", self.profile_samples),
            ("head_samples", self.head_samples),
            ("local_samples", self.local_samples),
            ("batch_size", self.batch_size),
            ("rmax_samples", self.rmax_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("adapt.{name} must be >= 1")));
            }
        }
        if !(self.local_weight > 0.0 && self.local_weight.is_finite()) {
            return Err(Error::invalid("adapt.local_weight must be positive"));
        }
        if !(0.0..=1.0).contains(&self.few_shot_fraction) {
            return Err(Error::invalid("adapt.few_shot_fraction must lie in [0, 1]"));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::invalid("adapt.mu must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.max_rate_fraction) {
            return Err(Error::invalid("adapt.max_rate_fraction must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("adapt.learning_rate must be positive"));
        }
        Ok(())
    }

    pub fn few_shot_epochs(&self) -> usize {
        ((self.epochs as f64 * self.few_shot_fraction).ceil() as usize).max(1)
    }

    fn head_opts(&self, epochs: usize, seed: u64) -> HeadTrainConfig {
        HeadTrainConfig {
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
        }
    }

    fn objective(&self) -> Objective {
        Objective::RateEnergy { mu: self.mu }
    }
}

/// Head factory for new sites. The extractor is only ever borrowed
/// immutably, so deployment cannot change it.
pub struct Deployer<'a> {
    extractor: &'a FeatureExtractor,
    envs: &'a [TrainEnv],
    sys: SystemConfig,
    cfg: AdaptConfig,
    /// Initial weights for every head this deployer trains.
    init: OutputHead,
    profiles: OnceLock<Vec<EnvironmentProfile>>,
    feature_sets: OnceLock<Vec<FeatureSet>>,
    default_head: OnceLock<OutputHead>,
}

impl<'a> Deployer<'a> {
    pub fn new(
        extractor: &'a FeatureExtractor,
        init: OutputHead,
        envs: &'a [TrainEnv],
        sys: &SystemConfig,
        cfg: AdaptConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        extractor.hyper.check_system(sys)?;
        init.validate(&extractor.hyper)?;
        if envs.is_empty() {
            return Err(Error::invalid(
                "deployment needs at least one training environment",
            ));
        }
        Ok(Self {
            extractor,
            envs,
            sys: sys.clone(),
            cfg,
            init,
            profiles: OnceLock::new(),
            feature_sets: OnceLock::new(),
            default_head: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    /// Seeds differ per environment but not per call.
    fn env_seed(&self, slot: u64) -> u64 {
        self.cfg.seed ^ slot.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    pub fn profiles(&self) -> Result<&[EnvironmentProfile]> {
        if let Some(p) = self.profiles.get() {
            return Ok(p);
        }
        let built = self
            .envs
            .iter()
            .enumerate()
            .map(|(i, e)| {
                profile_environment(
                    self.extractor,
                    &e.dataset,
                    &self.sys,
                    self.cfg.profile_samples,
                    self.env_seed(i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.profiles.get_or_init(|| built))
    }

    fn feature_sets(&self) -> Result<&[FeatureSet]> {
        if let Some(s) = self.feature_sets.get() {
            return Ok(s);
        }
        let built = self
            .envs
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.env_seed(1000 + i as u64));
                request_feature_set(
                    self.extractor,
                    &e.dataset,
                    e.rmax,
                    &self.sys,
                    self.cfg.head_samples,
                    self.cfg.max_rate_fraction,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.feature_sets.get_or_init(|| built))
    }

    /// Head trained once on every training environment pooled; later calls
    /// return the cached head.
    pub fn default_head(&self) -> Result<&OutputHead> {
        if let Some(h) = self.default_head.get() {
            return Ok(h);
        }
        let pooled = FeatureSet::concat(self.feature_sets()?)?;
        let mut head = self.init.clone();
        let opts = self.cfg.head_opts(self.cfg.epochs, self.env_seed(2000));
        train_head(
            &mut head,
            &self.extractor.hyper,
            &pooled,
            None,
            self.cfg.objective(),
            &self.sys,
            &opts,
        )?;
        Ok(self.default_head.get_or_init(|| head))
    }

    /// Similarity of every training environment to the deployment site,
    /// computed from the first `similarity_samples` local CSIs.
    pub fn rank(&self, local: &EnvironmentDataset) -> Result<Vec<Similarity>> {
        let csis = self.local_csis(local, self.cfg.similarity_samples, 3000)?;
        let target = feature_vector(self.extractor, &csis)?;
        rank_environments(self.profiles()?, &target)
    }

    fn local_csis(
        &self,
        local: &EnvironmentDataset,
        n: usize,
        slot: u64,
    ) -> Result<Vec<ChannelMatrix>> {
        if local.is_empty() {
            return Err(Error::invalid(format!(
                "deployment site {} has no local samples",
                local.spec.env_id
            )));
        }
        sample_csis(local, &self.sys, n, self.env_seed(slot))
    }

    fn local_rmax(&self, local: &EnvironmentDataset) -> Result<f64> {
        wmmse_rate_bound(
            local,
            &self.sys,
            self.cfg.rmax_samples,
            self.env_seed(4000),
            WmmseOptions::default(),
        )
    }

    pub fn deploy(&self, mode: DeployMode, local: &EnvironmentDataset) -> Result<OutputHead> {
        match mode {
            DeployMode::ZeroShot => self.default_head().cloned(),
            DeployMode::FewShot => self.few_shot(local),
            DeployMode::Full => self.full(local),
        }
    }

    /// Fresh head on the top `n_select` environments plus the upweighted
    /// local samples.
    pub fn few_shot(&self, local: &EnvironmentDataset) -> Result<OutputHead> {
        if local.is_empty() {
            return Err(Error::invalid(
                "few-shot deployment needs local samples; use zero_shot without any",
            ));
        }
        let ranking = self.rank(local)?;
        let n = self.cfg.n_select.min(self.envs.len());
        let sets = self.feature_sets()?;
        let mut parts = Vec::with_capacity(n + 1);
        let mut weights = Vec::new();
        for s in &ranking[..n] {
            let i = self
                .envs
                .iter()
                .position(|e| e.id() == s.env_id)
                .expect("ranking covers the training environments");
            weights.extend(std::iter::repeat_n(1.0, sets[i].len()));
            parts.push(sets[i].clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.env_seed(5000));
        let rmax = self.local_rmax(local)?;
        let own = request_feature_set(
            self.extractor,
            local,
            rmax,
            &self.sys,
            self.cfg.local_samples,
            self.cfg.max_rate_fraction,
            &mut rng,
        )?;
        weights.extend(std::iter::repeat_n(self.cfg.local_weight, own.len()));
        parts.push(own);
        let set = FeatureSet::concat(&parts)?;
        let mut head = self.init.clone();
        let opts = self
            .cfg
            .head_opts(self.cfg.few_shot_epochs(), self.env_seed(6000));
        train_head(
            &mut head,
            &self.extractor.hyper,
            &set,
            Some(&weights),
            self.cfg.objective(),
            &self.sys,
            &opts,
        )?;
        Ok(head)
    }

    /// Head trained on local data only, starting from the deployment init.
    pub fn full(&self, local: &EnvironmentDataset) -> Result<OutputHead> {
        if local.is_empty() {
            return Err(Error::invalid(format!(
                "deployment site {} has no local samples",
                local.spec.env_id
            )));
        }
        let rmax = self.local_rmax(local)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.env_seed(7000));
        // As many pairs as the pooled default-head set, drawn from local CSIs.
        let set = request_feature_set(
            self.extractor,
            local,
            rmax,
            &self.sys,
            self.cfg.head_samples * self.envs.len(),
            self.cfg.max_rate_fraction,
            &mut rng,
        )?;
        let mut head = self.init.clone();
        let opts = self.cfg.head_opts(self.cfg.epochs, self.env_seed(8000));
        train_head(
            &mut head,
            &self.extractor.hyper,
            &set,
            None,
            self.cfg.objective(),
            &self.sys,
            &opts,
        )?;
        Ok(head)
    }
}

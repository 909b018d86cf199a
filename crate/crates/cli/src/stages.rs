//! One function per subcommand. Every stage reads its prerequisites from the
//! configured directories, writes its artifacts and finishes with a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mimo_fm::adaptation::{write_similarity_report, DeployMode, Deployer, Similarity};
use mimo_fm::channelgen::{
    generate_dataset, read_dataset, write_dataset, EnvironmentDataset, EnvironmentSpec,
};
use mimo_fm::evalbench::flops::{forward_flop_audit, Algorithm, FlopReport, LayerFlops};
use mimo_fm::evalbench::{
    cross_site_matrix, max_sum_rate_eval, report_file_name, summarize_sweep, tradeoff_sweep,
    write_points_csv, MaxRateReport, ModelPrecoder, Precoder, SweepSummary,
};
use mimo_fm::nn::checkpoint::{load_extractor, load_heads, save_extractor, save_heads};
use mimo_fm::nn::{FeatureExtractor, OutputHead, Parameters};
use mimo_fm::training::{EpochMetrics, FoundationModel, TrainEnv, Trainer};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{write_file, Manifest};

pub const EXTRACTOR_FILE: &str = "extractor.mmfm";
pub const HEADS_FILE: &str = "heads.mmfh";
pub const BOUNDS_FILE: &str = "bounds.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Key of the pooled default head in the zero-shot heads file.
pub const DEFAULT_HEAD: &str = "default";

/// Where every stage keeps its files.
#[derive(Debug, Clone)]
pub struct Layout {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            data: cfg.paths.data_dir.clone(),
            checkpoints: cfg.paths.checkpoint_dir.clone(),
            reports: cfg.report_dir(),
        }
    }

    pub fn dataset(&self, env_id: &str) -> PathBuf {
        self.data.join(format!("{env_id}.csif"))
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.checkpoints.join(stage)
    }

    pub fn adapted_heads(&self, mode: DeployMode) -> PathBuf {
        self.stage_dir("adapt")
            .join(format!("heads-{}.mmfh", mode_name(mode)))
    }

    pub fn report(&self, cfg: &RunConfig, stem: &str, ext: &str) -> PathBuf {
        self.reports
            .join(report_file_name(stem, &cfg.hash(), cfg.eval.seed, ext))
    }
}

pub fn mode_name(mode: DeployMode) -> &'static str {
    match mode {
        DeployMode::ZeroShot => "zero_shot",
        DeployMode::FewShot => "few_shot",
        DeployMode::Full => "full",
    }
}

const MODES: [DeployMode; 3] = [DeployMode::ZeroShot, DeployMode::FewShot, DeployMode::Full];

fn log(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn require(path: &Path, stage: &'static str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Prerequisite {
            stage,
            path: path.to_path_buf(),
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

/// Reads one environment's file and splits it into fitting and held-out parts.
fn load_split(
    layout: &Layout,
    spec: &EnvironmentSpec,
    cfg: &RunConfig,
    manifest: &mut Manifest,
) -> Result<(EnvironmentDataset, EnvironmentDataset), CliError> {
    let path = layout.dataset(&spec.env_id);
    require(&path, "gen-data")?;
    manifest.input(&path)?;
    let ds = read_dataset(&path)?.with_spec(spec.clone());
    if ds.n_tx != cfg.system.n_tx {
        return Err(CliError::Config(format!(
            "{} holds {}-antenna channels but system.n_tx = {}; rerun gen-data",
            path.display(),
            ds.n_tx,
            cfg.system.n_tx
        )));
    }
    Ok(ds.split(cfg.eval.holdout_fraction)?)
}

/// gen-data: one CSIF file per configured environment.
pub fn gen_data(cfg: &RunConfig, quiet: bool) -> Result<Manifest, CliError> {
    let layout = Layout::new(cfg);
    let mut manifest = Manifest::new("gen-data", cfg);
    create_dir(&layout.data)?;
    let mut sizes = BTreeMap::new();
    for spec in &cfg.channel {
        let ds = generate_dataset(spec, &cfg.system, cfg.data.samples)?;
        let path = layout.dataset(&spec.env_id);
        write_dataset(&ds, &path)?;
        log(
            quiet,
            format!("wrote {} ({} channels)", path.display(), ds.len()),
        );
        manifest.output(&path)?;
        sizes.insert(spec.env_id.clone(), ds.len());
    }
    manifest.metrics = serde_json::json!({ "samples": sizes });
    manifest.write(&layout.data.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn training_datasets(
    layout: &Layout,
    cfg: &RunConfig,
    manifest: &mut Manifest,
) -> Result<Vec<(EnvironmentDataset, EnvironmentDataset)>, CliError> {
    let specs: Vec<_> = cfg.training_specs().cloned().collect();
    if specs.is_empty() {
        return Err(CliError::Config(
            "no training environments configured".into(),
        ));
    }
    specs
        .iter()
        .map(|s| load_split(layout, s, cfg, manifest))
        .collect()
}

fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for m in history {
        m.write_json_line(&mut buf)?;
    }
    write_file(path, &buf)
}

fn save_model(
    dir: &Path,
    model: &FoundationModel,
    manifest: &mut Manifest,
) -> Result<(), CliError> {
    create_dir(dir)?;
    let ext = dir.join(EXTRACTOR_FILE);
    let heads = dir.join(HEADS_FILE);
    save_extractor(&model.extractor, &ext)?;
    save_heads(model.hyper(), &model.heads, &heads)?;
    manifest.output(&ext)?;
    manifest.output(&heads)?;
    Ok(())
}

fn load_model(
    dir: &Path,
    stage: &'static str,
    manifest: &mut Manifest,
) -> Result<FoundationModel, CliError> {
    let ext_path = dir.join(EXTRACTOR_FILE);
    let heads_path = dir.join(HEADS_FILE);
    require(&ext_path, stage)?;
    require(&heads_path, stage)?;
    manifest.input(&ext_path)?;
    manifest.input(&heads_path)?;
    let extractor = load_extractor(&ext_path)?;
    let heads = load_heads(&heads_path, &extractor.hyper)?;
    Ok(FoundationModel { extractor, heads })
}

fn check_model(model: &FoundationModel, cfg: &RunConfig) -> Result<(), CliError> {
    if model.hyper() != &cfg.model {
        return Err(CliError::Config(
            "checkpoint was trained with different model settings; rerun pretrain".into(),
        ));
    }
    Ok(())
}

/// Training environments with the rate bounds recorded by pretrain.
fn train_envs(
    layout: &Layout,
    cfg: &RunConfig,
    manifest: &mut Manifest,
) -> Result<Vec<TrainEnv>, CliError> {
    let bounds_path = layout.stage_dir("pretrain").join(BOUNDS_FILE);
    require(&bounds_path, "pretrain")?;
    manifest.input(&bounds_path)?;
    let bounds: BTreeMap<String, f64> = read_json(&bounds_path)?;
    training_datasets(layout, cfg, manifest)?
        .into_iter()
        .map(|(fit, _)| {
            let rmax = *bounds.get(&fit.spec.env_id).ok_or_else(|| {
                CliError::Config(format!(
                    "no rate bound for {} in {}; rerun pretrain",
                    fit.spec.env_id,
                    bounds_path.display()
                ))
            })?;
            Ok(TrainEnv { dataset: fit, rmax })
        })
        .collect()
}

/// pretrain: site-aware sum-rate training of a fresh model.
pub fn pretrain(cfg: &RunConfig, quiet: bool) -> Result<Manifest, CliError> {
    let layout = Layout::new(cfg);
    let mut manifest = Manifest::new("pretrain", cfg);
    let fits: Vec<_> = training_datasets(&layout, cfg, &mut manifest)?
        .into_iter()
        .map(|(fit, _)| fit)
        .collect();
    let envs = TrainEnv::prepare(fits, &cfg.system, cfg.train.rmax_samples, cfg.train.seed)?;
    let bounds: BTreeMap<String, f64> = envs.iter().map(|e| (e.id().to_owned(), e.rmax)).collect();
    let ids: Vec<String> = bounds.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = FoundationModel::new(cfg.model.clone(), &ids, &mut rng)?;
    let mut trainer = Trainer::new(model, &envs, &cfg.system, &cfg.train.for_pretraining())?;
    let mut history = Vec::with_capacity(cfg.train.pretrain_epochs);
    for _ in 0..cfg.train.pretrain_epochs {
        let m = trainer.pretrain_epoch(&envs)?;
        log(
            quiet,
            format!(
                "pretrain epoch {} mean sum-rate {:.4}",
                m.epoch,
                m.mean_sum_rate()
            ),
        );
        history.push(m);
    }
    let dir = layout.stage_dir("pretrain");
    save_model(&dir, &trainer.into_model(), &mut manifest)?;
    let bounds_path = dir.join(BOUNDS_FILE);
    write_json(&bounds_path, &bounds)?;
    manifest.output(&bounds_path)?;
    let metrics_path = dir.join(METRICS_FILE);
    write_metrics(&metrics_path, &history)?;
    manifest.output(&metrics_path)?;
    manifest.metrics = serde_json::json!({
        "rmax": bounds,
        "final_mean_sum_rate": history.last().map(EpochMetrics::mean_sum_rate),
    });
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// train: multi-objective rate/energy training from the pretrain checkpoint.
pub fn train(cfg: &RunConfig, quiet: bool) -> Result<Manifest, CliError> {
    let layout = Layout::new(cfg);
    let mut manifest = Manifest::new("train", cfg);
    let model = load_model(&layout.stage_dir("pretrain"), "pretrain", &mut manifest)?;
    check_model(&model, cfg)?;
    let envs = train_envs(&layout, cfg, &mut manifest)?;
    let tcfg = mimo_fm::training::TrainConfig {
        seed: cfg.train.seed.wrapping_add(1),
        ..cfg.train.clone()
    };
    let mut trainer = Trainer::new(model, &envs, &cfg.system, &tcfg)?;
    let mut history = Vec::with_capacity(cfg.train.epochs);
    for _ in 0..cfg.train.epochs {
        let m = trainer.multiobjective_epoch(&envs)?;
        log(
            quiet,
            format!(
                "train epoch {} loss {:.5} mean sum-rate {:.4}",
                m.epoch,
                m.loss,
                m.mean_sum_rate()
            ),
        );
        history.push(m);
    }
    let dir = layout.stage_dir("train");
    save_model(&dir, &trainer.into_model(), &mut manifest)?;
    let metrics_path = dir.join(METRICS_FILE);
    write_metrics(&metrics_path, &history)?;
    manifest.output(&metrics_path)?;
    manifest.metrics = serde_json::json!({
        "final_loss": history.last().map(|m| m.loss),
        "final_mean_sum_rate": history.last().map(EpochMetrics::mean_sum_rate),
    });
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Starting point of every head trained at deployment: the element-wise
/// mean of the trained per-environment heads.
pub fn mean_head(heads: &BTreeMap<String, OutputHead>) -> Result<OutputHead, CliError> {
    let mut it = heads.values();
    let mut acc = it
        .next()
        .ok_or_else(|| CliError::Config("checkpoint holds no output heads".into()))?
        .clone();
    for h in it {
        for (a, b) in acc.tensors_mut().into_iter().zip(h.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }
    let n = heads.len() as f64;
    for t in acc.tensors_mut() {
        for x in t.data.iter_mut() {
            *x /= n;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSimilarity {
    pub site: String,
    pub local_channels: usize,
    pub ranking: Vec<Similarity>,
}

/// adapt: zero-shot, few-shot and full heads for every deployment site.
pub fn adapt(cfg: &RunConfig, quiet: bool) -> Result<Manifest, CliError> {
    let layout = Layout::new(cfg);
    let mut manifest = Manifest::new("adapt", cfg);
    let model = load_model(&layout.stage_dir("train"), "train", &mut manifest)?;
    check_model(&model, cfg)?;
    let envs = train_envs(&layout, cfg, &mut manifest)?;
    let init = mean_head(&model.heads)?;
    let deployer = Deployer::new(
        &model.extractor,
        init,
        &envs,
        &cfg.system,
        cfg.adapt.clone(),
    )?;
    let mut heads: BTreeMap<DeployMode, BTreeMap<String, OutputHead>> =
        MODES.iter().map(|m| (*m, BTreeMap::new())).collect();
    let default = deployer.default_head()?.clone();
    heads
        .get_mut(&DeployMode::ZeroShot)
        .expect("mode present")
        .insert(DEFAULT_HEAD.to_string(), default);
    let mut similarity = Vec::new();
    let sites: Vec<_> = cfg.deploy_specs().cloned().collect();
    for spec in &sites {
        let (local, _) = load_split(&layout, spec, cfg, &mut manifest)?;
        let few: Vec<usize> = (0..cfg.eval.few_shot_channels.min(local.len())).collect();
        let few_local = local.subset(&few);
        for mode in MODES {
            let data = if mode == DeployMode::FewShot {
                &few_local
            } else {
                &local
            };
            let head = deployer.deploy(mode, data)?;
            log(
                quiet,
                format!("adapted {} ({})", spec.env_id, mode_name(mode)),
            );
            heads
                .get_mut(&mode)
                .expect("mode present")
                .insert(spec.env_id.clone(), head);
        }
        similarity.push(SiteSimilarity {
            site: spec.env_id.clone(),
            local_channels: few_local.len(),
            ranking: deployer.rank(&few_local)?,
        });
    }
    create_dir(&layout.stage_dir("adapt"))?;
    for (mode, map) in &heads {
        let path = layout.adapted_heads(*mode);
        save_heads(model.hyper(), map, &path)?;
        manifest.output(&path)?;
    }
    for s in &similarity {
        let path = layout.report(cfg, &format!("similarity-{}", s.site), "json");
        let mut buf = Vec::new();
        write_similarity_report(&s.ranking, &mut buf)?;
        write_file(&path, &buf)?;
        manifest.output(&path)?;
    }
    manifest.metrics = serde_json::to_value(&similarity)?;
    manifest.write(&layout.stage_dir("adapt").join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentResult {
    pub site: String,
    pub mode: String,
    pub report: MaxRateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub training: Vec<MaxRateReport>,
    pub cross_site_diagonal_mean: f64,
    pub cross_site_off_diagonal_mean: Option<f64>,
    pub deployment: Vec<DeploymentResult>,
}

fn model_precoder<'a>(
    name: &str,
    ext: &'a FeatureExtractor,
    head: &'a OutputHead,
    cfg: &RunConfig,
) -> ModelPrecoder<'a> {
    ModelPrecoder {
        name: name.to_string(),
        extractor: ext,
        head,
        cfg: cfg.system.clone(),
    }
}

/// eval: max-rate comparison against ZF and WMMSE on held-out channels, the
/// cross-site table and, when sites are deployed, every adapted head.
pub fn eval(cfg: &RunConfig, quiet: bool) -> Result<Manifest, CliError> {
    let layout = Layout::new(cfg);
    let mut manifest = Manifest::new("eval", cfg);
    let model = load_model(&layout.stage_dir("train"), "train", &mut manifest)?;
    check_model(&model, cfg)?;
    let holdouts: Vec<_> = training_datasets(&layout, cfg, &mut manifest)?
        .into_iter()
        .map(|(_, hold)| hold)
        .collect();
    let (n, seed) = (cfg.eval.n_eval, cfg.eval.seed);
    let mut training = Vec::new();
    let mut precoders = Vec::new();
    for ds in &holdouts {
        let id = &ds.spec.env_id;
        let p = model_precoder(id, &model.extractor, model.head(id)?, cfg);
        let r = max_sum_rate_eval(&p, ds, &cfg.system, n, seed)?;
        log(
            quiet,
            format!(
                "{id}: model {:.4} zf {:.4} wmmse {:.4}",
                r.model, r.zf, r.wmmse
            ),
        );
        training.push(r);
        precoders.push(p);
    }
    let dyns: Vec<&dyn Precoder> = precoders.iter().map(|p| p as &dyn Precoder).collect();
    let matrix = cross_site_matrix(&dyns, &holdouts, &cfg.system, n, seed)?;
    let mut deployment = Vec::new();
    let sites: Vec<_> = cfg.deploy_specs().cloned().collect();
    if !sites.is_empty() {
        let mut adapted = BTreeMap::new();
        for mode in MODES {
            let path = layout.adapted_heads(mode);
            require(&path, "adapt")?;
            manifest.input(&path)?;
            adapted.insert(mode, load_heads(&path, model.hyper())?);
        }
        for spec in &sites {
            let (_, hold) = load_split(&layout, spec, cfg, &mut manifest)?;
            for mode in MODES {
                let key = if mode == DeployMode::ZeroShot {
                    DEFAULT_HEAD
                } else {
                    spec.env_id.as_str()
                };
                let head = adapted[&mode]
                    .get(key)
                    .ok_or_else(|| CliError::Prerequisite {
                        stage: "adapt",
                        path: layout.adapted_heads(mode),
                    })?;
                let p = model_precoder(mode_name(mode), &model.extractor, head, cfg);
                let r = max_sum_rate_eval(&p, &hold, &cfg.system, n, seed)?;
                log(
                    quiet,
                    format!(
                        "{} {}: model {:.4} zf {:.4} wmmse {:.4}",
                        spec.env_id,
                        mode_name(mode),
                        r.model,
                        r.zf,
                        r.wmmse
                    ),
                );
                deployment.push(DeploymentResult {
                    site: spec.env_id.clone(),
                    mode: mode_name(mode).to_string(),
                    report: r,
                });
            }
        }
    }
    let report = EvalReport {
        training,
        cross_site_diagonal_mean: matrix.diagonal_mean(),
        cross_site_off_diagonal_mean: matrix.off_diagonal_mean(),
        deployment,
    };
    let report_path = layout.report(cfg, "eval", "json");
    write_json(&report_path, &report)?;
    manifest.output(&report_path)?;
    let csv_path = layout.report(cfg, "cross-site", "csv");
    write_file(&csv_path, matrix.to_csv()?.as_bytes())?;
    manifest.output(&csv_path)?;
    manifest.metrics = serde_json::json!({
        "cross_site_diagonal_mean": report.cross_site_diagonal_mean,
        "cross_site_off_diagonal_mean": report.cross_site_off_diagonal_mean,
    });
    manifest.write(&layout.report(cfg, "eval", "manifest.json"))?;
    Ok(manifest)
}

/// sweep: rate/energy trade-off points of every training head on its own
/// held-out channels.
pub fn sweep(cfg: &RunConfig, quiet: bool) -> Result<Manifest, CliError> {
    let layout = Layout::new(cfg);
    let mut manifest = Manifest::new("sweep", cfg);
    let model = load_model(&layout.stage_dir("train"), "train", &mut manifest)?;
    check_model(&model, cfg)?;
    let bounds_path = layout.stage_dir("pretrain").join(BOUNDS_FILE);
    require(&bounds_path, "pretrain")?;
    manifest.input(&bounds_path)?;
    let bounds: BTreeMap<String, f64> = read_json(&bounds_path)?;
    let mut summaries: BTreeMap<String, SweepSummary> = BTreeMap::new();
    for (_, hold) in training_datasets(&layout, cfg, &mut manifest)? {
        let id = hold.spec.env_id.clone();
        let rmax = *bounds
            .get(&id)
            .ok_or_else(|| CliError::Config(format!("no rate bound for {id}; rerun pretrain")))?;
        let p = model_precoder(&id, &model.extractor, model.head(&id)?, cfg);
        let points = tradeoff_sweep(
            &p,
            &hold,
            rmax,
            &cfg.system,
            cfg.eval.sweep_points,
            cfg.eval.seed,
        )?;
        let path = layout.report(cfg, &format!("sweep-{id}"), "csv");
        let mut buf = Vec::new();
        write_points_csv(&points, &mut buf)?;
        write_file(&path, &buf)?;
        manifest.output(&path)?;
        let summary = summarize_sweep(&points);
        log(
            quiet,
            format!(
                "{id}: mean relative rate error {:?}, energy trend {:?}",
                summary.mean_relative_rate_error, summary.energy_trend
            ),
        );
        summaries.insert(id, summary);
    }
    let path = layout.report(cfg, "sweep", "json");
    write_json(&path, &summaries)?;
    manifest.output(&path)?;
    manifest.metrics = serde_json::to_value(
        summaries
            .iter()
            .map(|(k, s)| (k.clone(), (s.mean_relative_rate_error, s.energy_trend)))
            .collect::<BTreeMap<_, _>>(),
    )?;
    manifest.write(&layout.report(cfg, "sweep", "manifest.json"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsOutput {
    pub reports: Vec<FlopReport>,
    pub wmmse_over_proposed: f64,
    /// Per-layer count of this implementation's forward pass, when a model
    /// configuration is known.
    pub audit: Vec<LayerFlops>,
}

pub fn flop_table(n_users: usize, n_tx: usize, iterations: usize) -> Result<FlopsOutput, CliError> {
    let reports = [Algorithm::Zf, Algorithm::Wmmse, Algorithm::Proposed]
        .into_iter()
        .map(|a| FlopReport::new(a, n_users, n_tx, iterations))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FlopsOutput {
        wmmse_over_proposed: reports[1].flops / reports[2].flops,
        reports,
        audit: Vec::new(),
    })
}

/// flops: closed-form counts, printed; with a configuration, also the audit
/// of the configured model and a JSON report.
pub fn flops(
    cfg: Option<&RunConfig>,
    n_users: usize,
    n_tx: usize,
    iterations: usize,
) -> Result<(FlopsOutput, Option<Manifest>), CliError> {
    let mut out = flop_table(n_users, n_tx, iterations)?;
    let Some(cfg) = cfg else {
        return Ok((out, None));
    };
    out.audit = forward_flop_audit(&cfg.model);
    let layout = Layout::new(cfg);
    let mut manifest = Manifest::new("flops", cfg);
    let path = layout.report(cfg, "flops", "json");
    write_json(&path, &out)?;
    manifest.output(&path)?;
    manifest.metrics = serde_json::to_value(&out.reports)?;
    manifest.write(&layout.report(cfg, "flops", "manifest.json"))?;
    Ok((out, Some(manifest)))
}

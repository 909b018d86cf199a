//! Library-level pipeline on a tiny system: data, training, checkpoints,
//! deployment and evaluation, without the command-line layer.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mimo_fm::adaptation::{AdaptConfig, DeployMode, Deployer};
use mimo_fm::channelgen::{generate_dataset, read_dataset, write_dataset, EnvironmentSpec};
use mimo_fm::evalbench::{max_sum_rate_eval, tradeoff_sweep, ModelPrecoder};
use mimo_fm::nn::checkpoint::{load_extractor, load_heads, save_extractor, save_heads};
use mimo_fm::nn::ModelHyper;
use mimo_fm::phy::SystemConfig;
use mimo_fm::training::{FoundationModel, TrainConfig, TrainEnv, Trainer};

fn system() -> SystemConfig {
    SystemConfig {
        n_tx: 4,
        n_users: 2,
        ..SystemConfig::default()
    }
}

fn specs() -> Vec<EnvironmentSpec> {
    (0..3)
        .map(|i| EnvironmentSpec {
            env_id: format!("site{i}"),
            mean_azimuth: -1.0 + i as f64,
            los: i % 2 == 0,
            rician_k: if i % 2 == 0 { 5.0 } else { 0.0 },
            path_loss_db: 140.0,
            seed: 10 + i as u64,
            ..EnvironmentSpec::default()
        })
        .collect()
}

fn hyper(sys: &SystemConfig) -> ModelHyper {
    ModelHyper {
        embed_dim: 8,
        ffn_dim: 16,
        n_heads: 2,
        n_layers: 1,
        dropout: 0.0,
        input_scale_db: 140.0,
        ..ModelHyper::default()
    }
    .with_system(sys)
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        batches_per_epoch: 2,
        epochs: 2,
        pretrain_epochs: 2,
        chunk_size: 16,
        rmax_samples: 8,
        ..TrainConfig::default()
    }
}

fn trained(sys: &SystemConfig, envs: &[TrainEnv]) -> FoundationModel {
    let ids: Vec<String> = envs.iter().map(|e| e.id().to_string()).collect();
    let model = FoundationModel::new(hyper(sys), &ids, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = train_cfg();
    let mut trainer = Trainer::new(model, envs, sys, &cfg.for_pretraining()).unwrap();
    for _ in 0..cfg.pretrain_epochs {
        assert!(trainer
            .pretrain_epoch(envs)
            .unwrap()
            .mean_sum_rate()
            .is_finite());
    }
    let mut trainer = Trainer::new(trainer.into_model(), envs, sys, &cfg).unwrap();
    for _ in 0..cfg.epochs {
        assert!(trainer
            .multiobjective_epoch(envs)
            .unwrap()
            .mean_sum_rate()
            .is_finite());
    }
    trainer.into_model()
}

#[test]
fn tiny_pipeline_round_trips_and_deploys() {
    let sys = system();
    let dir = tempfile::tempdir().unwrap();
    let mut datasets = Vec::new();
    for spec in specs() {
        let ds = generate_dataset(&spec, &sys, 60).unwrap();
        let path = dir.path().join(format!("{}.csif", spec.env_id));
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap().with_spec(spec);
        assert_eq!(back, ds);
        datasets.push(back);
    }
    let deploy = datasets.pop().unwrap();
    let envs = TrainEnv::prepare(datasets, &sys, 8, 0).unwrap();
    let model = trained(&sys, &envs);

    save_extractor(&model.extractor, dir.path().join("m.mmfm")).unwrap();
    save_heads(model.hyper(), &model.heads, dir.path().join("h.mmfh")).unwrap();
    let ext = load_extractor(dir.path().join("m.mmfm")).unwrap();
    let heads = load_heads(dir.path().join("h.mmfh"), &ext.hyper).unwrap();
    assert_eq!(ext, model.extractor);
    assert_eq!(heads, model.heads);

    let adapt = AdaptConfig {
        epochs: 2,
        head_samples: 16,
        local_samples: 8,
        profile_samples: 8,
        similarity_samples: 4,
        n_select: 1,
        batch_size: 8,
        rmax_samples: 4,
        ..AdaptConfig::default()
    };
    let init = heads.values().next().unwrap().clone();
    let deployer = Deployer::new(&ext, init, &envs, &sys, adapt).unwrap();
    let ranking = deployer.rank(&deploy).unwrap();
    assert_eq!(ranking.len(), envs.len());
    let mut adapted = BTreeMap::new();
    for mode in [DeployMode::ZeroShot, DeployMode::FewShot, DeployMode::Full] {
        adapted.insert(mode, deployer.deploy(mode, &deploy).unwrap());
    }
    assert_ne!(adapted[&DeployMode::ZeroShot], adapted[&DeployMode::Full]);

    for head in adapted.values() {
        let p = ModelPrecoder {
            name: "model".into(),
            extractor: &ext,
            head,
            cfg: sys.clone(),
        };
        let report = max_sum_rate_eval(&p, &deploy, &sys, 6, 3).unwrap();
        assert!(report.model.is_finite() && report.model >= 0.0);
        assert!(report.wmmse >= report.zf - 1e-9);
    }

    let own = ModelPrecoder {
        name: "site0".into(),
        extractor: &ext,
        head: &heads["site0"],
        cfg: sys.clone(),
    };
    let points = tradeoff_sweep(&own, &envs[0].dataset, envs[0].rmax, &sys, 12, 5).unwrap();
    assert_eq!(points.len(), 12);
    assert!(points.iter().all(|p| p.energy.is_finite()));
}

#[test]
fn training_is_reproducible_for_a_fixed_seed() {
    let sys = system();
    let datasets: Vec<_> = specs()[..2]
        .iter()
        .map(|s| generate_dataset(s, &sys, 40).unwrap())
        .collect();
    let envs = TrainEnv::prepare(datasets, &sys, 8, 0).unwrap();
    let a = trained(&sys, &envs);
    let b = trained(&sys, &envs);
    assert_eq!(a, b);
}

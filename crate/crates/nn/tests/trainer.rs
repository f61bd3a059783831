use candle_core::DType;
use wdaseg_core::synthdata::{make_benchmark, Benchmark, BenchmarkSpec};
use wdaseg_nn::inference::{predict, PredictOptions};
use wdaseg_nn::losses::lambda_c;
use wdaseg_nn::optim::poly_lr;
use wdaseg_nn::trainer::load_g1;
use wdaseg_nn::{AblationFlags, BlockKind, Error, RunConfig, TrainState, Trainer, G2};

fn tiny_bench() -> Benchmark {
    let mut spec = BenchmarkSpec::desk_default(11);
    spec.n_source = 3;
    spec.n_target_train = 3;
    spec.n_target_test = 1;
    spec.size = 64;
    spec.annotation_ratio = 0.5;
    spec.source.blob_count_range = (2, 4);
    spec.target.blob_count_range = (2, 4);
    make_benchmark(&spec).unwrap()
}

fn tiny_config(double: bool) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.train.z_max = 8;
    cfg.train.crop = 32;
    cfg.train.network.base_channels = 8;
    cfg.train.network.depth = 2;
    cfg.train.network.block_kind = BlockKind::Standard;
    cfg.train.disc_width = 4;
    cfg.train.g2_scales = vec![32];
    cfg.train.double_precision = double;
    cfg.weights.sigma1 = 4.0;
    cfg.weights.sigma2 = 2.0;
    cfg
}

fn tiny_g2(cfg: &RunConfig) -> G2 {
    let dtype = if cfg.train.double_precision {
        DType::F64
    } else {
        DType::F32
    };
    G2::new(cfg.train.network, dtype, 99).unwrap()
}

#[test]
fn resumed_step_matches_uninterrupted_run_bit_exactly() {
    let bench = tiny_bench();
    let cfg = tiny_config(true);
    let g2 = tiny_g2(&cfg);
    // Three target images per epoch, so thresholds exist by the time of the save.
    let mut straight = Trainer::new(cfg.clone(), &bench, Some(&g2)).unwrap();
    let expected: Vec<_> = (0..5).map(|_| straight.step().unwrap()).collect();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg.clone(), &bench, Some(&g2)).unwrap();
    for _ in 0..4 {
        first.step().unwrap();
    }
    let before = first.state().g1.params().snapshot().unwrap();
    first.state().save(dir.path(), &cfg).unwrap();

    let (loaded, loaded_cfg) = TrainState::load(dir.path()).unwrap();
    assert_eq!(loaded.z, 4);
    assert_eq!(loaded_cfg, cfg);
    let after = loaded.g1.params().snapshot().unwrap();
    for (name, t) in &before {
        let a = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = after[name].flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(
            a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{name} differs"
        );
    }

    let mut resumed = Trainer::resume(dir.path(), &bench, Some(&g2)).unwrap();
    assert_eq!(resumed.step().unwrap(), expected[4]);
}

#[test]
fn single_precision_resume_within_tolerance() {
    let bench = tiny_bench();
    let mut cfg_nc = tiny_config(false);
    cfg_nc.train.flags.count = false;
    let mut straight_nc = Trainer::new(cfg_nc.clone(), &bench, None).unwrap();
    let expected: Vec<_> = (0..3).map(|_| straight_nc.step().unwrap()).collect();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg_nc.clone(), &bench, None).unwrap();
    first.step().unwrap();
    first.step().unwrap();
    first.state().save(dir.path(), &cfg_nc).unwrap();
    let got = Trainer::resume(dir.path(), &bench, None).unwrap().step().unwrap();
    assert_eq!(got.iter, expected[2].iter);
    assert!((got.total - expected[2].total).abs() <= 1e-10);
    assert_eq!(got.lambda_c, expected[2].lambda_c);
}

#[test]
fn count_flag_requires_counting_network() {
    let bench = tiny_bench();
    let cfg = tiny_config(false);
    assert!(matches!(Trainer::new(cfg, &bench, None), Err(Error::Config(_))));
}

#[test]
fn flags_off_only_source_and_adversarial_terms() {
    let bench = tiny_bench();
    let mut cfg = tiny_config(false);
    cfg.train.flags = AblationFlags::none();
    let mut t = Trainer::new(cfg, &bench, None).unwrap();
    for _ in 0..3 {
        let r = t.step().unwrap();
        assert!(r.seg_source > 0.0 && r.adv > 0.0);
        assert_eq!((r.seg_pseudo, r.det, r.count), (0.0, 0.0, 0.0));
    }
}

#[test]
fn schedules_are_functions_of_the_iteration() {
    let base = 5e-5;
    assert_eq!(poly_lr(base, 0, 100, 0.9), base);
    assert_eq!(poly_lr(base, 100, 100, 0.9), 0.0);
    assert!((1..=100).all(|z| poly_lr(base, z, 100, 0.9) < poly_lr(base, z - 1, 100, 0.9)));
    assert_eq!(lambda_c(0, 100), 1.0);
    assert_eq!(lambda_c(100, 100), 0.0);
}

#[test]
fn run_writes_log_and_checkpoints_then_predicts() {
    let bench = tiny_bench();
    let mut cfg = tiny_config(false);
    cfg.train.z_max = 4;
    cfg.train.checkpoint_every = 2;
    let g2 = tiny_g2(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg.clone(), &bench, Some(&g2))
        .unwrap()
        .with_run_dir(dir.path())
        .unwrap();
    let records = t.run().unwrap();
    assert_eq!(records.len(), 4);
    drop(t);
    let log = std::fs::read_to_string(dir.path().join("logs/losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(dir.path().join("checkpoints/iter_000002").is_dir());

    let (g1, loaded) = load_g1(&dir.path().join("checkpoints/final")).unwrap();
    assert_eq!(loaded, cfg);
    let image = &bench.target_test[0].image;
    let p = predict(&g1, image, PredictOptions::new(true, 0.3, 4.0)).unwrap();
    assert_eq!(p.mask.dim(), image.dim());
    assert_eq!(p.instances.count() > 0, p.mask.iter().any(|&m| m));
    assert!(p.count >= 0.0);
}

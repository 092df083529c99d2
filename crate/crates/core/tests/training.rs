use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use geocycle::data::{generate_synthetic_dataset, load_unpaired, resplit_dataset, DatasetManifest, Split, SyntheticDatasetConfig};
use geocycle::losses::{pixel_cycle_loss, LossWeights};
use geocycle::networks::{
    build_loss_network, ImageBatch, LossNetworkConfig, LossNetworkProvider, LossNetworkSpec, PatchDiscriminatorSpec,
};
use geocycle::train::{
    evaluate_objective, load_bundle, run_training, translate, Architecture, Direction, Mode, ModelBundle, ModelConfig,
    RunOptions, TrainConfig, Trainer,
};
use geocycle::Error;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        generator_width: 4,
        residual_blocks: Some(1),
        patch: PatchDiscriminatorSpec { base_width: 4, stride2_layers: 3 },
        geometry_width: 4,
        geometry_instance_norm: true,
        loss_network: LossNetworkConfig {
            spec: LossNetworkSpec::compact(),
            provider: LossNetworkProvider::FixedRandom { seed: 3 },
        },
    }
}

fn tiny_train(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, mode, resolution: 64, seed: 11, pool_size: 3, checkpoint_every: Some(1), ..Default::default() }
}

fn dataset(dir: &Path) -> DatasetManifest {
    let cfg = SyntheticDatasetConfig { n_identities: 6, train_fraction: 0.5, resolution: 64, seed: 2, ..Default::default() };
    generate_synthetic_dataset(&cfg, dir).unwrap()
}

fn bundle(model: &ModelConfig, seed: u64) -> ModelBundle {
    let arch = Architecture::resolve(model, 64).unwrap();
    let phi = build_loss_network(&model.loss_network, 64, DType::F32).unwrap();
    ModelBundle::new(&arch, phi, seed).unwrap()
}

fn batches(m: &DatasetManifest) -> (ImageBatch, ImageBatch) {
    let d = load_unpaired(m, Split::Train, 64, 0, false).unwrap();
    d.epoch(0, 1).unwrap().remove(0)
}

fn sums(b: &ModelBundle) -> BTreeMap<String, String> {
    let mut s = b.checksums().unwrap();
    s.insert("phi".into(), b.phi.checksum().unwrap());
    s
}

fn changed(before: &BTreeMap<String, String>, after: &BTreeMap<String, String>) -> Vec<String> {
    before.iter().filter(|(k, v)| after[*k] != **v).map(|(k, _)| k.clone()).collect()
}

fn values(b: &ImageBatch) -> Vec<f32> {
    b.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

#[test]
fn generator_and_discriminator_steps_touch_disjoint_weights() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let (a, b) = batches(&m);
    for mode in Mode::ALL {
        let mut t = Trainer::new(bundle(&tiny_model(), 5), tiny_train(mode, 1)).unwrap();
        let s0 = sums(t.bundle());
        let out = t.generator_step(&a, &b, 2e-4).unwrap();
        let s1 = sums(t.bundle());
        assert_eq!(changed(&s0, &s1), ["g_ab", "g_ba"], "{mode}");
        let losses = t.discriminator_step(&a, &b, &out, 2e-4).unwrap();
        let s2 = sums(t.bundle());
        let expect: Vec<&str> = if mode == Mode::Full { vec!["d_a", "d_b", "dg_a", "dg_b"] } else { vec!["d_a", "d_b"] };
        assert_eq!(changed(&s1, &s2), expect, "{mode}");
        assert_eq!(losses.len(), mode.active_discriminators());
    }
}

#[test]
fn seeded_steps_are_bitwise_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let (a, b) = batches(&m);
    let run = |seed: u64| {
        let mut t = Trainer::new(bundle(&tiny_model(), seed), tiny_train(Mode::Full, 1)).unwrap();
        for _ in 0..2 {
            t.step(&a, &b, 2e-4).unwrap();
        }
        t.bundle().checksums().unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn mode_objectives_differ_only_where_they_should() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let (a, b) = batches(&m);
    let bd = bundle(&tiny_model(), 5);
    let w = LossWeights::default();
    let full = evaluate_objective(&bd, &a, &b, Mode::Full, &w).unwrap();
    let nogeo = evaluate_objective(&bd, &a, &b, Mode::NoGeometry, &w).unwrap();
    let base = evaluate_objective(&bd, &a, &b, Mode::CycleganBaseline, &w).unwrap();

    assert!(full.terms.adv_geo_x > 0.0 && full.terms.adv_geo_y > 0.0);
    assert_eq!((nogeo.terms.adv_geo_x, nogeo.terms.adv_geo_y), (0.0, 0.0));
    assert_eq!((base.terms.adv_geo_x, base.terms.adv_geo_y), (0.0, 0.0));
    assert_eq!(full.terms.cyc_x, nogeo.terms.cyc_x);
    assert_eq!(full.terms.adv_patch_y, base.terms.adv_patch_y);

    let rec = bd.translate(&bd.translate(&a, Direction::AToB).unwrap(), Direction::BToA).unwrap();
    let pix = pixel_cycle_loss(&a, &rec).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    assert!((base.terms.cyc_x - pix).abs() <= 1e-6 * pix.max(1e-12));
    let expect = w.lambda_patch * (full.terms.adv_patch_x + full.terms.adv_patch_y)
        + w.lambda_geo * (full.terms.adv_geo_x + full.terms.adv_geo_y)
        + w.lambda_cyc * (full.terms.cyc_x + full.terms.cyc_y);
    assert!((full.total - expect).abs() < 1e-9);
    let geo = w.lambda_geo * (full.terms.adv_geo_x + full.terms.adv_geo_y);
    assert!((nogeo.total - (full.total - geo)).abs() <= 1e-9 * full.total);
}

#[test]
fn non_finite_loss_is_divergence_naming_the_term() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let (a, b) = batches(&m);
    let bd = bundle(&tiny_model(), 5);
    let poisoned: BTreeMap<String, Tensor> = bd
        .d_a
        .params()
        .snapshot()
        .unwrap()
        .into_iter()
        .map(|(k, v)| {
            let nan = Tensor::full(f32::NAN, v.shape(), &Device::Cpu).unwrap();
            (k, nan)
        })
        .collect();
    bd.d_a.params().assign(&poisoned).unwrap();
    let mut t = Trainer::new(bd, tiny_train(Mode::Full, 1)).unwrap();
    match t.step(&a, &b, 2e-4) {
        Err(Error::Divergence { term, .. }) => assert_eq!(term, "adv_patch_x"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"));
    let (a, b) = batches(&m);
    let mut t = Trainer::new(bundle(&tiny_model(), 5), tiny_train(Mode::Full, 1)).unwrap();
    for _ in 0..4 {
        t.step(&a, &b, 2e-4).unwrap();
    }
    let ck = dir.path().join("ck");
    t.save_checkpoint(&ck, 1).unwrap();
    let (mut back, state) = Trainer::load_checkpoint(&ck).unwrap();
    assert_eq!(state.epoch, 1);
    assert_eq!(back.steps(), t.steps());
    assert_eq!(back.pool_sizes(), t.pool_sizes());
    assert_eq!(sums(back.bundle()), sums(t.bundle()));
    for dir_ in [Direction::AToB, Direction::BToA] {
        let x = if dir_ == Direction::AToB { &a } else { &b };
        assert_eq!(values(&t.bundle().translate(x, dir_).unwrap()), values(&back.bundle().translate(x, dir_).unwrap()));
    }
    // Optimizer moments and pool state must survive too.
    for _ in 0..3 {
        t.step(&a, &b, 2e-4).unwrap();
        back.step(&a, &b, 2e-4).unwrap();
    }
    assert_eq!(sums(back.bundle()), sums(t.bundle()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"));
    let model = tiny_model();
    let cfg = tiny_train(Mode::Full, 3);
    let straight = run_training(&m, &model, &cfg, &dir.path().join("straight"), RunOptions::default()).unwrap();

    let out = dir.path().join("halted");
    let halted = RunOptions { halt_after_epoch: Some(1), ..Default::default() };
    assert_eq!(run_training(&m, &model, &cfg, &out, halted).unwrap().epochs_completed, 1);
    let resumed = run_training(&m, &model, &cfg, &out, RunOptions { resume: true, ..Default::default() }).unwrap();

    assert_eq!(resumed.epochs_completed, 3);
    assert_eq!(resumed.checksums, straight.checksums);
    assert_eq!(resumed.metrics.len(), 3);
    for (x, y) in resumed.metrics.iter().zip(&straight.metrics) {
        assert_eq!(x.mean, y.mean);
    }
    assert_eq!(m.pairing_reads(), 0);
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"));
    let out = dir.path().join("run");
    run_training(&m, &tiny_model(), &tiny_train(Mode::Full, 1), &out, RunOptions::default()).unwrap();
    let other = TrainConfig { learning_rate: 1e-3, ..tiny_train(Mode::Full, 2) };
    let r = run_training(&m, &tiny_model(), &other, &out, RunOptions { resume: true, ..Default::default() });
    assert!(matches!(r, Err(Error::Compatibility(_))));
}

#[test]
fn run_writes_metrics_checkpoints_and_keeps_phi() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"));
    let out = dir.path().join("run");
    let r = run_training(&m, &tiny_model(), &tiny_train(Mode::NoGeometry, 2), &out, RunOptions::default()).unwrap();
    assert_eq!(r.metrics.len(), 2);
    assert!(r.metrics.iter().all(|e| e.mean.total.is_finite() && e.steps == 3));
    assert!(out.join("resolved_config.json").is_file());
    assert!(out.join("checkpoints/epoch_0001/state.json").is_file());
    assert_eq!(std::fs::read_to_string(out.join("checkpoints/latest")).unwrap(), "epoch_0002");
    let (b, state) = load_bundle(&out, None).unwrap();
    assert_eq!(b.phi.checksum().unwrap(), r.phi_checksum);
    assert_eq!(state.phi_checksum, r.phi_checksum);
    assert_eq!(geocycle::train::read_metrics(&out).unwrap(), r.metrics);
}

#[test]
fn translate_checks_compatibility() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"));
    let out = dir.path().join("run");
    run_training(&m, &tiny_model(), &tiny_train(Mode::CycleganBaseline, 1), &out, RunOptions::default()).unwrap();
    let (a, _) = batches(&m);
    let y = translate(&out, &a, Direction::AToB, None).unwrap();
    assert_eq!(y.tensor().dims(), a.tensor().dims());

    let big = ImageBatch::new(Tensor::zeros((1, 3, 128, 128), DType::F32, &Device::Cpu).unwrap()).unwrap();
    assert!(matches!(translate(&out, &big, Direction::AToB, None), Err(Error::Compatibility(_))));
    let wider = Architecture::resolve(&ModelConfig { generator_width: 8, ..tiny_model() }, 64).unwrap();
    assert!(matches!(translate(&out, &a, Direction::AToB, Some(&wider)), Err(Error::Compatibility(_))));
}

#[test]
fn resplit_keeps_every_identity_and_changes_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticDatasetConfig { n_identities: 10, train_fraction: 0.7, resolution: 64, seed: 2, ..Default::default() };
    let m = generate_synthetic_dataset(&cfg, &dir.path().join("data")).unwrap();
    let r = resplit_dataset(&m, 0.7, 99, &dir.path().join("re")).unwrap();
    assert_eq!((r.splits.train.len(), r.splits.test.len()), (7, 3));
    let mut all: Vec<_> = r.splits.train.iter().chain(&r.splits.test).cloned().collect();
    all.sort();
    let mut orig: Vec<_> = m.splits.train.iter().chain(&m.splits.test).cloned().collect();
    orig.sort();
    assert_eq!(all, orig);
    let back = DatasetManifest::load(&dir.path().join("re")).unwrap();
    assert_eq!(back.splits, r.splits);
    assert_eq!(back.files(geocycle::data::Domain::A, Split::Test).unwrap().len(), 3);
    let other = resplit_dataset(&m, 0.7, 100, &dir.path().join("re2")).unwrap();
    assert!(other.splits != r.splits || r.splits != m.splits);
}

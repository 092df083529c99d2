use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use geocycle::data::{generate_synthetic_dataset, DatasetManifest, SyntheticDatasetConfig};
use geocycle::eval::{compare_methods, EvalConfig, EvalReport, ReferenceTraining, RepeatProtocol};
use geocycle::networks::{LossNetworkConfig, LossNetworkProvider, LossNetworkSpec, PatchDiscriminatorSpec};
use geocycle::train::{run_training, Mode, ModelConfig, RunOptions, TrainConfig};
use geocycle::Error;

fn setup(dir: &Path) -> (DatasetManifest, BTreeMap<Mode, PathBuf>) {
    let data = SyntheticDatasetConfig { n_identities: 6, train_fraction: 0.5, resolution: 64, seed: 5, ..Default::default() };
    let manifest = generate_synthetic_dataset(&data, &dir.join("data")).unwrap();
    let model = ModelConfig {
        generator_width: 4,
        residual_blocks: Some(1),
        patch: PatchDiscriminatorSpec { base_width: 4, stride2_layers: 3 },
        geometry_width: 4,
        geometry_instance_norm: true,
        loss_network: LossNetworkConfig {
            spec: LossNetworkSpec::compact(),
            provider: LossNetworkProvider::FixedRandom { seed: 1 },
        },
    };
    let mut checkpoints = BTreeMap::new();
    for mode in Mode::ALL {
        let cfg = TrainConfig { epochs: 1, mode, resolution: 64, seed: 4, pool_size: 2, ..Default::default() };
        let out = run_training(&manifest, &model, &cfg, &dir.join(mode.name()), RunOptions::default()).unwrap();
        checkpoints.insert(mode, out.final_checkpoint);
    }
    (manifest, checkpoints)
}

fn cfg(protocol: RepeatProtocol, repeats: usize) -> EvalConfig {
    EvalConfig {
        repeats,
        protocol,
        reference: ReferenceTraining { steps: 20, ..Default::default() },
        grids: true,
        ..Default::default()
    }
}

#[test]
fn comparison_is_deterministic_and_schema_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, checkpoints) = setup(dir.path());
    let c = cfg(RepeatProtocol::EvaluationOnly, 10);
    let first = compare_methods(&checkpoints, &manifest, &c, &dir.path().join("e1")).unwrap();
    let second = compare_methods(&checkpoints, &manifest, &c, &dir.path().join("e2")).unwrap();
    assert_eq!(first.reports, second.reports);
    assert_eq!(std::fs::read(&first.report_path).unwrap(), std::fs::read(&second.report_path).unwrap());

    assert_eq!(first.reports.iter().map(|r| r.mode).collect::<Vec<_>>(), Mode::ALL.to_vec());
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&first.report_path).unwrap()).unwrap();
    for r in json.as_array().unwrap() {
        EvalReport::validate_json(r).unwrap();
    }
    for r in &first.reports {
        assert_eq!(r.identification_accuracy.per_repeat.len(), 10);
        assert_eq!(r.n_test, 3);
        assert_eq!(r.gallery_size, 6);
    }
    // One grid per test identity.
    assert_eq!(first.grids.len(), 3);
    assert!(first.grids.iter().all(|g| g.is_file()));
    assert!(std::fs::read_to_string(&first.table_path).unwrap().contains("no_geometry"));
}

#[test]
fn retrain_protocol_reports_one_value_per_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, checkpoints) = setup(dir.path());
    let c = EvalConfig { seed: 7, grids: false, ..cfg(RepeatProtocol::Retrain, 2) };
    let out = compare_methods(&checkpoints, &manifest, &c, &dir.path().join("eval")).unwrap();
    for r in &out.reports {
        assert_eq!(r.protocol, RepeatProtocol::Retrain);
        assert_eq!(r.identification_accuracy.per_repeat.len(), 2);
        assert_eq!(r.seeds, vec![7, 8]);
        r.validate().unwrap();
    }
}

#[test]
fn missing_method_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, mut checkpoints) = setup(dir.path());
    checkpoints.remove(&Mode::NoGeometry);
    let e = compare_methods(&checkpoints, &manifest, &cfg(RepeatProtocol::EvaluationOnly, 2), dir.path()).unwrap_err();
    assert!(matches!(e, Error::Protocol(ref m) if m.contains("no_geometry")), "{e}");
}

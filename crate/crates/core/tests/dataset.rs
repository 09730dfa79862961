use std::path::Path;

use ptstab_core::dataset::*;
use ptstab_core::grid::{GainSchedule, TimeGrid, TriGrid};
use ptstab_core::kernel::{kernel_slices_at_steps, KernelKind, KernelSolverOptions};
use ptstab_core::operator::OperatorData;
use ptstab_core::transform::{control_gain, control_u, StateVector};
use ptstab_core::Error;

fn small_kernel(dir: &Path, jobs: usize) -> DatasetConfig {
    DatasetConfig {
        out_dir: dir.to_path_buf(),
        samples: 6,
        space_points: 11,
        dt: 2.5e-3,
        stored_times: 5,
        seed: 17,
        split_fraction: 0.34,
        jobs,
        ..Default::default()
    }
}

#[test]
fn kernel_corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_kernel(dir.path(), 1);
    let m = generate_kernel_dataset(&cfg).unwrap();
    assert!(m.failures.is_empty());
    assert_eq!(m.sample_count, 6);
    assert_eq!(m.stored_times.len(), 5);
    assert_eq!(m.stored_times[0], 0.0);
    assert!((m.stored_times[4] - 7.6).abs() < 1e-9);

    let ds = load_dataset(&manifest_path(dir.path(), "kernel")).unwrap();
    assert_eq!(ds.manifest, m);
    let OperatorData::Kernel(k) = &ds.data else { panic!("wrong kind") };
    let grid = TriGrid::new(11).unwrap();
    assert_eq!(k.fields.dim(), (6, 5 * grid.node_count()));
    assert_eq!(k.sensors.dim(), (6, 99));

    // Records equal a direct solve, bit for bit.
    let tg = TimeGrid::new(cfg.dt, cfg.horizon, cfg.margin).unwrap();
    let spec = cfg.spec(m.sigmas[2]).unwrap();
    let slices = kernel_slices_at_steps(
        KernelKind::Direct,
        &spec,
        &GainSchedule::prescribed(8.0),
        grid,
        &tg,
        &m.stored_steps,
        KernelSolverOptions::default(),
    )
    .unwrap();
    let row: Vec<f64> = slices.iter().flat_map(|s| s.values.iter().copied()).collect();
    assert_eq!(k.fields.row(2).to_vec(), row);
    assert!(slices.iter().all(|s| s.get(0, 0) == 0.0));

    let mut all: Vec<usize> = ds.train_records.iter().chain(&ds.validation_records).copied().collect();
    all.sort();
    assert_eq!(all, (0..6).collect::<Vec<_>>());
    assert_eq!(ds.validation_records.len(), 2);
}

#[test]
fn generation_is_deterministic_and_thread_independent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_kernel_dataset(&small_kernel(a.path(), 1)).unwrap();
    let mb = generate_kernel_dataset(&small_kernel(b.path(), 3)).unwrap();
    assert_eq!(ma.inputs.sha256, mb.inputs.sha256);
    assert_eq!(ma.targets.sha256, mb.targets.sha256);
    for f in ["kernel.inputs.bin", "kernel.targets.bin", "kernel.manifest.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let c = tempfile::tempdir().unwrap();
    let mc = generate_kernel_dataset(&DatasetConfig { seed: 18, ..small_kernel(c.path(), 1) }).unwrap();
    assert_ne!(ma.targets.sha256, mc.targets.sha256);
}

#[test]
fn tampered_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_kernel_dataset(&small_kernel(dir.path(), 1)).unwrap();
    let blob = dir.path().join("kernel.targets.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[100] ^= 0x10;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(load_dataset(&manifest_path(dir.path(), "kernel")), Err(Error::Corruption { .. })));
}

#[test]
fn unstable_configuration_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { dt: 0.05, ..small_kernel(dir.path(), 1) };
    assert!(generate_kernel_dataset(&cfg).is_err());
    let cfg = DatasetConfig { samples: 0, ..small_kernel(dir.path(), 1) };
    assert!(generate_kernel_dataset(&cfg).is_err());
}

#[test]
fn feedback_triples_reproduce_the_exact_control() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        out_dir: dir.path().to_path_buf(),
        samples: 3,
        stored_times: 4,
        seed: 5,
        split_fraction: 0.34,
        jobs: 1,
        ..DatasetConfig::feedback_default()
    };
    let m = generate_feedback_dataset(&cfg).unwrap();
    assert_eq!(m.sample_count, 12);
    assert_eq!(m.record_groups, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    assert!(m.amplitudes.iter().all(|a| (1.0..20.0).contains(a)));

    let ds = load_dataset(&manifest_path(dir.path(), "feedback")).unwrap();
    let OperatorData::Feedback(f) = &ds.data else { panic!("wrong kind") };
    let grid = TriGrid::new(21).unwrap();
    let tg = TimeGrid::new(cfg.dt, cfg.horizon, cfg.margin).unwrap();
    let spec = cfg.spec(m.sigmas[1]).unwrap();
    let slices = kernel_slices_at_steps(
        KernelKind::Direct,
        &spec,
        &GainSchedule::prescribed(8.0),
        grid,
        &tg,
        &m.stored_steps,
        KernelSolverOptions::default(),
    )
    .unwrap();
    for (j, k) in slices.iter().enumerate() {
        let r = 4 + j;
        assert_eq!(f.times[r], k.t);
        let v = StateVector::new(grid.space(), f.states.row(r).to_vec(), k.t).unwrap();
        let u = control_u(&control_gain(k), &v).unwrap();
        assert!((u - f.controls[r]).abs() <= 1e-12 * (1.0 + u.abs()), "t = {}: {u} vs {}", k.t, f.controls[r]);
    }
    let vg: Vec<usize> = ds.validation_records.iter().map(|r| m.record_groups[*r]).collect();
    assert!(ds.train_records.iter().all(|r| !vg.contains(&m.record_groups[*r])));
}

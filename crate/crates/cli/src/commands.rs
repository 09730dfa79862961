//! Subcommand bodies. Each takes fully resolved settings and returns the
//! process exit code, or an error that `exit_code` classifies.

use std::path::{Path, PathBuf};

use ptstab_core::analysis::{decay_envelope_check, practical_residual_bound, StabilityReport};
use ptstab_core::dataset::{
    generate_feedback_dataset, generate_kernel_dataset, load_dataset, manifest_path, DatasetKind,
};
use ptstab_core::io::write_json;
use ptstab_core::kernel::{solve_inverse_kernel_trajectory, KernelSolverOptions};
use ptstab_core::operator::{
    load_checkpoint, save_checkpoint, train as fit, CheckpointInfo, DeepOperator, FeedbackSurrogate, Head,
    KernelSurrogate, TrainReport,
};
use ptstab_core::plant::Controller;
use ptstab_core::transform::{control_gain, control_u};
use ptstab_core::{Error, Result};
use serde::Serialize;

use crate::checks::{self, CheckOutcome, Scenario};
use crate::settings::*;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn gen_data(s: &GenDataSettings) -> Result<i32> {
    let cfg = s.dataset_config()?;
    create_dir(&cfg.out_dir)?;
    let m = match s.kind {
        Kind::Kernel => generate_kernel_dataset(&cfg)?,
        Kind::Feedback => generate_feedback_dataset(&cfg)?,
    };
    println!(
        "wrote {} records ({} failed samples) to {}",
        m.sample_count,
        m.failures.len(),
        manifest_path(&cfg.out_dir, &cfg.name).display()
    );
    for f in &m.failures {
        println!("  sample {} sigma {:.6}: {}", f.index, f.sigma, f.message);
    }
    Ok(0)
}

/// A manifest file, or the single manifest (or the one named after `kind`)
/// inside a directory.
pub fn resolve_manifest(path: &Path, kind: Option<Kind>) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if !path.is_dir() {
        return Err(Error::InvalidInput(format!("no dataset at {}", path.display())));
    }
    if let Some(k) = kind {
        let named = manifest_path(path, kind_name(k));
        if named.is_file() {
            return Ok(named);
        }
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| io_err(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".manifest.json"))
        .collect();
    found.sort();
    match found.len() {
        1 => Ok(found.remove(0)),
        0 => Err(Error::InvalidInput(format!("no *.manifest.json in {}", path.display()))),
        _ => Err(Error::InvalidInput(format!("several manifests in {}; pass one file or --kind", path.display()))),
    }
}

/// Every manifest named by `paths`, expanding directories.
fn manifests(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if !p.is_dir() {
            out.push(p.clone());
            continue;
        }
        let mut found: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| io_err(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|f| f.to_string_lossy().ends_with(".manifest.json"))
            .collect();
        if found.is_empty() {
            return Err(Error::InvalidInput(format!("no *.manifest.json in {}", p.display())));
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn kind_name(k: Kind) -> &'static str {
    match k {
        Kind::Kernel => "kernel",
        Kind::Feedback => "feedback",
    }
}

fn head_of(kind: DatasetKind) -> (Head, Kind) {
    match kind {
        DatasetKind::KernelPairs => (Head::Kernel, Kind::Kernel),
        DatasetKind::FeedbackTriples => (Head::Feedback, Kind::Feedback),
    }
}

pub fn checkpoint_stem(s: &TrainSettings, kind: Kind) -> PathBuf {
    s.out.clone().unwrap_or_else(|| PathBuf::from("checkpoints").join(kind_name(kind)))
}

pub fn loss_csv_path(stem: &Path) -> PathBuf {
    let mut p = stem.as_os_str().to_owned();
    p.push(".loss.csv");
    p.into()
}

pub fn train(s: &TrainSettings, hash: &str) -> Result<(i32, TrainReport)> {
    let mut ds = load_dataset(&resolve_manifest(&s.data, s.kind)?)?;
    let (head, kind) = head_of(ds.manifest.kind);
    if s.kind.is_some_and(|k| k != kind) {
        return Err(Error::InvalidInput(format!("--kind {} does not match the {} corpus", kind_name(s.kind.unwrap()), kind_name(kind))));
    }
    let cfg = s.train_config(ds.manifest.split_fraction);
    if cfg.validation_fraction != ds.manifest.split_fraction {
        ds.resplit(cfg.validation_fraction)?;
    }
    let arch = s.arch.architecture(ds.manifest.horizon)?;
    let mut op = DeepOperator::new(head, ds.manifest.sensor_layout.clone(), &arch, cfg.seed)?;
    let report = fit(&mut op, &ds.train_data(), Some(&ds.validation_data()), &cfg)?;

    let stem = checkpoint_stem(s, kind);
    let info = CheckpointInfo {
        train_config: Some(cfg.clone()),
        final_train_mse: Some(report.final_train_mse),
        final_validation_rel_l2: report.final_validation_rel_l2,
    };
    save_checkpoint(&op, &info, &stem)?;
    let mut csv = format!("# {}\nepoch,loss\n", comment_line("train", hash));
    for (i, l) in report.loss_history.iter().enumerate() {
        csv.push_str(&format!("{},{:e}\n", i + 1, l));
    }
    let loss_path = loss_csv_path(&stem);
    std::fs::write(&loss_path, csv).map_err(|e| io_err(&loss_path, e))?;

    println!("trained {} operator on {} records for {} epochs", kind_name(kind), ds.train_records.len(), cfg.epochs);
    println!("final train MSE {:e}", report.final_train_mse);
    match report.final_validation_rel_l2 {
        Some(v) => println!("validation relative L2 error {v:e} on {} records", ds.validation_records.len()),
        None => println!("validation relative L2 error n/a"),
    }
    println!("moving-average loss monotone: {}", report.moving_average_monotone);
    println!("checkpoint {}", stem.display());
    Ok((0, report))
}

fn load_head(path: &Path, head: Head) -> Result<DeepOperator> {
    let (op, _) = load_checkpoint(path)?;
    if op.head != head {
        return Err(Error::InvalidInput(format!("checkpoint {} holds a {:?} operator, expected {:?}", path.display(), op.head, head)));
    }
    Ok(op)
}

fn controller_name(kind: ControllerKind) -> String {
    clap::ValueEnum::to_possible_value(&kind).map_or_else(|| format!("{kind:?}"), |v| v.get_name().to_string())
}

fn build_controller(
    kind: ControllerKind,
    s: &SimulateSettings,
    seed: u64,
    sc: &Scenario,
) -> Result<Controller> {
    let need_checkpoint = || {
        s.checkpoint.as_deref().ok_or_else(|| Error::InvalidInput(format!("controller {} needs --checkpoint", controller_name(kind))))
    };
    Ok(match kind {
        ControllerKind::OpenLoop => Controller::OpenLoop,
        ControllerKind::Analytic => sc.exact()?,
        ControllerKind::NoKernel => {
            Controller::NoKernel(KernelSurrogate::for_spec(load_head(need_checkpoint()?, Head::Kernel)?, &sc.spec)?)
        }
        ControllerKind::NoFeedback => {
            Controller::NoFeedback(FeedbackSurrogate::for_spec(load_head(need_checkpoint()?, Head::Feedback)?, &sc.spec)?)
        }
        ControllerKind::Perturbed => {
            if s.base == ControllerKind::Perturbed {
                return Err(Error::InvalidInput("base controller cannot itself be perturbed".into()));
            }
            if !(s.epsilon >= 0.0) {
                return Err(Error::InvalidInput(format!("epsilon = {} must be nonnegative", s.epsilon)));
            }
            Controller::perturbed(build_controller(s.base, s, seed, sc)?, s.epsilon, seed)
        }
    })
}

#[derive(Debug, Serialize)]
pub struct SimulationSummary {
    pub run_id: String,
    pub controller: String,
    pub config_hash: String,
    pub seed: u64,
    pub blown_up: bool,
    pub terminal_ratio: f64,
    pub max_ratio: f64,
    /// Largest gap between the applied control and the exact law on the
    /// visited states.
    pub epsilon_hat: f64,
    pub residual_bound: f64,
    pub stability: StabilityReport,
}

pub fn simulate(s: &SimulateSettings, seed: u64, hash: &str) -> Result<(i32, SimulationSummary)> {
    let sc = Scenario::new(&s.scenario)?;
    let ctrl = build_controller(s.controller, s, seed, &sc)?;
    let traj = sc.run(&ctrl)?;
    let run_id = s.run_id.clone().unwrap_or_else(|| ctrl.name().to_string());
    let comment = comment_line("simulate", hash);
    create_dir(&s.out)?;
    traj.write_csv(&s.out, &run_id, Some(&comment))?;

    let epsilon_hat = match &ctrl {
        Controller::OpenLoop => 0.0,
        _ => traj
            .controls
            .iter()
            .zip(&traj.states[1..])
            .zip(&sc.kernels.slices[1..])
            .map(|((u, v), k)| control_u(&control_gain(k), v).map(|exact| (u - exact).abs()))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max),
    };
    let l = solve_inverse_kernel_trajectory(&sc.spec, &sc.sched, sc.grid, &sc.tg, KernelSolverOptions::default())?;
    let stability = decay_envelope_check(&traj, &sc.kernels, &l, &sc.sched, sc.spec.theta, epsilon_hat)?;
    stability.write_csv(&s.out.join(format!("{run_id}_stability.csv")), Some(&comment))?;
    let v0 = traj.states[0].l2_norm();
    let summary = SimulationSummary {
        run_id: run_id.clone(),
        controller: ctrl.name().into(),
        config_hash: hash.into(),
        seed,
        blown_up: traj.blown_up,
        terminal_ratio: traj.terminal_ratio(),
        max_ratio: traj.l2_norms().into_iter().fold(0.0, f64::max) / v0,
        epsilon_hat,
        residual_bound: practical_residual_bound(epsilon_hat, s.scenario.horizon, stability.c_vw.sqrt())?,
        stability,
    };
    write_json(&s.out.join(format!("{run_id}_report.json")), &summary)?;

    println!("controller {} run {}", summary.controller, run_id);
    println!("terminal ratio {:e} at t = {}", summary.terminal_ratio, traj.final_state().t);
    println!("max ratio {:e}, blown_up {}", summary.max_ratio, summary.blown_up);
    println!(
        "envelopes: w {}, v {}; epsilon_hat {:e}, residual bound {:e}",
        summary.stability.w_envelope_pass, summary.stability.v_envelope_pass, epsilon_hat, summary.residual_bound
    );
    Ok((0, summary))
}

fn write_epsilon_table(rows: &[checks::EpsilonRow], path: &Path, comment: &str) -> Result<()> {
    let mut csv = format!("# {comment}\nepsilon,terminal_norm,terminal_ratio\n");
    for r in rows {
        csv.push_str(&format!("{:e},{:e},{:e}\n", r.epsilon, r.terminal_norm, r.terminal_ratio));
    }
    std::fs::write(path, csv).map_err(|e| io_err(path, e))
}

/// Runs the check suite. Corrupt data fails with exit 3, any other failed
/// check with exit 2.
pub fn verify(s: &VerifySettings, seed: u64, hash: &str) -> Result<(i32, Vec<CheckOutcome>)> {
    let mut out = Vec::new();
    let report = |o: CheckOutcome, out: &mut Vec<CheckOutcome>| {
        println!("{o}");
        out.push(o);
    };
    let mut corrupt = false;
    for path in manifests(&s.data)? {
        let start = std::time::Instant::now();
        let (pass, detail) = match load_dataset(&path) {
            Ok(ds) => (true, format!("{} records, checksums match", ds.manifest.sample_count)),
            Err(e) => {
                corrupt |= matches!(e, Error::Corruption { .. } | Error::Io { .. } | Error::Format(_) | Error::Json(_));
                (false, e.to_string())
            }
        };
        report(
            CheckOutcome { label: "data".into(), name: path.display().to_string(), pass, detail, seconds: start.elapsed().as_secs_f64() },
            &mut out,
        );
    }

    report(checks::kernel_reciprocity()?, &mut out);
    report(checks::transform_round_trip()?, &mut out);
    let sc = Scenario::new(&s.scenario)?;
    let (o, closed) = checks::prescribed_time(&sc)?;
    report(o, &mut out);
    report(checks::target_fidelity(&sc, &closed)?, &mut out);
    report(checks::decay_envelope(&sc, &closed)?, &mut out);
    if s.epsilon_scaling || !s.quick {
        let (o, rows) = checks::epsilon_scaling(&sc, seed)?;
        report(o, &mut out);
        if s.epsilon_scaling {
            create_dir(&s.out)?;
            let p = s.out.join("epsilon_scaling.csv");
            write_epsilon_table(&rows, &p, &comment_line("verify", hash))?;
            println!("epsilon table {}", p.display());
        }
    }
    if let Some(ck) = &s.checkpoint {
        let (op, manifest) = load_checkpoint(ck)?;
        match op.head {
            Head::Kernel => {
                let epochs = manifest.train_config.as_ref().map(|c| c.epochs);
                let sigmas = checks::held_out_sigmas(99)?;
                report(checks::surrogate_accuracy(&op, &s.scenario, manifest.final_train_mse, epochs, &sigmas)?, &mut out);
                report(checks::surrogate_closed_loop(&sc, &op)?.0, &mut out);
            }
            Head::Feedback => {
                let sur = FeedbackSurrogate::for_spec(op, &sc.spec)?;
                let start = std::time::Instant::now();
                let traj = sc.run(&Controller::NoFeedback(sur))?;
                let ratio = traj.terminal_ratio();
                report(
                    CheckOutcome {
                        label: "feedback".into(),
                        name: "feedback surrogate closed loop".into(),
                        pass: ratio <= 5e-2 && !traj.blown_up,
                        detail: format!("terminal ratio {ratio:e} (<= 5e-2)"),
                        seconds: start.elapsed().as_secs_f64(),
                    },
                    &mut out,
                );
            }
        }
    }
    report(checks::gradient_oracle()?, &mut out);

    let failed = out.iter().filter(|o| !o.pass).count();
    println!("{} of {} checks passed", out.len() - failed, out.len());
    let code = if corrupt {
        3
    } else if failed > 0 {
        2
    } else {
        0
    };
    Ok((code, out))
}

pub fn bench(s: &BenchSettings, hash: &str) -> Result<(i32, CheckOutcome)> {
    let op = load_head(&s.checkpoint, Head::Kernel)?;
    let (o, table) = checks::speedup(&op, &s.bench)?;
    create_dir(&s.out)?;
    let csv = s.out.join("bench.csv");
    table.write(&csv, &s.out.join("bench.json"), Some(&comment_line("bench", hash)))?;
    print!("{}", table.to_csv(None));
    println!("{}", table.environment);
    println!("{o}");
    Ok((0, o))
}

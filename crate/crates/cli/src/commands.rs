use std::f64::consts::FRAC_1_SQRT_2;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use qrobot::action_kernel::{KernelKind, KernelSet};
use qrobot::config_space::Register;
use qrobot::evolution::{evolve_with, evolve_with_records, load_state, save_state, EvolveOptions, StateFile};
use qrobot::operator::{
    assemble_step_operator, audit_unitarity, build_environment_step, build_hash, build_step_operator,
    compose_environment, hash_hex, load_operator, save_operator, start_index, AuditMethod, EnvironmentSpec,
    StepOperator, UNITARITY_TOLERANCE,
};
use qrobot::paths::{enumerate_phase_paths, write_paths_json};
use qrobot::stats::{
    accuracy_sweep, correlation_fidelity, distance_distributions, write_distance_csv, write_sweep_csv, SweepScenario,
};
use qrobot::task_machine::{audit_injectivity, compile_task};
use qrobot::{C64, TOOL_VERSION};
use serde::Serialize;

use crate::config::{RunConfig, Validated};
use crate::{CliError, Common};

fn load_config(common: &Common) -> Result<Validated, CliError> {
    let path = common.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    RunConfig::load(path)?.validate()
}

fn out_dir(common: &Common, cfg: Option<&Validated>) -> Result<PathBuf, CliError> {
    let dir = match (&common.out, cfg) {
        (Some(d), _) => d.clone(),
        (None, Some(v)) => v.raw.output.directory.clone(),
        (None, None) => PathBuf::from("out"),
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn expected_hash(v: &Validated) -> [u8; 32] {
    build_hash(&v.params, Some(&v.kernel), &v.environment)
}

/// Loads `--operator` and checks it against the configuration, or builds
/// the operator in memory when no file is given.
fn operator_for(common: &Common, v: &Validated) -> Result<StepOperator, CliError> {
    match &common.operator {
        Some(path) => {
            let op = load_operator(path)?;
            if op.build_hash() != expected_hash(v) {
                return Err(CliError::Config(format!("{} was built from a different configuration", path.display())));
            }
            Ok(op)
        }
        None => {
            let op = build_step_operator(v.params, &v.kernel)?;
            if v.environment == EnvironmentSpec::None {
                Ok(op)
            } else {
                Ok(compose_environment(&op, &build_environment_step(&v.environment, &v.params)?)?)
            }
        }
    }
}

pub fn build(common: &Common) -> Result<(), CliError> {
    let v = load_config(common)?;
    let dir = out_dir(common, Some(&v))?;
    let table = compile_task(v.params);
    let injectivity = audit_injectivity(&table);
    let kernels = KernelSet::build(&v.kernel, v.params.lattice())?;
    let mut op = assemble_step_operator(&table, &kernels)?;
    let mut failures = Vec::new();
    if audit_unitarity(&mut op).is_err() {
        failures.push("unitarity");
    }
    if failures.is_empty() && v.environment != EnvironmentSpec::None {
        let env = build_environment_step(&v.environment, &v.params)?;
        match compose_environment(&op, &env) {
            Ok(composed) => op = composed,
            Err(qrobot::Error::AuditFailure { .. }) => failures.push("composed unitarity"),
            Err(e) => return Err(e.into()),
        }
    }
    if !injectivity.is_injective() {
        failures.push("injectivity");
    }

    let mut report = create(&dir.join("audit.txt"))?;
    writeln!(report, "# config={} tool={TOOL_VERSION}", v.hash)?;
    writeln!(report, "lattice: {}", v.params.lattice())?;
    writeln!(report, "memory_bits: {}", v.params.memory_bits())?;
    writeln!(report, "dimension: {}", op.dimension())?;
    writeln!(report, "nonzeros: {}", op.nonzeros())?;
    writeln!(report, "environment: {:?}", op.environment())?;
    let audit = op.audit().expect("audit has run");
    let method = match audit.method {
        AuditMethod::ColumnGram => "exact column Gram",
        AuditMethod::FactorBound => "factor bound",
    };
    writeln!(report, "unitarity_method: {method}")?;
    writeln!(report, "unitarity_deviation: {:e}", audit.deviation)?;
    writeln!(report, "unitarity_tolerance: {UNITARITY_TOLERANCE:e}")?;
    writeln!(report, "injectivity_rows_checked: {}", injectivity.rows_checked)?;
    writeln!(report, "injectivity_collisions: {}", injectivity.collisions.len())?;
    for c in injectivity.collisions.iter().take(10) {
        writeln!(report, "collision: obs={} rows {:?} and {:?} -> {:?}", c.obs, c.first, c.second, c.successor)?;
    }
    if failures.is_empty() {
        writeln!(report, "result: PASS")?;
    } else {
        writeln!(report, "result: FAIL ({})", failures.join(", "))?;
    }
    report.flush()?;
    if !failures.is_empty() {
        return Err(CliError::Audit(failures.join(", ")));
    }
    save_operator(&op, &dir.join("operator.qrop"))?;
    Ok(())
}

pub fn run(common: &Common) -> Result<(), CliError> {
    let v = load_config(common)?;
    if common.operator.is_none() {
        return Err(CliError::Config("--operator is required".into()));
    }
    let op = operator_for(common, &v)?;
    let dir = out_dir(common, Some(&v))?;
    let psi0 = v.initial.build(&v.params)?;
    let opts = EvolveOptions { chop: v.raw.run.chop };
    let records = evolve_with_records(&op, &psi0, v.raw.run.steps, &v.selectors, &opts)?;
    for (i, sel) in records.selectors.iter().enumerate() {
        let regs: Vec<Register> = sel.registers().collect();
        let names: Vec<&str> = regs.iter().map(|r| r.name()).collect();
        let mut w = create(&dir.join(format!("records_{}.csv", names.join("_"))))?;
        writeln!(w, "# config={} tool={TOOL_VERSION}", v.hash)?;
        writeln!(w, "step,{},probability", names.join(","))?;
        for (step, marginals) in records.series.iter().enumerate() {
            for (key, p) in &marginals[i].table {
                let cells: Vec<String> = regs.iter().zip(key).map(|(r, &val)| r.format_value(val)).collect();
                writeln!(w, "{step},{},{p}", cells.join(","))?;
            }
        }
        w.flush()?;
    }
    let evolution = records.evolution;
    let mut summary = create(&dir.join("run.txt"))?;
    writeln!(summary, "# config={} tool={TOOL_VERSION}", v.hash)?;
    writeln!(summary, "steps: {}", evolution.steps)?;
    writeln!(summary, "chop: {}", opts.chop)?;
    writeln!(summary, "max_norm_drift: {:e}", evolution.max_drift)?;
    writeln!(summary, "final_norm_squared: {}", evolution.state.norm_sqr())?;
    summary.flush()?;
    let file = StateFile { hash: op.build_hash(), step: evolution.steps as u64, state: evolution.state };
    save_state(&file, &dir.join("state.qrsv"))?;
    Ok(())
}

#[derive(Serialize)]
struct FidelityDoc {
    config_hash: String,
    tool_version: &'static str,
    k: u64,
    robot_origin: usize,
    fidelity: f64,
    completed_mass: f64,
    coherence_max: f64,
    coherence_l1: f64,
}

pub fn stats(common: &Common) -> Result<(), CliError> {
    let v = match &common.config {
        Some(_) => Some(load_config(common)?),
        None => None,
    };
    let file = match (&common.state, &v) {
        (Some(path), _) => {
            let file = load_state(path)?;
            if let Some(v) = &v {
                if file.hash != expected_hash(v) {
                    return Err(CliError::Config(format!("{} was produced by a different configuration", path.display())));
                }
            }
            file
        }
        (None, Some(v)) => {
            let op = operator_for(common, v)?;
            let psi0 = v.initial.build(&v.params)?;
            let ev = evolve_with(&op, &psi0, v.raw.run.steps, &EvolveOptions { chop: v.raw.run.chop })?;
            StateFile { hash: op.build_hash(), step: ev.steps as u64, state: ev.state }
        }
        (None, None) => return Err(CliError::Config("stats needs --state or --config".into())),
    };
    let hash = v.as_ref().map_or_else(|| hash_hex(&file.hash), |v| v.hash.clone());
    let dir = out_dir(common, v.as_ref())?;
    let dists = distance_distributions(&file.state, file.step as usize);
    let mut w = create(&dir.join("distances.csv"))?;
    write_distance_csv(&mut w, &hash, &dists)?;
    w.flush()?;
    if let Some(v) = &v {
        let origin = v.robot_origin()?;
        let f = correlation_fidelity(&file.state, origin);
        let doc = FidelityDoc {
            config_hash: hash,
            tool_version: TOOL_VERSION,
            k: file.step,
            robot_origin: origin,
            fidelity: f.fidelity,
            completed_mass: f.completed_mass,
            coherence_max: f.coherence_max,
            coherence_l1: f.coherence_l1,
        };
        let mut w = create(&dir.join("fidelity.json"))?;
        serde_json::to_writer_pretty(&mut w, &doc)?;
        writeln!(w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn paths(common: &Common, steps: Option<usize>, epsilon: Option<f64>) -> Result<(), CliError> {
    let v = load_config(common)?;
    let (y, x) = v.basis_start()?;
    let n = steps.unwrap_or(v.raw.run.steps);
    let epsilon = epsilon.or(v.raw.analyses.paths.as_ref().map(|p| p.epsilon)).unwrap_or(0.0);
    let op = operator_for(common, &v)?;
    let set = enumerate_phase_paths(&op, start_index(&v.params, y, x)?, n, epsilon)?;
    let dir = out_dir(common, Some(&v))?;
    let mut w = create(&dir.join("paths.json"))?;
    write_paths_json(&set, &v.hash, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn sweep(common: &Common) -> Result<(), CliError> {
    let v = load_config(common)?;
    let (alphas, ks) = match &v.raw.analyses.sweep {
        Some(s) => (s.alphas.clone(), s.ks.clone()),
        None => (vec![1.0, 2.0, 4.0, 8.0], vec![v.raw.run.steps]),
    };
    let (a0, a1) = match v.kernel.kind {
        KernelKind::Gaussian { .. } => (v.kernel.a0, v.kernel.a1),
        KernelKind::Strict => (C64::new(FRAC_1_SQRT_2, 0.0), C64::new(FRAC_1_SQRT_2, 0.0)),
    };
    let scenario = SweepScenario { params: v.params, environment: v.environment, initial: v.initial.clone(), a0, a1 };
    let rows = accuracy_sweep(&scenario, &alphas, &ks, true)?;
    let dir = out_dir(common, Some(&v))?;
    let mut w = create(&dir.join("sweep.csv"))?;
    write_sweep_csv(&mut w, &v.hash, &rows)?;
    w.flush()?;
    Ok(())
}

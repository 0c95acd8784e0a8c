//! Iteration `Ψ(n) = 𝒯ⁿ Ψ(0)`, initial states and the state file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::*;
use crate::config_space::{Configuration, Marginal, StateVector, SubsystemSelector, SystemParams};
use crate::operator::StepOperator;
use crate::{Error, Result, C64};

/// Amplitudes below this magnitude are dropped when chopping is enabled.
pub const CHOP_THRESHOLD: f64 = 1e-14;
/// Norm drift that aborts an evolution.
pub const DRIFT_LIMIT: f64 = 1e-6;
const NORMALIZATION_TOLERANCE: f64 = 1e-12;

const STATE_MAGIC: &[u8; 4] = b"QRSV";
const STATE_VERSION: u32 = 1;

/// Amplitudes over lattice sites for the particle or the robot.
#[derive(Clone, Debug, PartialEq)]
pub enum SiteAmplitudes {
    /// Explicit `(site, amplitude)` pairs; must be normalized.
    List(Vec<(usize, C64)>),
    /// Real Gaussian packet `exp(−Δ²/4σ²)` in the periodic distance Δ to
    /// `center`, normalized over the lattice.
    Packet { center: f64, width: f64 },
}

impl SiteAmplitudes {
    pub fn site(y: usize) -> Self {
        SiteAmplitudes::List(vec![(y, C64::new(1.0, 0.0))])
    }

    /// Dense amplitude vector of length `lattice`.
    pub fn resolve(&self, lattice: usize, what: &str) -> Result<Vec<C64>> {
        let mut out = vec![C64::new(0.0, 0.0); lattice];
        match self {
            SiteAmplitudes::List(entries) => {
                if entries.is_empty() {
                    return Err(Error::InvalidInitialState(format!("{what} amplitude list is empty")));
                }
                for &(site, a) in entries {
                    if site >= lattice {
                        return Err(Error::InvalidInitialState(format!(
                            "{what} site {site} outside lattice of {lattice}"
                        )));
                    }
                    out[site] += a;
                }
                let norm: f64 = out.iter().map(|a| a.norm_sqr()).sum();
                if (norm - 1.0).abs() > NORMALIZATION_TOLERANCE {
                    return Err(Error::InvalidInitialState(format!(
                        "{what} amplitudes have squared norm {norm}"
                    )));
                }
            }
            &SiteAmplitudes::Packet { center, width } => {
                if !(width > 0.0) || !width.is_finite() || !center.is_finite() {
                    return Err(Error::InvalidInitialState(format!(
                        "{what} packet needs a finite centre and positive width"
                    )));
                }
                let l = lattice as f64;
                for (site, a) in out.iter_mut().enumerate() {
                    let raw = (site as f64 - center).rem_euclid(l);
                    let dist = raw.min(l - raw);
                    *a = C64::new((-dist * dist / (4.0 * width * width)).exp(), 0.0);
                }
                let norm = out.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
                for a in &mut out {
                    *a /= norm;
                }
            }
        }
        Ok(out)
    }

    /// Reference site: the single site of a one-entry list, otherwise the
    /// first site of largest weight.
    pub fn origin(&self, lattice: usize) -> Result<usize> {
        let amps = self.resolve(lattice, "site")?;
        let mut best = 0;
        for (i, a) in amps.iter().enumerate() {
            if a.norm_sqr() > amps[best].norm_sqr() {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Product initial state `Σ c_y d_x |y, x, start⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialStateSpec {
    pub particle: SiteAmplitudes,
    pub robot: SiteAmplitudes,
}

impl InitialStateSpec {
    pub fn sites(y: usize, x: usize) -> Self {
        Self { particle: SiteAmplitudes::site(y), robot: SiteAmplitudes::site(x) }
    }

    pub fn build(&self, params: &SystemParams) -> Result<StateVector> {
        let l = params.lattice();
        let c = self.particle.resolve(l, "particle")?;
        let d = self.robot.resolve(l, "robot")?;
        let mut psi = StateVector::zeros(*params);
        let amps = psi.amplitudes_mut();
        for (y, cy) in c.iter().enumerate() {
            for (x, dx) in d.iter().enumerate() {
                let a = cy * dx;
                if a != C64::new(0.0, 0.0) {
                    amps[params.encode(&Configuration::start(y, x))?] = a;
                }
            }
        }
        Ok(psi)
    }

    pub fn robot_origin(&self, lattice: usize) -> Result<usize> {
        self.robot.origin(lattice)
    }

    pub fn particle_origin(&self, lattice: usize) -> Result<usize> {
        self.particle.origin(lattice)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvolveOptions {
    /// Drop amplitudes below [`CHOP_THRESHOLD`] after every step.
    pub chop: bool,
}

/// Final state plus the norm bookkeeping of a run.
#[derive(Clone, Debug)]
pub struct Evolution {
    pub state: StateVector,
    pub steps: usize,
    /// Largest `|‖Ψ(n)‖² − ‖Ψ(0)‖²|` seen along the run.
    pub max_drift: f64,
}

fn check_inputs(op: &StepOperator, psi0: &StateVector) -> Result<f64> {
    if psi0.params() != op.params() {
        return Err(Error::DimensionMismatch { expected: op.dimension(), found: psi0.amplitudes().len() });
    }
    let norm = psi0.norm_sqr();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInitialState(format!("squared norm {norm} is not 1")));
    }
    Ok(norm)
}

fn run(
    op: &StepOperator,
    psi0: &StateVector,
    steps: usize,
    opts: &EvolveOptions,
    mut each: impl FnMut(usize, &StateVector),
) -> Result<Evolution> {
    let start_norm = check_inputs(op, psi0)?;
    let mut cur = psi0.clone();
    let mut next = StateVector::zeros(*op.params());
    let mut max_drift: f64 = 0.0;
    each(0, &cur);
    for step in 1..=steps {
        op.apply(cur.amplitudes(), next.amplitudes_mut());
        std::mem::swap(&mut cur, &mut next);
        if opts.chop {
            cur.chop(CHOP_THRESHOLD);
        }
        let drift = (cur.norm_sqr() - start_norm).abs();
        max_drift = max_drift.max(drift);
        if drift > DRIFT_LIMIT {
            return Err(Error::NormDrift { step, drift });
        }
        each(step, &cur);
    }
    Ok(Evolution { state: cur, steps, max_drift })
}

/// Applies `𝒯` `steps` times to a normalized state.
pub fn evolve(op: &StepOperator, psi0: &StateVector, steps: usize) -> Result<StateVector> {
    Ok(run(op, psi0, steps, &EvolveOptions::default(), |_, _| ())?.state)
}

pub fn evolve_with(op: &StepOperator, psi0: &StateVector, steps: usize, opts: &EvolveOptions) -> Result<Evolution> {
    run(op, psi0, steps, opts, |_, _| ())
}

/// Calls `visit` with the state after every step, including step 0.
pub fn evolve_visit(
    op: &StepOperator,
    psi0: &StateVector,
    steps: usize,
    opts: &EvolveOptions,
    visit: impl FnMut(usize, &StateVector),
) -> Result<Evolution> {
    run(op, psi0, steps, opts, visit)
}

/// Marginal time series; `series[step][i]` belongs to `selectors[i]`.
#[derive(Clone, Debug)]
pub struct Records {
    pub selectors: Vec<SubsystemSelector>,
    pub series: Vec<Vec<Marginal>>,
    pub evolution: Evolution,
}

pub fn evolve_with_records(
    op: &StepOperator,
    psi0: &StateVector,
    steps: usize,
    selectors: &[SubsystemSelector],
    opts: &EvolveOptions,
) -> Result<Records> {
    let mut series = Vec::with_capacity(steps + 1);
    let evolution = run(op, psi0, steps, opts, |_, psi| {
        series.push(selectors.iter().map(|&s| psi.marginal(s)).collect());
    })?;
    Ok(Records { selectors: selectors.to_vec(), series, evolution })
}

/// A state vector as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StateFile {
    /// Build hash of the operator that produced the state.
    pub hash: [u8; 32],
    pub step: u64,
    pub state: StateVector,
}

pub fn write_state(file: &StateFile, w: &mut impl Write) -> Result<()> {
    let p = file.state.params();
    w.write_all(STATE_MAGIC)?;
    put_u32(w, STATE_VERSION)?;
    w.write_all(&file.hash)?;
    put_u32(w, p.lattice() as u32)?;
    put_u32(w, p.memory_bits())?;
    put_u64(w, file.step)?;
    put_u64(w, p.dimension() as u64)?;
    for &a in file.state.amplitudes() {
        put_c64(w, a)?;
    }
    Ok(())
}

pub fn read_state(r: &mut impl Read) -> Result<StateFile> {
    expect_magic(r, STATE_MAGIC)?;
    let version = get_u32(r)?;
    if version != STATE_VERSION {
        return Err(Error::Format(format!("unsupported state version {version}")));
    }
    let hash: [u8; 32] = get_bytes(r)?;
    let params = SystemParams::new(get_u32(r)? as usize, get_u32(r)?)?;
    let step = get_u64(r)?;
    let dim = get_u64(r)? as usize;
    if dim != params.dimension() {
        return Err(Error::DimensionMismatch { expected: params.dimension(), found: dim });
    }
    let mut amps = Vec::with_capacity(dim);
    for _ in 0..dim {
        amps.push(get_c64(r)?);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after state amplitudes".into()));
    }
    Ok(StateFile { hash, step, state: StateVector::from_amplitudes(params, amps)? })
}

pub fn save_state(file: &StateFile, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_state(file, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<StateFile> {
    read_state(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_kernel::KernelSpec;
    use crate::config_space::{Node, Output, Register};
    use crate::operator::build_step_operator;

    fn strict(l: usize, n: u32) -> StepOperator {
        build_step_operator(SystemParams::new(l, n).unwrap(), &KernelSpec::strict()).unwrap()
    }

    #[test]
    fn zero_steps_is_identity() {
        let op = strict(4, 1);
        let psi = InitialStateSpec::sites(2, 1).build(op.params()).unwrap();
        assert_eq!(evolve(&op, &psi, 0).unwrap(), psi);
    }

    #[test]
    fn first_step_enters_s1() {
        let op = strict(8, 3);
        let psi = InitialStateSpec::sites(4, 2).build(op.params()).unwrap();
        let out = evolve(&op, &psi, 1).unwrap();
        let expect = Configuration { node: Node::S1, ..Configuration::start(4, 2) };
        assert_eq!(out.amplitude(&expect).unwrap(), C64::new(1.0, 0.0));
    }

    #[test]
    fn packet_is_normalized_and_peaked() {
        let amps = SiteAmplitudes::Packet { center: 3.0, width: 1.0 }.resolve(8, "robot").unwrap();
        let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        assert!((norm - 1.0).abs() < 1e-14);
        assert_eq!(SiteAmplitudes::Packet { center: 3.0, width: 1.0 }.origin(8).unwrap(), 3);
        assert!((amps[2].re - amps[4].re).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_list_is_rejected() {
        let spec = InitialStateSpec {
            particle: SiteAmplitudes::List(vec![(1, C64::new(0.5, 0.0))]),
            robot: SiteAmplitudes::site(0),
        };
        assert!(matches!(spec.build(&SystemParams::new(4, 1).unwrap()), Err(Error::InvalidInitialState(_))));
    }

    #[test]
    fn motionless_particle_marginal_is_constant() {
        let op = strict(4, 1);
        let spec = InitialStateSpec {
            particle: SiteAmplitudes::List(vec![(1, C64::new(0.6, 0.0)), (3, C64::new(0.0, 0.8))]),
            robot: SiteAmplitudes::site(0),
        };
        let psi = spec.build(op.params()).unwrap();
        let y = SubsystemSelector::single(Register::Y);
        let o = SubsystemSelector::single(Register::O);
        let rec = evolve_with_records(&op, &psi, 20, &[y, o], &EvolveOptions::default()).unwrap();
        assert_eq!(rec.series.len(), 21);
        for step in &rec.series {
            assert!((step[0].get(&[1]) - 0.36).abs() < 1e-12);
            assert!((step[0].get(&[3]) - 0.64).abs() < 1e-12);
        }
        assert_eq!(rec.series[0][1].get(&[Output::Mr1.index() as i64]), 1.0);
    }

    #[test]
    fn state_file_roundtrip() {
        let op = strict(4, 1);
        let psi = InitialStateSpec::sites(2, 1).build(op.params()).unwrap();
        let file = StateFile { hash: op.build_hash(), step: 7, state: evolve(&op, &psi, 7).unwrap() };
        let mut buf = Vec::new();
        write_state(&file, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"QRSV");
        assert_eq!(read_state(&mut buf.as_slice()).unwrap(), file);
        buf.push(0);
        assert!(read_state(&mut buf.as_slice()).is_err());
    }
}

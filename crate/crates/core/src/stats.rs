//! Outcome statistics of the distance task.
//!
//! A branch counts as completed once `o ≠ MR1`; its outcome is the permanent
//! memory `s`. The literal distribution counts every completed branch. The
//! valid variant keeps only branches that found the particle, i.e. with
//! `o ∈ {ML1, DN, MLINF}`.

use std::collections::BTreeMap;
use std::io::Write;

use crate::action_kernel::{KernelKind, KernelSpec};
use crate::config_space::{Configuration, InternalState, Output, StateVector, SystemParams};
use crate::evolution::{evolve, evolve_visit, EvolveOptions, InitialStateSpec};
use crate::operator::{build_environment_step, build_step_operator, compose_environment, EnvironmentSpec, StepOperator};
use crate::{Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Literal,
    Valid,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Literal => "literal",
            Variant::Valid => "valid",
        }
    }

    fn counts(self, o: Output) -> bool {
        match self {
            Variant::Literal => o != Output::Mr1,
            Variant::Valid => matches!(o, Output::Ml1 | Output::Dn | Output::MlInf),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceDistribution {
    pub k: usize,
    pub variant: Variant,
    /// `probabilities[n]` for `n` in `0..2^N`.
    pub probabilities: Vec<f64>,
    pub completed_mass: f64,
}

impl DistanceDistribution {
    pub fn get(&self, n: usize) -> f64 {
        self.probabilities.get(n).copied().unwrap_or(0.0)
    }

    /// First `n` of largest probability, with that probability.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0, self.probabilities[0]);
        for (n, &p) in self.probabilities.iter().enumerate() {
            if p > best.1 {
                best = (n, p);
            }
        }
        best
    }

    /// Root-mean-square deviation of `n` from `target`, normalized by the
    /// completed mass. NaN when nothing has completed.
    pub fn rms_spread(&self, target: usize) -> f64 {
        let second: f64 = self
            .probabilities
            .iter()
            .enumerate()
            .map(|(n, p)| p * (n as f64 - target as f64).powi(2))
            .sum();
        (second / self.completed_mass).sqrt()
    }
}

/// `P_k(n) = ⟨Ψ| P_n^s (1 − P_MR1^o) |Ψ⟩`, or its valid variant.
pub fn distance_distribution(psi: &StateVector, k: usize, variant: Variant) -> DistanceDistribution {
    let p = psi.params();
    let mut probabilities = vec![0.0; p.s_radix()];
    for (i, a) in psi.support() {
        let cfg = p.decode(i).expect("index below dimension");
        if variant.counts(cfg.o) {
            probabilities[cfg.s as usize] += a.norm_sqr();
        }
    }
    let completed_mass = probabilities.iter().sum();
    DistanceDistribution { k, variant, probabilities, completed_mass }
}

/// Both variants, literal first.
pub fn distance_distributions(psi: &StateVector, k: usize) -> [DistanceDistribution; 2] {
    [distance_distribution(psi, k, Variant::Literal), distance_distribution(psi, k, Variant::Valid)]
}

fn require_motionless(op: &StepOperator) -> Result<()> {
    if op.is_motionless() && op.environment().is_motionless() {
        Ok(())
    } else {
        Err(Error::MovingEnvironment)
    }
}

/// Distribution for a particle at a definite site: evolves `psi0` and
/// measures. Needs a motionless environment.
pub fn conditional_distance_distribution(
    op: &StepOperator,
    psi0: &StateVector,
    k: usize,
    variant: Variant,
) -> Result<DistanceDistribution> {
    require_motionless(op)?;
    let p = psi0.params();
    let mut site = None;
    for (i, _) in psi0.support() {
        let y = p.unpack(i).0;
        match site {
            None => site = Some(y),
            Some(s) if s != y => {
                return Err(Error::InvalidInitialState("particle is not at a definite site".into()));
            }
            _ => {}
        }
    }
    if site.is_none() {
        return Err(Error::InvalidInitialState("zero state".into()));
    }
    Ok(distance_distribution(&evolve(op, psi0, k)?, k, variant))
}

/// `⟨Θ_k(x′, y)| P_n^s (1 − P_MR1^o) |Θ_k(x, y)⟩` for every `n`.
pub fn coherence_decomposition(
    op: &StepOperator,
    x: usize,
    x_prime: usize,
    y: usize,
    k: usize,
) -> Result<Vec<C64>> {
    require_motionless(op)?;
    let p = *op.params();
    let a = evolve(op, &StateVector::basis(p, &Configuration::start(y, x))?, k)?;
    let b = if x_prime == x { a.clone() } else { evolve(op, &StateVector::basis(p, &Configuration::start(y, x_prime))?, k)? };
    let mut out = vec![C64::new(0.0, 0.0); p.s_radix()];
    for (i, ai) in a.support() {
        let cfg = p.decode(i).expect("index below dimension");
        if cfg.o != Output::Mr1 {
            out[cfg.s as usize] += b.amplitudes()[i].conj() * ai;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fidelity {
    /// Probability that a completed branch holds `s = (y − x₀) mod L`.
    pub fidelity: f64,
    pub completed_mass: f64,
    /// Largest off-diagonal magnitude of the completed part's reduced state
    /// on `(y, s)`.
    pub coherence_max: f64,
    /// Sum of off-diagonal magnitudes of the same matrix.
    pub coherence_l1: f64,
}

/// Classical `y ↔ s` agreement plus the `(y, s)` coherence diagnostic.
pub fn correlation_fidelity(psi: &StateVector, robot_origin: usize) -> Fidelity {
    let p = psi.params();
    let l = p.lattice();
    let sr = p.s_radix();
    let mut fidelity = 0.0;
    let mut completed = 0.0;
    // Completed amplitudes grouped by the registers traced out.
    let mut groups: BTreeMap<(usize, usize, u8), Vec<(usize, C64)>> = BTreeMap::new();
    for (i, a) in psi.support() {
        let cfg = p.decode(i).expect("index below dimension");
        if cfg.o == Output::Mr1 {
            continue;
        }
        completed += a.norm_sqr();
        if cfg.s as usize == (cfg.y + l - robot_origin % l) % l {
            fidelity += a.norm_sqr();
        }
        let rest_internal = p.internal_index(InternalState { s: 0, ..cfg.internal() });
        let (x, c) = (cfg.x, cfg.c);
        groups.entry((x, rest_internal, c)).or_default().push((cfg.y * sr + cfg.s as usize, a));
    }
    let n = l * sr;
    let mut rho = vec![C64::new(0.0, 0.0); n * n];
    for entries in groups.values() {
        for &(u, a) in entries {
            for &(v, b) in entries {
                if u != v {
                    rho[u * n + v] += a * b.conj();
                }
            }
        }
    }
    let mags = rho.iter().map(|z| z.norm());
    let (coherence_max, coherence_l1) = mags.fold((0.0f64, 0.0), |(m, s), z| (m.max(z), s + z));
    Fidelity { fidelity, completed_mass: completed, coherence_max, coherence_l1 }
}

/// Scenario for [`accuracy_sweep`].
#[derive(Clone, Debug, PartialEq)]
pub struct SweepScenario {
    pub params: SystemParams,
    pub environment: EnvironmentSpec,
    pub initial: InitialStateSpec,
    /// Kernel amplitudes used for the Gaussian rows.
    pub a0: C64,
    pub a1: C64,
}

impl SweepScenario {
    /// `(y₀ − x₀) mod L` from the packet origins.
    pub fn target(&self) -> Result<usize> {
        let l = self.params.lattice();
        Ok((self.initial.particle_origin(l)? + l - self.initial.robot_origin(l)?) % l)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// `None` for the strict kernel.
    pub alpha: Option<f64>,
    pub k: usize,
    pub argmax: usize,
    pub peak_mass: f64,
    pub rms_spread: f64,
}

fn sweep_kernel(scenario: &SweepScenario, kernel: &KernelSpec, ks: &[usize]) -> Result<Vec<SweepRow>> {
    let p = scenario.params;
    let mut op = build_step_operator(p, kernel)?;
    if scenario.environment != EnvironmentSpec::None {
        op = compose_environment(&op, &build_environment_step(&scenario.environment, &p)?)?;
    }
    let psi0 = scenario.initial.build(&p)?;
    let target = scenario.target()?;
    let alpha = match kernel.kind {
        KernelKind::Strict => None,
        KernelKind::Gaussian { alpha } => Some(alpha),
    };
    let last = ks.iter().copied().max().unwrap_or(0);
    let mut found: BTreeMap<usize, SweepRow> = BTreeMap::new();
    evolve_visit(&op, &psi0, last, &EvolveOptions::default(), |step, psi| {
        if ks.contains(&step) {
            let dist = distance_distribution(psi, step, Variant::Literal);
            let (argmax, peak_mass) = dist.argmax();
            found.insert(step, SweepRow { alpha, k: step, argmax, peak_mass, rms_spread: dist.rms_spread(target) });
        }
    })?;
    Ok(ks.iter().map(|k| found[k].clone()).collect())
}

/// Literal distance statistics for every `(α, k)`, plus strict-kernel rows
/// (reported as `α = ∞`) when `include_strict` is set.
pub fn accuracy_sweep(
    scenario: &SweepScenario,
    alphas: &[f64],
    ks: &[usize],
    include_strict: bool,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &alpha in alphas {
        let spec = KernelSpec { kind: KernelKind::Gaussian { alpha }, a0: scenario.a0, a1: scenario.a1 };
        rows.extend(sweep_kernel(scenario, &spec, ks)?);
    }
    if include_strict {
        rows.extend(sweep_kernel(scenario, &KernelSpec::strict(), ks)?);
    }
    Ok(rows)
}

fn header(w: &mut impl Write, config_hash: &str) -> Result<()> {
    writeln!(w, "# config={config_hash} tool={}", crate::TOOL_VERSION)?;
    Ok(())
}

/// CSV with columns `k,n,P,variant`.
pub fn write_distance_csv(w: &mut impl Write, config_hash: &str, dists: &[DistanceDistribution]) -> Result<()> {
    header(w, config_hash)?;
    writeln!(w, "k,n,P,variant")?;
    for d in dists {
        for (n, p) in d.probabilities.iter().enumerate() {
            writeln!(w, "{},{},{},{}", d.k, n, p, d.variant.name())?;
        }
    }
    Ok(())
}

/// CSV with columns `alpha,k,argmax,peak_mass,rms_spread`.
pub fn write_sweep_csv(w: &mut impl Write, config_hash: &str, rows: &[SweepRow]) -> Result<()> {
    header(w, config_hash)?;
    writeln!(w, "alpha,k,argmax,peak_mass,rms_spread")?;
    for r in rows {
        let alpha = r.alpha.map_or("inf".to_string(), |a| a.to_string());
        writeln!(w, "{},{},{},{},{}", alpha, r.k, r.argmax, r.peak_mass, r.rms_spread)?;
    }
    Ok(())
}

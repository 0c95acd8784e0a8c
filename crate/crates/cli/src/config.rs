//! JSON run configuration.

use std::f64::consts::FRAC_1_SQRT_2;
use std::path::{Path, PathBuf};

use qrobot::action_kernel::{KernelKind, KernelSpec};
use qrobot::config_space::{Register, SubsystemSelector, SystemParams};
use qrobot::evolution::{InitialStateSpec, SiteAmplitudes};
use qrobot::operator::EnvironmentSpec;
use qrobot::C64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lattice: Lattice,
    pub memory: Memory,
    pub kernel: KernelConfig,
    #[serde(default)]
    pub environment: EnvironmentConfig,
    pub initial: InitialConfig,
    pub run: RunSection,
    #[serde(default)]
    pub analyses: Analyses,
    #[serde(default)]
    pub output: Output,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lattice {
    #[serde(rename = "L")]
    pub l: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Memory {
    #[serde(rename = "N")]
    pub n: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKindConfig {
    Strict,
    Gaussian,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKindConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a0: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a1: Option<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvironmentKind {
    #[default]
    None,
    Hopping,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub kind: EnvironmentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteAmp {
    pub site: usize,
    pub amp: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketConfig {
    pub center: f64,
    pub width: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum SitesConfig {
    List(Vec<SiteAmp>),
    Packet(PacketConfig),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub particle: SitesConfig,
    pub robot: SitesConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    /// Each entry is a list of register names, e.g. `["y", "s"]`.
    #[serde(default)]
    pub record: Vec<Vec<String>>,
    #[serde(default)]
    pub chop: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Analyses {
    #[serde(default)]
    pub stats: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<PathsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub fidelity: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default)]
    pub epsilon: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    pub directory: PathBuf,
}

impl Default for Output {
    fn default() -> Self {
        Self { directory: PathBuf::from("out") }
    }
}

fn c64(v: [f64; 2]) -> C64 {
    C64::new(v[0], v[1])
}

fn sites(cfg: &SitesConfig) -> SiteAmplitudes {
    match cfg {
        SitesConfig::List(list) => SiteAmplitudes::List(list.iter().map(|e| (e.site, c64(e.amp))).collect()),
        SitesConfig::Packet(p) => SiteAmplitudes::Packet { center: p.center, width: p.width },
    }
}

/// A configuration that passed every module precondition.
#[derive(Clone, Debug)]
pub struct Validated {
    pub raw: RunConfig,
    pub params: SystemParams,
    pub kernel: KernelSpec,
    pub environment: EnvironmentSpec,
    pub initial: InitialStateSpec,
    pub selectors: Vec<SubsystemSelector>,
    pub hash: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(self) -> Result<Validated, CliError> {
        let params = SystemParams::new(self.lattice.l, self.memory.n)?;
        let k = &self.kernel;
        let kernel = match k.kind {
            KernelKindConfig::Strict => {
                if k.alpha.is_some() {
                    return Err(CliError::Config("alpha is only meaningful for gaussian kernels".into()));
                }
                KernelSpec { kind: KernelKind::Strict, a0: c64(k.a0.unwrap_or([1.0, 0.0])), a1: c64(k.a1.unwrap_or([0.0, 0.0])) }
            }
            KernelKindConfig::Gaussian => {
                let alpha = k.alpha.ok_or_else(|| CliError::Config("gaussian kernel needs alpha".into()))?;
                let h = [FRAC_1_SQRT_2, 0.0];
                KernelSpec { kind: KernelKind::Gaussian { alpha }, a0: c64(k.a0.unwrap_or(h)), a1: c64(k.a1.unwrap_or(h)) }
            }
        };
        kernel.validate()?;
        let e = &self.environment;
        let environment = match e.kind {
            EnvironmentKind::None => {
                if e.gamma.is_some() || e.delta.is_some() {
                    return Err(CliError::Config("environment kind none takes no gamma or delta".into()));
                }
                EnvironmentSpec::None
            }
            EnvironmentKind::Hopping => EnvironmentSpec::Hopping {
                gamma: e.gamma.ok_or_else(|| CliError::Config("hopping environment needs gamma".into()))?,
                delta: e.delta.unwrap_or(1.0),
            },
        };
        environment.validate()?;
        let initial = InitialStateSpec { particle: sites(&self.initial.particle), robot: sites(&self.initial.robot) };
        initial.build(&params)?;
        let mut selectors = Vec::new();
        for names in &self.run.record {
            let regs = names
                .iter()
                .map(|n| Register::from_name(n).ok_or_else(|| CliError::Config(format!("unknown register {n:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            selectors.push(SubsystemSelector::new(&regs)?);
        }
        if let Some(p) = &self.analyses.paths {
            if !(p.epsilon >= 0.0) {
                return Err(CliError::Config(format!("paths epsilon {} must be nonnegative", p.epsilon)));
            }
        }
        if let Some(s) = &self.analyses.sweep {
            if s.alphas.is_empty() || s.ks.is_empty() {
                return Err(CliError::Config("sweep needs at least one alpha and one k".into()));
            }
            for &alpha in &s.alphas {
                KernelSpec { kind: KernelKind::Gaussian { alpha }, ..kernel }.validate()?;
            }
        }
        // The output location does not affect results, so it is left out.
        let canonical = serde_json::to_vec(&RunConfig { output: Output::default(), ..self.clone() })?;
        let hash: String = Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect();
        Ok(Validated { raw: self, params, kernel, environment, initial, selectors, hash })
    }
}

impl Validated {
    /// The single basis start, when both particle and robot sit on one site.
    pub fn basis_start(&self) -> Result<(usize, usize), CliError> {
        let single = |s: &SitesConfig| match s {
            SitesConfig::List(l) if l.len() == 1 => Some(l[0].site),
            _ => None,
        };
        match (single(&self.raw.initial.particle), single(&self.raw.initial.robot)) {
            (Some(y), Some(x)) => Ok((y, x)),
            _ => Err(CliError::Config("path enumeration needs single-site particle and robot".into())),
        }
    }

    pub fn robot_origin(&self) -> Result<usize, CliError> {
        Ok(self.initial.robot_origin(self.params.lattice())?)
    }
}

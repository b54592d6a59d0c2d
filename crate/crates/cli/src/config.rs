//! Flat TOML run configuration. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use spinchern::dynamics::VelocityMode;
use spinchern::geometry::{KuboBackend, RobustnessCase, SweepAxis};
use spinchern::spinops::{ChainSpec, DEFAULT_COUPLING_SCALE, DEFAULT_FIELD_SCALE};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Topological,
    Trivial,
    SpinPolarized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Fhs,
    Dynamical,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Fhs => "fhs",
            Method::Dynamical => "dynamical",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand this file is meant for; checked when present.
    pub command: Option<String>,

    pub preset: Option<Preset>,
    pub n_sites: Option<usize>,
    pub couplings_hz: Option<Vec<f64>>,
    pub coupling_scale: Option<f64>,
    pub field_scale: Option<f64>,

    pub h_r_hz: Option<Vec<f64>>,
    pub h_z_hz: Option<f64>,

    pub method: Option<Method>,
    pub n_theta: Option<usize>,
    pub n_phi: Option<usize>,
    pub kubo_backend: Option<KuboBackend>,

    pub t_f: Option<f64>,
    pub t_f_list: Option<Vec<f64>>,
    pub n_samples: Option<usize>,
    pub dt: Option<f64>,
    pub ramp_fraction: Option<f64>,
    pub velocity: Option<VelocityMode>,
    /// Initial state from adiabatic preparation along this path instead of the exact ground state.
    pub prep_path: Option<u8>,

    pub axis1: Option<String>,
    pub axis1_values: Option<Vec<f64>>,
    pub axis2: Option<String>,
    pub axis2_values: Option<Vec<f64>>,
    /// Cells whose meridian gap is below `gap_factor * pi / max(t_f)` are excluded from the gapped deviation.
    pub gap_factor: Option<f64>,

    pub j12_hz: Option<Vec<f64>>,
    pub j23_hz: Option<f64>,
    pub step_tol_hz: Option<f64>,

    pub path_id: Option<u8>,
    pub n_steps: Option<usize>,
    pub total_time: Option<f64>,

    pub h_z_range_hz: Option<[f64; 2]>,
    pub coarse_steps: Option<usize>,
    pub gap_tol: Option<f64>,
    pub robustness: Option<RobustnessCase>,
    pub perturbations_hz: Option<Vec<f64>>,

    pub shifts_hz: Option<Vec<f64>>,
    pub trotter_slices: Option<usize>,
    pub segment_budget: Option<usize>,
    pub effective_time: Option<f64>,

    pub spread: Option<f64>,
    pub n_draws: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| bad(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn chain(&self) -> Result<ChainSpec, CliError> {
        let n = self.n_sites.unwrap_or(4);
        let base = match (&self.couplings_hz, self.preset) {
            (Some(c), _) => ChainSpec::new(n, c.clone()),
            (None, Some(Preset::Topological)) => ChainSpec::topological(n),
            (None, Some(Preset::Trivial)) => ChainSpec::trivial(n),
            (None, Some(Preset::SpinPolarized)) => ChainSpec::spin_polarized(n),
            (None, None) => return Err(bad("chain needs `preset` or `couplings_hz`")),
        }
        .map_err(|e| bad(e.to_string()))?;
        ChainSpec::with_scales(
            n,
            base.couplings_hz,
            self.coupling_scale.unwrap_or(DEFAULT_COUPLING_SCALE),
            self.field_scale.unwrap_or(DEFAULT_FIELD_SCALE),
        )
        .map_err(|e| bad(e.to_string()))
    }

    pub fn h_r_list(&self) -> Result<Vec<f64>, CliError> {
        match &self.h_r_hz {
            Some(v) if !v.is_empty() => Ok(v.clone()),
            _ => Err(bad("`h_r_hz` must list at least one field strength")),
        }
    }

    pub fn single_h_r(&self, default: f64) -> Result<f64, CliError> {
        match &self.h_r_hz {
            None => Ok(default),
            Some(v) if v.len() == 1 => Ok(v[0]),
            Some(_) => Err(bad("this command takes exactly one `h_r_hz` value")),
        }
    }

    pub fn method(&self) -> Method {
        self.method.unwrap_or(Method::Exact)
    }

    pub fn axis(&self, which: u8) -> Result<SweepAxis, CliError> {
        let (name, values) = match which {
            1 => (&self.axis1, &self.axis1_values),
            _ => (&self.axis2, &self.axis2_values),
        };
        let name = name.as_deref().ok_or_else(|| bad(format!("missing `axis{which}`")))?;
        let values = values
            .clone()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| bad(format!("`axis{which}_values` must be a non-empty list")))?;
        parse_axis(name, values)
    }
}

/// `h_r`, `L`, or bond names such as `J23` or `J12=J34`.
pub fn parse_axis(name: &str, values: Vec<f64>) -> Result<SweepAxis, CliError> {
    match name {
        "h_r" => return Ok(SweepAxis::field(values)),
        "L" => return Ok(SweepAxis::sites(values)),
        _ => {}
    }
    let bonds = name
        .split('=')
        .map(|part| parse_bond(part.trim()).ok_or_else(|| bad(format!("unknown axis `{name}`"))))
        .collect::<Result<Vec<usize>, CliError>>()?;
    Ok(SweepAxis::couplings(name, bonds, values))
}

/// `J{i}{i+1}` with 1-based sites; returns the 0-based bond.
fn parse_bond(s: &str) -> Option<usize> {
    let digits = s.strip_prefix('J')?;
    (1..digits.len()).find_map(|cut| {
        let a: usize = digits[..cut].parse().ok()?;
        let b: usize = digits[cut..].parse().ok()?;
        (a >= 1 && b == a + 1 && !digits[cut..].starts_with('0')).then_some(a - 1)
    })
}

//! Time evolution: propagation, the polar quench, linear-response curvature,
//! adiabatic schedules and ground-state preparation.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    chern_exact, phase_diagram_with, ChernMethod, ChernResult, CurvatureProfile, GeometryConfig, KuboBackend,
    PhaseDiagram, PhaseTemplate, SweepAxis, DEFAULT_N_THETA,
};
use crate::linalg::{dense_eigh, expm_apply};
use crate::spectra::{field_ground, SolverConfig};
use crate::spinops::{
    all_up, site_bit, sum_pauli, xy_bond, Axis, ChainSpec, DenseHamiltonian, FieldModel, FieldPoint, Operator, State,
    C64,
};

/// A time-dependent Hamiltonian given through its action on vectors.
pub trait HamiltonianPath: Sync {
    fn dim(&self) -> usize;
    fn apply_at(&self, t: f64, x: &[C64], y: &mut [C64]);
    /// Upper bound on `||H(t)||`.
    fn norm_bound_at(&self, t: f64) -> f64;
}

/// A time-independent Hamiltonian.
pub struct ConstantPath<'a>(pub &'a Operator);

impl HamiltonianPath for ConstantPath<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn apply_at(&self, _t: f64, x: &[C64], y: &mut [C64]) {
        self.0.compiled().apply_into(x, y);
    }

    fn norm_bound_at(&self, _t: f64) -> f64 {
        self.0.norm_bound()
    }
}

/// Largest tolerated deviation of the state norm from 1.
pub const NORM_DRIFT_LIMIT: f64 = 1e-6;

/// Midpoint-rule evolution `psi <- exp(-i H(t + dt/2) dt) psi` from `t0` to `t1`.
///
/// The step is shrunk so that it divides the interval evenly.
pub fn propagate(path: &dyn HamiltonianPath, state: &State, t0: f64, t1: f64, dt: f64) -> Result<State> {
    if state.len() != path.dim() {
        return Err(Error::DimensionMismatch {
            expected: path.dim(),
            got: state.len(),
        });
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("time step {dt} must be positive")));
    }
    if (state.norm() - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidInput(format!("initial state norm {} is not 1", state.norm())));
    }
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(state.clone());
    }
    let steps = (span.abs() / dt).ceil().max(1.0) as usize;
    let h = span / steps as f64;
    let mut psi = state.clone();
    for k in 0..steps {
        let tm = t0 + (k as f64 + 0.5) * h;
        psi = expm_apply(|x, y| path.apply_at(tm, x, y), &psi, h, path.norm_bound_at(tm));
        let norm = psi.norm();
        if (norm - 1.0).abs() > NORM_DRIFT_LIMIT {
            return Err(Error::NormDrift {
                norm,
                time: t0 + (k + 1) as f64 * h,
                step: k + 1,
            });
        }
    }
    Ok(psi)
}

/// `<sigma_j^x>` for every site.
pub fn local_sigma_x(state: &State, n_sites: usize) -> Vec<f64> {
    (0..n_sites)
        .map(|j| {
            let bit = site_bit(n_sites, j);
            2.0 * (0..state.len())
                .filter(|b| b & bit == 0)
                .map(|b| (state[b].conj() * state[b | bit]).re)
                .sum::<f64>()
        })
        .collect()
}

/// Default share of the quench spent in each speed ramp. A sudden start leaves
/// a precession whose amplitude equals the linear-response signal itself.
pub const DEFAULT_RAMP_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchProtocol {
    pub h_r_hz: f64,
    /// Time to sweep theta from 0 to pi (s).
    pub t_f: f64,
    pub n_samples: usize,
    /// Integrator step; `None` means `t_f / 1e4`.
    pub dt: Option<f64>,
    /// Multiplies the drive amplitude during evolution (RF inhomogeneity).
    pub amplitude_scale: f64,
    /// Fraction of `t_f` spent ramping the polar speed up from zero and back
    /// down (`sin^2` profile). Zero is a sudden start at constant speed.
    pub ramp_fraction: f64,
}

impl QuenchProtocol {
    pub fn new(h_r_hz: f64, t_f: f64) -> Self {
        Self {
            h_r_hz,
            t_f,
            n_samples: 101,
            dt: None,
            amplitude_scale: 1.0,
            ramp_fraction: DEFAULT_RAMP_FRACTION,
        }
    }

    fn ramp_time(&self) -> f64 {
        self.ramp_fraction * self.t_f
    }

    /// Polar speed on the constant-speed stretch.
    pub fn v_theta(&self) -> f64 {
        PI / (self.t_f - self.ramp_time())
    }

    /// Polar angle at time `t`.
    pub fn theta_at(&self, t: f64) -> f64 {
        let v = self.v_theta();
        let tau = self.ramp_time();
        let t = t.clamp(0.0, self.t_f);
        let up = |t: f64| if tau > 0.0 { v * (0.5 * t - tau / (2.0 * PI) * (PI * t / tau).sin()) } else { 0.0 };
        if t < tau {
            up(t)
        } else if t > self.t_f - tau {
            PI - up(self.t_f - t)
        } else {
            v * (t - 0.5 * tau)
        }
    }

    /// Polar speed at time `t`.
    pub fn theta_rate_at(&self, t: f64) -> f64 {
        let v = self.v_theta();
        let tau = self.ramp_time();
        let edge = t.min(self.t_f - t);
        if edge < tau {
            v * (0.5 * PI * edge.max(0.0) / tau).sin().powi(2)
        } else {
            v
        }
    }

    /// Time at which the sweep reaches `theta`.
    fn time_of(&self, theta: f64) -> f64 {
        if self.ramp_fraction == 0.0 {
            return theta / self.v_theta();
        }
        let (mut lo, mut hi) = (0.0, self.t_f);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.theta_at(mid) < theta {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * self.t_f {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn step(&self) -> f64 {
        self.dt.unwrap_or(self.t_f / 1e4)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_f > 0.0 && self.t_f.is_finite()) {
            return Err(Error::InvalidInput(format!("t_f = {} must be positive", self.t_f)));
        }
        if self.n_samples < 3 {
            return Err(Error::InvalidInput("a quench needs at least 3 samples".into()));
        }
        if !(self.h_r_hz > 0.0 && self.h_r_hz.is_finite()) {
            return Err(Error::InvalidInput(format!("h_r = {} Hz must be positive", self.h_r_hz)));
        }
        if !(self.step() > 0.0) {
            return Err(Error::InvalidInput("integrator step must be positive".into()));
        }
        if !(self.amplitude_scale > 0.0 && self.amplitude_scale.is_finite()) {
            return Err(Error::InvalidInput("amplitude scale must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.ramp_fraction) {
            return Err(Error::InvalidInput(format!("ramp fraction {} outside [0, 0.5)", self.ramp_fraction)));
        }
        Ok(())
    }

    /// Polar angles uniform in `[0, pi]` and the times they are reached, endpoints exact.
    pub fn samples(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_samples;
        let theta: Vec<f64> = (0..n)
            .map(|k| if k + 1 == n { PI } else { PI * k as f64 / (n - 1) as f64 })
            .collect();
        let times = theta
            .iter()
            .enumerate()
            .map(|(k, &th)| if k + 1 == n { self.t_f } else { self.time_of(th) })
            .collect();
        (times, theta)
    }
}

/// Field swept along the `phi = pi/2` meridian.
pub struct QuenchPath<'a> {
    pub model: &'a FieldModel,
    pub h_r_hz: f64,
    pub protocol: &'a QuenchProtocol,
}

impl QuenchPath<'_> {
    fn field(&self, t: f64) -> FieldPoint {
        FieldPoint {
            h_r_hz: self.h_r_hz,
            theta: self.protocol.theta_at(t),
            phi: PI / 2.0,
        }
    }
}

impl HamiltonianPath for QuenchPath<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn apply_at(&self, t: f64, x: &[C64], y: &mut [C64]) {
        self.model.apply(&self.field(t), x, y);
    }

    fn norm_bound_at(&self, t: f64) -> f64 {
        self.model.norm_bound(&self.field(t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchRecord {
    pub n_sites: usize,
    pub h_r_hz: f64,
    pub field_scale: f64,
    pub v_theta: f64,
    pub times: Vec<f64>,
    pub theta: Vec<f64>,
    /// Instantaneous polar speed at each sample.
    pub theta_rate: Vec<f64>,
    /// `sigma_x[j][k]` is `<sigma_j^x>` at sample `k`.
    pub sigma_x: Vec<Vec<f64>>,
    pub m_phi: Vec<f64>,
    /// `E_1 - E_0` of the instantaneous Hamiltonian (rad/s).
    pub gap: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Full-precision number formatting shared by every CSV writer.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl QuenchRecord {
    /// Columns `t, theta, x1..xL, M_phi, gap`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,theta");
        for j in 1..=self.n_sites {
            let _ = write!(out, ",x{j}");
        }
        out.push_str(",M_phi,gap\n");
        for k in 0..self.times.len() {
            let _ = write!(out, "{},{}", fmt_f64(self.times[k]), fmt_f64(self.theta[k]));
            for j in 0..self.n_sites {
                let _ = write!(out, ",{}", fmt_f64(self.sigma_x[j][k]));
            }
            let _ = writeln!(out, ",{},{}", fmt_f64(self.m_phi[k]), fmt_f64(self.gap[k]));
        }
        out
    }
}

/// `M_phi = -f h_r sin(theta) sum_j <sigma_j^x>` with `sin` pinned to 0 at the poles.
pub fn generalized_force(field_scale: f64, h_r_hz: f64, theta: f64, sum_x: f64) -> f64 {
    let s = if theta <= 0.0 || theta >= PI { 0.0 } else { theta.sin() };
    let m = -field_scale * h_r_hz * s * sum_x;
    if m == 0.0 {
        0.0
    } else {
        m
    }
}

/// Smallest overlap with the exact north-pole ground state a quench accepts.
pub const MIN_INITIAL_OVERLAP: f64 = 0.99;

pub fn run_quench(
    model: &FieldModel,
    protocol: &QuenchProtocol,
    initial: &State,
    solver: &SolverConfig,
) -> Result<QuenchRecord> {
    protocol.validate()?;
    let north = field_ground(model, &FieldPoint::new(protocol.h_r_hz, 0.0, PI / 2.0)?, solver)?;
    let overlap = north.state.dotc(initial).norm();
    if overlap < MIN_INITIAL_OVERLAP {
        return Err(Error::InvalidInput(format!(
            "initial state overlaps the north-pole ground state only to {overlap:.4}"
        )));
    }
    let v = protocol.v_theta();
    let path = QuenchPath {
        model,
        h_r_hz: protocol.h_r_hz * protocol.amplitude_scale,
        protocol,
    };
    let (times, theta) = protocol.samples();
    let l = model.n_sites();
    let mut sigma_x = vec![Vec::with_capacity(times.len()); l];
    let mut m_phi = Vec::with_capacity(times.len());
    let mut psi = initial.clone();
    for k in 0..times.len() {
        if k > 0 {
            psi = propagate(&path, &psi, times[k - 1], times[k], protocol.step())?;
        }
        let xs = local_sigma_x(&psi, l);
        let sum: f64 = xs.iter().sum();
        for (j, x) in xs.into_iter().enumerate() {
            sigma_x[j].push(x);
        }
        m_phi.push(generalized_force(model.field_scale(), protocol.h_r_hz, theta[k], sum));
    }
    let gap = theta
        .par_iter()
        .map(|&t| field_ground(model, &FieldPoint::new(protocol.h_r_hz, t, PI / 2.0)?, solver).map(|g| g.gap()))
        .collect::<Result<Vec<f64>>>()?;
    let mut warnings = Vec::new();
    if let Some((k, g)) = gap.iter().enumerate().find(|(_, &g)| g < 10.0 * v) {
        let msg = format!("gap {g:.3e} rad/s at theta = {:.4} is below 10 v_theta; adiabaticity at risk", theta[k]);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(QuenchRecord {
        n_sites: l,
        h_r_hz: protocol.h_r_hz,
        field_scale: model.field_scale(),
        v_theta: v,
        theta_rate: times.iter().map(|&t| protocol.theta_rate_at(t)).collect(),
        times,
        theta,
        sigma_x,
        m_phi,
        gap,
        warnings,
    })
}

/// `M_phi` of the exact instantaneous ground states on the quench meridian.
pub fn adiabatic_baseline(model: &FieldModel, h_r_hz: f64, theta: &[f64], solver: &SolverConfig) -> Result<Vec<f64>> {
    theta
        .par_iter()
        .map(|&t| {
            let g = field_ground(model, &FieldPoint::new(h_r_hz, t, PI / 2.0)?, solver)?;
            let sum: f64 = local_sigma_x(&g.state, model.n_sites()).iter().sum();
            Ok(generalized_force(model.field_scale(), h_r_hz, t, sum))
        })
        .collect()
}

/// `F(theta_k) = (M_phi(theta_k) - baseline_k) / theta_rate_k`, zero where the sweep is at rest.
pub fn extract_curvature(record: &QuenchRecord, baseline: &[f64]) -> Result<CurvatureProfile> {
    if baseline.len() != record.m_phi.len() {
        return Err(Error::DimensionMismatch {
            expected: record.m_phi.len(),
            got: baseline.len(),
        });
    }
    let values = record
        .m_phi
        .iter()
        .zip(baseline)
        .zip(&record.theta_rate)
        .map(|((m, b), r)| if *r > 0.0 { (m - b) / r } else { 0.0 })
        .collect();
    Ok(CurvatureProfile {
        h_r_hz: record.h_r_hz,
        theta: record.theta.clone(),
        values,
        method: ChernMethod::Dynamical,
    })
}

/// Richardson combination `2 F(v/2) - F(v)`, cancelling the `O(v)` error of the slope.
pub fn extract_curvature_richardson(
    fast: &QuenchRecord,
    slow: &QuenchRecord,
    baseline: &[f64],
) -> Result<CurvatureProfile> {
    if (fast.v_theta - 2.0 * slow.v_theta).abs() > 1e-12 * fast.v_theta {
        return Err(Error::InvalidInput("Richardson mode needs velocities v and v/2".into()));
    }
    if fast.theta != slow.theta {
        return Err(Error::InvalidInput("Richardson records sample different angles".into()));
    }
    let f = extract_curvature(fast, baseline)?;
    let s = extract_curvature(slow, baseline)?;
    Ok(CurvatureProfile {
        values: f.values.iter().zip(&s.values).map(|(a, b)| 2.0 * b - a).collect(),
        ..s
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityMode {
    Single,
    /// Runs at `v` and `v/2` and extrapolates.
    Richardson,
}

#[derive(Clone, Debug)]
pub enum Preparation {
    /// Exact north-pole ground state.
    Exact,
    /// A caller-supplied state, e.g. from [`prepare_ground`].
    State(State),
}

#[derive(Clone, Debug)]
pub struct DynamicalOptions {
    pub n_samples: usize,
    pub dt: Option<f64>,
    pub velocity: VelocityMode,
    pub amplitude_scale: f64,
    pub ramp_fraction: f64,
    pub solver: SolverConfig,
}

impl Default for DynamicalOptions {
    fn default() -> Self {
        Self {
            n_samples: 101,
            dt: None,
            velocity: VelocityMode::Single,
            amplitude_scale: 1.0,
            ramp_fraction: DEFAULT_RAMP_FRACTION,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicalChern {
    pub result: ChernResult,
    pub profile: CurvatureProfile,
    pub record: QuenchRecord,
}

/// Quench, subtract the adiabatic baseline, integrate the extracted curvature.
pub fn chern_dynamical(
    model: &FieldModel,
    h_r_hz: f64,
    t_f: f64,
    preparation: &Preparation,
    opts: &DynamicalOptions,
) -> Result<DynamicalChern> {
    let initial = match preparation {
        Preparation::Exact => field_ground(model, &FieldPoint::new(h_r_hz, 0.0, PI / 2.0)?, &opts.solver)?.state,
        Preparation::State(s) => s.clone(),
    };
    let protocol = QuenchProtocol {
        h_r_hz,
        t_f,
        n_samples: opts.n_samples,
        dt: opts.dt,
        amplitude_scale: opts.amplitude_scale,
        ramp_fraction: opts.ramp_fraction,
    };
    let record = run_quench(model, &protocol, &initial, &opts.solver)?;
    let baseline = adiabatic_baseline(model, h_r_hz, &record.theta, &opts.solver)?;
    let profile = match opts.velocity {
        VelocityMode::Single => extract_curvature(&record, &baseline)?,
        VelocityMode::Richardson => {
            let slow_protocol = QuenchProtocol {
                t_f: 2.0 * t_f,
                dt: opts.dt.map(|d| 2.0 * d),
                ..protocol
            };
            let slow = run_quench(model, &slow_protocol, &initial, &opts.solver)?;
            extract_curvature_richardson(&record, &slow, &baseline)?
        }
    };
    let (value, error_estimate) = profile.integrate();
    Ok(DynamicalChern {
        result: ChernResult {
            value,
            h_r_hz,
            method: ChernMethod::Dynamical,
            error_estimate,
        },
        profile,
        record,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub t_f: Vec<f64>,
    pub exact: PhaseDiagram,
    pub dynamical: Vec<PhaseDiagram>,
    /// Smallest `E_1 - E_0` on the quench meridian per cell (rad/s), `None` if unavailable.
    pub min_gap: Vec<Vec<Option<f64>>>,
}

impl ConvergenceTable {
    /// Cells whose four neighbours carry the same rounded exact value.
    pub fn interior_mask(&self) -> Vec<Vec<bool>> {
        let cells = &self.exact.cells;
        let n1 = cells.len();
        let n2 = cells[0].len();
        let at = |i: usize, j: usize| cells[i][j].value.map(|v| v.round() as i64);
        (0..n1)
            .map(|i| {
                (0..n2)
                    .map(|j| {
                        let Some(c) = at(i, j) else { return false };
                        let mut neighbours = Vec::new();
                        if i > 0 {
                            neighbours.push(at(i - 1, j));
                        }
                        if i + 1 < n1 {
                            neighbours.push(at(i + 1, j));
                        }
                        if j > 0 {
                            neighbours.push(at(i, j - 1));
                        }
                        if j + 1 < n2 {
                            neighbours.push(at(i, j + 1));
                        }
                        neighbours.into_iter().all(|n| n == Some(c))
                    })
                    .collect()
            })
            .collect()
    }

    /// Cells whose meridian gap is at least `factor` times the polar speed of the
    /// slowest quench, i.e. cells that raise no adiabaticity warning for `factor = 10`.
    pub fn gapped_mask(&self, factor: f64) -> Vec<Vec<bool>> {
        let slowest = self.t_f.iter().cloned().fold(0.0, f64::max);
        let threshold = factor * PI / slowest;
        self.min_gap
            .iter()
            .map(|row| row.iter().map(|g| g.is_some_and(|g| g >= threshold)).collect())
            .collect()
    }

    /// Largest `|dynamical - exact|` per quench time, over all cells or interior cells.
    pub fn max_deviation(&self, interior_only: bool) -> Vec<f64> {
        let mask = if interior_only {
            self.interior_mask()
        } else {
            self.min_gap.iter().map(|r| vec![true; r.len()]).collect()
        };
        self.max_deviation_masked(&mask)
    }

    /// Largest `|dynamical - exact|` per quench time over the cells selected by `mask`.
    pub fn max_deviation_masked(&self, mask: &[Vec<bool>]) -> Vec<f64> {
        self.dynamical
            .iter()
            .map(|d| {
                let mut worst = 0.0f64;
                for (i, row) in d.cells.iter().enumerate() {
                    for (j, cell) in row.iter().enumerate() {
                        if !mask[i][j] {
                            continue;
                        }
                        match (cell.value, self.exact.cells[i][j].value) {
                            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                            (None, Some(_)) => worst = f64::INFINITY,
                            _ => {}
                        }
                    }
                }
                worst
            })
            .collect()
    }
}

/// Dynamical Chern diagrams for each quench time next to the exact diagram.
pub fn quench_convergence(
    template: &PhaseTemplate,
    axis1: &SweepAxis,
    axis2: &SweepAxis,
    t_f_list: &[f64],
    opts: &DynamicalOptions,
    cfg: &GeometryConfig,
) -> Result<ConvergenceTable> {
    if t_f_list.is_empty() {
        return Err(Error::InvalidInput("quench-time list is empty".into()));
    }
    let exact = phase_diagram_with(template, axis1, axis2, ChernMethod::KuboIntegral, |spec, h_r| {
        chern_exact(&FieldModel::from_chain(spec)?, h_r, DEFAULT_N_THETA, KuboBackend::Auto, cfg)
    })?;
    let dynamical = t_f_list
        .iter()
        .map(|&t_f| {
            phase_diagram_with(template, axis1, axis2, ChernMethod::Dynamical, |spec, h_r| {
                let model = FieldModel::from_chain(spec)?;
                Ok(chern_dynamical(&model, h_r, t_f, &Preparation::Exact, opts)?.result)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n2 = axis2.samples.len();
    let flat: Vec<Option<f64>> = (0..axis1.samples.len() * n2)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / n2, idx % n2);
            let t = template
                .apply(axis1, axis1.samples[i])
                .and_then(|t| t.apply(axis2, axis2.samples[j]))
                .ok()?;
            let model = FieldModel::from_chain(&t.spec).ok()?;
            let mut gap = f64::INFINITY;
            for k in 0..DEFAULT_N_THETA {
                let theta = PI * k as f64 / (DEFAULT_N_THETA - 1) as f64;
                let field = FieldPoint::new(t.h_r_hz, theta, PI / 2.0).ok()?;
                gap = gap.min(field_ground(&model, &field, &opts.solver).ok()?.gap());
            }
            Some(gap)
        })
        .collect();
    Ok(ConvergenceTable {
        t_f: t_f_list.to_vec(),
        exact,
        dynamical,
        min_gap: flat.chunks(n2).map(|r| r.to_vec()).collect(),
    })
}

/// Control knobs of the preparation Hamiltonian
/// `-sum_b c J_b (xx + yy)_b - f (h_x sum sigma^x + h_z sum sigma^z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    pub h_x_hz: f64,
    pub h_z_hz: f64,
    pub couplings_hz: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    Hx,
    Hz,
    /// Bonds ramped together; the swept value is the fraction of each target.
    Bonds { bonds: Vec<usize>, targets_hz: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub control: Control,
    pub from: f64,
    pub to: f64,
}

impl Sweep {
    pub fn name(&self) -> String {
        match &self.control {
            Control::Hx => "h_x".into(),
            Control::Hz => "h_z".into(),
            Control::Bonds { bonds, .. } => bonds
                .iter()
                .map(|b| format!("J{}{}", b + 1, b + 2))
                .collect::<Vec<_>>()
                .join("="),
        }
    }

    fn set(&self, controls: &mut Controls, value: f64) {
        match &self.control {
            Control::Hx => controls.h_x_hz = value,
            Control::Hz => controls.h_z_hz = value,
            Control::Bonds { bonds, targets_hz } => {
                for (&b, &t) in bonds.iter().zip(targets_hz) {
                    controls.couplings_hz[b] = value * t;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPath {
    pub initial: Controls,
    pub sweeps: Vec<Sweep>,
}

impl SweepPath {
    /// Controls at the start of segment `k`.
    fn controls_before(&self, k: usize) -> Controls {
        let mut c = self.initial.clone();
        for s in &self.sweeps[..k] {
            s.set(&mut c, s.to);
        }
        c
    }

    pub fn final_controls(&self) -> Controls {
        self.controls_before(self.sweeps.len())
    }
}

/// Operators of the preparation Hamiltonian, stored once.
pub struct ControlModel {
    n_sites: usize,
    coupling_scale: f64,
    field_scale: f64,
    bonds: Vec<Operator>,
    sx: Operator,
    sz: Operator,
}

impl ControlModel {
    pub fn new(n_sites: usize, coupling_scale: f64, field_scale: f64) -> Result<Self> {
        if n_sites == 0 || n_sites > crate::spinops::MAX_SITES {
            return Err(Error::InvalidInput(format!("site count {n_sites} out of range")));
        }
        Ok(Self {
            n_sites,
            coupling_scale,
            field_scale,
            bonds: (0..n_sites.saturating_sub(1)).map(|b| xy_bond(n_sites, b, 1.0)).collect(),
            sx: sum_pauli(n_sites, Axis::X, -1.0),
            sz: sum_pauli(n_sites, Axis::Z, -1.0),
        })
    }

    pub fn from_spec(spec: &ChainSpec) -> Result<Self> {
        spec.validate()?;
        Self::new(spec.n_sites, spec.coupling_scale, spec.field_scale)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    fn check(&self, c: &Controls) -> Result<()> {
        if c.couplings_hz.len() != self.bonds.len() {
            return Err(Error::DimensionMismatch {
                expected: self.bonds.len(),
                got: c.couplings_hz.len(),
            });
        }
        Ok(())
    }

    fn terms<'a>(&'a self, c: &Controls) -> impl Iterator<Item = (&'a Operator, f64)> {
        let f = self.field_scale;
        let bond_coefs: Vec<f64> = c.couplings_hz.iter().map(|j| self.coupling_scale * j).collect();
        self.bonds
            .iter()
            .zip(bond_coefs)
            .chain([(&self.sx, f * c.h_x_hz), (&self.sz, f * c.h_z_hz)])
    }

    pub fn apply(&self, c: &Controls, x: &[C64], y: &mut [C64]) {
        y.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        for (op, coef) in self.terms(c) {
            if coef != 0.0 {
                op.compiled().apply_add(C64::new(coef, 0.0), x, y);
            }
        }
    }

    pub fn norm_bound(&self, c: &Controls) -> f64 {
        self.terms(c).map(|(op, coef)| op.norm_bound() * coef.abs()).sum()
    }

    pub fn dense(&self, c: &Controls) -> DMatrix<f64> {
        let dim = 1usize << self.n_sites;
        let mut m = DMatrix::<f64>::zeros(dim, dim);
        for (op, coef) in self.terms(c) {
            if coef != 0.0 {
                m += op.to_dense_real().expect("real operators") * coef;
            }
        }
        m
    }

    /// `dH/ds` for a sweep.
    fn derivative(&self, sweep: &Sweep) -> DMatrix<f64> {
        let dim = 1usize << self.n_sites;
        let span = sweep.to - sweep.from;
        match &sweep.control {
            Control::Hx => self.sx.to_dense_real().expect("real") * (self.field_scale * span),
            Control::Hz => self.sz.to_dense_real().expect("real") * (self.field_scale * span),
            Control::Bonds { bonds, targets_hz } => {
                let mut m = DMatrix::<f64>::zeros(dim, dim);
                for (&b, &t) in bonds.iter().zip(targets_hz) {
                    m += self.bonds[b].to_dense_real().expect("real") * (self.coupling_scale * t * span);
                }
                m
            }
        }
    }
}

/// Ground state (or ground projector basis) of a real symmetric matrix.
fn ground_space(h: DMatrix<f64>) -> (Vec<f64>, DMatrix<C64>, usize) {
    let (values, vectors) = dense_eigh(DenseHamiltonian::Real(h));
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale;
    let count = values.iter().take_while(|&&e| e - values[0] <= tol).count();
    (values, vectors, count)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSegment {
    pub name: String,
    pub from: f64,
    pub to: f64,
    pub start_time: f64,
    pub duration: f64,
    /// Absolute times and swept values, strictly increasing in time.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub min_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub path: SweepPath,
    pub epsilon: f64,
    pub segments: Vec<ScheduleSegment>,
    pub total_duration: f64,
}

impl Schedule {
    /// Controls at time `t` by linear interpolation of the pacing samples.
    pub fn controls_at(&self, t: f64) -> Controls {
        let t = t.clamp(0.0, self.total_duration);
        let mut controls = self.path.initial.clone();
        for (k, seg) in self.segments.iter().enumerate() {
            let sweep = &self.path.sweeps[k];
            let end = seg.start_time + seg.duration;
            if t >= end {
                sweep.set(&mut controls, seg.to);
                continue;
            }
            if t > seg.start_time {
                let i = seg.times.partition_point(|&x| x <= t).clamp(1, seg.times.len() - 1);
                let (t0, t1) = (seg.times[i - 1], seg.times[i]);
                let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
                sweep.set(&mut controls, seg.values[i - 1] + w * (seg.values[i] - seg.values[i - 1]));
            }
            break;
        }
        controls
    }

    /// Same shape stretched to `total` seconds; pacing is `1/epsilon`.
    pub fn rescaled(&self, total: f64) -> Result<Schedule> {
        if !(total > 0.0 && self.total_duration > 0.0) {
            return Err(Error::InvalidInput("cannot rescale a zero-length schedule".into()));
        }
        let r = total / self.total_duration;
        let segments = self
            .segments
            .iter()
            .map(|s| ScheduleSegment {
                start_time: s.start_time * r,
                duration: s.duration * r,
                times: s.times.iter().map(|t| t * r).collect(),
                ..s.clone()
            })
            .collect();
        Ok(Schedule {
            path: self.path.clone(),
            epsilon: self.epsilon / r,
            segments,
            total_duration: total,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ScheduleOptions {
    pub samples_per_segment: usize,
    pub gap_floor: f64,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            samples_per_segment: 400,
            gap_floor: 1e-6,
        }
    }
}

/// Local adiabatic pacing `dt/ds = max_e |<g|dH/ds|e>| / (epsilon * (E_e - E_0)^2)`.
///
/// The maximum runs over excited levels, with matrix elements summed in
/// quadrature inside a degenerate level, so a first excited level that is
/// decoupled by symmetry does not leave the sweep unpaced.
pub fn adiabatic_schedule(
    model: &ControlModel,
    path: &SweepPath,
    epsilon: f64,
    opts: &ScheduleOptions,
) -> Result<Schedule> {
    if !(epsilon > 0.0 && epsilon <= 0.5) {
        return Err(Error::InvalidInput(format!("epsilon = {epsilon} outside (0, 0.5]")));
    }
    model.check(&path.initial)?;
    let n = opts.samples_per_segment.max(8);
    let mut segments = Vec::with_capacity(path.sweeps.len());
    let mut clock = 0.0;
    for (k, sweep) in path.sweeps.iter().enumerate() {
        if let Control::Bonds { bonds, targets_hz } = &sweep.control {
            if bonds.len() != targets_hz.len() || bonds.iter().any(|&b| b >= model.bonds.len()) {
                return Err(Error::InvalidInput(format!("invalid bond sweep {}", sweep.name())));
            }
        }
        let base = path.controls_before(k);
        let dh = model.derivative(sweep);
        let s_grid: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let rates = s_grid
            .par_iter()
            .map(|&s| {
                let mut c = base.clone();
                sweep.set(&mut c, sweep.from + s * (sweep.to - sweep.from));
                let (values, vectors, g_count) = ground_space(model.dense(&c));
                if g_count > 1 {
                    return Err(Error::Degenerate {
                        context: format!("sweep {} at s = {s:.4}", sweep.name()),
                        gap: 0.0,
                        floor: opts.gap_floor,
                    });
                }
                let e0 = values[0];
                let e1 = values[1];
                let gap = e1 - e0;
                if gap < opts.gap_floor {
                    return Err(Error::Degenerate {
                        context: format!("sweep {} at s = {s:.4}", sweep.name()),
                        gap,
                        floor: opts.gap_floor,
                    });
                }
                let tol = 1e-9 * values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                let g = vectors.column(0).map(|z| z.re);
                let dg = &dh * &g;
                let mut rate = 0.0f64;
                let mut i = 1;
                while i < values.len() {
                    let level = values[i];
                    let mut weight = 0.0;
                    while i < values.len() && values[i] - level <= tol {
                        weight += vectors.column(i).map(|z| z.re).dot(&dg).powi(2);
                        i += 1;
                    }
                    let d = level - e0;
                    rate = rate.max(weight.sqrt() / (epsilon * d * d));
                }
                Ok((rate, gap))
            })
            .collect::<Result<Vec<(f64, f64)>>>()?;
        let mut times = Vec::with_capacity(n + 1);
        let mut t = clock;
        times.push(t);
        for i in 1..=n {
            t += 0.5 * (rates[i - 1].0 + rates[i].0) / n as f64;
            times.push(t);
        }
        let values: Vec<f64> = s_grid.iter().map(|s| sweep.from + s * (sweep.to - sweep.from)).collect();
        let min_gap = rates.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        segments.push(ScheduleSegment {
            name: sweep.name(),
            from: sweep.from,
            to: sweep.to,
            start_time: clock,
            duration: t - clock,
            times,
            values,
            min_gap,
        });
        clock = t;
    }
    Ok(Schedule {
        path: path.clone(),
        epsilon,
        segments,
        total_duration: clock,
    })
}

/// Piecewise-linear interpolation of controls between knots.
pub struct KnotPath<'a> {
    pub model: &'a ControlModel,
    pub times: Vec<f64>,
    pub controls: Vec<Controls>,
}

impl KnotPath<'_> {
    fn at(&self, t: f64) -> Controls {
        let i = self.times.partition_point(|&x| x <= t).clamp(1, self.times.len() - 1);
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let (a, b) = (&self.controls[i - 1], &self.controls[i]);
        Controls {
            h_x_hz: a.h_x_hz + w * (b.h_x_hz - a.h_x_hz),
            h_z_hz: a.h_z_hz + w * (b.h_z_hz - a.h_z_hz),
            couplings_hz: a
                .couplings_hz
                .iter()
                .zip(&b.couplings_hz)
                .map(|(x, y)| x + w * (y - x))
                .collect(),
        }
    }
}

impl HamiltonianPath for KnotPath<'_> {
    fn dim(&self) -> usize {
        1 << self.model.n_sites
    }

    fn apply_at(&self, t: f64, x: &[C64], y: &mut [C64]) {
        self.model.apply(&self.at(t), x, y);
    }

    fn norm_bound_at(&self, t: f64) -> f64 {
        self.model.norm_bound(&self.at(t))
    }
}

/// Auxiliary transverse field used on every preparation path (Hz).
pub const PREP_HX_HZ: f64 = 41.6;
/// Total preparation time the pacing is tuned to by default (s).
pub const PREP_TOTAL_TIME: f64 = 69.3e-3;

/// The three preparation paths ending at the couplings of `spec` with `h_z = h_r`.
///
/// Path 1 ramps the intercell bonds (23, 45, ...), path 2 the intracell bonds
/// (12, 34, ...), path 3 both groups in turn, each bracketed by an `h_x` ramp.
pub fn preparation_path(spec: &ChainSpec, path_id: u8, h_r_hz: f64) -> Result<SweepPath> {
    spec.validate()?;
    if !(h_r_hz > 0.0) {
        return Err(Error::InvalidInput("preparation needs h_r > 0".into()));
    }
    let group = |parity: usize| -> (Vec<usize>, Vec<f64>) {
        spec.couplings_hz
            .iter()
            .enumerate()
            .filter(|(b, _)| b % 2 == parity)
            .map(|(b, &j)| (b, j))
            .unzip()
    };
    let (intra, intra_t) = group(0);
    let (inter, inter_t) = group(1);
    let bonds = |bonds: Vec<usize>, targets_hz: Vec<f64>| Sweep {
        control: Control::Bonds { bonds, targets_hz },
        from: 0.0,
        to: 1.0,
    };
    let mut sweeps = vec![Sweep {
        control: Control::Hx,
        from: 0.0,
        to: PREP_HX_HZ,
    }];
    match path_id {
        1 => {
            if intra_t.iter().any(|&j| j != 0.0) {
                return Err(Error::InvalidInput("path 1 needs zero intracell couplings".into()));
            }
            sweeps.push(bonds(inter, inter_t));
        }
        2 => {
            if inter_t.iter().any(|&j| j != 0.0) {
                return Err(Error::InvalidInput("path 2 needs zero intercell couplings".into()));
            }
            sweeps.push(bonds(intra, intra_t));
        }
        3 => {
            sweeps.push(bonds(intra, intra_t));
            sweeps.push(bonds(inter, inter_t));
        }
        other => return Err(Error::InvalidInput(format!("unknown preparation path {other}"))),
    }
    sweeps.push(Sweep {
        control: Control::Hx,
        from: PREP_HX_HZ,
        to: 0.0,
    });
    Ok(SweepPath {
        initial: Controls {
            h_x_hz: 0.0,
            h_z_hz: h_r_hz,
            couplings_hz: vec![0.0; spec.n_sites - 1],
        },
        sweeps,
    })
}

#[derive(Clone, Debug)]
pub struct PrepOptions {
    pub n_steps: usize,
    /// Total time; the pacing constant is chosen to meet it.
    pub total_time: f64,
    /// Integrator step; `None` means `total_time / 1e4`.
    pub dt: Option<f64>,
    pub schedule: ScheduleOptions,
}

impl Default for PrepOptions {
    fn default() -> Self {
        Self {
            n_steps: 32,
            total_time: PREP_TOTAL_TIME,
            dt: None,
            schedule: ScheduleOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepReport {
    pub knot_times: Vec<f64>,
    /// Fidelity with the instantaneous ground space at knots `1..=n_steps`.
    pub fidelities: Vec<f64>,
    pub final_fidelity: f64,
    pub n_steps: usize,
    pub total_time: f64,
    pub epsilon: f64,
}

/// Evolves a sweep path discretized into `n_steps` linear pieces.
pub fn prepare_along(
    model: &ControlModel,
    path: &SweepPath,
    opts: &PrepOptions,
) -> Result<(State, PrepReport, Schedule)> {
    if opts.n_steps == 0 {
        return Err(Error::InvalidInput("n_steps must be at least 1".into()));
    }
    let raw = adiabatic_schedule(model, path, 0.1, &opts.schedule)?;
    let schedule = raw.rescaled(opts.total_time)?;
    let n = opts.n_steps;
    let knot_times: Vec<f64> = (0..=n).map(|k| opts.total_time * k as f64 / n as f64).collect();
    let controls: Vec<Controls> = knot_times.iter().map(|&t| schedule.controls_at(t)).collect();
    let knots = KnotPath {
        model,
        times: knot_times.clone(),
        controls,
    };
    let dt = opts.dt.unwrap_or(opts.total_time / 1e4);
    let (_, v0, c0) = ground_space(model.dense(&knots.controls[0]));
    let mut psi = if c0 == 1 {
        v0.column(0).into_owned()
    } else {
        all_up(model.n_sites)
    };
    let mut fidelities = Vec::with_capacity(n);
    for k in 1..=n {
        psi = propagate(&knots, &psi, knot_times[k - 1], knot_times[k], dt)?;
        let (_, vecs, count) = ground_space(model.dense(&knots.controls[k]));
        let weight: f64 = (0..count).map(|i| vecs.column(i).dotc(&psi).norm_sqr()).sum();
        fidelities.push(weight.sqrt().min(1.0));
    }
    let final_fidelity = *fidelities.last().expect("n_steps >= 1");
    let report = PrepReport {
        knot_times,
        fidelities,
        final_fidelity,
        n_steps: n,
        total_time: opts.total_time,
        epsilon: schedule.epsilon,
    };
    Ok((psi, report, schedule))
}

/// Adiabatic preparation of the north-pole ground state of `spec` at `h_r`.
pub fn prepare_ground(
    spec: &ChainSpec,
    path_id: u8,
    h_r_hz: f64,
    opts: &PrepOptions,
) -> Result<(State, PrepReport, Schedule)> {
    let model = ControlModel::from_spec(spec)?;
    let path = preparation_path(spec, path_id, h_r_hz)?;
    prepare_along(&model, &path, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::berry_curvature_kubo;
    use crate::spinops::{build_total, expectation, single_pauli, DEFAULT_FIELD_SCALE};

    #[test]
    fn larmor_precession() {
        let f = 3.0;
        let op = sum_pauli(1, Axis::Z, -PI * f);
        let psi0 = State::from_vec(vec![C64::new(1.0, 0.0), C64::new(1.0, 0.0)]) / C64::new(2f64.sqrt(), 0.0);
        let sx = single_pauli(1, 0, Axis::X).unwrap();
        for t in [0.013, 0.1, 0.71] {
            let psi = propagate(&ConstantPath(&op), &psi0, 0.0, t, 1e-4).unwrap();
            let x = expectation(&psi, &sx).unwrap();
            assert!((x - (2.0 * PI * f * t).cos()).abs() < 1e-8, "{t}: {x}");
        }
    }

    #[test]
    fn eigenstate_only_gains_phase() {
        let spec = ChainSpec::new(4, vec![10.0, 60.0, 25.0]).unwrap();
        let op = build_total(&spec, &FieldPoint::new(7.0, 0.8, 0.2).unwrap()).unwrap();
        let g = crate::spectra::ground_state(&op, None).unwrap();
        let psi = propagate(&ConstantPath(&op), &g.states[0], 0.0, 0.37, 1e-4).unwrap();
        assert!((psi.dotc(&g.states[0]).norm() - 1.0).abs() < 1e-10);
        assert!((psi.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quench_endpoints_and_bounds() {
        let model = FieldModel::from_chain(&ChainSpec::topological(4).unwrap()).unwrap();
        let protocol = QuenchProtocol::new(10.0, 0.05);
        let init = field_ground(&model, &FieldPoint::new(10.0, 0.0, 0.0).unwrap(), &SolverConfig::default())
            .unwrap()
            .state;
        let rec = run_quench(&model, &protocol, &init, &SolverConfig::default()).unwrap();
        assert_eq!(rec.theta[0], 0.0);
        assert_eq!(*rec.theta.last().unwrap(), PI);
        assert_eq!(rec.m_phi[0], 0.0);
        assert_eq!(*rec.m_phi.last().unwrap(), 0.0);
        assert!(rec.sigma_x.iter().flatten().all(|x| x.abs() <= 1.0 + 1e-12));
        assert_eq!(rec.to_csv().lines().count(), 102);
        let wrong = all_up(4).map(|_| C64::new(0.25, 0.0));
        assert!(run_quench(&model, &protocol, &wrong, &SolverConfig::default()).is_err());
    }

    #[test]
    fn single_spin_linear_response() {
        let model = FieldModel::free_spins(1, DEFAULT_FIELD_SCALE).unwrap();
        let h_r = 10.0;
        let t_f = 100.0 / h_r;
        let d = chern_dynamical(&model, h_r, t_f, &Preparation::Exact, &DynamicalOptions::default()).unwrap();
        for (t, f) in d.profile.theta.iter().zip(&d.profile.values) {
            assert!((f - t.sin() / 2.0).abs() < 1e-2, "{t}: {f}");
        }
        assert!((d.result.value - 1.0).abs() < 1e-2, "{:?}", d.result);
        let cfg = GeometryConfig::default();
        let k = berry_curvature_kubo(&model, &FieldPoint::new(h_r, 1.0, PI / 2.0).unwrap(), KuboBackend::Full, &cfg)
            .unwrap();
        assert!((k - 1f64.sin() / 2.0).abs() < 1e-10);
    }

    #[test]
    fn sudden_start_strobes_to_zero() {
        // Samples land on whole precession periods, where the transient cancels the signal.
        let model = FieldModel::free_spins(1, DEFAULT_FIELD_SCALE).unwrap();
        let opts = DynamicalOptions {
            ramp_fraction: 0.0,
            ..Default::default()
        };
        let d = chern_dynamical(&model, 10.0, 10.0, &Preparation::Exact, &opts).unwrap();
        assert!(d.result.value.abs() < 1e-3);
    }

    #[test]
    fn ramp_profile_is_consistent() {
        let p = QuenchProtocol {
            ramp_fraction: 0.2,
            ..QuenchProtocol::new(10.0, 0.35)
        };
        assert_eq!(p.theta_at(0.0), 0.0);
        assert!((p.theta_at(0.35) - PI).abs() < 1e-14);
        let h = 1e-7;
        for t in [0.01, 0.05, 0.1, 0.2, 0.3, 0.34] {
            let fd = (p.theta_at(t + h) - p.theta_at(t - h)) / (2.0 * h);
            assert!((fd - p.theta_rate_at(t)).abs() < 1e-5 * p.v_theta(), "{t}");
        }
        let (times, theta) = p.samples();
        for (t, th) in times.iter().zip(&theta) {
            assert!((p.theta_at(*t) - th).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_gap_toy_duration() {
        let f = DEFAULT_FIELD_SCALE;
        let model = ControlModel::new(1, 1.0, f).unwrap();
        let (x, hz, eps) = (41.6, 10.0, 0.2);
        let path = SweepPath {
            initial: Controls {
                h_x_hz: 0.0,
                h_z_hz: hz,
                couplings_hz: vec![],
            },
            sweeps: vec![Sweep {
                control: Control::Hx,
                from: 0.0,
                to: x,
            }],
        };
        let s = adiabatic_schedule(&model, &path, eps, &ScheduleOptions::default()).unwrap();
        let expected = x / (4.0 * eps * f * hz * (x * x + hz * hz).sqrt());
        assert!((s.total_duration - expected).abs() < 0.01 * expected);
        let s2 = adiabatic_schedule(&model, &path, 2.0 * eps, &ScheduleOptions::default()).unwrap();
        assert!(s2.total_duration < s.total_duration);
    }
}

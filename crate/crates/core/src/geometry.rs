//! Berry curvature over the field sphere and the Chern invariants built from it.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_exponential, fit_linear_origin, FitResult};
use crate::linalg::{cg_deflated, dense_eigh, lanczos_lowest, simpson_with_error};
use crate::spectra::{field_ground, scan_degeneracies_of, SolverConfig, DEFAULT_GAP_TOL};
use crate::spinops::{rz_rotation_diag, ChainSpec, FieldModel, FieldPoint, State, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KuboBackend {
    /// Sum over the full spectrum.
    Full,
    /// Ground state plus two deflated linear solves.
    Linear,
    /// `Full` up to `GeometryConfig::auto_full_max_dim`, `Linear` above.
    Auto,
}

#[derive(Clone, Debug)]
pub struct GeometryConfig {
    pub solver: SolverConfig,
    /// Smallest acceptable ground-state gap (rad/s).
    pub gap_floor: f64,
    pub auto_full_max_dim: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            gap_floor: 1e-6,
            auto_full_max_dim: 1024,
            cg_tol: 1e-12,
            cg_max_iter: 5000,
        }
    }
}

fn degenerate(field: &FieldPoint, gap: f64, floor: f64) -> Error {
    Error::Degenerate {
        context: format!(
            "h_r = {} Hz, theta = {}, phi = {}",
            field.h_r_hz, field.theta, field.phi
        ),
        gap,
        floor,
    }
}

/// Berry curvature `F_theta_phi` of the ground state at `field`.
///
/// Oriented so that a single spin aligned with the field carries
/// `+sin(theta)/2` and the Chern number counts enclosed monopoles positively.
pub fn berry_curvature_kubo(
    model: &FieldModel,
    field: &FieldPoint,
    backend: KuboBackend,
    cfg: &GeometryConfig,
) -> Result<f64> {
    let backend = match backend {
        KuboBackend::Auto if model.dim() <= cfg.auto_full_max_dim => KuboBackend::Full,
        KuboBackend::Auto => KuboBackend::Linear,
        b => b,
    };
    let dth = model.dtheta_coefficients(field);
    let dph = model.dphi_coefficients(field);
    match backend {
        KuboBackend::Full => {
            let (values, vectors) = dense_eigh(model.dense(field));
            let gap = values.get(1).map_or(f64::INFINITY, |e| e - values[0]);
            if gap < cfg.gap_floor {
                return Err(degenerate(field, gap, cfg.gap_floor));
            }
            let psi0 = vectors.column(0).into_owned();
            let a = vectors.adjoint() * model.sigma_combination(dth, &psi0);
            let b = vectors.adjoint() * model.sigma_combination(dph, &psi0);
            let e0 = values[0];
            let sum: f64 = (1..values.len())
                .map(|n| (a[n].conj() * b[n]).im / (values[n] - e0).powi(2))
                .sum();
            Ok(2.0 * sum)
        }
        KuboBackend::Linear | KuboBackend::Auto => {
            let dim = model.dim();
            let (e0, e1, psi0) = if dim <= cfg.solver.dense_threshold {
                let g = field_ground(model, field, &cfg.solver)?;
                (g.e0, g.e1, g.state)
            } else {
                let res = lanczos_lowest(|x, y| model.apply(field, x, y), dim, 2, &cfg.solver.lanczos)?;
                (res.values[0], res.values[1], res.vectors[0].clone())
            };
            if e1 - e0 < cfg.gap_floor {
                return Err(degenerate(field, e1 - e0, cfg.gap_floor));
            }
            let deflate = std::slice::from_ref(&psi0);
            let solve = |coefs: [f64; 3]| {
                let rhs = model.sigma_combination(coefs, &psi0);
                cg_deflated(|x, y| model.apply(field, x, y), e0, &rhs, deflate, cfg.cg_tol, cfg.cg_max_iter)
            };
            let y_theta = solve(dth)?;
            let y_phi = solve(dph)?;
            Ok(2.0 * y_theta.dotc(&y_phi).im)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChernMethod {
    KuboIntegral,
    FhsLattice,
    Dynamical,
}

impl ChernMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::KuboIntegral => "kubo_integral",
            Self::FhsLattice => "fhs_lattice",
            Self::Dynamical => "dynamical",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureProfile {
    pub h_r_hz: f64,
    pub theta: Vec<f64>,
    pub values: Vec<f64>,
    pub method: ChernMethod,
}

impl CurvatureProfile {
    /// Simpson integral over theta with its grid-halving error estimate.
    pub fn integrate(&self) -> (f64, f64) {
        let h = PI / (self.theta.len() - 1) as f64;
        simpson_with_error(&self.values, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChernResult {
    pub value: f64,
    pub h_r_hz: f64,
    pub method: ChernMethod,
    pub error_estimate: f64,
}

/// Uniform theta grid on `[0, pi]` including both poles.
pub fn theta_grid(n_theta: usize) -> Vec<f64> {
    (0..n_theta)
        .map(|k| if k + 1 == n_theta { PI } else { PI * k as f64 / (n_theta - 1) as f64 })
        .collect()
}

/// Kubo curvature along the `phi = 0` meridian with the pole values pinned to 0.
pub fn curvature_profile(
    model: &FieldModel,
    h_r_hz: f64,
    n_theta: usize,
    backend: KuboBackend,
    cfg: &GeometryConfig,
) -> Result<CurvatureProfile> {
    if n_theta < 21 {
        return Err(Error::InvalidInput(format!("n_theta = {n_theta} is below 21")));
    }
    if !(h_r_hz > 0.0 && h_r_hz.is_finite()) {
        return Err(Error::InvalidInput(format!("h_r = {h_r_hz} Hz must be positive")));
    }
    let theta = theta_grid(n_theta);
    for &t in [theta[0], theta[n_theta - 1]].iter() {
        let field = FieldPoint::new(h_r_hz, t, 0.0)?;
        let g = field_ground(model, &field, &cfg.solver)?;
        if g.gap() < cfg.gap_floor {
            return Err(degenerate(&field, g.gap(), cfg.gap_floor));
        }
    }
    let values = theta
        .par_iter()
        .enumerate()
        .map(|(k, &t)| {
            if k == 0 || k + 1 == n_theta {
                return Ok(0.0);
            }
            berry_curvature_kubo(model, &FieldPoint::new(h_r_hz, t, 0.0)?, backend, cfg)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(CurvatureProfile {
        h_r_hz,
        theta,
        values,
        method: ChernMethod::KuboIntegral,
    })
}

pub const DEFAULT_N_THETA: usize = 101;

/// Chern number as the theta integral of the Kubo curvature.
pub fn chern_exact(
    model: &FieldModel,
    h_r_hz: f64,
    n_theta: usize,
    backend: KuboBackend,
    cfg: &GeometryConfig,
) -> Result<ChernResult> {
    let profile = curvature_profile(model, h_r_hz, n_theta, backend, cfg)?;
    let (value, error_estimate) = profile.integrate();
    Ok(ChernResult {
        value,
        h_r_hz,
        method: ChernMethod::KuboIntegral,
        error_estimate,
    })
}

/// Closed surface enclosing the origin of field space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Surface {
    Sphere,
    /// Semi-axes `h_r * (a, b, c)` along x, y, z.
    Ellipsoid { axes: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FhsOptions {
    pub n_theta: usize,
    /// Azimuthal cells; `None` picks `max(4 L, 16)`.
    pub n_phi: Option<usize>,
    pub surface: Surface,
}

impl Default for FhsOptions {
    fn default() -> Self {
        Self {
            n_theta: 61,
            n_phi: None,
            surface: Surface::Sphere,
        }
    }
}

fn field_from_vector(v: [f64; 3]) -> Result<FieldPoint> {
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if r == 0.0 {
        return FieldPoint::new(0.0, 0.0, 0.0);
    }
    let theta = (v[2] / r).clamp(-1.0, 1.0).acos();
    let phi = v[1].atan2(v[0]);
    FieldPoint::new(r, theta, phi)
}

fn surface_point(h_r_hz: f64, surface: Surface, theta: f64, phi: f64) -> Result<FieldPoint> {
    match surface {
        Surface::Sphere => FieldPoint::new(h_r_hz, theta, phi),
        Surface::Ellipsoid { axes } => {
            let (st, ct) = theta.sin_cos();
            let (sp, cp) = phi.sin_cos();
            field_from_vector([
                h_r_hz * axes[0] * st * cp,
                h_r_hz * axes[1] * st * sp,
                h_r_hz * axes[2] * ct,
            ])
        }
    }
}

fn link(a: &State, b: &State, context: impl FnOnce() -> String) -> Result<C64> {
    let u = a.dotc(b);
    if u.norm() < 1e-12 {
        return Err(Error::InvalidInput(format!(
            "vanishing lattice link at {}; refine the grid",
            context()
        )));
    }
    Ok(u / u.norm())
}

/// Gauge-invariant lattice Chern number (Fukui-Hatsugai-Suzuki).
pub fn chern_fhs(model: &FieldModel, h_r_hz: f64, opts: &FhsOptions, cfg: &GeometryConfig) -> Result<ChernResult> {
    if opts.n_theta < 3 {
        return Err(Error::InvalidInput("FHS grid needs at least 3 theta nodes".into()));
    }
    if !(h_r_hz > 0.0 && h_r_hz.is_finite()) {
        return Err(Error::InvalidInput(format!("h_r = {h_r_hz} Hz must be positive")));
    }
    let n_phi = opts.n_phi.unwrap_or((4 * model.n_sites()).max(16));
    if n_phi < 3 {
        return Err(Error::InvalidInput("FHS grid needs at least 3 phi nodes".into()));
    }
    if let Surface::Ellipsoid { axes } = opts.surface {
        if axes.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidInput(format!("ellipsoid axes {axes:?} must be positive")));
        }
    }
    let theta = theta_grid(opts.n_theta);
    let dphi = 2.0 * PI / n_phi as f64;
    let ground = |t: f64, p: f64| -> Result<State> {
        let field = surface_point(h_r_hz, opts.surface, t, p)?;
        let g = field_ground(model, &field, &cfg.solver)?;
        if g.gap() < cfg.gap_floor {
            return Err(degenerate(&field, g.gap(), cfg.gap_floor));
        }
        Ok(g.state)
    };
    let axisymmetric = match opts.surface {
        Surface::Sphere => true,
        Surface::Ellipsoid { axes } => axes[0] == axes[1],
    };

    let total = if model.is_u1_symmetric() && axisymmetric {
        // psi(theta, phi) = R_z(phi) psi(theta, 0), so every link depends on theta only.
        let rows = theta
            .par_iter()
            .map(|&t| ground(t, 0.0))
            .collect::<Result<Vec<State>>>()?;
        let rz: Vec<C64> = rz_rotation_diag(model.n_sites(), dphi);
        let phi_links = rows
            .iter()
            .enumerate()
            .map(|(k, psi)| {
                let rotated = State::from_iterator(psi.len(), psi.iter().zip(&rz).map(|(a, r)| a * r));
                link(psi, &rotated, || format!("theta node {k}"))
            })
            .collect::<Result<Vec<C64>>>()?;
        let mut total = 0.0;
        for k in 0..rows.len() - 1 {
            let ut = link(&rows[k], &rows[k + 1], || format!("theta node {k}"))?;
            let plaquette = ut * phi_links[k + 1] * ut.conj() * phi_links[k].conj();
            total += n_phi as f64 * plaquette.arg();
        }
        total
    } else {
        let nodes = theta
            .par_iter()
            .enumerate()
            .map(|(k, &t)| {
                if k == 0 || k + 1 == theta.len() {
                    let psi = ground(t, 0.0)?;
                    Ok(vec![psi; n_phi])
                } else {
                    (0..n_phi).map(|j| ground(t, j as f64 * dphi)).collect::<Result<Vec<State>>>()
                }
            })
            .collect::<Result<Vec<Vec<State>>>>()?;
        let mut total = 0.0;
        for k in 0..nodes.len() - 1 {
            for j in 0..n_phi {
                let jn = (j + 1) % n_phi;
                let ctx = || format!("node ({k}, {j})");
                let u1 = link(&nodes[k][j], &nodes[k + 1][j], ctx)?;
                let u2 = link(&nodes[k + 1][j], &nodes[k + 1][jn], ctx)?;
                let u3 = link(&nodes[k][jn], &nodes[k + 1][jn], ctx)?;
                let u4 = link(&nodes[k][j], &nodes[k][jn], ctx)?;
                total += (u1 * u2 * u3.conj() * u4.conj()).arg();
            }
        }
        total
    };
    // Same orientation as the Kubo curvature.
    let value = (total / (2.0 * PI)).round();
    Ok(ChernResult {
        value: if value == 0.0 { 0.0 } else { value },
        h_r_hz,
        method: ChernMethod::FhsLattice,
        error_estimate: 0.0,
    })
}

/// Parameter varied along a phase-diagram axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    FieldHr,
    /// Sets every listed bond (0-based) to the sample value in Hz.
    Couplings(Vec<usize>),
    /// Chain length; couplings follow the template's alternating pattern.
    Sites,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub name: String,
    pub unit: String,
    pub parameter: SweepParameter,
    pub samples: Vec<f64>,
}

impl SweepAxis {
    pub fn field(samples: Vec<f64>) -> Self {
        Self {
            name: "h_r".into(),
            unit: "Hz".into(),
            parameter: SweepParameter::FieldHr,
            samples,
        }
    }

    pub fn couplings(name: &str, bonds: Vec<usize>, samples: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            unit: "Hz".into(),
            parameter: SweepParameter::Couplings(bonds),
            samples,
        }
    }

    pub fn sites(samples: Vec<f64>) -> Self {
        Self {
            name: "L".into(),
            unit: "sites".into(),
            parameter: SweepParameter::Sites,
            samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTemplate {
    pub spec: ChainSpec,
    pub h_r_hz: f64,
}

impl PhaseTemplate {
    /// The template with one axis parameter set to `value`.
    pub fn apply(&self, axis: &SweepAxis, value: f64) -> Result<Self> {
        let mut out = self.clone();
        match &axis.parameter {
            SweepParameter::FieldHr => out.h_r_hz = value,
            SweepParameter::Couplings(bonds) => {
                let mut couplings = out.spec.couplings_hz.clone();
                for &b in bonds {
                    let slot = couplings.get_mut(b).ok_or_else(|| {
                        Error::InvalidInput(format!("bond {b} does not exist on {} sites", out.spec.n_sites))
                    })?;
                    *slot = value;
                }
                out.spec = out.spec.with_couplings(couplings)?;
            }
            SweepParameter::Sites => {
                if value.fract() != 0.0 || value < 2.0 {
                    return Err(Error::InvalidInput(format!("site count {value} is not an integer >= 2")));
                }
                let n = value as usize;
                let j1 = self.spec.couplings_hz.first().copied().unwrap_or(0.0);
                let j2 = self.spec.couplings_hz.get(1).copied().unwrap_or(0.0);
                out.spec = ChainSpec::with_scales(
                    n,
                    (0..n - 1).map(|b| if b % 2 == 0 { j1 } else { j2 }).collect(),
                    self.spec.coupling_scale,
                    self.spec.field_scale,
                )?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub value: Option<f64>,
    pub error_estimate: Option<f64>,
    pub method: ChernMethod,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    pub axis1: SweepAxis,
    pub axis2: SweepAxis,
    pub fixed: PhaseTemplate,
    /// Row-major: `cells[i][j]` is `(axis1[i], axis2[j])`.
    pub cells: Vec<Vec<PhaseCell>>,
}

impl PhaseDiagram {
    /// Distinct rounded plateau values present in the grid.
    pub fn plateaus(&self) -> Vec<i64> {
        let mut v: Vec<i64> = self
            .cells
            .iter()
            .flatten()
            .filter_map(|c| c.value.map(|x| x.round() as i64))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Evaluates `eval` on every grid cell in parallel; errors stay in their cell.
pub fn phase_diagram_with<F>(
    template: &PhaseTemplate,
    axis1: &SweepAxis,
    axis2: &SweepAxis,
    method: ChernMethod,
    eval: F,
) -> Result<PhaseDiagram>
where
    F: Fn(&ChainSpec, f64) -> Result<ChernResult> + Sync,
{
    if axis1.samples.is_empty() || axis2.samples.is_empty() {
        return Err(Error::InvalidInput("phase-diagram axes need at least one sample".into()));
    }
    let n2 = axis2.samples.len();
    let flat: Vec<PhaseCell> = (0..axis1.samples.len() * n2)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / n2, idx % n2);
            let result = template
                .apply(axis1, axis1.samples[i])
                .and_then(|t| t.apply(axis2, axis2.samples[j]))
                .and_then(|t| eval(&t.spec, t.h_r_hz));
            match result {
                Ok(r) => PhaseCell {
                    value: Some(r.value),
                    error_estimate: Some(r.error_estimate),
                    method: r.method,
                    error: None,
                },
                Err(e) => PhaseCell {
                    value: None,
                    error_estimate: None,
                    method,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let cells = flat.chunks(n2).map(|row| row.to_vec()).collect();
    Ok(PhaseDiagram {
        axis1: axis1.clone(),
        axis2: axis2.clone(),
        fixed: template.clone(),
        cells,
    })
}

#[derive(Clone, Debug)]
pub enum CellMethod {
    Exact { n_theta: usize, backend: KuboBackend },
    Fhs(FhsOptions),
}

pub fn phase_diagram(
    template: &PhaseTemplate,
    axis1: &SweepAxis,
    axis2: &SweepAxis,
    method: &CellMethod,
    cfg: &GeometryConfig,
) -> Result<PhaseDiagram> {
    let tag = match method {
        CellMethod::Exact { .. } => ChernMethod::KuboIntegral,
        CellMethod::Fhs(_) => ChernMethod::FhsLattice,
    };
    phase_diagram_with(template, axis1, axis2, tag, |spec, h_r| {
        let model = FieldModel::from_chain(spec)?;
        match method {
            CellMethod::Exact { n_theta, backend } => chern_exact(&model, h_r, *n_theta, *backend, cfg),
            CellMethod::Fhs(opts) => chern_fhs(&model, h_r, opts, cfg),
        }
    })
}

/// Half-width of the exclusion band around `|h_z| = h_r` (Hz).
pub const MONOPOLE_GUARD_HZ: f64 = 1e-3;

/// Net monopole charge enclosed by the sphere of radius `h_r`.
///
/// Each ground-level crossing on the z axis carries the jump of the ground
/// particle number across it, so a crossing where `k + 1` levels meet counts `k`.
pub fn monopole_count(model: &FieldModel, h_r_hz: f64, guard_hz: f64) -> Result<i64> {
    if !model.is_u1_symmetric() {
        return Err(Error::InvalidInput(
            "monopole counting on the z axis needs a magnetization-conserving model".into(),
        ));
    }
    let reach = h_r_hz + guard_hz.max(1.0) + 0.1 * h_r_hz;
    let set = scan_degeneracies_of(model.base(), model.field_scale(), [-reach, reach], 64, DEFAULT_GAP_TOL)?;
    for p in &set.points {
        if (p.h_z_hz.abs() - h_r_hz).abs() < guard_hz {
            return Err(Error::Degenerate {
                context: format!("crossing at h_z = {} Hz lies on the sphere h_r = {h_r_hz} Hz", p.h_z_hz),
                gap: p.gap,
                floor: DEFAULT_GAP_TOL,
            });
        }
    }
    Ok(set.total_charge_within(h_r_hz))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustnessCase {
    /// Intracell perturbation added on bonds 12, 34, ...
    Topological,
    /// Intercell perturbation added on bonds 23, 45, ...
    Trivial,
}

/// Reference fits for comparison: `0.39 exp(0.28 x) - 0.40` and `1.57 x`.
pub const REFERENCE_EXPONENTIAL: [f64; 3] = [0.39, 0.28, -0.40];
pub const REFERENCE_SLOPE: f64 = 1.57;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessFit {
    pub case: RobustnessCase,
    pub fit: FitResult,
    /// `(perturbation Hz, dh_z Hz)`.
    pub data: Vec<(f64, f64)>,
}

/// Distance between the designated pair of crossings.
pub fn crossing_separation(spec: &ChainSpec, case: RobustnessCase) -> Result<f64> {
    let max_c = spec.couplings_hz.iter().fold(0.0f64, |m, j| m.max(j.abs()));
    let reach = 2.0 * max_c * spec.coupling_scale / spec.field_scale + 10.0;
    let model = FieldModel::from_chain(spec)?;
    let set = scan_degeneracies_of(model.base(), spec.field_scale, [-reach, reach], 128, DEFAULT_GAP_TOL)?;
    let mut points = set.points.clone();
    let missing = || Error::Fit(format!("missing degeneracy points for couplings {:?}", spec.couplings_hz));
    match case {
        RobustnessCase::Topological => {
            points.sort_by(|a, b| a.h_z_hz.abs().total_cmp(&b.h_z_hz.abs()));
            let first = points.first().ok_or_else(missing)?;
            if first.charge >= 2 {
                return Ok(0.0);
            }
            let second = points.get(1).ok_or_else(missing)?;
            Ok((first.h_z_hz - second.h_z_hz).abs())
        }
        RobustnessCase::Trivial => {
            let first = points.first().ok_or_else(missing)?;
            if first.charge >= 2 {
                return Ok(0.0);
            }
            let second = points.get(1).ok_or_else(missing)?;
            Ok(second.h_z_hz - first.h_z_hz)
        }
    }
}

/// Sweeps the perturbation and fits `dh_z`: exponential for the topological
/// case, linear through the origin for the trivial case.
pub fn robustness_fit(base: &ChainSpec, case: RobustnessCase, perturbations: &[f64]) -> Result<RobustnessFit> {
    if perturbations.len() < 6 {
        return Err(Error::Fit(format!("need at least 6 perturbation samples, got {}", perturbations.len())));
    }
    let data = perturbations
        .par_iter()
        .map(|&x| {
            let couplings: Vec<f64> = base
                .couplings_hz
                .iter()
                .enumerate()
                .map(|(b, &j)| match (case, b % 2) {
                    (RobustnessCase::Topological, 0) | (RobustnessCase::Trivial, 1) => x,
                    _ => j,
                })
                .collect();
            Ok((x, crossing_separation(&base.with_couplings(couplings)?, case)?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = data.iter().copied().unzip();
    let fit = match case {
        RobustnessCase::Topological => fit_exponential(&xs, &ys)?,
        RobustnessCase::Trivial => fit_linear_origin(&xs, &ys)?,
    };
    Ok(RobustnessFit { case, fit, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spinops::{DEFAULT_COUPLING_SCALE, DEFAULT_FIELD_SCALE};

    fn single_spin() -> FieldModel {
        FieldModel::free_spins(1, DEFAULT_FIELD_SCALE).unwrap()
    }

    #[test]
    fn single_spin_curvature_is_half_sine() {
        let cfg = GeometryConfig::default();
        let m = single_spin();
        for h in [0.3, 5.0, 120.0] {
            for t in [0.1, 0.9, 1.6, 2.8] {
                let f = FieldPoint::new(h, t, 0.4).unwrap();
                for backend in [KuboBackend::Full, KuboBackend::Linear] {
                    let v = berry_curvature_kubo(&m, &f, backend, &cfg).unwrap();
                    assert!((v - t.sin() / 2.0).abs() < 1e-10, "{backend:?} {h} {t}: {v}");
                }
            }
        }
    }

    #[test]
    fn backends_agree() {
        let cfg = GeometryConfig::default();
        let spec = ChainSpec::new(4, vec![12.0, 55.0, 30.0]).unwrap();
        let m = FieldModel::from_chain(&spec).unwrap();
        for t in [0.3, 1.2, 2.5] {
            let f = FieldPoint::new(17.0, t, 1.1).unwrap();
            let a = berry_curvature_kubo(&m, &f, KuboBackend::Full, &cfg).unwrap();
            let b = berry_curvature_kubo(&m, &f, KuboBackend::Linear, &cfg).unwrap();
            assert!((a - b).abs() < 1e-8, "{a} {b}");
        }
    }

    #[test]
    fn degenerate_point_is_reported() {
        let m = FieldModel::from_chain(&ChainSpec::topological(4).unwrap()).unwrap();
        let f = FieldPoint::new(1e-9, 1.0, 0.0).unwrap();
        let err = berry_curvature_kubo(&m, &f, KuboBackend::Full, &GeometryConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Degenerate { .. }));
    }

    #[test]
    fn single_spin_chern() {
        let cfg = GeometryConfig::default();
        let r = chern_exact(&single_spin(), 3.0, DEFAULT_N_THETA, KuboBackend::Full, &cfg).unwrap();
        assert!((r.value - 1.0).abs() < 1e-6, "{r:?}");
        let f = chern_fhs(&single_spin(), 3.0, &FhsOptions::default(), &cfg).unwrap();
        assert_eq!(f.value, 1.0);
    }

    #[test]
    fn chain_configurations() {
        let cfg = GeometryConfig::default();
        let topo = FieldModel::from_chain(&ChainSpec::topological(4).unwrap()).unwrap();
        let triv = FieldModel::from_chain(&ChainSpec::trivial(4).unwrap()).unwrap();
        let sp = FieldModel::from_chain(&ChainSpec::spin_polarized(4).unwrap()).unwrap();
        for (m, expected) in [(&topo, 2.0), (&triv, 0.0), (&sp, 4.0)] {
            let e = chern_exact(m, 5.0, DEFAULT_N_THETA, KuboBackend::Auto, &cfg).unwrap();
            assert!((e.value - expected).abs() < 1e-3, "{e:?}");
            let f = chern_fhs(m, 5.0, &FhsOptions::default(), &cfg).unwrap();
            assert_eq!(f.value, expected);
            assert_eq!(monopole_count(m, 5.0, MONOPOLE_GUARD_HZ).unwrap() as f64, expected);
        }
    }

    #[test]
    fn generic_fhs_path_matches_shortcut() {
        let cfg = GeometryConfig::default();
        let topo = FieldModel::from_chain(&ChainSpec::topological(4).unwrap()).unwrap();
        let opts = FhsOptions {
            surface: Surface::Ellipsoid { axes: [1.5, 0.7, 1.0] },
            ..Default::default()
        };
        assert_eq!(chern_fhs(&topo, 5.0, &opts, &cfg).unwrap().value, 2.0);
        let h_star = DEFAULT_COUPLING_SCALE * 69.7 / DEFAULT_FIELD_SCALE;
        assert_eq!(chern_fhs(&topo, h_star + 5.0, &opts, &cfg).unwrap().value, 4.0);
    }

    #[test]
    fn monopole_guard_band() {
        let topo = FieldModel::from_chain(&ChainSpec::topological(4).unwrap()).unwrap();
        let h_star = DEFAULT_COUPLING_SCALE * 69.7 / DEFAULT_FIELD_SCALE;
        assert!(monopole_count(&topo, h_star + 1e-4, MONOPOLE_GUARD_HZ).is_err());
        assert_eq!(monopole_count(&topo, h_star + 0.1, MONOPOLE_GUARD_HZ).unwrap(), 4);
    }

    #[test]
    fn trivial_pair_coincides_without_perturbation() {
        let spec = ChainSpec::trivial(4).unwrap();
        assert_eq!(crossing_separation(&spec, RobustnessCase::Trivial).unwrap(), 0.0);
        let topo = ChainSpec::topological(4).unwrap();
        assert_eq!(crossing_separation(&topo, RobustnessCase::Topological).unwrap(), 0.0);
    }

    #[test]
    fn phase_diagram_layout() {
        let template = PhaseTemplate {
            spec: ChainSpec::spin_polarized(4).unwrap(),
            h_r_hz: 10.0,
        };
        let a1 = SweepAxis::field(vec![5.0, 50.0, 150.0]);
        let a2 = SweepAxis::couplings("J23", vec![1], vec![0.0, 0.0]);
        let d = phase_diagram(
            &template,
            &a1,
            &a2,
            &CellMethod::Fhs(FhsOptions::default()),
            &GeometryConfig::default(),
        )
        .unwrap();
        assert_eq!(d.cells.len(), 3);
        assert!(d.cells.iter().all(|r| r.len() == 2));
        assert_eq!(d.plateaus(), vec![4]);
        let bad = SweepAxis::couplings("J99", vec![7], vec![1.0]);
        let d = phase_diagram(&template, &a1, &bad, &CellMethod::Fhs(FhsOptions::default()), &GeometryConfig::default()).unwrap();
        assert!(d.cells.iter().flatten().all(|c| c.error.is_some()));
    }
}

//! Exact diagonalization: spectra, ground states, gaps, particle-number
//! sectors and level crossings along the field z axis.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dense_eigh, lanczos_lowest, LanczosOptions};
use crate::spinops::{
    build_xy_chain, occupation, ChainSpec, DenseHamiltonian, FieldModel, FieldPoint, Operator, State, C64,
};

/// Largest Hilbert-space dimension a full dense diagonalization is attempted for.
pub const MAX_DENSE_DIM: usize = 4096;

#[derive(Clone, Debug)]
pub struct SolverConfig {
    /// Dimensions above this use Lanczos for partial spectra.
    pub dense_threshold: usize,
    pub lanczos: LanczosOptions,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dense_threshold: 1024,
            lanczos: LanczosOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Full,
    LowestK(usize),
}

#[derive(Clone, Debug, Serialize)]
pub struct Spectrum {
    pub n_sites: usize,
    pub eigenvalues: Vec<f64>,
    #[serde(skip)]
    pub eigenvectors: Option<Vec<State>>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

pub fn diagonalize(op: &Operator, mode: Mode) -> Result<Spectrum> {
    diagonalize_with(op, mode, &SolverConfig::default())
}

pub fn diagonalize_with(op: &Operator, mode: Mode, cfg: &SolverConfig) -> Result<Spectrum> {
    let dim = op.dim();
    let k = match mode {
        Mode::Full => dim,
        Mode::LowestK(k) if k == 0 || k > dim => {
            return Err(Error::InvalidInput(format!("lowest_k({k}) outside 1..={dim}")))
        }
        Mode::LowestK(k) => k,
    };
    let (values, vectors) = if dim <= cfg.dense_threshold || mode == Mode::Full {
        if dim > MAX_DENSE_DIM {
            return Err(Error::InvalidInput(format!(
                "full diagonalization of dimension {dim} exceeds the dense limit {MAX_DENSE_DIM}"
            )));
        }
        let dense = match op.to_dense_real() {
            Some(m) => DenseHamiltonian::Real(m),
            None => DenseHamiltonian::Complex(op.to_dense()),
        };
        let (values, vecs) = dense_eigh(dense);
        let vectors: Vec<State> = (0..k).map(|c| vecs.column(c).into_owned()).collect();
        (values[..k].to_vec(), vectors)
    } else {
        let compiled = op.compiled();
        let res = lanczos_lowest(|x, y| compiled.apply_into(x, y), dim, k, &cfg.lanczos)?;
        (res.values, res.vectors)
    };
    check_residuals(op, &values, &vectors)?;
    Ok(Spectrum {
        n_sites: op.n_sites(),
        eigenvalues: values,
        eigenvectors: Some(vectors),
    })
}

fn check_residuals(op: &Operator, values: &[f64], vectors: &[State]) -> Result<()> {
    let norm = op.norm_bound().max(1e-300);
    let compiled = op.compiled();
    let mut w = State::zeros(op.dim());
    for (lambda, v) in values.iter().zip(vectors) {
        compiled.apply_into(v.as_slice(), w.as_mut_slice());
        w.axpy(C64::new(-lambda, 0.0), v, C64::new(1.0, 0.0));
        let residual = w.norm();
        if residual >= 1e-9 * norm {
            return Err(Error::NoConvergence {
                solver: "eigensolver residual check",
                iterations: 0,
                residual: residual / norm,
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GroundState {
    pub energy: f64,
    pub states: Vec<State>,
    pub multiplicity: usize,
}

/// Default degeneracy tolerance `1e-8 * ||H||`.
pub fn default_degeneracy_tol(op: &Operator) -> f64 {
    1e-8 * op.norm_bound().max(1e-300)
}

pub fn ground_state(op: &Operator, degeneracy_tol: Option<f64>) -> Result<GroundState> {
    ground_state_with(op, degeneracy_tol, &SolverConfig::default())
}

pub fn ground_state_with(op: &Operator, degeneracy_tol: Option<f64>, cfg: &SolverConfig) -> Result<GroundState> {
    let tol = degeneracy_tol.unwrap_or_else(|| default_degeneracy_tol(op));
    let dim = op.dim();
    let mut k = if dim <= cfg.dense_threshold { dim } else { 8.min(dim) };
    loop {
        let spec = diagonalize_with(op, Mode::LowestK(k), cfg)?;
        let e0 = spec.eigenvalues[0];
        let count = spec.eigenvalues.iter().take_while(|&&e| e - e0 <= tol).count();
        if count < k || k == dim {
            let states = spec.eigenvectors.expect("vectors requested")[..count].to_vec();
            return Ok(GroundState {
                energy: e0,
                states,
                multiplicity: count,
            });
        }
        k = (2 * k).min(dim);
    }
}

/// `E_1 - E_0`, clamped to zero below the solver tolerance.
pub fn gap(op: &Operator) -> Result<f64> {
    if op.dim() < 2 {
        return Err(Error::InvalidInput("gap needs at least two levels".into()));
    }
    let spec = diagonalize(op, Mode::LowestK(2))?;
    let g = spec.eigenvalues[1] - spec.eigenvalues[0];
    Ok(if g < 1e-12 * op.norm_bound().max(1e-300) { 0.0 } else { g })
}

/// Lowest two levels and the ground vector of a field model.
#[derive(Clone, Debug)]
pub struct FieldGround {
    pub e0: f64,
    pub e1: f64,
    pub state: State,
}

impl FieldGround {
    pub fn gap(&self) -> f64 {
        self.e1 - self.e0
    }
}

pub fn field_ground(model: &FieldModel, field: &FieldPoint, cfg: &SolverConfig) -> Result<FieldGround> {
    let dim = model.dim();
    if dim <= cfg.dense_threshold {
        let (values, vectors) = dense_eigh(model.dense(field));
        let e1 = values.get(1).copied().unwrap_or(f64::INFINITY);
        return Ok(FieldGround {
            e0: values[0],
            e1,
            state: vectors.column(0).into_owned(),
        });
    }
    let res = lanczos_lowest(|x, y| model.apply(field, x, y), dim, 2, &cfg.lanczos)?;
    Ok(FieldGround {
        e0: res.values[0],
        e1: res.values[1],
        state: res.vectors[0].clone(),
    })
}

/// Eigenvalues grouped by particle number `n = 0..=L`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SectorSpectrum {
    pub n_sites: usize,
    pub h_z_hz: f64,
    pub sectors: Vec<Vec<f64>>,
}

impl SectorSpectrum {
    /// All levels, ascending.
    pub fn merged(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.sectors.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        all
    }

    /// `(n, energy)` of the lowest level; ties go to the smaller sector.
    pub fn ground(&self) -> (usize, f64) {
        self.sectors
            .iter()
            .enumerate()
            .filter_map(|(n, levels)| levels.first().map(|&e| (n, e)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }
}

/// Matrix of a magnetization-conserving operator restricted to sector `n`.
pub fn sector_block(op: &Operator, n: usize) -> Result<(Vec<usize>, DMatrix<C64>)> {
    let l = op.n_sites();
    let basis: Vec<usize> = (0..op.dim()).filter(|&b| occupation(l, b) == n).collect();
    let mut index = vec![usize::MAX; op.dim()];
    for (i, &b) in basis.iter().enumerate() {
        index[b] = i;
    }
    let compiled = op.compiled();
    let mut m = DMatrix::<C64>::zeros(basis.len(), basis.len());
    for (&mask, diag) in compiled.masks().iter().zip(compiled.diags()) {
        for (col, &b) in basis.iter().enumerate() {
            let d = diag[b];
            if d == C64::new(0.0, 0.0) {
                continue;
            }
            let row = index[b ^ mask];
            if row == usize::MAX {
                if d.norm() > 1e-12 {
                    return Err(Error::InvalidInput("operator does not conserve particle number".into()));
                }
                continue;
            }
            m[(row, col)] += d;
        }
    }
    Ok((basis, m))
}

/// Sector spectra of `base - field_scale * h_z * sum_i sigma_i^z`.
pub fn sector_spectrum_of(base: &Operator, field_scale: f64, h_z_hz: f64) -> Result<SectorSpectrum> {
    let l = base.n_sites();
    let sectors = (0..=l)
        .into_par_iter()
        .map(|n| -> Result<Vec<f64>> {
            let (_, block) = sector_block(base, n)?;
            let (mut values, _) = dense_eigh(DenseHamiltonian::Complex(block));
            let shift = -field_scale * h_z_hz * (2.0 * n as f64 - l as f64);
            for v in &mut values {
                *v += shift;
            }
            Ok(values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SectorSpectrum {
        n_sites: l,
        h_z_hz,
        sectors,
    })
}

/// Sector-resolved spectrum of a chain in a z-aligned field.
pub fn sector_spectrum(spec: &ChainSpec, field: &FieldPoint) -> Result<SectorSpectrum> {
    spec.validate()?;
    if field.h_r_hz != 0.0 && !field.is_z_aligned() {
        return Err(Error::InvalidInput(
            "sector decomposition needs a field along z (transverse components mix sectors)".into(),
        ));
    }
    let h_z = field.vector_hz()[2];
    sector_spectrum_of(&build_xy_chain(spec)?, spec.field_scale, h_z)
}

/// A ground-level crossing on the z axis.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DegeneracyPoint {
    pub h_z_hz: f64,
    /// `E_1 - E_0` of the full spectrum at the refined point (rad/s).
    pub gap: f64,
    /// Ground-state particle number just below and above the crossing.
    pub n_below: usize,
    pub n_above: usize,
    /// Monopole charge: jump in ground particle number.
    pub charge: i64,
    /// Number of levels degenerate with the ground level at the crossing.
    pub multiplicity: usize,
}

/// A local gap minimum that does not close.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AvoidedCrossing {
    pub h_z_hz: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DegeneracySet {
    pub range_hz: [f64; 2],
    pub gap_tol: f64,
    pub points: Vec<DegeneracyPoint>,
    pub avoided: Vec<AvoidedCrossing>,
    /// Coarse samples `(h_z, gap)`.
    pub coarse: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

impl DegeneracySet {
    pub fn total_charge_within(&self, h_r_hz: f64) -> i64 {
        self.points
            .iter()
            .filter(|p| p.h_z_hz.abs() < h_r_hz)
            .map(|p| p.charge)
            .sum()
    }
}

/// Default crossing tolerance in rad/s.
pub const DEFAULT_GAP_TOL: f64 = 1e-6;

/// Crossings closer than this (Hz) are merged into one point.
const MERGE_WIDTH_HZ: f64 = 1e-7;

/// Bisection stops once the bracket is narrower than this (Hz).
const BISECT_WIDTH_HZ: f64 = 1e-10;

/// Sector ground energies at zero field plus the lowest two levels per sector.
struct ZeroFieldLevels {
    n_sites: usize,
    field_scale: f64,
    levels: Vec<Vec<f64>>,
}

impl ZeroFieldLevels {
    fn energy(&self, n: usize, k: usize, h_z: f64) -> Option<f64> {
        let shift = -self.field_scale * h_z * (2.0 * n as f64 - self.n_sites as f64);
        self.levels[n].get(k).map(|e| e + shift)
    }

    fn ground_sector(&self, h_z: f64) -> (usize, f64) {
        (0..=self.n_sites)
            .filter_map(|n| self.energy(n, 0, h_z).map(|e| (n, e)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }

    fn sorted_levels(&self, h_z: f64) -> Vec<f64> {
        let mut all: Vec<f64> = (0..=self.n_sites)
            .flat_map(|n| {
                let shift = -self.field_scale * h_z * (2.0 * n as f64 - self.n_sites as f64);
                self.levels[n].iter().map(move |e| e + shift)
            })
            .collect();
        all.sort_by(f64::total_cmp);
        all
    }

    fn gap(&self, h_z: f64) -> f64 {
        let all = self.sorted_levels(h_z);
        all.get(1).map_or(f64::INFINITY, |e1| e1 - all[0])
    }
}

/// Crossings of the ground level of `base - f h_z sum sigma^z` inside `range`.
///
/// The ground particle number is monotone in `h_z`, so every change of ground
/// sector between coarse samples brackets at least one crossing; brackets are
/// bisected until they are narrower than `1e-10` Hz.
pub fn scan_degeneracies_of(
    base: &Operator,
    field_scale: f64,
    range_hz: [f64; 2],
    coarse_steps: usize,
    gap_tol: f64,
) -> Result<DegeneracySet> {
    let [lo, hi] = range_hz;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidInput(format!("invalid scan range [{lo}, {hi}]")));
    }
    if coarse_steps < 16 {
        return Err(Error::InvalidInput("coarse_steps must be at least 16".into()));
    }
    let zero = sector_spectrum_of(base, field_scale, 0.0)?;
    let levels = ZeroFieldLevels {
        n_sites: base.n_sites(),
        field_scale,
        levels: zero.sectors,
    };

    let grid: Vec<f64> = (0..=coarse_steps)
        .map(|k| lo + (hi - lo) * k as f64 / coarse_steps as f64)
        .collect();
    let coarse: Vec<(f64, f64)> = grid.iter().map(|&h| (h, levels.gap(h))).collect();
    let sectors: Vec<usize> = grid.iter().map(|&h| levels.ground_sector(h).0).collect();

    let mut raw: Vec<(f64, usize, usize)> = Vec::new();
    for k in 0..coarse_steps {
        bisect(&levels, grid[k], sectors[k], grid[k + 1], sectors[k + 1], &mut raw);
    }

    // Merge crossings that the bisection resolved into near-coincident parts.
    let mut points: Vec<DegeneracyPoint> = Vec::new();
    let mut i = 0;
    while i < raw.len() {
        let mut j = i;
        while j + 1 < raw.len() && raw[j + 1].0 - raw[j].0 < MERGE_WIDTH_HZ {
            j += 1;
        }
        let (n_below, n_above) = (raw[i].1, raw[j].2);
        let h = 0.5 * (raw[i].0 + raw[j].0);
        // Snap to an exact sample if the crossing sits on one.
        let h = grid
            .iter()
            .copied()
            .find(|g| (g - h).abs() < MERGE_WIDTH_HZ)
            .unwrap_or(h);
        let all = levels.sorted_levels(h);
        let gap = all.get(1).map_or(f64::INFINITY, |e1| e1 - all[0]);
        let width_tol = gap_tol.max(1e-9 * all.iter().fold(0.0f64, |m, e| m.max(e.abs())));
        let multiplicity = all.iter().take_while(|&&e| e - all[0] <= width_tol).count();
        points.push(DegeneracyPoint {
            h_z_hz: h,
            gap,
            n_below,
            n_above,
            charge: n_above as i64 - n_below as i64,
            multiplicity,
        });
        i = j + 1;
    }

    let mut warnings = Vec::new();
    let mut avoided = Vec::new();
    for k in 1..coarse_steps {
        let (h, g) = coarse[k];
        if g < gap_tol && sectors[k - 1] == sectors[k + 1] {
            warnings.push(format!("ground level degenerate within sector {} at h_z = {h} Hz", sectors[k]));
        } else if g < coarse[k - 1].1 && g < coarse[k + 1].1 && sectors[k - 1] == sectors[k + 1] {
            avoided.push(AvoidedCrossing { h_z_hz: h, gap: g });
        }
    }
    let step = (hi - lo) / coarse_steps as f64;
    for p in &points {
        if p.h_z_hz - lo < step || hi - p.h_z_hz < step {
            warnings.push(format!("crossing at h_z = {} Hz touches the scan boundary", p.h_z_hz));
        }
    }
    if sectors[0] != 0 || sectors[coarse_steps] != levels.n_sites {
        warnings.push("ground sector is not saturated at the range ends; crossings may lie outside".into());
    }

    Ok(DegeneracySet {
        range_hz,
        gap_tol,
        points,
        avoided,
        coarse,
        warnings,
    })
}

fn bisect(levels: &ZeroFieldLevels, a: f64, na: usize, b: f64, nb: usize, out: &mut Vec<(f64, usize, usize)>) {
    if na == nb {
        return;
    }
    if b - a < BISECT_WIDTH_HZ {
        out.push((0.5 * (a + b), na, nb));
        return;
    }
    let m = 0.5 * (a + b);
    let nm = levels.ground_sector(m).0;
    bisect(levels, a, na, m, nm, out);
    bisect(levels, m, nm, b, nb, out);
}

pub fn scan_degeneracies(
    spec: &ChainSpec,
    range_hz: [f64; 2],
    coarse_steps: usize,
    gap_tol: f64,
) -> Result<DegeneracySet> {
    spec.validate()?;
    scan_degeneracies_of(&build_xy_chain(spec)?, spec.field_scale, range_hz, coarse_steps, gap_tol)
}

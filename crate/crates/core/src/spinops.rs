//! Many-spin operators built from Pauli strings.
//!
//! Operators are kept as lists of real-coefficient Pauli strings, which makes
//! every [`Operator`] Hermitian by construction. For numerical work a term list
//! is compiled into a [`CompiledOp`]: terms sharing the same bit-flip mask are
//! merged into one diagonal, so a matrix-vector product costs
//! `O(#masks * 2^L)`.
//!
//! Basis convention: site `i` is bit `L-1-i` of the basis index, so the index
//! reads left to right as `site0 site1 ...`. Bit value 0 is spin up
//! (`sigma^z = +1`), which is also the occupied state under the Jordan-Wigner
//! map used by [`particle_number`].

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nmr::NmrSystem;

pub type C64 = Complex64;
pub type State = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Largest chain handled by the exact-diagonalization stack.
pub const MAX_SITES: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

/// A real coefficient (rad/s) times a tensor product of single-site Paulis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PauliTerm {
    coefficient: f64,
    factors: Vec<(usize, Axis)>,
}

impl PauliTerm {
    pub fn new(coefficient: f64, factors: impl Into<Vec<(usize, Axis)>>) -> Result<Self> {
        if !coefficient.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite Pauli coefficient {coefficient}"
            )));
        }
        let mut factors = factors.into();
        factors.sort_by_key(|&(site, _)| site);
        if factors.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidInput(format!(
                "site repeated within one Pauli term: {factors:?}"
            )));
        }
        Ok(Self {
            coefficient,
            factors,
        })
    }

    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    pub fn factors(&self) -> &[(usize, Axis)] {
        &self.factors
    }

    /// Returns `(flip_mask, sign_mask, number_of_y)` for an `n_sites` register.
    fn masks(&self, n_sites: usize) -> (usize, usize, u32) {
        let mut flip = 0usize;
        let mut sign = 0usize;
        let mut ny = 0u32;
        for &(site, axis) in &self.factors {
            let bit = site_bit(n_sites, site);
            match axis {
                Axis::X => flip |= bit,
                Axis::Y => {
                    flip |= bit;
                    sign |= bit;
                    ny += 1;
                }
                Axis::Z => sign |= bit,
            }
        }
        (flip, sign, ny)
    }
}

#[inline]
pub fn site_bit(n_sites: usize, site: usize) -> usize {
    1usize << (n_sites - 1 - site)
}

/// `sum_i sigma_i^z` eigenvalue of a computational basis index.
#[inline]
pub fn magnetization(n_sites: usize, basis: usize) -> i32 {
    n_sites as i32 - 2 * basis.count_ones() as i32
}

/// Number of up (occupied) spins of a computational basis index.
#[inline]
pub fn occupation(n_sites: usize, basis: usize) -> usize {
    n_sites - basis.count_ones() as usize
}

fn i_power(n: u32) -> C64 {
    match n % 4 {
        0 => C64::new(1.0, 0.0),
        1 => C64::new(0.0, 1.0),
        2 => C64::new(-1.0, 0.0),
        _ => C64::new(0.0, -1.0),
    }
}

/// Sum of Pauli terms on `n_sites` spins. Immutable once built.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Operator {
    n_sites: usize,
    terms: Vec<PauliTerm>,
    #[serde(skip)]
    compiled: OnceLock<CompiledOp>,
}

impl PartialEq for Operator {
    fn eq(&self, other: &Self) -> bool {
        self.n_sites == other.n_sites && self.terms == other.terms
    }
}

impl Operator {
    pub fn new(n_sites: usize, terms: Vec<PauliTerm>) -> Result<Self> {
        if n_sites == 0 || n_sites > MAX_SITES {
            return Err(Error::InvalidInput(format!(
                "site count {n_sites} outside 1..={MAX_SITES}"
            )));
        }
        if let Some(bad) = terms
            .iter()
            .flat_map(|t| t.factors.iter())
            .find(|(site, _)| *site >= n_sites)
        {
            return Err(Error::InvalidInput(format!(
                "site index {} out of range for {n_sites} sites",
                bad.0
            )));
        }
        Ok(Self::from_terms_unchecked(n_sites, terms))
    }

    fn from_terms_unchecked(n_sites: usize, terms: Vec<PauliTerm>) -> Self {
        Self {
            n_sites,
            terms,
            compiled: OnceLock::new(),
        }
        .simplified()
    }

    pub fn zero(n_sites: usize) -> Self {
        Self::from_terms_unchecked(n_sites, Vec::new())
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn dim(&self) -> usize {
        1 << self.n_sites
    }

    pub fn terms(&self) -> &[PauliTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Real-coefficient Pauli strings are Hermitian.
    pub fn is_hermitian(&self) -> bool {
        true
    }

    /// True when the matrix is real in the computational basis (even number of
    /// `sigma^y` factors in every term).
    pub fn is_real(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.factors.iter().filter(|(_, a)| *a == Axis::Y).count() % 2 == 0)
    }

    /// Upper bound on the spectral norm.
    pub fn norm_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.coefficient.abs()).sum()
    }

    pub fn plus(&self, other: &Operator) -> Result<Operator> {
        if self.n_sites != other.n_sites {
            return Err(Error::DimensionMismatch {
                expected: self.n_sites,
                got: other.n_sites,
            });
        }
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(Self::from_terms_unchecked(self.n_sites, terms))
    }

    pub fn scaled(&self, factor: f64) -> Operator {
        let terms = self
            .terms
            .iter()
            .map(|t| PauliTerm {
                coefficient: t.coefficient * factor,
                factors: t.factors.clone(),
            })
            .collect();
        Self::from_terms_unchecked(self.n_sites, terms)
    }

    /// Merges identical Pauli strings and drops exact zeros.
    fn simplified(self) -> Self {
        let mut merged: BTreeMap<Vec<(usize, Axis)>, f64> = BTreeMap::new();
        for t in self.terms {
            *merged.entry(t.factors).or_insert(0.0) += t.coefficient;
        }
        let terms = merged
            .into_iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|(factors, coefficient)| PauliTerm {
                coefficient,
                factors,
            })
            .collect();
        Self {
            n_sites: self.n_sites,
            terms,
            compiled: OnceLock::new(),
        }
    }

    pub fn compiled(&self) -> &CompiledOp {
        self.compiled.get_or_init(|| CompiledOp::from_terms(self.n_sites, &self.terms))
    }

    pub fn apply(&self, x: &State) -> Result<State> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut y = State::zeros(self.dim());
        self.compiled().apply_into(x.as_slice(), y.as_mut_slice());
        Ok(y)
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        self.compiled().to_dense()
    }

    /// Dense real matrix, if the operator is real.
    pub fn to_dense_real(&self) -> Option<DMatrix<f64>> {
        self.is_real().then(|| self.to_dense().map(|z| z.re))
    }

    /// Largest entry of `M - M^dagger` for the dense representation.
    pub fn hermitian_deviation(&self) -> f64 {
        let m = self.to_dense();
        (&m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Mask-diagonal form: `A = sum_k D_k F_k` where `F_k` flips the bits in
/// `masks[k]` and `D_k` is diagonal on the input index.
#[derive(Clone, Debug)]
pub struct CompiledOp {
    n_sites: usize,
    masks: Vec<usize>,
    diags: Vec<Vec<C64>>,
}

impl CompiledOp {
    fn from_terms(n_sites: usize, terms: &[PauliTerm]) -> Self {
        let dim = 1usize << n_sites;
        let mut by_mask: BTreeMap<usize, Vec<C64>> = BTreeMap::new();
        for t in terms {
            let (flip, sign, ny) = t.masks(n_sites);
            let phase = i_power(ny) * t.coefficient;
            let diag = by_mask.entry(flip).or_insert_with(|| vec![ZERO; dim]);
            for (b, d) in diag.iter_mut().enumerate() {
                if (b & sign).count_ones() % 2 == 0 {
                    *d += phase;
                } else {
                    *d -= phase;
                }
            }
        }
        let (masks, diags) = by_mask.into_iter().unzip();
        Self {
            n_sites,
            masks,
            diags,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn dim(&self) -> usize {
        1 << self.n_sites
    }

    pub fn masks(&self) -> &[usize] {
        &self.masks
    }

    pub fn diags(&self) -> &[Vec<C64>] {
        &self.diags
    }

    /// `y = A x`.
    pub fn apply_into(&self, x: &[C64], y: &mut [C64]) {
        y.iter_mut().for_each(|v| *v = ZERO);
        self.apply_add(C64::new(1.0, 0.0), x, y);
    }

    /// `y += alpha * A x`.
    pub fn apply_add(&self, alpha: C64, x: &[C64], y: &mut [C64]) {
        for (&mask, diag) in self.masks.iter().zip(&self.diags) {
            for (b, (&xb, &d)) in x.iter().zip(diag).enumerate() {
                y[b ^ mask] += alpha * d * xb;
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let dim = self.dim();
        let mut m = DMatrix::zeros(dim, dim);
        for (&mask, diag) in self.masks.iter().zip(&self.diags) {
            for (b, &d) in diag.iter().enumerate() {
                m[(b ^ mask, b)] += d;
            }
        }
        m
    }

    /// True when every stored entry is real.
    pub fn is_real(&self) -> bool {
        self.diags.iter().flatten().all(|z| z.im == 0.0)
    }
}

/// Spin chain with nearest-neighbour XY couplings given in Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub n_sites: usize,
    pub couplings_hz: Vec<f64>,
    /// rad/s per Hz applied to each `(xx + yy)` bond.
    pub coupling_scale: f64,
    /// rad/s per Hz applied to the field magnitude.
    pub field_scale: f64,
}

pub const DEFAULT_COUPLING_SCALE: f64 = PI / 2.0;
pub const DEFAULT_FIELD_SCALE: f64 = PI;

impl ChainSpec {
    pub fn new(n_sites: usize, couplings_hz: Vec<f64>) -> Result<Self> {
        Self::with_scales(
            n_sites,
            couplings_hz,
            DEFAULT_COUPLING_SCALE,
            DEFAULT_FIELD_SCALE,
        )
    }

    pub fn with_scales(
        n_sites: usize,
        couplings_hz: Vec<f64>,
        coupling_scale: f64,
        field_scale: f64,
    ) -> Result<Self> {
        let spec = Self {
            n_sites,
            couplings_hz,
            coupling_scale,
            field_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites < 2 || self.n_sites % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "chain needs an even site count >= 2, got {}",
                self.n_sites
            )));
        }
        if self.n_sites > MAX_SITES {
            return Err(Error::InvalidInput(format!(
                "chain of {} sites exceeds the {MAX_SITES}-site limit",
                self.n_sites
            )));
        }
        if self.couplings_hz.len() != self.n_sites - 1 {
            return Err(Error::InvalidInput(format!(
                "{} sites need {} couplings, got {}",
                self.n_sites,
                self.n_sites - 1,
                self.couplings_hz.len()
            )));
        }
        if self.couplings_hz.iter().any(|j| !j.is_finite()) {
            return Err(Error::InvalidInput("non-finite coupling".into()));
        }
        if !(self.coupling_scale > 0.0 && self.coupling_scale.is_finite())
            || !(self.field_scale > 0.0 && self.field_scale.is_finite())
        {
            return Err(Error::InvalidInput(
                "coupling_scale and field_scale must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Staggered SSH chain: intracell bonds `j1`, intercell bonds `j2`.
    pub fn ssh(n_sites: usize, j1_hz: f64, j2_hz: f64) -> Result<Self> {
        let couplings = (0..n_sites.saturating_sub(1))
            .map(|b| if b % 2 == 0 { j1_hz } else { j2_hz })
            .collect();
        Self::new(n_sites, couplings)
    }

    /// `J12 = J34 = 0`, `J23 = 69.7 Hz` generalised to `n_sites`.
    pub fn topological(n_sites: usize) -> Result<Self> {
        Self::ssh(n_sites, 0.0, 69.7)
    }

    /// `J12 = J34 = 41.6 Hz`, `J23 = 0` generalised to `n_sites`.
    pub fn trivial(n_sites: usize) -> Result<Self> {
        Self::ssh(n_sites, 41.6, 0.0)
    }

    /// All couplings off.
    pub fn spin_polarized(n_sites: usize) -> Result<Self> {
        Self::ssh(n_sites, 0.0, 0.0)
    }

    pub fn with_couplings(&self, couplings_hz: Vec<f64>) -> Result<Self> {
        Self::with_scales(
            self.n_sites,
            couplings_hz,
            self.coupling_scale,
            self.field_scale,
        )
    }

    pub fn with_field_scale(&self, field_scale: f64) -> Result<Self> {
        Self::with_scales(
            self.n_sites,
            self.couplings_hz.clone(),
            self.coupling_scale,
            field_scale,
        )
    }
}

/// Point on the field sphere: magnitude in Hz and polar angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldPoint {
    pub h_r_hz: f64,
    pub theta: f64,
    pub phi: f64,
}

impl FieldPoint {
    pub fn new(h_r_hz: f64, theta: f64, phi: f64) -> Result<Self> {
        if !(h_r_hz >= 0.0 && h_r_hz.is_finite()) {
            return Err(Error::InvalidInput(format!("field magnitude {h_r_hz} must be >= 0")));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::InvalidInput(format!("theta {theta} outside [0, pi]")));
        }
        if !phi.is_finite() {
            return Err(Error::InvalidInput("phi must be finite".into()));
        }
        Ok(Self {
            h_r_hz,
            theta,
            phi: phi.rem_euclid(2.0 * PI),
        })
    }

    /// Field along `+z` for `h_z >= 0`, along `-z` otherwise.
    pub fn along_z(h_z_hz: f64) -> Self {
        Self {
            h_r_hz: h_z_hz.abs(),
            theta: if h_z_hz >= 0.0 { 0.0 } else { PI },
            phi: 0.0,
        }
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }

    /// Cartesian field in Hz.
    pub fn vector_hz(&self) -> [f64; 3] {
        self.unit_vector().map(|c| c * self.h_r_hz)
    }

    /// True when the transverse component vanishes.
    pub fn is_z_aligned(&self) -> bool {
        self.h_r_hz == 0.0 || self.theta == 0.0 || self.theta == PI
    }
}

pub fn sum_pauli(n_sites: usize, axis: Axis, coefficient: f64) -> Operator {
    let terms = (0..n_sites)
        .map(|i| PauliTerm {
            coefficient,
            factors: vec![(i, axis)],
        })
        .collect();
    Operator::from_terms_unchecked(n_sites, terms)
}

pub fn single_pauli(n_sites: usize, site: usize, axis: Axis) -> Result<Operator> {
    Operator::new(n_sites, vec![PauliTerm::new(1.0, vec![(site, axis)])?])
}

pub fn pauli_pair(n_sites: usize, i: usize, j: usize, axis: Axis) -> Result<Operator> {
    Operator::new(n_sites, vec![PauliTerm::new(1.0, vec![(i, axis), (j, axis)])?])
}

/// `-(xx + yy)` on one bond with unit coefficient.
pub fn xy_bond(n_sites: usize, bond: usize, coefficient: f64) -> Operator {
    let terms = [Axis::X, Axis::Y]
        .into_iter()
        .map(|a| PauliTerm {
            coefficient: -coefficient,
            factors: vec![(bond, a), (bond + 1, a)],
        })
        .collect();
    Operator::from_terms_unchecked(n_sites, terms)
}

/// `H = -sum_i c_i (x_i x_{i+1} + y_i y_{i+1})`, `c_i = coupling_scale * J_i`.
pub fn build_xy_chain(spec: &ChainSpec) -> Result<Operator> {
    spec.validate()?;
    let mut terms = Vec::with_capacity(2 * spec.couplings_hz.len());
    for (bond, &j) in spec.couplings_hz.iter().enumerate() {
        let c = spec.coupling_scale * j;
        for a in [Axis::X, Axis::Y] {
            terms.push(PauliTerm {
                coefficient: -c,
                factors: vec![(bond, a), (bond + 1, a)],
            });
        }
    }
    Ok(Operator::from_terms_unchecked(spec.n_sites, terms))
}

/// `-h sum_i n.sigma_i` with `h = field_scale * h_r`.
pub fn build_field(n_sites: usize, field: &FieldPoint, field_scale: f64) -> Result<Operator> {
    if n_sites == 0 || n_sites > MAX_SITES {
        return Err(Error::InvalidInput(format!("site count {n_sites} outside 1..={MAX_SITES}")));
    }
    let h = field_scale * field.h_r_hz;
    let n = field.unit_vector();
    let mut terms = Vec::with_capacity(3 * n_sites);
    for i in 0..n_sites {
        for (axis, comp) in Axis::ALL.into_iter().zip(n) {
            terms.push(PauliTerm {
                coefficient: -h * comp,
                factors: vec![(i, axis)],
            });
        }
    }
    Ok(Operator::from_terms_unchecked(n_sites, terms))
}

pub fn build_total(spec: &ChainSpec, field: &FieldPoint) -> Result<Operator> {
    build_xy_chain(spec)?.plus(&build_field(spec.n_sites, field, spec.field_scale)?)
}

/// Rotating-frame NMR Hamiltonian
/// `sum_i (w_i/2) z_i + sum_{i<j} (pi J_ij / 2) z_i z_j`, `w_i = 2 pi shift_i`.
pub fn build_nmr_natural(system: &NmrSystem) -> Result<Operator> {
    system.validate()?;
    let n = system.n_spins();
    let mut terms = Vec::new();
    for (i, &shift) in system.shift_hz.iter().enumerate() {
        terms.push(PauliTerm {
            coefficient: PI * shift,
            factors: vec![(i, Axis::Z)],
        });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            terms.push(PauliTerm {
                coefficient: PI * system.coupling_hz[i][j] / 2.0,
                factors: vec![(i, Axis::Z), (j, Axis::Z)],
            });
        }
    }
    Operator::new(n, terms)
}

/// `N = sum_i (1 + z_i) / 2`; spin up counts as occupied.
pub fn particle_number(n_sites: usize) -> Operator {
    let mut terms = vec![PauliTerm {
        coefficient: n_sites as f64 / 2.0,
        factors: vec![],
    }];
    terms.extend((0..n_sites).map(|i| PauliTerm {
        coefficient: 0.5,
        factors: vec![(i, Axis::Z)],
    }));
    Operator::from_terms_unchecked(n_sites, terms)
}

/// `<psi|O|psi>` for a normalized state.
pub fn expectation(state: &State, op: &Operator) -> Result<f64> {
    if state.len() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            got: state.len(),
        });
    }
    let norm = state.norm();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidInput(format!("state norm {norm} is not 1")));
    }
    let value = state.dotc(&op.apply(state)?);
    let scale = op.norm_bound().max(1.0);
    if value.im.abs() > 1e-10 * scale {
        return Err(Error::InvalidInput(format!(
            "expectation has imaginary part {:e}",
            value.im
        )));
    }
    Ok(value.re)
}

/// Diagonal of `R_z(phi) = prod_i exp(-i phi z_i / 2)`.
pub fn rz_rotation_diag(n_sites: usize, phi: f64) -> Vec<C64> {
    (0..1usize << n_sites)
        .map(|b| C64::from_polar(1.0, -phi * magnetization(n_sites, b) as f64 / 2.0))
        .collect()
}

/// Computational basis state from per-site bits (0 = up).
pub fn basis_state(bits: &[u8]) -> State {
    let n = bits.len();
    let index = bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b != 0)
        .fold(0usize, |acc, (i, _)| acc | site_bit(n, i));
    let mut psi = State::zeros(1 << n);
    psi[index] = ONE;
    psi
}

/// `|00...0>`: every spin up.
pub fn all_up(n_sites: usize) -> State {
    basis_state(&vec![0u8; n_sites])
}

/// Dense Hamiltonian, real when the operator allows it.
#[derive(Clone, Debug)]
pub enum DenseHamiltonian {
    Real(DMatrix<f64>),
    Complex(DMatrix<C64>),
}

impl DenseHamiltonian {
    pub fn dim(&self) -> usize {
        match self {
            Self::Real(m) => m.nrows(),
            Self::Complex(m) => m.nrows(),
        }
    }

    pub fn into_complex(self) -> DMatrix<C64> {
        match self {
            Self::Real(m) => m.map(|x| C64::new(x, 0.0)),
            Self::Complex(m) => m,
        }
    }
}

struct DenseCache {
    base: DMatrix<f64>,
    base_real: bool,
    base_complex: DMatrix<C64>,
    sx: DMatrix<f64>,
    /// `sum sigma^y = i * sy_imag`.
    sy_imag: DMatrix<f64>,
    sz: DMatrix<f64>,
}

/// The family `H(h) = base - field_scale * h . sum_i sigma_i`.
pub struct FieldModel {
    n_sites: usize,
    field_scale: f64,
    base: Operator,
    sigma: [Operator; 3],
    u1_symmetric: bool,
    dense: OnceLock<DenseCache>,
}

impl std::fmt::Debug for FieldModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FieldModel")
            .field("n_sites", &self.n_sites)
            .field("field_scale", &self.field_scale)
            .field("terms", &self.base.terms().len())
            .field("u1_symmetric", &self.u1_symmetric)
            .finish()
    }
}

impl FieldModel {
    pub fn new(base: Operator, field_scale: f64) -> Result<Self> {
        if !(field_scale > 0.0 && field_scale.is_finite()) {
            return Err(Error::InvalidInput("field_scale must be positive".into()));
        }
        let n = base.n_sites();
        let sigma = Axis::ALL.map(|a| sum_pauli(n, a, 1.0));
        let u1_symmetric = commutes_with_sz(&base);
        Ok(Self {
            n_sites: n,
            field_scale,
            base,
            sigma,
            u1_symmetric,
            dense: OnceLock::new(),
        })
    }

    pub fn from_chain(spec: &ChainSpec) -> Result<Self> {
        Self::new(build_xy_chain(spec)?, spec.field_scale)
    }

    /// Uncoupled spins in the field.
    pub fn free_spins(n_sites: usize, field_scale: f64) -> Result<Self> {
        if n_sites == 0 || n_sites > MAX_SITES {
            return Err(Error::InvalidInput(format!("site count {n_sites} outside 1..={MAX_SITES}")));
        }
        Self::new(Operator::zero(n_sites), field_scale)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn dim(&self) -> usize {
        1 << self.n_sites
    }

    pub fn field_scale(&self) -> f64 {
        self.field_scale
    }

    pub fn base(&self) -> &Operator {
        &self.base
    }

    pub fn sigma_sum(&self, axis: Axis) -> &Operator {
        &self.sigma[axis as usize]
    }

    /// Whether the field-free part conserves `sum_i sigma_i^z`.
    pub fn is_u1_symmetric(&self) -> bool {
        self.u1_symmetric
    }

    /// Coefficients `c` with `H = base + sum_a c_a Sigma_a`.
    pub fn field_coefficients(&self, field: &FieldPoint) -> [f64; 3] {
        field.vector_hz().map(|v| -self.field_scale * v)
    }

    /// `dH/dtheta = sum_a c_a Sigma_a`.
    pub fn dtheta_coefficients(&self, field: &FieldPoint) -> [f64; 3] {
        let h = self.field_scale * field.h_r_hz;
        let (st, ct) = field.theta.sin_cos();
        let (sp, cp) = field.phi.sin_cos();
        [-h * ct * cp, -h * ct * sp, h * st]
    }

    /// `dH/dphi = sum_a c_a Sigma_a`.
    pub fn dphi_coefficients(&self, field: &FieldPoint) -> [f64; 3] {
        let h = self.field_scale * field.h_r_hz;
        let st = field.theta.sin();
        let (sp, cp) = field.phi.sin_cos();
        [h * st * sp, -h * st * cp, 0.0]
    }

    pub fn hamiltonian(&self, field: &FieldPoint) -> Operator {
        let c = self.field_coefficients(field);
        let mut h = self.base.clone();
        for (axis, coef) in Axis::ALL.into_iter().zip(c) {
            h = h
                .plus(&sum_pauli(self.n_sites, axis, coef))
                .expect("same site count");
        }
        h
    }

    /// `y = H(field) x`.
    pub fn apply(&self, field: &FieldPoint, x: &[C64], y: &mut [C64]) {
        self.base.compiled().apply_into(x, y);
        self.apply_sigma_add(self.field_coefficients(field), x, y);
    }

    /// `y += sum_a c_a Sigma_a x`.
    pub fn apply_sigma_add(&self, coefficients: [f64; 3], x: &[C64], y: &mut [C64]) {
        for (op, c) in self.sigma.iter().zip(coefficients) {
            if c != 0.0 {
                op.compiled().apply_add(C64::new(c, 0.0), x, y);
            }
        }
    }

    pub fn sigma_combination(&self, coefficients: [f64; 3], x: &State) -> State {
        let mut y = State::zeros(x.len());
        self.apply_sigma_add(coefficients, x.as_slice(), y.as_mut_slice());
        y
    }

    pub fn norm_bound(&self, field: &FieldPoint) -> f64 {
        self.base.norm_bound()
            + self.n_sites as f64 * self.field_scale * field.h_r_hz * 3f64.sqrt()
    }

    fn dense_cache(&self) -> &DenseCache {
        self.dense.get_or_init(|| {
            let base_complex = self.base.to_dense();
            let base_real = self.base.is_real();
            DenseCache {
                base: base_complex.map(|z| z.re),
                base_real,
                base_complex,
                sx: self.sigma[0].to_dense().map(|z| z.re),
                sy_imag: self.sigma[1].to_dense().map(|z| z.im),
                sz: self.sigma[2].to_dense().map(|z| z.re),
            }
        })
    }

    /// Dense `H(field)`; real whenever the field has no y component.
    pub fn dense(&self, field: &FieldPoint) -> DenseHamiltonian {
        let cache = self.dense_cache();
        let [cx, cy, cz] = self.field_coefficients(field);
        let real_part = &cache.base + &cache.sx * cx + &cache.sz * cz;
        if cy.abs() < 1e-300 && cache.base_real {
            DenseHamiltonian::Real(real_part)
        } else {
            let mut m = cache.base_complex.clone();
            let field_part = &cache.sx * cx + &cache.sz * cz;
            for ((z, &re), &im) in m
                .iter_mut()
                .zip(field_part.iter())
                .zip(cache.sy_imag.iter())
            {
                *z += C64::new(re, cy * im);
            }
            DenseHamiltonian::Complex(m)
        }
    }
}

fn commutes_with_sz(op: &Operator) -> bool {
    // A flip conserves magnetization only when it flips as many ones as zeros.
    let compiled = op.compiled();
    compiled.masks().iter().zip(compiled.diags()).all(|(&mask, diag)| {
        diag.iter().enumerate().all(|(b, d)| {
            let ones = (b & mask).count_ones();
            2 * ones == mask.count_ones() || d.norm() < 1e-12
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kron_pauli(n: usize, factors: &[(usize, Axis)]) -> DMatrix<C64> {
        let id = DMatrix::<C64>::identity(2, 2);
        let px = DMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO]);
        let py = DMatrix::from_row_slice(2, 2, &[ZERO, C64::new(0.0, -1.0), C64::new(0.0, 1.0), ZERO]);
        let pz = DMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE]);
        let mut m = DMatrix::<C64>::identity(1, 1);
        for site in 0..n {
            let f = match factors.iter().find(|(s, _)| *s == site) {
                None => &id,
                Some((_, Axis::X)) => &px,
                Some((_, Axis::Y)) => &py,
                Some((_, Axis::Z)) => &pz,
            };
            m = m.kronecker(f);
        }
        m
    }

    fn max_abs(m: &DMatrix<C64>) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn pauli_strings_match_kronecker_products() {
        for n in 1..=6usize {
            for axis_a in Axis::ALL {
                for axis_b in Axis::ALL {
                    for i in 0..n {
                        let j = (i + 1 + n / 2) % n;
                        let factors = if i == j {
                            vec![(i, axis_a)]
                        } else {
                            vec![(i, axis_a), (j, axis_b)]
                        };
                        let op = Operator::new(n, vec![PauliTerm::new(0.7, factors.clone()).unwrap()]).unwrap();
                        let expected = kron_pauli(n, &factors) * C64::new(0.7, 0.0);
                        assert!(max_abs(&(op.to_dense() - expected)) < 1e-14, "{n} {factors:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn term_validation() {
        assert!(PauliTerm::new(f64::NAN, vec![(0, Axis::X)]).is_err());
        assert!(PauliTerm::new(1.0, vec![(1, Axis::X), (1, Axis::Z)]).is_err());
        assert!(Operator::new(2, vec![PauliTerm::new(1.0, vec![(2, Axis::X)]).unwrap()]).is_err());
    }

    #[test]
    fn chain_spec_validation() {
        assert!(ChainSpec::new(3, vec![1.0, 1.0]).is_err());
        assert!(ChainSpec::new(4, vec![1.0, 1.0]).is_err());
        assert!(ChainSpec::new(4, vec![1.0, f64::INFINITY, 1.0]).is_err());
        assert!(ChainSpec::with_scales(2, vec![1.0], 0.0, 1.0).is_err());
        assert!(ChainSpec::new(4, vec![0.0, 69.7, 0.0]).is_ok());
    }

    #[test]
    fn xy_dimer_spectrum() {
        let j = 41.6;
        let spec = ChainSpec::new(2, vec![j]).unwrap();
        let c = spec.coupling_scale * j;
        let h = build_xy_chain(&spec).unwrap().to_dense_real().unwrap();
        let mut ev: Vec<f64> = h.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let expected = [-2.0 * c, 0.0, 0.0, 2.0 * c];
        for (a, b) in ev.iter().zip(expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn xy_chain_conserves_magnetization() {
        let spec = ChainSpec::new(4, vec![0.0, 69.7, 0.0]).unwrap();
        let h = build_xy_chain(&spec).unwrap().to_dense();
        let sz = sum_pauli(4, Axis::Z, 1.0).to_dense();
        assert!(max_abs(&(&h * &sz - &sz * &h)) < 1e-12);
        assert!(FieldModel::from_chain(&spec).unwrap().is_u1_symmetric());
        let broken = build_xy_chain(&spec).unwrap().plus(&sum_pauli(4, Axis::X, 1.0)).unwrap();
        assert!(!commutes_with_sz(&broken));
    }

    #[test]
    fn field_examples() {
        let f = FieldPoint::new(0.0, 0.3, 1.0).unwrap();
        assert!(build_field(3, &f, PI).unwrap().is_zero());

        let h = 2.5;
        let up = FieldPoint::new(h, 0.0, 0.0).unwrap();
        let op = build_field(1, &up, 1.0).unwrap();
        let m = op.to_dense();
        assert!((m[(0, 0)].re + h).abs() < 1e-14);
        assert!((m[(1, 1)].re - h).abs() < 1e-14);
        assert!((expectation(&all_up(1), &op).unwrap() + h).abs() < 1e-14);

        let y = FieldPoint::new(h, PI / 2.0, PI / 2.0).unwrap();
        let op = build_field(1, &y, 1.0).unwrap();
        assert!(!op.is_real());
        let ev = op.to_dense().symmetric_eigen().eigenvalues;
        let mut ev: Vec<f64> = ev.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] + h).abs() < 1e-12 && (ev[1] - h).abs() < 1e-12);
    }

    #[test]
    fn total_equals_chain_without_field() {
        let spec = ChainSpec::new(4, vec![41.6, 0.0, 41.6]).unwrap();
        let f = FieldPoint::new(0.0, 1.0, 2.0).unwrap();
        assert_eq!(build_total(&spec, &f).unwrap(), build_xy_chain(&spec).unwrap());
    }

    #[test]
    fn u1_covariance_of_total_hamiltonian() {
        let spec = ChainSpec::new(4, vec![12.0, 69.7, 33.0]).unwrap();
        for &(h, theta, phi) in &[(10.0, 0.4, 1.3), (50.0, 2.0, 4.0), (3.0, PI / 2.0, PI)] {
            let h0 = build_total(&spec, &FieldPoint::new(h, theta, 0.0).unwrap()).unwrap().to_dense();
            let hp = build_total(&spec, &FieldPoint::new(h, theta, phi).unwrap()).unwrap().to_dense();
            let r = DMatrix::from_diagonal(&DVector::from_vec(rz_rotation_diag(4, phi)));
            let rotated = &r * h0 * r.adjoint();
            assert!(max_abs(&(rotated - hp)) < 1e-10);
        }
    }

    #[test]
    fn nmr_natural_hamiltonian() {
        let zero = NmrSystem::new(vec![0.0; 4], vec![vec![0.0; 4]; 4]).unwrap();
        assert!(build_nmr_natural(&zero).unwrap().is_zero());

        let sys = NmrSystem::crotonic_acid();
        let op = build_nmr_natural(&sys).unwrap();
        let sz = single_pauli(4, 2, Axis::Z).unwrap().to_dense();
        let m = op.to_dense();
        assert!(max_abs(&(&m * &sz - &sz * &m)) < 1e-12);
        let e0000 = expectation(&all_up(4), &op).unwrap();
        let expected = PI / 2.0 * (41.6 + 69.7 + 72.2 + 1.4 + 7.0 + 1.2);
        assert!((e0000 - expected).abs() < 1e-10);

        let mut asym = vec![vec![0.0; 4]; 4];
        asym[0][1] = 1.0;
        assert!(NmrSystem::new(vec![0.0; 4], asym).is_err());
    }

    #[test]
    fn expectation_examples() {
        let z = single_pauli(1, 0, Axis::Z).unwrap();
        let x = single_pauli(1, 0, Axis::X).unwrap();
        assert_eq!(expectation(&all_up(1), &z).unwrap(), 1.0);
        assert_eq!(expectation(&all_up(1), &x).unwrap(), 0.0);

        let s = 0.5f64.sqrt();
        let bell = (basis_state(&[0, 1]) + basis_state(&[1, 0])) * C64::new(s, 0.0);
        let xx = pauli_pair(2, 0, 1, Axis::X).unwrap();
        assert!((expectation(&bell, &xx).unwrap() - 1.0).abs() < 1e-14);

        assert!(matches!(
            expectation(&all_up(2), &x),
            Err(Error::DimensionMismatch { .. })
        ));
        let unnormalized = all_up(1) * C64::new(2.0, 0.0);
        assert!(expectation(&unnormalized, &z).is_err());
    }

    #[test]
    fn particle_number_spectrum() {
        for n in 1..=6 {
            let op = particle_number(n);
            assert!((expectation(&all_up(n), &op).unwrap() - n as f64).abs() < 1e-14);
            assert!(expectation(&basis_state(&vec![1; n]), &op).unwrap().abs() < 1e-14);
            let d = op.to_dense();
            let mut counts = vec![0usize; n + 1];
            for b in 0..(1 << n) {
                let v = d[(b, b)].re;
                assert!((v - v.round()).abs() < 1e-14);
                counts[v.round() as usize] += 1;
            }
            for (k, &c) in counts.iter().enumerate() {
                assert_eq!(c, binomial(n, k));
            }
        }
    }

    fn binomial(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn field_model_dense_matches_operator() {
        let spec = ChainSpec::new(4, vec![5.0, 69.7, 20.0]).unwrap();
        let model = FieldModel::from_chain(&spec).unwrap();
        for f in [
            FieldPoint::new(10.0, 0.7, 0.0).unwrap(),
            FieldPoint::new(10.0, 0.7, 1.1).unwrap(),
        ] {
            let dense = model.dense(&f);
            if f.phi == 0.0 {
                assert!(matches!(dense, DenseHamiltonian::Real(_)));
            }
            let op = build_total(&spec, &f).unwrap().to_dense();
            assert!(max_abs(&(dense.into_complex() - op)) < 1e-12);
        }
    }
}

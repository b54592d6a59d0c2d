//! Idealized NMR realization of the spin chain: natural Hamiltonian,
//! refocusing compilation, RF drive mapping, amplitude noise and readout.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{chern_dynamical, DynamicalOptions, Preparation};
use crate::error::{Error, Result};
use crate::linalg::expm_hermitian;
use crate::spinops::{
    build_nmr_natural, expectation, site_bit, Axis, ChainSpec, DenseHamiltonian, FieldModel, Operator, PauliTerm, State, C64,
};

/// Spins with chemical shifts and scalar couplings, both in Hz.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NmrSystem {
    pub shift_hz: Vec<f64>,
    pub coupling_hz: Vec<Vec<f64>>,
}

impl NmrSystem {
    pub fn new(shift_hz: Vec<f64>, coupling_hz: Vec<Vec<f64>>) -> Result<Self> {
        let s = Self { shift_hz, coupling_hz };
        s.validate()?;
        Ok(s)
    }

    /// The four-carbon register with zero chemical shifts.
    pub fn crotonic_acid() -> Self {
        let mut j = vec![vec![0.0; 4]; 4];
        for &(a, b, v) in &[
            (0, 1, 41.6),
            (1, 2, 69.7),
            (2, 3, 72.2),
            (0, 2, 1.4),
            (0, 3, 7.0),
            (1, 3, 1.2),
        ] {
            j[a][b] = v;
            j[b][a] = v;
        }
        Self {
            shift_hz: vec![0.0; 4],
            coupling_hz: j,
        }
    }

    pub fn with_shifts(mut self, shift_hz: Vec<f64>) -> Result<Self> {
        self.shift_hz = shift_hz;
        self.validate()?;
        Ok(self)
    }

    pub fn n_spins(&self) -> usize {
        self.shift_hz.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_spins();
        if n == 0 || n > crate::spinops::MAX_SITES {
            return Err(Error::InvalidInput(format!("spin count {n} out of range")));
        }
        if self.coupling_hz.len() != n || self.coupling_hz.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInput("coupling matrix must be n x n".into()));
        }
        if self.shift_hz.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite chemical shift".into()));
        }
        for i in 0..n {
            if self.coupling_hz[i][i] != 0.0 {
                return Err(Error::InvalidInput(format!("nonzero self-coupling on spin {}", i + 1)));
            }
            for j in 0..n {
                let (a, b) = (self.coupling_hz[i][j], self.coupling_hz[j][i]);
                if !a.is_finite() || a != b {
                    return Err(Error::InvalidInput(format!(
                        "coupling matrix not symmetric at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.coupling_hz[i][j]
    }

    /// Diagonal of the natural Hamiltonian (rad/s).
    fn natural_diagonal(&self) -> Vec<f64> {
        let n = self.n_spins();
        (0..1usize << n)
            .map(|b| {
                let z = |i: usize| if b & site_bit(n, i) == 0 { 1.0 } else { -1.0 };
                let mut e = 0.0;
                for i in 0..n {
                    e += PI * self.shift_hz[i] * z(i);
                    for j in (i + 1)..n {
                        e += 0.5 * PI * self.coupling_hz[i][j] * z(i) * z(j);
                    }
                }
                e
            })
            .collect()
    }
}

/// `J (tau2 - tau1) / (tau1 + tau2)` for a pair of selective pi pulses on one spin.
pub fn effective_coupling(j_hz: f64, tau1: f64, tau2: f64) -> Result<f64> {
    if !(tau1 >= 0.0 && tau2 >= 0.0) {
        return Err(Error::InvalidInput("echo intervals must be non-negative".into()));
    }
    if tau1 + tau2 == 0.0 {
        return Err(Error::InvalidInput("both echo intervals are zero".into()));
    }
    Ok(j_hz * (tau2 - tau1) / (tau1 + tau2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PulseEvent {
    Delay { seconds: f64 },
    /// Instantaneous pi rotation of one spin about an axis in the xy plane.
    SelectivePi { spin: usize, phase_deg: f64 },
    /// Instantaneous rotation of every spin.
    HardRotation { angle_deg: f64, phase_deg: f64 },
    /// `-pi B (cos(phi) sum x - sin(phi) sum y)` on top of the natural Hamiltonian.
    RfDrive { amp_hz: f64, phase_deg: f64, seconds: f64 },
}

impl PulseEvent {
    pub fn duration(&self) -> f64 {
        match self {
            PulseEvent::Delay { seconds } | PulseEvent::RfDrive { seconds, .. } => *seconds,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub events: Vec<PulseEvent>,
}

impl PulseSequence {
    pub fn new(events: Vec<PulseEvent>) -> Self {
        Self { events }
    }

    pub fn total_duration(&self) -> f64 {
        self.events.iter().map(PulseEvent::duration).sum()
    }

    pub fn extend(&mut self, other: &PulseSequence) {
        self.events.extend(other.events.iter().cloned());
    }

    pub fn validate(&self, n_spins: usize) -> Result<()> {
        for (k, e) in self.events.iter().enumerate() {
            let bad = match e {
                PulseEvent::Delay { seconds } => !(*seconds >= 0.0 && seconds.is_finite()),
                PulseEvent::SelectivePi { spin, phase_deg } => *spin >= n_spins || !phase_deg.is_finite(),
                PulseEvent::HardRotation { angle_deg, phase_deg } => !(angle_deg.is_finite() && phase_deg.is_finite()),
                PulseEvent::RfDrive {
                    amp_hz,
                    phase_deg,
                    seconds,
                } => !(amp_hz.is_finite() && phase_deg.is_finite() && *seconds >= 0.0 && seconds.is_finite()),
            };
            if bad {
                return Err(Error::InvalidInput(format!("invalid pulse event {} ({e:?})", k + 1)));
            }
        }
        Ok(())
    }

    /// One event per line; spins are numbered from 1.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let _ = match e {
                PulseEvent::Delay { seconds } => writeln!(out, "DELAY {seconds}"),
                PulseEvent::SelectivePi { spin, phase_deg } => writeln!(out, "PI {} {phase_deg}", spin + 1),
                PulseEvent::HardRotation { angle_deg, phase_deg } => writeln!(out, "HARD {angle_deg} {phase_deg}"),
                PulseEvent::RfDrive {
                    amp_hz,
                    phase_deg,
                    seconds,
                } => writeln!(out, "RF {amp_hz} {phase_deg} {seconds}"),
            };
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::InvalidInput(format!("line {}: {what}: {raw:?}", n + 1));
            let mut parts = line.split_whitespace();
            let kind = parts.next().expect("non-empty line");
            let nums: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|_| bad("not a number")))
                .collect::<Result<_>>()?;
            let want = |k: usize| if nums.len() == k { Ok(()) } else { Err(bad("wrong field count")) };
            let event = match kind {
                "DELAY" => {
                    want(1)?;
                    PulseEvent::Delay { seconds: nums[0] }
                }
                "PI" => {
                    want(2)?;
                    if nums[0].fract() != 0.0 || nums[0] < 1.0 {
                        return Err(bad("spin must be a positive integer"));
                    }
                    PulseEvent::SelectivePi {
                        spin: nums[0] as usize - 1,
                        phase_deg: nums[1],
                    }
                }
                "HARD" => {
                    want(2)?;
                    PulseEvent::HardRotation {
                        angle_deg: nums[0],
                        phase_deg: nums[1],
                    }
                }
                "RF" => {
                    want(3)?;
                    PulseEvent::RfDrive {
                        amp_hz: nums[0],
                        phase_deg: nums[1],
                        seconds: nums[2],
                    }
                }
                _ => return Err(bad("unknown event")),
            };
            events.push(event);
        }
        Ok(Self { events })
    }
}

/// Toggling-frame signs of each spin over a block of segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignPattern {
    /// `signs[i][k]` for spin `i` in segment `k`.
    pub signs: Vec<Vec<i8>>,
    /// Segment durations as fractions of the block, summing to 1.
    pub durations: Vec<f64>,
}

impl SignPattern {
    pub fn n_spins(&self) -> usize {
        self.signs.len()
    }

    pub fn n_segments(&self) -> usize {
        self.durations.len()
    }

    /// Checks shapes, `+-1` entries and durations summing to 1.
    pub fn validate(&self) -> Result<()> {
        let m = self.n_segments();
        if self.signs.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidInput("sign rows differ from segment count".into()));
        }
        if self.signs.iter().flatten().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidInput("signs must be +1 or -1".into()));
        }
        if self.durations.iter().any(|d| !(*d >= 0.0)) || (self.durations.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput("segment fractions must be non-negative and sum to 1".into()));
        }
        Ok(())
    }

    /// Residual chemical-shift weight `sum_k s_ik d_k` of each spin.
    pub fn shift_weights(&self) -> Vec<f64> {
        self.signs
            .iter()
            .map(|row| row.iter().zip(&self.durations).map(|(&s, d)| s as f64 * d).sum())
            .collect()
    }

    /// Realized coupling weight `sum_k s_ik s_jk d_k / sum_k d_k`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let total: f64 = self.durations.iter().sum();
        (0..self.n_segments())
            .map(|k| (self.signs[i][k] * self.signs[j][k]) as f64 * self.durations[k])
            .sum::<f64>()
            / total
    }

    /// Average zz Hamiltonian `sum_{i<j} (pi/2) w_ij J_ij z_i z_j` under `system`.
    pub fn average_hamiltonian(&self, system: &NmrSystem) -> Result<Operator> {
        let n = self.n_spins();
        let mut terms = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let c = 0.5 * PI * system.coupling(i, j) * self.weight(i, j);
                if c != 0.0 {
                    terms.push(PauliTerm::new(c, vec![(i, Axis::Z), (j, Axis::Z)])?);
                }
            }
        }
        Operator::new(n, terms)
    }

    /// Pulse sequence realizing the pattern over `duration` seconds. Every spin
    /// receives an even number of pi pulses, so the frame returns to the lab frame.
    pub fn sequence(&self, duration: f64) -> PulseSequence {
        let n = self.n_spins();
        let mut frame = vec![1i8; n];
        let mut events = Vec::new();
        let mut flip_to = |target: &[i8], events: &mut Vec<PulseEvent>| {
            for i in 0..n {
                if frame[i] != target[i] {
                    events.push(PulseEvent::SelectivePi { spin: i, phase_deg: 0.0 });
                    frame[i] = target[i];
                }
            }
        };
        for k in 0..self.n_segments() {
            let column: Vec<i8> = (0..n).map(|i| self.signs[i][k]).collect();
            flip_to(&column, &mut events);
            events.push(PulseEvent::Delay {
                seconds: self.durations[k] * duration,
            });
        }
        flip_to(&vec![1; n], &mut events);
        PulseSequence { events }
    }
}

/// Non-negative least squares (Lawson-Hanson).
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * a.norm().max(1.0) * b.norm().max(1.0);
    for _ in 0..3 * n {
        let w = a.transpose() * (b - a * &x);
        let pick = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&p, &q| w[p].total_cmp(&w[q]));
        let Some(j) = pick else { break };
        passive[j] = true;
        for _ in 0..3 * n {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(&idx);
            let z = sub
                .clone()
                .svd(true, true)
                .solve(b, 1e-13)
                .unwrap_or_else(|_| DVector::zeros(idx.len()));
            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &col) in idx.iter().enumerate() {
                    x[col] = z[k];
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (k, &col) in idx.iter().enumerate() {
                if z[k] <= 0.0 {
                    let denom = x[col] - z[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[col] / denom);
                    }
                }
            }
            for (k, &col) in idx.iter().enumerate() {
                x[col] += alpha * (z[k] - x[col]);
                if x[col] <= tol {
                    x[col] = 0.0;
                    passive[col] = false;
                }
            }
        }
    }
    x
}

/// Default largest number of toggling segments in a refocusing block.
pub const DEFAULT_SEGMENT_BUDGET: usize = 16;
/// Largest realized-weight error a compiled pattern may carry.
pub const WEIGHT_TOL: f64 = 1e-9;

/// Finds toggling durations realizing `targets` (pair, weight) on nearest-neighbour
/// pairs, zero weight on every other pair and zero residual chemical shift.
///
/// The candidate segments are all `2^n` sign columns; the durations are a
/// non-negative least-squares solution, so the support is small. Segments are
/// ordered along a Gray code to keep the pulse count low.
pub fn compile_refocusing(
    system: &NmrSystem,
    targets: &[(usize, usize, f64)],
    budget: usize,
) -> Result<(SignPattern, PulseSequence)> {
    system.validate()?;
    let n = system.n_spins();
    if n > 10 {
        return Err(Error::InvalidInput("refocusing search limited to 10 spins".into()));
    }
    let mut w = BTreeMap::new();
    for &(i, j, v) in targets {
        let (a, b) = (i.min(j), i.max(j));
        if b >= n || b != a + 1 {
            return Err(Error::InvalidInput(format!(
                "target weight on ({}, {}) is not a nearest-neighbour pair",
                i + 1,
                j + 1
            )));
        }
        if !(-1.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!("weight {v} outside [-1, 1]")));
        }
        w.insert((a, b), v);
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let rows = n + pairs.len() + 1;
    // Gray-code order of the candidate columns.
    let columns: Vec<usize> = (0..1usize << n).map(|g| g ^ (g >> 1)).collect();
    let sign = |col: usize, i: usize| if col >> i & 1 == 0 { 1.0 } else { -1.0 };
    let a = DMatrix::from_fn(rows, columns.len(), |r, c| {
        let col = columns[c];
        if r < n {
            sign(col, r)
        } else if r < n + pairs.len() {
            let (i, j) = pairs[r - n];
            sign(col, i) * sign(col, j)
        } else {
            1.0
        }
    });
    let b = DVector::from_fn(rows, |r, _| {
        if r < n {
            0.0
        } else if r < n + pairs.len() {
            *w.get(&pairs[r - n]).unwrap_or(&0.0)
        } else {
            1.0
        }
    });
    let d = nnls(&a, &b);
    let residual = (&a * &d - &b).amax();
    let support: Vec<usize> = (0..columns.len()).filter(|&c| d[c] > 0.0).collect();
    if residual > WEIGHT_TOL || support.len() > budget {
        return Err(Error::Infeasible {
            budget,
            best_residual: residual,
        });
    }
    let total: f64 = support.iter().map(|&c| d[c]).sum();
    let pattern = SignPattern {
        signs: (0..n)
            .map(|i| support.iter().map(|&c| sign(columns[c], i) as i8).collect())
            .collect(),
        durations: support.iter().map(|&c| d[c] / total).collect(),
    };
    let worst = pairs
        .iter()
        .map(|&(i, j)| (pattern.weight(i, j) - w.get(&(i, j)).unwrap_or(&0.0)).abs())
        .chain(pattern.shift_weights().into_iter().map(f64::abs))
        .fold(0.0, f64::max);
    if worst > WEIGHT_TOL {
        return Err(Error::Infeasible {
            budget,
            best_residual: worst,
        });
    }
    let sequence = pattern.sequence(1.0);
    Ok((pattern, sequence))
}

/// Weights that turn the natural couplings into the chain couplings of `spec`
/// with the `-(pi/2) J (xx + yy)` sign once rotated by [`compile_xy`].
pub fn chain_targets(system: &NmrSystem, spec: &ChainSpec) -> Result<Vec<(usize, usize, f64)>> {
    if spec.n_sites != system.n_spins() {
        return Err(Error::DimensionMismatch {
            expected: system.n_spins(),
            got: spec.n_sites,
        });
    }
    spec.couplings_hz
        .iter()
        .enumerate()
        .map(|(b, &j)| {
            let natural = system.coupling(b, b + 1);
            if j == 0.0 {
                return Ok((b, b + 1, 0.0));
            }
            let w = -j / natural;
            if !w.is_finite() || w.abs() > 1.0 {
                return Err(Error::InvalidInput(format!(
                    "J{}{} = {j} Hz exceeds the natural coupling {natural} Hz",
                    b + 1,
                    b + 2
                )));
            }
            Ok((b, b + 1, w))
        })
        .collect()
}

fn rotated_block(pattern: &SignPattern, seconds: f64, axis_phase_deg: f64, pre_angle: f64) -> PulseSequence {
    let mut seq = PulseSequence::new(vec![PulseEvent::HardRotation {
        angle_deg: pre_angle,
        phase_deg: axis_phase_deg,
    }]);
    seq.extend(&pattern.sequence(seconds));
    seq.events.push(PulseEvent::HardRotation {
        angle_deg: -pre_angle,
        phase_deg: axis_phase_deg,
    });
    seq
}

/// Turns a zz refocusing pattern into `xx + yy` with the same weights by
/// conjugating blocks with global pi/2 rotations: about y for xx, about x for
/// yy. Slices follow the symmetric pattern `xx(t/2) yy(t) xx(t/2)`.
///
/// `effective_time` is the evolution time of the target Hamiltonian; the
/// sequence takes twice as long because xx and yy blocks alternate.
pub fn compile_xy(pattern: &SignPattern, slices: usize, effective_time: f64) -> Result<PulseSequence> {
    if slices < 1 {
        return Err(Error::InvalidInput("need at least one Trotter slice".into()));
    }
    if !(effective_time >= 0.0) {
        return Err(Error::InvalidInput("effective time must be non-negative".into()));
    }
    let dt = effective_time / slices as f64;
    // R_y(pi/2) z R_y(-pi/2) = x and R_x(-pi/2) z R_x(pi/2) = y.
    let xx = |t: f64| rotated_block(pattern, t, 90.0, -90.0);
    let yy = |t: f64| rotated_block(pattern, t, 0.0, 90.0);
    let mut seq = PulseSequence::default();
    for _ in 0..slices {
        seq.extend(&xx(0.5 * dt));
        seq.extend(&yy(dt));
        seq.extend(&xx(0.5 * dt));
    }
    Ok(seq)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfDrive {
    pub b_rf_hz: f64,
    /// Radians.
    pub phi_rf: f64,
}

impl RfDrive {
    pub fn event(&self, seconds: f64) -> PulseEvent {
        PulseEvent::RfDrive {
            amp_hz: self.b_rf_hz,
            phase_deg: self.phi_rf.to_degrees(),
            seconds,
        }
    }
}

/// RF drive realizing the field `(h_r, theta, phi = pi/2)` after the y frame
/// rotation; `field_scale` is the chain's field coefficient per Hz.
pub fn compile_field(h_r_hz: f64, theta: f64, field_scale: f64) -> Result<RfDrive> {
    if !(h_r_hz >= 0.0 && h_r_hz.is_finite()) || !(0.0..=PI).contains(&theta) {
        return Err(Error::InvalidInput(format!("field ({h_r_hz} Hz, theta {theta}) out of range")));
    }
    Ok(RfDrive {
        b_rf_hz: field_scale * h_r_hz / PI,
        phi_rf: 2.0 * PI - theta,
    })
}

/// `exp(-i angle/2 (cos(phase) sigma^x + sin(phase) sigma^y))`.
fn rotation(angle: f64, phase: f64) -> [[C64; 2]; 2] {
    let (c, s) = ((0.5 * angle).cos(), (0.5 * angle).sin());
    let e = C64::from_polar(1.0, phase);
    [
        [C64::new(c, 0.0), C64::new(0.0, -s) * e.conj()],
        [C64::new(0.0, -s) * e, C64::new(c, 0.0)],
    ]
}

fn apply_local(n: usize, site: usize, u: &[[C64; 2]; 2], v: &mut [C64]) {
    let bit = site_bit(n, site);
    for b in 0..v.len() {
        if b & bit == 0 {
            let (a0, a1) = (v[b], v[b | bit]);
            v[b] = u[0][0] * a0 + u[0][1] * a1;
            v[b | bit] = u[1][0] * a0 + u[1][1] * a1;
        }
    }
}

#[derive(Clone, Debug)]
pub enum SimInput {
    State(State),
    Unitary,
}

#[derive(Clone, Debug)]
pub enum SimOutput {
    State(State),
    Unitary(DMatrix<C64>),
}

/// Runs a sequence with instantaneous pulses and exact free evolution.
///
/// `amplitude_scale` multiplies RF drive amplitudes (inhomogeneity).
pub fn simulate_sequence(
    system: &NmrSystem,
    sequence: &PulseSequence,
    input: SimInput,
    amplitude_scale: f64,
) -> Result<SimOutput> {
    system.validate()?;
    let n = system.n_spins();
    sequence.validate(n)?;
    let dim = 1usize << n;
    let mut columns: Vec<Vec<C64>> = match &input {
        SimInput::State(s) => {
            if s.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.len(),
                });
            }
            vec![s.as_slice().to_vec()]
        }
        SimInput::Unitary => (0..dim)
            .map(|c| {
                let mut v = vec![C64::new(0.0, 0.0); dim];
                v[c] = C64::new(1.0, 0.0);
                v
            })
            .collect(),
    };
    let diag = system.natural_diagonal();
    let natural = build_nmr_natural(system)?;
    for event in &sequence.events {
        match *event {
            PulseEvent::Delay { seconds } => {
                let phases: Vec<C64> = diag.iter().map(|e| C64::from_polar(1.0, -e * seconds)).collect();
                for v in columns.iter_mut() {
                    v.iter_mut().zip(&phases).for_each(|(a, p)| *a *= p);
                }
            }
            PulseEvent::SelectivePi { spin, phase_deg } => {
                let u = rotation(PI, phase_deg.to_radians());
                columns.iter_mut().for_each(|v| apply_local(n, spin, &u, v));
            }
            PulseEvent::HardRotation { angle_deg, phase_deg } => {
                let u = rotation(angle_deg.to_radians(), phase_deg.to_radians());
                for v in columns.iter_mut() {
                    for i in 0..n {
                        apply_local(n, i, &u, v);
                    }
                }
            }
            PulseEvent::RfDrive {
                amp_hz,
                phase_deg,
                seconds,
            } => {
                let b = -PI * amp_hz * amplitude_scale;
                let phi = phase_deg.to_radians();
                let mut terms = natural.terms().to_vec();
                for i in 0..n {
                    terms.push(PauliTerm::new(b * phi.cos(), vec![(i, Axis::X)])?);
                    terms.push(PauliTerm::new(-b * phi.sin(), vec![(i, Axis::Y)])?);
                }
                let h = Operator::new(n, terms)?;
                let u = expm_hermitian(DenseHamiltonian::Complex(h.to_dense()), seconds);
                for v in columns.iter_mut() {
                    let out = &u * DVector::from_column_slice(v);
                    v.copy_from_slice(out.as_slice());
                }
            }
        }
    }
    Ok(match input {
        SimInput::State(_) => SimOutput::State(State::from_vec(columns.pop().expect("one column"))),
        SimInput::Unitary => SimOutput::Unitary(DMatrix::from_fn(dim, dim, |r, c| columns[c][r])),
    })
}

pub fn sequence_unitary(system: &NmrSystem, sequence: &PulseSequence, amplitude_scale: f64) -> Result<DMatrix<C64>> {
    match simulate_sequence(system, sequence, SimInput::Unitary, amplitude_scale)? {
        SimOutput::Unitary(u) => Ok(u),
        SimOutput::State(_) => unreachable!("unitary mode returns a propagator"),
    }
}

/// `|Tr(U_target^dag U_sequence)| / 2^L` with `U_target = exp(-i target duration)`.
pub fn verify_sequence(system: &NmrSystem, sequence: &PulseSequence, target: &Operator, duration: f64) -> Result<f64> {
    if !(duration > 0.0) {
        return Err(Error::InvalidInput("duration must be positive".into()));
    }
    if target.n_sites() != system.n_spins() {
        return Err(Error::DimensionMismatch {
            expected: system.n_spins(),
            got: target.n_sites(),
        });
    }
    let u = sequence_unitary(system, sequence, 1.0)?;
    let ut = expm_hermitian(DenseHamiltonian::Complex(target.to_dense()), duration);
    let tr: C64 = (0..u.nrows())
        .map(|r| (0..u.ncols()).map(|c| ut[(c, r)].conj() * u[(c, r)]).sum::<C64>())
        .sum();
    Ok((tr.norm() / u.nrows() as f64).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub spread: f64,
    pub seed: u64,
    /// Amplitude factor `1 + delta` of each draw.
    pub scales: Vec<f64>,
    /// Observables at the nominal amplitude.
    pub reference: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl EnsembleStats {
    /// `sqrt(sum (mean - reference)^2 / M)` over the observables in `range`.
    pub fn sigma_q(&self, range: std::ops::Range<usize>) -> f64 {
        let m = range.len() as f64;
        (range.map(|k| (self.mean[k] - self.reference[k]).powi(2)).sum::<f64>() / m).sqrt()
    }
}

/// Re-runs `eval(scale)` with `scale = 1 + delta`, `delta ~ U(-spread, spread)`.
///
/// Draws come from a seeded ChaCha stream before any evaluation, so results do
/// not depend on the thread count.
pub fn rf_inhomogeneity_ensemble<F>(eval: F, spread: f64, n_draws: usize, seed: u64) -> Result<EnsembleStats>
where
    F: Fn(f64) -> Result<Vec<f64>> + Sync,
{
    if n_draws < 10 {
        return Err(Error::InvalidInput(format!("ensemble needs at least 10 draws, got {n_draws}")));
    }
    if !(0.0..1.0).contains(&spread) {
        return Err(Error::InvalidInput(format!("spread {spread} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..n_draws)
        .map(|_| if spread > 0.0 { 1.0 + rng.gen_range(-spread..=spread) } else { 1.0 })
        .collect();
    let reference = eval(1.0)?;
    let runs = scales.par_iter().map(|&s| eval(s)).collect::<Result<Vec<_>>>()?;
    let m = reference.len();
    if runs.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidInput("ensemble draws returned different observable counts".into()));
    }
    let nd = n_draws as f64;
    let mean: Vec<f64> = (0..m).map(|k| runs.iter().map(|r| r[k]).sum::<f64>() / nd).collect();
    let std = (0..m)
        .map(|k| (runs.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / nd).sqrt())
        .collect();
    Ok(EnsembleStats {
        spread,
        seed,
        scales,
        reference,
        mean,
        std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchNoise {
    pub stats: EnsembleStats,
    pub n_samples: usize,
    /// Deviation of each spin's ensemble-averaged `<x_j>(t)` from the ideal trace.
    pub sigma_q_per_spin: Vec<f64>,
    pub sigma_q: f64,
    pub chern_reference: f64,
    /// Chern number of the ensemble-averaged signal.
    pub chern_mean: f64,
    pub chern_std: f64,
}

/// RF amplitude ensemble over a dynamical Chern run. The NMR signal averages
/// over the sample, so deviations are taken on the ensemble-mean traces.
pub fn quench_noise_ensemble(
    model: &FieldModel,
    h_r_hz: f64,
    t_f: f64,
    spread: f64,
    n_draws: usize,
    seed: u64,
    opts: &DynamicalOptions,
) -> Result<QuenchNoise> {
    let n = model.n_sites();
    let eval = |scale: f64| {
        let o = DynamicalOptions {
            amplitude_scale: scale,
            ..opts.clone()
        };
        let d = chern_dynamical(model, h_r_hz, t_f, &Preparation::Exact, &o)?;
        let mut v: Vec<f64> = d.record.sigma_x.iter().flatten().copied().collect();
        v.push(d.result.value);
        Ok(v)
    };
    let stats = rf_inhomogeneity_ensemble(eval, spread, n_draws, seed)?;
    let m = opts.n_samples;
    let sigma_q_per_spin: Vec<f64> = (0..n).map(|j| stats.sigma_q(j * m..(j + 1) * m)).collect();
    let last = n * m;
    Ok(QuenchNoise {
        n_samples: m,
        sigma_q: sigma_q_per_spin.iter().sum::<f64>() / n as f64,
        sigma_q_per_spin,
        chern_reference: stats.reference[last],
        chern_mean: stats.mean[last],
        chern_std: stats.std[last],
        stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutSetting {
    pub label: String,
    /// Lab-frame observables this setting yields, with their values.
    pub observables: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub settings: Vec<ReadoutSetting>,
    /// `c_x[i][j] = <x_i x_j> - <x_i><x_j>`.
    pub c_x: Vec<Vec<f64>>,
    pub c_z: Vec<Vec<f64>>,
}

fn label(axis: char, sites: &[usize]) -> String {
    sites.iter().map(|s| format!("{axis}{}", s + 1)).collect()
}

fn observable(n: usize, factors: Vec<(usize, Axis)>, state: &State) -> Result<f64> {
    expectation(state, &Operator::new(n, vec![PauliTerm::new(1.0, factors)?])?)
}

/// Emulates the five readout settings (identity and a pi/2 y pulse on each spin)
/// at expectation level and rebuilds the x and z correlation matrices.
///
/// Setting `I` reads every `<x_j>`. Setting `R_i` turns spin `i`'s z into x, so
/// spin `i`'s multiplet gives `<z_i>` and `<z_i z_k>`, and spin `k`'s multiplet
/// split by spin `i` gives `<x_i x_k>`, for `k > i`.
pub fn readout_correlations(state: &State) -> Result<Correlations> {
    let dim = state.len();
    if !dim.is_power_of_two() || dim < 2 {
        return Err(Error::InvalidInput(format!("state length {dim} is not 2^n")));
    }
    if (state.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("state is not normalized".into()));
    }
    let n = dim.trailing_zeros() as usize;
    let r = rotation(PI / 2.0, PI / 2.0);
    // Conjugation signs of the readout pulse: R^dag x R = s_x z, R^dag z R = s_z x.
    let conj = |m: [[C64; 2]; 2], b: [[C64; 2]; 2]| -> f64 {
        let mut acc = C64::new(0.0, 0.0);
        for p in 0..2 {
            for q in 0..2 {
                let mut v = C64::new(0.0, 0.0);
                for k in 0..2 {
                    for l in 0..2 {
                        v += r[k][p].conj() * m[k][l] * r[l][q];
                    }
                }
                acc += b[q][p] * v;
            }
        }
        0.5 * acc.re
    };
    let sx = [[C64::new(0.0, 0.0), C64::new(1.0, 0.0)], [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]];
    let sz = [[C64::new(1.0, 0.0), C64::new(0.0, 0.0)], [C64::new(0.0, 0.0), C64::new(-1.0, 0.0)]];
    let s_x = conj(sx, sz);
    let s_z = conj(sz, sx);

    let mut settings = vec![ReadoutSetting {
        label: "I".into(),
        observables: (0..n)
            .map(|j| Ok((label('x', &[j]), observable(n, vec![(j, Axis::X)], state)?)))
            .collect::<Result<_>>()?,
    }];
    for i in 0..n {
        let mut rotated = state.clone();
        apply_local(n, i, &r, rotated.as_mut_slice());
        let mut obs = vec![(label('z', &[i]), observable(n, vec![(i, Axis::X)], &rotated)? / s_x)];
        for k in (i + 1)..n {
            let v = observable(n, vec![(i, Axis::X), (k, Axis::Z)], &rotated)? / s_x;
            obs.push((label('z', &[i, k]), v));
        }
        for k in (i + 1)..n {
            let v = observable(n, vec![(k, Axis::X), (i, Axis::Z)], &rotated)? / s_z;
            obs.push((label('x', &[i, k]), v));
        }
        settings.push(ReadoutSetting {
            label: format!("R{}y(pi/2)", i + 1),
            observables: obs,
        });
    }
    let table: BTreeMap<String, f64> = settings
        .iter()
        .flat_map(|s| s.observables.iter().cloned())
        .collect();
    let get = |key: String| -> Result<f64> {
        table
            .get(&key)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("readout plan misses observable {key}")))
    };
    let mut c_x = vec![vec![0.0; n]; n];
    let mut c_z = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (i.min(j), i.max(j));
            let (xx, zz) = if a == b {
                (1.0, 1.0)
            } else {
                (get(label('x', &[a, b]))?, get(label('z', &[a, b]))?)
            };
            c_x[i][j] = xx - get(label('x', &[i]))? * get(label('x', &[j]))?;
            c_z[i][j] = zz - get(label('z', &[i]))? * get(label('z', &[j]))?;
        }
    }
    Ok(Correlations { settings, c_x, c_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spinops::{all_up, build_field, build_total, build_xy_chain, FieldPoint};
    use proptest::prelude::*;
    use rand::Rng;

    fn shifted(seed: u64) -> NmrSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shifts = (0..4).map(|_| rng.gen_range(-2000.0..2000.0)).collect();
        NmrSystem::crotonic_acid().with_shifts(shifts).unwrap()
    }

    #[test]
    fn effective_coupling_examples() {
        assert_eq!(effective_coupling(69.7, 0.3, 0.3).unwrap(), 0.0);
        assert_eq!(effective_coupling(69.7, 0.0, 0.3).unwrap(), 69.7);
        assert!((effective_coupling(41.6, 0.2, 0.1).unwrap() + 41.6 / 3.0).abs() < 1e-12);
        assert!(effective_coupling(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let seq = PulseSequence::new(vec![
            PulseEvent::Delay { seconds: 0.1 / 3.0 },
            PulseEvent::SelectivePi { spin: 2, phase_deg: 0.0 },
            PulseEvent::HardRotation {
                angle_deg: -90.0,
                phase_deg: 90.0,
            },
            PulseEvent::RfDrive {
                amp_hz: 10.0 / 7.0,
                phase_deg: 359.99999999,
                seconds: 1e-3,
            },
        ]);
        let back = PulseSequence::parse(&seq.to_text()).unwrap();
        assert_eq!(back, seq);
        assert!(PulseSequence::parse("PI 0 0").is_err());
        assert!(PulseSequence::parse("WAIT 1").is_err());
    }

    #[test]
    fn echo_removes_one_spin() {
        // Delay, pi on spin 1, delay, pi on spin 1: spin 1's shift and couplings vanish.
        let sys = shifted(3);
        let tau = 0.004;
        let seq = PulseSequence::new(vec![
            PulseEvent::Delay { seconds: tau },
            PulseEvent::SelectivePi { spin: 0, phase_deg: 0.0 },
            PulseEvent::Delay { seconds: tau },
            PulseEvent::SelectivePi { spin: 0, phase_deg: 0.0 },
        ]);
        let mut reduced = sys.clone();
        reduced.shift_hz[0] = 0.0;
        for j in 1..4 {
            reduced.coupling_hz[0][j] = 0.0;
            reduced.coupling_hz[j][0] = 0.0;
        }
        let target = build_nmr_natural(&reduced).unwrap();
        assert!(verify_sequence(&sys, &seq, &target, 2.0 * tau).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn verify_sequence_edges() {
        let sys = shifted(2);
        let id = sequence_unitary(&sys, &PulseSequence::default(), 1.0).unwrap();
        assert!((id - DMatrix::<C64>::identity(16, 16)).iter().all(|z| z.norm() < 1e-15));
        let t = 0.01;
        let seq = PulseSequence::new(vec![PulseEvent::Delay { seconds: t }]);
        let natural = build_nmr_natural(&sys).unwrap();
        assert!((verify_sequence(&sys, &seq, &natural, t).unwrap() - 1.0).abs() < 1e-10);
        let x = crate::spinops::sum_pauli(4, Axis::X, 1.0);
        let zero = NmrSystem::new(vec![0.0; 4], vec![vec![0.0; 4]; 4]).unwrap();
        // ||sum x|| = 4, so duration pi/4 winds the target by pi.
        let phi = verify_sequence(&zero, &PulseSequence::default(), &x, PI / 4.0).unwrap();
        assert!(phi < 1.0 - 1e-6);
        assert!(verify_sequence(&sys, &seq, &natural, 0.0).is_err());
    }

    #[test]
    fn compiled_topological_state_evolution() {
        let sys = shifted(13);
        let spec = ChainSpec::topological(4).unwrap();
        let (p, _) = compile_refocusing(&sys, &chain_targets(&sys, &spec).unwrap(), 16).unwrap();
        p.validate().unwrap();
        let t = 1.0 / (2.0 * 69.7);
        let seq = compile_xy(&p, 1, t).unwrap();
        let start = crate::spinops::basis_state(&[0, 1, 1, 0]);
        let SimOutput::State(got) = simulate_sequence(&sys, &seq, SimInput::State(start.clone()), 1.0).unwrap() else {
            unreachable!()
        };
        let h = build_xy_chain(&spec).unwrap();
        let u = expm_hermitian(DenseHamiltonian::Complex(h.to_dense()), t);
        let want = &u * DVector::from_column_slice(start.as_slice());
        let overlap: C64 = want.iter().zip(got.as_slice()).map(|(a, b)| a.conj() * b).sum();
        assert!(overlap.norm_sqr() >= 0.999);
    }

    #[test]
    fn dimer_trotter_benchmark() {
        let sys = shifted(17);
        let spec = ChainSpec::new(4, vec![0.0, 69.7, 0.0]).unwrap();
        let (p, _) = compile_refocusing(&sys, &chain_targets(&sys, &spec).unwrap(), 16).unwrap();
        let target = build_xy_chain(&spec).unwrap();
        let seq = compile_xy(&p, 8, 1.0 / 69.7).unwrap();
        assert!(verify_sequence(&sys, &seq, &target, 1.0 / 69.7).unwrap() >= 0.999);
    }

    #[test]
    fn refocusing_patterns() {
        let sys = NmrSystem::crotonic_acid();
        let (p, _) = compile_refocusing(&sys, &[(0, 1, 0.0), (1, 2, 1.0), (2, 3, 0.0)], 16).unwrap();
        assert!((p.weight(1, 2) - 1.0).abs() < 1e-9);
        for (i, j) in [(0, 1), (2, 3), (0, 2), (0, 3), (1, 3)] {
            assert!(p.weight(i, j).abs() < 1e-9);
        }
        assert!(p.shift_weights().iter().all(|s| s.abs() < 1e-9));
        let (zero, seq) = compile_refocusing(&sys, &[], 16).unwrap();
        let h = zero.average_hamiltonian(&sys).unwrap();
        assert!(h.terms().iter().all(|t| t.coefficient().abs() < 1e-9));
        let big = NmrSystem::crotonic_acid().with_shifts(vec![1000.0; 4]).unwrap();
        let u = sequence_unitary(&big, &seq.clone(), 1.0).unwrap();
        let v = sequence_unitary(&sys, &seq, 1.0).unwrap();
        let tr: C64 = (0..16).map(|r| (0..16).map(|c| v[(c, r)].conj() * u[(c, r)]).sum::<C64>()).sum();
        assert!(tr.norm() / 16.0 > 0.999);
        // Three perfectly correlated pairs around a frustrated loop are not a valid pattern.
        let frustrated = NmrSystem::new(
            vec![0.0; 3],
            vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]],
        )
        .unwrap();
        assert!(matches!(
            compile_refocusing(&frustrated, &[(0, 1, -1.0), (1, 2, -1.0)], 16),
            Err(Error::Infeasible { .. })
        ));
        assert!(compile_refocusing(&sys, &[(0, 2, 0.5)], 16).is_err());
    }

    #[test]
    fn average_hamiltonian_matches_simulation() {
        let sys = shifted(11);
        let (p, _) = compile_refocusing(&sys, &[(0, 1, -0.4), (1, 2, 0.5), (2, 3, -0.2)], 16).unwrap();
        let t = 2e-3;
        let u = sequence_unitary(&sys, &p.sequence(t), 1.0).unwrap();
        let h = p.average_hamiltonian(&sys).unwrap();
        let hd = h.to_dense();
        let phase0 = u[(0, 0)].arg() + hd[(0, 0)].re * t;
        for b in 0..16 {
            let predicted = -hd[(b, b)].re * t;
            let got = (u[(b, b)].arg() - phase0 + PI).rem_euclid(2.0 * PI) - PI;
            assert!((got - predicted).abs() <= 1e-6 * predicted.abs().max(1e-3), "{b}");
        }
    }

    #[test]
    fn compiled_chains_match_targets() {
        let sys = shifted(5);
        for spec in [ChainSpec::topological(4).unwrap(), ChainSpec::trivial(4).unwrap()] {
            let targets = chain_targets(&sys, &spec).unwrap();
            let (p, _) = compile_refocusing(&sys, &targets, DEFAULT_SEGMENT_BUDGET).unwrap();
            let period = 1.0 / 69.7;
            let seq = compile_xy(&p, 1, period).unwrap();
            assert!((seq.total_duration() - 2.0 * period).abs() < 1e-12);
            let phi = verify_sequence(&sys, &seq, &build_xy_chain(&spec).unwrap(), period).unwrap();
            assert!(phi >= 0.999, "{phi}");
        }
    }

    #[test]
    fn trotter_slicing_converges() {
        let sys = shifted(7);
        let spec = ChainSpec::new(4, vec![20.8, 30.0, 20.8]).unwrap();
        let (p, _) = compile_refocusing(&sys, &chain_targets(&sys, &spec).unwrap(), 16).unwrap();
        let target = build_xy_chain(&spec).unwrap();
        let period = 1.0 / 69.7;
        let inf = |n| 1.0 - verify_sequence(&sys, &compile_xy(&p, n, period).unwrap(), &target, period).unwrap();
        let (a, b) = (inf(2), inf(4));
        assert!(a / b >= 3.0, "{a} {b}");
        assert!(inf(8) < 1e-3);
        let (zero, _) = compile_refocusing(&sys, &[], 16).unwrap();
        let id = compile_xy(&zero, 3, period).unwrap();
        assert!(verify_sequence(&sys, &id, &Operator::zero(4), period).unwrap() > 1.0 - 1e-12);
        assert!(compile_xy(&p, 0, period).is_err());
    }

    #[test]
    fn rf_drive_maps_to_field() {
        let f = PI;
        for (h, theta) in [(10.0, 0.0), (50.0, 1.1), (190.0, PI)] {
            let drive = compile_field(h, theta, f).unwrap();
            let zero = NmrSystem::new(vec![0.0; 4], vec![vec![0.0; 4]; 4]).unwrap();
            // Generator of the drive seen in the frame rotated by R_y(-pi/2).
            let t = 1e-4;
            let seq = PulseSequence::new(vec![
                PulseEvent::HardRotation {
                    angle_deg: 90.0,
                    phase_deg: 90.0,
                },
                drive.event(t),
                PulseEvent::HardRotation {
                    angle_deg: -90.0,
                    phase_deg: 90.0,
                },
            ]);
            let target = build_field(4, &FieldPoint::new(h, theta, PI / 2.0).unwrap(), f).unwrap();
            let u = sequence_unitary(&zero, &seq, 1.0).unwrap();
            let ut = expm_hermitian(DenseHamiltonian::Complex(target.to_dense()), t);
            assert!((u - ut).camax() < 1e-9);
        }
        let d = compile_field(0.0, 0.0, f).unwrap();
        assert_eq!(d.b_rf_hz, 0.0);
        assert_eq!(d.phi_rf, 2.0 * PI);
    }

    #[test]
    fn readout_of_ideal_states() {
        let small = FieldPoint::along_z(1.0);
        let topo = build_total(&ChainSpec::topological(4).unwrap(), &small).unwrap();
        let g = crate::spectra::ground_state(&topo, None).unwrap();
        let c = readout_correlations(&g.states[0]).unwrap();
        assert!((c.c_x[1][2] - 1.0).abs() < 1e-12);
        assert!((c.c_z[1][2] + 1.0).abs() < 1e-12);
        assert_eq!(c.settings.len(), 5);
        assert_eq!(c.settings[4].observables.len(), 1);
        let triv = build_total(&ChainSpec::trivial(4).unwrap(), &small).unwrap();
        let g = crate::spectra::ground_state(&triv, None).unwrap();
        let c = readout_correlations(&g.states[0]).unwrap();
        assert!((c.c_x[0][1] - 1.0).abs() < 1e-12 && (c.c_x[2][3] - 1.0).abs() < 1e-12);
        let c = readout_correlations(&all_up(4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(c.c_x[i][j].abs() < 1e-14 && c.c_z[i][j].abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn ensemble_basics() {
        let eval = |s: f64| Ok(vec![s, 2.0 * s * s]);
        let flat = rf_inhomogeneity_ensemble(eval, 0.0, 20, 1).unwrap();
        assert_eq!(flat.sigma_q(0..2), 0.0);
        let a = rf_inhomogeneity_ensemble(eval, 0.03, 50, 9).unwrap();
        let b = rf_inhomogeneity_ensemble(eval, 0.03, 50, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.scales.iter().all(|s| (s - 1.0).abs() <= 0.03));
        assert!(rf_inhomogeneity_ensemble(eval, 0.03, 5, 9).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn compiled_patterns_satisfy_invariants(
            w23 in -1.0f64..1.0, a in -1.0f64..1.0, b in -1.0f64..1.0,
        ) {
            // Correlations of +-1 signs obey |w12| + |w23| <= 1 when w13 = 0.
            let (w12, w34) = (a * (1.0 - w23.abs()), b * (1.0 - w23.abs()));
            let sys = NmrSystem::crotonic_acid();
            let (p, seq) = compile_refocusing(&sys, &[(0, 1, w12), (1, 2, w23), (2, 3, w34)], 16).unwrap();
            prop_assert!(p.validate().is_ok());
            prop_assert!(p.shift_weights().iter().all(|s| s.abs() < 1e-9));
            prop_assert!((p.weight(0, 1) - w12).abs() < 1e-9);
            prop_assert!((p.weight(1, 2) - w23).abs() < 1e-9);
            prop_assert!((p.weight(2, 3) - w34).abs() < 1e-9);
            for (i, j) in [(0, 2), (0, 3), (1, 3)] {
                prop_assert!(p.weight(i, j).abs() < 1e-9);
            }
            prop_assert!((seq.total_duration() - 1.0).abs() < 1e-12);
            prop_assert!(p.n_segments() <= 16);
        }

        #[test]
        fn outside_correlation_polytope_is_infeasible(w12 in 0.3f64..1.0, w23 in 0.3f64..1.0, s in prop::bool::ANY) {
            prop_assume!(w12 + w23 > 1.0 + 1e-6);
            let w23 = if s { w23 } else { -w23 };
            let r = compile_refocusing(&NmrSystem::crotonic_acid(), &[(0, 1, w12), (1, 2, w23)], 16);
            prop_assert!(matches!(r, Err(Error::Infeasible { .. })), "{r:?}");
        }
    }
}

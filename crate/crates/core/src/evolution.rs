//! Pilot-state propagation inside a fixed fermion-number sector.
//!
//! Small sectors are propagated exactly through a dense eigendecomposition,
//! larger ones by fixed-step RK4 on the sparse Hamiltonian. Initial states
//! are Slater determinants of Gaussian orbitals dressed with the staggered
//! spinor structure.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fock::unit_spinor;
use crate::lattice::{LatticeParams, SectorBasis, SectorHamiltonian};
use crate::C64;

/// Sector dimension up to which the exact eigendecomposition is used.
pub const DEFAULT_EIGEN_THRESHOLD: usize = 4096;
/// Bound on `dt` times the spectral-radius estimate for RK4.
pub const RK4_STEP_BOUND: f64 = 0.1;
/// Allowed RK4 norm drift per unit time.
pub const NORM_DRIFT_TOLERANCE: f64 = 1e-8;
/// Smallest packet width in units of the spacing.
pub const MIN_WIDTH_IN_SPACINGS: f64 = 2.0;
const GRAM_FLOOR: f64 = 1e-12;

/// Contact energy `(g/δ) Σ_j [n(2j) + n(2j+1) - 2 n(2j) n(2j+1)]` of one
/// configuration.
///
/// This is `(n_even - n_odd)²` per two-site cell, a same-cell transcription
/// of the quartic `(ψ†βψ)²` coupling: a singly occupied cell costs `g/δ`,
/// an empty or doubly occupied one costs nothing.
pub fn contact_energy(sites: &[usize], params: &LatticeParams) -> f64 {
    if params.coupling == 0.0 {
        return 0.0;
    }
    let filled_pairs = sites.windows(2).filter(|w| w[0] % 2 == 0 && w[1] == w[0] + 1).count();
    params.coupling / params.spacing * (sites.len() - 2 * filled_pairs) as f64
}

/// Diagonal contact contribution for every basis state, in rank order.
pub fn contact_interaction_term(basis: &SectorBasis) -> Vec<f64> {
    (0..basis.dimension()).map(|i| contact_energy(basis.occupied(i), basis.params())).collect()
}

/// Pilot-state amplitudes over a sector basis at time `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub amplitudes: DVector<C64>,
    pub time: f64,
}

impl StateVector {
    pub fn new(amplitudes: DVector<C64>, time: f64) -> Self {
        Self { amplitudes, time }
    }

    /// The basis state `index` with amplitude 1.
    pub fn basis_state(dimension: usize, index: usize) -> Self {
        let mut amplitudes = DVector::zeros(dimension);
        amplitudes[index] = C64::new(1.0, 0.0);
        Self::new(amplitudes, 0.0)
    }

    pub fn dimension(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.norm()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        self.amplitudes /= C64::new(n, 0.0);
        self
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn with_global_phase(&self, phase: f64) -> Self {
        Self::new(&self.amplitudes * C64::from_polar(1.0, phase), self.time)
    }

    /// Complex conjugate, the time-reversed pilot state.
    pub fn conjugate(&self) -> Self {
        Self::new(self.amplitudes.conjugate(), self.time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Eigendecomposition below the dimension threshold, RK4 above.
    Auto,
    Eigendecomposition,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub method: Method,
    /// RK4 substep.
    pub dt: f64,
    pub eigen_threshold: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self { method: Method::Auto, dt: 1e-3, eigen_threshold: DEFAULT_EIGEN_THRESHOLD }
    }
}

impl EvolutionConfig {
    pub fn rk4(dt: f64) -> Self {
        Self { method: Method::Rk4, dt, ..Self::default() }
    }

    pub fn exact() -> Self {
        Self { method: Method::Eigendecomposition, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid("dt", format!("must be finite and > 0, got {}", self.dt)));
        }
        Ok(())
    }

    /// The method actually used for a sector of `dimension` states.
    pub fn resolve(&self, dimension: usize) -> Method {
        match self.method {
            Method::Auto if dimension <= self.eigen_threshold => Method::Eigendecomposition,
            Method::Auto => Method::Rk4,
            other => other,
        }
    }
}

/// `H = V diag(E) V†`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub energies: DVector<f64>,
    pub vectors: DMatrix<C64>,
}

impl SpectralDecomposition {
    pub fn new(h: &SectorHamiltonian) -> Self {
        let eig = h.to_dense().symmetric_eigen();
        Self { energies: eig.eigenvalues, vectors: eig.eigenvectors }
    }

    /// Eigenbasis coefficients `V†ψ`.
    pub fn coefficients(&self, psi: &DVector<C64>) -> DVector<C64> {
        self.vectors.ad_mul(psi)
    }

    /// `V e^{-iEt} c`.
    pub fn from_coefficients(&self, coefficients: &DVector<C64>, t: f64) -> DVector<C64> {
        let phased = DVector::from_iterator(
            coefficients.len(),
            coefficients.iter().zip(self.energies.iter()).map(|(c, &e)| c * C64::from_polar(1.0, -e * t)),
        );
        &self.vectors * phased
    }
}

/// A pilot state whose amplitudes can be queried at arbitrary times.
pub trait PilotSource: Sync {
    fn state_at(&self, t: f64) -> Result<DVector<C64>>;
    fn dimension(&self) -> usize;
}

/// Exact pilot state from a spectral decomposition.
#[derive(Debug, Clone)]
pub struct SpectralPilot {
    spectral: Arc<SpectralDecomposition>,
    coefficients: DVector<C64>,
    t0: f64,
}

impl SpectralPilot {
    pub fn new(spectral: Arc<SpectralDecomposition>, initial: &StateVector) -> Self {
        let coefficients = spectral.coefficients(&initial.amplitudes);
        Self { spectral, coefficients, t0: initial.time }
    }

    pub fn state(&self, t: f64) -> StateVector {
        StateVector::new(self.spectral.from_coefficients(&self.coefficients, t - self.t0), t)
    }
}

impl PilotSource for SpectralPilot {
    fn state_at(&self, t: f64) -> Result<DVector<C64>> {
        Ok(self.spectral.from_coefficients(&self.coefficients, t - self.t0))
    }

    fn dimension(&self) -> usize {
        self.coefficients.len()
    }
}

/// Propagates states under one sector Hamiltonian.
#[derive(Debug, Clone)]
pub struct Propagator {
    h: Arc<SectorHamiltonian>,
    cfg: EvolutionConfig,
    spectral: Option<Arc<SpectralDecomposition>>,
}

impl Propagator {
    pub fn new(h: Arc<SectorHamiltonian>, cfg: EvolutionConfig) -> Result<Self> {
        cfg.validate()?;
        let spectral = match cfg.resolve(h.dimension()) {
            Method::Eigendecomposition => Some(Arc::new(SpectralDecomposition::new(&h))),
            _ => {
                let product = cfg.dt * h.spectral_radius_bound();
                if product > RK4_STEP_BOUND {
                    return Err(Error::StepTooLarge { product, bound: RK4_STEP_BOUND });
                }
                None
            }
        };
        Ok(Self { h, cfg, spectral })
    }

    pub fn hamiltonian(&self) -> &Arc<SectorHamiltonian> {
        &self.h
    }

    pub fn method(&self) -> Method {
        if self.spectral.is_some() {
            Method::Eigendecomposition
        } else {
            Method::Rk4
        }
    }

    pub fn spectral(&self) -> Option<&Arc<SpectralDecomposition>> {
        self.spectral.as_ref()
    }

    /// `exp(-iHΔt)` applied to `state`.
    pub fn evolve(&self, state: &StateVector, delta_t: f64) -> Result<StateVector> {
        if !(delta_t.is_finite() && delta_t >= 0.0) {
            return Err(invalid("delta_t", format!("must be finite and >= 0, got {delta_t}")));
        }
        if let Some(spectral) = &self.spectral {
            let c = spectral.coefficients(&state.amplitudes);
            return Ok(StateVector::new(spectral.from_coefficients(&c, delta_t), state.time + delta_t));
        }
        let steps = (delta_t / self.cfg.dt).ceil() as usize;
        let mut psi = state.amplitudes.clone();
        let norm0 = psi.norm();
        if steps > 0 {
            let h = delta_t / steps as f64;
            let mut work = Rk4Work::new(psi.len());
            for _ in 0..steps {
                rk4_step(&self.h, &mut psi, h, &mut work);
            }
        }
        let drift = (psi.norm() - norm0).abs();
        if delta_t > 0.0 && drift / delta_t > NORM_DRIFT_TOLERANCE {
            return Err(Error::NormDrift { drift: drift / delta_t, tolerance: NORM_DRIFT_TOLERANCE });
        }
        Ok(StateVector::new(psi, state.time + delta_t))
    }
}

struct Rk4Work {
    k: [Vec<C64>; 4],
    tmp: Vec<C64>,
}

impl Rk4Work {
    fn new(n: usize) -> Self {
        let z = vec![C64::new(0.0, 0.0); n];
        Self { k: [z.clone(), z.clone(), z.clone(), z.clone()], tmp: z }
    }
}

// dψ/dt = -iHψ
fn rk4_step(h: &SectorHamiltonian, psi: &mut DVector<C64>, dt: f64, w: &mut Rk4Work) {
    let minus_i = C64::new(0.0, -1.0);
    let x = psi.as_mut_slice();
    let stages = [0.0, 0.5, 0.5, 1.0];
    for s in 0..4 {
        if s == 0 {
            w.tmp.copy_from_slice(x);
        } else {
            let prev = &w.k[s - 1];
            for i in 0..x.len() {
                w.tmp[i] = x[i] + prev[i] * (stages[s] * dt);
            }
        }
        h.apply_into(&w.tmp, &mut w.k[s]);
        w.k[s].iter_mut().for_each(|v| *v *= minus_i);
    }
    for i in 0..x.len() {
        x[i] += (w.k[0][i] + w.k[1][i] * 2.0 + w.k[2][i] * 2.0 + w.k[3][i]) * (dt / 6.0);
    }
}

/// One-shot `exp(-iHΔt)|ψ⟩`.
pub fn evolve(state: &StateVector, h: Arc<SectorHamiltonian>, delta_t: f64, cfg: EvolutionConfig) -> Result<StateVector> {
    Propagator::new(h, cfg)?.evolve(state, delta_t)
}

/// Norm and energy drift of an evolved run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConservationReport {
    pub norm_drift: f64,
    pub energy_drift: f64,
    pub method: Method,
}

/// Evolves over `[0, horizon]` in `frames` equal steps and records the
/// largest norm and energy deviations from their initial values.
pub fn conservation_check(prop: &Propagator, initial: &StateVector, horizon: f64, frames: usize) -> Result<ConservationReport> {
    let h = prop.hamiltonian();
    let e0 = h.expectation(&initial.amplitudes);
    let n0 = initial.norm();
    let step = horizon / frames.max(1) as f64;
    let mut state = initial.clone();
    let (mut norm_drift, mut energy_drift) = (0.0f64, 0.0f64);
    for _ in 0..frames.max(1) {
        state = prop.evolve(&state, step)?;
        norm_drift = norm_drift.max((state.norm() - n0).abs());
        energy_drift = energy_drift.max((h.expectation(&state.amplitudes) - e0).abs());
    }
    Ok(ConservationReport { norm_drift, energy_drift, method: prop.method() })
}

/// Pilot states stored at `t0 + i·dt`, `i = 0..=steps`.
#[derive(Debug, Clone)]
pub struct PilotTimeline {
    t0: f64,
    dt: f64,
    states: Vec<DVector<C64>>,
}

impl PilotTimeline {
    pub fn build(prop: &Propagator, initial: &StateVector, dt: f64, steps: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid("dt", format!("must be finite and > 0, got {dt}")));
        }
        let mut states = Vec::with_capacity(steps + 1);
        if let Some(spectral) = prop.spectral() {
            let c = spectral.coefficients(&initial.amplitudes);
            for i in 0..=steps {
                states.push(spectral.from_coefficients(&c, i as f64 * dt));
            }
        } else {
            let mut state = initial.clone();
            states.push(state.amplitudes.clone());
            for _ in 0..steps {
                state = prop.evolve(&state, dt)?;
                states.push(state.amplitudes.clone());
            }
        }
        Ok(Self { t0: initial.time, dt, states })
    }

    pub fn from_states(t0: f64, dt: f64, states: Vec<DVector<C64>>) -> Self {
        Self { t0, dt, states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn time(&self, index: usize) -> f64 {
        self.t0 + index as f64 * self.dt
    }

    pub fn state(&self, index: usize) -> &DVector<C64> {
        &self.states[index]
    }

    pub fn states(&self) -> &[DVector<C64>] {
        &self.states
    }

    pub fn probabilities(&self, index: usize) -> Vec<f64> {
        self.states[index].iter().map(|a| a.norm_sqr()).collect()
    }

    /// Index of the frame at time `t`, if `t` falls on one.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = (t - self.t0) / self.dt;
        let i = x.round();
        ((x - i).abs() <= 1e-9 * x.abs().max(1.0) && i >= 0.0 && (i as usize) < self.states.len()).then_some(i as usize)
    }

    pub fn conjugate(&self) -> Self {
        Self { states: self.states.iter().map(|s| s.conjugate()).collect(), ..*self }
    }
}

impl PilotSource for PilotTimeline {
    fn state_at(&self, t: f64) -> Result<DVector<C64>> {
        self.index_of(t)
            .map(|i| self.states[i].clone())
            .ok_or_else(|| invalid("t", format!("time {t} is not a stored frame")))
    }

    fn dimension(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergySign {
    #[default]
    Positive,
    Negative,
}

/// One single-quantum Gaussian orbital, in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitalSpec {
    pub center: f64,
    pub width: f64,
    pub momentum: f64,
    #[serde(default)]
    pub energy_sign: EnergySign,
}

impl OrbitalSpec {
    pub fn new(center: f64, width: f64, momentum: f64) -> Self {
        Self { center, width, momentum, energy_sign: EnergySign::Positive }
    }

    pub fn negative(self) -> Self {
        Self { energy_sign: EnergySign::Negative, ..self }
    }
}

/// Initial packet: one orbital per quantum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketSpec {
    pub orbitals: Vec<OrbitalSpec>,
}

impl PacketSpec {
    pub fn single(center: f64, width: f64, momentum: f64) -> Self {
        Self { orbitals: vec![OrbitalSpec::new(center, width, momentum)] }
    }

    pub fn validate(&self, params: &LatticeParams) -> Result<()> {
        if self.orbitals.len() != params.quanta {
            return Err(invalid(
                "orbitals",
                format!("{} orbitals given for a sector with {} quanta", self.orbitals.len(), params.quanta),
            ));
        }
        for o in &self.orbitals {
            if ![o.center, o.width, o.momentum].iter().all(|v| v.is_finite()) {
                return Err(invalid("orbitals", "center, width and momentum must be finite"));
            }
            if o.width < MIN_WIDTH_IN_SPACINGS * params.spacing {
                return Err(invalid(
                    "width",
                    format!("{} is below {} lattice spacings ({})", o.width, MIN_WIDTH_IN_SPACINGS, params.spacing),
                ));
            }
        }
        Ok(())
    }
}

/// Displacement `x - x0` folded into `[-L/2, L/2)`.
pub fn minimal_image(x: f64, x0: f64, length: f64) -> f64 {
    (x - x0 + 0.5 * length).rem_euclid(length) - 0.5 * length
}

/// Site amplitudes of one orbital (unnormalized).
///
/// The envelope is `exp(-d²/(4σ²))` with `d` the periodic displacement from
/// the centre. Positive energy carries `u(p₀) e^{ip₀x}`, negative energy
/// `v(p₀) e^{-ip₀x}`; even sites take the upper component, odd sites the
/// lower one.
pub fn orbital_amplitudes(orbital: &OrbitalSpec, params: &LatticeParams) -> Vec<C64> {
    let positive = orbital.energy_sign == EnergySign::Positive;
    let spinor = unit_spinor(orbital.momentum, params.mass, positive);
    let phase_sign = if positive { 1.0 } else { -1.0 };
    let length = params.box_length();
    (0..params.sites)
        .map(|site| {
            let x = params.position(site);
            let d = minimal_image(x, orbital.center, length);
            let envelope = (-d * d / (4.0 * orbital.width * orbital.width)).exp();
            spinor[site % 2] * C64::from_polar(envelope, phase_sign * orbital.momentum * x)
        })
        .collect()
}

/// Normalized Slater determinant of arbitrary site orbitals.
///
/// The norm of the unnormalized determinant state is `det G` with `G` the
/// Gram matrix of the (unit-normalized) orbitals, so a near-singular Gram
/// matrix means the orbitals are linearly dependent.
pub fn slater_state(basis: &SectorBasis, orbitals: &[Vec<C64>]) -> Result<StateVector> {
    let w = basis.quanta();
    if orbitals.len() != w {
        return Err(invalid("orbitals", format!("{} orbitals for {} quanta", orbitals.len(), w)));
    }
    let sites = basis.params().sites;
    let mut unit = Vec::with_capacity(w);
    for o in orbitals {
        if o.len() != sites {
            return Err(invalid("orbitals", format!("orbital has {} sites, lattice has {sites}", o.len())));
        }
        let v = DVector::from_column_slice(o);
        let n = v.norm();
        if n == 0.0 {
            return Err(Error::DegenerateOrbitals { gram_det: 0.0 });
        }
        unit.push(v / C64::new(n, 0.0));
    }
    let gram = DMatrix::from_fn(w, w, |a, b| unit[a].dotc(&unit[b]));
    let gram_det = if w == 0 { 1.0 } else { gram.determinant().re };
    if gram_det < GRAM_FLOOR {
        return Err(Error::DegenerateOrbitals { gram_det });
    }

    let amplitudes = DVector::from_iterator(
        basis.dimension(),
        (0..basis.dimension()).map(|i| {
            let occ = basis.occupied(i);
            match w {
                0 => C64::new(1.0, 0.0),
                1 => unit[0][occ[0]],
                2 => unit[0][occ[0]] * unit[1][occ[1]] - unit[0][occ[1]] * unit[1][occ[0]],
                _ => DMatrix::from_fn(w, w, |a, b| unit[a][occ[b]]).determinant(),
            }
        }),
    );
    Ok(StateVector::new(amplitudes, 0.0).normalized())
}

/// Slater determinant of the Gaussian orbitals of `spec`.
///
/// Width limits are enforced by [`PacketSpec::validate`], not here, so that
/// sharply localized states remain constructible.
pub fn build_initial_packet(basis: &SectorBasis, spec: &PacketSpec) -> Result<StateVector> {
    let params = basis.params();
    if spec.orbitals.len() != params.quanta {
        return Err(invalid(
            "orbitals",
            format!("{} orbitals given for a sector with {} quanta", spec.orbitals.len(), params.quanta),
        ));
    }
    if spec.orbitals.iter().any(|o| !(o.width > 0.0)) {
        return Err(invalid("width", "must be > 0"));
    }
    let orbitals: Vec<Vec<C64>> = spec.orbitals.iter().map(|o| orbital_amplitudes(o, params)).collect();
    slater_state(basis, &orbitals)
}

/// Amplitude `Ψ(k₁, …, k_ω)` for an arbitrary (unordered, possibly
/// repeating) site list, extended antisymmetrically from the ordered basis.
pub fn antisymmetric_amplitude(state: &StateVector, basis: &SectorBasis, sites: &[usize]) -> C64 {
    let mut sorted = sites.to_vec();
    let mut sign = 1.0;
    // insertion sort, counting transpositions
    for i in 1..sorted.len() {
        let mut j = i;
        while j > 0 && sorted[j - 1] > sorted[j] {
            sorted.swap(j - 1, j);
            sign = -sign;
            j -= 1;
        }
    }
    match basis.rank(&sorted) {
        Some(r) => state.amplitudes[r] * sign,
        None => C64::new(0.0, 0.0),
    }
}

/// Plane-wave state `e^{ipkδ}` on the one-quantum sector, normalized.
pub fn plane_wave(params: &LatticeParams, p: f64) -> StateVector {
    let n = params.sites;
    let amp = 1.0 / (n as f64).sqrt();
    StateVector::new(
        DVector::from_iterator(n, (0..n).map(|k| C64::from_polar(amp, p * k as f64 * params.spacing))),
        0.0,
    )
}

/// Lattice momenta compatible with the periodic box, `2πj/(2Nδ)`.
pub fn allowed_momentum(params: &LatticeParams, j: i64) -> f64 {
    2.0 * PI * j as f64 / params.box_length()
}

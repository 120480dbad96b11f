//! The continuum limit of the jump process.
//!
//! Pairing sites `(2j, 2j+1)` gives a two-component spinor on a grid of
//! spacing `2δ`. Its density `ρ = Σ|Ψ_s|²` and currents `J_j = Ψ† α_j Ψ`,
//! with `α` the off-diagonal Pauli matrix acting on the `j`-th spinor index,
//! define the guidance law `dX/dt = J/ρ`. This module integrates that law,
//! measures how closely jump trajectories follow it, and quantifies the
//! non-locality of two-quantum currents.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beable::{jump_displacement, run_ensemble, InitialCondition, PROBABILITY_FLOOR};
use crate::error::{invalid, Error, Result};
use crate::evolution::{
    build_initial_packet, minimal_image, EvolutionConfig, OrbitalSpec, PacketSpec, PilotTimeline, Propagator,
};
use crate::fock::unit_spinor;
use crate::lattice::{assemble_hamiltonian, LatticeParams, SectorBasis};
use crate::C64;

/// Density below which the guidance law is undefined.
pub const NODE_THRESHOLD: f64 = 1e-10;
/// Tolerance-scale of the guidance integrator, used as the reference for
/// velocity spreads.
pub const INTEGRATOR_NOISE_FLOOR: f64 = 1e-6;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Two-component field on the uniform periodic grid `origin + j·h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinorField {
    pub origin: f64,
    pub spacing: f64,
    pub values: Vec<[C64; 2]>,
    pub time: f64,
}

impl SpinorField {
    pub fn new(origin: f64, spacing: f64, values: Vec<[C64; 2]>, time: f64) -> Self {
        Self { origin, spacing, values, time }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn box_length(&self) -> f64 {
        self.spacing * self.values.len() as f64
    }

    pub fn position(&self, j: usize) -> f64 {
        self.origin + j as f64 * self.spacing
    }

    /// `∫(|Ψ₁|² + |Ψ₂|²) dx` by the (periodic) trapezoid rule.
    pub fn norm_sqr(&self) -> f64 {
        self.spacing * self.values.iter().map(|v| v[0].norm_sqr() + v[1].norm_sqr()).sum::<f64>()
    }

    /// `∫ a† b dx`.
    pub fn inner(&self, other: &Self) -> C64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a[0].conj() * b[0] + a[1].conj() * b[1])
            .sum::<C64>()
            * self.spacing
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm_sqr().sqrt();
        for v in &mut self.values {
            v[0] /= n;
            v[1] /= n;
        }
        self
    }

    pub fn conjugate(&self) -> Self {
        Self { values: self.values.iter().map(|v| [v[0].conj(), v[1].conj()]).collect(), ..self.clone() }
    }

    /// `σ_z Ψ*`.
    pub fn time_reversed(&self) -> Self {
        Self { values: self.values.iter().map(|v| [v[0].conj(), -v[1].conj()]).collect(), ..self.clone() }
    }

    pub fn with_global_phase(&self, phase: f64) -> Self {
        let z = C64::from_polar(1.0, phase);
        Self { values: self.values.iter().map(|v| [v[0] * z, v[1] * z]).collect(), ..self.clone() }
    }
}

/// Pairs site `2j` (upper) with `2j+1` (lower) and rescales by `1/√(2δ)`.
pub fn staggered_to_spinor(amplitudes: &[C64], delta: f64, time: f64) -> Result<SpinorField> {
    if !amplitudes.len().is_multiple_of(2) {
        return Err(Error::OddSiteCount(amplitudes.len()));
    }
    let scale = 1.0 / (2.0 * delta).sqrt();
    let values = amplitudes.chunks_exact(2).map(|pair| [pair[0] * scale, pair[1] * scale]).collect();
    Ok(SpinorField::new(0.0, 2.0 * delta, values, time))
}

fn source_probability(psi: &DVector<C64>, k: usize) -> Result<f64> {
    let p = psi[k].norm_sqr();
    if p <= PROBABILITY_FLOOR {
        return Err(Error::SourceProbabilityUnderflow { config: k, probability: p, floor: PROBABILITY_FLOOR });
    }
    Ok(p)
}

/// `Re[Ψ*(k+1) Ψ(k)] / |Ψ(k)|²` for a one-quantum state (periodic).
pub fn lattice_velocity(psi: &DVector<C64>, k: usize) -> Result<f64> {
    let p = source_probability(psi, k)?;
    let next = (k + 1) % psi.len();
    Ok((psi[next].conj() * psi[k]).re / p)
}

/// The two one-quantum currents out of site `k`:
/// `J₊ = Re[Ψ*(k+1)Ψ(k)]/δ` and `J₋ = -Re[Ψ*(k-1)Ψ(k)]/δ`.
pub fn lattice_currents(psi: &DVector<C64>, k: usize, delta: f64) -> (f64, f64) {
    let n = psi.len();
    let plus = (psi[(k + 1) % n].conj() * psi[k]).re / delta;
    let minus = -(psi[(k + n - 1) % n].conj() * psi[k]).re / delta;
    (plus, minus)
}

/// `|J₊ + J₋| / (|J₊| + |J₋|)` at site `k`.
pub fn current_cancellation_check(psi: &DVector<C64>, k: usize, delta: f64) -> Result<f64> {
    source_probability(psi, k)?;
    let (plus, minus) = lattice_currents(psi, k, delta);
    Ok((plus + minus).abs() / (plus.abs() + minus.abs()))
}

/// Average of the two lattice currents inside cell `j`
/// (`2j → 2j+1` and `2j+1 → 2j+2`), the lattice counterpart of the
/// continuum current at `x_j`.
pub fn paired_lattice_current(psi: &DVector<C64>, cell: usize, delta: f64) -> f64 {
    let (a, _) = lattice_currents(psi, 2 * cell, delta);
    let (b, _) = lattice_currents(psi, 2 * cell + 1, delta);
    0.5 * (a + b)
}

/// A many-body wavefunction with one spinor index per quantum, sampled on
/// a periodic grid in each coordinate.
pub trait SpinorWavefunction: Sync {
    fn quanta(&self) -> usize;
    fn cells(&self) -> usize;
    fn cell_width(&self) -> f64;
    fn origin(&self) -> f64 {
        0.0
    }
    /// `Ψ_{s₁…s_ω}(x_{c₁}, …, x_{c_ω})`.
    fn value(&self, cells: &[usize], spins: &[usize]) -> C64;

    fn box_length(&self) -> f64 {
        self.cells() as f64 * self.cell_width()
    }
}

impl SpinorWavefunction for SpinorField {
    fn quanta(&self) -> usize {
        1
    }
    fn cells(&self) -> usize {
        self.values.len()
    }
    fn cell_width(&self) -> f64 {
        self.spacing
    }
    fn origin(&self) -> f64 {
        self.origin
    }
    fn value(&self, cells: &[usize], spins: &[usize]) -> C64 {
        self.values[cells[0]][spins[0]]
    }
}

/// A sector state viewed as a continuum wavefunction.
///
/// Site `2c + s` is cell `c`, spinor index `s`. Amplitudes extend
/// antisymmetrically to unordered arguments and are scaled so that
/// `∫ρ = 1` over the full configuration space.
#[derive(Debug, Clone)]
pub struct LatticeWavefunction {
    basis: Arc<SectorBasis>,
    amplitudes: DVector<C64>,
    scale: f64,
}

impl LatticeWavefunction {
    pub fn new(basis: Arc<SectorBasis>, amplitudes: DVector<C64>) -> Self {
        let w = basis.quanta();
        let factorial: f64 = (1..=w).map(|i| i as f64).product();
        let cell = 2.0 * basis.params().spacing;
        let scale = 1.0 / (factorial * cell.powi(w as i32)).sqrt();
        Self { basis, amplitudes, scale }
    }
}

impl SpinorWavefunction for LatticeWavefunction {
    fn quanta(&self) -> usize {
        self.basis.quanta()
    }
    fn cells(&self) -> usize {
        self.basis.params().half_sites()
    }
    fn cell_width(&self) -> f64 {
        2.0 * self.basis.params().spacing
    }
    fn value(&self, cells: &[usize], spins: &[usize]) -> C64 {
        let mut sites: Vec<usize> = cells.iter().zip(spins).map(|(c, s)| 2 * c + s).collect();
        let mut sign = 1.0;
        for i in 1..sites.len() {
            let mut j = i;
            while j > 0 && sites[j - 1] > sites[j] {
                sites.swap(j - 1, j);
                sign = -sign;
                j -= 1;
            }
        }
        match self.basis.rank(&sites) {
            Some(r) => self.amplitudes[r] * (sign * self.scale),
            None => ZERO,
        }
    }
}

/// `χ(x₁)⊗Φ(x₂) - Φ(x₁)⊗χ(x₂)`, normalized.
#[derive(Debug, Clone)]
pub struct SlaterPair {
    chi: SpinorField,
    phi: SpinorField,
}

impl SlaterPair {
    /// `χ` and `Φ` must share a grid; both are normalized first.
    pub fn new(chi: &SpinorField, phi: &SpinorField) -> Result<Self> {
        if chi.len() != phi.len() || chi.spacing != phi.spacing || chi.origin != phi.origin {
            return Err(invalid("phi", "orbitals must share one grid"));
        }
        let chi = chi.clone().normalized();
        let phi = phi.clone().normalized();
        let gram_det = 1.0 - chi.inner(&phi).norm_sqr();
        if !(gram_det >= 1e-12) {
            return Err(Error::DegenerateOrbitals { gram_det });
        }
        // ‖χ⊗Φ - Φ⊗χ‖² = 2 (1 - |⟨χ|Φ⟩|²), split evenly over both factors
        let s = (2.0 * gram_det).sqrt().sqrt();
        let scale = |f: SpinorField| SpinorField {
            values: f.values.iter().map(|v| [v[0] / s, v[1] / s]).collect(),
            ..f
        };
        Ok(Self { chi: scale(chi), phi: scale(phi) })
    }

    pub fn chi(&self) -> &SpinorField {
        &self.chi
    }

    pub fn phi(&self) -> &SpinorField {
        &self.phi
    }
}

impl SpinorWavefunction for SlaterPair {
    fn quanta(&self) -> usize {
        2
    }
    fn cells(&self) -> usize {
        self.chi.len()
    }
    fn cell_width(&self) -> f64 {
        self.chi.spacing
    }
    fn origin(&self) -> f64 {
        self.chi.origin
    }
    fn value(&self, cells: &[usize], spins: &[usize]) -> C64 {
        let (a, b) = (&self.chi.values, &self.phi.values);
        a[cells[0]][spins[0]] * b[cells[1]][spins[1]] - b[cells[0]][spins[0]] * a[cells[1]][spins[1]]
    }
}

/// `ρ` and `J_j` at one grid configuration.
pub fn grid_density_current<W: SpinorWavefunction + ?Sized>(wf: &W, cells: &[usize]) -> (f64, Vec<f64>) {
    let w = wf.quanta();
    let mut values = vec![ZERO; 1 << w];
    let mut spins = vec![0usize; w];
    for (mask, v) in values.iter_mut().enumerate() {
        for (j, s) in spins.iter_mut().enumerate() {
            *s = mask >> j & 1;
        }
        *v = wf.value(cells, &spins);
    }
    let rho = values.iter().map(|v| v.norm_sqr()).sum();
    let current = (0..w)
        .map(|j| {
            (0..1usize << w)
                .filter(|m| m >> j & 1 == 0)
                .map(|m| 2.0 * (values[m].conj() * values[m | 1 << j]).re)
                .sum()
        })
        .collect();
    (rho, current)
}

/// Density and currents on the full configuration grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuidanceField {
    pub cells: usize,
    pub quanta: usize,
    pub cell_width: f64,
    /// Row-major over `(c₁, …, c_ω)`, `c_ω` fastest.
    pub density: Vec<f64>,
    pub current: Vec<Vec<f64>>,
}

impl GuidanceField {
    pub fn tabulate<W: SpinorWavefunction + ?Sized>(wf: &W) -> Self {
        let (n, w) = (wf.cells(), wf.quanta());
        let total = n.pow(w as u32);
        let mut density = Vec::with_capacity(total);
        let mut current = vec![Vec::with_capacity(total); w];
        let mut cells = vec![0usize; w];
        for flat in 0..total {
            let mut rest = flat;
            for c in cells.iter_mut().rev() {
                *c = rest % n;
                rest /= n;
            }
            let (rho, j) = grid_density_current(wf, &cells);
            density.push(rho);
            for (dst, v) in current.iter_mut().zip(j) {
                dst.push(v);
            }
        }
        Self { cells: n, quanta: w, cell_width: wf.cell_width(), density, current }
    }

    /// `∫ρ` by the periodic trapezoid rule.
    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_width.powi(self.quanta as i32)
    }
}

/// Interpolated `ρ` and `J` at a point of configuration space.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidancePoint {
    pub density: f64,
    pub current: Vec<f64>,
}

impl GuidancePoint {
    pub fn velocity(&self) -> Vec<f64> {
        self.current.iter().map(|j| j / self.density).collect()
    }
}

/// Multilinear interpolation of `ρ` and `J` (separately) at `positions`,
/// which must lie in `[origin, origin + L)`.
pub fn current_density<W: SpinorWavefunction + ?Sized>(wf: &W, positions: &[f64]) -> Result<GuidancePoint> {
    let w = wf.quanta();
    if positions.len() != w {
        return Err(invalid("positions", format!("{} coordinates for {} quanta", positions.len(), w)));
    }
    let (n, h, origin) = (wf.cells(), wf.cell_width(), wf.origin());
    let upper = origin + n as f64 * h;
    let mut base = Vec::with_capacity(w);
    let mut frac = Vec::with_capacity(w);
    for &x in positions {
        if !(x >= origin && x < upper) {
            return Err(Error::OutOfGrid { position: x, lower: origin, upper });
        }
        let u = (x - origin) / h;
        let i = (u.floor() as usize).min(n - 1);
        base.push(i);
        frac.push(u - i as f64);
    }
    let mut density = 0.0;
    let mut current = vec![0.0; w];
    let mut cells = vec![0usize; w];
    for corner in 0..1usize << w {
        let mut weight = 1.0;
        for j in 0..w {
            let up = corner >> j & 1 == 1;
            cells[j] = if up { (base[j] + 1) % n } else { base[j] };
            weight *= if up { frac[j] } else { 1.0 - frac[j] };
        }
        if weight == 0.0 {
            continue;
        }
        let (rho, jj) = grid_density_current(wf, &cells);
        density += weight * rho;
        for (acc, v) in current.iter_mut().zip(jj) {
            *acc += weight * v;
        }
    }
    Ok(GuidancePoint { density, current })
}

/// `J₁` of the Slater pair from the four-term expansion in `χ` and `Φ`.
pub fn four_term_current(pair: &SlaterPair, c1: usize, c2: usize) -> f64 {
    let (x, f) = (&pair.chi().values, &pair.phi().values);
    let alpha = |a: &[C64; 2], b: &[C64; 2]| a[0].conj() * b[1] + a[1].conj() * b[0];
    let dot = |a: &[C64; 2], b: &[C64; 2]| a[0].conj() * b[0] + a[1].conj() * b[1];
    let (x1, x2, f1, f2) = (&x[c1], &x[c2], &f[c1], &f[c2]);
    (alpha(x1, x1) * dot(f2, f2) + alpha(f1, f1) * dot(x2, x2) - alpha(x1, f1) * dot(f2, x2) - alpha(f1, x1) * dot(x2, f2)).re
}

/// A time-dependent guidance field.
pub trait GuidanceSource: Sync {
    fn quanta(&self) -> usize;
    fn box_length(&self) -> f64;
    fn origin(&self) -> f64 {
        0.0
    }
    fn time_range(&self) -> (f64, f64);
    fn point(&self, t: f64, positions: &[f64]) -> Result<GuidancePoint>;
}

/// Wavefunction frames at `t0 + i·dt`, linearly interpolated in time.
#[derive(Debug, Clone)]
pub struct FrameTimeline<W> {
    pub t0: f64,
    pub dt: f64,
    pub frames: Vec<W>,
}

impl<W: SpinorWavefunction> FrameTimeline<W> {
    pub fn new(t0: f64, dt: f64, frames: Vec<W>) -> Result<Self> {
        if frames.is_empty() || !(dt > 0.0) {
            return Err(invalid("frames", "need at least one frame and dt > 0"));
        }
        Ok(Self { t0, dt, frames })
    }
}

impl FrameTimeline<SpinorField> {
    /// Merged spinor frames of a one-quantum pilot timeline, every `stride`
    /// substeps.
    pub fn from_pilot(timeline: &PilotTimeline, delta: f64, stride: usize) -> Result<Self> {
        let stride = stride.max(1);
        let frames = (0..timeline.len())
            .step_by(stride)
            .map(|i| staggered_to_spinor(timeline.state(i).as_slice(), delta, timeline.time(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(timeline.time(0), timeline.dt() * stride as f64, frames)
    }

    /// Time reversal: frames played backwards, each mapped to `σ_z Ψ*`.
    ///
    /// Plain conjugation leaves `J` unchanged in this representation; the
    /// extra `σ_z` flips it, and commutes with the staggered Hamiltonian.
    pub fn reversed(&self) -> Self {
        let frames = self.frames.iter().rev().map(SpinorField::time_reversed).collect();
        Self { t0: self.t0, dt: self.dt, frames }
    }
}

impl<W: SpinorWavefunction> GuidanceSource for FrameTimeline<W> {
    fn quanta(&self) -> usize {
        self.frames[0].quanta()
    }
    fn box_length(&self) -> f64 {
        self.frames[0].box_length()
    }
    fn origin(&self) -> f64 {
        self.frames[0].origin()
    }
    fn time_range(&self) -> (f64, f64) {
        (self.t0, self.t0 + self.dt * (self.frames.len() - 1) as f64)
    }
    fn point(&self, t: f64, positions: &[f64]) -> Result<GuidancePoint> {
        let last = self.frames.len() - 1;
        let u = ((t - self.t0) / self.dt).clamp(0.0, last as f64);
        let i = (u.floor() as usize).min(last.saturating_sub(1));
        let a = current_density(&self.frames[i], positions)?;
        if last == 0 {
            return Ok(a);
        }
        let s = u - i as f64;
        let b = current_density(&self.frames[i + 1], positions)?;
        Ok(GuidancePoint {
            density: (1.0 - s) * a.density + s * b.density,
            current: a.current.iter().zip(&b.current).map(|(x, y)| (1.0 - s) * x + s * y).collect(),
        })
    }
}

/// A stationary guidance field.
#[derive(Debug, Clone)]
pub struct Stationary<W>(pub W);

impl<W: SpinorWavefunction> GuidanceSource for Stationary<W> {
    fn quanta(&self) -> usize {
        self.0.quanta()
    }
    fn box_length(&self) -> f64 {
        self.0.box_length()
    }
    fn origin(&self) -> f64 {
        self.0.origin()
    }
    fn time_range(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
    fn point(&self, _t: f64, positions: &[f64]) -> Result<GuidancePoint> {
        current_density(&self.0, positions)
    }
}

/// Positions of a guidance trajectory, wrapped into the box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuidanceTrajectory {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    /// Smallest density met at any RK4 stage.
    pub min_density: f64,
}

impl GuidanceTrajectory {
    pub fn final_positions(&self) -> &[f64] {
        self.positions.last().expect("trajectory has at least its initial point")
    }
}

fn wrap(x: f64, origin: f64, length: f64) -> f64 {
    let y = origin + (x - origin).rem_euclid(length);
    // rem_euclid can round up to exactly `length`
    if y >= origin + length {
        origin
    } else {
        y
    }
}

/// RK4 integration of `dX/dt = J/ρ` from `t0` to `t_final` with step `dt`.
pub fn integrate_guidance(
    source: &dyn GuidanceSource,
    initial: &[f64],
    t0: f64,
    t_final: f64,
    dt: f64,
) -> Result<GuidanceTrajectory> {
    if initial.len() != source.quanta() {
        return Err(invalid("initial", format!("{} coordinates for {} quanta", initial.len(), source.quanta())));
    }
    if !(dt > 0.0) || t_final < t0 {
        return Err(invalid("dt", "need dt > 0 and t_final >= t0"));
    }
    let (origin, length) = (source.origin(), source.box_length());
    let mut min_density = f64::INFINITY;
    let mut velocity = |t: f64, x: &[f64]| -> Result<Vec<f64>> {
        let wrapped: Vec<f64> = x.iter().map(|&v| wrap(v, origin, length)).collect();
        let p = source.point(t, &wrapped)?;
        min_density = min_density.min(p.density);
        if p.density < NODE_THRESHOLD {
            return Err(Error::NodeReached { time: t, density: p.density });
        }
        Ok(p.velocity())
    };

    let steps = ((t_final - t0) / dt).ceil().max(0.0) as usize;
    let h = if steps > 0 { (t_final - t0) / steps as f64 } else { 0.0 };
    let mut x: Vec<f64> = initial.iter().map(|&v| wrap(v, origin, length)).collect();
    velocity(t0, &x)?;
    let mut times = vec![t0];
    let mut positions = vec![x.clone()];
    let axpy = |x: &[f64], k: &[f64], a: f64| -> Vec<f64> { x.iter().zip(k).map(|(x, k)| x + a * k).collect() };
    for step in 0..steps {
        let t = t0 + step as f64 * h;
        let k1 = velocity(t, &x)?;
        let k2 = velocity(t + 0.5 * h, &axpy(&x, &k1, 0.5 * h))?;
        let k3 = velocity(t + 0.5 * h, &axpy(&x, &k2, 0.5 * h))?;
        let k4 = velocity(t + h, &axpy(&x, &k3, h))?;
        for i in 0..x.len() {
            x[i] = wrap(x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]), origin, length);
        }
        times.push(t + h);
        positions.push(x.clone());
    }
    Ok(GuidanceTrajectory { times, positions, min_density })
}

/// Single-quantum continuum orbital on the grid `j·h`, `j = 0..cells`,
/// normalized: Gaussian envelope times the unit spinor and plane-wave phase.
pub fn gaussian_orbital(cells: usize, cell_width: f64, orbital: &OrbitalSpec, mass: f64) -> SpinorField {
    let positive = orbital.energy_sign == crate::evolution::EnergySign::Positive;
    let spinor = unit_spinor(orbital.momentum, mass, positive);
    let sign = if positive { 1.0 } else { -1.0 };
    let length = cells as f64 * cell_width;
    let values = (0..cells)
        .map(|j| {
            let x = j as f64 * cell_width;
            let d = minimal_image(x, orbital.center, length);
            let z = C64::from_polar((-d * d / (4.0 * orbital.width * orbital.width)).exp(), sign * orbital.momentum * x);
            [spinor[0] * z, spinor[1] * z]
        })
        .collect();
    SpinorField::new(0.0, cell_width, values, 0.0).normalized()
}

/// Orbital with compact support `|x - center| < half_width`: the smooth
/// bump `exp(-1/(1 - r²))` times spinor and plane-wave phase.
pub fn bump_orbital(cells: usize, cell_width: f64, center: f64, half_width: f64, momentum: f64, mass: f64) -> SpinorField {
    let spinor = unit_spinor(momentum, mass, true);
    let length = cells as f64 * cell_width;
    let values = (0..cells)
        .map(|j| {
            let x = j as f64 * cell_width;
            let r = minimal_image(x, center, length) / half_width;
            let env = if r.abs() < 1.0 { (-1.0 / (1.0 - r * r)).exp() } else { 0.0 };
            let z = C64::from_polar(env, momentum * x);
            [spinor[0] * z, spinor[1] * z]
        })
        .collect();
    SpinorField::new(0.0, cell_width, values, 0.0).normalized()
}

/// Index ranges `(x₁ cells, x₂ cells)` restricting the non-locality analysis.
pub type CellRegion = (std::ops::Range<usize>, std::ops::Range<usize>);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonlocalityReport {
    /// `J₁(x₁, x₂)` over the analysed region.
    pub current: DMatrix<f64>,
    pub density: DMatrix<f64>,
    pub x1_cells: Vec<usize>,
    pub x2_cells: Vec<usize>,
    pub singular_values: Vec<f64>,
    /// `σ₂/σ₁`, zero for an exactly factorizable current.
    pub sigma_ratio: f64,
    /// Cell maximizing the `x₁` marginal of `ρ`.
    pub x1_star: usize,
    /// `max - min` of `v₁(x₁*, x₂)` over `x₂` with non-negligible density.
    pub velocity_spread: f64,
    /// Largest difference between the direct and four-term `J₁`.
    pub four_term_deviation: f64,
}

/// Relative density cut for the velocity spread.
pub const SPREAD_DENSITY_CUT: f64 = 1e-6;

/// Tabulates `J₁(x₁, x₂)` for the antisymmetrized pair and measures how far
/// it is from a product `J^A(x₁) J^B(x₂)`.
pub fn nonlocality_analysis(chi: &SpinorField, phi: &SpinorField, region: Option<CellRegion>) -> Result<NonlocalityReport> {
    let pair = SlaterPair::new(chi, phi)?;
    let n = pair.cells();
    let (r1, r2) = region.unwrap_or((0..n, 0..n));
    if r1.end > n || r2.end > n || r1.is_empty() || r2.is_empty() {
        return Err(invalid("region", format!("ranges must be non-empty and within 0..{n}")));
    }
    let x1_cells: Vec<usize> = r1.collect();
    let x2_cells: Vec<usize> = r2.collect();
    let (n1, n2) = (x1_cells.len(), x2_cells.len());
    let mut current = DMatrix::zeros(n1, n2);
    let mut density = DMatrix::zeros(n1, n2);
    let mut four_term_deviation: f64 = 0.0;
    for (a, &c1) in x1_cells.iter().enumerate() {
        for (b, &c2) in x2_cells.iter().enumerate() {
            let (rho, j) = grid_density_current(&pair, &[c1, c2]);
            density[(a, b)] = rho;
            current[(a, b)] = j[0];
            four_term_deviation = four_term_deviation.max((j[0] - four_term_current(&pair, c1, c2)).abs());
        }
    }
    let mut singular_values: Vec<f64> = current.clone().singular_values().iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let sigma_ratio = match singular_values.as_slice() {
        [s1, s2, ..] if *s1 > 0.0 => s2 / s1,
        _ => 0.0,
    };

    let marginal: Vec<f64> = (0..n1).map(|a| density.row(a).sum()).collect();
    let star = (0..n1).max_by(|&a, &b| marginal[a].total_cmp(&marginal[b])).unwrap_or(0);
    let row_max = density.row(star).max();
    let velocities: Vec<f64> = (0..n2)
        .filter(|&b| density[(star, b)] > SPREAD_DENSITY_CUT * row_max)
        .map(|b| current[(star, b)] / density[(star, b)])
        .collect();
    let velocity_spread = velocities.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - velocities.iter().copied().fold(f64::INFINITY, f64::min);

    Ok(NonlocalityReport {
        current,
        density,
        x1_star: x1_cells[star],
        x1_cells,
        x2_cells,
        singular_values,
        sigma_ratio,
        velocity_spread: if velocities.is_empty() { 0.0 } else { velocity_spread },
        four_term_deviation,
    })
}

/// Setup of the jump-versus-guidance comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Physical box length; `δ = box_length / 2N`.
    pub box_length: f64,
    pub mass: f64,
    /// One-quantum packet in physical units.
    pub packet: OrbitalSpec,
    /// Site counts `2N`, increasing.
    pub resolutions: Vec<usize>,
    pub trials: usize,
    pub horizon: f64,
    pub seed: u64,
    /// Jump substep `dt = δ / steps_per_spacing`.
    pub steps_per_spacing: f64,
    /// Guidance frames every `frame_stride` substeps.
    pub frame_stride: usize,
    /// Pilot pre-evolution before the ensemble starts, letting a packet
    /// that vanishes on one sublattice fill it in.
    #[serde(default)]
    pub warmup: f64,
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup >= 0.0) {
            return Err(invalid("warmup", "must be >= 0"));
        }
        if !(self.box_length > 0.0 && self.horizon > 0.0 && self.steps_per_spacing > 0.0) {
            return Err(invalid("box_length", "box length, horizon and steps_per_spacing must be > 0"));
        }
        if self.resolutions.is_empty() {
            return Err(invalid("resolutions", "at least one resolution required"));
        }
        if self.resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("resolutions", "site counts must be strictly increasing"));
        }
        if self.trials == 0 || self.frame_stride == 0 {
            return Err(invalid("trials", "trials and frame_stride must be positive"));
        }
        for &sites in &self.resolutions {
            let p = LatticeParams::new(sites, self.box_length / sites as f64, self.mass, 1)?;
            PacketSpec { orbitals: vec![self.packet] }.validate(&p)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolutionResult {
    pub two_n: usize,
    pub delta: f64,
    pub mean_error: f64,
    pub backward_fraction: f64,
    pub backward_jumps: usize,
    pub total_jumps: usize,
    /// Backward jumps per trajectory.
    pub backward_per_trial: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub results: Vec<ResolutionResult>,
    /// `backward_fraction[i+1] / backward_fraction[i]`.
    pub backward_ratios: Vec<f64>,
    pub error_decreasing: bool,
    pub backward_in_band: bool,
    /// `None` when fewer than two resolutions were given.
    pub pass: Option<bool>,
}

/// Halving band for the backward-jump fraction.
pub const HALVING_BAND: (f64, f64) = (0.3, 0.7);

/// Continuum velocity `J/ρ` at a physical position, from a merged frame.
fn frame_velocity(frame: &SpinorField, x: f64) -> Result<f64> {
    let p = current_density(frame, &[wrap(x, frame.origin, frame.box_length())])?;
    Ok(p.current[0] / p.density)
}

/// Runs the jump process and the guidance law on the same packet at each
/// resolution and compares final positions.
///
/// A jump counts as backward when its direction opposes the sign of the
/// continuum velocity at the beable's position at the start of the
/// substep. The backward fraction is backward jumps over all jumps.
pub fn convergence_study(cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let results = cfg.resolutions.iter().map(|&sites| run_resolution(cfg, sites)).collect::<Result<Vec<_>>>()?;
    let backward_ratios: Vec<f64> =
        results.windows(2).map(|w| w[1].backward_fraction / w[0].backward_fraction).collect();
    let error_decreasing = results.windows(2).all(|w| w[1].mean_error < w[0].mean_error);
    let backward_in_band = backward_ratios.iter().all(|r| (HALVING_BAND.0..=HALVING_BAND.1).contains(r));
    let pass = (results.len() >= 2).then_some(error_decreasing && backward_in_band);
    Ok(ConvergenceReport { results, backward_ratios, error_decreasing, backward_in_band, pass })
}

fn run_resolution(cfg: &ConvergenceConfig, sites: usize) -> Result<ResolutionResult> {
    let delta = cfg.box_length / sites as f64;
    let params = LatticeParams::new(sites, delta, cfg.mass, 1)?;
    let h = Arc::new(assemble_hamiltonian(&params)?);
    let packet = build_initial_packet(h.basis(), &PacketSpec { orbitals: vec![cfg.packet] })?;
    let prop = Propagator::new(h.clone(), EvolutionConfig::default())?;
    let mut psi0 = prop.evolve(&packet, cfg.warmup)?;
    psi0.time = 0.0;
    let dt = delta / cfg.steps_per_spacing;
    let steps = (cfg.horizon / dt).round() as usize;
    let dt = cfg.horizon / steps as f64;
    let timeline = PilotTimeline::build(&prop, &psi0, dt, steps)?;
    let trajectories = run_ensemble(&h, &timeline, cfg.trials, cfg.seed, InitialCondition::Equilibrium)?;

    let frames = FrameTimeline::from_pilot(&timeline, delta, cfg.frame_stride)?;
    let guidance_dt = 0.5 * frames.dt;

    let starts: Vec<usize> = {
        let mut s: Vec<usize> = trajectories.iter().map(|t| h.basis().occupied(t.initial)[0]).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let finals: BTreeMap<usize, f64> = starts
        .par_iter()
        .map(|&site| {
            let g = integrate_guidance(&frames, &[site as f64 * delta], 0.0, cfg.horizon, guidance_dt)?;
            Ok((site, g.final_positions()[0]))
        })
        .collect::<Result<_>>()?;

    let length = cfg.box_length;
    let mut error_sum = 0.0;
    let mut backward = 0usize;
    let mut total = 0usize;
    for t in &trajectories {
        let start = h.basis().occupied(t.initial)[0];
        let end = h.basis().occupied(t.final_configuration())[0];
        error_sum += minimal_image(end as f64 * delta, finals[&start], length).abs();
        for j in &t.jumps {
            let (site, direction) = jump_displacement(h.basis(), j).expect("jumps move one site");
            let frame = staggered_to_spinor(timeline.state(j.step).as_slice(), delta, timeline.time(j.step))?;
            let v = frame_velocity(&frame, site as f64 * delta)?;
            total += 1;
            if v * (direction as f64) < 0.0 {
                backward += 1;
            }
        }
    }
    Ok(ResolutionResult {
        two_n: sites,
        delta,
        mean_error: error_sum / cfg.trials as f64,
        backward_fraction: if total > 0 { backward as f64 / total as f64 } else { 0.0 },
        backward_jumps: backward,
        total_jumps: total,
        backward_per_trial: backward as f64 / cfg.trials as f64,
        trials: cfg.trials,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::plane_wave;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn packet_state(sites: usize, delta: f64, mass: f64, orbital: OrbitalSpec) -> DVector<C64> {
        let p = LatticeParams::new(sites, delta, mass, 1).unwrap();
        let basis = SectorBasis::new(&p).unwrap();
        build_initial_packet(&basis, &PacketSpec { orbitals: vec![orbital] }).unwrap().amplitudes
    }

    #[test]
    fn single_site_maps_to_first_cell() {
        let mut a = vec![ZERO; 8];
        a[0] = C64::new(1.0, 0.0);
        let f = staggered_to_spinor(&a, 0.5, 0.0).unwrap();
        assert_eq!(f.values[0][0], C64::new(1.0, 0.0));
        assert!(f.values.iter().skip(1).all(|v| v[0] == ZERO && v[1] == ZERO));
        assert_eq!(f.values[0][1], ZERO);
        assert!(matches!(staggered_to_spinor(&a[..7], 0.5, 0.0), Err(Error::OddSiteCount(7))));
    }

    #[test]
    fn merging_preserves_norm() {
        let psi = packet_state(64, 0.3, 0.5, OrbitalSpec::new(6.0, 2.0, 0.8));
        let f = staggered_to_spinor(psi.as_slice(), 0.3, 0.0).unwrap();
        assert!((f.norm_sqr() - psi.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn smooth_packet_gives_smooth_components() {
        let delta = 0.1;
        let psi = packet_state(400, delta, 0.0, OrbitalSpec::new(20.0, 20.0 * delta, 0.5));
        let f = staggered_to_spinor(psi.as_slice(), delta, 0.0).unwrap();
        let peak = f.values.iter().map(|v| v[0].norm()).fold(0.0, f64::max);
        for s in 0..2 {
            let worst = f.values.windows(2).map(|w| (w[1][s] - w[0][s]).norm()).fold(0.0, f64::max) / peak;
            // neighbour differences are a small multiple of the cell width
            assert!(worst < 5.0 * 2.0 * delta, "component {s}: {worst}");
        }
    }

    #[test]
    fn plane_wave_velocity_is_cosine() {
        let p = LatticeParams::new(64, 0.5, 0.0, 1).unwrap();
        for q in [0.1, 0.7, 1.3, 2.0, -0.4] {
            let psi = plane_wave(&p, q).amplitudes;
            let v = lattice_velocity(&psi, 10).unwrap();
            assert!((v - (q * 0.5f64).cos()).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_and_alternating_states() {
        let n = 16;
        let uniform = DVector::from_element(n, C64::new(0.25, 0.0));
        assert!((lattice_velocity(&uniform, 3).unwrap() - 1.0).abs() < 1e-15);
        let alternating = DVector::from_fn(n, |k, _| C64::new(if k % 2 == 0 { 0.25 } else { -0.25 }, 0.0));
        assert!((lattice_velocity(&alternating, 3).unwrap() + 1.0).abs() < 1e-15);
        let zero_at_3 = DVector::from_fn(n, |k, _| C64::new(if k == 3 { 0.0 } else { 0.25 }, 0.0));
        assert!(lattice_velocity(&zero_at_3, 3).is_err());
    }

    #[test]
    fn plane_wave_cancellation_regression() {
        // both currents equal cos(pδ)/(δ N) in magnitude with opposite signs
        let p = LatticeParams::new(32, 1.0, 0.0, 1).unwrap();
        let psi = plane_wave(&p, 2.0 * PI * 3.0 / 32.0).amplitudes;
        let r = current_cancellation_check(&psi, 5, 1.0).unwrap();
        assert!(r < 1e-12, "{r}");
    }

    fn ratio_off_center(sites_per_unit: usize) -> (f64, f64) {
        let length = 64.0;
        let sigma = 4.0;
        let sites = (length as usize) * sites_per_unit;
        let delta = length / sites as f64;
        let x0 = 32.0;
        let psi = packet_state(sites, delta, 0.0, OrbitalSpec::new(x0, sigma, 0.3));
        let center = current_cancellation_check(&psi, (x0 / delta).round() as usize, delta).unwrap();
        let off = current_cancellation_check(&psi, ((x0 + sigma) / delta).round() as usize, delta).unwrap();
        (center, off)
    }

    #[test]
    fn currents_cancel_to_leading_order() {
        let (c1, o1) = ratio_off_center(5); // σ = 20δ
        assert!(c1 < 0.1);
        let (_, o2) = ratio_off_center(10);
        let ratio = o2 / o1;
        assert!((0.3..=0.7).contains(&ratio), "{o1} {o2} {ratio}");
    }

    #[test]
    fn merged_current_matches_paired_lattice_currents() {
        let mut worst = Vec::new();
        for scale in [1usize, 2, 4] {
            let delta = 0.2 / scale as f64;
            let sites = 200 * scale;
            let psi = packet_state(sites, delta, 0.5, OrbitalSpec::new(20.0, 3.0, 0.7));
            let f = staggered_to_spinor(psi.as_slice(), delta, 0.0).unwrap();
            let peak = (0..sites / 2).map(|c| grid_density_current(&f, &[c]).1[0].abs()).fold(0.0, f64::max);
            let dev = (0..sites / 2)
                .map(|c| (grid_density_current(&f, &[c]).1[0] - paired_lattice_current(&psi, c, delta)).abs())
                .fold(0.0, f64::max)
                / peak;
            worst.push(dev);
        }
        assert!(worst[0] < 0.1);
        assert!(worst[1] < worst[0] && worst[2] < worst[1], "{worst:?}");
    }

    #[test]
    fn massless_right_mover_has_unit_velocity() {
        let n = 32;
        let h = 0.5;
        let s = 1.0 / 2f64.sqrt();
        let values: Vec<[C64; 2]> = (0..n).map(|j| {
            let z = C64::from_polar(0.3, 0.4 * j as f64);
            [z * s, z * s]
        }).collect();
        let f = SpinorField::new(0.0, h, values, 0.0);
        for x in [0.0, 3.3, 15.9] {
            let p = current_density(&f, &[x]).unwrap();
            assert!((p.current[0] / p.density - 1.0).abs() < 1e-14);
        }
        assert!(matches!(current_density(&f, &[16.0]), Err(Error::OutOfGrid { .. })));
        assert!(matches!(current_density(&f, &[-0.1]), Err(Error::OutOfGrid { .. })));
    }

    #[test]
    fn standing_wave_has_no_current() {
        let values: Vec<[C64; 2]> = (0..16).map(|j| [C64::new((j as f64).cos(), 0.0), ZERO]).collect();
        let f = SpinorField::new(0.0, 1.0, values, 0.0);
        assert_eq!(current_density(&f, &[2.5]).unwrap().current[0], 0.0);
    }

    #[test]
    fn lattice_wavefunction_density_normalized() {
        for quanta in [1usize, 2, 3] {
            let p = LatticeParams::new(12, 0.4, 0.5, quanta).unwrap();
            let basis = Arc::new(SectorBasis::new(&p).unwrap());
            let spec = PacketSpec {
                orbitals: (0..quanta).map(|q| OrbitalSpec::new(1.0 + 1.5 * q as f64, 0.8, 0.3)).collect(),
            };
            let psi = build_initial_packet(&basis, &spec).unwrap();
            let wf = LatticeWavefunction::new(basis, psi.amplitudes);
            let field = GuidanceField::tabulate(&wf);
            assert!((field.integral() - 1.0).abs() < 1e-12, "ω={quanta}: {}", field.integral());
        }
    }

    #[test]
    fn lattice_wavefunction_one_quantum_matches_spinor_field() {
        let p = LatticeParams::new(20, 0.5, 0.5, 1).unwrap();
        let basis = Arc::new(SectorBasis::new(&p).unwrap());
        let psi = build_initial_packet(&basis, &PacketSpec::single(2.0, 1.0, 0.4)).unwrap().amplitudes;
        let f = staggered_to_spinor(psi.as_slice(), 0.5, 0.0).unwrap();
        let wf = LatticeWavefunction::new(basis, psi);
        for c in 0..10 {
            for s in 0..2 {
                assert!((wf.value(&[c], &[s]) - f.value(&[c], &[s])).norm() < 1e-15);
            }
        }
    }

    fn counter_propagating(cells: usize, h: f64, sigma: f64) -> (SpinorField, SpinorField) {
        let center = 0.5 * cells as f64 * h;
        let chi = gaussian_orbital(cells, h, &OrbitalSpec::new(center - 0.5 * sigma, sigma, 0.5 / sigma), 0.5);
        let phi = gaussian_orbital(cells, h, &OrbitalSpec::new(center + 0.5 * sigma, sigma, -0.5 / sigma), 0.5);
        (chi, phi)
    }

    #[test]
    fn slater_pair_normalized_and_antisymmetric() {
        let (chi, phi) = counter_propagating(40, 0.5, 2.0);
        let pair = SlaterPair::new(&chi, &phi).unwrap();
        let field = GuidanceField::tabulate(&pair);
        assert!((field.integral() - 1.0).abs() < 1e-12);
        let a = pair.value(&[3, 17], &[0, 1]);
        let b = pair.value(&[17, 3], &[1, 0]);
        assert!((a + b).norm() < 1e-15);
        assert!(SlaterPair::new(&chi, &chi).is_err());
        assert!(matches!(SlaterPair::new(&chi, &chi.with_global_phase(0.3)), Err(Error::DegenerateOrbitals { .. })));
    }

    #[test]
    fn overlapping_counter_propagating_pair_is_nonlocal() {
        let (chi, phi) = counter_propagating(64, 0.25, 2.0);
        let r = nonlocality_analysis(&chi, &phi, None).unwrap();
        assert!(r.four_term_deviation < 1e-10);
        assert!(r.sigma_ratio > 0.05, "{}", r.sigma_ratio);
        assert!(r.velocity_spread > 10.0 * INTEGRATOR_NOISE_FLOOR, "{}", r.velocity_spread);
    }

    #[test]
    fn disjoint_pair_factorizes() {
        let (cells, h) = (80, 0.25);
        let chi = bump_orbital(cells, h, 5.0, 3.0, 0.8, 0.5);
        let phi = bump_orbital(cells, h, 15.0, 3.0, -0.6, 0.5);
        let region = (0..40, 40..80);
        let r = nonlocality_analysis(&chi, &phi, Some(region)).unwrap();
        assert!(r.sigma_ratio < 1e-6, "{}", r.sigma_ratio);
        assert!(r.velocity_spread < 1e-12, "{}", r.velocity_spread);
        assert!(r.four_term_deviation < 1e-10);
    }

    #[test]
    fn uniform_right_mover_translates_at_unit_speed() {
        let n = 32;
        let s = 1.0 / 2f64.sqrt();
        let values = vec![[C64::new(s, 0.0), C64::new(s, 0.0)]; n];
        let source = Stationary(SpinorField::new(0.0, 0.5, values, 0.0));
        let g = integrate_guidance(&source, &[3.0], 0.0, 20.0, 0.05).unwrap();
        let expected = (3.0f64 + 20.0).rem_euclid(16.0);
        assert!((g.final_positions()[0] - expected).abs() < 1e-10);
        assert!(g.positions.iter().all(|x| (0.0..16.0).contains(&x[0])));
    }

    #[test]
    fn standing_wave_trajectory_is_static() {
        let values: Vec<[C64; 2]> = (0..16).map(|j| [C64::new(2.0 + (j as f64).cos(), 0.0), ZERO]).collect();
        let source = Stationary(SpinorField::new(0.0, 1.0, values, 0.0));
        let g = integrate_guidance(&source, &[4.2], 0.0, 5.0, 0.1).unwrap();
        assert_eq!(g.final_positions()[0], 4.2);
    }

    #[test]
    fn node_terminates_integration() {
        let values: Vec<[C64; 2]> = (0..16).map(|j| [C64::new(if j < 8 { 1.0 } else { 0.0 }, 0.0), ZERO]).collect();
        let source = Stationary(SpinorField::new(0.0, 1.0, values, 0.0));
        assert!(matches!(integrate_guidance(&source, &[12.0], 0.0, 1.0, 0.1), Err(Error::NodeReached { .. })));
    }

    fn evolving_frames(sites: usize, delta: f64, orbital: OrbitalSpec, horizon: f64, dt: f64) -> FrameTimeline<SpinorField> {
        let p = LatticeParams::new(sites, delta, 0.5, 1).unwrap();
        let h = Arc::new(assemble_hamiltonian(&p).unwrap());
        let psi = build_initial_packet(h.basis(), &PacketSpec { orbitals: vec![orbital] }).unwrap();
        let prop = Propagator::new(h, EvolutionConfig::exact()).unwrap();
        let steps = (horizon / dt).round() as usize;
        let line = PilotTimeline::build(&prop, &psi, dt, steps).unwrap();
        FrameTimeline::from_pilot(&line, delta, 1).unwrap()
    }

    #[test]
    fn conjugated_timeline_retraces_trajectory() {
        let frames = evolving_frames(128, 0.25, OrbitalSpec::new(12.0, 2.0, 0.6), 4.0, 0.01);
        let forward = integrate_guidance(&frames, &[11.0], 0.0, 4.0, 0.005).unwrap();
        let back = integrate_guidance(&frames.reversed(), forward.final_positions(), 0.0, 4.0, 0.005).unwrap();
        let moved = minimal_image(forward.final_positions()[0], 11.0, 32.0).abs();
        assert!(moved > 0.5, "{moved}");
        let err = minimal_image(back.final_positions()[0], 11.0, 32.0).abs();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn guidance_trajectories_do_not_cross() {
        let frames = evolving_frames(128, 0.25, OrbitalSpec::new(16.0, 2.0, 0.0), 4.0, 0.01);
        let starts: Vec<f64> = (0..20).map(|i| 12.0 + 0.4 * i as f64).collect();
        let runs: Vec<GuidanceTrajectory> =
            starts.iter().map(|&x| integrate_guidance(&frames, &[x], 0.0, 4.0, 0.005).unwrap()).collect();
        for step in 0..runs[0].times.len() {
            // unwrap relative to the first trajectory and check ordering
            let base = runs[0].positions[step][0];
            let offsets: Vec<f64> =
                runs.iter().map(|r| (r.positions[step][0] - base).rem_euclid(32.0)).collect();
            assert!(offsets.windows(2).all(|w| w[0] < w[1]), "step {step}: {offsets:?}");
        }
    }

    #[test]
    fn continuity_residual_shrinks_with_spacing() {
        let mut residuals = Vec::new();
        for scale in [1usize, 2] {
            let delta = 0.25 / scale as f64;
            let sites = 128 * scale;
            let dt = 1e-3;
            let frames = evolving_frames(sites, delta, OrbitalSpec::new(16.0, 2.0, 0.5), 2.0 * dt, dt);
            let (a, b, c) = (&frames.frames[0], &frames.frames[1], &frames.frames[2]);
            let n = b.len();
            let h = b.spacing;
            let rho = |f: &SpinorField, j: usize| grid_density_current(f, &[j % n]).0;
            let cur = |f: &SpinorField, j: usize| grid_density_current(f, &[j % n]).1[0];
            let scale_rho = (0..n).map(|j| rho(b, j)).fold(0.0, f64::max);
            let worst = (0..n)
                .map(|j| {
                    let drho = (rho(c, j) - rho(a, j)) / (2.0 * dt);
                    let div = (cur(b, j + 1) - cur(b, j + n - 1)) / (2.0 * h);
                    (drho + div).abs()
                })
                .fold(0.0, f64::max)
                / scale_rho;
            residuals.push(worst);
        }
        assert!(residuals[1] < 0.6 * residuals[0], "{residuals:?}");
    }

    #[test]
    fn convergence_report_flags_single_resolution() {
        let cfg = ConvergenceConfig {
            box_length: 16.0,
            mass: 0.0,
            packet: OrbitalSpec::new(8.0, 2.0, 0.3),
            resolutions: vec![16],
            trials: 20,
            horizon: 1.0,
            seed: 3,
            steps_per_spacing: 50.0,
            frame_stride: 4,
            warmup: 0.0,
        };
        let r = convergence_study(&cfg).unwrap();
        assert_eq!(r.results.len(), 1);
        assert_eq!(r.pass, None);
        let mut bad = cfg.clone();
        bad.resolutions = vec![32, 16];
        assert!(convergence_study(&bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn phase_leaves_guidance_invariant(phase in 0.0f64..6.28, x in 0.0f64..15.9) {
            let f = gaussian_orbital(32, 0.5, &OrbitalSpec::new(8.0, 2.0, 0.7), 0.5);
            let a = current_density(&f, &[x]).unwrap();
            let b = current_density(&f.with_global_phase(phase), &[x]).unwrap();
            prop_assert!((a.density - b.density).abs() < 1e-14);
            prop_assert!((a.current[0] - b.current[0]).abs() < 1e-14);
        }

        #[test]
        fn two_quantum_current_matches_four_terms(
            c1 in 0usize..24, c2 in 0usize..24, pa in -1.0f64..1.0, pb in -1.0f64..1.0, xa in 0.0f64..12.0,
        ) {
            let chi = gaussian_orbital(24, 0.5, &OrbitalSpec::new(xa, 1.5, pa), 0.3);
            let phi = gaussian_orbital(24, 0.5, &OrbitalSpec::new(6.0, 2.0, pb), 0.3);
            if let Ok(pair) = SlaterPair::new(&chi, &phi) {
                let (_, j) = grid_density_current(&pair, &[c1, c2]);
                prop_assert!((j[0] - four_term_current(&pair, c1, c2)).abs() < 1e-10);
            }
        }
    }
}

//! Exact finite-mode Fock-space matrices.
//!
//! Everything here is brute force: `M` fermionic modes give a `2^M`
//! dimensional space, with annihilators built from a Jordan–Wigner sign
//! string. Basis state `b` has mode `i` occupied when bit `i` of `b` is set,
//! and `a_i` picks up `(-1)^(occupied modes below i)`.
//!
//! The module serves as an oracle for the sparse lattice code and as the
//! home of the smeared-density commutator `[∫ f ψ†ψ, N]` in 1+1 dimensions.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::{LatticeParams, SectorBasis};
use crate::C64;

/// Default cap on the number of modes (Fock dimension `2^8`).
pub const DEFAULT_MODE_CAP: usize = 8;

const ONE: C64 = C64::new(1.0, 0.0);

/// A dense operator on a Fock space, tagged with a readable label.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    pub label: String,
    pub matrix: DMatrix<C64>,
}

impl OperatorMatrix {
    pub fn new(label: impl Into<String>, matrix: DMatrix<C64>) -> Self {
        assert!(matrix.is_square() && matrix.nrows().is_power_of_two());
        Self { label: label.into(), matrix }
    }

    pub fn zeros(dimension: usize) -> Self {
        Self::new("0", DMatrix::zeros(dimension, dimension))
    }

    pub fn identity(dimension: usize) -> Self {
        Self::new("I", DMatrix::identity(dimension, dimension))
    }

    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of modes `M` with `dimension = 2^M`.
    pub fn modes(&self) -> usize {
        self.dimension().trailing_zeros() as usize
    }

    pub fn adjoint(&self) -> Self {
        Self::new(format!("({})†", self.label), self.matrix.adjoint())
    }

    pub fn product(&self, other: &Self) -> Self {
        Self::new(format!("{}·{}", self.label, other.label), &self.matrix * &other.matrix)
    }

    pub fn commutator(&self, other: &Self) -> Self {
        let m = &self.matrix * &other.matrix - &other.matrix * &self.matrix;
        Self::new(format!("[{}, {}]", self.label, other.label), m)
    }

    pub fn anticommutator(&self, other: &Self) -> Self {
        let m = &self.matrix * &other.matrix + &other.matrix * &self.matrix;
        Self::new(format!("{{{}, {}}}", self.label, other.label), m)
    }

    /// Largest entry modulus.
    pub fn max_norm(&self) -> f64 {
        self.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `⟨row|O|col⟩` in the occupation basis.
    pub fn element(&self, row: usize, col: usize) -> C64 {
        self.matrix[(row, col)]
    }

    /// Restriction to the states with exactly `quanta` occupied modes, in
    /// lexicographic order of the occupied mode lists.
    pub fn number_block(&self, quanta: usize) -> DMatrix<C64> {
        let states = states_with_quanta(self.modes(), quanta);
        DMatrix::from_fn(states.len(), states.len(), |r, c| self.matrix[(states[r], states[c])])
    }
}

impl fmt::Display for OperatorMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}x{})", self.label, self.dimension(), self.dimension())
    }
}

/// Bit patterns with `quanta` set bits out of `modes`, ordered as the
/// lexicographic order of their sorted set-bit lists.
fn states_with_quanta(modes: usize, quanta: usize) -> Vec<usize> {
    let mut states: Vec<usize> =
        (0..1usize << modes).filter(|b| b.count_ones() as usize == quanta).collect();
    states.sort_by_key(|&b| (0..modes).filter(|i| b >> i & 1 == 1).collect::<Vec<_>>());
    states
}

/// Jordan–Wigner annihilators for `modes` modes.
pub fn jordan_wigner(modes: usize, cap: usize) -> Result<Vec<OperatorMatrix>> {
    if modes > cap {
        return Err(Error::ModeCapExceeded { modes, cap });
    }
    let dim = 1usize << modes;
    Ok((0..modes)
        .map(|i| {
            let mut m = DMatrix::zeros(dim, dim);
            for state in (0..dim).filter(|s| s >> i & 1 == 1) {
                let below = (state & ((1 << i) - 1)).count_ones();
                m[(state ^ (1 << i), state)] = if below % 2 == 0 { ONE } else { -ONE };
            }
            OperatorMatrix::new(format!("a{i}"), m)
        })
        .collect())
}

/// Annihilator/creator pairs, indexed like the owning mode list.
#[derive(Debug, Clone)]
pub struct ModeOperators {
    pub annihilators: Vec<OperatorMatrix>,
    pub creators: Vec<OperatorMatrix>,
}

impl ModeOperators {
    pub fn from_annihilators(annihilators: Vec<OperatorMatrix>) -> Self {
        let creators = annihilators.iter().map(OperatorMatrix::adjoint).collect();
        Self { annihilators, creators }
    }

    pub fn len(&self) -> usize {
        self.annihilators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annihilators.is_empty()
    }

    pub fn dimension(&self) -> usize {
        1 << self.len()
    }

    /// `Σ a†_i a_i`.
    pub fn number(&self) -> OperatorMatrix {
        let dim = self.dimension();
        let mut total = DMatrix::zeros(dim, dim);
        for (a, ad) in self.annihilators.iter().zip(&self.creators) {
            total += &ad.matrix * &a.matrix;
        }
        OperatorMatrix::new("N", total)
    }

    /// Largest deviation from the canonical anticommutation relations.
    pub fn anticommutator_defect(&self) -> f64 {
        let identity = OperatorMatrix::identity(self.dimension());
        let mut worst: f64 = 0.0;
        for i in 0..self.len() {
            for j in 0..self.len() {
                let aa = self.annihilators[i].anticommutator(&self.annihilators[j]);
                let mut aad = self.annihilators[i].anticommutator(&self.creators[j]).matrix;
                if i == j {
                    aad -= &identity.matrix;
                }
                worst = worst.max(aa.max_norm()).max(aad.iter().map(|z| z.norm()).fold(0.0, f64::max));
            }
        }
        worst
    }
}

/// Electron or positron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Electron,
    Positron,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub momentum: f64,
    pub species: Species,
}

/// Momentum modes of a 1+1D Dirac field on a discrete momentum grid.
///
/// Modes are kept sorted by `(species, momentum)`, which fixes the
/// Jordan–Wigner ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    modes: Vec<Mode>,
    mass: f64,
    momentum_spacing: f64,
}

impl ModeSet {
    pub fn new(modes: Vec<Mode>, mass: f64, momentum_spacing: f64) -> Result<Self> {
        Self::with_cap(modes, mass, momentum_spacing, DEFAULT_MODE_CAP)
    }

    pub fn with_cap(mut modes: Vec<Mode>, mass: f64, momentum_spacing: f64, cap: usize) -> Result<Self> {
        if modes.len() > cap {
            return Err(Error::ModeCapExceeded { modes: modes.len(), cap });
        }
        if !(mass.is_finite() && mass > 0.0) {
            return Err(invalid("mass", format!("must be finite and > 0, got {mass}")));
        }
        if !(momentum_spacing.is_finite() && momentum_spacing > 0.0) {
            return Err(invalid("momentum_spacing", format!("must be finite and > 0, got {momentum_spacing}")));
        }
        if modes.iter().any(|m| !m.momentum.is_finite()) {
            return Err(invalid("modes", "momenta must be finite"));
        }
        modes.sort_by(|a, b| a.species.cmp(&b.species).then(a.momentum.total_cmp(&b.momentum)));
        if modes.windows(2).any(|w| w[0].species == w[1].species && w[0].momentum == w[1].momentum) {
            return Err(invalid("modes", "momenta must be distinct within a species"));
        }
        Ok(Self { modes, mass, momentum_spacing })
    }

    /// Electrons at `electron_momenta` and positrons at `positron_momenta`.
    pub fn from_momenta(electron_momenta: &[f64], positron_momenta: &[f64], mass: f64, momentum_spacing: f64) -> Result<Self> {
        let modes = electron_momenta
            .iter()
            .map(|&momentum| Mode { momentum, species: Species::Electron })
            .chain(positron_momenta.iter().map(|&momentum| Mode { momentum, species: Species::Positron }))
            .collect();
        Self::new(modes, mass, momentum_spacing)
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn momentum_spacing(&self) -> f64 {
        self.momentum_spacing
    }

    /// Periodic box length `2π/Δp`.
    pub fn box_length(&self) -> f64 {
        2.0 * PI / self.momentum_spacing
    }

    pub fn index_of(&self, species: Species, momentum: f64) -> Option<usize> {
        self.modes.iter().position(|m| m.species == species && m.momentum == momentum)
    }
}

/// Builds `(c_p, c†_p)` / `(d_k, d†_k)` for every mode, in mode order.
pub fn build_mode_operators(modes: &ModeSet) -> Result<ModeOperators> {
    let mut ops = jordan_wigner(modes.len(), DEFAULT_MODE_CAP.max(modes.len()))?;
    for (op, mode) in ops.iter_mut().zip(modes.modes()) {
        op.label = match mode.species {
            Species::Electron => format!("c({})", mode.momentum),
            Species::Positron => format!("d({})", mode.momentum),
        };
    }
    Ok(ModeOperators::from_annihilators(ops))
}

/// Position-space field operators `φ(n)` for `sites` sites.
pub fn site_operators(sites: usize, cap: usize) -> Result<ModeOperators> {
    let mut ops = jordan_wigner(sites, cap)?;
    for (n, op) in ops.iter_mut().enumerate() {
        op.label = format!("φ({n})");
    }
    Ok(ModeOperators::from_annihilators(ops))
}

/// Positive- and negative-energy spinors at one momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinorBasis {
    pub u: [C64; 2],
    pub v: [C64; 2],
    pub energy: f64,
}

/// `u(p) ∝ (1, p/(m+E))`, `v(p) ∝ (p/(m+E), 1)`, scaled to `u†u = v†v = E/m`.
pub fn dirac_spinors(p: f64, m: f64) -> Result<SpinorBasis> {
    if !(m.is_finite() && m > 0.0) {
        return Err(invalid("mass", format!("spinor normalization needs m > 0, got {m}")));
    }
    let energy = p.hypot(m);
    let scale = ((m + energy) / (2.0 * m)).sqrt();
    let ratio = p / (m + energy);
    Ok(SpinorBasis {
        u: [C64::new(scale, 0.0), C64::new(scale * ratio, 0.0)],
        v: [C64::new(scale * ratio, 0.0), C64::new(scale, 0.0)],
        energy,
    })
}

/// Unit-norm spinor direction; also defined for `m = 0`, where the positive
/// energy direction at `p > 0` is `(1, 1)/√2` and at `p = 0` is `(1, 0)`.
pub fn unit_spinor(p: f64, m: f64, positive_energy: bool) -> [C64; 2] {
    let energy = p.hypot(m);
    let ratio = if m + energy > 0.0 { p / (m + energy) } else { 0.0 };
    let norm = ratio.hypot(1.0);
    let (a, b) = if positive_energy { (1.0, ratio) } else { (ratio, 1.0) };
    [C64::new(a / norm, 0.0), C64::new(b / norm, 0.0)]
}

fn spinor_dot(a: &[C64; 2], b: &[C64; 2]) -> C64 {
    a[0].conj() * b[0] + a[1].conj() * b[1]
}

/// Result of the smeared-density commutator computation.
#[derive(Debug, Clone)]
pub struct CommutatorReport {
    /// `C = [S, N]` with `S = Σ_j Δx f_j ψ†ψ(x_j)`.
    pub commutator: OperatorMatrix,
    /// Momentum `p₀` of the probed pair.
    pub p0: f64,
    /// `⟨0|C d†(p₀) c†(p₀)|0⟩` from the matrices.
    pub pair_element: C64,
    /// The same element from the closed-form pair-creation term.
    pub closed_form: C64,
}

fn check_grid(samples: usize, dx: f64, modes: &ModeSet) -> Result<()> {
    let product = dx * modes.momentum_spacing() * samples as f64;
    if !(dx > 0.0) || (product - 2.0 * PI).abs() > 1e-9 {
        return Err(Error::GridMismatch { product });
    }
    Ok(())
}

/// Closed-form `⟨0|[S, N] d†(k) c†(p)|0⟩`.
///
/// Only the `d_k c_p` part of `ψ†ψ` connects the pair state to the vacuum,
/// and `N` differs by 2 between them, giving
/// `-(2m / (L √(E_p E_k))) v†(k) u(p) Σ_j Δx f_j e^{i(p+k)x_j}`.
pub fn pair_creation_closed_form(f: &[f64], dx: f64, modes: &ModeSet, p: f64, k: f64) -> Result<C64> {
    check_grid(f.len(), dx, modes)?;
    let m = modes.mass();
    let sp = dirac_spinors(p, m)?;
    let sk = dirac_spinors(k, m)?;
    let smear: C64 = f
        .iter()
        .enumerate()
        .map(|(j, &fj)| C64::from_polar(dx * fj, (p + k) * j as f64 * dx))
        .sum();
    let prefactor = -2.0 * m / (modes.box_length() * (sp.energy * sk.energy).sqrt());
    Ok(spinor_dot(&sk.v, &sp.u) * smear * prefactor)
}

/// `[Σ_j Δx f_j ψ†ψ(x_j), N]` on the Fock space of `modes`, with
/// `ψ(x) = Σ_p √(m/(L E_p)) u(p) e^{ipx} c_p + Σ_k √(m/(L E_k)) v(k) e^{-ikx} d†_k`
/// and `x_j = j Δx`.
///
/// The pair element is probed at `p₀`, which must label both an electron
/// and a positron mode.
pub fn smeared_density_commutator(f: &[f64], dx: f64, modes: &ModeSet, p0: f64) -> Result<CommutatorReport> {
    check_grid(f.len(), dx, modes)?;
    let electron = modes
        .index_of(Species::Electron, p0)
        .ok_or_else(|| invalid("p0", format!("no electron mode at momentum {p0}")))?;
    let positron = modes
        .index_of(Species::Positron, p0)
        .ok_or_else(|| invalid("p0", format!("no positron mode at momentum {p0}")))?;

    let ops = build_mode_operators(modes)?;
    let dim = ops.dimension();
    let m = modes.mass();
    let length = modes.box_length();

    let spinors: Vec<SpinorBasis> =
        modes.modes().iter().map(|mode| dirac_spinors(mode.momentum, m)).collect::<Result<_>>()?;

    let mut smeared = DMatrix::<C64>::zeros(dim, dim);
    for (j, &fj) in f.iter().enumerate() {
        if fj == 0.0 {
            continue;
        }
        let x = j as f64 * dx;
        for component in 0..2 {
            let mut psi = DMatrix::<C64>::zeros(dim, dim);
            for (i, (mode, s)) in modes.modes().iter().zip(&spinors).enumerate() {
                let amp = (m / (length * s.energy)).sqrt();
                match mode.species {
                    Species::Electron => {
                        psi += &ops.annihilators[i].matrix * (s.u[component] * C64::from_polar(amp, mode.momentum * x));
                    }
                    Species::Positron => {
                        psi += &ops.creators[i].matrix * (s.v[component] * C64::from_polar(amp, -mode.momentum * x));
                    }
                }
            }
            smeared += psi.adjoint() * &psi * C64::new(dx * fj, 0.0);
        }
    }

    let density = OperatorMatrix::new("S", smeared);
    let commutator = density.commutator(&ops.number());
    let pair_state = (&ops.creators[positron].matrix * &ops.creators[electron].matrix).column(0).into_owned();
    let pair_element = (&commutator.matrix * pair_state)[0];
    let closed_form = pair_creation_closed_form(f, dx, modes, p0, p0)?;
    Ok(CommutatorReport { commutator, p0, pair_element, closed_form })
}

/// The staggered Hamiltonian built from position-space field operators on
/// the full `2^(2N)`-dimensional Fock space, including the contact term.
pub fn oracle_sector_hamiltonian(params: &LatticeParams, cap: usize) -> Result<OperatorMatrix> {
    params.validate()?;
    let n = params.sites;
    let ops = site_operators(n, cap)?;
    let dim = ops.dimension();
    let hop = C64::new(0.0, 1.0 / (2.0 * params.spacing));
    let number: Vec<DMatrix<C64>> =
        (0..n).map(|s| &ops.creators[s].matrix * &ops.annihilators[s].matrix).collect();

    let mut h = DMatrix::<C64>::zeros(dim, dim);
    for site in 0..n {
        let next = (site + 1) % n;
        let forward = &ops.creators[site].matrix * &ops.annihilators[next].matrix;
        let backward = &ops.creators[next].matrix * &ops.annihilators[site].matrix;
        h += (backward - forward) * hop;
        h += &number[site] * C64::new(params.staggered_mass(site), 0.0);
    }
    if params.coupling != 0.0 {
        let g = C64::new(params.coupling / params.spacing, 0.0);
        for pair in 0..n / 2 {
            let (even, odd) = (&number[2 * pair], &number[2 * pair + 1]);
            h += (even + odd - even * odd * C64::new(2.0, 0.0)) * g;
        }
    }
    Ok(OperatorMatrix::new("H", h))
}

/// Total fermion number `F = Σ φ†(n)φ(n)` on `sites` sites.
pub fn fermion_number(sites: usize, cap: usize) -> Result<OperatorMatrix> {
    let mut f = site_operators(sites, cap)?.number();
    f.label = "F".into();
    Ok(f)
}

/// Largest entry deviation between the oracle's fermion-number block and a
/// sparse sector Hamiltonian.
pub fn oracle_block_deviation(oracle: &OperatorMatrix, sector: &crate::lattice::SectorHamiltonian) -> f64 {
    let block = oracle.number_block(sector.params().quanta);
    let dense = sector.to_dense();
    debug_assert_eq!(block.nrows(), dense.nrows());
    (block - dense).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Occupation bit pattern of every sector basis state, in rank order.
pub fn sector_occupations(basis: &SectorBasis) -> Vec<usize> {
    (0..basis.dimension()).map(|i| basis.occupied(i).iter().fold(0, |acc, &s| acc | 1 << s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::assemble_hamiltonian;
    use proptest::prelude::*;

    const ZERO: C64 = C64::new(0.0, 0.0);

    #[test]
    fn single_mode_operators() {
        let ops = jordan_wigner(1, 8).unwrap();
        let a = &ops[0].matrix;
        assert_eq!(a[(0, 1)], ONE);
        assert_eq!(a.iter().filter(|z| z.norm() != 0.0).count(), 1);
        let ad = a.adjoint();
        assert_eq!(a * &ad + &ad * a, DMatrix::identity(2, 2));
    }

    #[test]
    fn anticommutators_exact_on_three_modes() {
        let ops = ModeOperators::from_annihilators(jordan_wigner(3, 8).unwrap());
        assert_eq!(ops.anticommutator_defect(), 0.0);
    }

    #[test]
    fn two_mode_number_spectrum() {
        let ops = ModeOperators::from_annihilators(jordan_wigner(2, 8).unwrap());
        let mut ev: Vec<f64> = ops.number().matrix.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip([0.0, 1.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fermion_number_spectrum_on_sites() {
        let f = fermion_number(6, 8).unwrap();
        // diagonal in the occupation basis with popcount entries
        for s in 0..64usize {
            assert_eq!(f.element(s, s), C64::new(s.count_ones() as f64, 0.0));
        }
        let mut ev: Vec<i64> =
            f.matrix.symmetric_eigenvalues().iter().map(|e| e.round() as i64).collect();
        ev.sort();
        ev.dedup();
        assert_eq!(ev, (0..=6).collect::<Vec<_>>());
    }

    #[test]
    fn vacuum_annihilated_by_every_site_operator() {
        let ops = site_operators(4, 8).unwrap();
        for a in &ops.annihilators {
            assert!(a.matrix.column(0).iter().all(|z| z.norm() == 0.0));
        }
    }

    #[test]
    fn cap_enforced() {
        assert!(matches!(jordan_wigner(9, 8), Err(Error::ModeCapExceeded { modes: 9, cap: 8 })));
        let modes: Vec<Mode> =
            (0..9).map(|i| Mode { momentum: i as f64, species: Species::Electron }).collect();
        assert!(matches!(ModeSet::new(modes, 1.0, 1.0), Err(Error::ModeCapExceeded { .. })));
    }

    #[test]
    fn mode_set_validation() {
        assert!(ModeSet::from_momenta(&[1.0, 1.0], &[], 1.0, 1.0).is_err());
        assert!(ModeSet::from_momenta(&[1.0], &[1.0], 0.0, 1.0).is_err());
        let set = ModeSet::from_momenta(&[2.0, 1.0], &[1.0], 1.0, 1.0).unwrap();
        assert_eq!(set.modes()[0].momentum, 1.0);
        assert_eq!(set.modes()[2].species, Species::Positron);
    }

    #[test]
    fn rest_frame_spinors() {
        let s = dirac_spinors(0.0, 1.0).unwrap();
        assert_eq!(s.energy, 1.0);
        assert_eq!(s.u, [ONE, ZERO]);
        assert_eq!(s.v, [ZERO, ONE]);
    }

    #[test]
    fn boosted_spinor_normalization() {
        let s = dirac_spinors(3.0, 4.0).unwrap();
        assert_eq!(s.energy, 5.0);
        assert!((s.u[1].re / s.u[0].re - 1.0 / 3.0).abs() < 1e-15);
        assert!((spinor_dot(&s.u, &s.u).re - 1.25).abs() < 1e-12);
        assert!((spinor_dot(&s.v, &s.v).re - 1.25).abs() < 1e-12);
    }

    #[test]
    fn spinors_not_orthogonal_at_equal_momentum() {
        // v†(p)u(p) = p/m: a regression pin, not an orthogonality claim
        let s = dirac_spinors(0.7, 1.3).unwrap();
        assert!((spinor_dot(&s.v, &s.u).re - 0.7 / 1.3).abs() < 1e-12);
        let minus = dirac_spinors(-0.7, 1.3).unwrap();
        assert!(spinor_dot(&s.u, &minus.v).norm() < 1e-15);
    }

    #[test]
    fn unit_spinor_massless_limits() {
        let r = unit_spinor(0.8, 0.0, true);
        assert!((r[0].re - r[1].re).abs() < 1e-15);
        let l = unit_spinor(-0.8, 0.0, true);
        assert!((l[0].re + l[1].re).abs() < 1e-15);
        assert_eq!(unit_spinor(0.0, 0.0, true), [ONE, ZERO]);
        assert_eq!(unit_spinor(0.0, 0.0, false), [ZERO, ONE]);
    }

    fn four_mode_set() -> (ModeSet, usize, f64) {
        let dp = 1.0;
        let modes = ModeSet::from_momenta(&[dp, 2.0 * dp], &[dp, 2.0 * dp], 1.0, dp).unwrap();
        let samples = 16;
        (modes, samples, 2.0 * PI / (dp * samples as f64))
    }

    fn gaussian(samples: usize, dx: f64, center: f64, width: f64) -> Vec<f64> {
        (0..samples).map(|j| (-(j as f64 * dx - center).powi(2) / (2.0 * width * width)).exp()).collect()
    }

    #[test]
    fn constant_smearing_commutes_with_particle_number() {
        let (modes, samples, dx) = four_mode_set();
        let r = smeared_density_commutator(&vec![0.8; samples], dx, &modes, 1.0).unwrap();
        assert!(r.commutator.max_norm() < 1e-12, "{}", r.commutator.max_norm());
        assert!(r.pair_element.norm() < 1e-12);
    }

    #[test]
    fn gaussian_smearing_creates_pairs() {
        let (modes, samples, dx) = four_mode_set();
        let f = gaussian(samples, dx, PI, 0.8);
        let r = smeared_density_commutator(&f, dx, &modes, 1.0).unwrap();
        assert!(r.pair_element.norm() > 1e-6);
        assert!((r.pair_element - r.closed_form).norm() < 1e-10);
    }

    #[test]
    fn nonconstant_smearings_all_fail_to_commute() {
        let (modes, samples, dx) = four_mode_set();
        let smearings = [
            gaussian(samples, dx, 2.0, 1.0),
            // pair terms need a Fourier component at p + k = 3
            (0..samples).map(|j| (3.0 * j as f64 * dx).cos()).collect::<Vec<_>>(),
            (0..samples).map(|j| if j < samples / 2 { 1.0 } else { 0.0 }).collect(),
            (0..samples).map(|j| j as f64).collect(),
        ];
        for f in &smearings {
            let r = smeared_density_commutator(f, dx, &modes, 1.0).unwrap();
            assert!(r.commutator.max_norm() > 1e-6);
        }
    }

    #[test]
    fn closed_form_pair_elements_for_all_momenta() {
        let (modes, samples, dx) = four_mode_set();
        let f = gaussian(samples, dx, 1.5, 0.6);
        let r = smeared_density_commutator(&f, dx, &modes, 2.0).unwrap();
        assert!((r.pair_element - r.closed_form).norm() < 1e-10);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let (modes, samples, dx) = four_mode_set();
        let f = vec![1.0; samples];
        assert!(matches!(
            smeared_density_commutator(&f, dx * 1.01, &modes, 1.0),
            Err(Error::GridMismatch { .. })
        ));
        assert!(smeared_density_commutator(&f, dx, &modes, 3.0).is_err());
    }

    #[test]
    fn oracle_matches_sparse_four_sites() {
        let params = LatticeParams::new(4, 1.0, 0.5, 1).unwrap();
        let oracle = oracle_sector_hamiltonian(&params, 8).unwrap();
        let sparse = assemble_hamiltonian(&params).unwrap();
        assert!(oracle_block_deviation(&oracle, &sparse) <= 1e-12);
    }

    #[test]
    fn oracle_commutes_with_fermion_number() {
        let params = LatticeParams::new(6, 0.7, 0.3, 0).unwrap().with_coupling(0.4);
        let h = oracle_sector_hamiltonian(&params, 8).unwrap();
        let f = fermion_number(6, 8).unwrap();
        assert_eq!(h.commutator(&f).max_norm(), 0.0);
    }

    #[test]
    fn oracle_empty_sector_is_zero() {
        let params = LatticeParams::new(4, 1.0, 0.5, 0).unwrap();
        let h = oracle_sector_hamiltonian(&params, 8).unwrap();
        assert_eq!(h.number_block(0), DMatrix::from_element(1, 1, ZERO));
    }

    #[test]
    fn sector_occupations_follow_rank_order() {
        let basis = SectorBasis::new(&LatticeParams::new(6, 1.0, 0.0, 2).unwrap()).unwrap();
        assert_eq!(sector_occupations(&basis), states_with_quanta(6, 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn oracle_equivalence_small_lattices(
            half in 1usize..=4,
            quanta_frac in 0.0f64..=1.0,
            spacing in 0.2f64..2.0,
            mass in 0.0f64..1.5,
            coupling in -1.0f64..1.0,
        ) {
            let sites = 2 * half;
            let quanta = (sites as f64 * quanta_frac).round() as usize;
            let params = LatticeParams::new(sites, spacing, mass, quanta).unwrap().with_coupling(coupling);
            let oracle = oracle_sector_hamiltonian(&params, 8).unwrap();
            let sparse = assemble_hamiltonian(&params).unwrap();
            prop_assert!(oracle_block_deviation(&oracle, &sparse) <= 1e-12);
        }

        #[test]
        fn anticommutators_exact_up_to_cap(modes in 0usize..=6) {
            let ops = ModeOperators::from_annihilators(jordan_wigner(modes, 8).unwrap());
            prop_assert_eq!(ops.anticommutator_defect(), 0.0);
        }
    }
}

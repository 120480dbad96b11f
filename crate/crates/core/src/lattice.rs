//! Staggered-fermion lattice: sector bases, Hamiltonian, dispersion.
//!
//! Sites are indexed `0..2N` with periodic wraparound. Even sites carry the
//! upper spinor component and odd sites the lower one. The Hamiltonian is
//!
//! ```text
//! H = -(i/2δ) Σ_n [φ†(n)φ(n+1) - φ†(n+1)φ(n)] + Σ_n m(-1)^n φ†(n)φ(n)
//! ```
//!
//! restricted to the sector of fixed fermion number ω. A basis state is
//! `φ†(k_1)…φ†(k_ω)|sea⟩` with `k_1 < … < k_ω`, so hops between adjacent
//! sites carry no reordering sign; the wrap hop `2N-1 ↔ 0` carries
//! `(-1)^(ω-1)` because the moved quantum passes every other one.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::C64;

/// Default cap on `C(2N, ω)`.
pub const DEFAULT_SECTOR_CAP: usize = 2_000_000;

/// Physical parameters of the staggered lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeParams {
    /// Number of sites `2N` (even).
    pub sites: usize,
    /// Lattice spacing δ.
    pub spacing: f64,
    /// Fermion mass m ≥ 0.
    pub mass: f64,
    /// Fermion number ω of the sector.
    pub quanta: usize,
    /// Contact coupling g.
    #[serde(default)]
    pub coupling: f64,
}

impl LatticeParams {
    pub fn new(sites: usize, spacing: f64, mass: f64, quanta: usize) -> Result<Self> {
        let params = Self { sites, spacing, mass, quanta, coupling: 0.0 };
        params.validate()?;
        Ok(params)
    }

    pub fn with_coupling(mut self, coupling: f64) -> Self {
        self.coupling = coupling;
        self
    }

    pub fn with_quanta(mut self, quanta: usize) -> Self {
        self.quanta = quanta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites == 0 || !self.sites.is_multiple_of(2) {
            return Err(invalid("sites", format!("must be even and positive, got {}", self.sites)));
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(invalid("spacing", format!("must be finite and > 0, got {}", self.spacing)));
        }
        if !(self.mass.is_finite() && self.mass >= 0.0) {
            return Err(invalid("mass", format!("must be finite and >= 0, got {}", self.mass)));
        }
        if self.quanta > self.sites {
            return Err(invalid(
                "quanta",
                format!("must lie in [0, {}], got {}", self.sites, self.quanta),
            ));
        }
        if !self.coupling.is_finite() {
            return Err(invalid("coupling", "must be finite"));
        }
        Ok(())
    }

    /// `N`, half the number of sites.
    pub fn half_sites(&self) -> usize {
        self.sites / 2
    }

    /// Physical position `site · δ`.
    pub fn position(&self, site: usize) -> f64 {
        site as f64 * self.spacing
    }

    /// Length of the periodic box, `2N · δ`.
    pub fn box_length(&self) -> f64 {
        self.sites as f64 * self.spacing
    }

    /// Staggered mass term `m(-1)^n`.
    pub fn staggered_mass(&self, site: usize) -> f64 {
        if site.is_multiple_of(2) {
            self.mass
        } else {
            -self.mass
        }
    }
}

/// A beable: the strictly increasing list of occupied sites.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Configuration {
    occupied: Vec<usize>,
}

impl Configuration {
    pub fn new(occupied: Vec<usize>, sites: usize) -> Result<Self> {
        if occupied.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfiguration {
                sites: occupied,
                reason: "sites must be strictly increasing".into(),
            });
        }
        if let Some(&last) = occupied.last() {
            if last >= sites {
                return Err(Error::InvalidConfiguration {
                    sites: occupied,
                    reason: format!("site index out of range [0, {sites})"),
                });
            }
        }
        Ok(Self { occupied })
    }

    pub fn sites(&self) -> &[usize] {
        &self.occupied
    }

    pub fn quanta(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_occupied(&self, site: usize) -> bool {
        self.occupied.binary_search(&site).is_ok()
    }

    /// Occupation bit pattern, bit `n` set when site `n` is occupied.
    pub fn to_bits(&self) -> u64 {
        self.occupied.iter().fold(0u64, |acc, &s| acc | (1u64 << s))
    }
}

fn binomial_capped(n: usize, k: usize, cap: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > cap {
            return acc;
        }
    }
    acc
}

/// Lexicographically ordered basis of the ω-quanta sector.
#[derive(Debug, Clone)]
pub struct SectorBasis {
    params: LatticeParams,
    dimension: usize,
    // occupied sites of configuration i live at [i*ω, (i+1)*ω)
    flat: Vec<usize>,
    // pascal[n][k] = C(n, k), saturating
    pascal: Vec<Vec<u64>>,
}

/// Enumerates the sector with the default dimension cap.
pub fn enumerate_sector(params: &LatticeParams) -> Result<SectorBasis> {
    SectorBasis::with_cap(params, DEFAULT_SECTOR_CAP)
}

impl SectorBasis {
    pub fn new(params: &LatticeParams) -> Result<Self> {
        Self::with_cap(params, DEFAULT_SECTOR_CAP)
    }

    pub fn with_cap(params: &LatticeParams, cap: usize) -> Result<Self> {
        params.validate()?;
        let (n, w) = (params.sites, params.quanta);
        let dimension = binomial_capped(n, w, cap as u128);
        if dimension > cap as u128 {
            return Err(Error::SectorTooLarge { dimension, cap });
        }
        let dimension = dimension as usize;

        let mut pascal = vec![vec![0u64; w + 1]; n + 1];
        for row in 0..=n {
            pascal[row][0] = 1;
            for col in 1..=w.min(row) {
                pascal[row][col] = pascal[row - 1][col - 1].saturating_add(pascal[row - 1][col]);
            }
        }

        let mut flat = Vec::with_capacity(dimension * w);
        let mut current: Vec<usize> = (0..w).collect();
        for i in 0..dimension {
            flat.extend_from_slice(&current);
            if i + 1 == dimension {
                break;
            }
            // advance to the next combination in lexicographic order
            let mut pos = w;
            while pos > 0 {
                pos -= 1;
                if current[pos] < n - w + pos {
                    current[pos] += 1;
                    for later in pos + 1..w {
                        current[later] = current[later - 1] + 1;
                    }
                    break;
                }
            }
        }

        Ok(Self { params: *params, dimension, flat, pascal })
    }

    pub fn params(&self) -> &LatticeParams {
        &self.params
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn quanta(&self) -> usize {
        self.params.quanta
    }

    /// Occupied sites of basis state `index`.
    pub fn occupied(&self, index: usize) -> &[usize] {
        let w = self.params.quanta;
        &self.flat[index * w..(index + 1) * w]
    }

    pub fn unrank(&self, index: usize) -> Configuration {
        Configuration { occupied: self.occupied(index).to_vec() }
    }

    /// Lexicographic rank of a strictly increasing site list; `None` when
    /// the list is not a configuration of this sector.
    pub fn rank(&self, sites: &[usize]) -> Option<usize> {
        let (n, w) = (self.params.sites, self.params.quanta);
        if sites.len() != w || sites.windows(2).any(|p| p[0] >= p[1]) {
            return None;
        }
        if sites.last().is_some_and(|&s| s >= n) {
            return None;
        }
        let mut rank = 0u64;
        let mut next_free = 0usize;
        for (i, &site) in sites.iter().enumerate() {
            for skipped in next_free..site {
                // configurations whose i-th entry is `skipped`
                rank += self.pascal[n - 1 - skipped][w - 1 - i];
            }
            next_free = site + 1;
        }
        Some(rank as usize)
    }

    pub fn rank_configuration(&self, config: &Configuration) -> Option<usize> {
        self.rank(config.sites())
    }
}

/// Sparse Hermitian Hamiltonian on a [`SectorBasis`].
///
/// Rows are stored with columns in increasing order, diagonal separately.
#[derive(Debug, Clone)]
pub struct SectorHamiltonian {
    basis: Arc<SectorBasis>,
    diagonal: Vec<f64>,
    rows: Vec<Vec<(usize, C64)>>,
}

/// Enumerates the sector and assembles its Hamiltonian.
pub fn assemble_hamiltonian(params: &LatticeParams) -> Result<SectorHamiltonian> {
    let basis = Arc::new(SectorBasis::new(params)?);
    Ok(SectorHamiltonian::assemble(basis))
}

/// Fermionic sign of `φ†(to) φ(from)` acting on an occupation pattern in
/// which `from` is occupied and `to` is empty.
fn hop_sign(occupied: &[bool], from: usize, to: usize) -> f64 {
    let below_from = occupied[..from].iter().filter(|&&o| o).count();
    // after removing `from`, count occupied sites below `to`
    let mut below_to = occupied[..to].iter().filter(|&&o| o).count();
    if from < to {
        below_to -= 1;
    }
    if (below_from + below_to) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

impl SectorHamiltonian {
    pub fn assemble(basis: Arc<SectorBasis>) -> Self {
        let params = *basis.params();
        let n = params.sites;
        let hop = C64::new(0.0, 1.0 / (2.0 * params.spacing));
        let dimension = basis.dimension();

        let mut diagonal = Vec::with_capacity(dimension);
        let mut accum: Vec<BTreeMap<usize, C64>> = vec![BTreeMap::new(); dimension];
        let mut occupied = vec![false; n];
        let mut target = Vec::with_capacity(params.quanta);

        for col in 0..dimension {
            let sites = basis.occupied(col);
            occupied.iter_mut().for_each(|o| *o = false);
            sites.iter().for_each(|&s| occupied[s] = true);

            let mut energy: f64 = sites.iter().map(|&s| params.staggered_mass(s)).sum();
            if params.coupling != 0.0 {
                energy += crate::evolution::contact_energy(sites, &params);
            }
            diagonal.push(energy);

            for bond in 0..n {
                let right = (bond + 1) % n;
                // -(i/2δ) φ†(bond) φ(right)  and  +(i/2δ) φ†(right) φ(bond)
                for (from, to, coeff) in [(right, bond, -hop), (bond, right, hop)] {
                    if !occupied[from] || occupied[to] {
                        continue;
                    }
                    let sign = hop_sign(&occupied, from, to);
                    target.clear();
                    target.extend(sites.iter().map(|&s| if s == from { to } else { s }));
                    target.sort_unstable();
                    let row = basis.rank(&target).expect("hop stays inside the sector");
                    *accum[row].entry(col).or_insert(C64::new(0.0, 0.0)) += coeff * sign;
                }
            }
        }

        let rows = accum
            .into_iter()
            .map(|row| row.into_iter().filter(|(_, v)| v.norm() != 0.0).collect())
            .collect();
        Self { basis, diagonal, rows }
    }

    pub fn basis(&self) -> &Arc<SectorBasis> {
        &self.basis
    }

    pub fn params(&self) -> &LatticeParams {
        self.basis.params()
    }

    pub fn dimension(&self) -> usize {
        self.diagonal.len()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    /// Off-diagonal entries `(col, H[row][col])` of one row.
    pub fn row(&self, row: usize) -> &[(usize, C64)] {
        &self.rows[row]
    }

    /// Entry `H[row][col]`.
    pub fn entry(&self, row: usize, col: usize) -> C64 {
        if row == col {
            return C64::new(self.diagonal[row], 0.0);
        }
        self.rows[row]
            .binary_search_by_key(&col, |&(c, _)| c)
            .map(|i| self.rows[row][i].1)
            .unwrap_or_default()
    }

    pub fn apply_into(&self, x: &[C64], out: &mut [C64]) {
        for (row, out) in out.iter_mut().enumerate() {
            let mut acc = x[row] * self.diagonal[row];
            for &(col, value) in &self.rows[row] {
                acc += value * x[col];
            }
            *out = acc;
        }
    }

    pub fn apply(&self, x: &DVector<C64>) -> DVector<C64> {
        let mut out = DVector::zeros(x.len());
        self.apply_into(x.as_slice(), out.as_mut_slice());
        out
    }

    /// `⟨x|H|x⟩` (real part; the imaginary part vanishes by Hermiticity).
    pub fn expectation(&self, x: &DVector<C64>) -> f64 {
        x.dotc(&self.apply(x)).re
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let d = self.dimension();
        let mut m = DMatrix::zeros(d, d);
        for row in 0..d {
            m[(row, row)] = C64::new(self.diagonal[row], 0.0);
            for &(col, value) in &self.rows[row] {
                m[(row, col)] = value;
            }
        }
        m
    }

    /// Gershgorin bound on the spectral radius.
    pub fn spectral_radius_bound(&self) -> f64 {
        (0..self.dimension())
            .map(|r| self.diagonal[r].abs() + self.rows[r].iter().map(|(_, v)| v.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `max |H[r][c] - conj(H[c][r])|`.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for row in 0..self.dimension() {
            for &(col, value) in &self.rows[row] {
                worst = worst.max((value - self.entry(col, row).conj()).norm());
            }
        }
        worst
    }

    /// Largest off-diagonal count of any row.
    pub fn max_row_degree(&self) -> usize {
        self.rows.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// One point of the lattice dispersion relation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DispersionPoint {
    pub p: f64,
    pub p_lat: f64,
    pub e_lat: f64,
}

/// `p_lat = sin(pδ)/δ`, `E_lat = sqrt(p_lat² + m²)`.
pub fn dispersion(p: f64, params: &LatticeParams) -> DispersionPoint {
    let p_lat = (p * params.spacing).sin() / params.spacing;
    DispersionPoint { p, p_lat, e_lat: p_lat.hypot(params.mass) }
}

/// The `N` momenta `πj/(Nδ)`, `j = 0..N`, one from each doubling pair.
pub fn reduced_momenta(params: &LatticeParams) -> Vec<f64> {
    let n = params.half_sites();
    (0..n).map(|j| PI * j as f64 / (n as f64 * params.spacing)).collect()
}

/// Closed-form single-particle spectrum `±E_lat(p)` over the reduced
/// momenta, sorted ascending.
pub fn closed_form_spectrum(params: &LatticeParams) -> Vec<f64> {
    let mut levels: Vec<f64> = reduced_momenta(params)
        .into_iter()
        .flat_map(|p| {
            let e = dispersion(p, params).e_lat;
            [-e, e]
        })
        .collect();
    levels.sort_by(f64::total_cmp);
    levels
}

/// Sorted eigenvalues of a sector Hamiltonian (dense diagonalization).
pub fn spectrum(h: &SectorHamiltonian) -> Vec<f64> {
    let mut values: Vec<f64> = h.to_dense().symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

fn group_levels(values: &[f64], tol: f64) -> Vec<(f64, usize)> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut groups: Vec<(f64, usize)> = Vec::new();
    for v in sorted {
        match groups.last_mut() {
            Some((level, count)) if (v - *level).abs() <= tol => *count += 1,
            _ => groups.push((v, 1)),
        }
    }
    groups
}

/// Single-particle spectrum diagnostics for the doubling problem.
#[derive(Debug, Clone, Serialize)]
pub struct DoublingReport {
    pub eigenvalues: Vec<f64>,
    pub positive_levels: usize,
    pub negative_levels: usize,
    pub zero_levels: usize,
    /// `(|E|, multiplicity)` over the staggered spectrum.
    pub degeneracy: Vec<(f64, usize)>,
    /// `(|E|, multiplicity)` for the naive two-component lattice of the same
    /// size, whose sine dispersion doubles every level.
    pub naive_degeneracy: Vec<(f64, usize)>,
    /// Number of states at the rest energy `|E| = m`.
    pub rest_multiplicity: usize,
    pub naive_rest_multiplicity: usize,
    /// `max |E_numeric - E_closed_form|` after sorting.
    pub closed_form_deviation: f64,
    /// Set when m = 0 and zero modes are present.
    pub massless_degenerate: bool,
}

const LEVEL_TOL: f64 = 1e-9;

/// Diagonalizes the one-quantum staggered Hamiltonian and compares it with
/// the closed-form dispersion and with the naive lattice.
pub fn doubling_report(params: &LatticeParams) -> Result<DoublingReport> {
    let single = LatticeParams { quanta: 1, coupling: 0.0, ..*params };
    let h = assemble_hamiltonian(&single)?;
    let eigenvalues = spectrum(&h);
    let closed = closed_form_spectrum(&single);
    let closed_form_deviation = eigenvalues
        .iter()
        .zip(&closed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let positive_levels = eigenvalues.iter().filter(|&&e| e > LEVEL_TOL).count();
    let negative_levels = eigenvalues.iter().filter(|&&e| e < -LEVEL_TOL).count();
    let zero_levels = eigenvalues.len() - positive_levels - negative_levels;

    let abs: Vec<f64> = eigenvalues.iter().map(|e| e.abs()).collect();
    let degeneracy = group_levels(&abs, LEVEL_TOL);

    // naive lattice: two components on every one of the 2N sites, each
    // momentum p = πj/(Nδ) giving ±E_lat(p)
    let n = single.half_sites();
    let naive: Vec<f64> = (0..single.sites)
        .map(|j| dispersion(PI * j as f64 / (n as f64 * single.spacing), &single).e_lat)
        .flat_map(|e| [e, e])
        .collect();
    let naive_degeneracy = group_levels(&naive, LEVEL_TOL);

    let count_at = |groups: &[(f64, usize)], level: f64| {
        groups
            .iter()
            .filter(|(l, _)| (l - level).abs() <= LEVEL_TOL)
            .map(|(_, c)| *c)
            .sum::<usize>()
    };

    Ok(DoublingReport {
        rest_multiplicity: count_at(&degeneracy, single.mass),
        naive_rest_multiplicity: count_at(&naive_degeneracy, single.mass),
        massless_degenerate: single.mass == 0.0 && zero_levels > 0,
        eigenvalues,
        positive_levels,
        negative_levels,
        zero_levels,
        degeneracy,
        naive_degeneracy,
        closed_form_deviation,
    })
}

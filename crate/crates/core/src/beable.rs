//! Bell's stochastic law for the beable.
//!
//! For source configuration `n` and neighbour `m` the transition current is
//! `J_mn = 2 Re[Ψ*_m (-iH)_mn Ψ_n]` and the jump rate `T_mn = max(J_mn, 0) / |Ψ_n|²`.
//! Trajectories are sampled with fixed substeps: one uniform draw per step,
//! a jump to target `m` with probability `T_mn dt`. The master equation
//! with the same rates is integrated deterministically as an oracle for
//! equivariance.

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::evolution::{PilotSource, PilotTimeline};
use crate::lattice::{SectorBasis, SectorHamiltonian};
use crate::C64;

/// Source probability below which rates are undefined.
pub const PROBABILITY_FLOOR: f64 = 1e-12;
/// Bound on `R·dt` for the Bernoulli sampler.
pub const RATE_STEP_BOUND: f64 = 0.1;
/// Master-equation substeps keep `dt·R_max` below this.
pub const MASTER_STEP_TARGET: f64 = 0.5;
/// Largest number of master-equation substeps per step.
pub const MAX_MASTER_SUBSTEPS: usize = 1024;

/// `(target, J_target,source)` for every configuration reachable by one hop.
///
/// `(-iH)_mn` is read from row `n` through Hermiticity, so the targets come
/// out in increasing rank order.
pub fn transition_currents(psi: &DVector<C64>, source: usize, h: &SectorHamiltonian) -> Vec<(usize, f64)> {
    let psi_n = psi[source];
    h.row(source)
        .iter()
        .map(|&(target, h_nm)| {
            let minus_i_h_mn = C64::new(0.0, -1.0) * h_nm.conj();
            (target, 2.0 * (psi[target].conj() * minus_i_h_mn * psi_n).re)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEntry {
    pub target: usize,
    pub current: f64,
    pub rate: f64,
}

/// Bell rates out of one source configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpRateTable {
    pub source: usize,
    pub probability: f64,
    pub entries: Vec<RateEntry>,
    pub total: f64,
}

/// `T = max(J, 0) / |Ψ_source|²`.
pub fn jump_rates(currents: &[(usize, f64)], psi: &DVector<C64>, source: usize) -> Result<JumpRateTable> {
    let probability = psi[source].norm_sqr();
    if probability <= PROBABILITY_FLOOR {
        return Err(Error::SourceProbabilityUnderflow { config: source, probability, floor: PROBABILITY_FLOOR });
    }
    let entries: Vec<RateEntry> = currents
        .iter()
        .map(|&(target, current)| RateEntry { target, current, rate: current.max(0.0) / probability })
        .collect();
    let total = entries.iter().map(|e| e.rate).sum();
    Ok(JumpRateTable { source, probability, entries, total })
}

pub fn rate_table(psi: &DVector<C64>, source: usize, h: &SectorHamiltonian) -> Result<JumpRateTable> {
    jump_rates(&transition_currents(psi, source, h), psi, source)
}

/// One executed jump, during substep `step` (from `t_step` to `t_step + dt`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Jump {
    pub step: usize,
    pub from: usize,
    pub to: usize,
}

/// A sampled beable history on the substep grid `t0 + i·dt`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub seed: u64,
    pub stream: u64,
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
    pub initial: usize,
    pub jumps: Vec<Jump>,
}

impl Trajectory {
    pub fn final_configuration(&self) -> usize {
        self.jumps.last().map_or(self.initial, |j| j.to)
    }

    /// Configuration at the grid time `t0 + step·dt`.
    pub fn configuration_at(&self, step: usize) -> usize {
        self.jumps.iter().take_while(|j| j.step < step).last().map_or(self.initial, |j| j.to)
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }

    /// `(time, configuration, jumped)` on every grid point, where `jumped`
    /// marks a jump during the preceding substep.
    pub fn samples(&self) -> Vec<(f64, usize, bool)> {
        let mut out = Vec::with_capacity(self.steps + 1);
        let mut current = self.initial;
        let mut jumps = self.jumps.iter().peekable();
        out.push((self.t0, current, false));
        for step in 0..self.steps {
            let mut jumped = false;
            if let Some(j) = jumps.next_if(|j| j.step == step) {
                current = j.to;
                jumped = true;
            }
            out.push((self.time(step + 1), current, jumped));
        }
        out
    }
}

/// Per-trajectory generator: the master seed with the trajectory index as
/// stream, so every trajectory is reproducible on its own.
pub fn trajectory_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples one trajectory over every substep of `timeline`.
///
/// Rates for substep `i` are evaluated with the pilot state at its start.
pub fn simulate_trajectory<R: Rng>(
    initial: usize,
    h: &SectorHamiltonian,
    timeline: &PilotTimeline,
    rng: &mut R,
) -> Result<Vec<Jump>> {
    let dt = timeline.dt();
    let mut current = initial;
    let mut jumps = Vec::new();
    for step in 0..timeline.steps() {
        let psi = timeline.state(step);
        let table = rate_table(psi, current, h)?;
        let product = table.total * dt;
        if product > RATE_STEP_BOUND {
            return Err(Error::RateStepOverflow { time: timeline.time(step), product, bound: RATE_STEP_BOUND });
        }
        let u: f64 = rng.random();
        if u >= product {
            continue;
        }
        let mut cumulative = 0.0;
        for e in &table.entries {
            cumulative += e.rate * dt;
            if u < cumulative {
                jumps.push(Jump { step, from: current, to: e.target });
                current = e.target;
                break;
            }
        }
    }
    Ok(jumps)
}

/// Starting point of ensemble members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialCondition {
    /// Drawn from `|Ψ(t0)|²` with the trajectory's own generator.
    Equilibrium,
    Fixed(usize),
}

/// Runs `count` independent trajectories in parallel; member `i` uses
/// stream `i` of `seed`.
pub fn run_ensemble(
    h: &SectorHamiltonian,
    timeline: &PilotTimeline,
    count: usize,
    seed: u64,
    initial: InitialCondition,
) -> Result<Vec<Trajectory>> {
    let sampler = match initial {
        InitialCondition::Equilibrium => Some(
            WeightedIndex::new(timeline.probabilities(0))
                .map_err(|e| invalid("initial", format!("cannot sample |Ψ0|²: {e}")))?,
        ),
        InitialCondition::Fixed(c) if c >= h.dimension() => {
            return Err(invalid("initial", format!("configuration #{c} outside a basis of {}", h.dimension())))
        }
        InitialCondition::Fixed(_) => None,
    };
    (0..count as u64)
        .into_par_iter()
        .map(|stream| {
            let mut rng = trajectory_rng(seed, stream);
            let start = match (&sampler, initial) {
                (Some(s), _) => s.sample(&mut rng),
                (None, InitialCondition::Fixed(c)) => c,
                (None, InitialCondition::Equilibrium) => unreachable!(),
            };
            let jumps = simulate_trajectory(start, h, timeline, &mut rng)?;
            Ok(Trajectory {
                seed,
                stream,
                t0: timeline.time(0),
                dt: timeline.dt(),
                steps: timeline.steps(),
                initial: start,
                jumps,
            })
        })
        .collect()
}

/// Probability vectors at recorded times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbabilityTimeline {
    pub times: Vec<f64>,
    pub probabilities: Vec<Vec<f64>>,
    /// Largest `|Σ P - 1|` over the recorded frames.
    pub normalization_defect: f64,
    /// Total number of RK4 substeps taken.
    pub substeps: usize,
}

/// Right-hand side `dP_m/dt = Σ_n (T_mn P_n - T_nm P_m)`; returns `R_max`.
fn master_rhs(h: &SectorHamiltonian, psi: &DVector<C64>, p: &[f64], out: &mut [f64]) -> f64 {
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut rate_max: f64 = 0.0;
    for n in 0..p.len() {
        let prob = psi[n].norm_sqr();
        if prob <= PROBABILITY_FLOOR {
            continue;
        }
        let mut total = 0.0;
        for (m, j) in transition_currents(psi, n, h) {
            if j > 0.0 {
                let rate = j / prob;
                total += rate;
                out[m] += rate * p[n];
                out[n] -= rate * p[n];
            }
        }
        rate_max = rate_max.max(total);
    }
    rate_max
}

/// RK4 integration of the master equation with rates recomputed from the
/// pilot at `t`, `t + dt/2` and `t + dt`.
///
/// A step whose rates make `dt·R_max` exceed [`MASTER_STEP_TARGET`] is split
/// into equal substeps (at most [`MAX_MASTER_SUBSTEPS`]). Frames are
/// recorded every `record_every` steps and at the end.
pub fn master_equation_evolve(
    p0: &[f64],
    h: &SectorHamiltonian,
    pilot: &dyn PilotSource,
    t0: f64,
    t_final: f64,
    dt: f64,
    record_every: usize,
) -> Result<ProbabilityTimeline> {
    let dim = h.dimension();
    if p0.len() != dim || pilot.dimension() != dim {
        return Err(invalid("p0", format!("expected {dim} entries, got {}", p0.len())));
    }
    if p0.iter().any(|&x| !(x >= 0.0)) || (p0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid("p0", "must be a probability vector"));
    }
    if !(dt > 0.0 && t_final >= t0) {
        return Err(invalid("dt", "need dt > 0 and t_final >= t0"));
    }
    let steps = ((t_final - t0) / dt).round() as usize;
    let record_every = record_every.max(1);

    let mut p = p0.to_vec();
    let mut k = vec![vec![0.0; dim]; 4];
    let mut tmp = vec![0.0; dim];
    let mut times = vec![t0];
    let mut frames = vec![p.clone()];
    let mut substeps_total = 0;

    for step in 0..steps {
        let t = t0 + step as f64 * dt;
        let psi = pilot.state_at(t)?;
        let rate_max = master_rhs(h, &psi, &p, &mut k[0]);
        let substeps = ((dt * rate_max / MASTER_STEP_TARGET).ceil() as usize).max(1);
        if substeps > MAX_MASTER_SUBSTEPS {
            return Err(Error::StepTooLarge { product: dt * rate_max, bound: MASTER_STEP_TARGET * MAX_MASTER_SUBSTEPS as f64 });
        }
        let h_sub = dt / substeps as f64;
        for sub in 0..substeps {
            let ts = t + sub as f64 * h_sub;
            let psi0 = if sub == 0 { psi.clone() } else { pilot.state_at(ts)? };
            let psi_mid = pilot.state_at(ts + 0.5 * h_sub)?;
            let psi_end = pilot.state_at(ts + h_sub)?;
            master_rhs(h, &psi0, &p, &mut k[0]);
            for (i, v) in tmp.iter_mut().enumerate() {
                *v = p[i] + 0.5 * h_sub * k[0][i];
            }
            master_rhs(h, &psi_mid, &tmp, &mut k[1]);
            for (i, v) in tmp.iter_mut().enumerate() {
                *v = p[i] + 0.5 * h_sub * k[1][i];
            }
            master_rhs(h, &psi_mid, &tmp, &mut k[2]);
            for (i, v) in tmp.iter_mut().enumerate() {
                *v = p[i] + h_sub * k[2][i];
            }
            master_rhs(h, &psi_end, &tmp, &mut k[3]);
            for i in 0..dim {
                p[i] += h_sub / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
        }
        substeps_total += substeps;
        if (step + 1) % record_every == 0 || step + 1 == steps {
            times.push(t + dt);
            frames.push(p.clone());
        }
    }
    let normalization_defect =
        frames.iter().map(|f| (f.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    Ok(ProbabilityTimeline { times, probabilities: frames, normalization_defect, substeps: substeps_total })
}

/// Largest `|P_m(t) - |Ψ_m(t)|²|` over all recorded frames.
pub fn equivariance_residual(timeline: &ProbabilityTimeline, pilot: &dyn PilotSource) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (t, p) in timeline.times.iter().zip(&timeline.probabilities) {
        let psi = pilot.state_at(*t)?;
        for (pm, a) in p.iter().zip(psi.iter()) {
            worst = worst.max((pm - a.norm_sqr()).abs());
        }
    }
    Ok(worst)
}

/// `½ Σ |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Sampling-noise scale of the TV distance: `3 sqrt(dim / (2 n))`.
pub fn tv_noise_bound(dimension: usize, samples: usize) -> f64 {
    3.0 * (dimension as f64 / (2.0 * samples as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointStats {
    pub step: usize,
    pub time: f64,
    pub tv_distance: f64,
    pub noise_bound: f64,
    /// `(count - n p) / sqrt(n p (1 - p))` per configuration; configurations
    /// with `p ∈ {0, 1}` carry 0 when the count matches and ±∞ otherwise.
    pub z_scores: Vec<f64>,
    /// Share of configurations with `|z| > 3.5`.
    pub z_exceed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivarianceReport {
    pub trajectories: usize,
    pub checkpoints: Vec<CheckpointStats>,
}

pub const Z_THRESHOLD: f64 = 3.5;

/// Compares the ensemble histogram with `|Ψ(t)|²` at the given substep
/// indices of the timeline.
pub fn equivariance_statistics(
    trajectories: &[Trajectory],
    timeline: &PilotTimeline,
    checkpoints: &[usize],
) -> Result<EquivarianceReport> {
    let n = trajectories.len();
    if n == 0 {
        return Err(invalid("trajectories", "ensemble is empty"));
    }
    let dim = timeline.state(0).len();
    let mut stats = Vec::with_capacity(checkpoints.len());
    for &step in checkpoints {
        if step > timeline.steps() {
            return Err(invalid("checkpoints", format!("step {step} beyond the timeline ({})", timeline.steps())));
        }
        let mut counts = vec![0usize; dim];
        for t in trajectories {
            counts[t.configuration_at(step)] += 1;
        }
        let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let expected = timeline.probabilities(step);
        let z_scores: Vec<f64> = counts
            .iter()
            .zip(&expected)
            .map(|(&c, &p)| {
                let mean = n as f64 * p;
                let var = mean * (1.0 - p);
                if var > 0.0 {
                    (c as f64 - mean) / var.sqrt()
                } else if (c as f64 - mean).abs() < 0.5 {
                    0.0
                } else {
                    f64::INFINITY.copysign(c as f64 - mean)
                }
            })
            .collect();
        let z_exceed_fraction = z_scores.iter().filter(|z| z.abs() > Z_THRESHOLD).count() as f64 / dim as f64;
        stats.push(CheckpointStats {
            step,
            time: timeline.time(step),
            tv_distance: total_variation(&empirical, &expected),
            noise_bound: tv_noise_bound(dim, n),
            z_scores,
            z_exceed_fraction,
        });
    }
    Ok(EquivarianceReport { trajectories: n, checkpoints: stats })
}

/// Sorted occupied sites of a ranked configuration; convenience for output.
pub fn sites_of(basis: &SectorBasis, index: usize) -> Vec<usize> {
    basis.occupied(index).to_vec()
}

/// Which quantum moved in a jump and by how much (`±1`, periodic).
pub fn jump_displacement(basis: &SectorBasis, jump: &Jump) -> Option<(usize, i64)> {
    let sites = basis.params().sites;
    let from = basis.occupied(jump.from);
    let to = basis.occupied(jump.to);
    let left: Vec<usize> = from.iter().copied().filter(|s| !to.contains(s)).collect();
    let arrived: Vec<usize> = to.iter().copied().filter(|s| !from.contains(s)).collect();
    match (left.as_slice(), arrived.as_slice()) {
        ([a], [b]) if (a + 1) % sites == *b => Some((*a, 1)),
        ([a], [b]) if (b + 1) % sites == *a => Some((*a, -1)),
        _ => None,
    }
}

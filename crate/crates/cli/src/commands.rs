//! One function per subcommand. Each validates its inputs, computes, writes
//! its CSVs and returns the physics checks plus scalar metrics.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use bell_core::beable::{
    equivariance_residual, equivariance_statistics, jump_displacement, master_equation_evolve, run_ensemble,
    sites_of, InitialCondition,
};
use bell_core::continuum::{convergence_study, gaussian_orbital, lattice_velocity, nonlocality_analysis};
use bell_core::evolution::{
    build_initial_packet, plane_wave, Method, PacketSpec, PilotTimeline, Propagator, SpectralPilot,
    StateVector,
};
use bell_core::fock::{smeared_density_commutator, ModeSet};
use bell_core::lattice::{
    assemble_hamiltonian, closed_form_spectrum, doubling_report, spectrum, LatticeParams, SectorHamiltonian,
};

use crate::config::{InitialDistribution, RunConfig};
use crate::output::{float, int, text, Cell, Check, OutputDir};
use crate::{row, RunError};

pub type Outcome = (Vec<Check>, BTreeMap<String, f64>);

/// Tags a core error with the stage that raised it; parameter problems
/// become configuration errors.
fn at(stage: &'static str) -> impl Fn(bell_core::Error) -> RunError {
    move |e| match e {
        bell_core::Error::InvalidParameter { .. } | bell_core::Error::InvalidConfiguration { .. } => {
            RunError::Config(format!("{stage}: {e}"))
        }
        other => RunError::Compute { stage, message: other.to_string() },
    }
}

fn missing(section: &str) -> RunError {
    RunError::Config(format!("missing section `{section}`"))
}

fn lattice(cfg: &RunConfig) -> Result<LatticeParams, RunError> {
    let p = cfg.lattice.ok_or_else(|| missing("lattice"))?;
    p.validate().map_err(at("lattice"))?;
    Ok(p)
}

fn positive(name: &str, v: Option<f64>) -> Result<f64, RunError> {
    match v {
        Some(x) if x.is_finite() && x > 0.0 => Ok(x),
        Some(x) => Err(RunError::Config(format!("`{name}` must be finite and > 0, got {x}"))),
        None => Err(missing(name)),
    }
}

fn count(name: &str, v: Option<usize>) -> Result<usize, RunError> {
    match v {
        Some(0) => Err(RunError::Config(format!("`{name}` must be positive"))),
        Some(n) => Ok(n),
        None => Err(missing(name)),
    }
}

/// Validated lattice, packet and propagator for the evolution-based
/// subcommands.
struct Setup {
    h: Arc<SectorHamiltonian>,
    psi: StateVector,
    prop: Propagator,
}

fn setup(cfg: &RunConfig) -> Result<Setup, RunError> {
    let params = lattice(cfg)?;
    let packet: &PacketSpec = cfg.packet.as_ref().ok_or_else(|| missing("packet"))?;
    packet.validate(&params).map_err(at("packet"))?;
    let evolution = cfg.evolution.unwrap_or_default();
    evolution.validate().map_err(at("evolution"))?;
    let h = Arc::new(assemble_hamiltonian(&params).map_err(at("hamiltonian"))?);
    let psi = build_initial_packet(h.basis(), packet).map_err(at("packet"))?;
    let prop = Propagator::new(h.clone(), evolution).map_err(at("propagator"))?;
    Ok(Setup { h, psi, prop })
}

fn sites_label(h: &SectorHamiltonian, index: usize) -> String {
    sites_of(h.basis(), index).iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
}

pub fn spectrum_cmd(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, RunError> {
    let params = lattice(cfg)?;
    let h = assemble_hamiltonian(&params).map_err(at("hamiltonian"))?;
    let energies = spectrum(&h);
    let mut checks = Vec::new();
    let mut metrics = BTreeMap::new();
    metrics.insert("dimension".into(), energies.len() as f64);
    if params.quanta == 1 && params.coupling == 0.0 {
        let closed = closed_form_spectrum(&params);
        let rows: Vec<Vec<Cell>> = energies
            .iter()
            .zip(&closed)
            .enumerate()
            .map(|(i, (e, c))| row![i, *e, *c, (e - c).abs()])
            .collect();
        let worst = energies.iter().zip(&closed).map(|(e, c)| (e - c).abs()).fold(0.0, f64::max);
        out.write_csv(
            "spectrum.csv",
            vec![
                int("index", "level index, ascending energy"),
                float("energy", "eigenvalue of the sector Hamiltonian"),
                float("closed_form", "±sqrt(sin²(pδ)/δ² + m²) over the reduced momenta, sorted"),
                float("abs_error", "|energy - closed_form|"),
            ],
            rows,
        )?;
        checks.push(Check::at_most("closed-form dispersion", worst, 1e-10));
    } else {
        let rows = energies.iter().enumerate().map(|(i, e)| row![i, *e]).collect();
        out.write_csv(
            "spectrum.csv",
            vec![int("index", "level index, ascending energy"), float("energy", "eigenvalue of the sector Hamiltonian")],
            rows,
        )?;
    }
    Ok((checks, metrics))
}

pub fn doubling_cmd(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, RunError> {
    let params = lattice(cfg)?;
    let r = doubling_report(&params).map_err(at("doubling"))?;
    let mut levels: BTreeMap<u64, (f64, usize, usize)> = BTreeMap::new();
    // key on a rounded level so both lists merge onto shared rows
    let key = |e: f64| (e * 1e8).round() as u64;
    for &(e, n) in &r.degeneracy {
        levels.entry(key(e)).or_insert((e, 0, 0)).1 += n;
    }
    for &(e, n) in &r.naive_degeneracy {
        levels.entry(key(e)).or_insert((e, 0, 0)).2 += n;
    }
    let rows = levels.values().map(|&(e, s, n)| row![e, s, n]).collect();
    out.write_csv(
        "doubling.csv",
        vec![
            float("abs_energy", "|E| of the level"),
            int("staggered_multiplicity", "states at |E| on the staggered lattice"),
            int("naive_multiplicity", "states at |E| on the naive lattice of the same size"),
        ],
        rows,
    )?;
    let n = params.half_sites();
    let mut checks = vec![Check::at_most("closed-form dispersion", r.closed_form_deviation, 1e-10)];
    if params.mass > 0.0 {
        checks.push(Check::flag("N positive and N negative levels", r.positive_levels == n && r.negative_levels == n));
    }
    let metrics = BTreeMap::from([
        ("positive_levels".into(), r.positive_levels as f64),
        ("negative_levels".into(), r.negative_levels as f64),
        ("zero_levels".into(), r.zero_levels as f64),
        ("rest_multiplicity".into(), r.rest_multiplicity as f64),
        ("naive_rest_multiplicity".into(), r.naive_rest_multiplicity as f64),
    ]);
    Ok((checks, metrics))
}

pub fn evolve_cmd(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, RunError> {
    let horizon = positive("horizon", cfg.horizon)?;
    let frames = count("frames", cfg.frames)?;
    let Setup { h, psi, prop } = setup(cfg)?;
    let step = horizon / frames as f64;
    let (e0, n0) = (h.expectation(&psi.amplitudes), psi.norm());
    let mut state = psi.clone();
    let mut summary = Vec::with_capacity(frames + 1);
    let mut probabilities = Vec::new();
    let (mut norm_drift, mut energy_drift): (f64, f64) = (0.0, 0.0);
    for i in 0..=frames {
        if i > 0 {
            state = prop.evolve(&state, step).map_err(at("evolve"))?;
        }
        let (norm, energy) = (state.norm(), h.expectation(&state.amplitudes));
        norm_drift = norm_drift.max((norm - n0).abs());
        energy_drift = energy_drift.max((energy - e0).abs());
        summary.push(row![state.time, norm, energy, (norm - n0).abs(), (energy - e0).abs()]);
        for (c, p) in state.probabilities().into_iter().enumerate() {
            probabilities.push(row![state.time, c, sites_label(&h, c), p]);
        }
    }
    out.write_csv(
        "evolve.csv",
        vec![
            float("time", "evolution time"),
            float("norm", "‖Ψ(t)‖"),
            float("energy", "⟨Ψ(t)|H|Ψ(t)⟩"),
            float("norm_drift", "|‖Ψ(t)‖ - ‖Ψ(0)‖|"),
            float("energy_drift", "|E(t) - E(0)|"),
        ],
        summary,
    )?;
    out.write_csv(
        "probabilities.csv",
        vec![
            float("time", "evolution time"),
            int("configuration", "rank of the configuration in the sector basis"),
            text("sites", "occupied sites, ';'-separated"),
            float("probability", "|Ψ_m(t)|²"),
        ],
        probabilities,
    )?;
    let method = prop.method();
    let metrics = BTreeMap::from([
        ("dimension".into(), h.dimension() as f64),
        ("rk4".into(), if method == Method::Rk4 { 1.0 } else { 0.0 }),
    ]);
    Ok((vec![Check::at_most("norm drift", norm_drift, 1e-10), Check::at_most("energy drift", energy_drift, 1e-8)], metrics))
}

fn timeline(cfg: &RunConfig, s: &Setup, horizon: f64) -> Result<PilotTimeline, RunError> {
    let dt = positive("dt", cfg.dt)?;
    let steps = (horizon / dt).round().max(1.0) as usize;
    PilotTimeline::build(&s.prop, &s.psi, dt, steps).map_err(at("pilot timeline"))
}

pub fn trajectories_cmd(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, RunError> {
    let horizon = positive("horizon", cfg.horizon)?;
    let n = count("trajectories", cfg.trajectories)?;
    let seed = cfg.seed.ok_or_else(|| missing("seed"))?;
    let s = setup(cfg)?;
    let line = timeline(cfg, &s, horizon)?;
    let ensemble = run_ensemble(&s.h, &line, n, seed, InitialCondition::Equilibrium).map_err(at("trajectories"))?;
    let mut jumps = Vec::new();
    let mut finals = Vec::with_capacity(n);
    let mut local = true;
    for (i, t) in ensemble.iter().enumerate() {
        for j in &t.jumps {
            local &= jump_displacement(s.h.basis(), j).is_some();
            jumps.push(row![i, j.step, t.time(j.step + 1), j.from, j.to, sites_label(&s.h, j.to)]);
        }
        let last = t.final_configuration();
        finals.push(row![i, t.initial, sites_label(&s.h, t.initial), last, sites_label(&s.h, last), t.jumps.len()]);
    }
    out.write_csv(
        "jumps.csv",
        vec![
            int("trajectory", "ensemble member (random stream index)"),
            int("step", "substep in which the jump happened"),
            float("time", "end of that substep"),
            int("from", "configuration rank before the jump"),
            int("to", "configuration rank after the jump"),
            text("sites", "occupied sites after the jump, ';'-separated"),
        ],
        jumps,
    )?;
    out.write_csv(
        "trajectories.csv",
        vec![
            int("trajectory", "ensemble member (random stream index)"),
            int("initial", "starting configuration rank, drawn from |Ψ(0)|²"),
            text("initial_sites", "starting occupied sites"),
            int("final", "configuration rank at the horizon"),
            text("final_sites", "occupied sites at the horizon"),
            int("jumps", "number of jumps"),
        ],
        finals,
    )?;
    let total: usize = ensemble.iter().map(|t| t.jumps.len()).sum();
    let metrics = BTreeMap::from([("mean_jumps".into(), total as f64 / n as f64), ("steps".into(), line.steps() as f64)]);
    Ok((vec![Check::flag("jumps move one quantum by one site", local)], metrics))
}

pub fn equivariance_cmd(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, RunError> {
    let n = count("trajectories", cfg.trajectories)?;
    let seed = cfg.seed.ok_or_else(|| missing("seed"))?;
    let dt = positive("dt", cfg.dt)?;
    let times = cfg.checkpoints.clone().ok_or_else(|| missing("checkpoints"))?;
    if times.is_empty() || times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(RunError::Config("`checkpoints` must be a non-empty list of times >= 0".into()));
    }
    let horizon = times.iter().copied().fold(cfg.horizon.unwrap_or(0.0), f64::max);
    let s = setup(cfg)?;
    let line = timeline(cfg, &s, horizon.max(dt))?;
    let steps: Vec<usize> = times.iter().map(|t| (t / dt).round() as usize).collect();
    let ensemble = run_ensemble(&s.h, &line, n, seed, InitialCondition::Equilibrium).map_err(at("equivariance"))?;
    let report = equivariance_statistics(&ensemble, &line, &steps).map_err(at("equivariance"))?;
    let mut summary = Vec::new();
    let mut histogram = Vec::new();
    let mut checks = Vec::new();
    for c in &report.checkpoints {
        summary.push(row![c.time, c.tv_distance, c.noise_bound, c.z_exceed_fraction]);
        let expected = line.probabilities(c.step);
        let mut counts = vec![0usize; expected.len()];
        for t in &ensemble {
            counts[t.configuration_at(c.step)] += 1;
        }
        for (m, (&k, p)) in counts.iter().zip(expected).enumerate() {
            histogram.push(row![c.time, m, sites_label(&s.h, m), k as f64 / n as f64, p, c.z_scores[m]]);
        }
        checks.push(Check::at_most(&format!("total variation at t={}", c.time), c.tv_distance, c.noise_bound));
    }
    out.write_csv(
        "equivariance.csv",
        vec![
            float("time", "checkpoint time"),
            float("tv_distance", "½Σ|empirical - |Ψ|²|"),
            float("noise_bound", "3 sqrt(dim / 2n), the multinomial noise scale"),
            float("z_exceed_fraction", "share of configurations with |z| > 3.5"),
        ],
        summary,
    )?;
    out.write_csv(
        "histogram.csv",
        vec![
            float("time", "checkpoint time"),
            int("configuration", "configuration rank"),
            text("sites", "occupied sites, ';'-separated"),
            float("empirical", "fraction of trajectories in the configuration"),
            float("probability", "|Ψ_m(t)|²"),
            float("z_score", "(count - np)/sqrt(np(1-p))"),
        ],
        histogram,
    )?;
    let metrics = BTreeMap::from([("trajectories".into(), n as f64), ("dimension".into(), s.h.dimension() as f64)]);
    Ok((checks, metrics))
}

pub fn master_equation_cmd(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, RunError> {
    let horizon = positive("horizon", cfg.horizon)?;
    let dt = positive("dt", cfg.dt)?;
    let record = count("frames", cfg.frames)?;
    let s = setup(cfg)?;
    let spectral = s.prop.spectral().ok_or_else(|| {
        RunError::Config("master-equation needs a pilot at arbitrary times: set evolution.method to eigendecomposition".into())
    })?;
    let pilot = SpectralPilot::new(spectral.clone(), &s.psi);
    let initial = cfg.initial.unwrap_or(InitialDistribution::Equilibrium);
    let p0 = match initial {
        InitialDistribution::Equilibrium => s.psi.probabilities(),
        InitialDistribution::Uniform => vec![1.0 / s.h.dimension() as f64; s.h.dimension()],
    };
    let line = master_equation_evolve(&p0, &s.h, &pilot, 0.0, horizon, dt, record).map_err(at("master equation"))?;
    let mut rows = Vec::new();
    let mut probs = Vec::new();
    for (t, p) in line.times.iter().zip(&line.probabilities) {
        let psi = pilot.state(*t).probabilities();
        let residual = p.iter().zip(&psi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let tv = 0.5 * p.iter().zip(&psi).map(|(a, b)| (a - b).abs()).sum::<f64>();
        rows.push(row![*t, residual, tv, p.iter().sum::<f64>() - 1.0]);
        for (m, (a, b)) in p.iter().zip(&psi).enumerate() {
            probs.push(row![*t, m, *a, *b]);
        }
    }
    out.write_csv(
        "master_equation.csv",
        vec![
            float("time", "recorded time"),
            float("residual", "max_m |P_m - |Ψ_m|²|"),
            float("tv_distance", "½Σ|P - |Ψ|²|"),
            float("normalization_defect", "ΣP - 1"),
        ],
        rows,
    )?;
    out.write_csv(
        "master_probabilities.csv",
        vec![
            float("time", "recorded time"),
            int("configuration", "configuration rank"),
            float("p", "master-equation probability P_m"),
            float("psi_squared", "|Ψ_m(t)|²"),
        ],
        probs,
    )?;
    let residual = equivariance_residual(&line, &pilot).map_err(at("master equation"))?;
    let metrics = BTreeMap::from([
        ("residual".into(), residual),
        ("substeps".into(), line.substeps as f64),
        ("normalization_defect".into(), line.normalization_defect),
    ]);
    // a quenched start is a diagnostic with no convergence claim
    let checks = match initial {
        InitialDistribution::Equilibrium => vec![Check::at_most("equivariance residual", residual, 1e-6)],
        InitialDistribution::Uniform => vec![Check::at_most("normalization", line.normalization_defect, 1e-9)],
    };
    Ok((checks, metrics))
}

pub fn convergence_cmd(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, RunError> {
    let conv = cfg.convergence.as_ref().ok_or_else(|| missing("convergence"))?;
    conv.validate().map_err(at("convergence"))?;
    let r = convergence_study(conv).map_err(at("convergence"))?;
    out.write_csv(
        "convergence.csv",
        vec![
            int("two_n", "number of sites 2N"),
            float("delta", "lattice spacing"),
            float("mean_error", "mean |X_jump(T) - X_guidance(T)| (minimal image)"),
            float("backward_fraction", "backward jumps / all jumps"),
            int("trials", "trajectories at this resolution"),
            int("seed", "master seed"),
        ],
        r.results.iter().map(|x| row![x.two_n, x.delta, x.mean_error, x.backward_fraction, x.trials, x.seed]).collect(),
    )?;
    out.write_csv(
        "convergence_jumps.csv",
        vec![
            int("two_n", "number of sites 2N"),
            int("backward_jumps", "jumps against the sign of the continuum velocity"),
            int("total_jumps", "all jumps"),
            float("backward_per_trial", "backward jumps per trajectory"),
        ],
        r.results.iter().map(|x| row![x.two_n, x.backward_jumps, x.total_jumps, x.backward_per_trial]).collect(),
    )?;
    let mut checks = Vec::new();
    let mut metrics = BTreeMap::new();
    if r.results.len() >= 2 {
        checks.push(Check::flag("mean error strictly decreasing", r.error_decreasing));
        checks.push(Check::flag("backward fraction ratios in [0.3, 0.7]", r.backward_in_band));
        for (i, ratio) in r.backward_ratios.iter().enumerate() {
            metrics.insert(format!("backward_ratio_{i}"), *ratio);
        }
    }
    Ok((checks, metrics))
}

pub fn nonlocality_cmd(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, RunError> {
    let c = cfg.nonlocality.as_ref().ok_or_else(|| missing("nonlocality"))?;
    if c.cells < 2 || !(c.cell_width > 0.0) || !(c.mass >= 0.0) {
        return Err(RunError::Config("nonlocality: need cells >= 2, cell_width > 0, mass >= 0".into()));
    }
    let chi = gaussian_orbital(c.cells, c.cell_width, &c.chi, c.mass);
    let phi = gaussian_orbital(c.cells, c.cell_width, &c.phi, c.mass);
    let region = c.region.map(|[a, b]| (a[0]..a[1], b[0]..b[1]));
    let r = nonlocality_analysis(&chi, &phi, region).map_err(at("nonlocality"))?;
    let mut rows = Vec::new();
    for (a, &c1) in r.x1_cells.iter().enumerate() {
        for (b, &c2) in r.x2_cells.iter().enumerate() {
            let (x1, x2) = (c1 as f64 * c.cell_width, c2 as f64 * c.cell_width);
            rows.push(row!["grid", x1, x2, r.current[(a, b)], r.density[(a, b)], "", ""]);
        }
    }
    rows.push(row!["summary", "", "", "", "", r.sigma_ratio, r.velocity_spread]);
    out.write_csv(
        "nonlocality.csv",
        vec![
            text("kind", "'grid' for J₁ samples, 'summary' for the final row"),
            float("x1", "position of quantum 1 (empty on the summary row)"),
            float("x2", "position of quantum 2 (empty on the summary row)"),
            float("j1", "J₁(x1, x2)"),
            float("density", "ρ(x1, x2)"),
            float("sigma_ratio", "σ₂/σ₁ of the J₁ matrix (summary row only)"),
            float("velocity_spread", "spread of J₁/ρ over x2 at x1* (summary row only)"),
        ],
        rows,
    )?;
    let metrics = BTreeMap::from([
        ("sigma_ratio".into(), r.sigma_ratio),
        ("velocity_spread".into(), r.velocity_spread),
        ("x1_star".into(), r.x1_star as f64 * c.cell_width),
    ]);
    Ok((vec![Check::at_most("four-term expansion of J₁", r.four_term_deviation, 1e-10)], metrics))
}

pub fn commutator_cmd(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, RunError> {
    let c = cfg.commutator.as_ref().ok_or_else(|| missing("commutator"))?;
    if c.samples == 0 || !(c.momentum_spacing > 0.0) {
        return Err(RunError::Config("commutator: need samples > 0 and momentum_spacing > 0".into()));
    }
    let modes = ModeSet::from_momenta(&c.electron_momenta, &c.positron_momenta, c.mass, c.momentum_spacing)
        .map_err(at("commutator"))?;
    let dx = 2.0 * PI / (c.samples as f64 * c.momentum_spacing);
    let f: Vec<f64> = (0..c.samples).map(|j| c.smearing.sample(j as f64 * dx)).collect();
    let r = smeared_density_commutator(&f, dx, &modes, c.p0).map_err(at("commutator"))?;
    let mismatch = (r.pair_element - r.closed_form).norm();
    let norm = r.commutator.max_norm();
    out.write_csv(
        "commutator.csv",
        vec![
            float("p0", "pair momentum"),
            float("pair_re", "Re ⟨0|[S,N] d†c†|0⟩ from the Fock matrices"),
            float("pair_im", "Im of the same element"),
            float("closed_re", "Re of the closed-form pair-creation element"),
            float("closed_im", "Im of the closed-form element"),
            float("abs_error", "|matrix - closed form|"),
            float("commutator_max_norm", "largest entry of [S, N]"),
        ],
        vec![row![
            c.p0,
            r.pair_element.re,
            r.pair_element.im,
            r.closed_form.re,
            r.closed_form.im,
            mismatch,
            norm
        ]],
    )?;
    let metrics = BTreeMap::from([("pair_element_abs".into(), r.pair_element.norm()), ("commutator_max_norm".into(), norm)]);
    Ok((vec![Check::at_most("closed-form pair element", mismatch, 1e-10)], metrics))
}

pub fn velocity_cmd(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, RunError> {
    let params = lattice(cfg)?;
    if params.quanta != 1 {
        return Err(RunError::Config(format!("velocity-table: lattice.quanta must be 1, got {}", params.quanta)));
    }
    let momenta = cfg.momenta.as_ref().ok_or_else(|| missing("momenta"))?;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let site = params.half_sites();
    for &p in momenta {
        let psi = plane_wave(&params, p).amplitudes;
        let v = lattice_velocity(&psi, site).map_err(at("velocity"))?;
        let expected = (p * params.spacing).cos();
        worst = worst.max((v - expected).abs());
        rows.push(row![p, v, expected, (v - expected).abs()]);
    }
    out.write_csv(
        "velocity.csv",
        vec![
            float("p", "plane-wave momentum"),
            float("velocity", "lattice velocity Re[Ψ*(k+1)Ψ(k)]/|Ψ(k)|²"),
            float("cos_p_delta", "cos(pδ)"),
            float("abs_error", "|velocity - cos(pδ)|"),
        ],
        rows,
    )?;
    Ok((vec![Check::at_most("velocity law", worst, 1e-10)], BTreeMap::new()))
}

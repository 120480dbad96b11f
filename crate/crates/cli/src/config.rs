//! Run configuration: one JSON object, every section optional.
//!
//! Missing sections take the subcommand's defaults; unknown keys are
//! rejected at any depth.

use std::path::Path;

use bell_core::continuum::ConvergenceConfig;
use bell_core::evolution::{EvolutionConfig, OrbitalSpec, PacketSpec};
use bell_core::lattice::LatticeParams;
use serde::{Deserialize, Serialize};

use crate::Command;
use crate::RunError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: Option<String>,
    pub lattice: Option<LatticeParams>,
    pub packet: Option<PacketSpec>,
    pub evolution: Option<EvolutionConfig>,
    /// Final time of evolutions and ensembles.
    pub horizon: Option<f64>,
    /// Pilot / jump substep.
    pub dt: Option<f64>,
    /// Output frames for `evolve`, record stride for `master-equation`.
    pub frames: Option<usize>,
    pub trajectories: Option<usize>,
    /// Times at which the ensemble histogram is compared with `|Ψ|²`.
    pub checkpoints: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub initial: Option<InitialDistribution>,
    pub convergence: Option<ConvergenceConfig>,
    pub nonlocality: Option<NonlocalityConfig>,
    pub commutator: Option<CommutatorConfig>,
    /// Momenta for `velocity-table`.
    pub momenta: Option<Vec<f64>>,
}

/// Starting distribution of the master equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDistribution {
    /// `|Ψ(0)|²`.
    Equilibrium,
    /// Uniform over the sector, a deliberate mismatch.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlocalityConfig {
    pub cells: usize,
    pub cell_width: f64,
    pub mass: f64,
    pub chi: OrbitalSpec,
    pub phi: OrbitalSpec,
    /// `[[x1_start, x1_end], [x2_start, x2_end]]` in cells.
    #[serde(default)]
    pub region: Option<[[usize; 2]; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommutatorConfig {
    pub mass: f64,
    pub momentum_spacing: f64,
    pub electron_momenta: Vec<f64>,
    pub positron_momenta: Vec<f64>,
    /// Grid points `x_j = j·2π/(samples·Δp)`.
    pub samples: usize,
    pub smearing: Smearing,
    /// Probed pair momentum.
    pub p0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Smearing {
    Gaussian { center: f64, width: f64 },
    Constant { value: f64 },
}

impl Smearing {
    pub fn sample(&self, x: f64) -> f64 {
        match *self {
            Smearing::Gaussian { center, width } => (-(x - center).powi(2) / (2.0 * width * width)).exp(),
            Smearing::Constant { value } => value,
        }
    }
}

/// Reads and parses a config file; serde reports the line, column and
/// offending field.
pub fn load(path: &Path) -> Result<RunConfig, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
}

pub fn parse(text: &str) -> Result<RunConfig, serde_json::Error> {
    serde_json::from_str(text)
}

fn lattice(sites: usize, spacing: f64, mass: f64, quanta: usize) -> LatticeParams {
    LatticeParams { sites, spacing, mass, quanta, coupling: 0.0 }
}

/// Fills every section the subcommand reads with its default.
pub fn resolve(command: Command, mut cfg: RunConfig, seed: Option<u64>) -> RunConfig {
    if seed.is_some() {
        cfg.seed = seed;
    }
    let single = |x: f64| PacketSpec::single(x, 2.0, 0.5);
    match command {
        Command::Spectrum | Command::Doubling => {
            cfg.lattice.get_or_insert(lattice(32, 1.0, 0.5, 1));
        }
        Command::Evolve => {
            cfg.lattice.get_or_insert(lattice(16, 1.0, 0.5, 1));
            cfg.packet.get_or_insert_with(|| single(5.0));
            cfg.evolution.get_or_insert_with(EvolutionConfig::default);
            cfg.horizon.get_or_insert(10.0);
            cfg.frames.get_or_insert(100);
        }
        Command::Trajectories | Command::Equivariance => {
            cfg.lattice.get_or_insert(lattice(16, 1.0, 0.5, 1));
            cfg.packet.get_or_insert_with(|| single(5.0));
            cfg.evolution.get_or_insert_with(EvolutionConfig::default);
            cfg.horizon.get_or_insert(2.0);
            cfg.dt.get_or_insert(1e-3);
            cfg.seed.get_or_insert(2024);
            if command == Command::Equivariance {
                cfg.trajectories.get_or_insert(20_000);
                cfg.checkpoints.get_or_insert_with(|| vec![0.5, 1.0, 2.0]);
            } else {
                cfg.trajectories.get_or_insert(100);
            }
        }
        Command::MasterEquation => {
            cfg.lattice.get_or_insert(lattice(8, 1.0, 0.5, 1));
            cfg.packet.get_or_insert_with(|| single(2.0));
            cfg.evolution.get_or_insert_with(EvolutionConfig::exact);
            cfg.horizon.get_or_insert(5.0);
            cfg.dt.get_or_insert(1e-3);
            cfg.frames.get_or_insert(10);
            cfg.initial.get_or_insert(InitialDistribution::Equilibrium);
        }
        Command::ContinuumConvergence => {
            let conv = cfg.convergence.get_or_insert_with(|| ConvergenceConfig {
                box_length: 32.0,
                mass: 0.0,
                packet: OrbitalSpec::new(16.0, 2.0, 0.0),
                resolutions: vec![64, 128, 256],
                trials: 2000,
                horizon: 4.0,
                seed: 7,
                steps_per_spacing: 1000.0,
                frame_stride: 10,
                warmup: 1.0,
            });
            match cfg.seed {
                Some(s) => conv.seed = s,
                None => cfg.seed = Some(conv.seed),
            }
        }
        Command::Nonlocality => {
            cfg.nonlocality.get_or_insert_with(|| {
                let (cells, width, sigma) = (64, 0.25, 2.0);
                let center = 0.5 * cells as f64 * width;
                NonlocalityConfig {
                    cells,
                    cell_width: width,
                    mass: 0.5,
                    chi: OrbitalSpec::new(center - 0.5 * sigma, sigma, 0.5 / sigma),
                    phi: OrbitalSpec::new(center + 0.5 * sigma, sigma, -0.5 / sigma),
                    region: None,
                }
            });
        }
        Command::CommutatorCheck => {
            cfg.commutator.get_or_insert_with(|| CommutatorConfig {
                mass: 1.0,
                momentum_spacing: 1.0,
                electron_momenta: vec![1.0, 2.0],
                positron_momenta: vec![1.0, 2.0],
                samples: 16,
                smearing: Smearing::Gaussian { center: 2.0, width: 1.0 },
                p0: 1.0,
            });
        }
        Command::VelocityTable => {
            cfg.lattice.get_or_insert(lattice(64, 0.5, 0.0, 1));
            cfg.momenta.get_or_insert_with(|| (0..10).map(|i| -2.5 + 0.55 * i as f64).collect());
        }
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_valid() {
        assert_eq!(parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_at_depth() {
        let e = parse(r#"{"lattice": {"sites": 8, "spacing": 1, "mass": 0, "quanta": 1, "colour": 2}}"#).unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
        assert!(parse(r#"{"latice": {}}"#).unwrap_err().to_string().contains("latice"));
    }

    #[test]
    fn parse_errors_carry_position() {
        let e = parse("{\n  \"horizon\": \"soon\"\n}").unwrap_err();
        assert_eq!(e.line(), 2);
    }

    #[test]
    fn command_line_seed_wins() {
        let cfg = RunConfig { seed: Some(1), ..Default::default() };
        assert_eq!(resolve(Command::Trajectories, cfg.clone(), Some(9)).seed, Some(9));
        assert_eq!(resolve(Command::Trajectories, cfg, None).seed, Some(1));
        let conv = resolve(Command::ContinuumConvergence, RunConfig::default(), Some(5));
        assert_eq!(conv.convergence.unwrap().seed, 5);
    }

    #[test]
    fn smearing_parses() {
        let s: Smearing = serde_json::from_str(r#"{"gaussian": {"center": 1, "width": 2}}"#).unwrap();
        assert_eq!(s.sample(1.0), 1.0);
        let c: Smearing = serde_json::from_str(r#"{"constant": {"value": 0.5}}"#).unwrap();
        assert_eq!(c.sample(7.0), 0.5);
    }
}

//! The tempo-invariant network, the dilated baseline, their training targets,
//! training loop and inference.

mod network;
mod targets;
mod train;

pub use network::{
    build_network, ActivationGrid, ActivationKind, BatchLoss, Gradients, Layer, LayerKind, Network,
};
pub use targets::{make_targets, tempo_weights, TargetGrid, DOWNBEAT_HALF_WIDTH};
pub use train::{evaluate_loss, train, EpochReport, Hyperparams, TrainItem, TrainState};

use crate::error::{ensure, Result};
use crate::scaling::{build_scale_grid, ScaleGrid, DEFAULT_QUADRATURE_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Onset front end followed by scale-invariant layers.
    Inv,
    /// Onset front end followed by dilated convolutions.
    NoInv,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Inv => "inv",
            Architecture::NoInv => "noinv",
        }
    }

    pub fn parse(s: &str) -> Option<Architecture> {
        match s {
            "inv" => Some(Architecture::Inv),
            "noinv" | "noinv_aug" => Some(Architecture::NoInv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DilatedSpec {
    pub channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub architecture: Architecture,
    pub input_channels: usize,
    pub frontend: Vec<ConvSpec>,
    /// Output channels of each scale-invariant layer; the last must be 1.
    pub ti_stack: Vec<usize>,
    pub dilated_stack: Vec<DilatedSpec>,
    pub tau0: f64,
    pub per_octave: usize,
    pub n_scales: usize,
    pub frame_rate: f64,
    pub beats: usize,
    pub pattern_len: usize,
    pub alpha: f64,
    pub quadrature_step: f64,
    pub biases: bool,
    /// Seed of the parameter initialisation.
    pub init_seed: u64,
}

impl NetworkConfig {
    /// The configurations of the controlled experiment.
    pub fn table2(architecture: Architecture) -> NetworkConfig {
        NetworkConfig {
            architecture,
            input_channels: 64,
            frontend: vec![
                ConvSpec {
                    channels: 32,
                    kernel: 3
                };
                3
            ],
            ti_stack: vec![16, 16, 1],
            dilated_stack: vec![
                DilatedSpec {
                    channels: 64,
                    kernel: 7,
                    dilation: 2,
                },
                DilatedSpec {
                    channels: 64,
                    kernel: 7,
                    dilation: 4,
                },
                DilatedSpec {
                    channels: 64,
                    kernel: 7,
                    dilation: 8,
                },
                DilatedSpec {
                    channels: 1,
                    kernel: 7,
                    dilation: 16,
                },
            ],
            tau0: 0.25,
            per_octave: 8,
            n_scales: 25,
            frame_rate: 50.0,
            beats: 4,
            pattern_len: 64,
            alpha: 1.0,
            quadrature_step: DEFAULT_QUADRATURE_STEP,
            biases: true,
            init_seed: 0,
        }
    }

    /// Receptive field of the front end in frames.
    pub fn frontend_receptive_field(&self) -> usize {
        1 + self.frontend.iter().map(|c| c.kernel.saturating_sub(1)).sum::<usize>()
    }

    pub fn grid(&self) -> Result<ScaleGrid> {
        build_scale_grid(
            self.tau0,
            self.per_octave,
            self.n_scales,
            self.frame_rate,
            self.beats,
            self.pattern_len,
        )
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_channels >= 1, Config, "input_channels must be positive");
        ensure!(!self.frontend.is_empty(), Config, "the front end needs at least one layer");
        for c in &self.frontend {
            ensure!(
                c.channels >= 1 && c.kernel >= 1,
                Config,
                "front-end layers need positive channels and kernel sizes"
            );
        }
        let rf = self.frontend_receptive_field();
        let limit = 0.25 * self.frame_rate;
        ensure!(
            rf as f64 <= limit + 1e-9,
            Config,
            "front-end receptive field of {rf} frames exceeds 0.25 s ({limit} frames)"
        );
        match self.architecture {
            Architecture::Inv => {
                ensure!(!self.ti_stack.is_empty(), Config, "ti_stack is empty");
                ensure!(
                    self.ti_stack.iter().all(|&c| c >= 1),
                    Config,
                    "scale-invariant layers need at least one channel"
                );
                ensure!(
                    *self.ti_stack.last().unwrap() == 1,
                    Config,
                    "the last scale-invariant layer must output one channel"
                );
            }
            Architecture::NoInv => {
                ensure!(!self.dilated_stack.is_empty(), Config, "dilated_stack is empty");
                for d in &self.dilated_stack {
                    ensure!(
                        d.channels >= 1 && d.kernel >= 1 && d.dilation >= 1,
                        Config,
                        "dilated layers need positive channels, kernel and dilation"
                    );
                }
                ensure!(
                    self.dilated_stack.last().unwrap().channels == 1,
                    Config,
                    "the last dilated layer must output one channel"
                );
            }
        }
        self.grid()?;
        Ok(())
    }
}

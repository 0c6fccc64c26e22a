//! Fully resolved description of one simulation run.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::corruption::CorruptionMode;
use crate::dataset::AllocationScheme;
use crate::localtrain::TrainConfig;
use crate::neuralnet::ArchitectureConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Paradigm {
    Dfl,
    Fl,
    Centralized,
}

/// How corrupted target-class samples are spread over the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheme {
    Balanced,
    Unbalanced,
    None,
}

impl Scheme {
    pub fn allocation(self) -> AllocationScheme {
        match self {
            Scheme::Unbalanced => AllocationScheme::Unbalanced,
            Scheme::Balanced | Scheme::None => AllocationScheme::Balanced,
        }
    }
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($variant:path => $text:literal),+) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($variant => $text),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(Paradigm, "paradigm", Paradigm::Dfl => "dfl", Paradigm::Fl => "fl", Paradigm::Centralized => "centralized");
keyword_enum!(Scheme, "scheme", Scheme::Balanced => "balanced", Scheme::Unbalanced => "unbalanced", Scheme::None => "none");

impl CorruptionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionMode::PixelInterpolation => "pixel_interpolation",
            CorruptionMode::LabelFlip => "label_flip",
        }
    }
}

impl FromStr for CorruptionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pixel_interpolation" => Ok(CorruptionMode::PixelInterpolation),
            "label_flip" => Ok(CorruptionMode::LabelFlip),
            other => Err(format!(
                "unknown corruption mode `{other}` (expected pixel_interpolation or label_flip)"
            )),
        }
    }
}

/// Seeds of one replicate: `graph` drives topology generation, `run` every
/// other random choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Replicate {
    pub graph: u64,
    pub run: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Serial,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPlan {
    pub dir: PathBuf,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub paradigm: Paradigm,
    pub scheme: Scheme,
    /// DFL nodes, or FL clients (the FL server is an extra, dataless node).
    pub n_nodes: usize,
    pub alpha: f64,
    pub p: f64,
    pub target_class: u8,
    pub collateral_class: u8,
    pub mode: CorruptionMode,
    pub replicate: Replicate,
    pub rounds: usize,
    pub train: TrainConfig,
    pub arch: ArchitectureConfig,
    /// Evaluate every this many rounds; round 0 and the last round always are.
    pub eval_every: usize,
    pub execution: Execution,
    pub checkpoints: Option<CheckpointPlan>,
}

impl Scenario {
    /// Effective corrupted fraction: zero whenever no scheme is active.
    pub fn effective_p(&self) -> f64 {
        if self.scheme == Scheme::None {
            0.0
        } else {
            self.p
        }
    }

    pub fn is_eval_round(&self, round: usize) -> bool {
        round == 0
            || round == self.rounds
            || (self.eval_every > 0 && round.is_multiple_of(self.eval_every))
    }
}

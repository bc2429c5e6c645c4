//! Session protocol: class plans, the model, rehearsal, training and
//! cumulative evaluation for every method arm.

pub mod buffer;
pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod plan;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::dpl::DplConfig;
use crate::error::{config, Result};
use crate::losses::LossConfig;

pub use buffer::{BufferPolicy, RehearsalBuffer};
pub use model::{ModelConfig, ModelState};
pub use optim::{Adam, AdamConfig};
pub use plan::{build_plan, SessionPlan};
pub use train::{run, DplSummary, Learner, RunOutcome, SessionReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Plain fine-tuning.
    Ft,
    /// Fine-tuning with exemplar replay.
    Er,
    /// Pooled-feature distillation from the previous model.
    KdBaseline,
    Krt,
    /// KRT with exemplar replay.
    KrtR,
    KrtNoDpl,
    /// Distillation baseline plus pseudo labels, without the ICA block.
    KrtNoIca,
    /// All classes in one joint session.
    UpperBound,
}

impl Arm {
    pub const ALL: [Arm; 8] = [
        Arm::Ft,
        Arm::Er,
        Arm::KdBaseline,
        Arm::Krt,
        Arm::KrtR,
        Arm::KrtNoDpl,
        Arm::KrtNoIca,
        Arm::UpperBound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Ft => "ft",
            Arm::Er => "er",
            Arm::KdBaseline => "kd_baseline",
            Arm::Krt => "krt",
            Arm::KrtR => "krt_r",
            Arm::KrtNoDpl => "krt_no_dpl",
            Arm::KrtNoIca => "krt_no_ica",
            Arm::UpperBound => "upper_bound",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn method(self) -> Method {
        let none = Method::default();
        match self {
            Arm::Ft | Arm::Er => none,
            Arm::KdBaseline => Method { use_kd: true, ..none },
            Arm::Krt | Arm::KrtR => Method {
                use_ica: true,
                use_dpl: true,
                use_token: true,
                ..none
            },
            Arm::KrtNoDpl => Method {
                use_ica: true,
                use_token: true,
                ..none
            },
            Arm::KrtNoIca => Method {
                use_dpl: true,
                use_kd: true,
                ..none
            },
            Arm::UpperBound => Method {
                use_ica: true,
                joint: true,
                ..none
            },
        }
    }

    /// Buffer used when the configuration does not name one.
    pub fn default_buffer(self) -> BufferPolicy {
        match self {
            Arm::Er | Arm::KrtR => BufferPolicy::PerClass(5),
            _ => BufferPolicy::None,
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Method {
    pub use_ica: bool,
    pub use_dpl: bool,
    /// Token loss between old and current session embeddings.
    pub use_token: bool,
    pub use_kd: bool,
    /// Single session over every class.
    pub joint: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub arm: Arm,
    pub base: usize,
    pub inc: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` picks the arm's default.
    pub buffer: Option<BufferPolicy>,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub dpl: DplConfig,
    pub model: ModelConfig,
    pub eval_threshold: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            arm: Arm::Krt,
            base: 0,
            inc: 10,
            epochs: 20,
            batch_size: 32,
            buffer: None,
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            dpl: DplConfig::default(),
            model: ModelConfig::default(),
            eval_threshold: crate::metrics::DEFAULT_THRESHOLD,
        }
    }
}

impl ProtocolConfig {
    pub fn buffer_policy(&self) -> BufferPolicy {
        self.buffer.unwrap_or_else(|| self.arm.default_buffer())
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.dpl.validate()?;
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            return Err(config("eval_threshold must be in (0, 1)"));
        }
        let empty = self.buffer_policy().is_none();
        match self.arm {
            Arm::Er | Arm::KrtR if empty => Err(config(format!("arm {} requires a non-empty buffer", self.arm))),
            Arm::Ft | Arm::UpperBound if !empty => Err(config(format!("arm {} does not use a buffer", self.arm))),
            _ => Ok(()),
        }
    }
}

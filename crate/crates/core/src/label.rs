//! Model labels such as `PN3-33d` or `PN3cut-ddd`.
//!
//! The prefix selects cascading (`PN3`) or independent pipelines
//! (`PN3cut`). Each of the three suffix characters gives the training
//! target of one pipeline: `d` for the ground-truth labels, a digit for
//! logit matching toward that pipeline, `x` for no training at all.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_PIPELINES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelineTarget {
    /// Cross-entropy against ground-truth labels (`d`).
    Hard,
    /// Mean-squared error toward another pipeline's logits (1-based index).
    Match(usize),
    /// No loss term (`x`).
    Untrained,
}

impl PipelineTarget {
    fn symbol(self) -> char {
        match self {
            PipelineTarget::Hard => 'd',
            PipelineTarget::Untrained => 'x',
            PipelineTarget::Match(p) => char::from_digit(p as u32, 10).expect("pipeline index is one digit"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("model label {label:?}: syntax error at position {position}: {detail}")]
    Syntax {
        label: String,
        position: usize,
        detail: String,
    },
    #[error("model label {label:?}: unknown prefix {prefix:?} (expected \"PN3\" or \"PN3cut\")")]
    UnknownPrefix { label: String, prefix: String },
    #[error("model label {label:?}: pipeline {pipeline} is matched to itself")]
    SelfMatch { label: String, pipeline: usize },
    #[error("model label {label:?}: matching targets form a cycle through pipeline {pipeline}")]
    Cycle { label: String, pipeline: usize },
    #[error("model label {label:?}: pipeline {pipeline} matches toward untrained pipeline {untrained}")]
    Ungrounded {
        label: String,
        pipeline: usize,
        untrained: usize,
    },
}

/// Cascading flag and per-pipeline targets parsed from a label, plus
/// the architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cascading: bool,
    pub targets: [PipelineTarget; NUM_PIPELINES],
    pub growth: usize,
    pub layers_per_block: usize,
    pub num_classes: usize,
    pub input_size: usize,
}

impl ModelConfig {
    pub const DEFAULT_GROWTH: usize = 12;
    pub const DEFAULT_LAYERS_PER_BLOCK: usize = 8;
    pub const DEFAULT_CLASSES: usize = 100;
    pub const DEFAULT_INPUT_SIZE: usize = 32;

    pub fn label(&self) -> String {
        let prefix = if self.cascading { "PN3" } else { "PN3cut" };
        let suffix: String = self.targets.iter().map(|t| t.symbol()).collect();
        format!("{prefix}-{suffix}")
    }

    pub fn with_growth(mut self, growth: usize) -> Self {
        self.growth = growth;
        self
    }

    pub fn with_layers_per_block(mut self, n: usize) -> Self {
        self.layers_per_block = n;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.num_classes = classes;
        self
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    /// Whether pipeline `p` (1-based) receives any loss term.
    pub fn is_trained(&self, p: usize) -> bool {
        self.targets[p - 1] != PipelineTarget::Untrained
    }

    /// Re-checks the target graph; labels produced by [`parse_model_label`]
    /// always pass.
    pub fn validate_targets(&self) -> Result<(), LabelError> {
        validate_targets(&self.label(), &self.targets)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ModelConfig {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_model_label(s)
    }
}

pub fn parse_model_label(label: &str) -> Result<ModelConfig, LabelError> {
    let chars: Vec<char> = label.chars().collect();
    let syntax = |position: usize, detail: String| LabelError::Syntax {
        label: label.to_string(),
        position,
        detail,
    };
    let dash = chars
        .iter()
        .position(|&c| c == '-')
        .ok_or_else(|| syntax(chars.len(), "expected '-' between prefix and suffix".into()))?;
    let prefix: String = chars[..dash].iter().collect();
    let cascading = match prefix.as_str() {
        "PN3" => true,
        "PN3cut" => false,
        _ => {
            return Err(LabelError::UnknownPrefix {
                label: label.to_string(),
                prefix,
            })
        }
    };
    let suffix = &chars[dash + 1..];
    let mut targets = [PipelineTarget::Untrained; NUM_PIPELINES];
    for (i, slot) in targets.iter_mut().enumerate() {
        let position = dash + 1 + i;
        let c = *suffix
            .get(i)
            .ok_or_else(|| syntax(position, format!("expected 3 target characters, found {}", suffix.len())))?;
        *slot = match c {
            'd' => PipelineTarget::Hard,
            'x' => PipelineTarget::Untrained,
            '1'..='3' => PipelineTarget::Match(c as usize - '0' as usize),
            other => {
                return Err(syntax(
                    position,
                    format!("unexpected {other:?}, expected one of '1', '2', '3', 'd', 'x'"),
                ))
            }
        };
    }
    if suffix.len() > NUM_PIPELINES {
        return Err(syntax(dash + 1 + NUM_PIPELINES, "trailing characters after the 3 targets".into()));
    }
    validate_targets(label, &targets)?;
    Ok(ModelConfig {
        cascading,
        targets,
        growth: ModelConfig::DEFAULT_GROWTH,
        layers_per_block: ModelConfig::DEFAULT_LAYERS_PER_BLOCK,
        num_classes: ModelConfig::DEFAULT_CLASSES,
        input_size: ModelConfig::DEFAULT_INPUT_SIZE,
    })
}

/// Every Match chain must end at a Hard pipeline without revisiting a node.
fn validate_targets(label: &str, targets: &[PipelineTarget; NUM_PIPELINES]) -> Result<(), LabelError> {
    for (i, t) in targets.iter().enumerate() {
        if *t == PipelineTarget::Match(i + 1) {
            return Err(LabelError::SelfMatch {
                label: label.to_string(),
                pipeline: i + 1,
            });
        }
    }
    for start in 1..=NUM_PIPELINES {
        let mut current = start;
        let mut seen = [false; NUM_PIPELINES];
        loop {
            if seen[current - 1] {
                return Err(LabelError::Cycle {
                    label: label.to_string(),
                    pipeline: start,
                });
            }
            seen[current - 1] = true;
            match targets[current - 1] {
                PipelineTarget::Hard => break,
                PipelineTarget::Untrained if current == start => break,
                PipelineTarget::Untrained => {
                    return Err(LabelError::Ungrounded {
                        label: label.to_string(),
                        pipeline: start,
                        untrained: current,
                    })
                }
                PipelineTarget::Match(next) => current = next,
            }
        }
    }
    Ok(())
}

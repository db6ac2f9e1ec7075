use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EvalError, Evaluation, Evaluator};
use crate::skill_package::{ContentState, Structure};

/// A yes/no question about a candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    HasSection { heading: String },
    HasReference { path: String },
    HasScript { path: String },
    HasAsset { path: String },
    HasFrontmatterKey { key: String },
    ReferenceCount { count: usize },
    SectionCount { count: usize },
    /// `before` appears strictly earlier than `after` in the body.
    SectionBefore { before: String, after: String },
    SectionContains { heading: String, text: String },
    DescriptionContains { text: String },
}

impl Predicate {
    pub fn holds(&self, s: &Structure, c: &ContentState) -> bool {
        match self {
            Predicate::HasSection { heading } => s.has_section(heading),
            Predicate::HasReference { path } => s.references.contains(path),
            Predicate::HasScript { path } => s.scripts.contains(path),
            Predicate::HasAsset { path } => s.assets.contains(path),
            Predicate::HasFrontmatterKey { key } => s.frontmatter_keys.contains(key),
            Predicate::ReferenceCount { count } => s.references.len() == *count,
            Predicate::SectionCount { count } => s.section_headings.len() == *count,
            Predicate::SectionBefore { before, after } => {
                matches!((s.section_index(before), s.section_index(after)), (Some(a), Some(b)) if a < b)
            }
            Predicate::SectionContains { heading, text } => c
                .section_bodies
                .get(heading)
                .is_some_and(|body| body.contains(text.as_str())),
            Predicate::DescriptionContains { text } => c.frontmatter.description().contains(text.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bonus {
    pub predicate: Predicate,
    pub bonus: f64,
}

/// A reward surface with a known optimum, for offline runs and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLandscape {
    pub base_reward: f64,
    #[serde(default)]
    pub bonuses: Vec<Bonus>,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl SyntheticLandscape {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| EvalError::Dataset {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }

    /// The landscape used for another split: same surface, independent noise.
    pub fn with_seed_offset(&self, offset: u64) -> Self {
        Self {
            rng_seed: self.rng_seed.wrapping_add(offset),
            ..self.clone()
        }
    }

    /// Reward before noise and clipping.
    pub fn noiseless(&self, s: &Structure, c: &ContentState) -> f64 {
        self.base_reward
            + self
                .bonuses
                .iter()
                .filter(|b| b.predicate.holds(s, c))
                .map(|b| b.bonus)
                .sum::<f64>()
    }

    fn noise(&self, s: &Structure, draw_index: u64) -> f64 {
        if self.noise_sd <= 0.0 {
            return 0.0;
        }
        let mut h = Sha256::new();
        h.update(self.rng_seed.to_le_bytes());
        h.update(draw_index.to_le_bytes());
        h.update(serde_json::to_vec(s).expect("structures serialize"));
        let seed: [u8; 32] = h.finalize().into();
        let normal = Normal::new(0.0, self.noise_sd).expect("finite positive sd");
        normal.sample(&mut ChaCha8Rng::from_seed(seed))
    }
}

/// `clip(base + satisfied bonuses + noise, 0, 1)`.
pub fn synth_evaluate(s: &Structure, c: &ContentState, landscape: &SyntheticLandscape, draw_index: u64) -> f64 {
    (landscape.noiseless(s, c) + landscape.noise(s, draw_index)).clamp(0.0, 1.0)
}

/// Draws a fresh noise index on every call.
#[derive(Debug, Clone)]
pub struct SyntheticEvaluator {
    pub landscape: SyntheticLandscape,
    pub next_draw: u64,
}

impl SyntheticEvaluator {
    pub fn new(landscape: SyntheticLandscape) -> Self {
        Self { landscape, next_draw: 0 }
    }
}

impl Evaluator for SyntheticEvaluator {
    fn evaluate(&mut self, s: &Structure, c: &ContentState) -> Result<Evaluation, EvalError> {
        let reward = synth_evaluate(s, c, &self.landscape, self.next_draw);
        self.next_draw += 1;
        let satisfied = self.landscape.bonuses.iter().filter(|b| b.predicate.holds(s, c)).count();
        Ok(Evaluation {
            reward,
            diagnostics: format!(
                "synthetic reward {reward:.4}; {satisfied} of {} scored properties present",
                self.landscape.bonuses.len()
            ),
        })
    }
}

//! Content refinement under a fixed structure: the alignment bridge, family
//! dispatch, bounded attempts scored by a lower confidence bound, and the
//! conservative ranking that picks the accepted content.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{Advisor, AdvisorError, Profile, RefineInput};
use crate::evaluation::{EvalError, Evaluator};
use crate::skill_package::{
    lines_with_fence_state, normalize_section_text, recompose, validate, BudgetPolicy, ContentState, Structure,
};
use crate::structure_edits::{ActionKind, CarriedNote, ComponentKey, EditAction, Transfer};

#[derive(Debug, Error)]
pub enum InnerError {
    #[error("cannot bridge content into the new structure: {0}")]
    BridgeFailure(String),
    #[error("no improvement values to bound")]
    EmptyDeltas,
    #[error("no attempt produced valid content")]
    NoValidAttempts,
    #[error(transparent)]
    Advisor(#[from] AdvisorError),
    #[error(transparent)]
    Evaluator(#[from] EvalError),
}

/// Declared in ascending dispatch priority, so `max` picks the family a
/// composite goes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementFamily {
    MetadataLight,
    MetadataRoutingText,
    InstructionText,
    Redistribution,
    ScriptEdit,
}

impl RefinementFamily {
    pub fn editable_summary(self) -> &'static str {
        match self {
            RefinementFamily::MetadataLight | RefinementFamily::MetadataRoutingText => "frontmatter values",
            RefinementFamily::InstructionText => "section bodies",
            RefinementFamily::Redistribution => "section bodies and reference texts",
            RefinementFamily::ScriptEdit => "script texts and the sections that mention them",
        }
    }
}

impl fmt::Display for RefinementFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RefinementFamily::MetadataLight => "metadata_light",
            RefinementFamily::MetadataRoutingText => "metadata_routing_text",
            RefinementFamily::InstructionText => "instruction_text",
            RefinementFamily::Redistribution => "redistribution",
            RefinementFamily::ScriptEdit => "script_edit",
        };
        f.write_str(s)
    }
}

fn family_of(kind: ActionKind) -> RefinementFamily {
    use ActionKind::*;
    match kind {
        ReviseDescription => RefinementFamily::MetadataRoutingText,
        EditMetadataKeys | AddAsset | RemoveAsset => RefinementFamily::MetadataLight,
        AddSection | RemoveSection | RenameSection | ReorderSections => RefinementFamily::InstructionText,
        InlineReference | ExtractToReference | AddReference | RemoveReference => RefinementFamily::Redistribution,
        AddScript | RemoveScript => RefinementFamily::ScriptEdit,
    }
}

/// Family for a primitive or composite edit: the highest-priority constituent.
pub fn dispatch_family(actions: &[EditAction]) -> RefinementFamily {
    actions
        .iter()
        .map(|a| family_of(a.kind))
        .max()
        .unwrap_or(RefinementFamily::MetadataLight)
}

/// Families of a composite's constituents other than the dispatched one,
/// highest priority first.
pub fn secondary_families(actions: &[EditAction]) -> Vec<RefinementFamily> {
    let primary = dispatch_family(actions);
    let set: std::collections::BTreeSet<RefinementFamily> =
        actions.iter().map(|a| family_of(a.kind)).filter(|f| *f != primary).collect();
    set.into_iter().rev().collect()
}

pub fn section_stub(heading: &str) -> String {
    format!("<!-- {heading}: to be written -->")
}

fn reference_stub(path: &str) -> String {
    let stem = path.rsplit('/').next().unwrap_or(path);
    let stem = stem.split('.').next().unwrap_or(stem);
    format!("# {stem}\n")
}

fn script_stub(path: &str) -> String {
    if path.ends_with(".py") {
        "#!/usr/bin/env python3\n# placeholder\n".into()
    } else {
        "# placeholder\n".into()
    }
}

/// Pushes headings down two levels so inlined text nests under its section.
pub fn demote_headings(text: &str) -> String {
    lines_with_fence_state(text)
        .map(|(line, fenced)| {
            if !fenced && line.starts_with('#') {
                format!("##{line}")
            } else {
                line.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn bridge(msg: String) -> InnerError {
    InnerError::BridgeFailure(msg)
}

/// Moves `old` content into `new_structure` following the note's steps.
/// Renamed and moved components keep their text, added ones get a stub,
/// removed ones are dropped.
pub fn align_content(
    old: &ContentState,
    old_structure: &Structure,
    new_structure: &Structure,
    note: &CarriedNote,
) -> Result<ContentState, InnerError> {
    old.check_compatible(old_structure).map_err(bridge)?;
    let mut c = old.clone();
    for step in &note.steps {
        let mut handled: Vec<ComponentKey> = Vec::new();
        match &step.transfer {
            Some(Transfer::ReferenceIntoSection { path, heading }) => {
                let text = c
                    .reference_texts
                    .remove(path)
                    .ok_or_else(|| bridge(format!("unknown reference `{path}`")))?;
                let moved = normalize_section_text(&demote_headings(&text));
                match c.section_bodies.get_mut(heading) {
                    Some(body) if !body.is_empty() => {
                        body.push_str("\n\n");
                        body.push_str(&moved);
                    }
                    Some(body) => *body = moved,
                    None => {
                        c.section_bodies.insert(heading.clone(), moved);
                    }
                }
                handled.push(ComponentKey::Reference(path.clone()));
                handled.push(ComponentKey::Section(heading.clone()));
            }
            Some(Transfer::SectionIntoReference { heading, path }) => {
                let body = c
                    .section_bodies
                    .remove(heading)
                    .ok_or_else(|| bridge(format!("unknown section `{heading}`")))?;
                let text = if body.is_empty() { body } else { body + "\n" };
                if c.reference_texts.insert(path.clone(), text).is_some() {
                    return Err(bridge(format!("reference `{path}` already exists")));
                }
                handled.push(ComponentKey::Section(heading.clone()));
                handled.push(ComponentKey::Reference(path.clone()));
            }
            None => {}
        }
        for (from, to) in &step.diff.renamed {
            let body = c
                .section_bodies
                .remove(from)
                .ok_or_else(|| bridge(format!("unknown section `{from}`")))?;
            c.section_bodies.insert(to.clone(), body);
        }
        for key in step.diff.removed.iter().filter(|k| !handled.contains(k)) {
            let present = match key {
                ComponentKey::Section(h) => c.section_bodies.remove(h).is_some(),
                ComponentKey::Reference(p) => c.reference_texts.remove(p).is_some(),
                ComponentKey::Script(p) => c.script_texts.remove(p).is_some(),
                ComponentKey::Asset(p) => c.asset_blobs.remove(p).is_some(),
                ComponentKey::MetadataKey(k) => c.frontmatter.remove_key(k),
            };
            if !present {
                return Err(bridge(format!("removed component {key:?} is unknown")));
            }
        }
        for key in step.diff.added.iter().filter(|k| !handled.contains(k)) {
            let fresh = match key {
                ComponentKey::Section(h) => c.section_bodies.insert(h.clone(), section_stub(h)).is_none(),
                ComponentKey::Reference(p) => c.reference_texts.insert(p.clone(), reference_stub(p)).is_none(),
                ComponentKey::Script(p) => c.script_texts.insert(p.clone(), script_stub(p)).is_none(),
                ComponentKey::Asset(p) => c.asset_blobs.insert(p.clone(), Vec::new()).is_none(),
                ComponentKey::MetadataKey(k) => {
                    let fresh = !c.frontmatter.has_key(k);
                    c.frontmatter.add_placeholder_key(k).map_err(|e| bridge(e.to_string()))?;
                    fresh
                }
            };
            if !fresh {
                return Err(bridge(format!("added component {key:?} already exists")));
            }
        }
    }
    c.check_compatible(new_structure).map_err(bridge)?;
    Ok(c)
}

/// Mean and sample standard deviation (`n - 1` denominator, 0 when `n = 1`).
pub fn delta_stats(deltas: &[f64]) -> Result<(f64, f64), InnerError> {
    if deltas.is_empty() {
        return Err(InnerError::EmptyDeltas);
    }
    let k = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / k;
    if deltas.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = deltas.iter().map(|d| (d - mean).powi(2)).sum();
    Ok((mean, (ss / (k - 1.0)).sqrt()))
}

/// `mean - t_crit * s / sqrt(k)`.
pub fn lcb(deltas: &[f64], t_crit: f64) -> Result<f64, InnerError> {
    let (mean, sd) = delta_stats(deltas)?;
    Ok(mean - t_crit * sd / (deltas.len() as f64).sqrt())
}

/// `k / (k + 1)` times the fraction of positive deltas.
pub fn confidence(deltas: &[f64]) -> f64 {
    if deltas.is_empty() {
        return 0.0;
    }
    let k = deltas.len() as f64;
    let positive = deltas.iter().filter(|d| **d > 0.0).count() as f64;
    k / (k + 1.0) * positive / k
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementBudget {
    pub max_attempts: usize,
    pub t_crit: f64,
    pub variants_per_attempt: usize,
}

impl Default for RefinementBudget {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            t_crit: 1.833,
            variants_per_attempt: 2,
        }
    }
}

impl RefinementBudget {
    pub fn check(&self) -> Result<(), String> {
        if self.max_attempts == 0 || self.variants_per_attempt == 0 {
            return Err("max_attempts and variants_per_attempt must be positive".into());
        }
        if !(self.t_crit.is_finite() && self.t_crit >= 0.0) {
            return Err("t_crit must be a nonnegative number".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt_index: usize,
    /// `None` when every variant of the attempt was invalid.
    #[serde(skip)]
    pub content: Option<ContentState>,
    pub content_digest: Option<String>,
    pub deltas: Vec<f64>,
    pub mean_delta: f64,
    pub sample_sd: f64,
    pub lcb: f64,
    pub gate_passed: bool,
    pub confidence: f64,
    pub reward: f64,
    pub diagnostics: String,
    pub discarded: Vec<String>,
}

impl AttemptRecord {
    fn empty(attempt_index: usize, discarded: Vec<String>) -> Self {
        Self {
            attempt_index,
            content: None,
            content_digest: None,
            deltas: Vec::new(),
            mean_delta: 0.0,
            sample_sd: 0.0,
            lcb: 0.0,
            gate_passed: false,
            confidence: 0.0,
            reward: 0.0,
            diagnostics: String::new(),
            discarded,
        }
    }
}

/// Everything `refine` needs besides the content.
pub struct RefineContext<'a> {
    pub structure: &'a Structure,
    pub family: RefinementFamily,
    /// Families of the other constituents of a composite edit.
    pub also: &'a [RefinementFamily],
    pub profile: &'a Profile,
    pub policy: &'a BudgetPolicy,
    pub budget: RefinementBudget,
    /// Improvements are measured against this reward.
    pub baseline_reward: f64,
    pub feedback: &'a str,
}

/// Runs up to `max_attempts` sequential attempts starting from `aligned`.
/// Each attempt's best valid variant becomes the next attempt's input.
pub fn refine(
    aligned: &ContentState,
    ctx: &RefineContext<'_>,
    advisor: &mut dyn Advisor,
    evaluator: &mut dyn Evaluator,
) -> Result<Vec<AttemptRecord>, InnerError> {
    aligned.check_compatible(ctx.structure).map_err(bridge)?;
    let mut current = aligned.clone();
    let mut feedback = ctx.feedback.to_string();
    let mut records = Vec::new();
    for m in 1..=ctx.budget.max_attempts {
        let out = advisor.refine_variant(&RefineInput {
            family: ctx.family,
            also: ctx.also,
            attempt: m,
            variants: ctx.budget.variants_per_attempt,
            current: &current,
            structure: ctx.structure,
            profile: ctx.profile,
            feedback: &feedback,
        })?;
        let mut discarded = out.violations;
        let mut scored = Vec::new();
        for (i, variant) in out.variants.into_iter().enumerate() {
            let pkg = recompose(&variant, ctx.structure).map_err(|e| bridge(e.to_string()))?;
            let report = validate(&pkg, ctx.policy);
            if !report.valid {
                discarded.push(format!("variant {}: {}", i + 1, report));
                continue;
            }
            let eval = evaluator.evaluate(ctx.structure, &variant)?;
            scored.push((variant, eval, pkg.digest()));
        }
        if scored.is_empty() {
            records.push(AttemptRecord::empty(m, discarded));
        } else {
            let deltas: Vec<f64> = scored.iter().map(|(_, e, _)| e.reward - ctx.baseline_reward).collect();
            let (mean, sd) = delta_stats(&deltas)?;
            let bound = lcb(&deltas, ctx.budget.t_crit)?;
            let best = (0..scored.len())
                .max_by(|&a, &b| scored[a].1.reward.total_cmp(&scored[b].1.reward).then(b.cmp(&a)))
                .expect("nonempty");
            let (content, eval, digest) = scored.swap_remove(best);
            feedback = eval.diagnostics.clone();
            current = content.clone();
            records.push(AttemptRecord {
                attempt_index: m,
                content: Some(content),
                content_digest: Some(digest),
                confidence: confidence(&deltas),
                deltas,
                mean_delta: mean,
                sample_sd: sd,
                lcb: bound,
                gate_passed: bound >= 0.0,
                reward: eval.reward,
                diagnostics: eval.diagnostics,
                discarded,
            });
        }
        if out.stop {
            break;
        }
    }
    Ok(records)
}

fn rank_order(a: &AttemptRecord, b: &AttemptRecord) -> Ordering {
    b.gate_passed
        .cmp(&a.gate_passed)
        .then(b.mean_delta.total_cmp(&a.mean_delta))
        .then(b.confidence.total_cmp(&a.confidence))
        .then(a.attempt_index.cmp(&b.attempt_index))
}

/// Gate first, then mean improvement, then confidence, then earliest attempt.
pub fn rank_and_select(records: &[AttemptRecord]) -> Result<&AttemptRecord, InnerError> {
    records
        .iter()
        .filter(|r| r.content.is_some())
        .min_by(|a, b| rank_order(a, b))
        .ok_or(InnerError::NoValidAttempts)
}

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::parse::{render_profile, render_proposal, render_refinement, ContentEdit};
use super::{AdvisorBackend, AdvisorError, Profile, StageContext, StageRequest};
use crate::inner_refine::RefinementFamily;
use crate::skill_package::{ContentState, Structure};
use crate::structure_edits::{apply_composite, parse_composite, ActionKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptMode {
    /// Always answer with the first listed proposal.
    Verbatim,
    /// The first listed proposal that is in the catalog, applies to the
    /// parent and was not tried from it yet; otherwise `NO_ACTION`.
    #[default]
    FirstApplicable,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundScript {
    pub analysis: Option<String>,
    pub diagnosis: Option<String>,
    pub mode: ScriptMode,
    /// Composite labels, e.g. `ReviseDescription() + InlineReference(path=..., into=...)`.
    pub proposals: Vec<String>,
}

/// Canned advisor behaviour. Round `r` uses `rounds[r - 1]`, or the last
/// entry once the list runs out.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Playbook {
    pub profile: Profile,
    #[serde(default)]
    pub rounds: Vec<RoundScript>,
    /// Raw refinement responses per family, one per attempt (last repeats).
    #[serde(default)]
    pub refinements: BTreeMap<RefinementFamily, Vec<String>>,
    /// Signal STOP once this attempt index is reached.
    #[serde(default)]
    pub stop_after_attempt: Option<usize>,
}

impl Playbook {
    pub fn load(path: &Path) -> Result<Self, AdvisorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AdvisorError::Backend(format!("{}: {e}", path.display())))?;
        let pb: Playbook = serde_json::from_str(&text)
            .map_err(|e| AdvisorError::Backend(format!("{}: {e}", path.display())))?;
        pb.check()?;
        Ok(pb)
    }

    pub fn check(&self) -> Result<(), AdvisorError> {
        for (i, r) in self.rounds.iter().enumerate() {
            for p in &r.proposals {
                parse_composite(p)
                    .map_err(|e| AdvisorError::Backend(format!("playbook round {}: {e}", i + 1)))?;
            }
        }
        Ok(())
    }

    fn round(&self, round: usize) -> Option<&RoundScript> {
        self.rounds.get(round.saturating_sub(1)).or(self.rounds.last())
    }

    /// Every distinct proposal label in the playbook.
    pub fn action_set(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.rounds
            .iter()
            .flat_map(|r| r.proposals.iter())
            .filter(|p| seen.insert(p.as_str()))
            .cloned()
            .collect()
    }
}

/// Answers every stage from a [`Playbook`]. A pure function of the playbook
/// and the request.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    pub playbook: Playbook,
    pub composite_cap: usize,
}

impl ScriptedBackend {
    pub fn new(playbook: Playbook) -> Self {
        Self {
            playbook,
            composite_cap: 3,
        }
    }

    fn analysis(&self, round: usize, s: &Structure) -> String {
        if let Some(text) = self.playbook.round(round).and_then(|r| r.analysis.clone()) {
            return text;
        }
        let titled: Vec<&str> = s.titled_sections().map(String::as_str).collect();
        format!(
            "Round {round}: {} sections ({}), {} references, {} scripts, {} assets.",
            s.section_headings.len(),
            titled.join(", "),
            s.references.len(),
            s.scripts.len(),
            s.assets.len()
        )
    }

    fn diagnosis(&self, round: usize, diagnostics: &str) -> String {
        if let Some(text) = self.playbook.round(round).and_then(|r| r.diagnosis.clone()) {
            return text;
        }
        format!("Round {round}: the likely root cause is reflected in the evaluator feedback.\n{diagnostics}")
    }

    fn proposal(&self, round: usize, parent: &Structure, catalog: &[crate::structure_edits::EditAction], tried: &[String]) -> String {
        let Some(script) = self.playbook.round(round) else {
            return render_proposal(&[], "playbook has no rounds");
        };
        let kinds: BTreeSet<ActionKind> = catalog.iter().map(|a| a.kind).collect();
        let parsed = script.proposals.iter().filter_map(|p| parse_composite(p).ok());
        let chosen = match script.mode {
            ScriptMode::Verbatim => parsed.into_iter().next(),
            ScriptMode::FirstApplicable => parsed.into_iter().find(|actions| {
                let label = crate::structure_edits::composite_label(actions);
                actions.iter().all(|a| kinds.contains(&a.kind))
                    && !tried.contains(&label)
                    && apply_composite(parent, actions, self.composite_cap).is_ok()
            }),
        };
        match chosen {
            Some(actions) => render_proposal(&actions, &format!("scripted round {round}")),
            None => render_proposal(&[], "no untried scripted action applies"),
        }
    }

    fn refinement(
        &self,
        family: RefinementFamily,
        also: &[RefinementFamily],
        attempt: usize,
        variants: usize,
        content: &ContentState,
        structure: &Structure,
    ) -> String {
        let stop = self.playbook.stop_after_attempt.is_some_and(|n| attempt >= n);
        if let Some(list) = self.playbook.refinements.get(&family) {
            if let Some(text) = list.get(attempt.saturating_sub(1)).or(list.last()) {
                let mut text = text.clone();
                if stop && !text.lines().any(|l| l.trim() == "STOP") {
                    if !text.ends_with('\n') {
                        text.push('\n');
                    }
                    text.push_str("STOP\n");
                }
                return text;
            }
        }
        let edits: Vec<Vec<ContentEdit>> = (1..=variants.max(1))
            .map(|v| {
                std::iter::once(family)
                    .chain(also.iter().copied())
                    .flat_map(|f| default_variant(f, attempt, v, content, structure))
                    .collect()
            })
            .collect();
        render_refinement(&edits, stop)
    }
}

/// Deterministic family-shaped variant used when the playbook has none.
fn default_variant(
    family: RefinementFamily,
    attempt: usize,
    v: usize,
    content: &ContentState,
    structure: &Structure,
) -> Vec<ContentEdit> {
    let target = structure
        .titled_sections()
        .last()
        .or(structure.section_headings.first())
        .cloned();
    match family {
        RefinementFamily::InstructionText | RefinementFamily::Redistribution => target
            .map(|heading| ContentEdit::AppendSection {
                heading,
                text: format!("- Check {attempt}.{v}: confirm the answer type matches the question before answering."),
            })
            .into_iter()
            .collect(),
        RefinementFamily::ScriptEdit => content
            .script_texts
            .keys()
            .map(|path| ContentEdit::SetScript {
                path: path.clone(),
                text: format!("#!/usr/bin/env python3\n# revision {attempt}.{v}\n"),
            })
            .collect(),
        RefinementFamily::MetadataRoutingText => {
            let desc = content.frontmatter.description();
            let base = desc.rsplit_once(" (revision ").map_or(desc, |(b, _)| b);
            vec![ContentEdit::Description(format!("{base} (revision {attempt}.{v})"))]
        }
        RefinementFamily::MetadataLight => Vec::new(),
    }
}

impl AdvisorBackend for ScriptedBackend {
    fn complete(&mut self, request: &StageRequest<'_>) -> Result<String, AdvisorError> {
        let text = match request.context {
            StageContext::Comprehend { .. } => render_profile(&self.playbook.profile),
            StageContext::Analyze { round, structure } => self.analysis(round, structure),
            StageContext::Diagnose { round, diagnostics } => self.diagnosis(round, diagnostics),
            StageContext::Propose {
                round,
                parent,
                catalog,
                tried,
            } => self.proposal(round, parent, catalog, tried),
            StageContext::Refine {
                family,
                also,
                attempt,
                variants,
                content,
                structure,
            } => self.refinement(family, also, attempt, variants, content, structure),
        };
        Ok(text)
    }
}

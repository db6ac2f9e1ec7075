//! Labeled-line response formats, their parsers, and the renderers the
//! scripted backend uses to produce them.

use std::collections::BTreeSet;

use super::{Profile, Proposal};
use crate::inner_refine::RefinementFamily;
use crate::skill_package::{normalize_section_text, ContentState};
use crate::structure_edits::{composite_label, parse_composite, ActionKind, EditAction};

const OPEN: &str = "<<<";
const CLOSE: &str = ">>>";

fn labeled<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    line.strip_prefix(label)?.strip_prefix(':').map(str::trim)
}

pub fn parse_profile(text: &str) -> Result<Profile, String> {
    let mut p = Profile::default();
    for line in text.lines().map(str::trim) {
        if let Some(v) = labeled(line, "TASK_SUMMARY") {
            p.task_summary = v.to_string();
        } else if let Some(v) = labeled(line, "SUCCESS_CRITERIA") {
            p.success_criteria.push(v.to_string());
        } else if let Some(v) = labeled(line, "QUALITY_DIMENSION") {
            p.quality_dimensions.push(v.to_string());
        } else if let Some(v) = labeled(line, "PROMISING_DIRECTION") {
            p.promising_directions.push(v.to_string());
        } else if let Some(v) = labeled(line, "PRIORITY_ACTIONS") {
            if v.is_empty() || v.eq_ignore_ascii_case("none") {
                continue;
            }
            let kinds = v
                .split(',')
                .map(|k| k.trim().parse::<ActionKind>().map_err(|e| e.to_string()))
                .collect::<Result<BTreeSet<_>, _>>()?;
            p.priority_action_kinds = Some(kinds);
        }
    }
    if p.task_summary.is_empty() {
        return Err("missing TASK_SUMMARY".into());
    }
    Ok(p)
}

pub fn render_profile(p: &Profile) -> String {
    let mut out = format!("TASK_SUMMARY: {}\n", p.task_summary);
    for (label, items) in [
        ("SUCCESS_CRITERIA", &p.success_criteria),
        ("QUALITY_DIMENSION", &p.quality_dimensions),
        ("PROMISING_DIRECTION", &p.promising_directions),
    ] {
        for item in items {
            out.push_str(&format!("{label}: {item}\n"));
        }
    }
    if let Some(kinds) = &p.priority_action_kinds {
        let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
        out.push_str(&format!("PRIORITY_ACTIONS: {}\n", names.join(", ")));
    }
    out
}

/// `ACTION:` lines (each a primitive or a `+` composite) and an optional
/// `RATIONALE:`, or a bare `NO_ACTION`. Unlabeled prose is ignored.
pub fn parse_proposal(text: &str) -> Result<Proposal, String> {
    let mut actions: Vec<EditAction> = Vec::new();
    let mut rationale = Vec::new();
    let mut declined = false;
    for line in text.lines().map(str::trim) {
        if line == "NO_ACTION" {
            declined = true;
        } else if let Some(v) = labeled(line, "ACTION") {
            actions.extend(parse_composite(v).map_err(|e| e.to_string())?);
        } else if let Some(v) = labeled(line, "RATIONALE") {
            rationale.push(v.to_string());
        }
    }
    match (declined, actions.is_empty()) {
        (true, false) => Err("both NO_ACTION and ACTION given".into()),
        (false, true) => Err("no ACTION line".into()),
        _ => {
            let rationale = rationale.join(" ");
            for a in &mut actions {
                a.rationale.clone_from(&rationale);
            }
            Ok(Proposal { actions, rationale })
        }
    }
}

pub fn render_proposal(actions: &[EditAction], rationale: &str) -> String {
    if actions.is_empty() {
        return format!("NO_ACTION\nRATIONALE: {rationale}\n");
    }
    format!("ACTION: {}\nRATIONALE: {rationale}\n", composite_label(actions))
}

/// One edit inside a refinement variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentEdit {
    SetSection { heading: String, text: String },
    AppendSection { heading: String, text: String },
    SetReference { path: String, text: String },
    SetScript { path: String, text: String },
    Description(String),
    Metadata { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedRefinement {
    pub variants: Vec<Vec<ContentEdit>>,
    pub stop: bool,
}

/// Parses `VARIANT`-separated edit blocks and an optional `STOP`. A block
/// left open by truncation drops its variant; otherwise it is an error.
pub fn parse_refinement(text: &str, truncated: bool) -> Result<ParsedRefinement, String> {
    let mut out = ParsedRefinement::default();
    let mut current: Option<Vec<ContentEdit>> = None;
    let mut lines = text.lines();
    while let Some(raw) = lines.next() {
        let line = raw.trim();
        if line == "VARIANT" {
            out.variants.extend(current.take());
            current = Some(Vec::new());
            continue;
        }
        if line == "STOP" {
            out.stop = true;
            continue;
        }
        let block_kind = ["SECTION", "APPEND_SECTION", "REFERENCE", "SCRIPT"]
            .into_iter()
            .find_map(|l| labeled(line, l).map(|v| (l, v.to_string())));
        let edit = if let Some((kind, key)) = block_kind {
            match lines.next().map(str::trim) {
                Some(OPEN) => {}
                _ => return Err(format!("`{line}` must be followed by a `{OPEN}` line")),
            }
            let mut body = Vec::new();
            let mut closed = false;
            for l in lines.by_ref() {
                if l.trim() == CLOSE {
                    closed = true;
                    break;
                }
                body.push(l);
            }
            if !closed {
                if truncated {
                    current = None;
                    break;
                }
                return Err(format!("unterminated block after `{line}`"));
            }
            let text = body.join("\n");
            match kind {
                "SECTION" => ContentEdit::SetSection { heading: key, text },
                "APPEND_SECTION" => ContentEdit::AppendSection { heading: key, text },
                "REFERENCE" => ContentEdit::SetReference { path: key, text },
                _ => ContentEdit::SetScript { path: key, text },
            }
        } else if let Some(v) = labeled(line, "DESCRIPTION") {
            ContentEdit::Description(v.to_string())
        } else if let Some(v) = labeled(line, "METADATA") {
            let (k, val) = v
                .split_once('=')
                .ok_or_else(|| format!("METADATA needs `key = value`, got `{v}`"))?;
            ContentEdit::Metadata {
                key: k.trim().to_string(),
                value: val.trim().to_string(),
            }
        } else {
            continue;
        };
        current.get_or_insert_with(Vec::new).push(edit);
    }
    out.variants.extend(current);
    if out.variants.is_empty() && !out.stop {
        return Err("no VARIANT and no STOP".into());
    }
    Ok(out)
}

fn push_block(out: &mut String, label: &str, key: &str, text: &str) {
    out.push_str(&format!("{label}: {key}\n{OPEN}\n{text}\n{CLOSE}\n"));
}

pub fn render_refinement(variants: &[Vec<ContentEdit>], stop: bool) -> String {
    let mut out = String::new();
    for edits in variants {
        out.push_str("VARIANT\n");
        for e in edits {
            match e {
                ContentEdit::SetSection { heading, text } => push_block(&mut out, "SECTION", heading, text),
                ContentEdit::AppendSection { heading, text } => push_block(&mut out, "APPEND_SECTION", heading, text),
                ContentEdit::SetReference { path, text } => push_block(&mut out, "REFERENCE", path, text),
                ContentEdit::SetScript { path, text } => push_block(&mut out, "SCRIPT", path, text),
                ContentEdit::Description(d) => out.push_str(&format!("DESCRIPTION: {d}\n")),
                ContentEdit::Metadata { key, value } => out.push_str(&format!("METADATA: {key} = {value}\n")),
            }
        }
    }
    if stop {
        out.push_str("STOP\n");
    }
    out
}

/// Applies edits to a copy of `current`. Edits may only touch existing
/// components; the structure is fixed.
pub fn apply_content_edits(current: &ContentState, edits: &[ContentEdit]) -> Result<ContentState, String> {
    let mut c = current.clone();
    for e in edits {
        match e {
            ContentEdit::SetSection { heading, text } => {
                let body = c
                    .section_bodies
                    .get_mut(heading)
                    .ok_or_else(|| format!("no section `{heading}`"))?;
                *body = normalize_section_text(text);
            }
            ContentEdit::AppendSection { heading, text } => {
                let body = c
                    .section_bodies
                    .get_mut(heading)
                    .ok_or_else(|| format!("no section `{heading}`"))?;
                let addition = normalize_section_text(text);
                if body.is_empty() {
                    *body = addition;
                } else if !addition.is_empty() {
                    body.push_str("\n\n");
                    body.push_str(&addition);
                }
            }
            ContentEdit::SetReference { path, text } => {
                let t = c
                    .reference_texts
                    .get_mut(path)
                    .ok_or_else(|| format!("no reference `{path}`"))?;
                *t = with_final_newline(text);
            }
            ContentEdit::SetScript { path, text } => {
                let t = c
                    .script_texts
                    .get_mut(path)
                    .ok_or_else(|| format!("no script `{path}`"))?;
                *t = with_final_newline(text);
            }
            ContentEdit::Description(d) => c.frontmatter.set_description(d.as_str()),
            ContentEdit::Metadata { key, value } => {
                if !c.frontmatter.has_key(key) {
                    return Err(format!("no metadata key `{key}`"));
                }
                c.frontmatter.set_value_text(key, value).map_err(|e| e.to_string())?;
            }
        }
    }
    Ok(c)
}

fn with_final_newline(text: &str) -> String {
    if text.is_empty() || text.ends_with('\n') {
        text.to_string()
    } else {
        format!("{text}\n")
    }
}

/// Describes the first change outside the family's editable set, if any.
pub fn family_violation(family: RefinementFamily, before: &ContentState, after: &ContentState) -> Option<String> {
    scope_violation(family, &[], before, after)
}

/// Like [`family_violation`], with the union of several families' scopes.
pub fn scope_violation(
    family: RefinementFamily,
    also: &[RefinementFamily],
    before: &ContentState,
    after: &ContentState,
) -> Option<String> {
    if before.frontmatter.name() != after.frontmatter.name() {
        return Some("the skill name is fixed".into());
    }
    let frontmatter = before.frontmatter != after.frontmatter;
    let changed_sections: Vec<&String> = after
        .section_bodies
        .iter()
        .filter(|(h, body)| before.section_bodies.get(*h) != Some(*body))
        .map(|(h, _)| h)
        .collect();
    let references = before.reference_texts != after.reference_texts;
    let scripts = before.script_texts != after.script_texts;
    let assets = before.asset_blobs != after.asset_blobs;

    let families: Vec<RefinementFamily> = std::iter::once(family).chain(also.iter().copied()).collect();
    let allows = |f: RefinementFamily| match f {
        RefinementFamily::MetadataLight | RefinementFamily::MetadataRoutingText => (true, false, false),
        RefinementFamily::InstructionText => (false, false, false),
        RefinementFamily::Redistribution => (false, true, false),
        RefinementFamily::ScriptEdit => (false, false, true),
    };
    let allow_fm = families.iter().any(|f| allows(*f).0);
    let allow_refs = families.iter().any(|f| allows(*f).1);
    let allow_scripts = families.iter().any(|f| allows(*f).2);
    let family_allows_section = |f: RefinementFamily, h: &String| match f {
        RefinementFamily::InstructionText | RefinementFamily::Redistribution => true,
        RefinementFamily::ScriptEdit => {
            let mentions = |body: Option<&String>| {
                body.is_some_and(|b| after.script_texts.keys().any(|p| b.contains(p.as_str())))
            };
            mentions(before.section_bodies.get(h)) || mentions(after.section_bodies.get(h))
        }
        _ => false,
    };
    let section_allowed = |h: &String| families.iter().any(|f| family_allows_section(*f, h));
    if frontmatter && !allow_fm {
        return Some(format!("{family} may not edit frontmatter"));
    }
    if let Some(h) = changed_sections.into_iter().find(|h| !section_allowed(h)) {
        return Some(format!("{family} may not edit section `{h}`"));
    }
    if references && !allow_refs {
        return Some(format!("{family} may not edit references"));
    }
    if scripts && !allow_scripts {
        return Some(format!("{family} may not edit scripts"));
    }
    if assets {
        return Some(format!("{family} may not edit assets"));
    }
    None
}

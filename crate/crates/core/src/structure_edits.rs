//! Structure edit actions and the transition map `apply_edit(structure, action)`.
//!
//! Actions have a canonical text form, `Kind(param=value, ...)`, used in
//! advisor responses, run logs and tree exports. Values that contain
//! separators are written as double-quoted strings.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skill_package::{Structure, ASSETS_DIR, REFERENCES_DIR, SCRIPTS_DIR};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EditError {
    #[error("inadmissible action: {0}")]
    InadmissibleAction(String),
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("cannot parse action `{text}`: {reason}")]
    Syntax { text: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    AddSection,
    RemoveSection,
    ReorderSections,
    RenameSection,
    AddReference,
    RemoveReference,
    InlineReference,
    ExtractToReference,
    AddScript,
    RemoveScript,
    AddAsset,
    RemoveAsset,
    EditMetadataKeys,
    ReviseDescription,
}

impl ActionKind {
    pub const ALL: [ActionKind; 14] = [
        ActionKind::AddSection,
        ActionKind::RemoveSection,
        ActionKind::ReorderSections,
        ActionKind::RenameSection,
        ActionKind::AddReference,
        ActionKind::RemoveReference,
        ActionKind::InlineReference,
        ActionKind::ExtractToReference,
        ActionKind::AddScript,
        ActionKind::RemoveScript,
        ActionKind::AddAsset,
        ActionKind::RemoveAsset,
        ActionKind::EditMetadataKeys,
        ActionKind::ReviseDescription,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::AddSection => "AddSection",
            ActionKind::RemoveSection => "RemoveSection",
            ActionKind::ReorderSections => "ReorderSections",
            ActionKind::RenameSection => "RenameSection",
            ActionKind::AddReference => "AddReference",
            ActionKind::RemoveReference => "RemoveReference",
            ActionKind::InlineReference => "InlineReference",
            ActionKind::ExtractToReference => "ExtractToReference",
            ActionKind::AddScript => "AddScript",
            ActionKind::RemoveScript => "RemoveScript",
            ActionKind::AddAsset => "AddAsset",
            ActionKind::RemoveAsset => "RemoveAsset",
            ActionKind::EditMetadataKeys => "EditMetadataKeys",
            ActionKind::ReviseDescription => "ReviseDescription",
        }
    }

    pub fn required_params(self) -> &'static [&'static str] {
        match self {
            ActionKind::AddSection | ActionKind::RemoveSection => &["heading"],
            ActionKind::ReorderSections => &["perm"],
            ActionKind::RenameSection => &["from", "to"],
            ActionKind::AddReference
            | ActionKind::RemoveReference
            | ActionKind::AddScript
            | ActionKind::RemoveScript
            | ActionKind::AddAsset
            | ActionKind::RemoveAsset => &["path"],
            ActionKind::InlineReference => &["path", "into"],
            ActionKind::ExtractToReference => &["section", "path"],
            ActionKind::EditMetadataKeys => &["op", "key"],
            ActionKind::ReviseDescription => &[],
        }
    }

    pub fn optional_params(self) -> &'static [&'static str] {
        match self {
            ActionKind::AddSection | ActionKind::InlineReference => &["after"],
            _ => &[],
        }
    }

    /// One-line parameter schema shown to the advisor.
    pub fn schema(self) -> &'static str {
        match self {
            ActionKind::AddSection => "heading=<new level-2 heading>, after=<existing heading, optional; default append>",
            ActionKind::RemoveSection => "heading=<existing heading>",
            ActionKind::ReorderSections => "perm=<comma-separated old indices in new order, e.g. \"1,0,2\">",
            ActionKind::RenameSection => "from=<existing heading>, to=<new heading>",
            ActionKind::AddReference => "path=<references/...>",
            ActionKind::RemoveReference => "path=<existing references/... path>",
            ActionKind::InlineReference => "path=<existing references/... path>, into=<target heading, created if absent>, after=<optional anchor for a new heading>",
            ActionKind::ExtractToReference => "section=<existing heading>, path=<new references/... path>",
            ActionKind::AddScript => "path=<scripts/...>",
            ActionKind::RemoveScript => "path=<existing scripts/... path>",
            ActionKind::AddAsset => "path=<assets/...>",
            ActionKind::RemoveAsset => "path=<existing assets/... path>",
            ActionKind::EditMetadataKeys => "op=add|remove, key=<frontmatter key other than name/description>",
            ActionKind::ReviseDescription => "(no parameters; rewrites the routing description)",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionKind {
    type Err = EditError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| EditError::Syntax {
                text: s.to_string(),
                reason: "unknown action kind".into(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditAction {
    pub kind: ActionKind,
    pub params: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub rationale: String,
}

impl EditAction {
    pub fn new(kind: ActionKind) -> Self {
        Self {
            kind,
            params: IndexMap::new(),
            rationale: String::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str, EditError> {
        self.param(key)
            .ok_or_else(|| EditError::BadParams(format!("{} needs `{key}`", self.kind)))
    }

    /// Canonical `Kind(k=v, ...)` text. The rationale is not part of the label.
    pub fn label(&self) -> String {
        let params: Vec<String> = self
            .params
            .iter()
            .map(|(k, v)| format!("{k}={}", quote_value(v)))
            .collect();
        format!("{}({})", self.kind, params.join(", "))
    }

    pub fn parse(text: &str) -> Result<Self, EditError> {
        let mut actions = parse_composite(text)?;
        if actions.len() != 1 {
            return Err(EditError::Syntax {
                text: text.to_string(),
                reason: "expected exactly one action".into(),
            });
        }
        Ok(actions.remove(0))
    }
}

impl fmt::Display for EditAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn quote_value(v: &str) -> String {
    let needs_quotes = v.is_empty()
        || v.trim() != v
        || v.chars().any(|c| matches!(c, ',' | '(' | ')' | '=' | '"' | '\\' | '+' | '\n'));
    if needs_quotes {
        serde_json::to_string(v).expect("string serialization is infallible")
    } else {
        v.to_string()
    }
}

/// Label for an ordered composite, primitives joined by ` + `.
pub fn composite_label(actions: &[EditAction]) -> String {
    actions.iter().map(EditAction::label).collect::<Vec<_>>().join(" + ")
}

/// Parses `A(..) + B(..) + ...`.
pub fn parse_composite(text: &str) -> Result<Vec<EditAction>, EditError> {
    let syntax = |reason: &str| EditError::Syntax {
        text: text.to_string(),
        reason: reason.to_string(),
    };
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    let skip_ws = |i: &mut usize| {
        while *i < chars.len() && chars[*i].is_whitespace() {
            *i += 1;
        }
    };
    let mut out = Vec::new();
    loop {
        skip_ws(&mut i);
        let start = i;
        while i < chars.len() && chars[i] != '(' {
            i += 1;
        }
        if i == chars.len() {
            return Err(syntax("missing `(`"));
        }
        let kind: ActionKind = chars[start..i].iter().collect::<String>().parse()?;
        let mut action = EditAction::new(kind);
        i += 1;
        loop {
            skip_ws(&mut i);
            if i < chars.len() && chars[i] == ')' {
                i += 1;
                break;
            }
            let key_start = i;
            while i < chars.len() && chars[i] != '=' && chars[i] != ')' && chars[i] != ',' {
                i += 1;
            }
            if i == chars.len() || chars[i] != '=' {
                return Err(syntax("expected `key=value`"));
            }
            let key = chars[key_start..i].iter().collect::<String>().trim().to_string();
            if key.is_empty() {
                return Err(syntax("empty parameter name"));
            }
            i += 1;
            skip_ws(&mut i);
            let value = if i < chars.len() && chars[i] == '"' {
                // JSON string literal
                let lit_start = i;
                i += 1;
                while i < chars.len() && chars[i] != '"' {
                    if chars[i] == '\\' {
                        i += 1;
                    }
                    i += 1;
                }
                if i >= chars.len() {
                    return Err(syntax("unterminated string"));
                }
                i += 1;
                let lit: String = chars[lit_start..i].iter().collect();
                serde_json::from_str::<String>(&lit).map_err(|_| syntax("bad string escape"))?
            } else {
                let v_start = i;
                while i < chars.len() && chars[i] != ',' && chars[i] != ')' {
                    i += 1;
                }
                chars[v_start..i].iter().collect::<String>().trim().to_string()
            };
            if action.params.insert(key.clone(), value).is_some() {
                return Err(syntax(&format!("duplicate parameter `{key}`")));
            }
            skip_ws(&mut i);
            match chars.get(i) {
                Some(',') => i += 1,
                Some(')') => {
                    i += 1;
                    break;
                }
                _ => return Err(syntax("expected `,` or `)`")),
            }
        }
        out.push(action);
        skip_ws(&mut i);
        match chars.get(i) {
            None => break,
            Some('+') => i += 1,
            Some(_) => return Err(syntax("trailing text after action")),
        }
    }
    Ok(out)
}

/// A named component of a structure.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKey {
    Section(String),
    Reference(String),
    Script(String),
    Asset(String),
    MetadataKey(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StructuralDiff {
    pub added: Vec<ComponentKey>,
    pub removed: Vec<ComponentKey>,
    /// Section renames `(from, to)`.
    pub renamed: Vec<(String, String)>,
    /// Whether surviving sections changed relative order.
    pub reordered: bool,
}

impl StructuralDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.renamed.is_empty() && !self.reordered
    }
}

/// Content that moves between components as part of an edit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transfer {
    ReferenceIntoSection { path: String, heading: String },
    SectionIntoReference { heading: String, path: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteStep {
    pub action: String,
    pub diff: StructuralDiff,
    pub transfer: Option<Transfer>,
}

/// What an edit did to content keys, consumed by the alignment bridge.
/// Steps are in application order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CarriedNote {
    pub steps: Vec<NoteStep>,
}

impl CarriedNote {
    pub fn is_empty(&self) -> bool {
        self.steps.iter().all(|s| s.diff.is_empty() && s.transfer.is_none())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub new_structure: Structure,
    pub carried_note: CarriedNote,
}

fn ordered_set_diff<'a>(
    before: &'a BTreeSet<String>,
    after: &'a BTreeSet<String>,
    wrap: fn(String) -> ComponentKey,
    added: &mut Vec<ComponentKey>,
    removed: &mut Vec<ComponentKey>,
) {
    added.extend(after.difference(before).cloned().map(wrap));
    removed.extend(before.difference(after).cloned().map(wrap));
}

/// Added, removed, renamed and reordered components between two structures.
/// A single section removed and a single section added at the same index are
/// reported as a rename.
pub fn diff_structures(before: &Structure, after: &Structure) -> StructuralDiff {
    let mut diff = StructuralDiff::default();
    let removed_sections: Vec<&String> = before
        .section_headings
        .iter()
        .filter(|h| !after.has_section(h))
        .collect();
    let added_sections: Vec<&String> = after
        .section_headings
        .iter()
        .filter(|h| !before.has_section(h))
        .collect();
    let is_rename = removed_sections.len() == 1
        && added_sections.len() == 1
        && before.section_index(removed_sections[0]) == after.section_index(added_sections[0]);
    if is_rename {
        diff.renamed
            .push((removed_sections[0].clone(), added_sections[0].clone()));
    } else {
        diff.added
            .extend(added_sections.iter().map(|h| ComponentKey::Section((*h).clone())));
        diff.removed
            .extend(removed_sections.iter().map(|h| ComponentKey::Section((*h).clone())));
    }
    let kept_before: Vec<&String> = before
        .section_headings
        .iter()
        .filter(|h| after.has_section(h))
        .collect();
    let kept_after: Vec<&String> = after
        .section_headings
        .iter()
        .filter(|h| before.has_section(h))
        .collect();
    diff.reordered = kept_before != kept_after;

    ordered_set_diff(&before.references, &after.references, ComponentKey::Reference, &mut diff.added, &mut diff.removed);
    ordered_set_diff(&before.scripts, &after.scripts, ComponentKey::Script, &mut diff.added, &mut diff.removed);
    ordered_set_diff(&before.assets, &after.assets, ComponentKey::Asset, &mut diff.added, &mut diff.removed);
    ordered_set_diff(&before.frontmatter_keys, &after.frontmatter_keys, ComponentKey::MetadataKey, &mut diff.added, &mut diff.removed);
    diff
}

fn check_heading(heading: &str) -> Result<(), EditError> {
    let ok = !heading.is_empty()
        && heading.trim() == heading
        && !heading.contains('\n')
        && !heading.starts_with('#');
    if ok {
        Ok(())
    } else {
        Err(EditError::BadParams(format!("`{heading}` is not a usable heading")))
    }
}

fn check_new_path(path: &str, prefix: &str, taken: &BTreeSet<String>) -> Result<(), EditError> {
    let bad = !path.starts_with(prefix)
        || path.len() == prefix.len()
        || path.contains('\\')
        || path.split('/').any(|c| c.is_empty() || c == "." || c == "..");
    if bad {
        return Err(EditError::BadParams(format!(
            "`{path}` is not a valid path under `{prefix}`"
        )));
    }
    if taken.contains(path) {
        return Err(EditError::BadParams(format!("`{path}` already exists")));
    }
    Ok(())
}

fn check_metadata_key(key: &str) -> Result<(), EditError> {
    if key == "name" || key == "description" {
        return Err(EditError::BadParams(format!("`{key}` is required and cannot be edited")));
    }
    if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(EditError::BadParams(format!("`{key}` is not a plain metadata key")));
    }
    Ok(())
}

/// Whether any action of `kind` can apply to `s`, independent of parameters.
pub fn kind_applicable(s: &Structure, kind: ActionKind) -> bool {
    let titled = s.titled_sections().count();
    match kind {
        ActionKind::AddSection
        | ActionKind::AddReference
        | ActionKind::AddScript
        | ActionKind::AddAsset
        | ActionKind::EditMetadataKeys => true,
        ActionKind::ReviseDescription => s.frontmatter_keys.contains("description"),
        ActionKind::RemoveSection => s.section_headings.len() >= 2,
        ActionKind::ReorderSections => titled >= 2,
        ActionKind::ExtractToReference => s.section_headings.len() >= 2 && titled >= 1,
        ActionKind::RenameSection => titled >= 1,
        ActionKind::RemoveReference | ActionKind::InlineReference => !s.references.is_empty(),
        ActionKind::RemoveScript => !s.scripts.is_empty(),
        ActionKind::RemoveAsset => !s.assets.is_empty(),
    }
}

fn unique_name(base: &str, taken: impl Fn(&str) -> bool, fmt_n: impl Fn(usize) -> String) -> String {
    if !taken(base) {
        return base.to_string();
    }
    (2..)
        .map(fmt_n)
        .find(|c| !taken(c))
        .expect("an unused name exists")
}

fn unique_path(prefix: &str, stem: &str, ext: &str, taken: &BTreeSet<String>) -> String {
    unique_name(
        &format!("{prefix}{stem}{ext}"),
        |p| taken.contains(p),
        |n| format!("{prefix}{stem}-{n}{ext}"),
    )
}

fn title_from_path(path: &str) -> String {
    let file = path.rsplit('/').next().unwrap_or(path);
    let stem = file.split('.').next().unwrap_or(file);
    stem.split(['-', '_', ' '])
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut cs = w.chars();
            match cs.next() {
                Some(c) => c.to_uppercase().chain(cs).collect::<String>(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn slug(heading: &str) -> String {
    let s: String = heading
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    let s = s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-");
    if s.is_empty() {
        "section".into()
    } else {
        s
    }
}

fn template(s: &Structure, kind: ActionKind) -> EditAction {
    let action = EditAction::new(kind);
    let last_titled = s.titled_sections().last().cloned();
    let unique_heading = |base: &str| {
        unique_name(base, |h| s.has_section(h), |n| format!("{base} {n}"))
    };
    match kind {
        ActionKind::AddSection => action.with("heading", unique_heading("New Section")),
        ActionKind::RemoveSection => action.with(
            "heading",
            s.section_headings.last().cloned().unwrap_or_default(),
        ),
        ActionKind::ReorderSections => {
            let n = s.section_headings.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.swap(n - 2, n - 1);
            action.with(
                "perm",
                perm.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
            )
        }
        ActionKind::RenameSection => {
            let from = s.titled_sections().next().cloned().unwrap_or_default();
            let to = unique_heading(&format!("{from} (revised)"));
            action.with("from", from).with("to", to)
        }
        ActionKind::AddReference => {
            action.with("path", unique_path(REFERENCES_DIR, "notes", ".md", &s.references))
        }
        ActionKind::RemoveReference => {
            action.with("path", s.references.iter().next().cloned().unwrap_or_default())
        }
        ActionKind::InlineReference => {
            let path = s.references.iter().next().cloned().unwrap_or_default();
            let into = title_from_path(&path);
            let into = if into.is_empty() { unique_heading("Reference Notes") } else { into };
            action.with("path", path).with("into", into)
        }
        ActionKind::ExtractToReference => {
            let section = last_titled.unwrap_or_default();
            let path = unique_path(REFERENCES_DIR, &slug(&section), ".md", &s.references);
            action.with("section", section).with("path", path)
        }
        ActionKind::AddScript => {
            action.with("path", unique_path(SCRIPTS_DIR, "helper", ".py", &s.scripts))
        }
        ActionKind::RemoveScript => {
            action.with("path", s.scripts.iter().next().cloned().unwrap_or_default())
        }
        ActionKind::AddAsset => {
            action.with("path", unique_path(ASSETS_DIR, "data", ".txt", &s.assets))
        }
        ActionKind::RemoveAsset => {
            action.with("path", s.assets.iter().next().cloned().unwrap_or_default())
        }
        ActionKind::EditMetadataKeys => {
            let addable = ["compatibility", "allowed-tools", "license", "metadata"]
                .into_iter()
                .find(|k| !s.frontmatter_keys.contains(*k));
            match addable {
                Some(key) => action.with("op", "add").with("key", key),
                None => {
                    let key = s
                        .frontmatter_keys
                        .iter()
                        .find(|k| *k != "name" && *k != "description")
                        .cloned()
                        .unwrap_or_default();
                    action.with("op", "remove").with("key", key)
                }
            }
        }
        ActionKind::ReviseDescription => action,
    }
}

/// One ready-to-apply template per applicable kind, filtered by `whitelist`.
pub fn admissible_actions(s: &Structure, whitelist: Option<&BTreeSet<ActionKind>>) -> Vec<EditAction> {
    ActionKind::ALL
        .into_iter()
        .filter(|k| whitelist.is_none_or(|w| w.contains(k)))
        .filter(|k| kind_applicable(s, *k))
        .map(|k| {
            let mut t = template(s, k);
            t.rationale = "template".into();
            t
        })
        .collect()
}

fn insert_section(s: &mut Structure, heading: &str, after: Option<&str>) -> Result<(), EditError> {
    match after {
        None => s.section_headings.push(heading.to_string()),
        Some(anchor) => {
            let idx = s
                .section_index(anchor)
                .ok_or_else(|| EditError::BadParams(format!("anchor `{anchor}` not found")))?;
            s.section_headings.insert(idx + 1, heading.to_string());
        }
    }
    Ok(())
}

/// The transition map. Deterministic; untouched components keep their order.
pub fn apply_edit(s: &Structure, a: &EditAction) -> Result<EditOutcome, EditError> {
    if !kind_applicable(s, a.kind) {
        return Err(EditError::InadmissibleAction(format!(
            "{} does not apply to this structure",
            a.kind
        )));
    }
    for key in a.params.keys() {
        let known = a.kind.required_params().contains(&key.as_str())
            || a.kind.optional_params().contains(&key.as_str());
        if !known {
            return Err(EditError::BadParams(format!("{} has no parameter `{key}`", a.kind)));
        }
    }
    let mut next = s.clone();
    let mut transfer = None;
    let mut diff = StructuralDiff::default();
    match a.kind {
        ActionKind::AddSection => {
            let heading = a.require("heading")?;
            check_heading(heading)?;
            if s.has_section(heading) {
                return Err(EditError::BadParams(format!("section `{heading}` exists")));
            }
            insert_section(&mut next, heading, a.param("after"))?;
            diff.added.push(ComponentKey::Section(heading.into()));
        }
        ActionKind::RemoveSection => {
            let heading = a.require("heading")?;
            let idx = s
                .section_index(heading)
                .ok_or_else(|| EditError::BadParams(format!("no section `{heading}`")))?;
            next.section_headings.remove(idx);
            diff.removed.push(ComponentKey::Section(heading.into()));
        }
        ActionKind::ReorderSections => {
            let raw = a.require("perm")?;
            let perm: Vec<usize> = raw
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| EditError::BadParams(format!("perm `{raw}` is not a list of indices")))?;
            let n = s.section_headings.len();
            let distinct: BTreeSet<usize> = perm.iter().copied().collect();
            if perm.len() != n || distinct.len() != n || distinct.iter().any(|&i| i >= n) {
                return Err(EditError::BadParams(format!(
                    "perm `{raw}` is not a permutation of 0..{n}"
                )));
            }
            next.section_headings = perm.iter().map(|&i| s.section_headings[i].clone()).collect();
            if next.section_headings.first().is_some_and(|h| !h.is_empty()) && s.has_section("") {
                return Err(EditError::BadParams("the preamble must stay first".into()));
            }
            diff.reordered = next.section_headings != s.section_headings;
        }
        ActionKind::RenameSection => {
            let from = a.require("from")?;
            let to = a.require("to")?;
            check_heading(to)?;
            let idx = s
                .section_index(from)
                .filter(|_| !from.is_empty())
                .ok_or_else(|| EditError::BadParams(format!("no titled section `{from}`")))?;
            if s.has_section(to) {
                return Err(EditError::BadParams(format!("section `{to}` exists")));
            }
            next.section_headings[idx] = to.to_string();
            diff.renamed.push((from.into(), to.into()));
        }
        ActionKind::AddReference | ActionKind::AddScript | ActionKind::AddAsset => {
            let path = a.require("path")?;
            let (set, prefix, wrap): (&mut BTreeSet<String>, &str, fn(String) -> ComponentKey) = match a.kind {
                ActionKind::AddReference => (&mut next.references, REFERENCES_DIR, ComponentKey::Reference),
                ActionKind::AddScript => (&mut next.scripts, SCRIPTS_DIR, ComponentKey::Script),
                _ => (&mut next.assets, ASSETS_DIR, ComponentKey::Asset),
            };
            check_new_path(path, prefix, set)?;
            set.insert(path.to_string());
            diff.added.push(wrap(path.to_string()));
        }
        ActionKind::RemoveReference | ActionKind::RemoveScript | ActionKind::RemoveAsset => {
            let path = a.require("path")?;
            let (set, wrap): (&mut BTreeSet<String>, fn(String) -> ComponentKey) = match a.kind {
                ActionKind::RemoveReference => (&mut next.references, ComponentKey::Reference),
                ActionKind::RemoveScript => (&mut next.scripts, ComponentKey::Script),
                _ => (&mut next.assets, ComponentKey::Asset),
            };
            if !set.remove(path) {
                return Err(EditError::BadParams(format!("no component `{path}`")));
            }
            diff.removed.push(wrap(path.to_string()));
        }
        ActionKind::InlineReference => {
            let path = a.require("path")?;
            let into = a.require("into")?;
            check_heading(into)?;
            if !next.references.remove(path) {
                return Err(EditError::BadParams(format!("no reference `{path}`")));
            }
            if !s.has_section(into) {
                insert_section(&mut next, into, a.param("after"))?;
                diff.added.push(ComponentKey::Section(into.into()));
            }
            diff.removed.push(ComponentKey::Reference(path.into()));
            transfer = Some(Transfer::ReferenceIntoSection {
                path: path.into(),
                heading: into.into(),
            });
        }
        ActionKind::ExtractToReference => {
            let section = a.require("section")?;
            let path = a.require("path")?;
            let idx = s
                .section_index(section)
                .filter(|_| !section.is_empty())
                .ok_or_else(|| EditError::BadParams(format!("no titled section `{section}`")))?;
            check_new_path(path, REFERENCES_DIR, &s.references)?;
            next.section_headings.remove(idx);
            next.references.insert(path.to_string());
            diff.added.push(ComponentKey::Reference(path.into()));
            diff.removed.push(ComponentKey::Section(section.into()));
            transfer = Some(Transfer::SectionIntoReference {
                heading: section.into(),
                path: path.into(),
            });
        }
        ActionKind::EditMetadataKeys => {
            let op = a.require("op")?;
            let key = a.require("key")?;
            check_metadata_key(key)?;
            match op {
                "add" => {
                    if !next.frontmatter_keys.insert(key.to_string()) {
                        return Err(EditError::BadParams(format!("key `{key}` already present")));
                    }
                    diff.added.push(ComponentKey::MetadataKey(key.into()));
                }
                "remove" => {
                    if !next.frontmatter_keys.remove(key) {
                        return Err(EditError::BadParams(format!("key `{key}` not present")));
                    }
                    diff.removed.push(ComponentKey::MetadataKey(key.into()));
                }
                other => {
                    return Err(EditError::BadParams(format!("op must be add or remove, got `{other}`")))
                }
            }
        }
        ActionKind::ReviseDescription => {}
    }
    Ok(EditOutcome {
        new_structure: next,
        carried_note: CarriedNote {
            steps: vec![NoteStep {
                action: a.label(),
                diff,
                transfer,
            }],
        },
    })
}

/// Applies an ordered composite atomically: either every step applies or the
/// structure is left unchanged and the first failure is returned.
pub fn apply_composite(s: &Structure, actions: &[EditAction], cap: usize) -> Result<EditOutcome, EditError> {
    if actions.is_empty() {
        return Err(EditError::BadParams("empty composite".into()));
    }
    if actions.len() > cap {
        return Err(EditError::BadParams(format!(
            "composite of {} actions exceeds the cap of {cap}",
            actions.len()
        )));
    }
    let mut current = s.clone();
    let mut note = CarriedNote::default();
    for a in actions {
        let outcome = apply_edit(&current, a)?;
        current = outcome.new_structure;
        note.steps.extend(outcome.carried_note.steps);
    }
    Ok(EditOutcome {
        new_structure: current,
        carried_note: note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    pub(crate) fn seed() -> Structure {
        Structure {
            section_headings: vec!["".into(), "Workflow".into(), "Heuristics".into(), "Final Checks".into()],
            references: set(&["references/question-types.md"]),
            scripts: BTreeSet::new(),
            assets: BTreeSet::new(),
            frontmatter_keys: set(&["name", "description"]),
        }
    }

    fn kinds(actions: &[EditAction]) -> BTreeSet<ActionKind> {
        actions.iter().map(|a| a.kind).collect()
    }

    #[test]
    fn seed_admissible_set() {
        let k = kinds(&admissible_actions(&seed(), None));
        assert!(k.contains(&ActionKind::InlineReference));
        assert!(k.contains(&ActionKind::AddSection));
        assert!(k.contains(&ActionKind::ReviseDescription));
        assert!(!k.contains(&ActionKind::RemoveScript));
        assert!(!k.contains(&ActionKind::RemoveAsset));
    }

    #[test]
    fn whitelist_filters() {
        let wl: BTreeSet<_> = [ActionKind::AddSection].into();
        let actions = admissible_actions(&seed(), Some(&wl));
        assert_eq!(kinds(&actions), wl);
    }

    #[test]
    fn inline_reference_into_new_section() {
        let a = EditAction::new(ActionKind::InlineReference)
            .with("path", "references/question-types.md")
            .with("into", "Question-Type Triage Checklist");
        let out = apply_edit(&seed(), &a).unwrap();
        assert!(out.new_structure.references.is_empty());
        assert_eq!(
            out.new_structure.section_headings.last().unwrap(),
            "Question-Type Triage Checklist"
        );
        let step = &out.carried_note.steps[0];
        assert_eq!(
            step.transfer,
            Some(Transfer::ReferenceIntoSection {
                path: "references/question-types.md".into(),
                heading: "Question-Type Triage Checklist".into()
            })
        );
    }

    #[test]
    fn identity_reorder_is_noop() {
        let a = EditAction::new(ActionKind::ReorderSections).with("perm", "0,1,2,3");
        let out = apply_edit(&seed(), &a).unwrap();
        assert_eq!(out.new_structure, seed());
        assert!(out.carried_note.is_empty());
    }

    #[test]
    fn bad_reorders() {
        for perm in ["0,1,2", "0,1,1,2", "0,1,2,9", "x"] {
            let a = EditAction::new(ActionKind::ReorderSections).with("perm", perm);
            assert!(matches!(apply_edit(&seed(), &a), Err(EditError::BadParams(_))), "{perm}");
        }
        let moves_preamble = EditAction::new(ActionKind::ReorderSections).with("perm", "1,0,2,3");
        assert!(apply_edit(&seed(), &moves_preamble).is_err());
    }

    #[test]
    fn remove_reference_without_references_is_inadmissible() {
        let mut s = seed();
        s.references.clear();
        let a = EditAction::new(ActionKind::RemoveReference).with("path", "references/x.md");
        assert!(matches!(apply_edit(&s, &a), Err(EditError::InadmissibleAction(_))));
    }

    #[test]
    fn missing_params() {
        let a = EditAction::new(ActionKind::AddSection);
        assert!(matches!(apply_edit(&seed(), &a), Err(EditError::BadParams(_))));
        let a = EditAction::new(ActionKind::AddSection).with("heading", "X").with("bogus", "1");
        assert!(matches!(apply_edit(&seed(), &a), Err(EditError::BadParams(_))));
    }

    #[test]
    fn add_section_with_anchor() {
        let a = EditAction::new(ActionKind::AddSection)
            .with("heading", "Checks")
            .with("after", "Workflow");
        let out = apply_edit(&seed(), &a).unwrap();
        assert_eq!(out.new_structure.section_headings[2], "Checks");
        let d = diff_structures(&seed(), &out.new_structure);
        assert_eq!(d.added, vec![ComponentKey::Section("Checks".into())]);
        assert!(!d.reordered);
    }

    #[test]
    fn diff_of_self_is_empty() {
        assert!(diff_structures(&seed(), &seed()).is_empty());
    }

    #[test]
    fn labels_round_trip() {
        let a = EditAction::new(ActionKind::InlineReference)
            .with("path", "references/question-types.md")
            .with("into", "Types, (all) = \"x\"");
        let label = a.label();
        assert_eq!(EditAction::parse(&label).unwrap(), a);
        let b = EditAction::new(ActionKind::ReviseDescription);
        assert_eq!(b.label(), "ReviseDescription()");
        let both = composite_label(&[b.clone(), a.clone()]);
        assert_eq!(parse_composite(&both).unwrap(), vec![b, a]);
        assert!(parse_composite("Nope(x=1)").is_err());
        assert!(parse_composite("AddSection(heading=A").is_err());
        assert!(parse_composite("AddSection(heading=A) junk").is_err());
    }

    #[test]
    fn composite_respects_cap_and_is_atomic() {
        let actions = vec![
            EditAction::new(ActionKind::ReviseDescription),
            EditAction::new(ActionKind::InlineReference)
                .with("path", "references/question-types.md")
                .with("into", "Question Types"),
        ];
        let out = apply_composite(&seed(), &actions, 3).unwrap();
        assert_eq!(out.carried_note.steps.len(), 2);
        assert!(apply_composite(&seed(), &actions, 1).is_err());
        let failing = vec![actions[1].clone(), actions[1].clone()];
        assert!(apply_composite(&seed(), &failing, 3).is_err());
    }

    fn arb_structure() -> impl Strategy<Value = Structure> {
        (
            proptest::collection::btree_set("[A-Z][a-z]{1,6}", 0..5),
            any::<bool>(),
            proptest::collection::btree_set("[a-z]{1,5}", 0..3),
            proptest::collection::btree_set("[a-z]{1,5}", 0..3),
            proptest::collection::btree_set("[a-z]{1,5}", 0..2),
            proptest::collection::btree_set("compatibility|license|allowed-tools|metadata", 0..4),
        )
            .prop_map(|(headings, preamble, refs, scripts, assets, keys)| {
                let mut section_headings: Vec<String> = Vec::new();
                if preamble || headings.is_empty() {
                    section_headings.push(String::new());
                }
                section_headings.extend(headings);
                let mut frontmatter_keys = set(&["name", "description"]);
                frontmatter_keys.extend(keys);
                Structure {
                    section_headings,
                    references: refs.into_iter().map(|r| format!("references/{r}.md")).collect(),
                    scripts: scripts.into_iter().map(|r| format!("scripts/{r}.py")).collect(),
                    assets: assets.into_iter().map(|r| format!("assets/{r}.bin")).collect(),
                    frontmatter_keys,
                }
            })
    }

    proptest! {
        #[test]
        fn admissible_templates_apply_and_agree_with_diff(s in arb_structure()) {
            for a in admissible_actions(&s, None) {
                let out = apply_edit(&s, &a).unwrap();
                prop_assert!(out.new_structure.check().is_ok());
                prop_assert_eq!(&out, &apply_edit(&s, &a).unwrap());
                prop_assert_eq!(out.carried_note.steps.len(), 1);
                let diff = diff_structures(&s, &out.new_structure);
                prop_assert_eq!(&diff, &out.carried_note.steps[0].diff, "{}", a);
            }
        }

        #[test]
        fn edits_are_local(s in arb_structure()) {
            for a in admissible_actions(&s, None) {
                let t = apply_edit(&s, &a).unwrap().new_structure;
                let touches = |k: &str| match a.kind {
                    ActionKind::AddSection | ActionKind::RemoveSection | ActionKind::ReorderSections | ActionKind::RenameSection => k == "sections",
                    ActionKind::AddReference | ActionKind::RemoveReference => k == "references",
                    ActionKind::InlineReference | ActionKind::ExtractToReference => k == "sections" || k == "references",
                    ActionKind::AddScript | ActionKind::RemoveScript => k == "scripts",
                    ActionKind::AddAsset | ActionKind::RemoveAsset => k == "assets",
                    ActionKind::EditMetadataKeys => k == "metadata",
                    ActionKind::ReviseDescription => false,
                };
                if !touches("sections") { prop_assert_eq!(&t.section_headings, &s.section_headings); }
                if !touches("references") { prop_assert_eq!(&t.references, &s.references); }
                if !touches("scripts") { prop_assert_eq!(&t.scripts, &s.scripts); }
                if !touches("assets") { prop_assert_eq!(&t.assets, &s.assets); }
                if !touches("metadata") { prop_assert_eq!(&t.frontmatter_keys, &s.frontmatter_keys); }
                // surviving sections keep relative order unless reordering
                if a.kind != ActionKind::ReorderSections {
                    let kept: Vec<_> = s.section_headings.iter().filter(|h| t.has_section(h)).collect();
                    let kept_after: Vec<_> = t.section_headings.iter().filter(|h| s.has_section(h)).collect();
                    prop_assert_eq!(kept, kept_after);
                }
            }
        }

        #[test]
        fn label_parse_inverse(heading in "[ -~]{1,20}") {
            let a = EditAction::new(ActionKind::AddSection).with("heading", heading);
            prop_assert_eq!(EditAction::parse(&a.label()).unwrap(), a);
        }
    }
}

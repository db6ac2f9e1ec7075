//! Skill directories: parsing, serialization, validation, and the
//! structure/content views used by the optimizer.
//!
//! A skill is a directory with a required `SKILL.md` (a `---` fenced
//! frontmatter block followed by a Markdown body) and optional `scripts/`,
//! `references/` and `assets/` subdirectories. The body is split into
//! sections at level-2 headings; any text before the first heading is kept
//! as a section with the empty heading.

mod frontmatter;
mod tokens;
mod validate;
mod views;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use frontmatter::{is_known_key, parse_frontmatter, yaml_scalar, Frontmatter};
pub use tokens::{count_tokens, truncate_to_budget, TokenCounter, WordHeuristic};
pub use validate::{validate, validate_with, BudgetPolicy, Issue, IssueCode, ValidationReport};
pub use views::{derive_structure, extract_content, recompose, ContentState, Structure};

pub const SKILL_MD: &str = "SKILL.md";
pub const SCRIPTS_DIR: &str = "scripts/";
pub const REFERENCES_DIR: &str = "references/";
pub const ASSETS_DIR: &str = "assets/";

/// A directory snapshot: relative `/`-separated path to file bytes.
pub type Snapshot = BTreeMap<String, Vec<u8>>;

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("snapshot has no top-level SKILL.md")]
    MissingSkillMd,
    #[error("malformed frontmatter: {0}")]
    MalformedFrontmatter(String),
    #[error("duplicate section heading `{0}`")]
    DuplicateHeading(String),
    #[error("unrecognized top-level entry `{0}`")]
    UnrecognizedTopLevelEntry(String),
    #[error("`{0}` is not valid UTF-8")]
    InvalidUtf8(String),
    #[error("structure does not match package: {0}")]
    StructureMismatch(String),
    #[error("content is incompatible with structure: {0}")]
    IncompatibleContent(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PackageError {
    /// The variant name, for operator-facing messages.
    pub fn kind(&self) -> &'static str {
        match self {
            PackageError::MissingSkillMd => "MissingSkillMd",
            PackageError::MalformedFrontmatter(_) => "MalformedFrontmatter",
            PackageError::DuplicateHeading(_) => "DuplicateHeading",
            PackageError::UnrecognizedTopLevelEntry(_) => "UnrecognizedTopLevelEntry",
            PackageError::InvalidUtf8(_) => "InvalidUtf8",
            PackageError::StructureMismatch(_) => "StructureMismatch",
            PackageError::IncompatibleContent(_) => "IncompatibleContent",
            PackageError::Io { .. } => "Io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillPackage {
    pub root_name: String,
    pub frontmatter: Frontmatter,
    /// `(heading, text)` in document order. The empty heading holds the preamble.
    pub body_sections: Vec<(String, String)>,
    pub scripts: Vec<(String, String)>,
    pub references: Vec<(String, String)>,
    pub assets: Vec<(String, Vec<u8>)>,
}

impl SkillPackage {
    /// Full `SKILL.md` text as it would be written to disk.
    pub fn skill_md(&self) -> String {
        let mut out = String::from("---\n");
        out.push_str(&self.frontmatter.to_yaml());
        out.push_str("---\n");
        out.push_str(&render_body(&self.body_sections));
        out
    }

    pub fn section(&self, heading: &str) -> Option<&str> {
        self.body_sections
            .iter()
            .find(|(h, _)| h == heading)
            .map(|(_, t)| t.as_str())
    }

    /// Hex SHA-256 over the serialized snapshot, stable across runs.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (path, bytes) in serialize_package(self) {
            hasher.update((path.len() as u64).to_le_bytes());
            hasher.update(path.as_bytes());
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
        hex::encode(hasher.finalize())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, PackageError> {
        let snapshot = read_snapshot(dir)?;
        let mut pkg = parse_package(&snapshot)?;
        if let Some(name) = dir.file_name().and_then(|n| n.to_str()) {
            pkg.root_name = name.to_string();
        }
        Ok(pkg)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), PackageError> {
        write_snapshot(dir, &serialize_package(self))
    }
}

/// Is this line a level-2 ATX heading? Returns the heading text.
pub(crate) fn level2_heading(line: &str) -> Option<&str> {
    let rest = line.strip_prefix("##")?;
    if !rest.starts_with([' ', '\t']) {
        return None;
    }
    let text = rest.trim();
    (!text.is_empty()).then_some(text)
}

fn is_fence(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with("```") || t.starts_with("~~~")
}

/// Iterates `(line, inside_code_fence)` over `text`.
pub(crate) fn lines_with_fence_state(text: &str) -> impl Iterator<Item = (&str, bool)> {
    let mut in_fence = false;
    text.lines().map(move |line| {
        if is_fence(line) {
            in_fence = !in_fence;
            (line, true)
        } else {
            (line, in_fence)
        }
    })
}

/// Drops leading and trailing blank lines; interior text is untouched.
pub fn normalize_section_text(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let Some(first) = lines.iter().position(|l| !l.trim().is_empty()) else {
        return String::new();
    };
    let last = lines
        .iter()
        .rposition(|l| !l.trim().is_empty())
        .expect("a nonblank line exists");
    lines[first..=last].join("\n")
}

fn split_sections(body: &str) -> Result<Vec<(String, String)>, PackageError> {
    let mut sections: Vec<(String, Vec<&str>)> = vec![(String::new(), Vec::new())];
    for (line, fenced) in lines_with_fence_state(body) {
        match level2_heading(line).filter(|_| !fenced) {
            Some(heading) => {
                if sections.iter().any(|(h, _)| h == heading) {
                    return Err(PackageError::DuplicateHeading(heading.to_string()));
                }
                sections.push((heading.to_string(), Vec::new()));
            }
            None => sections.last_mut().expect("never empty").1.push(line),
        }
    }
    let mut out: Vec<(String, String)> = sections
        .into_iter()
        .map(|(h, lines)| (h, normalize_section_text(&lines.join("\n"))))
        .collect();
    if out.len() > 1 && out[0].1.is_empty() {
        out.remove(0);
    }
    Ok(out)
}

fn render_body(sections: &[(String, String)]) -> String {
    let parts: Vec<String> = sections
        .iter()
        .map(|(heading, text)| match (heading.is_empty(), text.is_empty()) {
            (true, _) => text.clone(),
            (false, true) => format!("## {heading}"),
            (false, false) => format!("## {heading}\n{text}"),
        })
        .collect();
    let body = parts.join("\n\n");
    if body.is_empty() {
        body
    } else {
        body + "\n"
    }
}

fn parse_skill_md(text: &str) -> Result<(Frontmatter, Vec<(String, String)>), PackageError> {
    let text = text.replace("\r\n", "\n");
    let mut lines = text.split_inclusive('\n');
    let opening = lines.next().unwrap_or("");
    if opening.trim_end_matches('\n') != "---" {
        return Err(PackageError::MalformedFrontmatter(
            "SKILL.md must start with a `---` line".into(),
        ));
    }
    let mut yaml = String::new();
    let mut closed = false;
    let mut consumed = opening.len();
    for line in lines {
        consumed += line.len();
        if line.trim_end_matches('\n') == "---" {
            closed = true;
            break;
        }
        yaml.push_str(line);
    }
    if !closed {
        return Err(PackageError::MalformedFrontmatter(
            "no closing `---` line".into(),
        ));
    }
    let frontmatter = parse_frontmatter(&yaml)?;
    let sections = split_sections(&text[consumed..])?;
    Ok((frontmatter, sections))
}

fn utf8(path: &str, bytes: &[u8]) -> Result<String, PackageError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| PackageError::InvalidUtf8(path.to_string()))
}

/// Parses a directory snapshot into a package. Files are routed by their
/// top-level directory; anything else at the top level is rejected.
pub fn parse_package(snapshot: &Snapshot) -> Result<SkillPackage, PackageError> {
    let skill_md = snapshot.get(SKILL_MD).ok_or(PackageError::MissingSkillMd)?;
    let (frontmatter, body_sections) = parse_skill_md(&utf8(SKILL_MD, skill_md)?)?;
    let mut pkg = SkillPackage {
        root_name: frontmatter.name().to_string(),
        frontmatter,
        body_sections,
        scripts: Vec::new(),
        references: Vec::new(),
        assets: Vec::new(),
    };
    for (path, bytes) in snapshot {
        if path == SKILL_MD {
            continue;
        }
        if path.starts_with(SCRIPTS_DIR) {
            pkg.scripts.push((path.clone(), utf8(path, bytes)?));
        } else if path.starts_with(REFERENCES_DIR) {
            pkg.references.push((path.clone(), utf8(path, bytes)?));
        } else if path.starts_with(ASSETS_DIR) {
            pkg.assets.push((path.clone(), bytes.clone()));
        } else {
            let top = path.split('/').next().unwrap_or(path);
            return Err(PackageError::UnrecognizedTopLevelEntry(top.to_string()));
        }
    }
    Ok(pkg)
}

/// Inverse of [`parse_package`]. Output is byte-stable: LF line endings,
/// frontmatter keys in their recorded order, one blank line between sections.
pub fn serialize_package(pkg: &SkillPackage) -> Snapshot {
    let mut out = Snapshot::new();
    out.insert(SKILL_MD.to_string(), pkg.skill_md().into_bytes());
    for (path, text) in pkg.scripts.iter().chain(&pkg.references) {
        out.insert(path.clone(), text.clone().into_bytes());
    }
    for (path, bytes) in &pkg.assets {
        out.insert(path.clone(), bytes.clone());
    }
    out
}

pub fn read_snapshot(dir: &Path) -> Result<Snapshot, PackageError> {
    let io = |path: &Path, source| PackageError::Io {
        path: path.to_path_buf(),
        source,
    };
    if !dir.is_dir() {
        return Err(io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut snapshot = Snapshot::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            PackageError::Io {
                path,
                source: e.into(),
            }
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(dir)
            .expect("walkdir yields children of its root");
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let bytes = std::fs::read(entry.path()).map_err(|e| io(entry.path(), e))?;
        snapshot.insert(key, bytes);
    }
    Ok(snapshot)
}

pub fn write_snapshot(dir: &Path, snapshot: &Snapshot) -> Result<(), PackageError> {
    for (rel, bytes) in snapshot {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| PackageError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        std::fs::write(&path, bytes).map_err(|source| PackageError::Io { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(entries: &[(&str, &str)]) -> Snapshot {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.as_bytes().to_vec()))
            .collect()
    }

    #[test]
    fn minimal_package() {
        let pkg = parse_package(&snap(&[(
            "SKILL.md",
            "---\nname: orqa\ndescription: d\n---\n## Workflow\nsteps",
        )]))
        .unwrap();
        assert_eq!(pkg.frontmatter.name(), "orqa");
        assert_eq!(
            pkg.body_sections,
            vec![("Workflow".to_string(), "steps".to_string())]
        );
        let out = serialize_package(&pkg);
        assert_eq!(
            out["SKILL.md"],
            b"---\nname: orqa\ndescription: d\n---\n## Workflow\nsteps\n"
        );
    }

    #[test]
    fn reference_file_is_routed() {
        let pkg = parse_package(&snap(&[
            ("SKILL.md", "---\nname: orqa\ndescription: d\n---\nbody\n"),
            ("references/question-types.md", "# Types\n"),
        ]))
        .unwrap();
        assert_eq!(pkg.references.len(), 1);
        assert_eq!(pkg.references[0].0, "references/question-types.md");
        assert!(pkg.scripts.is_empty());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_package(&snap(&[("SKILL.md", "no frontmatter")])),
            Err(PackageError::MalformedFrontmatter(_))
        ));
        assert!(matches!(
            parse_package(&snap(&[("SKILL.md", "---\nname: a\n")])),
            Err(PackageError::MalformedFrontmatter(_))
        ));
        assert!(matches!(
            parse_package(&snap(&[("README.md", "x")])),
            Err(PackageError::MissingSkillMd)
        ));
        assert!(matches!(
            parse_package(&snap(&[
                ("SKILL.md", "---\nname: a\ndescription: b\n---\n"),
                ("notes/x.md", "x")
            ])),
            Err(PackageError::UnrecognizedTopLevelEntry(e)) if e == "notes"
        ));
        assert!(matches!(
            parse_package(&snap(&[(
                "SKILL.md",
                "---\nname: a\ndescription: b\n---\n## A\nx\n## A\ny\n"
            )])),
            Err(PackageError::DuplicateHeading(h)) if h == "A"
        ));
    }

    #[test]
    fn preamble_and_fenced_headings() {
        let pkg = parse_package(&snap(&[(
            "SKILL.md",
            "---\nname: a\ndescription: b\n---\n# Title\n\nintro\n\n## Steps\n```md\n## not a heading\n```\n\n\n## Checks\n",
        )]))
        .unwrap();
        let headings: Vec<_> = pkg.body_sections.iter().map(|(h, _)| h.as_str()).collect();
        assert_eq!(headings, ["", "Steps", "Checks"]);
        assert_eq!(pkg.section("").unwrap(), "# Title\n\nintro");
        assert_eq!(pkg.section("Steps").unwrap(), "```md\n## not a heading\n```");
        assert_eq!(pkg.section("Checks").unwrap(), "");
    }

    #[test]
    fn empty_body_keeps_empty_preamble() {
        let pkg = parse_package(&snap(&[("SKILL.md", "---\nname: a\ndescription: b\n---\n")])).unwrap();
        assert_eq!(pkg.body_sections, vec![(String::new(), String::new())]);
        assert_eq!(pkg.skill_md(), "---\nname: a\ndescription: b\n---\n");
    }

    #[test]
    fn crlf_input_normalizes() {
        let pkg = parse_package(&snap(&[(
            "SKILL.md",
            "---\r\nname: a\r\ndescription: b\r\n---\r\n## S\r\ntext\r\n",
        )]))
        .unwrap();
        assert_eq!(pkg.section("S").unwrap(), "text");
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = snap(&[
            ("SKILL.md", "---\nname: a\ndescription: b\n---\n## S\ntext\n"),
            ("scripts/run.py", "print(1)\n"),
            ("assets/table.csv", "a,b\n"),
        ]);
        write_snapshot(dir.path(), &src).unwrap();
        assert_eq!(read_snapshot(dir.path()).unwrap(), src);
        let pkg = SkillPackage::load_dir(dir.path()).unwrap();
        assert_eq!(pkg.scripts[0].0, "scripts/run.py");
        assert_eq!(pkg.assets[0].1, b"a,b\n");
    }
}

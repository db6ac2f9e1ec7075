use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    level2_heading, lines_with_fence_state, serialize_package, tokens::WordHeuristic, SkillPackage,
    TokenCounter, ASSETS_DIR, REFERENCES_DIR, SCRIPTS_DIR,
};

/// Activation-size and package-size limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetPolicy {
    pub activation_budget: usize,
    pub warning_threshold: usize,
    pub max_package_bytes: usize,
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        Self {
            activation_budget: 5000,
            warning_threshold: 3500,
            max_package_bytes: 1 << 22,
        }
    }
}

impl BudgetPolicy {
    pub fn check(&self) -> Result<(), String> {
        if self.warning_threshold == 0 || self.warning_threshold > self.activation_budget {
            return Err(format!(
                "need 0 < warning_threshold ({}) <= activation_budget ({})",
                self.warning_threshold, self.activation_budget
            ));
        }
        if self.max_package_bytes == 0 {
            return Err("max_package_bytes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IssueCode {
    EmptyName,
    EmptyDescription,
    BadPath,
    DuplicatePath,
    EmptyHeading,
    DuplicateHeading,
    EmbeddedHeading,
    MisplacedPreamble,
    EmptyPreamble,
    BudgetExceeded,
    PackageTooLarge,
    BudgetWarning,
    PackageNearLimit,
}

impl fmt::Display for IssueCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: IssueCode,
    /// Path or field the issue is about.
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
    pub activation_tokens: usize,
}

impl ValidationReport {
    pub fn has_error(&self, code: IssueCode) -> bool {
        self.errors.iter().any(|i| i.code == code)
    }

    pub fn has_warning(&self, code: IssueCode) -> bool {
        self.warnings.iter().any(|i| i.code == code)
    }

    /// First error code, used as a short rejection reason.
    pub fn first_error(&self) -> Option<IssueCode> {
        self.errors.first().map(|i| i.code)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} (activation tokens: {})",
            if self.valid { "valid" } else { "invalid" },
            self.activation_tokens
        )?;
        for issue in &self.errors {
            writeln!(f, "error   {} [{}] {}", issue.code, issue.location, issue.message)?;
        }
        for issue in &self.warnings {
            writeln!(f, "warning {} [{}] {}", issue.code, issue.location, issue.message)?;
        }
        Ok(())
    }
}

pub fn validate(pkg: &SkillPackage, policy: &BudgetPolicy) -> ValidationReport {
    validate_with(pkg, policy, &WordHeuristic)
}

fn path_problem(path: &str, prefix: &str) -> Option<String> {
    if !path.starts_with(prefix) {
        return Some(format!("must live under `{prefix}`"));
    }
    if path.len() == prefix.len() {
        return Some("empty file name".into());
    }
    if path.starts_with('/') || path.contains('\\') {
        return Some("must be a relative `/`-separated path".into());
    }
    if path.split('/').any(|c| c.is_empty() || c == "." || c == "..") {
        return Some("contains an empty, `.` or `..` component".into());
    }
    None
}

/// Reports schema, layout and budget problems. Never fails; everything found
/// is listed in the report.
pub fn validate_with(
    pkg: &SkillPackage,
    policy: &BudgetPolicy,
    counter: &dyn TokenCounter,
) -> ValidationReport {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut error = |code, location: &str, message: String| {
        errors.push(Issue {
            code,
            location: location.to_string(),
            message,
        })
    };

    if pkg.frontmatter.name().trim().is_empty() {
        error(IssueCode::EmptyName, "name", "name must be non-empty".into());
    }
    if pkg.frontmatter.description().trim().is_empty() {
        error(
            IssueCode::EmptyDescription,
            "description",
            "description must be non-empty".into(),
        );
    }

    let mut seen_paths = BTreeSet::new();
    let groups = [
        (SCRIPTS_DIR, pkg.scripts.iter().map(|(p, _)| p).collect::<Vec<_>>()),
        (REFERENCES_DIR, pkg.references.iter().map(|(p, _)| p).collect()),
        (ASSETS_DIR, pkg.assets.iter().map(|(p, _)| p).collect()),
    ];
    for (prefix, paths) in groups {
        for path in paths {
            if let Some(problem) = path_problem(path, prefix) {
                error(IssueCode::BadPath, path, problem);
            }
            if !seen_paths.insert(path.as_str()) {
                error(IssueCode::DuplicatePath, path, "path appears twice".into());
            }
        }
    }

    let mut seen_headings = BTreeSet::new();
    for (i, (heading, text)) in pkg.body_sections.iter().enumerate() {
        if heading.is_empty() {
            if i > 0 {
                error(
                    IssueCode::MisplacedPreamble,
                    "",
                    "the untitled preamble must be the first section".into(),
                );
            } else if text.is_empty() && pkg.body_sections.len() > 1 {
                error(
                    IssueCode::EmptyPreamble,
                    "",
                    "an empty preamble followed by headed sections cannot be written".into(),
                );
            }
        } else if heading.trim() != heading || heading.contains('\n') || level2_heading(&format!("## {heading}")) != Some(heading.as_str()) {
            error(
                IssueCode::EmptyHeading,
                heading,
                "heading must be a single trimmed line".into(),
            );
        }
        if !seen_headings.insert(heading.as_str()) {
            error(
                IssueCode::DuplicateHeading,
                heading,
                "heading appears twice".into(),
            );
        }
        let embedded = lines_with_fence_state(text)
            .any(|(line, fenced)| !fenced && level2_heading(line).is_some());
        if embedded {
            error(
                IssueCode::EmbeddedHeading,
                heading,
                "section text contains a level-2 heading".into(),
            );
        }
    }
    if pkg.body_sections.is_empty() {
        error(
            IssueCode::EmptyHeading,
            "",
            "SKILL.md body must hold at least one section".into(),
        );
    }

    let activation_tokens = counter.count(&pkg.skill_md());
    if activation_tokens > policy.activation_budget {
        error(
            IssueCode::BudgetExceeded,
            super::SKILL_MD,
            format!(
                "{activation_tokens} activation tokens exceed the budget of {}",
                policy.activation_budget
            ),
        );
    } else if activation_tokens > policy.warning_threshold {
        warnings.push(Issue {
            code: IssueCode::BudgetWarning,
            location: super::SKILL_MD.into(),
            message: format!(
                "{activation_tokens} activation tokens exceed the warning threshold of {}",
                policy.warning_threshold
            ),
        });
    }

    let bytes: usize = serialize_package(pkg).values().map(Vec::len).sum();
    if bytes > policy.max_package_bytes {
        errors.push(Issue {
            code: IssueCode::PackageTooLarge,
            location: String::new(),
            message: format!("{bytes} bytes exceed {}", policy.max_package_bytes),
        });
    } else if bytes * 10 > policy.max_package_bytes * 9 {
        warnings.push(Issue {
            code: IssueCode::PackageNearLimit,
            location: String::new(),
            message: format!(
                "{bytes} bytes are above 90% of {}",
                policy.max_package_bytes
            ),
        });
    }

    ValidationReport {
        valid: errors.is_empty(),
        errors,
        warnings,
        activation_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skill_package::{count_tokens, parse_package, Frontmatter};

    fn package(body: Vec<(&str, &str)>) -> SkillPackage {
        SkillPackage {
            root_name: "t".into(),
            frontmatter: Frontmatter::new("t", "test skill"),
            body_sections: body
                .into_iter()
                .map(|(h, t)| (h.to_string(), t.to_string()))
                .collect(),
            scripts: vec![],
            references: vec![],
            assets: vec![],
        }
    }

    /// Body filler so that the whole SKILL.md has exactly `tokens` tokens
    /// under the word heuristic; `tokens` must be reachable as ceil(4w/3).
    fn sized(tokens: usize) -> SkillPackage {
        let words = (0..tokens)
            .find(|w| (4 * w).div_ceil(3) == tokens)
            .expect("unreachable token count");
        let mut pkg = package(vec![("Body", "")]);
        let fixed = pkg.skill_md().split_whitespace().count();
        pkg.body_sections[0].1 = vec!["word"; words - fixed].join(" ");
        assert_eq!(count_tokens(&pkg.skill_md()), tokens);
        pkg
    }

    #[test]
    fn small_package_is_clean() {
        let report = validate(&package(vec![("Workflow", "steps")]), &BudgetPolicy::default());
        assert!(report.valid);
        assert!(report.warnings.is_empty());
        assert!(report.activation_tokens > 0);
    }

    #[test]
    fn warning_band() {
        let report = validate(&sized(3600), &BudgetPolicy::default());
        assert_eq!(report.activation_tokens, 3600);
        assert!(report.valid);
        assert!(report.has_warning(IssueCode::BudgetWarning));
    }

    #[test]
    fn over_budget() {
        let report = validate(&sized(5100), &BudgetPolicy::default());
        assert!(!report.valid);
        assert!(report.has_error(IssueCode::BudgetExceeded));
    }

    #[test]
    fn exact_boundaries() {
        let policy = BudgetPolicy::default();
        let at_warn = validate(&sized(3500), &policy);
        assert!(at_warn.valid && at_warn.warnings.is_empty());
        let at_budget = validate(&sized(5000), &policy);
        assert!(at_budget.valid && at_budget.has_warning(IssueCode::BudgetWarning));
        let over = validate(&sized(5002), &policy);
        assert!(over.has_error(IssueCode::BudgetExceeded));
    }

    #[test]
    fn schema_errors() {
        let mut pkg = package(vec![("A", "x"), ("B", "y\n## sneaky\nz")]);
        pkg.frontmatter.set_description("");
        pkg.references.push(("references/../etc".into(), "x".into()));
        pkg.scripts.push(("references/a.py".into(), "x".into()));
        pkg.assets.push(("assets/".into(), vec![]));
        let report = validate(&pkg, &BudgetPolicy::default());
        assert!(!report.valid);
        assert!(report.has_error(IssueCode::EmptyDescription));
        assert!(report.has_error(IssueCode::EmbeddedHeading));
        assert_eq!(
            report.errors.iter().filter(|i| i.code == IssueCode::BadPath).count(),
            3
        );
    }

    #[test]
    fn preamble_placement() {
        let report = validate(&package(vec![("A", "x"), ("", "y")]), &BudgetPolicy::default());
        assert!(report.has_error(IssueCode::MisplacedPreamble));
        let report = validate(&package(vec![("", ""), ("A", "x")]), &BudgetPolicy::default());
        assert!(report.has_error(IssueCode::EmptyPreamble));
    }

    #[test]
    fn package_size_limits() {
        let mut pkg = package(vec![("A", "x")]);
        pkg.assets.push(("assets/blob.bin".into(), vec![0u8; 1000]));
        let tight = BudgetPolicy {
            max_package_bytes: 1000,
            ..BudgetPolicy::default()
        };
        assert!(validate(&pkg, &tight).has_error(IssueCode::PackageTooLarge));
        let near = BudgetPolicy {
            max_package_bytes: 1100,
            ..BudgetPolicy::default()
        };
        let report = validate(&pkg, &near);
        assert!(report.valid && report.has_warning(IssueCode::PackageNearLimit));
    }

    #[test]
    fn valid_packages_reparse() {
        let pkg = package(vec![("", "intro"), ("A", "x\n```\n## fenced\n```")]);
        assert!(validate(&pkg, &BudgetPolicy::default()).valid);
        let back = parse_package(&serialize_package(&pkg)).unwrap();
        assert_eq!(back.body_sections, pkg.body_sections);
    }

    #[test]
    fn policy_invariants() {
        assert!(BudgetPolicy::default().check().is_ok());
        let bad = BudgetPolicy {
            warning_threshold: 6000,
            ..BudgetPolicy::default()
        };
        assert!(bad.check().is_err());
    }
}

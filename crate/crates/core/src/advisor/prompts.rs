//! Versioned prompt templates. Changing any template text requires a version
//! bump so recorded prompt digests stay comparable.

use super::{AnalysisInput, DiagnosisInput, Profile, ProposalInput, RefineInput};
use crate::skill_package::{ContentState, SkillPackage, Structure};
use crate::structure_edits::ActionKind;

pub const TEMPLATE_VERSION: &str = "v1";
pub const COMPREHEND: &str = "comprehend.v1";
pub const ANALYZE: &str = "analyze.v1";
pub const DIAGNOSE: &str = "diagnose.v1";
pub const PROPOSE: &str = "propose.v1";
pub const REFINE: &str = "refine_variant.v1";

fn header(template: &str) -> String {
    format!("[{template}]\n")
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        return "  (none)\n".into();
    }
    items.iter().map(|i| format!("  - {i}\n")).collect()
}

pub(crate) fn render_structure(s: &Structure) -> String {
    let headings: Vec<String> = s
        .section_headings
        .iter()
        .map(|h| if h.is_empty() { "(preamble)".to_string() } else { h.clone() })
        .collect();
    let set = |xs: &std::collections::BTreeSet<String>| xs.iter().cloned().collect::<Vec<_>>();
    format!(
        "sections:\n{}references:\n{}scripts:\n{}assets:\n{}frontmatter keys:\n{}",
        list(&headings),
        list(&set(&s.references)),
        list(&set(&s.scripts)),
        list(&set(&s.assets)),
        list(&set(&s.frontmatter_keys)),
    )
}

fn render_profile(p: &Profile) -> String {
    let mut out = format!("task: {}\nsuccess criteria:\n{}", p.task_summary, list(&p.success_criteria));
    out.push_str(&format!("quality dimensions:\n{}", list(&p.quality_dimensions)));
    out.push_str(&format!("promising directions:\n{}", list(&p.promising_directions)));
    if let Some(kinds) = &p.priority_action_kinds {
        let names: Vec<String> = kinds.iter().map(|k| k.name().to_string()).collect();
        out.push_str(&format!("priority actions: {}\n", names.join(", ")));
    }
    out
}

fn render_content(c: &ContentState, s: &Structure) -> String {
    let mut out = format!("description: {}\n", c.frontmatter.description());
    for h in &s.section_headings {
        let label = if h.is_empty() { "(preamble)" } else { h };
        out.push_str(&format!("--- section: {label}\n{}\n", c.section_bodies[h]));
    }
    for (p, t) in &c.reference_texts {
        out.push_str(&format!("--- reference: {p}\n{t}\n"));
    }
    for (p, t) in &c.script_texts {
        out.push_str(&format!("--- script: {p}\n{t}\n"));
    }
    out
}

pub fn comprehend(seed: &SkillPackage) -> String {
    let mut files = format!("--- SKILL.md\n{}", seed.skill_md());
    for (p, t) in seed.references.iter().chain(&seed.scripts) {
        files.push_str(&format!("--- {p}\n{t}\n"));
    }
    for (p, b) in &seed.assets {
        files.push_str(&format!("--- {p} ({} bytes, not shown)\n", b.len()));
    }
    let kinds: Vec<&str> = ActionKind::ALL.iter().map(|k| k.name()).collect();
    format!(
        "{}You are preparing an agent skill for structured optimization.\n\
         Summarize what the skill is for and where its structure could improve.\n\
         Reply with labeled lines only:\n\
         TASK_SUMMARY: <one line>\n\
         SUCCESS_CRITERIA: <one criterion; repeat the label per item>\n\
         QUALITY_DIMENSION: <one dimension; repeat per item>\n\
         PROMISING_DIRECTION: <one structural direction; repeat per item>\n\
         PRIORITY_ACTIONS: <comma-separated subset of: {}>\n\n\
         Skill files:\n{files}",
        header(COMPREHEND),
        kinds.join(", ")
    )
}

pub fn analyze(input: &AnalysisInput<'_>, budget: usize) -> String {
    format!(
        "{}Round {}. Examine the current skill structure and describe its state:\n\
         what each component does, what is missing, and what is redundant.\n\
         Answer in plain text, at most {budget} tokens.\n\n\
         Structure:\n{}\nEvaluation summary:\n{}\n\nProfile:\n{}\nConstraints:\n{}\n",
        header(ANALYZE),
        input.round,
        render_structure(input.structure),
        if input.summary_eval.is_empty() { "(none yet)" } else { input.summary_eval },
        render_profile(input.profile),
        input.constraints,
    )
}

pub fn diagnose(input: &DiagnosisInput<'_>, budget: usize) -> String {
    let experience: Vec<String> = input.experience.to_vec();
    format!(
        "{}Round {}. Using the analysis, the evaluator diagnostics and recent search\n\
         history, name the most likely root cause of the remaining errors and one\n\
         structural hypothesis that would address it. Quote the error patterns\n\
         you rely on. Answer in plain text, at most {budget} tokens.\n\n\
         Analysis:\n{}\n\nDiagnostics:\n{}\n\nRecent rounds:\n{}",
        header(DIAGNOSE),
        input.round,
        input.analysis,
        if input.diagnostics.is_empty() { "(none)" } else { input.diagnostics },
        list(&experience),
    )
}

pub fn propose(input: &ProposalInput<'_>) -> String {
    let catalog: String = input
        .catalog
        .iter()
        .map(|a| format!("  - {}  e.g. {}\n", a.kind.schema(), a.label()))
        .collect();
    format!(
        "{}Round {}. Turn the diagnosis into one structure edit, or a composite of up\n\
         to three edits applied in order. Use only the action kinds listed.\n\
         Reply with labeled lines:\n\
         ACTION: Kind(param=value, ...)   (repeat, or join with ` + `)\n\
         RATIONALE: <one line>\n\
         or reply NO_ACTION if no edit is worth making.\n\n\
         Diagnosis:\n{}\n\nCurrent structure:\n{}\nAvailable actions:\n{}\
         Already tried from this node:\n{}Warnings from earlier rounds:\n{}",
        header(PROPOSE),
        input.round,
        input.diagnosis,
        render_structure(input.parent),
        catalog,
        list(input.tried),
        list(input.warnings),
    )
}

pub fn refine(input: &RefineInput<'_>) -> String {
    format!(
        "{}Attempt {}. Refine the skill content under a fixed structure.\n\
         Family: {} (may edit: {}{}).\n\
         Give up to {} alternative variants. Each starts with a VARIANT line followed by edits:\n\
         SECTION: <heading>  then <<< , the full new body, >>>\n\
         APPEND_SECTION: <heading>  then <<< , text to append, >>>\n\
         REFERENCE: <path>  then <<< , full text, >>>\n\
         SCRIPT: <path>  then <<< , full text, >>>\n\
         DESCRIPTION: <new routing description>\n\
         METADATA: <existing key> = <value>\n\
         Write STOP on its own line if no further refinement is needed.\n\n\
         Profile:\n{}\nFeedback:\n{}\n\nCurrent content:\n{}",
        header(REFINE),
        input.attempt,
        input.family,
        input.family.editable_summary(),
        input
            .also
            .iter()
            .map(|f| format!("; {f}: {}", f.editable_summary()))
            .collect::<String>(),
        input.variants,
        render_profile(input.profile),
        if input.feedback.is_empty() { "(none)" } else { input.feedback },
        render_content(input.current, input.structure),
    )
}

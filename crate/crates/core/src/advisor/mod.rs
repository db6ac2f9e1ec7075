//! The reasoning interface driving the search: comprehension, the three
//! expansion stages, and family-specific content variants.
//!
//! [`PromptedAdvisor`] owns prompt construction, budget enforcement, response
//! parsing and the exchange log. Backends only turn a rendered request into
//! response text: [`ScriptedBackend`] from a playbook file, [`RemoteBackend`]
//! from a chat-completion endpoint.

mod parse;
mod prompts;
mod remote;
mod scripted;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::inner_refine::RefinementFamily;
use crate::skill_package::{
    derive_structure, extract_content, truncate_to_budget, ContentState, PackageError, SkillPackage, Structure,
    TokenCounter, WordHeuristic,
};
use crate::structure_edits::{ActionKind, EditAction};

pub use parse::{apply_content_edits, family_violation, scope_violation, parse_profile, parse_proposal, parse_refinement, ContentEdit};
pub use prompts::TEMPLATE_VERSION;
pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{Playbook, RoundScript, ScriptMode, ScriptedBackend};

#[derive(Debug, Error)]
pub enum AdvisorError {
    #[error("{stage} response could not be parsed after a retry: {reason}")]
    Unparseable { stage: Stage, reason: String },
    #[error("proposed `{label}` is not in the action catalog")]
    OutOfCatalog { label: String },
    #[error("advisor backend failed: {0}")]
    Backend(String),
    #[error(transparent)]
    Package(#[from] PackageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Comprehend,
    Analyze,
    Diagnose,
    Propose,
    RefineVariant,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Comprehend => "comprehend",
            Stage::Analyze => "analyze",
            Stage::Diagnose => "diagnose",
            Stage::Propose => "propose",
            Stage::RefineVariant => "refine_variant",
        };
        f.write_str(s)
    }
}

/// Persistent task summary and search prior built once from the seed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Profile {
    pub task_summary: String,
    pub success_criteria: Vec<String>,
    pub quality_dimensions: Vec<String>,
    pub promising_directions: Vec<String>,
    pub priority_action_kinds: Option<BTreeSet<ActionKind>>,
}

/// Per-call response caps in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageBudgets {
    pub comprehension: usize,
    pub analysis: usize,
    pub diagnosis: usize,
    pub proposal: usize,
    pub inner_refinement: usize,
}

impl Default for StageBudgets {
    fn default() -> Self {
        Self {
            comprehension: 1024,
            analysis: 1536,
            diagnosis: 1024,
            proposal: 20000,
            inner_refinement: 1024,
        }
    }
}

impl StageBudgets {
    pub fn for_stage(&self, stage: Stage) -> usize {
        match stage {
            Stage::Comprehend => self.comprehension,
            Stage::Analyze => self.analysis,
            Stage::Diagnose => self.diagnosis,
            Stage::Propose => self.proposal,
            Stage::RefineVariant => self.inner_refinement,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        let all = [
            self.comprehension,
            self.analysis,
            self.diagnosis,
            self.proposal,
            self.inner_refinement,
        ];
        if all.contains(&0) {
            return Err("stage budgets must be positive".into());
        }
        Ok(())
    }
}

/// Audit record of one stage call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvisorExchange {
    pub stage: Stage,
    pub template: String,
    pub prompt_digest: String,
    pub response: String,
    pub tokens_used: usize,
    pub truncated: bool,
    pub retries: usize,
}

/// Structured inputs a backend may use besides the prompt text. The remote
/// backend ignores them; the scripted one answers from them.
#[derive(Debug, Clone, Copy)]
pub enum StageContext<'a> {
    Comprehend {
        seed: &'a SkillPackage,
    },
    Analyze {
        round: usize,
        structure: &'a Structure,
    },
    Diagnose {
        round: usize,
        diagnostics: &'a str,
    },
    Propose {
        round: usize,
        parent: &'a Structure,
        catalog: &'a [EditAction],
        tried: &'a [String],
    },
    Refine {
        family: RefinementFamily,
        also: &'a [RefinementFamily],
        attempt: usize,
        variants: usize,
        content: &'a ContentState,
        structure: &'a Structure,
    },
}

#[derive(Debug, Clone)]
pub struct StageRequest<'a> {
    pub stage: Stage,
    pub template: &'static str,
    pub prompt: String,
    pub max_tokens: usize,
    /// Set on the reparse retry.
    pub retry_note: Option<String>,
    pub context: StageContext<'a>,
}

pub trait AdvisorBackend {
    fn complete(&mut self, request: &StageRequest<'_>) -> Result<String, AdvisorError>;
}

pub struct AnalysisInput<'a> {
    pub round: usize,
    pub structure: &'a Structure,
    pub summary_eval: &'a str,
    pub profile: &'a Profile,
    pub constraints: &'a str,
}

pub struct DiagnosisInput<'a> {
    pub round: usize,
    pub analysis: &'a str,
    pub diagnostics: &'a str,
    /// Summaries of the most recent rounds, oldest first.
    pub experience: &'a [String],
}

pub struct ProposalInput<'a> {
    pub round: usize,
    pub parent: &'a Structure,
    pub diagnosis: &'a str,
    pub catalog: &'a [EditAction],
    pub warnings: &'a [String],
    /// Labels already expanded from this parent.
    pub tried: &'a [String],
}

pub struct RefineInput<'a> {
    pub family: RefinementFamily,
    /// Other families of a composite edit; their scopes are editable too.
    pub also: &'a [RefinementFamily],
    pub attempt: usize,
    pub variants: usize,
    pub current: &'a ContentState,
    pub structure: &'a Structure,
    pub profile: &'a Profile,
    pub feedback: &'a str,
}

/// An ordered composite; empty means the advisor declined to edit.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Proposal {
    pub actions: Vec<EditAction>,
    pub rationale: String,
}

impl Proposal {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RefineOutcome {
    /// Candidate contents in variant order, family violations removed.
    pub variants: Vec<ContentState>,
    pub violations: Vec<String>,
    /// The advisor judged further attempts unnecessary.
    pub stop: bool,
}

pub trait Advisor {
    fn comprehend(&mut self, seed: &SkillPackage) -> Result<(Structure, ContentState, Profile), AdvisorError>;
    fn analyze(&mut self, input: &AnalysisInput<'_>) -> Result<String, AdvisorError>;
    fn diagnose(&mut self, input: &DiagnosisInput<'_>) -> Result<String, AdvisorError>;
    fn propose_action(&mut self, input: &ProposalInput<'_>) -> Result<Proposal, AdvisorError>;
    fn refine_variant(&mut self, input: &RefineInput<'_>) -> Result<RefineOutcome, AdvisorError>;
    fn exchanges(&self) -> &[AdvisorExchange];
}

pub struct PromptedAdvisor<B> {
    pub backend: B,
    pub budgets: StageBudgets,
    log: Vec<AdvisorExchange>,
}

pub type ScriptedAdvisor = PromptedAdvisor<ScriptedBackend>;
pub type RemoteAdvisor = PromptedAdvisor<RemoteBackend>;

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

impl<B: AdvisorBackend> PromptedAdvisor<B> {
    pub fn new(backend: B, budgets: StageBudgets) -> Self {
        Self {
            backend,
            budgets,
            log: Vec::new(),
        }
    }

    /// Writes the exchange log as one JSON record per line.
    pub fn write_log(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        for ex in &self.log {
            serde_json::to_writer(&mut f, ex)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Sends the request, caps the response, parses it, and retries once
    /// with the parse error attached.
    fn call<T>(
        &mut self,
        mut request: StageRequest<'_>,
        parse: impl Fn(&str, bool) -> Result<T, String>,
    ) -> Result<T, AdvisorError> {
        let mut retries = 0;
        loop {
            let raw = self.backend.complete(&request)?;
            let (response, truncated) = truncate_to_budget(&WordHeuristic, &raw, request.max_tokens);
            let parsed = parse(&response, truncated);
            self.log.push(AdvisorExchange {
                stage: request.stage,
                template: request.template.to_string(),
                prompt_digest: prompt_digest(&request.prompt),
                tokens_used: WordHeuristic.count(&response),
                response,
                truncated,
                retries,
            });
            match parsed {
                Ok(v) => return Ok(v),
                Err(reason) if retries >= 1 => {
                    return Err(AdvisorError::Unparseable {
                        stage: request.stage,
                        reason,
                    })
                }
                Err(reason) => {
                    retries += 1;
                    request.retry_note = Some(reason);
                }
            }
        }
    }

    fn request<'a>(&self, stage: Stage, template: &'static str, prompt: String, context: StageContext<'a>) -> StageRequest<'a> {
        StageRequest {
            stage,
            template,
            prompt,
            max_tokens: self.budgets.for_stage(stage),
            retry_note: None,
            context,
        }
    }
}

fn nonempty_text(text: &str, _truncated: bool) -> Result<String, String> {
    let t = text.trim();
    if t.is_empty() {
        Err("empty response".into())
    } else {
        Ok(t.to_string())
    }
}

/// Lines of the evaluator diagnostics that name an error pattern.
fn pattern_lines(diagnostics: &str) -> impl Iterator<Item = &str> {
    diagnostics.lines().map(str::trim).filter(|l| {
        l.starts_with("answered ") || l.starts_with("errors by question type") || l.starts_with("unparseable output")
    })
}

impl<B: AdvisorBackend> Advisor for PromptedAdvisor<B> {
    fn comprehend(&mut self, seed: &SkillPackage) -> Result<(Structure, ContentState, Profile), AdvisorError> {
        let structure = derive_structure(seed);
        let content = extract_content(seed, &structure)?;
        let prompt = prompts::comprehend(seed);
        let req = self.request(Stage::Comprehend, prompts::COMPREHEND, prompt, StageContext::Comprehend { seed });
        let profile = self.call(req, |text, _| parse_profile(text))?;
        Ok((structure, content, profile))
    }

    fn analyze(&mut self, input: &AnalysisInput<'_>) -> Result<String, AdvisorError> {
        let prompt = prompts::analyze(input, self.budgets.analysis);
        let req = self.request(
            Stage::Analyze,
            prompts::ANALYZE,
            prompt,
            StageContext::Analyze {
                round: input.round,
                structure: input.structure,
            },
        );
        self.call(req, nonempty_text)
    }

    fn diagnose(&mut self, input: &DiagnosisInput<'_>) -> Result<String, AdvisorError> {
        let prompt = prompts::diagnose(input, self.budgets.diagnosis);
        let req = self.request(
            Stage::Diagnose,
            prompts::DIAGNOSE,
            prompt,
            StageContext::Diagnose {
                round: input.round,
                diagnostics: input.diagnostics,
            },
        );
        let mut text = self.call(req, nonempty_text)?;
        // The proposal stage only sees the diagnosis, so evaluator patterns
        // the backend left out are appended verbatim.
        let missing: Vec<&str> = pattern_lines(input.diagnostics).filter(|l| !text.contains(l)).collect();
        if !missing.is_empty() {
            text.push_str("\nObserved: ");
            text.push_str(&missing.join("; "));
        }
        Ok(text)
    }

    fn propose_action(&mut self, input: &ProposalInput<'_>) -> Result<Proposal, AdvisorError> {
        let prompt = prompts::propose(input);
        let req = self.request(
            Stage::Propose,
            prompts::PROPOSE,
            prompt,
            StageContext::Propose {
                round: input.round,
                parent: input.parent,
                catalog: input.catalog,
                tried: input.tried,
            },
        );
        let proposal = self.call(req, |text, _| parse_proposal(text))?;
        let allowed: BTreeSet<ActionKind> = input.catalog.iter().map(|a| a.kind).collect();
        if let Some(bad) = proposal.actions.iter().find(|a| !allowed.contains(&a.kind)) {
            return Err(AdvisorError::OutOfCatalog { label: bad.label() });
        }
        Ok(proposal)
    }

    fn refine_variant(&mut self, input: &RefineInput<'_>) -> Result<RefineOutcome, AdvisorError> {
        let prompt = prompts::refine(input);
        let req = self.request(
            Stage::RefineVariant,
            prompts::REFINE,
            prompt,
            StageContext::Refine {
                family: input.family,
                also: input.also,
                attempt: input.attempt,
                variants: input.variants,
                content: input.current,
                structure: input.structure,
            },
        );
        let parsed = self.call(req, parse_refinement)?;
        let mut out = RefineOutcome {
            stop: parsed.stop,
            ..RefineOutcome::default()
        };
        for (i, edits) in parsed.variants.into_iter().take(input.variants.max(1)).enumerate() {
            let candidate = apply_content_edits(input.current, &edits)
                .and_then(|c| match scope_violation(input.family, input.also, input.current, &c) {
                    Some(v) => Err(v),
                    None => Ok(c),
                });
            match candidate {
                Ok(c) => out.variants.push(c),
                Err(v) => out.violations.push(format!("variant {}: {v}", i + 1)),
            }
        }
        Ok(out)
    }

    fn exchanges(&self) -> &[AdvisorExchange] {
        &self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skill_package::parse_package;
    use std::collections::BTreeMap;

    /// Returns canned responses in order.
    struct Canned(Vec<String>);

    impl AdvisorBackend for Canned {
        fn complete(&mut self, _: &StageRequest<'_>) -> Result<String, AdvisorError> {
            if self.0.is_empty() {
                return Err(AdvisorError::Backend("no more responses".into()));
            }
            Ok(self.0.remove(0))
        }
    }

    fn canned(responses: &[&str]) -> PromptedAdvisor<Canned> {
        PromptedAdvisor::new(
            Canned(responses.iter().map(|s| s.to_string()).collect()),
            StageBudgets::default(),
        )
    }

    fn seed() -> SkillPackage {
        let mut snap = BTreeMap::new();
        snap.insert(
            "SKILL.md".to_string(),
            b"---\nname: orqa\ndescription: d\n---\n## Workflow\nsteps\n".to_vec(),
        );
        snap.insert("references/question-types.md".to_string(), b"types\n".to_vec());
        parse_package(&snap).unwrap()
    }

    #[test]
    fn comprehension_parses_profile_and_computes_views_locally() {
        let mut adv = canned(&["TASK_SUMMARY: ORQA model formulation\nPRIORITY_ACTIONS: InlineReference, AddSection\n"]);
        let pkg = seed();
        let (s, c, p) = adv.comprehend(&pkg).unwrap();
        assert_eq!(s, derive_structure(&pkg));
        assert_eq!(c.reference_texts.len(), 1);
        assert_eq!(p.task_summary, "ORQA model formulation");
        assert_eq!(p.priority_action_kinds.unwrap().len(), 2);
        assert_eq!(adv.exchanges()[0].stage, Stage::Comprehend);
    }

    #[test]
    fn over_budget_response_is_truncated_and_flagged() {
        let long = format!("TASK_SUMMARY: {}", "word ".repeat(2000));
        let mut adv = canned(&[&long]);
        adv.comprehend(&seed()).unwrap();
        let ex = &adv.exchanges()[0];
        assert!(ex.truncated);
        assert!(ex.tokens_used <= 1024);
    }

    #[test]
    fn one_reparse_retry() {
        let catalog = vec![EditAction::new(ActionKind::AddSection).with("heading", "X")];
        let s = derive_structure(&seed());
        let input = ProposalInput {
            round: 1,
            parent: &s,
            diagnosis: "d",
            catalog: &catalog,
            warnings: &[],
            tried: &[],
        };
        let mut adv = canned(&["nonsense", "ACTION: AddSection(heading=Checks)\nRATIONALE: r"]);
        let p = adv.propose_action(&input).unwrap();
        assert_eq!(p.actions[0].param("heading"), Some("Checks"));
        assert_eq!(adv.exchanges()[1].retries, 1);

        let mut adv = canned(&["nonsense", "still nonsense"]);
        assert!(matches!(
            adv.propose_action(&input),
            Err(AdvisorError::Unparseable { stage: Stage::Propose, .. })
        ));
    }

    #[test]
    fn out_of_catalog() {
        let catalog = vec![EditAction::new(ActionKind::AddSection).with("heading", "X")];
        let s = derive_structure(&seed());
        let input = ProposalInput {
            round: 1,
            parent: &s,
            diagnosis: "d",
            catalog: &catalog,
            warnings: &[],
            tried: &[],
        };
        let mut adv = canned(&["ACTION: RemoveScript(path=scripts/a.py)"]);
        assert!(matches!(adv.propose_action(&input), Err(AdvisorError::OutOfCatalog { .. })));
    }

    #[test]
    fn diagnosis_echoes_patterns() {
        let mut adv = canned(&["The agent confuses component types."]);
        let diag = "exact match 3/4 (0.7500)\nanswered C where B was correct: 1\n";
        let text = adv
            .diagnose(&DiagnosisInput {
                round: 1,
                analysis: "a",
                diagnostics: diag,
                experience: &[],
            })
            .unwrap();
        assert!(text.contains("answered C where B was correct: 1"));
    }

    #[test]
    fn family_violation_discards_variant() {
        let pkg = seed();
        let s = derive_structure(&pkg);
        let c = extract_content(&pkg, &s).unwrap();
        let mut adv = canned(&[
            "VARIANT\nAPPEND_SECTION: Workflow\n<<<\nmore\n>>>\nVARIANT\nDESCRIPTION: better routing\n",
        ]);
        let out = adv
            .refine_variant(&RefineInput {
                family: RefinementFamily::MetadataRoutingText,
                also: &[],
                attempt: 1,
                variants: 2,
                current: &c,
                structure: &s,
                profile: &Profile::default(),
                feedback: "",
            })
            .unwrap();
        assert_eq!(out.variants.len(), 1);
        assert_eq!(out.variants[0].frontmatter.description(), "better routing");
        assert_eq!(out.violations.len(), 1);
    }
}

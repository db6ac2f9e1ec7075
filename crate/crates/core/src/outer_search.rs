//! The outer loop: Monte Carlo tree search over structures. Each round
//! selects a parent, asks the advisor for an edit, refines content for the
//! new structure, evaluates it and backpropagates the reward.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{Advisor, AdvisorError, AnalysisInput, DiagnosisInput, Profile, ProposalInput};
use crate::evaluation::{EvalError, Evaluator};
use crate::inner_refine::{
    align_content, dispatch_family, rank_and_select, refine, secondary_families, AttemptRecord, InnerError, RefineContext,
    RefinementBudget, RefinementFamily,
};
use crate::skill_package::{recompose, validate, BudgetPolicy, ContentState, SkillPackage, Structure};
use crate::structure_edits::{admissible_actions, apply_composite, composite_label, ActionKind, CarriedNote, EditAction};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("the tree has no selectable node")]
    EmptyTree,
    #[error("no node with id {0}")]
    UnknownNode(usize),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("seed skill is invalid: {0}")]
    SeedInvalid(String),
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("advisor failure: {0}")]
    AdvisorFailure(#[from] AdvisorError),
    #[error(transparent)]
    Inner(#[from] InnerError),
    #[error(transparent)]
    Evaluator(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPolicy {
    #[serde(alias = "UCB1")]
    Ucb1,
    #[serde(alias = "Mixed", alias = "mixed-probability")]
    Mixed,
}

/// Outer-loop settings. Field names follow the sweep-table vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub max_rounds: usize,
    pub selection_policy: SelectionPolicy,
    #[serde(default = "default_c")]
    pub exploration_constant: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub min_rounds_before_convergence: usize,
    pub stale_rounds_to_stop: usize,
    pub improvement_threshold: f64,
    #[serde(default)]
    pub action_whitelist: Option<BTreeSet<ActionKind>>,
    /// Restrict proposals to the profile's priority action kinds.
    #[serde(default)]
    pub enforce_profile_priorities: bool,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_cap")]
    pub composite_cap: usize,
}

fn default_c() -> f64 {
    1.2
}
fn default_alpha() -> f64 {
    0.55
}
fn default_lambda() -> f64 {
    0.25
}
fn default_cap() -> usize {
    3
}

impl SearchConfig {
    /// The conservative sweep setting: short UCB1 search with priority whitelist.
    pub fn config_a() -> Self {
        Self {
            max_rounds: 3,
            selection_policy: SelectionPolicy::Ucb1,
            exploration_constant: 1.2,
            alpha: default_alpha(),
            lambda: default_lambda(),
            min_rounds_before_convergence: 2,
            stale_rounds_to_stop: 2,
            improvement_threshold: 0.001,
            action_whitelist: None,
            enforce_profile_priorities: true,
            rng_seed: 0,
            composite_cap: 3,
        }
    }

    /// The exploratory sweep setting: longer mixed-probability search.
    pub fn config_b() -> Self {
        Self {
            max_rounds: 6,
            selection_policy: SelectionPolicy::Mixed,
            exploration_constant: default_c(),
            alpha: 0.55,
            lambda: 0.25,
            min_rounds_before_convergence: 3,
            stale_rounds_to_stop: 3,
            improvement_threshold: 0.001,
            action_whitelist: None,
            enforce_profile_priorities: false,
            rng_seed: 0,
            composite_cap: 3,
        }
    }

    pub fn check(&self) -> Result<(), SearchError> {
        let err = |m: &str| Err(SearchError::Config(m.into()));
        if self.max_rounds < 1 {
            return err("max_rounds must be at least 1");
        }
        if self.composite_cap < 1 {
            return err("composite_cap must be at least 1");
        }
        if !(self.improvement_threshold >= 0.0) {
            return err("improvement_threshold must be nonnegative");
        }
        match self.selection_policy {
            SelectionPolicy::Ucb1 if !(self.exploration_constant >= 0.0 && self.exploration_constant.is_finite()) => {
                err("exploration_constant must be a nonnegative number")
            }
            SelectionPolicy::Mixed if !(self.alpha > 0.0 && self.alpha.is_finite()) => err("alpha must be positive"),
            SelectionPolicy::Mixed if !(0.0..=1.0).contains(&self.lambda) => err("lambda must lie in [0, 1]"),
            _ => Ok(()),
        }
    }

    fn whitelist(&self, profile: &Profile) -> Option<BTreeSet<ActionKind>> {
        let priorities = profile.priority_action_kinds.as_ref().filter(|_| self.enforce_profile_priorities);
        match (&self.action_whitelist, priorities) {
            (None, None) => None,
            (Some(w), None) | (None, Some(w)) => Some(w.clone()),
            (Some(a), Some(b)) => Some(a.intersection(b).copied().collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub structure: Structure,
    pub content: ContentState,
    pub visit_count: u64,
    pub mean_reward: f64,
    /// The (possibly composite) edit that produced this node from its parent.
    pub producing_action: Option<Vec<EditAction>>,
    pub reward_at_creation: f64,
    pub diagnostics: String,
    /// Labels of edits already proposed from this node.
    pub tried: Vec<String>,
    /// The advisor has nothing left to propose here.
    pub exhausted: bool,
}

impl SearchNode {
    pub fn action_label(&self) -> Option<String> {
        self.producing_action.as_deref().map(composite_label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
    pub root_id: usize,
    pub best_id: usize,
}

impl SearchTree {
    /// A root with no visits yet; backpropagate its reward to initialize it.
    pub fn new(structure: Structure, content: ContentState, reward: f64, diagnostics: String) -> Self {
        Self {
            nodes: vec![SearchNode {
                id: 0,
                parent: None,
                children: Vec::new(),
                structure,
                content,
                visit_count: 0,
                mean_reward: 0.0,
                producing_action: None,
                reward_at_creation: reward,
                diagnostics,
                tried: Vec::new(),
                exhausted: false,
            }],
            root_id: 0,
            best_id: 0,
        }
    }

    pub fn node(&self, id: usize) -> Result<&SearchNode, SearchError> {
        self.nodes.get(id).ok_or(SearchError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: usize) -> Result<&mut SearchNode, SearchError> {
        self.nodes.get_mut(id).ok_or(SearchError::UnknownNode(id))
    }

    pub fn total_visits(&self) -> u64 {
        self.nodes.iter().map(|n| n.visit_count).sum()
    }

    /// Evaluated nodes the advisor has not exhausted, in id order.
    pub fn selectable(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.visit_count >= 1 && !n.exhausted)
            .map(|n| n.id)
            .collect()
    }

    /// Adds an unvisited child and updates `best_id` on strict improvement.
    pub fn attach(
        &mut self,
        parent: usize,
        structure: Structure,
        content: ContentState,
        action: Vec<EditAction>,
        reward: f64,
        diagnostics: String,
    ) -> Result<usize, SearchError> {
        let id = self.nodes.len();
        self.node_mut(parent)?.children.push(id);
        self.nodes.push(SearchNode {
            id,
            parent: Some(parent),
            children: Vec::new(),
            structure,
            content,
            visit_count: 0,
            mean_reward: 0.0,
            producing_action: Some(action),
            reward_at_creation: reward,
            diagnostics,
            tried: Vec::new(),
            exhausted: false,
        });
        if reward > self.nodes[self.best_id].reward_at_creation {
            self.best_id = id;
        }
        Ok(id)
    }

    /// Node ids from the root to `id`.
    pub fn path_to(&self, id: usize) -> Result<Vec<usize>, SearchError> {
        let mut path = vec![id];
        let mut cur = self.node(id)?;
        while let Some(p) = cur.parent {
            path.push(p);
            cur = self.node(p)?;
        }
        path.reverse();
        Ok(path)
    }
}

/// `q + c * sqrt(ln(total) / n)`.
pub fn ucb1_score(mean_reward: f64, visits: u64, total_visits: u64, c: f64) -> Result<f64, SearchError> {
    if total_visits < 1 {
        return Err(SearchError::DomainError("total visits must be at least 1".into()));
    }
    if visits < 1 || visits > total_visits {
        return Err(SearchError::DomainError(format!(
            "node visits {visits} outside 1..={total_visits}"
        )));
    }
    Ok(mean_reward + c * ((total_visits as f64).ln() / visits as f64).sqrt())
}

/// Argmax of UCB1 over the selectable set; ties go to the lowest id.
pub fn select_ucb1(tree: &SearchTree, c: f64) -> Result<usize, SearchError> {
    let total = tree.total_visits();
    let mut best: Option<(usize, f64)> = None;
    for id in tree.selectable() {
        let n = &tree.nodes[id];
        let score = ucb1_score(n.mean_reward, n.visit_count, total, c)?;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((id, score));
        }
    }
    best.map(|(id, _)| id).ok_or(SearchError::EmptyTree)
}

/// `lambda / |N| + (1 - lambda) * softmax(alpha * (q - mean q))`.
pub fn mixed_probabilities(values: &[f64], lambda: f64, alpha: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let centered: Vec<f64> = values.iter().map(|q| alpha * (q - mean)).collect();
    // Shifting by the max leaves the softmax unchanged and avoids overflow.
    let max = centered.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = centered.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    weights.iter().map(|w| lambda / n + (1.0 - lambda) * w / z).collect()
}

/// The selectable ids with their mixed-policy probabilities.
pub fn selection_distribution(tree: &SearchTree, lambda: f64, alpha: f64) -> Vec<(usize, f64)> {
    let ids = tree.selectable();
    let q: Vec<f64> = ids.iter().map(|&id| tree.nodes[id].mean_reward).collect();
    ids.into_iter().zip(mixed_probabilities(&q, lambda, alpha)).collect()
}

/// One draw from the mixed policy.
pub fn select_mixed(tree: &SearchTree, lambda: f64, alpha: f64, rng: &mut impl Rng) -> Result<usize, SearchError> {
    let dist = selection_distribution(tree, lambda, alpha);
    let last = dist.last().ok_or(SearchError::EmptyTree)?.0;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (id, p) in &dist {
        acc += p;
        if u < acc {
            return Ok(*id);
        }
    }
    Ok(last)
}

/// Adds one visit and the reward to every node from `node_id` up to the root.
pub fn backpropagate(tree: &mut SearchTree, node_id: usize, reward: f64) -> Result<(), SearchError> {
    for id in tree.path_to(node_id)? {
        let n = &mut tree.nodes[id];
        n.visit_count += 1;
        n.mean_reward += (reward - n.mean_reward) / n.visit_count as f64;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Stagnation,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Continue,
    Stop(StopReason),
}

/// Checked after round `round_index` completes.
pub fn check_termination(tree: &SearchTree, config: &SearchConfig, round_index: usize, stale_counter: usize) -> Termination {
    if round_index >= config.max_rounds {
        Termination::Stop(StopReason::Budget)
    } else if stale_counter >= config.stale_rounds_to_stop && round_index >= config.min_rounds_before_convergence {
        Termination::Stop(StopReason::Stagnation)
    } else if tree.selectable().is_empty() {
        Termination::Stop(StopReason::Exhausted)
    } else {
        Termination::Continue
    }
}

/// A structure edit that passed the validation gate, with its bridged content.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedCandidate {
    pub structure: Structure,
    pub actions: Vec<EditAction>,
    pub carried_note: CarriedNote,
    pub aligned: ContentState,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expansion {
    Valid(ValidatedCandidate),
    /// The proposal failed the gate; `label` is `None` when nothing parsed.
    Rejected { label: Option<String>, reason: String },
    /// The advisor declined, or no action kind applies.
    NoProposal,
}

/// Inputs to one expansion besides the tree and advisor.
pub struct ExpansionContext<'a> {
    pub round: usize,
    pub profile: &'a Profile,
    pub policy: &'a BudgetPolicy,
    pub whitelist: Option<&'a BTreeSet<ActionKind>>,
    pub composite_cap: usize,
    pub best_reward: f64,
    pub warnings: &'a [String],
    pub experience: &'a [String],
}

pub fn constraints_text(policy: &BudgetPolicy) -> String {
    format!(
        "SKILL.md (frontmatter and body) must stay within {} tokens; above {} tokens it is flagged.\n\
         The whole package must stay under {} bytes.\n\
         Section headings are unique; files live under scripts/, references/ or assets/.",
        policy.activation_budget, policy.warning_threshold, policy.max_package_bytes
    )
}

/// Runs analysis, diagnosis and proposal at `parent_id`, applies the edit
/// and gates the result on validity and budget.
pub fn expand(
    tree: &SearchTree,
    parent_id: usize,
    advisor: &mut dyn Advisor,
    ctx: &ExpansionContext<'_>,
) -> Result<Expansion, SearchError> {
    let parent = tree.node(parent_id)?;
    let catalog = admissible_actions(&parent.structure, ctx.whitelist);
    if catalog.is_empty() {
        return Ok(Expansion::NoProposal);
    }
    let summary = format!(
        "node {parent_id}: reward {:.4}, visits {}, mean {:.4}; best so far {:.4}",
        parent.reward_at_creation, parent.visit_count, parent.mean_reward, ctx.best_reward
    );
    let constraints = constraints_text(ctx.policy);
    let analysis = advisor.analyze(&AnalysisInput {
        round: ctx.round,
        structure: &parent.structure,
        summary_eval: &summary,
        profile: ctx.profile,
        constraints: &constraints,
    })?;
    let diagnosis = advisor.diagnose(&DiagnosisInput {
        round: ctx.round,
        analysis: &analysis,
        diagnostics: &parent.diagnostics,
        experience: ctx.experience,
    })?;
    let proposal = match advisor.propose_action(&ProposalInput {
        round: ctx.round,
        parent: &parent.structure,
        diagnosis: &diagnosis,
        catalog: &catalog,
        warnings: ctx.warnings,
        tried: &parent.tried,
    }) {
        Ok(p) => p,
        Err(AdvisorError::OutOfCatalog { label }) => {
            return Ok(Expansion::Rejected {
                reason: format!("OutOfCatalog: {label}"),
                label: Some(label),
            })
        }
        Err(e) => return Err(e.into()),
    };
    if proposal.is_empty() {
        return Ok(Expansion::NoProposal);
    }
    let label = composite_label(&proposal.actions);
    let rejected = |reason: String| Ok(Expansion::Rejected {
        label: Some(label.clone()),
        reason,
    });
    let outcome = match apply_composite(&parent.structure, &proposal.actions, ctx.composite_cap) {
        Ok(o) => o,
        Err(e) => return rejected(format!("Inadmissible: {e}")),
    };
    let aligned = match align_content(&parent.content, &parent.structure, &outcome.new_structure, &outcome.carried_note) {
        Ok(c) => c,
        Err(e) => return rejected(e.to_string()),
    };
    let skeleton = recompose(&aligned, &outcome.new_structure).map_err(|e| InnerError::BridgeFailure(e.to_string()))?;
    let report = validate(&skeleton, ctx.policy);
    if let Some(code) = report.first_error() {
        return rejected(format!("{code:?}: {report}"));
    }
    Ok(Expansion::Valid(ValidatedCandidate {
        structure: outcome.new_structure,
        actions: proposal.actions,
        carried_note: outcome.carried_note,
        aligned,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundOutcome {
    Accepted,
    Rejected,
    NoProposal,
}

/// Short form of an attempt for the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptSummary {
    pub attempt: usize,
    pub valid: bool,
    pub deltas: Vec<f64>,
    pub mean_delta: f64,
    pub lcb: f64,
    pub gate_passed: bool,
    pub confidence: f64,
    pub reward: f64,
    pub content_digest: Option<String>,
}

impl From<&AttemptRecord> for AttemptSummary {
    fn from(r: &AttemptRecord) -> Self {
        Self {
            attempt: r.attempt_index,
            valid: r.content.is_some(),
            deltas: r.deltas.clone(),
            mean_delta: r.mean_delta,
            lcb: r.lcb,
            gate_passed: r.gate_passed,
            confidence: r.confidence,
            reward: r.reward,
            content_digest: r.content_digest.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: usize,
    pub proposed: Option<String>,
    pub outcome: RoundOutcome,
    pub reason: Option<String>,
    pub family: Option<RefinementFamily>,
    pub attempts: Vec<AttemptSummary>,
    /// Gate status of the accepted attempt, `None` when nothing was refined.
    pub gate_passed: Option<bool>,
    pub new_node: Option<usize>,
    pub reward: Option<f64>,
    pub best_reward: f64,
    pub improvement: f64,
    pub stale_counter: usize,
    pub stop: Option<StopReason>,
}

impl RoundRecord {
    fn experience_line(&self) -> String {
        let what = self.proposed.as_deref().unwrap_or("no proposal");
        match (self.outcome, self.reward) {
            (RoundOutcome::Accepted, Some(r)) => {
                format!("round {}: {what} from node {} scored {r:.4}", self.round, self.selected)
            }
            _ => format!(
                "round {}: {what} from node {} was not admitted ({})",
                self.round,
                self.selected,
                self.reason.as_deref().unwrap_or("-")
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_structure: Structure,
    pub best_content: ContentState,
    pub best_reward: f64,
    pub best_id: usize,
    pub seed_reward: f64,
    pub profile: Profile,
    pub tree: SearchTree,
    pub round_log: Vec<RoundRecord>,
    pub stop_reason: StopReason,
}

impl SearchResult {
    pub fn accepted_rounds(&self) -> usize {
        self.round_log.iter().filter(|r| r.outcome == RoundOutcome::Accepted).count()
    }

    pub fn best_package(&self) -> SkillPackage {
        recompose(&self.best_content, &self.best_structure).expect("node content matches its structure")
    }

    /// One JSON record per round.
    pub fn write_round_log(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        for r in &self.round_log {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// The full bilevel search from a seed skill.
pub fn run_search(
    seed: &SkillPackage,
    config: &SearchConfig,
    inner: &RefinementBudget,
    policy: &BudgetPolicy,
    advisor: &mut dyn Advisor,
    evaluator: &mut dyn Evaluator,
) -> Result<SearchResult, SearchError> {
    config.check()?;
    inner.check().map_err(SearchError::Config)?;
    let report = validate(seed, policy);
    if !report.valid {
        return Err(SearchError::SeedInvalid(report.to_string()));
    }
    let (structure, content, profile) = advisor.comprehend(seed)?;
    let root_eval = evaluator.evaluate(&structure, &content)?;
    let mut tree = SearchTree::new(structure, content, root_eval.reward, root_eval.diagnostics);
    backpropagate(&mut tree, 0, root_eval.reward)?;
    let seed_reward = root_eval.reward;
    let mut best_reward = seed_reward;

    let whitelist = config.whitelist(&profile);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut stale = 0usize;
    let mut warnings: Vec<String> = Vec::new();
    let mut log: Vec<RoundRecord> = Vec::new();
    let mut stop_reason = StopReason::Budget;

    for round in 1..=config.max_rounds {
        if tree.selectable().is_empty() {
            stop_reason = StopReason::Exhausted;
            break;
        }
        let selected = match config.selection_policy {
            SelectionPolicy::Ucb1 => select_ucb1(&tree, config.exploration_constant)?,
            SelectionPolicy::Mixed => select_mixed(&tree, config.lambda, config.alpha, &mut rng)?,
        };
        let experience: Vec<String> = log.iter().rev().take(3).rev().map(RoundRecord::experience_line).collect();
        let expansion = expand(
            &tree,
            selected,
            advisor,
            &ExpansionContext {
                round,
                profile: &profile,
                policy,
                whitelist: whitelist.as_ref(),
                composite_cap: config.composite_cap,
                best_reward,
                warnings: &warnings,
                experience: &experience,
            },
        )?;
        let mut record = RoundRecord {
            round,
            selected,
            proposed: None,
            outcome: RoundOutcome::NoProposal,
            reason: None,
            family: None,
            attempts: Vec::new(),
            gate_passed: None,
            new_node: None,
            reward: None,
            best_reward,
            improvement: 0.0,
            stale_counter: 0,
            stop: None,
        };
        match expansion {
            Expansion::NoProposal => {
                tree.nodes[selected].exhausted = true;
                record.reason = Some("advisor has no further proposal here".into());
            }
            Expansion::Rejected { label, reason } => {
                warnings.push(format!("round {round}: {} rejected: {reason}", label.as_deref().unwrap_or("proposal")));
                if let Some(l) = &label {
                    tree.nodes[selected].tried.push(l.clone());
                }
                record.outcome = RoundOutcome::Rejected;
                record.proposed = label;
                record.reason = Some(reason);
            }
            Expansion::Valid(candidate) => {
                let label = composite_label(&candidate.actions);
                tree.nodes[selected].tried.push(label.clone());
                let family = dispatch_family(&candidate.actions);
                let also = secondary_families(&candidate.actions);
                let parent = &tree.nodes[selected];
                let records = refine(
                    &candidate.aligned,
                    &RefineContext {
                        structure: &candidate.structure,
                        family,
                        also: &also,
                        profile: &profile,
                        policy,
                        budget: *inner,
                        baseline_reward: parent.reward_at_creation,
                        feedback: &parent.diagnostics,
                    },
                    advisor,
                    evaluator,
                )?;
                let (content, reward, diagnostics, gate) = match rank_and_select(&records) {
                    Ok(r) => (
                        r.content.clone().expect("ranked records have content"),
                        r.reward,
                        r.diagnostics.clone(),
                        Some(r.gate_passed),
                    ),
                    Err(InnerError::NoValidAttempts) => {
                        let eval = evaluator.evaluate(&candidate.structure, &candidate.aligned)?;
                        (candidate.aligned.clone(), eval.reward, eval.diagnostics, None)
                    }
                    Err(e) => return Err(e.into()),
                };
                let id = tree.attach(selected, candidate.structure, content, candidate.actions, reward, diagnostics)?;
                backpropagate(&mut tree, id, reward)?;
                if reward > best_reward {
                    record.improvement = reward - best_reward;
                    best_reward = reward;
                }
                record.outcome = RoundOutcome::Accepted;
                record.proposed = Some(label);
                record.family = Some(family);
                record.attempts = records.iter().map(AttemptSummary::from).collect();
                record.gate_passed = gate;
                record.new_node = Some(id);
                record.reward = Some(reward);
            }
        }
        if record.improvement < config.improvement_threshold {
            stale += 1;
        } else {
            stale = 0;
        }
        record.best_reward = best_reward;
        record.stale_counter = stale;
        let term = check_termination(&tree, config, round, stale);
        if let Termination::Stop(reason) = term {
            record.stop = Some(reason);
            stop_reason = reason;
        }
        log.push(record);
        if term != Termination::Continue {
            break;
        }
    }

    let best = &tree.nodes[tree.best_id];
    Ok(SearchResult {
        best_structure: best.structure.clone(),
        best_content: best.content.clone(),
        best_reward: best.reward_at_creation,
        best_id: tree.best_id,
        seed_reward,
        profile,
        round_log: log,
        stop_reason,
        tree,
    })
}

pub const TREE_SCHEMA: &str = "skillopt.search-tree";
pub const TREE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub action: Option<String>,
    pub visits: u64,
    pub mean_reward: f64,
    pub reward: f64,
}

/// Versioned, self-contained description of a finished tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeExport {
    pub schema: String,
    pub version: u32,
    pub root_id: usize,
    pub best_id: usize,
    pub best_path: Vec<usize>,
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<(usize, usize)>,
}

impl TreeExport {
    pub fn from_tree(tree: &SearchTree) -> Self {
        Self {
            schema: TREE_SCHEMA.into(),
            version: TREE_SCHEMA_VERSION,
            root_id: tree.root_id,
            best_id: tree.best_id,
            best_path: tree.path_to(tree.best_id).expect("best node exists"),
            nodes: tree
                .nodes
                .iter()
                .map(|n| ExportNode {
                    id: n.id,
                    parent: n.parent,
                    action: n.action_label(),
                    visits: n.visit_count,
                    mean_reward: n.mean_reward,
                    reward: n.reward_at_creation,
                })
                .collect(),
            edges: tree
                .nodes
                .iter()
                .flat_map(|n| n.children.iter().map(move |c| (n.id, *c)))
                .collect(),
        }
    }

    /// Schema, id, edge and best-path consistency.
    pub fn check(&self) -> Result<(), String> {
        if self.schema != TREE_SCHEMA || self.version != TREE_SCHEMA_VERSION {
            return Err(format!("unsupported schema {} v{}", self.schema, self.version));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(format!("node at position {i} has id {}", n.id));
            }
            match n.parent {
                None if i != self.root_id => return Err(format!("node {i} has no parent")),
                Some(p) if !self.edges.contains(&(p, i)) => return Err(format!("missing edge {p}->{i}")),
                _ => {}
            }
        }
        if self.edges.len() + 1 != self.nodes.len() {
            return Err("edge count does not match a tree".into());
        }
        let mut cur = Some(self.best_id);
        let mut path = Vec::new();
        while let Some(id) = cur {
            let n = self.nodes.get(id).ok_or_else(|| format!("unknown node {id}"))?;
            path.push(id);
            cur = n.parent;
        }
        path.reverse();
        if path != self.best_path {
            return Err("best_path is not the root path of best_id".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("export serializes") + "\n"
    }

    /// Graphviz rendering with the root-to-best path in blue and the rest faded.
    pub fn to_dot(&self) -> String {
        let on_path: BTreeSet<usize> = self.best_path.iter().copied().collect();
        let path_edges: BTreeSet<(usize, usize)> = self.best_path.windows(2).map(|w| (w[0], w[1])).collect();
        let esc = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"");
        let mut out = String::from("digraph search_tree {\n  rankdir=TB;\n  node [shape=box, fontname=\"Helvetica\"];\n");
        for n in &self.nodes {
            let label = format!(
                "n{}\\nreward {:.4}\\nN={} Q={:.4}",
                n.id, n.reward, n.visits, n.mean_reward
            );
            let style = if n.id == self.best_id {
                "color=blue, penwidth=3, style=filled, fillcolor=lightblue"
            } else if on_path.contains(&n.id) {
                "color=blue, penwidth=2"
            } else {
                "color=gray60, fontcolor=gray50"
            };
            let _ = writeln!(out, "  n{} [label=\"{label}\", {style}];", n.id);
        }
        for (p, c) in &self.edges {
            let action = self.nodes[*c].action.as_deref().unwrap_or("");
            let style = if path_edges.contains(&(*p, *c)) {
                "color=blue, penwidth=2, fontcolor=blue"
            } else {
                "color=gray70, fontcolor=gray50, style=dashed"
            };
            let _ = writeln!(out, "  n{p} -> n{c} [label=\"{}\", {style}];", esc(action));
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leaf_tree(values: &[(f64, u64)]) -> SearchTree {
        let mut t = SearchTree::new(Structure::default(), ContentState::default(), 0.0, String::new());
        t.nodes[0].visit_count = values[0].1;
        t.nodes[0].mean_reward = values[0].0;
        for &(q, n) in &values[1..] {
            let id = t
                .attach(0, Structure::default(), ContentState::default(), vec![], q, String::new())
                .unwrap();
            t.nodes[id].visit_count = n;
            t.nodes[id].mean_reward = q;
        }
        t
    }

    #[test]
    fn ucb1_examples() {
        assert!((ucb1_score(0.5, 2, 10, 1.2).unwrap() - 1.787580).abs() < 1e-6);
        assert_eq!(ucb1_score(0.7, 1, 1, 5.0).unwrap(), 0.7);
        assert_eq!(ucb1_score(0.3, 4, 9, 0.0).unwrap(), 0.3);
        assert!(matches!(ucb1_score(0.3, 1, 0, 1.0), Err(SearchError::DomainError(_))));
    }

    #[test]
    fn ucb1_selection() {
        assert_eq!(select_ucb1(&leaf_tree(&[(0.5, 1)]), 1.2).unwrap(), 0);
        assert_eq!(select_ucb1(&leaf_tree(&[(0.5, 3), (0.5, 1)]), 1.2).unwrap(), 1);
        assert_eq!(select_ucb1(&leaf_tree(&[(0.5, 2), (0.5, 2)]), 1.2).unwrap(), 0);
        let mut empty = leaf_tree(&[(0.5, 1)]);
        empty.nodes[0].exhausted = true;
        assert!(matches!(select_ucb1(&empty, 1.0), Err(SearchError::EmptyTree)));
    }

    #[test]
    fn mixed_examples() {
        let p = mixed_probabilities(&[0.2, 0.8], 0.25, 0.55);
        assert!((p[1] - 0.561320).abs() < 1e-6);
        assert_eq!(mixed_probabilities(&[0.1, 0.9, 0.4], 1.0, 3.0), vec![1.0 / 3.0; 3]);
        let p = mixed_probabilities(&[0.4, 0.4], 0.1, 7.0);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn backprop_examples() {
        let mut t = SearchTree::new(Structure::default(), ContentState::default(), 0.6, String::new());
        backpropagate(&mut t, 0, 0.6).unwrap();
        assert_eq!((t.nodes[0].visit_count, t.nodes[0].mean_reward), (1, 0.6));
        let a = t.attach(0, Structure::default(), ContentState::default(), vec![], 0.8, String::new()).unwrap();
        backpropagate(&mut t, a, 0.8).unwrap();
        assert_eq!((t.nodes[a].visit_count, t.nodes[a].mean_reward), (1, 0.8));
        assert_eq!(t.nodes[0].visit_count, 2);
        assert!((t.nodes[0].mean_reward - 0.7).abs() < 1e-15);
        let b = t.attach(0, Structure::default(), ContentState::default(), vec![], 0.1, String::new()).unwrap();
        backpropagate(&mut t, b, 0.1).unwrap();
        assert_eq!((t.nodes[a].visit_count, t.nodes[a].mean_reward), (1, 0.8));
        assert!(matches!(backpropagate(&mut t, 99, 0.1), Err(SearchError::UnknownNode(99))));
    }

    #[test]
    fn termination_examples() {
        let t = leaf_tree(&[(0.5, 1)]);
        let a = SearchConfig::config_a();
        assert_eq!(check_termination(&t, &a, 3, 0), Termination::Stop(StopReason::Budget));
        // Improvements 0.0005 then 0.0004 are both below the 0.001 threshold.
        let mut stale = 0;
        for imp in [0.0005, 0.0004] {
            stale = if imp < a.improvement_threshold { stale + 1 } else { 0 };
        }
        assert_eq!(check_termination(&t, &a, 2, stale), Termination::Stop(StopReason::Stagnation));
        assert_eq!(check_termination(&t, &a, 1, 0), Termination::Continue);
        let mut done = t.clone();
        done.nodes[0].exhausted = true;
        assert_eq!(check_termination(&done, &a, 1, 0), Termination::Stop(StopReason::Exhausted));
    }

    #[test]
    fn export_and_dot() {
        let mut t = SearchTree::new(Structure::default(), ContentState::default(), 0.5, String::new());
        backpropagate(&mut t, 0, 0.5).unwrap();
        let add = vec![EditAction::new(ActionKind::AddSection).with("heading", "Checks")];
        let a = t.attach(0, Structure::default(), ContentState::default(), add, 0.7, String::new()).unwrap();
        backpropagate(&mut t, a, 0.7).unwrap();
        let b = t.attach(0, Structure::default(), ContentState::default(), vec![], 0.4, String::new()).unwrap();
        backpropagate(&mut t, b, 0.4).unwrap();
        let ex = TreeExport::from_tree(&t);
        ex.check().unwrap();
        assert_eq!(ex.best_path, [0, 1]);
        let back: TreeExport = serde_json::from_str(&ex.to_json()).unwrap();
        assert_eq!(back, ex);
        let dot = ex.to_dot();
        assert!(dot.contains("n0 -> n1 [label=\"AddSection(heading=Checks)\", color=blue"));
        assert!(dot.contains("n0 -> n2 [label=\"\", color=gray70"));
        let mut broken = ex.clone();
        broken.best_path = vec![1];
        assert!(broken.check().is_err());
    }

    #[test]
    fn config_checks() {
        SearchConfig::config_a().check().unwrap();
        SearchConfig::config_b().check().unwrap();
        let bad = SearchConfig { max_rounds: 0, ..SearchConfig::config_a() };
        assert!(bad.check().is_err());
        let bad = SearchConfig { lambda: 1.5, ..SearchConfig::config_b() };
        assert!(bad.check().is_err());
    }

    proptest! {
        #[test]
        fn shift_invariance(qs in proptest::collection::vec(0.0f64..1.0, 1..8), shift in -0.5f64..0.5) {
            let base: Vec<(f64, u64)> = qs.iter().map(|q| (*q, 1)).collect();
            let shifted: Vec<(f64, u64)> = qs.iter().map(|q| (*q + shift, 1)).collect();
            prop_assert_eq!(select_ucb1(&leaf_tree(&base), 0.0).unwrap(), select_ucb1(&leaf_tree(&shifted), 0.0).unwrap());
            let p = mixed_probabilities(&qs, 0.0, 2.0);
            let ps = mixed_probabilities(&qs.iter().map(|q| q + shift).collect::<Vec<_>>(), 0.0, 2.0);
            for (a, b) in p.iter().zip(&ps) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn probabilities_sum_to_one(qs in proptest::collection::vec(0.0f64..1.0, 1..10), lambda in 0.0f64..=1.0, alpha in 0.01f64..50.0) {
            let p = mixed_probabilities(&qs, lambda, alpha);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
        }
    }
}

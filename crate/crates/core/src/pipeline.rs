//! Run manifests and the operator commands built on them: optimize, sweep,
//! evaluate and tree export. Everything here writes plain files so a run
//! directory can be audited without the process that produced it.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::advisor::{
    Advisor, AdvisorError, Playbook, PromptedAdvisor, RemoteBackend, RemoteConfig, ScriptedBackend, StageBudgets,
};
use crate::evaluation::{
    evaluate_skill, load_dataset, load_splits, EvalError, EvalOptions, Evaluator, ExactMatchEvaluator, InstanceResult,
    SplitKind, SplitSet, SubprocessRunner, SyntheticEvaluator, SyntheticLandscape, TaskInstance,
};
use crate::inner_refine::RefinementBudget;
use crate::outer_search::{run_search, SearchConfig, SearchError, SearchResult, SelectionPolicy, StopReason, TreeExport};
use crate::skill_package::{derive_structure, extract_content, BudgetPolicy, PackageError, SkillPackage};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("run directory {0} is not empty (run directories are single-use)")]
    RunDirInUse(PathBuf),
    #[error("no completed run at {0}")]
    MissingRun(PathBuf),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Advisor(#[from] AdvisorError),
    #[error("every configuration in the sweep failed")]
    AllRunsFailed,
}

impl PipelineError {
    /// 1 for a run that started and failed, 2 for bad input or missing files.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Search(_) | PipelineError::Advisor(_) | PipelineError::AllRunsFailed => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdvisorSpec {
    Scripted(PathBuf),
    Remote,
}

impl FromStr for AdvisorSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            _ if s == "remote" => Ok(Self::Remote),
            Some(("scripted", p)) if !p.is_empty() => Ok(Self::Scripted(p.into())),
            _ => Err(format!("advisor must be `scripted:<playbook>` or `remote`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvaluatorSpec {
    Synthetic(PathBuf),
    /// A runner command line; the skill directory is appended as the last argument.
    ExactMatch(String),
}

impl FromStr for EvaluatorSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            Some(("synthetic", p)) if !p.is_empty() => Ok(Self::Synthetic(p.into())),
            Some(("exact-match", c)) if !c.trim().is_empty() => Ok(Self::ExactMatch(c.trim().into())),
            _ => Err(format!("evaluator must be `synthetic:<landscape>` or `exact-match:<runner>`, got `{s}`")),
        }
    }
}

/// Dataset and split sizes for exact-match evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: PathBuf,
    pub search: usize,
    pub confirm: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Noise-stream offsets that give each split of a synthetic landscape its own draws.
pub const SYNTHETIC_SPLIT_OFFSETS: [(SplitKind, u64); 3] =
    [(SplitKind::Search, 0), (SplitKind::Confirm, 1), (SplitKind::Test, 2)];

fn synthetic_offset(kind: SplitKind) -> u64 {
    SYNTHETIC_SPLIT_OFFSETS.iter().find(|(k, _)| *k == kind).map_or(0, |(_, o)| *o)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    name: Option<String>,
    skill: PathBuf,
    out: Option<PathBuf>,
    advisor: String,
    advisor_model: Option<String>,
    evaluator: String,
    data: Option<DataSection>,
    search: SearchConfig,
    #[serde(default)]
    refinement: RefinementBudget,
    #[serde(default)]
    stages: StageBudgets,
    #[serde(default)]
    policy: BudgetPolicy,
    #[serde(default)]
    evaluation: EvalOptions,
}

/// One optimization run, with every path already resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub path: Option<PathBuf>,
    pub name: String,
    pub skill: PathBuf,
    pub out: Option<PathBuf>,
    pub advisor: AdvisorSpec,
    pub advisor_model: Option<String>,
    pub evaluator: EvaluatorSpec,
    pub data: Option<DataSection>,
    pub search: SearchConfig,
    pub refinement: RefinementBudget,
    pub stages: StageBudgets,
    pub policy: BudgetPolicy,
    pub evaluation: EvalOptions,
}

/// Command-line values that replace manifest entries. Paths are taken as given.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub skill: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub advisor: Option<AdvisorSpec>,
    pub evaluator: Option<EvaluatorSpec>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Resolves a relative runner program (one containing a slash) against `base`.
fn resolve_command(base: &Path, cmd: &str) -> String {
    let mut parts = cmd.split_whitespace();
    let Some(program) = parts.next() else {
        return cmd.to_string();
    };
    let program = if program.contains('/') && Path::new(program).is_relative() {
        base.join(program).display().to_string()
    } else {
        program.to_string()
    };
    std::iter::once(program).chain(parts.map(str::to_string)).collect::<Vec<_>>().join(" ")
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, PipelineError> {
        let bad = |message: String| PipelineError::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let file: ManifestFile = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let advisor = match file.advisor.parse().map_err(bad)? {
            AdvisorSpec::Scripted(p) => AdvisorSpec::Scripted(resolve(base, &p)),
            AdvisorSpec::Remote => AdvisorSpec::Remote,
        };
        let evaluator = match file.evaluator.parse().map_err(bad)? {
            EvaluatorSpec::Synthetic(p) => EvaluatorSpec::Synthetic(resolve(base, &p)),
            EvaluatorSpec::ExactMatch(c) => EvaluatorSpec::ExactMatch(resolve_command(base, &c)),
        };
        let name = file
            .name
            .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "run".into());
        Ok(Self {
            path: Some(path.to_path_buf()),
            name,
            skill: resolve(base, &file.skill),
            out: file.out.map(|o| resolve(base, &o)),
            advisor,
            advisor_model: file.advisor_model,
            evaluator,
            data: file.data.map(|d| DataSection {
                dataset: resolve(base, &d.dataset),
                ..d
            }),
            search: file.search,
            refinement: file.refinement,
            stages: file.stages,
            policy: file.policy,
            evaluation: file.evaluation,
        })
    }

    /// A manifest for scoring a skill outside any search.
    pub fn for_evaluation(skill: PathBuf, evaluator: EvaluatorSpec) -> Self {
        Self {
            path: None,
            name: "evaluate".into(),
            skill,
            out: None,
            advisor: AdvisorSpec::Remote,
            advisor_model: None,
            evaluator,
            data: None,
            search: SearchConfig::config_a(),
            refinement: RefinementBudget::default(),
            stages: StageBudgets::default(),
            policy: BudgetPolicy::default(),
            evaluation: EvalOptions::default(),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.skill {
            self.skill = s.clone();
        }
        if let Some(d) = &o.dataset {
            match &mut self.data {
                Some(data) => data.dataset = d.clone(),
                None => {
                    self.data = Some(DataSection {
                        dataset: d.clone(),
                        search: 0,
                        confirm: 0,
                        test: 0,
                        seed: 0,
                    })
                }
            }
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(seed) = o.seed {
            self.search.rng_seed = seed;
        }
        if let Some(a) = &o.advisor {
            self.advisor = a.clone();
        }
        if let Some(e) = &o.evaluator {
            self.evaluator = e.clone();
        }
    }

    /// Settings and referenced paths, checked before any work starts.
    pub fn check(&self) -> Result<(), PipelineError> {
        let bad = |message: String| PipelineError::Manifest {
            path: self.path.clone().unwrap_or_default(),
            message,
        };
        self.search.check().map_err(|e| bad(e.to_string()))?;
        self.refinement.check().map_err(bad)?;
        self.stages.check().map_err(bad)?;
        self.policy.check().map_err(bad)?;
        if self.evaluation.width == 0 {
            return Err(bad("evaluation.width must be at least 1".into()));
        }
        let exists = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(bad(format!("{what} {} does not exist", p.display())))
            }
        };
        exists(&self.skill, "skill directory")?;
        if let AdvisorSpec::Scripted(p) = &self.advisor {
            exists(p, "playbook")?;
        }
        match &self.evaluator {
            EvaluatorSpec::Synthetic(p) => exists(p, "landscape")?,
            EvaluatorSpec::ExactMatch(_) => {
                let data = self.data.as_ref().ok_or_else(|| bad("exact-match evaluation needs a [data] section".into()))?;
                exists(&data.dataset, "dataset")?;
                if data.search == 0 {
                    return Err(bad("data.search must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn build_advisor(&self) -> Result<Box<dyn Advisor>, PipelineError> {
        Ok(match &self.advisor {
            AdvisorSpec::Scripted(p) => {
                let mut backend = ScriptedBackend::new(Playbook::load(p)?);
                backend.composite_cap = self.search.composite_cap;
                Box::new(PromptedAdvisor::new(backend, self.stages))
            }
            AdvisorSpec::Remote => {
                let model = self.advisor_model.as_deref().ok_or_else(|| PipelineError::Manifest {
                    path: self.path.clone().unwrap_or_default(),
                    message: "remote advisor needs advisor_model".into(),
                })?;
                Box::new(PromptedAdvisor::new(RemoteBackend::new(RemoteConfig::from_env(model)?)?, self.stages))
            }
        })
    }

    pub fn splits(&self) -> Result<Option<SplitSet>, PipelineError> {
        let Some(d) = &self.data else { return Ok(None) };
        let dataset = load_dataset(&d.dataset)?;
        Ok(Some(load_splits(&dataset, (d.search, d.confirm, d.test), d.seed)?))
    }

    /// The reward oracle for one split.
    pub fn build_evaluator(&self, kind: SplitKind) -> Result<Box<dyn Evaluator>, PipelineError> {
        Ok(match &self.evaluator {
            EvaluatorSpec::Synthetic(p) => Box::new(SyntheticEvaluator::new(
                SyntheticLandscape::load(p)?.with_seed_offset(synthetic_offset(kind)),
            )),
            EvaluatorSpec::ExactMatch(cmd) => {
                let splits = self.splits()?.ok_or_else(|| PipelineError::Usage("no dataset configured".into()))?;
                let split = splits.get(kind).to_vec();
                if split.is_empty() {
                    return Err(EvalError::EmptyInstanceSet.into());
                }
                Box::new(ExactMatchEvaluator {
                    split,
                    runner: Arc::new(runner(cmd)?),
                    options: self.evaluation,
                })
            }
        })
    }

    /// Identifies the confirm split so a sweep can insist it is shared.
    pub fn confirm_fingerprint(&self) -> Result<String, PipelineError> {
        let mut h = Sha256::new();
        match &self.evaluator {
            EvaluatorSpec::Synthetic(p) => {
                let l = SyntheticLandscape::load(p)?.with_seed_offset(synthetic_offset(SplitKind::Confirm));
                h.update(b"synthetic\n");
                h.update(serde_json::to_vec(&l).expect("landscape serializes"));
            }
            EvaluatorSpec::ExactMatch(cmd) => {
                let splits = self.splits()?.ok_or_else(|| PipelineError::Usage("no dataset configured".into()))?;
                h.update(b"exact-match\n");
                h.update(cmd.as_bytes());
                for inst in &splits.confirm {
                    h.update(b"\n");
                    h.update(serde_json::to_vec(inst).expect("instances serialize"));
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

fn runner(cmd: &str) -> Result<SubprocessRunner, PipelineError> {
    SubprocessRunner::from_command_line(cmd).ok_or_else(|| PipelineError::Usage("empty runner command".into()))
}

/// Creates `dir`, refusing a non-empty one unless `overwrite` clears it first.
pub fn prepare_run_dir(dir: &Path, overwrite: bool) -> Result<(), PipelineError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(PipelineError::RunDirInUse(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub const SKILL_DIR: &str = "skill";
pub const TREE_JSON: &str = "tree.json";
pub const TREE_DOT: &str = "tree.dot";
pub const ROUND_LOG: &str = "rounds.jsonl";
pub const ADVISOR_LOG: &str = "advisor.jsonl";
pub const RUN_REPORT: &str = "report.toml";
pub const SWEEP_REPORT: &str = "sweep_report.toml";

/// Final report of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub name: String,
    pub seed_reward: f64,
    pub best_reward: f64,
    pub improvement: f64,
    pub best_node: usize,
    pub best_path: Vec<String>,
    pub rounds_run: usize,
    pub accepted_rounds: usize,
    pub rejected_rounds: usize,
    pub stop_reason: StopReason,
    pub tree_nodes: usize,
    pub seed_digest: String,
    pub best_digest: String,
    pub search: SearchConfig,
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io_err(path))
}

fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("reports serialize to TOML")
}

/// Writes the optimized skill, tree export, logs and report under `out`.
pub fn write_run(
    out: &Path,
    name: &str,
    seed: &SkillPackage,
    config: &SearchConfig,
    result: &SearchResult,
    advisor: &dyn Advisor,
) -> Result<RunReport, PipelineError> {
    let mut best = result.best_package();
    best.root_name = seed.root_name.clone();
    best.write_dir(&out.join(SKILL_DIR))?;
    let export = TreeExport::from_tree(&result.tree);
    write_text(&out.join(TREE_JSON), &export.to_json())?;
    write_text(&out.join(TREE_DOT), &export.to_dot())?;
    let log = out.join(ROUND_LOG);
    result.write_round_log(&log).map_err(io_err(&log))?;
    let mut exchanges = String::new();
    for ex in advisor.exchanges() {
        exchanges.push_str(&serde_json::to_string(ex).expect("exchanges serialize"));
        exchanges.push('\n');
    }
    write_text(&out.join(ADVISOR_LOG), &exchanges)?;
    let best_path = export
        .best_path
        .iter()
        .filter_map(|id| export.nodes[*id].action.clone())
        .collect();
    let report = RunReport {
        name: name.to_string(),
        seed_reward: result.seed_reward,
        best_reward: result.best_reward,
        improvement: result.best_reward - result.seed_reward,
        best_node: result.best_id,
        best_path,
        rounds_run: result.round_log.len(),
        accepted_rounds: result.accepted_rounds(),
        rejected_rounds: result
            .round_log
            .iter()
            .filter(|r| r.outcome == crate::outer_search::RoundOutcome::Rejected)
            .count(),
        stop_reason: result.stop_reason,
        tree_nodes: result.tree.nodes.len(),
        seed_digest: seed.digest(),
        best_digest: best.digest(),
        search: config.clone(),
    };
    write_text(&out.join(RUN_REPORT), &to_toml(&report))?;
    Ok(report)
}

/// Runs the search for one manifest and writes its artifacts to `out`.
pub fn optimize(m: &RunManifest, out: &Path, overwrite: bool) -> Result<(RunReport, SearchResult), PipelineError> {
    m.check()?;
    prepare_run_dir(out, overwrite)?;
    let seed = SkillPackage::load_dir(&m.skill)?;
    let mut advisor = m.build_advisor()?;
    let mut evaluator = m.build_evaluator(SplitKind::Search)?;
    let result = run_search(&seed, &m.search, &m.refinement, &m.policy, advisor.as_mut(), evaluator.as_mut())?;
    let report = write_run(out, &m.name, &seed, &m.search, &result, advisor.as_ref())?;
    Ok((report, result))
}

/// One evaluation of a skill directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub split: SplitKind,
    pub reward: f64,
    pub instances: usize,
    pub diagnostics: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_instance: Vec<InstanceResult>,
}

/// Scores a package once. Exact-match runs use `instances` when given,
/// otherwise the manifest's split.
pub fn evaluate_package(
    pkg: &SkillPackage,
    m: &RunManifest,
    kind: SplitKind,
    instances: Option<&[TaskInstance]>,
) -> Result<EvaluationSummary, PipelineError> {
    match (&m.evaluator, instances) {
        (EvaluatorSpec::ExactMatch(cmd), Some(split)) => {
            let report = evaluate_skill(pkg, split, &runner(cmd)?, m.evaluation)?;
            Ok(EvaluationSummary {
                split: kind,
                reward: report.reward,
                instances: split.len(),
                diagnostics: report.diagnostics,
                per_instance: report.per_instance,
            })
        }
        (EvaluatorSpec::ExactMatch(_), None) => {
            let split = m.splits()?.ok_or_else(|| PipelineError::Usage("no dataset configured".into()))?;
            evaluate_package(pkg, m, kind, Some(split.get(kind)))
        }
        (EvaluatorSpec::Synthetic(_), _) => {
            let s = derive_structure(pkg);
            let c = extract_content(pkg, &s)?;
            let e = m.build_evaluator(kind)?.evaluate(&s, &c)?;
            Ok(EvaluationSummary {
                split: kind,
                reward: e.reward,
                instances: 0,
                diagnostics: e.diagnostics,
                per_instance: Vec::new(),
            })
        }
    }
}

pub const SELECTION_RULE: &str = "highest confirm_score wins; ties go to the earliest configuration";

/// One configuration's row in the sweep report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub index: usize,
    pub name: String,
    pub manifest: String,
    pub run_dir: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub max_rounds: usize,
    pub selection_policy: SelectionPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_search_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_peak: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted_rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirm_score: Option<f64>,
    #[serde(default)]
    pub confirm_evaluations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestOutcome {
    pub winner_score: f64,
    pub winner_evaluations: usize,
    pub seed_score: f64,
    pub seed_evaluations: usize,
    pub winner_digest: String,
    pub seed_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepReport {
    pub protocol: Vec<String>,
    pub confirm_split: String,
    pub selection_rule: String,
    pub winner: String,
    pub winner_index: usize,
    pub configs: Vec<SweepEntry>,
    pub test: TestOutcome,
}

impl SweepReport {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| PipelineError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Re-derives the selection from the rows alone.
    pub fn audit(&self) -> Result<(), String> {
        let mut best: Option<(usize, f64)> = None;
        for (pos, e) in self.configs.iter().enumerate() {
            if e.index != pos {
                return Err(format!("row {pos} has index {}", e.index));
            }
            match (e.status.as_str(), e.search_peak, e.confirm_score) {
                ("ok", Some(_), Some(score)) => {
                    if e.confirm_evaluations != 1 {
                        return Err(format!("{} was scored on confirm {} times", e.name, e.confirm_evaluations));
                    }
                    if best.is_none_or(|(_, b)| score > b) {
                        best = Some((pos, score));
                    }
                }
                ("ok", _, _) => return Err(format!("{} is ok but lacks a peak or confirm score", e.name)),
                ("failed", _, None) => {}
                (s, _, _) => return Err(format!("{} has unexpected status {s}", e.name)),
            }
        }
        let (winner, _) = best.ok_or("no configuration finished")?;
        if winner != self.winner_index || self.configs[winner].name != self.winner {
            return Err(format!(
                "winner is {} but the confirm column selects {}",
                self.winner, self.configs[winner].name
            ));
        }
        if self.test.winner_evaluations != 1 || self.test.seed_evaluations != 1 {
            return Err("winner and seed must each be scored on test exactly once".into());
        }
        if Some(&self.test.winner_digest) != self.configs[winner].candidate_digest.as_ref() {
            return Err("tested package is not the winning candidate".into());
        }
        Ok(())
    }
}

fn run_dir_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{:02}-{clean}", index + 1)
}

/// Runs every configuration, picks the winner on the shared confirm split and
/// scores the winner and the seed once on test.
pub fn sweep(manifests: &[RunManifest], out: &Path, overwrite: bool) -> Result<SweepReport, PipelineError> {
    let first = manifests
        .first()
        .ok_or_else(|| PipelineError::Usage("a sweep needs at least one manifest".into()))?;
    for m in manifests {
        m.check()?;
    }
    let confirm_split = first.confirm_fingerprint()?;
    for m in &manifests[1..] {
        if m.confirm_fingerprint()? != confirm_split {
            return Err(PipelineError::Usage(format!(
                "{} does not share the confirm split of {}",
                m.name, first.name
            )));
        }
    }
    prepare_run_dir(out, overwrite)?;

    let mut entries = Vec::new();
    let mut candidates: Vec<Option<SkillPackage>> = Vec::new();
    for (index, m) in manifests.iter().enumerate() {
        let dir_name = run_dir_name(index, &m.name);
        let mut entry = SweepEntry {
            index,
            name: m.name.clone(),
            manifest: m.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            run_dir: format!("runs/{dir_name}"),
            status: "failed".into(),
            error: None,
            max_rounds: m.search.max_rounds,
            selection_policy: m.search.selection_policy,
            seed_search_reward: None,
            search_peak: None,
            accepted_rounds: None,
            confirm_score: None,
            confirm_evaluations: 0,
            candidate_digest: None,
        };
        let outcome = optimize(m, &out.join("runs").join(&dir_name), false).and_then(|(report, result)| {
            let mut pkg = result.best_package();
            pkg.root_name = SkillPackage::load_dir(&m.skill)?.root_name;
            let confirm = evaluate_package(&pkg, first, SplitKind::Confirm, None)?;
            Ok((report, pkg, confirm.reward))
        });
        match outcome {
            Ok((report, pkg, confirm)) => {
                entry.status = "ok".into();
                entry.seed_search_reward = Some(report.seed_reward);
                entry.search_peak = Some(report.best_reward);
                entry.accepted_rounds = Some(report.accepted_rounds);
                entry.confirm_score = Some(confirm);
                entry.confirm_evaluations = 1;
                entry.candidate_digest = Some(report.best_digest.clone());
                candidates.push(Some(pkg));
            }
            Err(e) => {
                entry.error = Some(e.to_string());
                candidates.push(None);
            }
        }
        entries.push(entry);
    }

    let mut winner: Option<(usize, f64)> = None;
    for e in &entries {
        if let Some(score) = e.confirm_score {
            if winner.is_none_or(|(_, b)| score > b) {
                winner = Some((e.index, score));
            }
        }
    }
    let Some((winner_index, _)) = winner else {
        let partial = to_toml(&entries.iter().map(|e| (e.name.clone(), e.error.clone().unwrap_or_default())).collect::<std::collections::BTreeMap<_, _>>());
        write_text(&out.join("failures.toml"), &partial)?;
        return Err(PipelineError::AllRunsFailed);
    };
    let winner_pkg = candidates[winner_index].take().expect("ok rows have a candidate");
    let winner_manifest = &manifests[winner_index];
    let seed = SkillPackage::load_dir(&winner_manifest.skill)?;
    let winner_test = evaluate_package(&winner_pkg, first, SplitKind::Test, None)?;
    let seed_test = evaluate_package(&seed, first, SplitKind::Test, None)?;
    winner_pkg.write_dir(&out.join("winner"))?;

    let report = SweepReport {
        protocol: vec![
            "each configuration searches on the search split and yields its peak candidate".into(),
            "each candidate is re-evaluated once on the shared confirm split".into(),
            format!("selection: {SELECTION_RULE}"),
            "the winner and the seed are each evaluated once on the test split".into(),
        ],
        confirm_split,
        selection_rule: SELECTION_RULE.into(),
        winner: entries[winner_index].name.clone(),
        winner_index,
        configs: entries,
        test: TestOutcome {
            winner_score: winner_test.reward,
            winner_evaluations: 1,
            seed_score: seed_test.reward,
            seed_evaluations: 1,
            winner_digest: winner_pkg.digest(),
            seed_digest: seed.digest(),
        },
    };
    write_text(&out.join(SWEEP_REPORT), &to_toml(&report))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Structured,
    Dot,
}

impl FromStr for ExportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "structured" | "json" => Ok(Self::Structured),
            "dot" => Ok(Self::Dot),
            _ => Err(format!("format must be `structured` or `dot`, got `{s}`")),
        }
    }
}

/// Re-renders a finished run's tree from its structured export.
pub fn export_tree(run_dir: &Path, format: ExportFormat) -> Result<String, PipelineError> {
    let path = run_dir.join(TREE_JSON);
    if !path.is_file() {
        return Err(PipelineError::MissingRun(run_dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let export: TreeExport = serde_json::from_str(&text).map_err(|e| PipelineError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    export.check().map_err(|message| PipelineError::Manifest { path, message })?;
    Ok(match format {
        ExportFormat::Structured => export.to_json(),
        ExportFormat::Dot => export.to_dot(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = r#"
name = "A"
skill = "seed"
advisor = "scripted:playbook.json"
evaluator = "synthetic:landscape.json"

[search]
max_rounds = 3
selection_policy = "ucb1"
exploration_constant = 1.2
min_rounds_before_convergence = 2
stale_rounds_to_stop = 2
improvement_threshold = 0.001
enforce_profile_priorities = true
"#;

    #[test]
    fn parses_manifest_and_resolves_paths() {
        let m = RunManifest::parse(MANIFEST, Path::new("/w/configs/a.toml")).unwrap();
        assert_eq!(m.name, "A");
        assert_eq!(m.skill, Path::new("/w/configs/seed"));
        assert_eq!(m.advisor, AdvisorSpec::Scripted("/w/configs/playbook.json".into()));
        assert_eq!(m.search, SearchConfig::config_a());
        assert_eq!(m.refinement, RefinementBudget::default());
        assert!(matches!(m.check(), Err(PipelineError::Manifest { .. })));
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = MANIFEST.replace("max_rounds = 3", "max_rounds = 3\nrounds = 4");
        assert!(RunManifest::parse(&text, Path::new("a.toml")).is_err());
    }

    #[test]
    fn overrides_replace_fields() {
        let mut m = RunManifest::parse(MANIFEST, Path::new("a.toml")).unwrap();
        m.apply(&Overrides {
            seed: Some(9),
            evaluator: Some("exact-match:./run.sh --fast".parse().unwrap()),
            ..Default::default()
        });
        assert_eq!(m.search.rng_seed, 9);
        assert_eq!(m.evaluator, EvaluatorSpec::ExactMatch("./run.sh --fast".into()));
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("remote".parse::<AdvisorSpec>().unwrap(), AdvisorSpec::Remote);
        assert!("scripted:".parse::<AdvisorSpec>().is_err());
        assert!("bogus:x".parse::<EvaluatorSpec>().is_err());
        assert_eq!(resolve_command(Path::new("/m"), "bin/agent -q"), "/m/bin/agent -q");
        assert_eq!(resolve_command(Path::new("/m"), "python3 agent.py"), "python3 agent.py");
    }

    #[test]
    fn run_dir_is_single_use() {
        let dir = tempfile::tempdir().unwrap();
        prepare_run_dir(dir.path(), false).unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        assert!(matches!(prepare_run_dir(dir.path(), false), Err(PipelineError::RunDirInUse(_))));
        prepare_run_dir(dir.path(), true).unwrap();
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    fn entry(index: usize, confirm: Option<f64>) -> SweepEntry {
        SweepEntry {
            index,
            name: format!("c{index}"),
            manifest: String::new(),
            run_dir: String::new(),
            status: if confirm.is_some() { "ok" } else { "failed" }.into(),
            error: None,
            max_rounds: 3,
            selection_policy: SelectionPolicy::Ucb1,
            seed_search_reward: confirm.map(|_| 0.5),
            search_peak: confirm.map(|_| 0.6),
            accepted_rounds: Some(1),
            confirm_score: confirm,
            confirm_evaluations: usize::from(confirm.is_some()),
            candidate_digest: Some(format!("d{index}")),
        }
    }

    #[test]
    fn audit_follows_confirm_column() {
        let mut r = SweepReport {
            protocol: vec![],
            confirm_split: String::new(),
            selection_rule: SELECTION_RULE.into(),
            winner: "c1".into(),
            winner_index: 1,
            configs: vec![entry(0, Some(0.7)), entry(1, Some(0.7)), entry(2, None)],
            test: TestOutcome {
                winner_score: 0.7,
                winner_evaluations: 1,
                seed_score: 0.5,
                seed_evaluations: 1,
                winner_digest: "d1".into(),
                seed_digest: String::new(),
            },
        };
        assert!(r.audit().is_err(), "ties go to the first configuration");
        r.winner = "c0".into();
        r.winner_index = 0;
        r.test.winner_digest = "d0".into();
        r.audit().unwrap();
        let back: SweepReport = toml::from_str(&to_toml(&r)).unwrap();
        assert_eq!(back, r);
    }
}

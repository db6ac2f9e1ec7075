//! Reward signals: dataset splits, exact-match scoring of an agent running a
//! candidate skill, and a synthetic landscape for offline runs.

mod runner;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::skill_package::{recompose, ContentState, PackageError, SkillPackage, Structure};

pub use runner::{extract_label, AgentRunner, FnRunner, RunnerError, SubprocessRunner};
pub use synthetic::{synth_evaluate, Bonus, Predicate, SyntheticEvaluator, SyntheticLandscape};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("requested {requested} instances but the dataset has {available}")]
    InsufficientData { requested: usize, available: usize },
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("no instances to score")]
    EmptyInstanceSet,
    #[error("prediction and answer ids differ: {0}")]
    IdMismatch(String),
    #[error("agent runner failed on `{id}`: {source}")]
    RunnerFailure {
        id: String,
        #[source]
        source: RunnerError,
    },
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub context: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub answer: String,
}

impl TaskInstance {
    pub fn check(&self) -> Result<(), String> {
        let labels: BTreeSet<&str> = self.options.iter().map(|o| o.label.as_str()).collect();
        if labels.len() != self.options.len() {
            return Err(format!("{}: duplicate option labels", self.id));
        }
        if !labels.contains(self.answer.as_str()) {
            return Err(format!("{}: answer `{}` is not an option", self.id, self.answer));
        }
        Ok(())
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.options.iter().map(|o| o.label.as_str())
    }
}

/// Reads a line-delimited JSON dataset. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<TaskInstance>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<TaskInstance>, EvalError> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: TaskInstance = serde_json::from_str(line).map_err(|e| EvalError::Dataset {
            line: i + 1,
            message: e.to_string(),
        })?;
        inst.check().map_err(|message| EvalError::Dataset { line: i + 1, message })?;
        if !ids.insert(inst.id.clone()) {
            return Err(EvalError::DuplicateId(inst.id));
        }
        out.push(inst);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Search,
    Confirm,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub search: Vec<TaskInstance>,
    pub confirm: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
    pub sampling_seed: u64,
}

impl SplitSet {
    pub fn get(&self, kind: SplitKind) -> &[TaskInstance] {
        match kind {
            SplitKind::Search => &self.search,
            SplitKind::Confirm => &self.confirm,
            SplitKind::Test => &self.test,
        }
    }
}

/// Seeded sampling without replacement into disjoint search/confirm/test sets.
pub fn load_splits(
    dataset: &[TaskInstance],
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<SplitSet, EvalError> {
    let (n_search, n_confirm, n_test) = sizes;
    let requested = n_search + n_confirm + n_test;
    if requested > dataset.len() {
        return Err(EvalError::InsufficientData {
            requested,
            available: dataset.len(),
        });
    }
    let mut ids = BTreeSet::new();
    for inst in dataset {
        if !ids.insert(inst.id.as_str()) {
            return Err(EvalError::DuplicateId(inst.id.clone()));
        }
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| -> Vec<TaskInstance> {
        order[range].iter().map(|&i| dataset[i].clone()).collect()
    };
    Ok(SplitSet {
        search: take(0..n_search),
        confirm: take(n_search..n_search + n_confirm),
        test: take(n_search + n_confirm..requested),
        sampling_seed: seed,
    })
}

/// Fraction of ids whose predicted label equals the answer label.
pub fn exact_match_score(
    predictions: &[(String, String)],
    answers: &[(String, String)],
) -> Result<f64, EvalError> {
    if answers.is_empty() {
        return Err(EvalError::EmptyInstanceSet);
    }
    let gold: BTreeMap<&str, &str> = answers.iter().map(|(i, l)| (i.as_str(), l.as_str())).collect();
    let pred: BTreeMap<&str, &str> = predictions
        .iter()
        .map(|(i, l)| (i.as_str(), l.as_str()))
        .collect();
    if gold.len() != answers.len() || pred.len() != predictions.len() {
        return Err(EvalError::IdMismatch("duplicate ids".into()));
    }
    if !gold.keys().eq(pred.keys()) {
        let missing: Vec<_> = gold.keys().filter(|k| !pred.contains_key(*k)).collect();
        let extra: Vec<_> = pred.keys().filter(|k| !gold.contains_key(*k)).collect();
        return Err(EvalError::IdMismatch(format!(
            "missing predictions {missing:?}, unknown ids {extra:?}"
        )));
    }
    let correct = gold.iter().filter(|(id, label)| pred[*id] == **label).count();
    Ok(correct as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: String,
    /// `None` when the agent output held no option label.
    pub predicted: Option<String>,
    pub correct: bool,
    pub output_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reward: f64,
    pub per_instance: Vec<InstanceResult>,
    pub diagnostics: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Extra attempts per instance after a runner failure.
    pub retries: usize,
    /// Maximum instances in flight at once.
    pub width: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { retries: 1, width: 4 }
    }
}

const DIAGNOSTICS_LIMIT: usize = 2000;
const QUESTION_TYPES: [&str; 4] = ["objective", "constraint", "variable", "parameter"];

/// Shallow keyword classifier over the question text.
pub fn question_type(question: &str) -> &'static str {
    let q = question.to_lowercase();
    QUESTION_TYPES
        .into_iter()
        .find(|t| q.contains(t))
        .unwrap_or("other")
}

fn short_digest(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

fn summarize(split: &[TaskInstance], results: &[InstanceResult]) -> String {
    let by_id: BTreeMap<&str, &TaskInstance> = split.iter().map(|t| (t.id.as_str(), t)).collect();
    let correct = results.iter().filter(|r| r.correct).count();
    let mut errors: BTreeMap<&str, (usize, usize)> = QUESTION_TYPES
        .iter()
        .chain(["other"].iter())
        .map(|t| (*t, (0, 0)))
        .collect();
    let mut unparseable = Vec::new();
    let mut confusions: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in results {
        let inst = by_id[r.id.as_str()];
        let entry = errors.get_mut(question_type(&inst.question)).expect("all types present");
        entry.1 += 1;
        if !r.correct {
            entry.0 += 1;
            match &r.predicted {
                None => unparseable.push(r.id.as_str()),
                Some(p) => *confusions.entry((inst.answer.clone(), p.clone())).or_default() += 1,
            }
        }
    }
    let mut out = format!(
        "exact match {correct}/{} ({:.4})\nerrors by question type:",
        results.len(),
        correct as f64 / results.len().max(1) as f64
    );
    for (t, (wrong, total)) in &errors {
        if *total > 0 {
            out.push_str(&format!(" {t}={wrong}/{total}"));
        }
    }
    out.push('\n');
    if !unparseable.is_empty() {
        out.push_str(&format!(
            "unparseable output on {} instance(s): {}\n",
            unparseable.len(),
            unparseable.join(", ")
        ));
    }
    for ((gold, got), n) in &confusions {
        out.push_str(&format!("answered {got} where {gold} was correct: {n}\n"));
    }
    if out.len() > DIAGNOSTICS_LIMIT {
        let mut cut = DIAGNOSTICS_LIMIT - 4;
        while !out.is_char_boundary(cut) {
            cut -= 1;
        }
        out.truncate(cut);
        out.push_str(" ...");
    }
    out
}

/// Runs the agent on every instance with the candidate installed and scores
/// exact matches. Results are ordered by instance id.
pub fn evaluate_skill(
    candidate: &SkillPackage,
    split: &[TaskInstance],
    runner: &dyn AgentRunner,
    options: EvalOptions,
) -> Result<EvalReport, EvalError> {
    if split.is_empty() {
        return Err(EvalError::EmptyInstanceSet);
    }
    let dir = tempfile::tempdir()?;
    let skill_dir = dir.path().join(if candidate.root_name.is_empty() {
        "skill"
    } else {
        candidate.root_name.as_str()
    });
    candidate.write_dir(&skill_dir)?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<InstanceResult, EvalError>>>> =
        Mutex::new((0..split.len()).map(|_| None).collect());
    let run_one = |inst: &TaskInstance| -> Result<InstanceResult, EvalError> {
        let mut attempt = 0;
        let output = loop {
            match runner.run(&skill_dir, inst) {
                Ok(out) => break out,
                Err(e) if attempt >= options.retries => {
                    return Err(EvalError::RunnerFailure {
                        id: inst.id.clone(),
                        source: e,
                    })
                }
                Err(_) => attempt += 1,
            }
        };
        let predicted = extract_label(&output, inst.labels());
        Ok(InstanceResult {
            id: inst.id.clone(),
            correct: predicted.as_deref() == Some(inst.answer.as_str()),
            predicted,
            output_digest: short_digest(&output),
        })
    };
    std::thread::scope(|scope| {
        for _ in 0..options.width.clamp(1, split.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= split.len() {
                    break;
                }
                let result = run_one(&split[i]);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(result);
            });
        }
    });

    let mut results = Vec::with_capacity(split.len());
    for slot in slots.into_inner().expect("workers joined") {
        results.push(slot.expect("every index was claimed")?);
    }
    results.sort_by(|a, b| a.id.cmp(&b.id));
    let predictions: Vec<(String, String)> = results
        .iter()
        .map(|r| (r.id.clone(), r.predicted.clone().unwrap_or_default()))
        .collect();
    let answers: Vec<(String, String)> = split.iter().map(|t| (t.id.clone(), t.answer.clone())).collect();
    let reward = exact_match_score(&predictions, &answers)?;
    Ok(EvalReport {
        reward,
        diagnostics: summarize(split, &results),
        per_instance: results,
    })
}

/// A scored candidate as seen by the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub reward: f64,
    pub diagnostics: String,
}

/// Reward oracle `R(structure, content)` used by the optimizer. Rewards lie in `[0, 1]`.
pub trait Evaluator {
    fn evaluate(&mut self, structure: &Structure, content: &ContentState) -> Result<Evaluation, EvalError>;
}

/// Exact-match evaluation of a fixed split through an agent runner.
pub struct ExactMatchEvaluator {
    pub split: Vec<TaskInstance>,
    pub runner: Arc<dyn AgentRunner>,
    pub options: EvalOptions,
}

impl Evaluator for ExactMatchEvaluator {
    fn evaluate(&mut self, structure: &Structure, content: &ContentState) -> Result<Evaluation, EvalError> {
        let pkg = recompose(content, structure)?;
        let report = evaluate_skill(&pkg, &self.split, self.runner.as_ref(), self.options)?;
        Ok(Evaluation {
            reward: report.reward,
            diagnostics: report.diagnostics,
        })
    }
}

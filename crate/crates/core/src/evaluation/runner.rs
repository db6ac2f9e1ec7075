use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use thiserror::Error;

use super::TaskInstance;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("could not start `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("agent exited with status {status}: {stderr}")]
    NonZeroExit { status: String, stderr: String },
    #[error("{0}")]
    Other(String),
}

/// Runs the task agent on one instance with a skill installed and returns its
/// raw output.
pub trait AgentRunner: Send + Sync {
    fn run(&self, skill_dir: &Path, instance: &TaskInstance) -> Result<String, RunnerError>;
}

/// Wraps a closure, mainly for tests and in-process agents.
pub struct FnRunner<F>(pub F);

impl<F> AgentRunner for FnRunner<F>
where
    F: Fn(&Path, &TaskInstance) -> Result<String, RunnerError> + Send + Sync,
{
    fn run(&self, skill_dir: &Path, instance: &TaskInstance) -> Result<String, RunnerError> {
        (self.0)(skill_dir, instance)
    }
}

/// Invokes `program [args..] <skill_dir>` with the instance JSON on stdin and
/// reads the answer from stdout.
#[derive(Debug, Clone)]
pub struct SubprocessRunner {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl SubprocessRunner {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
        }
    }

    /// Splits a command line on whitespace. No shell quoting.
    pub fn from_command_line(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace();
        let program = parts.next()?;
        Some(Self {
            program: program.into(),
            args: parts.map(str::to_string).collect(),
        })
    }
}

impl AgentRunner for SubprocessRunner {
    fn run(&self, skill_dir: &Path, instance: &TaskInstance) -> Result<String, RunnerError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(skill_dir)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| RunnerError::Spawn {
                program: self.program.display().to_string(),
                source,
            })?;
        let payload = serde_json::to_vec(instance).map_err(|e| RunnerError::Other(e.to_string()))?;
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            // The agent may exit without reading; that is its business.
            let _ = stdin.write_all(&payload);
        }
        let out = child
            .wait_with_output()
            .map_err(|e| RunnerError::Other(e.to_string()))?;
        if !out.status.success() {
            return Err(RunnerError::NonZeroExit {
                status: out.status.to_string(),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

/// The first standalone option label on the last non-empty line, if any.
/// Tokens are split on anything that is not alphanumeric, so `(B)`, `B.` and
/// `Answer: B` all yield `B`.
pub fn extract_label<'a>(output: &str, labels: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let labels: Vec<&str> = labels.into_iter().collect();
    let last = output.lines().rev().find(|l| !l.trim().is_empty())?;
    last.split(|c: char| !c.is_alphanumeric())
        .find(|tok| labels.contains(tok))
        .map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LABELS: [&str; 4] = ["A", "B", "C", "D"];

    #[test]
    fn label_extraction() {
        assert_eq!(extract_label("B\n", LABELS).as_deref(), Some("B"));
        assert_eq!(extract_label("thinking...\nAnswer: (C)\n\n", LABELS).as_deref(), Some("C"));
        assert_eq!(extract_label("D\nI am not sure", LABELS), None);
        assert_eq!(extract_label("Because ABC", LABELS), None);
        assert_eq!(extract_label("", LABELS), None);
    }

    #[cfg(unix)]
    #[test]
    fn subprocess_contract() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("agent.sh");
        std::fs::write(
            &script,
            "#!/bin/sh\ntest -d \"$1\" || exit 3\ngrep -o '\"answer\":\"[A-D]\"' | cut -d'\"' -f4\n",
        )
        .unwrap();
        let runner = SubprocessRunner::from_command_line(&format!("sh {}", script.display())).unwrap();
        let inst = crate::evaluation::tests::instance("q1", "Which constraint?", "C");
        assert_eq!(runner.run(dir.path(), &inst).unwrap().trim(), "C");
        let err = runner.run(&dir.path().join("missing"), &inst).unwrap_err();
        assert!(matches!(err, RunnerError::NonZeroExit { .. }));
    }
}

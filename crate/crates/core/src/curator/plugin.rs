//! External scorers: a child process per plugin speaking JSON lines on stdio.
//!
//! Request `{"id": ..., "clip_path": ...}`, response
//! `{"id": ..., "scores": {"name": value}}` with every value in `[0, 1]`.
//! A plugin that times out, exits, or answers malformed output is killed and
//! restarted on the next request.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginSpec {
    pub name: String,
    /// Program followed by its arguments.
    pub command: Vec<String>,
}

#[derive(Serialize)]
struct Request<'a> {
    id: &'a str,
    clip_path: &'a str,
}

#[derive(Deserialize)]
struct Response {
    id: String,
    scores: BTreeMap<String, f64>,
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Running {
    fn spawn(spec: &PluginSpec) -> Result<Self> {
        let (program, args) = spec
            .command
            .split_first()
            .ok_or_else(|| scorer_err(spec, "empty command"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| scorer_err(spec, format!("spawn failed: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { child, stdin, lines })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn scorer_err(spec: &PluginSpec, message: impl Into<String>) -> Error {
    Error::Scorer {
        scorer: spec.name.clone(),
        message: message.into(),
    }
}

pub struct PluginScorer {
    spec: PluginSpec,
    timeout: Duration,
    running: Mutex<Option<Running>>,
}

impl std::fmt::Debug for PluginScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginScorer").field("spec", &self.spec).field("timeout", &self.timeout).finish()
    }
}

impl PluginScorer {
    pub fn new(spec: PluginSpec, timeout: Duration) -> Self {
        Self {
            spec,
            timeout,
            running: Mutex::new(None),
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// Scores one clip. Requests to the same plugin are serialized.
    pub fn score(&self, id: &str, clip_path: &Path) -> Result<BTreeMap<String, f64>> {
        let mut guard = self.running.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            *guard = Some(Running::spawn(&self.spec)?);
        }
        let result = self.exchange(guard.as_mut().unwrap(), id, clip_path);
        if result.is_err() {
            if let Some(r) = guard.take() {
                r.kill();
            }
        }
        result
    }

    fn exchange(&self, run: &mut Running, id: &str, clip_path: &Path) -> Result<BTreeMap<String, f64>> {
        let clip_path = clip_path.to_string_lossy();
        let mut line = serde_json::to_string(&Request {
            id,
            clip_path: &clip_path,
        })?;
        line.push('\n');
        run.stdin
            .write_all(line.as_bytes())
            .and_then(|_| run.stdin.flush())
            .map_err(|e| scorer_err(&self.spec, format!("write failed: {e}")))?;

        let deadline = Instant::now() + self.timeout;
        let reply = loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match run.lines.recv_timeout(left) {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => break l,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(scorer_err(&self.spec, format!("timed out after {:?}", self.timeout)))
                }
                Err(RecvTimeoutError::Disconnected) => return Err(scorer_err(&self.spec, "plugin exited")),
            }
        };
        let resp: Response =
            serde_json::from_str(&reply).map_err(|e| scorer_err(&self.spec, format!("malformed response: {e}")))?;
        if resp.id != id {
            return Err(scorer_err(&self.spec, format!("response id `{}` does not match `{id}`", resp.id)));
        }
        for (name, v) in &resp.scores {
            if !v.is_finite() || !(0.0..=1.0).contains(v) {
                return Err(scorer_err(&self.spec, format!("score `{name}` = {v} outside [0, 1]")));
            }
        }
        Ok(resp.scores)
    }
}

impl Drop for PluginScorer {
    fn drop(&mut self) {
        let slot = self.running.get_mut().unwrap_or_else(|e| e.into_inner());
        if let Some(r) = slot.take() {
            r.kill();
        }
    }
}

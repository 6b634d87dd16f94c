//! Objectives backed by an external command.
//!
//! Per-process mode runs the command once per evaluation: the point goes to
//! stdin as one CSV line and a single number is expected on stdout.
//! Persistent mode keeps one process alive and speaks a line protocol:
//! `EVAL x1,...,xd` in, `OK value` out.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use bomm::testbed::Objective;
use bomm::{BommError, Domain, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExternalMode {
    PerProcess,
    Persistent,
}

/// Formats a point so that every coordinate parses back to the same bits.
pub fn format_point(x: &[f64]) -> String {
    x.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

pub fn parse_point(line: &str) -> Result<Vec<f64>> {
    line.trim()
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| BommError::InvalidData(format!("cannot parse coordinate {t:?}: {e}")))
        })
        .collect()
}

fn parse_value(payload: &str) -> Result<f64> {
    let v: f64 = payload
        .trim()
        .parse()
        .map_err(|_| BommError::Evaluation(format!("unparsable objective output {payload:?}")))?;
    if !v.is_finite() {
        return Err(BommError::Evaluation(format!("non-finite objective output {payload:?}")));
    }
    Ok(v)
}

fn shell(cmd: &str) -> Command {
    let mut c = Command::new("sh");
    c.arg("-c").arg(cmd);
    c
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct ExternalObjective {
    command: String,
    domain: Domain,
    mode: ExternalMode,
    timeout: Duration,
    session: Mutex<Option<Session>>,
}

impl ExternalObjective {
    pub fn new(command: impl Into<String>, domain: Domain, mode: ExternalMode) -> Self {
        ExternalObjective {
            command: command.into(),
            domain,
            mode,
            timeout: DEFAULT_TIMEOUT,
            session: Mutex::new(None),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    fn eval_once(&self, x: &[f64]) -> Result<f64> {
        let mut child = shell(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            // A command that ignores its input may exit before reading it.
            if let Err(e) = writeln!(stdin, "{}", format_point(x)) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut s = String::new();
            let r = stdout.read_to_string(&mut s).map(|_| s);
            let _ = tx.send(r);
        });
        let out = match rx.recv_timeout(self.timeout) {
            Ok(r) => r?,
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(BommError::Evaluation(format!(
                    "objective timed out after {:?} at {}",
                    self.timeout,
                    format_point(x)
                )));
            }
        };
        let status = child.wait()?;
        if !status.success() {
            return Err(BommError::Evaluation(format!(
                "objective exited with {status} at {}; output {out:?}",
                format_point(x)
            )));
        }
        parse_value(&out)
    }

    fn start_session(&self) -> Result<Session> {
        let mut child = shell(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Session { child, stdin, lines: rx })
    }

    fn eval_persistent(&self, x: &[f64]) -> Result<f64> {
        let mut guard = self.session.lock().expect("session lock");
        if guard.is_none() {
            *guard = Some(self.start_session()?);
        }
        let session = guard.as_mut().expect("session started");
        let sent = writeln!(session.stdin, "EVAL {}", format_point(x)).and_then(|_| session.stdin.flush());
        if let Err(e) = sent {
            *guard = None;
            return Err(BommError::Evaluation(format!("objective process is gone: {e}")));
        }
        let line = match session.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => {
                *guard = None;
                return Err(e.into());
            }
            Err(RecvTimeoutError::Timeout) => {
                *guard = None;
                return Err(BommError::Evaluation(format!(
                    "objective timed out after {:?} at {}",
                    self.timeout,
                    format_point(x)
                )));
            }
            Err(RecvTimeoutError::Disconnected) => {
                *guard = None;
                return Err(BommError::Evaluation("objective process closed its output".into()));
            }
        };
        match line.trim().strip_prefix("OK") {
            Some(rest) => parse_value(rest),
            None => Err(BommError::Evaluation(format!("unexpected reply {line:?}"))),
        }
    }
}

impl Objective for ExternalObjective {
    fn domain(&self) -> Domain {
        self.domain.clone()
    }

    fn evaluate(&self, x: &[f64]) -> Result<f64> {
        self.domain.check(x)?;
        match self.mode {
            ExternalMode::PerProcess => self.eval_once(x),
            ExternalMode::Persistent => self.eval_persistent(x),
        }
    }
}

/// Serves `objective` over the persistent protocol on the given streams.
/// Stops at end of input.
pub fn serve<R: BufRead, W: Write>(objective: &dyn Objective, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let reply = match line.strip_prefix("EVAL") {
            Some(rest) => match parse_point(rest).and_then(|x| objective.evaluate(&x)) {
                Ok(v) => format!("OK {v:?}"),
                Err(e) => format!("ERR {e}"),
            },
            None => format!("ERR unknown request {line:?}"),
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

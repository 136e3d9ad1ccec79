//! Newline-delimited JSON over a child process's stdin/stdout.
//!
//! Each request line is the request object plus a `"role"` field. The child
//! answers with one line per request carrying the same `id`, in any order.
//! An answer may instead carry `"error"` and an optional `"status"`.
//! Answers for ids nobody is waiting on (late duplicates) are dropped.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::wire::Transport;
use super::Role;
use crate::error::{Error, Result};

type Pending = Arc<Mutex<Option<HashMap<String, Sender<serde_json::Value>>>>>;

pub struct SubprocessTransport {
    child: Mutex<Child>,
    stdin: Mutex<ChildStdin>,
    pending: Pending,
    timeout: Duration,
}

impl std::fmt::Debug for SubprocessTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubprocessTransport").finish_non_exhaustive()
    }
}

impl SubprocessTransport {
    pub fn spawn(argv: &[String], timeout: Duration) -> Result<Self> {
        let (prog, args) = argv
            .split_first()
            .ok_or_else(|| Error::Config("empty subprocess command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(prog, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let pending: Pending = Arc::new(Mutex::new(Some(HashMap::new())));
        let table = pending.clone();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) else {
                    continue;
                };
                let Some(id) = v.get("id").and_then(|x| x.as_str()).map(str::to_string) else {
                    continue;
                };
                let waiter = table
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .as_mut()
                    .and_then(|m| m.remove(&id));
                if let Some(tx) = waiter {
                    let _ = tx.send(v);
                }
            }
            // child gone: fail everyone still waiting
            table.lock().unwrap_or_else(|e| e.into_inner()).take();
        });
        Ok(Self {
            child: Mutex::new(child),
            stdin: Mutex::new(stdin),
            pending,
            timeout,
        })
    }
}

impl Transport for SubprocessTransport {
    fn call(&self, role: Role, request: &serde_json::Value) -> Result<serde_json::Value> {
        let err = |message: String| Error::Transport {
            role: role.to_string(),
            message,
        };
        let id = request
            .get("id")
            .and_then(|x| x.as_str())
            .ok_or_else(|| err("request has no id".into()))?
            .to_string();
        let mut line = request.clone();
        line["role"] = serde_json::Value::from(role.as_str());
        let mut text = serde_json::to_string(&line)?;
        text.push('\n');

        let (tx, rx) = mpsc::channel();
        match self.pending.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
            Some(m) => m.insert(id.clone(), tx),
            None => return Err(err("subprocess has exited".into())),
        };
        let written = {
            let mut stdin = self.stdin.lock().unwrap_or_else(|e| e.into_inner());
            stdin.write_all(text.as_bytes()).and_then(|_| stdin.flush())
        };
        if let Err(e) = written {
            self.forget(&id);
            return Err(err(format!("write failed: {e}")));
        }
        let v = match rx.recv_timeout(self.timeout) {
            Ok(v) => v,
            Err(RecvTimeoutError::Timeout) => {
                self.forget(&id);
                return Err(err(format!("no response within {:?}", self.timeout)));
            }
            Err(RecvTimeoutError::Disconnected) => return Err(err("subprocess has exited".into())),
        };
        if let Some(msg) = v.get("error") {
            return Err(Error::Backend {
                role: role.to_string(),
                status: v.get("status").and_then(|s| s.as_u64()).unwrap_or(500) as u16,
                body: msg.as_str().map(str::to_string).unwrap_or_else(|| msg.to_string()),
            });
        }
        Ok(v)
    }
}

impl SubprocessTransport {
    fn forget(&self, id: &str) {
        if let Some(m) = self.pending.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
            m.remove(id);
        }
    }
}

impl Drop for SubprocessTransport {
    fn drop(&mut self) {
        let mut child = self.child.lock().unwrap_or_else(|e| e.into_inner());
        let _ = child.kill();
        let _ = child.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn python() -> Option<String> {
        Command::new("python3")
            .arg("--version")
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|_| "python3".to_string())
    }

    // answers every request twice; recaption errors when asked to
    const ECHO: &str = r#"
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    if req.get("instruction") == "boom":
        out = {"id": req["id"], "error": "exploded", "status": 500}
    else:
        out = {"id": req["id"], "text": req["role"] + ":" + req.get("instruction", "")}
    for _ in range(2):
        sys.stdout.write(json.dumps(out) + "\n")
    sys.stdout.flush()
"#;

    #[test]
    fn concurrent_calls_match_by_id() {
        let Some(py) = python() else { return };
        let t = Arc::new(
            SubprocessTransport::spawn(&[py, "-c".into(), ECHO.into()], Duration::from_secs(10))
                .unwrap(),
        );
        std::thread::scope(|s| {
            for i in 0..8 {
                let t = t.clone();
                s.spawn(move || {
                    let v = t
                        .call(
                            Role::Recaption,
                            &serde_json::json!({"id": format!("r{i}"), "instruction": format!("q{i}")}),
                        )
                        .unwrap();
                    assert_eq!(v["id"], format!("r{i}"));
                    assert_eq!(v["text"], format!("recaption:q{i}"));
                });
            }
        });
        let err = t
            .call(Role::Recaption, &serde_json::json!({"id": "bad", "instruction": "boom"}))
            .unwrap_err();
        assert!(matches!(err, Error::Backend { status: 500, .. }));
    }

    #[test]
    fn dead_child_fails_fast() {
        let t = SubprocessTransport::spawn(&["true".into()], Duration::from_secs(10)).unwrap();
        std::thread::sleep(Duration::from_millis(100));
        let err = t.call(Role::Embed, &serde_json::json!({"id": "x"})).unwrap_err();
        assert!(matches!(err, Error::Transport { .. }));
    }
}

//! Line-delimited JSON bridge to a backbone running in a child process.
//!
//! ```text
//! -> {"op":"hello","version":1}
//! <- {"ok":true,"has_density":true,"p":1,"d":1}
//! -> {"op":"sample","x":[0.5],"k":3,"seed":17}
//! <- {"samples":[[..],[..],[..]],"densities":[..,..,..]}
//! -> {"op":"bye"}
//! ```
//!
//! One message per line. Anything else from the child, or a closed pipe,
//! is a protocol error.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::error::{PcpError, Result};
use crate::rng::StreamRng;
use crate::types::SampleBatch;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum Request {
    Hello { version: u32 },
    Sample { x: Vec<f64>, k: usize, seed: u64 },
    Bye,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelloReply {
    pub ok: bool,
    pub has_density: bool,
    pub p: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleReply {
    pub samples: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub densities: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub ok: bool,
    pub err: String,
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Backbone served by a child process. Requests are serialized through a
/// single channel.
pub struct BridgeBackbone {
    command: Vec<String>,
    channel: Mutex<Option<Channel>>,
    stderr: Arc<Mutex<String>>,
    has_density: bool,
    p: usize,
    d: usize,
}

impl std::fmt::Debug for BridgeBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeBackbone")
            .field("command", &self.command)
            .field("has_density", &self.has_density)
            .field("p", &self.p)
            .field("d", &self.d)
            .finish()
    }
}

impl BridgeBackbone {
    /// Spawns `command` and performs the handshake.
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| PcpError::config("bridge command is empty"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| PcpError::Protocol {
                message: format!("cannot start {program:?}: {e}"),
                stderr: String::new(),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let stderr = Arc::new(Mutex::new(String::new()));
        if let Some(mut err) = child.stderr.take() {
            let sink = Arc::clone(&stderr);
            thread::spawn(move || {
                let mut buf = [0u8; 4096];
                while let Ok(n) = err.read(&mut buf) {
                    if n == 0 {
                        break;
                    }
                    sink.lock().unwrap().push_str(&String::from_utf8_lossy(&buf[..n]));
                }
            });
        }

        let mut bridge = Self {
            command: command.to_vec(),
            channel: Mutex::new(Some(Channel { child, stdin, stdout })),
            stderr,
            has_density: false,
            p: 0,
            d: 0,
        };
        let line = bridge.exchange(&Request::Hello { version: PROTOCOL_VERSION })?;
        let hello: HelloReply = serde_json::from_str(&line)
            .map_err(|e| bridge.protocol_error(format!("bad handshake reply {line:?}: {e}")))?;
        if !hello.ok || hello.p == 0 || hello.d == 0 {
            return Err(bridge.protocol_error(format!("handshake rejected: {line}")));
        }
        bridge.has_density = hello.has_density;
        bridge.p = hello.p;
        bridge.d = hello.d;
        Ok(bridge)
    }

    fn protocol_error(&self, message: String) -> PcpError {
        // Give the child a moment to flush its diagnostics.
        if let Some(ch) = self.channel.lock().unwrap().as_mut() {
            let start = Instant::now();
            while start.elapsed() < Duration::from_millis(200) {
                if matches!(ch.child.try_wait(), Ok(Some(_))) {
                    break;
                }
                thread::sleep(Duration::from_millis(5));
            }
        }
        thread::sleep(Duration::from_millis(20));
        PcpError::Protocol {
            message,
            stderr: self.stderr.lock().unwrap().clone(),
        }
    }

    /// Sends one request and returns the single reply line.
    fn exchange(&self, req: &Request) -> Result<String> {
        let mut msg = serde_json::to_string(req).expect("requests serialize");
        msg.push('\n');
        let outcome = {
            let mut guard = self.channel.lock().unwrap();
            match guard.as_mut() {
                None => Err("bridge already closed".to_string()),
                Some(ch) => {
                    let sent = ch.stdin.write_all(msg.as_bytes()).and_then(|_| ch.stdin.flush());
                    match sent {
                        Err(e) => Err(format!("write failed: {e}")),
                        Ok(()) => {
                            let mut line = String::new();
                            match ch.stdout.read_line(&mut line) {
                                Ok(0) => Err("child closed its output".to_string()),
                                Ok(_) => Ok(line),
                                Err(e) => Err(format!("read failed: {e}")),
                            }
                        }
                    }
                }
            }
        };
        outcome.map_err(|m| self.protocol_error(m))
    }

    /// Sends `bye` and waits for the child to exit with status 0.
    pub fn close(&self) -> Result<()> {
        let Some(mut ch) = self.channel.lock().unwrap().take() else {
            return Ok(());
        };
        let mut msg = serde_json::to_string(&Request::Bye).expect("requests serialize");
        msg.push('\n');
        let _ = ch.stdin.write_all(msg.as_bytes()).and_then(|_| ch.stdin.flush());
        drop(ch.stdin);
        let status = ch.child.wait()?;
        if status.success() {
            Ok(())
        } else {
            Err(PcpError::Protocol {
                message: format!("child exited with {status} after bye"),
                stderr: self.stderr.lock().unwrap().clone(),
            })
        }
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }
}

impl Drop for BridgeBackbone {
    fn drop(&mut self) {
        if let Some(mut ch) = self.channel.lock().unwrap().take() {
            let _ = ch.stdin.write_all(b"{\"op\":\"bye\"}\n");
            drop(ch.stdin);
            let start = Instant::now();
            while start.elapsed() < Duration::from_secs(2) {
                if matches!(ch.child.try_wait(), Ok(Some(_))) {
                    return;
                }
                thread::sleep(Duration::from_millis(5));
            }
            let _ = ch.child.kill();
            let _ = ch.child.wait();
        }
    }
}

impl Backbone for BridgeBackbone {
    fn dims(&self) -> (usize, usize) {
        (self.p, self.d)
    }

    fn has_density(&self) -> bool {
        self.has_density
    }

    fn sample(&self, x: &[f64], k: usize, rng: &mut StreamRng) -> Result<SampleBatch> {
        PcpError::check_dim(self.p, x.len())?;
        let seed = u64::from(rng.next_u32());
        let line = self.exchange(&Request::Sample { x: x.to_vec(), k, seed })?;
        let reply: SampleReply = serde_json::from_str(&line)
            .map_err(|e| self.protocol_error(format!("bad sample reply {:?}: {e}", line.trim_end())))?;
        if reply.samples.len() != k || reply.samples.iter().any(|s| s.len() != self.d) {
            return Err(self.protocol_error(format!(
                "expected {k} samples of dimension {}, got {}",
                self.d,
                reply.samples.len()
            )));
        }
        if reply.densities.is_some() != self.has_density {
            return Err(self.protocol_error("densities present/absent contrary to handshake".into()));
        }
        SampleBatch::new(reply.samples, reply.densities)
            .map_err(|e| self.protocol_error(format!("invalid sample batch: {e}")))
    }
}

/// Serves `backbone` over the bridge protocol until `bye` or end of input.
/// Malformed requests get `{"ok":false,"err":...}` and the loop continues.
/// Sampling uses a fresh stream seeded from the request seed, so replies are
/// deterministic.
pub fn serve<B: Backbone + ?Sized>(backbone: &B, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Ok(Request::Bye) => return Ok(()),
            Ok(Request::Hello { version }) if version == PROTOCOL_VERSION => {
                let (p, d) = backbone.dims();
                serde_json::to_string(&HelloReply {
                    ok: true,
                    has_density: backbone.has_density(),
                    p,
                    d,
                })
            }
            Ok(Request::Hello { version }) => serde_json::to_string(&ErrorReply {
                ok: false,
                err: format!("unsupported protocol version {version}"),
            }),
            Ok(Request::Sample { x, k, seed }) => {
                let mut rng = StreamRng::seed_from_u64(seed);
                match backbone.sample(&x, k, &mut rng) {
                    Ok(batch) => {
                        let densities = batch.densities().map(<[f64]>::to_vec);
                        serde_json::to_string(&SampleReply {
                            samples: batch.into_samples(),
                            densities,
                        })
                    }
                    Err(e) => serde_json::to_string(&ErrorReply { ok: false, err: e.to_string() }),
                }
            }
            Err(e) => serde_json::to_string(&ErrorReply {
                ok: false,
                err: format!("malformed request: {e}"),
            }),
        }
        .expect("replies serialize");
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

//! Engine side of the out-of-process wrapper transport. The wrapper enforces
//! the per-line budget itself; the engine grants a 20% grace on top before
//! killing the transport, and distinguishes a hung wrapper (kill, report
//! timeout) from a dead one (crash).

use std::io::Write;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::time::Duration;

use super::proto::{read_frame, write_frame, Request, Response};
use super::DriverError;

pub struct SubprocessTransport {
    command: Vec<String>,
    child: Option<Child>,
    stdin: Option<std::process::ChildStdin>,
    frames: Option<Receiver<std::io::Result<Vec<u8>>>>,
}

/// What one exchange produced, beyond a well-formed response.
pub enum Exchange {
    Reply(Response),
    /// No response within budget + grace: the wrapper was killed.
    Hung,
    /// The wrapper died without replying.
    Died,
}

impl SubprocessTransport {
    pub fn new(command: Vec<String>) -> Self {
        SubprocessTransport {
            command,
            child: None,
            stdin: None,
            frames: None,
        }
    }

    pub fn is_live(&self) -> bool {
        self.child.is_some()
    }

    pub fn spawn(&mut self) -> Result<(), DriverError> {
        self.kill();
        if self.command.is_empty() {
            return Err(DriverError::Spawn("empty wrapper command".into()));
        }
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| DriverError::Spawn(format!("{}: {e}", self.command[0])))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = std::sync::mpsc::channel();
        // Pipes have no read timeout; a reader thread plus channel recv
        // deadline stands in for one. The thread exits on EOF after a kill.
        std::thread::spawn(move || loop {
            let frame = read_frame(&mut stdout);
            let failed = frame.is_err();
            if tx.send(frame).is_err() || failed {
                return;
            }
        });
        self.child = Some(child);
        self.stdin = Some(stdin);
        self.frames = Some(rx);
        Ok(())
    }

    pub fn kill(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
        self.stdin = None;
        self.frames = None;
    }

    /// One request/response round trip with a response deadline. `None`
    /// deadline waits indefinitely (restart, scan).
    pub fn exchange(
        &mut self,
        request: &Request,
        deadline: Option<Duration>,
    ) -> Result<Exchange, DriverError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| DriverError::Dead("wrapper not spawned".into()))?;
        let payload = request.encode();
        if let Err(e) = write_frame(stdin, &payload) {
            self.kill();
            return Ok(self.died(format!("write failed: {e}")));
        }
        let _ = stdin.flush();
        let frames = self.frames.as_ref().expect("reader thread");
        let frame = match deadline {
            Some(limit) => match frames.recv_timeout(limit) {
                Ok(frame) => frame,
                Err(RecvTimeoutError::Timeout) => {
                    self.kill();
                    return Ok(Exchange::Hung);
                }
                Err(RecvTimeoutError::Disconnected) => {
                    self.kill();
                    return Ok(self.died("reader thread gone".into()));
                }
            },
            None => match frames.recv() {
                Ok(frame) => frame,
                Err(_) => {
                    self.kill();
                    return Ok(self.died("reader thread gone".into()));
                }
            },
        };
        match frame {
            Ok(bytes) => Ok(Exchange::Reply(Response::decode(&bytes)?)),
            Err(e) => {
                self.kill();
                Ok(self.died(format!("transport closed: {e}")))
            }
        }
    }

    fn died(&mut self, _why: String) -> Exchange {
        Exchange::Died
    }
}

impl Drop for SubprocessTransport {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Grace multiplier over the wrapper-side line budget before the engine
/// declares the exchange hung.
pub fn grace(budget: Duration) -> Duration {
    budget + budget / 5
}

//! JSON-lines oracle protocol over a child process or a pair of files.
//!
//! Request: `{"comb":[m1,m2,m3,m4]}` or `{"comb":"fp16"}`. Response:
//! `{"score": number}`. One UTF-8 line each, newline-terminated.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::bops::PrecisionCombination;
use crate::error::{Error, Result};
use crate::search::{AccuracyOracle, EvalTarget};

pub const DEFAULT_ORACLE_TIMEOUT: Duration = Duration::from_secs(60);
const POLL_INTERVAL: Duration = Duration::from_millis(2);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OracleEndpoint {
    /// Program and arguments; requests go to its stdin, responses come from its stdout.
    Process { command: Vec<String> },
    /// Requests are appended to `request`; the server appends responses to `response`.
    FilePair { request: PathBuf, response: PathBuf },
}

impl OracleEndpoint {
    /// Split a shell-style command line into a process endpoint.
    pub fn exec(command_line: &str) -> Result<Self> {
        let command = shlex::split(command_line)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::InvalidParams(format!("cannot parse oracle command {command_line:?}")))?;
        Ok(OracleEndpoint::Process { command })
    }
}

enum Transport {
    Process {
        child: Child,
        stdin: ChildStdin,
        lines: Receiver<std::io::Result<String>>,
    },
    Files {
        request: PathBuf,
        response: PathBuf,
        answered: usize,
    },
}

pub struct ExternalOracle {
    transport: Transport,
    timeout: Duration,
}

impl ExternalOracle {
    pub fn connect(endpoint: &OracleEndpoint, timeout: Duration) -> Result<Self> {
        let transport = match endpoint {
            OracleEndpoint::Process { command } => {
                let (program, args) = command
                    .split_first()
                    .ok_or_else(|| Error::InvalidParams("empty oracle command".into()))?;
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let (tx, rx) = mpsc::channel();
                thread::spawn(move || {
                    for line in BufReader::new(stdout).lines() {
                        if tx.send(line).is_err() {
                            break;
                        }
                    }
                });
                Transport::Process {
                    child,
                    stdin,
                    lines: rx,
                }
            }
            OracleEndpoint::FilePair { request, response } => Transport::Files {
                request: request.clone(),
                response: response.clone(),
                answered: complete_lines(response)?.len(),
            },
        };
        Ok(ExternalOracle { transport, timeout })
    }

    fn roundtrip(&mut self, request: &str) -> Result<String> {
        let timeout = self.timeout;
        match &mut self.transport {
            Transport::Process { stdin, lines, .. } => {
                writeln!(stdin, "{request}")?;
                stdin.flush()?;
                match lines.recv_timeout(timeout) {
                    Ok(line) => Ok(line?),
                    Err(RecvTimeoutError::Timeout) => Err(Error::OracleTimeout(timeout)),
                    Err(RecvTimeoutError::Disconnected) => {
                        Err(Error::MalformedResponse("oracle closed its output".into()))
                    }
                }
            }
            Transport::Files {
                request: req,
                response,
                answered,
            } => {
                let mut f = OpenOptions::new().create(true).append(true).open(req)?;
                writeln!(f, "{request}")?;
                f.flush()?;
                let start = Instant::now();
                loop {
                    let lines = complete_lines(response)?;
                    if lines.len() > *answered {
                        *answered += 1;
                        return Ok(lines[*answered - 1].clone());
                    }
                    if start.elapsed() >= timeout {
                        return Err(Error::OracleTimeout(timeout));
                    }
                    thread::sleep(POLL_INTERVAL);
                }
            }
        }
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        if let Transport::Process { child, .. } = &mut self.transport {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl AccuracyOracle for ExternalOracle {
    fn evaluate(&mut self, target: EvalTarget) -> Result<f64> {
        let line = self.roundtrip(&format_request(target))?;
        parse_response(&line)
    }
}

/// Newline-terminated lines of a file; a missing file has none.
fn complete_lines(path: &PathBuf) -> Result<Vec<String>> {
    let text = match File::open(path) {
        Ok(mut f) => {
            let mut s = String::new();
            std::io::Read::read_to_string(&mut f, &mut s)?;
            s
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut lines: Vec<String> = text.split('\n').map(str::to_string).collect();
    lines.pop();
    Ok(lines)
}

pub fn format_request(target: EvalTarget) -> String {
    match target {
        EvalTarget::Fp16 => json!({ "comb": "fp16" }).to_string(),
        EvalTarget::Combination(c) => json!({ "comb": c.as_array() }).to_string(),
    }
}

pub fn parse_request(line: &str) -> Result<EvalTarget> {
    let v: Value = serde_json::from_str(line.trim())
        .map_err(|e| Error::MalformedResponse(format!("request {line:?}: {e}")))?;
    match v.get("comb") {
        Some(Value::String(s)) if s == "fp16" => Ok(EvalTarget::Fp16),
        Some(c @ Value::Array(_)) => {
            let arr: [u8; 4] = serde_json::from_value(c.clone())
                .map_err(|e| Error::MalformedResponse(format!("request {line:?}: {e}")))?;
            Ok(EvalTarget::Combination(PrecisionCombination::new(arr)?))
        }
        _ => Err(Error::MalformedResponse(format!("request {line:?} has no comb field"))),
    }
}

pub fn parse_response(line: &str) -> Result<f64> {
    let v: Value = match serde_json::from_str(line.trim()) {
        Ok(v) => v,
        // Python's json module writes NaN and Infinity as bare tokens.
        Err(_) if line.contains("NaN") || line.contains("Infinity") => return Err(Error::NonFiniteScore),
        Err(e) => return Err(Error::MalformedResponse(format!("{line:?}: {e}"))),
    };
    let score = v
        .get("score")
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::MalformedResponse(format!("{line:?} has no numeric score")))?;
    if !score.is_finite() {
        return Err(Error::NonFiniteScore);
    }
    Ok(score)
}

pub fn format_response(score: f64) -> Result<String> {
    if !score.is_finite() {
        return Err(Error::NonFiniteScore);
    }
    Ok(json!({ "score": score }).to_string())
}

/// Answer requests from `input` with `oracle` until end of input.
pub fn serve<R: BufRead, W: Write>(oracle: &mut dyn AccuracyOracle, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let score = oracle.evaluate(parse_request(&line)?)?;
        writeln!(output, "{}", format_response(score)?)?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bops::ModelShape;
    use crate::search::{search, SearchConfig};

    fn min16(t: EvalTarget) -> Result<f64> {
        Ok(match t {
            EvalTarget::Fp16 => 1.0,
            EvalTarget::Combination(c) => f64::from(c.min_component()) / 16.0,
        })
    }

    #[test]
    fn wire_format() {
        let c = PrecisionCombination::new([7, 7, 6, 5]).unwrap();
        assert_eq!(format_request(EvalTarget::Combination(c)), r#"{"comb":[7,7,6,5]}"#);
        assert_eq!(format_request(EvalTarget::Fp16), r#"{"comb":"fp16"}"#);
        assert_eq!(parse_request(r#"{"comb":[7,7,6,5]}"#).unwrap(), EvalTarget::Combination(c));
        assert_eq!(parse_request(r#" {"comb": "fp16"} "#).unwrap(), EvalTarget::Fp16);
        assert!(parse_request(r#"{"comb":[7,7,6]}"#).is_err());
        assert!(parse_request(r#"{"comb":[0,7,6,5]}"#).is_err());

        assert_eq!(parse_response(r#"{"score": 0.25}"#).unwrap(), 0.25);
        assert_eq!(parse_response(r#"{"score":1}"#).unwrap(), 1.0);
        assert!(matches!(parse_response("{}"), Err(Error::MalformedResponse(_))));
        assert!(matches!(parse_response(r#"{"score":"x"}"#), Err(Error::MalformedResponse(_))));
        assert!(matches!(parse_response("garbage"), Err(Error::MalformedResponse(_))));
        assert!(matches!(parse_response(r#"{"score": NaN}"#), Err(Error::NonFiniteScore)));
        assert!(matches!(parse_response(r#"{"score": -Infinity}"#), Err(Error::NonFiniteScore)));
        for x in [0.9648508809371807, 0.9817552030337633, 0.1 + 0.2, f64::MIN_POSITIVE, 1.0 - f64::EPSILON] {
            assert_eq!(parse_response(&format_response(x).unwrap()).unwrap().to_bits(), x.to_bits());
        }

        let x = 0.1 + 0.2;
        assert_eq!(parse_response(&format_response(x).unwrap()).unwrap(), x);
        assert!(format_response(f64::NAN).is_err());
    }

    #[test]
    fn serve_answers_each_line() {
        let input = b"{\"comb\":\"fp16\"}\n\n{\"comb\":[4,9,9,9]}\n";
        let mut out = Vec::new();
        serve(&mut min16, &input[..], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "{\"score\":1.0}\n{\"score\":0.25}\n");
        assert!(serve(&mut min16, &b"{}\n"[..], &mut Vec::new()).is_err());
    }

    #[test]
    fn file_pair_transport_matches_in_process() {
        let dir = tempfile::tempdir().unwrap();
        let request = dir.path().join("req.jsonl");
        let response = dir.path().join("resp.jsonl");
        std::fs::write(&response, "").unwrap();
        let (req2, resp2) = (request.clone(), response.clone());
        let server = thread::spawn(move || {
            let mut served = 0;
            let deadline = Instant::now() + Duration::from_secs(30);
            while Instant::now() < deadline {
                let lines = complete_lines(&req2).unwrap();
                for line in &lines[served..] {
                    if line == "STOP" {
                        return;
                    }
                    let score = min16(parse_request(line).unwrap()).unwrap();
                    let mut f = OpenOptions::new().append(true).open(&resp2).unwrap();
                    writeln!(f, "{}", format_response(score).unwrap()).unwrap();
                }
                served = lines.len();
                thread::sleep(Duration::from_millis(1));
            }
        });
        let endpoint = OracleEndpoint::FilePair {
            request: request.clone(),
            response,
        };
        let mut ext = ExternalOracle::connect(&endpoint, Duration::from_secs(10)).unwrap();
        let shape = ModelShape::opt(64, 1);
        let cfg = SearchConfig {
            tolerance: 0.6,
            max_iters: None,
            ..SearchConfig::default()
        };
        let remote = search(&shape, &mut ext, &cfg).unwrap();
        let local = search(&shape, &mut min16, &cfg).unwrap();
        assert_eq!(remote, local);
        let mut f = OpenOptions::new().append(true).open(&request).unwrap();
        writeln!(f, "STOP").unwrap();
        server.join().unwrap();
    }

    #[test]
    fn file_pair_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let endpoint = OracleEndpoint::FilePair {
            request: dir.path().join("req"),
            response: dir.path().join("resp"),
        };
        let mut ext = ExternalOracle::connect(&endpoint, Duration::from_millis(30)).unwrap();
        assert!(matches!(ext.evaluate(EvalTarget::Fp16), Err(Error::OracleTimeout(_))));
    }

    #[test]
    fn exec_parsing() {
        assert_eq!(
            OracleEndpoint::exec("python3 'my oracle.py' --x 1").unwrap(),
            OracleEndpoint::Process {
                command: vec!["python3".into(), "my oracle.py".into(), "--x".into(), "1".into()]
            }
        );
        assert!(OracleEndpoint::exec("").is_err());
        assert!(OracleEndpoint::exec("'unterminated").is_err());
    }

    #[cfg(unix)]
    mod process {
        use super::*;

        fn sh(script: &str, timeout_ms: u64) -> ExternalOracle {
            let endpoint = OracleEndpoint::Process {
                command: vec!["sh".into(), "-c".into(), script.into()],
            };
            ExternalOracle::connect(&endpoint, Duration::from_millis(timeout_ms)).unwrap()
        }

        #[test]
        fn constant_responder() {
            let mut o = sh(r#"while read l; do echo '{"score": 0.5}'; done"#, 5000);
            assert_eq!(o.evaluate(EvalTarget::Fp16).unwrap(), 0.5);
            let c = PrecisionCombination::uniform(3).unwrap();
            assert_eq!(o.evaluate(EvalTarget::Combination(c)).unwrap(), 0.5);
        }

        #[test]
        fn failure_modes() {
            let mut o = sh("while read l; do echo '{}'; done", 5000);
            assert!(matches!(o.evaluate(EvalTarget::Fp16), Err(Error::MalformedResponse(_))));
            let mut o = sh("while read l; do echo '{\"score\": NaN}'; done", 5000);
            assert!(matches!(o.evaluate(EvalTarget::Fp16), Err(Error::NonFiniteScore)));
            let mut o = sh("sleep 5", 50);
            assert!(matches!(o.evaluate(EvalTarget::Fp16), Err(Error::OracleTimeout(_))));
            let mut o = sh("exit 0", 5000);
            assert!(o.evaluate(EvalTarget::Fp16).is_err());
        }

        #[test]
        fn missing_program() {
            let endpoint = OracleEndpoint::Process {
                command: vec!["/nonexistent/oracle".into()],
            };
            assert!(ExternalOracle::connect(&endpoint, DEFAULT_ORACLE_TIMEOUT).is_err());
        }
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::Diff;
use crate::memory::fnv1a;
use crate::policy::Specialization;
use crate::protocol::codec::{decode_resume, DecodeError};
use crate::protocol::{Action, ActionKind, ChildMetrics, ChildResult, ResumePackage, ResumeStatus, SpawnPackage};
use crate::skills::Skill;

use super::engine::TrajectoryStep;

pub const ENDPOINT_ENV: &str = "AGENTSPAWN_ENDPOINT";
pub const TOKEN_ENV: &str = "AGENTSPAWN_TOKEN";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("no script for specialization {0}")]
    NoScript(Specialization),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("undecodable response: {0}")]
    Decode(#[from] DecodeError),
    #[error("backend not configured: {0}")]
    NotConfigured(String),
}

/// Executes a child: spawn package in, resume package out.
pub trait ChildBackend {
    fn run(&mut self, package: &SpawnPackage, specialization: Specialization, seed: u64)
        -> Result<ResumePackage, BackendError>;

    /// Metric trajectory the child follows while it works, letting it spawn
    /// children of its own. Empty for leaf children.
    fn nested_trajectory(&self, _package: &SpawnPackage, _specialization: Specialization, _seed: u64) -> Vec<TrajectoryStep> {
        Vec::new()
    }
}

fn default_execution_time() -> f64 {
    10.0
}

fn default_pass_rate() -> f64 {
    1.0
}

fn default_status() -> ResumeStatus {
    ResumeStatus::Success
}

/// Scripted outcome of one child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChildScript {
    /// Applies only to the child with this spawn id when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spawn_id: Option<String>,
    #[serde(default = "default_status")]
    pub status: ResumeStatus,
    #[serde(default = "default_execution_time")]
    pub execution_time: f64,
    #[serde(default)]
    pub output: String,
    #[serde(default)]
    pub diffs: Vec<Diff>,
    #[serde(default)]
    pub skills_learned: Vec<Skill>,
    #[serde(default = "default_pass_rate")]
    pub test_pass_rate: f64,
    #[serde(default)]
    pub tokens_used: u64,
    #[serde(default)]
    pub api_calls: u64,
    /// Generated from the diffs when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<Action>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<TrajectoryStep>,
    /// Reports this id instead of the real one, to exercise validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_spawn_id: Option<String>,
}

impl Default for ChildScript {
    fn default() -> Self {
        Self {
            spawn_id: None,
            status: default_status(),
            execution_time: default_execution_time(),
            output: String::new(),
            diffs: Vec::new(),
            skills_learned: Vec::new(),
            test_pass_rate: default_pass_rate(),
            tokens_used: 0,
            api_calls: 0,
            trace: Vec::new(),
            trajectory: Vec::new(),
            report_spawn_id: None,
        }
    }
}

impl ChildScript {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.execution_time.is_finite() && self.execution_time >= 0.0) {
            return Err(format!("execution_time {} must be finite and nonnegative", self.execution_time));
        }
        if !(0.0..=1.0).contains(&self.test_pass_rate) {
            return Err(format!("test_pass_rate {} outside [0, 1]", self.test_pass_rate));
        }
        for d in &self.diffs {
            if !d.is_well_formed() {
                return Err(format!("diff for `{}` has unsorted or overlapping hunks", d.file));
            }
        }
        for s in &self.skills_learned {
            s.validate().map_err(|e| e.to_string())?;
        }
        for step in &self.trajectory {
            step.metrics.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    fn trace_for(&self, specialization: Specialization) -> Vec<Action> {
        if !self.trace.is_empty() {
            return self.trace.clone();
        }
        let mut trace = vec![
            Action::new(1, ActionKind::Observation, "received spawn package"),
            Action::new(2, ActionKind::Decision, format!("act as {}", specialization.title())),
        ];
        for d in &self.diffs {
            let step = trace.len() as u64 + 1;
            trace.push(Action::new(step, ActionKind::Edit, format!("edit {}", d.file)));
        }
        let step = trace.len() as u64 + 1;
        trace.push(Action::new(step, ActionKind::Observation, format!("finished with {}", self.status.as_str())));
        trace
    }

    pub fn to_resume(&self, package: &SpawnPackage, specialization: Specialization) -> ResumePackage {
        let mut files_modified: Vec<String> = Vec::new();
        for d in &self.diffs {
            if !files_modified.contains(&d.file) {
                files_modified.push(d.file.clone());
            }
        }
        ResumePackage {
            spawn_id: self.report_spawn_id.clone().unwrap_or_else(|| package.spawn_id.clone()),
            status: self.status,
            execution_time: self.execution_time,
            result: ChildResult {
                output: self.output.clone(),
                code_diff: self.diffs.clone(),
                files_modified,
            },
            trace: self.trace_for(specialization),
            skills_learned: self.skills_learned.clone(),
            metrics: ChildMetrics {
                tokens_used: self.tokens_used,
                api_calls: self.api_calls,
                test_pass_rate: self.test_pass_rate,
            },
        }
    }
}

/// Replays outcomes from a workload. A script pinned to the package's spawn
/// id wins; otherwise one of the unpinned scripts for the specialization is
/// picked from a hash of spawn id and seed. Specializations without scripts
/// get [`ChildScript::default`].
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    scripts: BTreeMap<Specialization, Vec<ChildScript>>,
}

impl ScriptedBackend {
    pub fn new(scripts: BTreeMap<Specialization, Vec<ChildScript>>) -> Self {
        Self { scripts }
    }

    pub fn script(&self, package: &SpawnPackage, specialization: Specialization, seed: u64) -> ChildScript {
        let Some(list) = self.scripts.get(&specialization) else {
            return ChildScript::default();
        };
        if let Some(s) = list.iter().find(|s| s.spawn_id.as_deref() == Some(package.spawn_id.as_str())) {
            return s.clone();
        }
        let free: Vec<&ChildScript> = list.iter().filter(|s| s.spawn_id.is_none()).collect();
        if free.is_empty() {
            return ChildScript::default();
        }
        let h = fnv1a(package.spawn_id.as_bytes()) ^ seed;
        free[(h % free.len() as u64) as usize].clone()
    }
}

impl ChildBackend for ScriptedBackend {
    fn run(
        &mut self,
        package: &SpawnPackage,
        specialization: Specialization,
        seed: u64,
    ) -> Result<ResumePackage, BackendError> {
        Ok(self.script(package, specialization, seed).to_resume(package, specialization))
    }

    fn nested_trajectory(&self, package: &SpawnPackage, specialization: Specialization, seed: u64) -> Vec<TrajectoryStep> {
        self.script(package, specialization, seed).trajectory
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Request/response channel to an external model service.
pub trait Transport {
    fn post(&self, url: &str, token: Option<&str>, body: &[u8]) -> Result<Vec<u8>, TransportError>;
}

/// Blocking HTTP transport.
#[derive(Debug, Clone, Copy, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post(&self, url: &str, token: Option<&str>, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        let mut req = ureq::post(url).header("Content-Type", "application/json");
        if let Some(t) = token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| TransportError(e.to_string()))?;
        resp.body_mut().read_to_vec().map_err(|e| TransportError(e.to_string()))
    }
}

/// Client for a service that takes an encoded spawn package and answers
/// with an encoded resume package.
#[derive(Debug, Clone)]
pub struct ServiceBackend<T> {
    transport: T,
    endpoint: String,
    token: Option<String>,
}

impl<T: Transport> ServiceBackend<T> {
    pub fn new(transport: T, endpoint: impl Into<String>, token: Option<String>) -> Self {
        Self {
            transport,
            endpoint: endpoint.into(),
            token,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl ServiceBackend<HttpTransport> {
    /// Reads endpoint and token from the environment.
    pub fn from_env() -> Result<Self, BackendError> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| BackendError::NotConfigured(format!("{ENDPOINT_ENV} unset")))?;
        Ok(Self::new(HttpTransport, endpoint, std::env::var(TOKEN_ENV).ok()))
    }
}

impl<T: Transport> ChildBackend for ServiceBackend<T> {
    fn run(&mut self, package: &SpawnPackage, _: Specialization, _: u64) -> Result<ResumePackage, BackendError> {
        let body = self
            .transport
            .post(&self.endpoint, self.token.as_deref(), &package.encode())?;
        Ok(decode_resume(&body)?)
    }
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    use super::*;
    use crate::coherence::Hunk;
    use crate::protocol::{ExecutionContext, PackageMemory, SpawnMetrics, TaskSpec};

    fn package(id: &str) -> SpawnPackage {
        SpawnPackage {
            spawn_id: id.into(),
            parent_id: "root".into(),
            timestamp: 1.0,
            memory: PackageMemory::default(),
            skills: vec![],
            context: ExecutionContext::new("/repo"),
            task: TaskSpec::new("fix the parser"),
            spawn_metrics: SpawnMetrics {
                interdependency: 1.0,
                cyclomatic: 1.0,
                failure_cascade: 1.0,
                context_occupancy: 0.9,
                uncertainty: 1.0,
                spawn_score: 0.8,
            },
        }
    }

    #[test]
    fn scripted_backend_is_deterministic_and_pinned_scripts_win() {
        let pinned = ChildScript {
            spawn_id: Some("spawn-0002".into()),
            execution_time: 700.0,
            ..ChildScript::default()
        };
        let a = ChildScript {
            output: "a".into(),
            diffs: vec![Diff::new("x.rs", vec![Hunk::new(1, ["a"], ["b"])])],
            ..ChildScript::default()
        };
        let b = ChildScript {
            output: "b".into(),
            ..ChildScript::default()
        };
        let mut backend = ScriptedBackend::new(BTreeMap::from([(
            Specialization::Refactoring,
            vec![pinned, a, b],
        )]));
        let p1 = package("spawn-0001");
        let r1 = backend.run(&p1, Specialization::Refactoring, 7).unwrap();
        assert_eq!(r1, backend.run(&p1, Specialization::Refactoring, 7).unwrap());
        assert_eq!(r1.spawn_id, "spawn-0001");
        assert!(r1.output_is_scripted());
        let r2 = backend.run(&package("spawn-0002"), Specialization::Refactoring, 7).unwrap();
        assert_eq!(r2.execution_time, 700.0);
        let r3 = backend.run(&p1, Specialization::Simplification, 7).unwrap();
        assert_eq!(r3.execution_time, 10.0);
    }

    impl ResumePackage {
        fn output_is_scripted(&self) -> bool {
            (self.result.output == "a" && self.result.files_modified == ["x.rs"])
                || (self.result.output == "b" && self.result.files_modified.is_empty())
        }
    }

    struct Canned {
        reply: Vec<u8>,
        seen: RefCell<Vec<(String, Option<String>, Vec<u8>)>>,
    }

    impl Transport for Canned {
        fn post(&self, url: &str, token: Option<&str>, body: &[u8]) -> Result<Vec<u8>, TransportError> {
            self.seen
                .borrow_mut()
                .push((url.to_string(), token.map(String::from), body.to_vec()));
            Ok(self.reply.clone())
        }
    }

    #[test]
    fn service_backend_round_trip() {
        let p = package("spawn-0001");
        let reply = ChildScript::default().to_resume(&p, Specialization::Refactoring);
        let transport = Canned {
            reply: reply.encode(),
            seen: RefCell::new(vec![]),
        };
        let mut backend = ServiceBackend::new(transport, "http://svc/run", Some("tok".into()));
        let got = backend.run(&p, Specialization::Refactoring, 0).unwrap();
        assert_eq!(got, reply);
        let seen = backend.transport.seen.borrow();
        assert_eq!(seen[0].0, "http://svc/run");
        assert_eq!(seen[0].1.as_deref(), Some("tok"));
        assert_eq!(seen[0].2, p.encode());
    }

    #[test]
    fn service_backend_rejects_garbage() {
        let transport = Canned {
            reply: b"{\"spawn_id\":1}".to_vec(),
            seen: RefCell::new(vec![]),
        };
        let mut backend = ServiceBackend::new(transport, "http://svc", None);
        assert!(matches!(
            backend.run(&package("s"), Specialization::Refactoring, 0),
            Err(BackendError::Decode(_))
        ));
    }

    #[test]
    fn http_transport_against_local_listener() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let p = package("spawn-0001");
        let reply = ChildScript::default().to_resume(&p, Specialization::Refactoring).encode();
        let served = reply.clone();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                served.len()
            )
            .unwrap();
            stream.write_all(&served).unwrap();
            (body, auth)
        });
        let mut backend = ServiceBackend::new(HttpTransport, format!("http://{addr}/spawn"), Some("secret".into()));
        let got = backend.run(&p, Specialization::Refactoring, 0).unwrap();
        let (body, auth) = server.join().unwrap();
        assert_eq!(got.encode(), reply);
        assert_eq!(body, p.encode());
        assert!(auth.ends_with("Bearer secret"));
    }
}

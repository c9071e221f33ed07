//! Line-oriented scenario scripts and the engine that replays them.
//!
//! Grammar, one command per line, `#` starts a comment:
//!
//! ```text
//! CONTAINER <id>
//! SEED_HIO <file>
//! FREEZE_HIO
//! HOST_SERVICE <name> TYPE=EXE|DLL IMAGE=<path> [GROUP=<g>] [DEPS=<a,b,...>]
//!              [HARDCODED] [PAYLOAD=<str>] [BINARY=<file>]
//! DUPLICATE <svc> INTO <cid> [NOREWRITE]
//! START <svc>
//! REQUEST <cid|HOST> <svc> EXPECT <payload>
//! ASSERT STATUS <svc> <state>
//! ASSERT PLACEMENT <svc> <cid|HOST>
//! ASSERT ACL <pattern> CONTAINS <svc>
//! ASSERT HIO_STABLE
//! ```
//!
//! `PAYLOAD` values and `EXPECT` payloads are single whitespace-free tokens.
//! `SEED_HIO` and `BINARY` paths are resolved relative to the scenario
//! file's directory when the scenario was loaded from disk. The first
//! `ASSERT HIO_STABLE` records a baseline; each later one asserts that the
//! gateway performed zero access-list insertions since the previous one.
//! Execution is deterministic: replaying a scenario yields a byte-identical
//! event log. The first failing assertion aborts the run; other command
//! failures are recorded in the log and execution continues so that later
//! assertions can observe the resulting state.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::json;
use thiserror::Error;

use crate::binscan::parse_mock_binary;
use crate::event::EventLog;
use crate::hio::HioTable;
use crate::namespace::{Realm, ResourceName};
use crate::scm::{ServiceRecord, ServiceStatus};
use crate::sim::Simulation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: scenario parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: cannot load {path}: {message}")]
    Input {
        line: usize,
        path: String,
        message: String,
    },
    #[error("line {line}: assertion failed in `{command}`: expected {expected}, got {actual}")]
    Assertion {
        line: usize,
        command: String,
        expected: String,
        actual: String,
    },
    #[error("cannot read scenario: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostServiceSpec {
    pub name: String,
    pub exe: bool,
    pub image: String,
    pub group: Option<String>,
    pub deps: Vec<String>,
    pub hardcoded: bool,
    pub payload: Option<String>,
    pub binary: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Container(u32),
    SeedHio(String),
    FreezeHio,
    HostService(HostServiceSpec),
    Duplicate {
        service: String,
        container: u32,
        norewrite: bool,
    },
    Start(String),
    Request {
        requester: Realm,
        service: String,
        expect: String,
    },
    AssertStatus {
        service: String,
        status: ServiceStatus,
    },
    AssertPlacement {
        service: String,
        realm: Realm,
    },
    AssertAcl {
        pattern: String,
        service: String,
    },
    AssertHioStable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioLine {
    pub line: usize,
    pub text: String,
    pub command: Command,
}

/// A parsed scenario script.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    commands: Vec<ScenarioLine>,
    origin: Option<PathBuf>,
}

impl Scenario {
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, ScenarioError> {
        let mut commands = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let stmt = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            };
            let stmt = stmt.trim();
            if stmt.is_empty() {
                continue;
            }
            let command = parse_command(line, stmt)?;
            commands.push(ScenarioLine {
                line,
                text: stmt.to_string(),
                command,
            });
        }
        Ok(Scenario {
            name: name.into(),
            seed: 0,
            commands,
            origin: None,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".to_string());
        let mut scenario = Self::parse(name, &text)?;
        scenario.origin = Some(path.to_path_buf());
        Ok(scenario)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn commands(&self) -> &[ScenarioLine] {
        &self.commands
    }

    /// Directory used to resolve relative file references in commands.
    fn base_dir(&self) -> PathBuf {
        self.origin
            .as_ref()
            .and_then(|p| p.parent())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

fn parse_command(line: usize, stmt: &str) -> Result<Command, ScenarioError> {
    let err = |message: String| ScenarioError::Parse { line, message };
    let mut tokens = stmt.split_whitespace();
    let head = tokens.next().expect("non-empty statement");
    match head {
        "CONTAINER" => {
            let id = tokens
                .next()
                .ok_or_else(|| err("CONTAINER needs an id".into()))?;
            let id: u32 = id
                .parse()
                .map_err(|_| err(format!("bad container id {id:?}")))?;
            expect_end(line, tokens)?;
            Ok(Command::Container(id))
        }
        "SEED_HIO" => {
            let file = tokens
                .next()
                .ok_or_else(|| err("SEED_HIO needs a file".into()))?;
            expect_end(line, tokens)?;
            Ok(Command::SeedHio(file.to_string()))
        }
        "FREEZE_HIO" => {
            expect_end(line, tokens)?;
            Ok(Command::FreezeHio)
        }
        "HOST_SERVICE" => {
            let name = tokens
                .next()
                .ok_or_else(|| err("HOST_SERVICE needs a name".into()))?
                .to_string();
            let mut spec = HostServiceSpec {
                name,
                exe: true,
                image: String::new(),
                group: None,
                deps: Vec::new(),
                hardcoded: false,
                payload: None,
                binary: None,
            };
            let mut saw_type = false;
            let mut saw_image = false;
            for tok in tokens {
                if tok == "HARDCODED" {
                    spec.hardcoded = true;
                } else if let Some(v) = tok.strip_prefix("TYPE=") {
                    saw_type = true;
                    spec.exe = match v {
                        "EXE" => true,
                        "DLL" => false,
                        other => return Err(err(format!("bad TYPE {other:?}"))),
                    };
                } else if let Some(v) = tok.strip_prefix("IMAGE=") {
                    saw_image = true;
                    spec.image = v.to_string();
                } else if let Some(v) = tok.strip_prefix("GROUP=") {
                    spec.group = Some(v.to_string());
                } else if let Some(v) = tok.strip_prefix("DEPS=") {
                    spec.deps = v.split(',').map(str::to_string).collect();
                } else if let Some(v) = tok.strip_prefix("PAYLOAD=") {
                    spec.payload = Some(v.to_string());
                } else if let Some(v) = tok.strip_prefix("BINARY=") {
                    spec.binary = Some(v.to_string());
                } else {
                    return Err(err(format!("unknown HOST_SERVICE field {tok:?}")));
                }
            }
            if !saw_type || !saw_image {
                return Err(err("HOST_SERVICE requires TYPE= and IMAGE=".into()));
            }
            Ok(Command::HostService(spec))
        }
        "DUPLICATE" => {
            let service = tokens
                .next()
                .ok_or_else(|| err("DUPLICATE needs a service".into()))?
                .to_string();
            match tokens.next() {
                Some("INTO") => {}
                other => return Err(err(format!("expected INTO, got {other:?}"))),
            }
            let cid = tokens
                .next()
                .ok_or_else(|| err("DUPLICATE needs a container id".into()))?;
            let container: u32 = cid
                .parse()
                .map_err(|_| err(format!("bad container id {cid:?}")))?;
            let norewrite = match tokens.next() {
                None => false,
                Some("NOREWRITE") => true,
                Some(other) => return Err(err(format!("unexpected token {other:?}"))),
            };
            expect_end(line, tokens)?;
            Ok(Command::Duplicate {
                service,
                container,
                norewrite,
            })
        }
        "START" => {
            let service = tokens
                .next()
                .ok_or_else(|| err("START needs a service".into()))?
                .to_string();
            expect_end(line, tokens)?;
            Ok(Command::Start(service))
        }
        "REQUEST" => {
            let realm = tokens
                .next()
                .ok_or_else(|| err("REQUEST needs a requester".into()))?;
            let requester =
                Realm::from_str(realm).map_err(|_| err(format!("bad requester {realm:?}")))?;
            let service = tokens
                .next()
                .ok_or_else(|| err("REQUEST needs a service".into()))?
                .to_string();
            match tokens.next() {
                Some("EXPECT") => {}
                other => return Err(err(format!("expected EXPECT, got {other:?}"))),
            }
            let expect = tokens
                .next()
                .ok_or_else(|| err("REQUEST needs an expected payload".into()))?
                .to_string();
            expect_end(line, tokens)?;
            Ok(Command::Request {
                requester,
                service,
                expect,
            })
        }
        "ASSERT" => {
            let kind = tokens
                .next()
                .ok_or_else(|| err("ASSERT needs a kind".into()))?;
            match kind {
                "STATUS" => {
                    let service = tokens
                        .next()
                        .ok_or_else(|| err("ASSERT STATUS needs a service".into()))?
                        .to_string();
                    let status = tokens
                        .next()
                        .ok_or_else(|| err("ASSERT STATUS needs a state".into()))?;
                    let status = ServiceStatus::from_str(status).map_err(|e| err(e))?;
                    expect_end(line, tokens)?;
                    Ok(Command::AssertStatus { service, status })
                }
                "PLACEMENT" => {
                    let service = tokens
                        .next()
                        .ok_or_else(|| err("ASSERT PLACEMENT needs a service".into()))?
                        .to_string();
                    let realm = tokens
                        .next()
                        .ok_or_else(|| err("ASSERT PLACEMENT needs a realm".into()))?;
                    let realm = Realm::from_str(realm)
                        .map_err(|_| err(format!("bad realm {realm:?}")))?;
                    expect_end(line, tokens)?;
                    Ok(Command::AssertPlacement { service, realm })
                }
                "ACL" => {
                    // The pattern may contain spaces; split on the CONTAINS
                    // keyword instead of whitespace.
                    let rest = stmt
                        .strip_prefix("ASSERT")
                        .and_then(|s| s.trim_start().strip_prefix("ACL"))
                        .map(str::trim)
                        .unwrap_or("");
                    let (pattern, service) = rest
                        .rsplit_once(" CONTAINS ")
                        .ok_or_else(|| err("ASSERT ACL needs `<pattern> CONTAINS <svc>`".into()))?;
                    let pattern = pattern.trim();
                    let service = service.trim();
                    if pattern.is_empty() || service.is_empty() || service.contains(' ') {
                        return Err(err("ASSERT ACL needs `<pattern> CONTAINS <svc>`".into()));
                    }
                    Ok(Command::AssertAcl {
                        pattern: pattern.to_string(),
                        service: service.to_string(),
                    })
                }
                "HIO_STABLE" => {
                    expect_end(line, tokens)?;
                    Ok(Command::AssertHioStable)
                }
                other => Err(err(format!("unknown assertion {other:?}"))),
            }
        }
        other => Err(err(format!("unknown command {other:?}"))),
    }
}

fn expect_end<'a>(
    line: usize,
    mut tokens: impl Iterator<Item = &'a str>,
) -> Result<(), ScenarioError> {
    match tokens.next() {
        None => Ok(()),
        Some(tok) => Err(ScenarioError::Parse {
            line,
            message: format!("unexpected trailing token {tok:?}"),
        }),
    }
}

/// Drives a simulation through a scenario and keeps the final state
/// inspectable.
#[derive(Debug, Default)]
pub struct ScenarioRunner {
    sim: Simulation,
    hio_baseline: Option<u64>,
}

impl ScenarioRunner {
    pub fn new() -> Self {
        ScenarioRunner {
            sim: Simulation::new(),
            hio_baseline: None,
        }
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulation {
        &mut self.sim
    }

    pub fn log(&self) -> &EventLog {
        self.sim.log()
    }

    /// Executes every command in order. The first failing assertion aborts
    /// the run with a diagnostic naming the command line.
    pub fn run(&mut self, scenario: &Scenario) -> Result<(), ScenarioError> {
        self.sim.log_mut().ok(
            "harness",
            "scenario_start",
            json!({ "name": scenario.name, "seed": scenario.seed }),
        );
        for entry in &scenario.commands {
            match self.execute(scenario, entry) {
                Ok(outcome) => {
                    self.sim.log_mut().push(
                        "harness",
                        "command",
                        json!({ "line": entry.line, "text": entry.text }),
                        outcome,
                    );
                }
                Err(e) => {
                    self.sim.log_mut().push(
                        "harness",
                        "command",
                        json!({ "line": entry.line, "text": entry.text }),
                        "AssertionFailed",
                    );
                    self.sim.log_mut().push(
                        "harness",
                        "scenario_end",
                        json!({ "name": scenario.name }),
                        "AssertionFailed",
                    );
                    return Err(e);
                }
            }
        }
        self.sim
            .log_mut()
            .ok("harness", "scenario_end", json!({ "name": scenario.name }));
        Ok(())
    }

    /// Runs one command; `Err` means a failed assertion or unreadable input
    /// file, anything else is reported through the returned outcome code.
    fn execute(
        &mut self,
        scenario: &Scenario,
        entry: &ScenarioLine,
    ) -> Result<String, ScenarioError> {
        let fail = |expected: String, actual: String| ScenarioError::Assertion {
            line: entry.line,
            command: entry.text.clone(),
            expected,
            actual,
        };
        let outcome = match &entry.command {
            Command::Container(id) => code_of(self.sim.create_container(*id).map(|_| ())),
            Command::SeedHio(file) => {
                let path = scenario.base_dir().join(file);
                let text =
                    fs::read_to_string(&path).map_err(|e| ScenarioError::Input {
                        line: entry.line,
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                let table =
                    HioTable::load_seed_text(&text).map_err(|e| ScenarioError::Input {
                        line: entry.line,
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                self.sim.set_hio_table(table, Some(file));
                "ok".to_string()
            }
            Command::FreezeHio => {
                self.sim.freeze_hio();
                "ok".to_string()
            }
            Command::HostService(spec) => {
                let image = ResourceName::file(&spec.image).map_err(|e| ScenarioError::Parse {
                    line: entry.line,
                    message: format!("bad IMAGE: {e}"),
                })?;
                let mut record = if spec.exe {
                    ServiceRecord::exe(&spec.name, image)
                } else {
                    let group = spec.group.clone().ok_or_else(|| ScenarioError::Parse {
                        line: entry.line,
                        message: "DLL service requires GROUP=".into(),
                    })?;
                    ServiceRecord::dll(&spec.name, image, group)
                };
                if !spec.deps.is_empty() {
                    let deps: Vec<&str> = spec.deps.iter().map(String::as_str).collect();
                    record = record.with_dependencies(&deps);
                }
                if let Some(payload) = &spec.payload {
                    record = record.with_payload(payload);
                }
                if spec.hardcoded {
                    record = record.hardcoded();
                }
                if let Some(file) = &spec.binary {
                    let path = scenario.base_dir().join(file);
                    let text =
                        fs::read_to_string(&path).map_err(|e| ScenarioError::Input {
                            line: entry.line,
                            path: path.display().to_string(),
                            message: e.to_string(),
                        })?;
                    let binary =
                        parse_mock_binary(&text).map_err(|e| ScenarioError::Input {
                            line: entry.line,
                            path: path.display().to_string(),
                            message: e.to_string(),
                        })?;
                    record = record.with_binary(binary);
                }
                code_of(self.sim.install_host_service(record))
            }
            Command::Duplicate {
                service,
                container,
                norewrite,
            } => {
                let cid = match crate::namespace::ContainerId::new(*container) {
                    Ok(cid) => cid,
                    Err(e) => return Ok(crate::sim::SimError::from(e).code().to_string()),
                };
                let result = if *norewrite {
                    self.sim.duplicate_service_unrewritten(service, cid)
                } else {
                    self.sim.duplicate_service(service, cid)
                };
                code_of(result.map(|_| ()))
            }
            Command::Start(service) => code_of(self.sim.start_service(service).map(|_| ())),
            Command::Request {
                requester,
                service,
                expect,
            } => {
                match self.sim.dispatch_request(*requester, service, b"") {
                    Ok(response) if &response == expect => "ok".to_string(),
                    Ok(response) => return Err(fail(expect.clone(), response)),
                    Err(e) => return Err(fail(expect.clone(), e.code().to_string())),
                }
            }
            Command::AssertStatus { service, status } => {
                match self.sim.query_service_status(service) {
                    Ok(actual) if actual == *status => "ok".to_string(),
                    Ok(actual) => return Err(fail(status.to_string(), actual.to_string())),
                    Err(e) => return Err(fail(status.to_string(), e.code().to_string())),
                }
            }
            Command::AssertPlacement { service, realm } => {
                match self.sim.scm().process_hosting(service) {
                    Some(process) if process.realm == *realm => "ok".to_string(),
                    Some(process) => {
                        return Err(fail(realm.to_string(), process.realm.to_string()))
                    }
                    None => return Err(fail(realm.to_string(), "not hosted".into())),
                }
            }
            Command::AssertAcl { pattern, service } => {
                match self.sim.hio().access_list(pattern) {
                    Some(acl) if acl.contains(service) => "ok".to_string(),
                    Some(_) => {
                        return Err(fail(
                            format!("{service} in ACL of {pattern}"),
                            "not in list".into(),
                        ))
                    }
                    None => {
                        return Err(fail(
                            format!("{service} in ACL of {pattern}"),
                            "no such pattern".into(),
                        ))
                    }
                }
            }
            Command::AssertHioStable => {
                let insertions = self.sim.hio().insertion_count();
                let outcome = match self.hio_baseline {
                    None => "ok-baseline".to_string(),
                    Some(prev) if insertions == prev => "ok".to_string(),
                    Some(prev) => {
                        return Err(fail(
                            "0 new access-list insertions".into(),
                            format!("{} new insertions", insertions - prev),
                        ))
                    }
                };
                self.hio_baseline = Some(insertions);
                outcome
            }
        };
        Ok(outcome)
    }
}

fn code_of(result: Result<(), crate::sim::SimError>) -> String {
    match result {
        Ok(()) => "ok".to_string(),
        Err(e) => e.code().to_string(),
    }
}

/// Parses nothing, runs everything: executes the scenario on a fresh
/// simulation and returns the event log together with the run result.
pub fn run_scenario(scenario: &Scenario) -> (EventLog, Result<(), ScenarioError>) {
    let mut runner = ScenarioRunner::new();
    let result = runner.run(scenario);
    (runner.sim.log().clone(), result)
}

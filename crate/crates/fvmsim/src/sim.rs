//! The simulation engine: owns all module state, drives the service
//! start-up protocol, and records every action in the event log.
//!
//! Each spawned service process has an internal agent that performs the
//! protocol steps (table registration, name registration, ready report) and
//! the start-up IPC accesses automatically, so a scenario only issues
//! creates, duplicates, starts, and requests. The agent can be suppressed
//! to drive the raw protocol operations by hand.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;
use thiserror::Error;

use crate::binscan::{rewrite_runtime_arg, scan_binary, CallClass, Value};
use crate::duplication::{
    duplicate_service as duplicate_service_impl, failure_reason_for, placement_decision,
    DuplicationError, DuplicationPlan,
};
use crate::event::EventLog;
use crate::hio::{Decision, HioError, HioTable};
use crate::namespace::{
    base_name, ContainerId, CowStore, NamespaceError, Realm, ResourceKind, ResourceName,
};
use crate::scm::{
    FailureReason, Pid, Scm, ScmError, ServiceRecord, ServiceStatus, ServiceType,
};

const SCM_IMAGE: &str = "/windows/system32/services.exe";
const SVCHOST_IMAGE: &str = "/windows/system32/svchost.exe";
const CONTROL_PIPE_PREFIX: &str = r"\Device\NamedPipe\net\NtControlPipe";
const SCM_CREATED_EVENT: &str = r"\BaseNamedObjects\ScmCreatedEvent";

/// Runtime argument interception for one duplicated instance: string
/// arguments equal to the original name are replaced by the duplicated one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteRule {
    pub original: String,
    pub duplicated: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Namespace(#[from] NamespaceError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Duplication(#[from] DuplicationError),
    #[error(transparent)]
    Hio(#[from] HioError),
}

impl SimError {
    /// Short error code used in event-log outcomes.
    pub fn code(&self) -> &'static str {
        match self {
            SimError::Namespace(e) => match e {
                NamespaceError::InvalidContainerId => "InvalidContainerId",
                NamespaceError::DuplicateContainerId(_) => "DuplicateContainerId",
                NamespaceError::NoSuchContainer(_) => "NoSuchContainer",
                NamespaceError::AlreadyDecorated(_) => "AlreadyDecorated",
                NamespaceError::MalformedName(_) => "MalformedName",
            },
            SimError::Scm(e) => match e {
                ScmError::ServiceExists(_) => "ServiceExists",
                ScmError::MalformedRecord(_) => "MalformedRecord",
                ScmError::NoSuchService(_) => "NoSuchService",
                ScmError::DependencyFailed { .. } => "DependencyFailed",
                ScmError::UnknownPid(_) => "UnknownPid",
                ScmError::NameNotPending(_) => "NameNotPending",
                ScmError::AlreadyRegistered(_) => "AlreadyRegistered",
                ScmError::NotInTable(_) => "NotInTable",
                ScmError::WrongState { .. } => "WrongState",
            },
            SimError::Duplication(e) => match e {
                DuplicationError::NoSuchService(_) => "NoSuchService",
                DuplicationError::AlreadyDuplicated(_) => "AlreadyDuplicated",
                DuplicationError::NotDuplicatedRecord(_) => "NotDuplicatedRecord",
                DuplicationError::CoreProcessNotDuplicable(_) => "CoreProcessNotDuplicable",
                DuplicationError::ConflictingPlacement { .. } => "ConflictingPlacement",
                DuplicationError::NoSuchContainer(_) => "NoSuchContainer",
                DuplicationError::SourceNotDuplicable { .. } => "SourceNotDuplicable",
                DuplicationError::ImageNotFound(_) => "ImageNotFound",
                DuplicationError::Namespace(_) => "Namespace",
                DuplicationError::Scm(e) => SimError::Scm(e.clone()).code(),
            },
            SimError::Hio(_) => "HioSeed",
        }
    }
}

/// One deterministic simulated machine: host state, containers, the SCM,
/// the host-IPC gateway, and the event log.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub(crate) store: CowStore,
    pub(crate) scm: Scm,
    pub(crate) hio: HioTable,
    pub(crate) armed_rewrites: BTreeMap<String, RewriteRule>,
    pub(crate) hio_armed: BTreeSet<String>,
    pub(crate) log: EventLog,
    agent_enabled: bool,
    pipe_counter: u32,
    scm_pid: Pid,
}

impl Default for Simulation {
    fn default() -> Self {
        Self::new()
    }
}

impl Simulation {
    pub fn new() -> Self {
        let mut scm = Scm::new();
        let mut log = EventLog::new();
        let scm_pid = scm.spawn_process(
            ResourceName::file(SCM_IMAGE).expect("static path"),
            String::new(),
            Realm::Host,
            None,
        );
        log.ok(
            "scm",
            "core_process_started",
            json!({ "pid": scm_pid, "image": SCM_IMAGE }),
        );
        Simulation {
            store: CowStore::new(),
            scm,
            hio: HioTable::new(),
            armed_rewrites: BTreeMap::new(),
            hio_armed: BTreeSet::new(),
            log,
            agent_enabled: true,
            pipe_counter: 0,
            scm_pid,
        }
    }

    pub fn store(&self) -> &CowStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut CowStore {
        &mut self.store
    }

    pub fn scm(&self) -> &Scm {
        &self.scm
    }

    pub fn hio(&self) -> &HioTable {
        &self.hio
    }

    pub fn hio_mut(&mut self) -> &mut HioTable {
        &mut self.hio
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub(crate) fn log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    pub fn scm_pid(&self) -> Pid {
        self.scm_pid
    }

    pub fn rewrite_rule(&self, instance: &str) -> Option<&RewriteRule> {
        self.armed_rewrites.get(instance)
    }

    /// Suppresses or re-enables the per-process start-up agent; with the
    /// agent off, `start_service` leaves services start-pending and the
    /// protocol steps must be driven by hand.
    pub fn set_agent_enabled(&mut self, enabled: bool) {
        self.agent_enabled = enabled;
    }

    pub fn create_container(&mut self, id: u32) -> Result<ContainerId, SimError> {
        let cid = ContainerId::new(id)?;
        match self.store.create_container(cid) {
            Ok(_) => {
                self.log
                    .ok("harness", "container_created", json!({ "id": id }));
                Ok(cid)
            }
            Err(e) => {
                self.log.push(
                    "harness",
                    "container_created",
                    json!({ "id": id }),
                    SimError::from(e.clone()).code(),
                );
                Err(e.into())
            }
        }
    }

    /// Creates a host service record and seeds its image bytes into the
    /// host layer so the image can later be copied into containers.
    pub fn install_host_service(&mut self, record: ServiceRecord) -> Result<(), SimError> {
        let image = record.image_path.clone();
        if self.store.read(Realm::Host, &image)?.is_none() {
            self.store
                .write_host(image.clone(), format!("image:{}", record.name).into_bytes())?;
        }
        let detail = json!({
            "name": record.name,
            "type": record.svc_type.to_string(),
            "group": record.group,
            "hardcoded": record.hardcoded_name,
        });
        match self.scm.create_service(record) {
            Ok(()) => {
                self.log.ok("scm", "service_created", detail);
                Ok(())
            }
            Err(e) => {
                self.log
                    .push("scm", "service_created", detail, SimError::from(e.clone()).code());
                Err(e.into())
            }
        }
    }

    /// Installs the host-IPC table the renaming decision consults.
    pub fn set_hio_table(&mut self, table: HioTable, origin: Option<&str>) {
        self.log.ok(
            "hio",
            "table_seeded",
            json!({ "entries": table.len(), "origin": origin }),
        );
        self.hio = table;
    }

    pub fn freeze_hio(&mut self) {
        self.hio.set_hio_flag(true);
        self.log.ok("hio", "table_frozen", json!({}));
    }

    /// Starts a service, recursively starting its dependencies first, and
    /// runs the start-up agent unless suppressed. Returns the pid hosting
    /// the service; a protocol failure during start-up leaves the service
    /// `Failed(..)` without failing the call.
    pub fn start_service(&mut self, name: &str) -> Result<Pid, SimError> {
        let mut visiting = BTreeSet::new();
        self.start_recursive(name, &mut visiting)
    }

    fn start_recursive(
        &mut self,
        name: &str,
        visiting: &mut BTreeSet<String>,
    ) -> Result<Pid, SimError> {
        let record = self
            .scm
            .record(name)
            .cloned()
            .ok_or_else(|| ScmError::NoSuchService(name.to_string()))?;
        match self.scm.query_service_status(name)? {
            ServiceStatus::Running => {
                let pid = self
                    .scm
                    .process_hosting(name)
                    .map(|p| p.pid)
                    .expect("running service has a process");
                return Ok(pid);
            }
            ServiceStatus::Created => {}
            status => {
                return Err(ScmError::WrongState {
                    service: name.to_string(),
                    status: status.to_string(),
                    action: "start".into(),
                }
                .into())
            }
        }
        if !visiting.insert(name.to_string()) {
            let _ = self.scm.fail_service(name, FailureReason::DependencyFailed);
            self.log.push(
                "scm",
                "start_failed",
                json!({ "service": name, "reason": "dependency cycle" }),
                "DependencyFailed",
            );
            return Err(ScmError::DependencyFailed {
                service: name.to_string(),
                dependency: name.to_string(),
            }
            .into());
        }

        for dep in &record.dependencies {
            let dep_running = match self.scm.query_service_status(dep) {
                Ok(ServiceStatus::Running) => true,
                Ok(ServiceStatus::Created) => {
                    self.start_recursive(dep, visiting).is_ok()
                        && self.scm.query_service_status(dep) == Ok(ServiceStatus::Running)
                }
                _ => false,
            };
            if !dep_running {
                let _ = self.scm.fail_service(name, FailureReason::DependencyFailed);
                self.log.push(
                    "scm",
                    "start_failed",
                    json!({ "service": name, "reason": format!("dependency {dep} not running") }),
                    "DependencyFailed",
                );
                return Err(ScmError::DependencyFailed {
                    service: name.to_string(),
                    dependency: dep.clone(),
                }
                .into());
            }
        }

        self.log
            .ok("scm", "start_requested", json!({ "service": name }));

        let pid = match record.svc_type {
            ServiceType::ExeBased => {
                let realm = placement_decision(record.image_path.name(), &record.params)?;
                self.ensure_realm(realm)?;
                let pid = self.scm.spawn_process(
                    record.image_path.clone(),
                    record.params.clone(),
                    realm,
                    record.binary.clone(),
                );
                self.log.ok(
                    "scm",
                    "process_spawned",
                    json!({
                        "pid": pid,
                        "image": record.image_path.name(),
                        "params": record.params,
                        "realm": realm.to_string(),
                    }),
                );
                pid
            }
            ServiceType::DllBased => {
                let group = record
                    .group_token()
                    .expect("DLL record validated at creation")
                    .to_string();
                match self.scm.svchost_for_group(&group) {
                    Some(pid) => pid,
                    None => {
                        let image = ResourceName::file(SVCHOST_IMAGE).expect("static path");
                        let params = format!("-k {group}");
                        let realm = placement_decision(image.name(), &params)?;
                        self.ensure_realm(realm)?;
                        let pid = self.scm.spawn_process(image, params.clone(), realm, None);
                        self.scm.bind_svchost_group(&group, pid);
                        self.log.ok(
                            "scm",
                            "process_spawned",
                            json!({
                                "pid": pid,
                                "image": SVCHOST_IMAGE,
                                "params": params,
                                "realm": realm.to_string(),
                            }),
                        );
                        pid
                    }
                }
            }
        };

        self.scm.attach_service(pid, name)?;
        self.log.ok(
            "scm",
            "service_attached",
            json!({ "pid": pid, "service": name }),
        );

        if self.agent_enabled {
            self.run_agent(pid, &record);
        }
        Ok(pid)
    }

    fn ensure_realm(&self, realm: Realm) -> Result<(), SimError> {
        match realm {
            Realm::Host => Ok(()),
            Realm::Container(cid) => {
                if self.store.container_exists(cid) {
                    Ok(())
                } else {
                    Err(NamespaceError::NoSuchContainer(cid.get()).into())
                }
            }
        }
    }

    /// The agent inside a freshly started service process: start-up IPC
    /// accesses, then protocol steps 3 to 5.
    fn run_agent(&mut self, pid: Pid, record: &ServiceRecord) {
        let name = record.name.clone();
        let realm = self.scm.process(pid).expect("just spawned").realm;
        let base = base_name(&name).to_string();

        if let Realm::Container(cid) = realm {
            let pipe_no = self.pipe_counter;
            self.pipe_counter += 1;
            let startup_objects = [
                ResourceName::new(
                    ResourceKind::NamedPipe,
                    format!("{CONTROL_PIPE_PREFIX}{pipe_no}"),
                )
                .expect("valid pipe name"),
                ResourceName::new(ResourceKind::Event, SCM_CREATED_EVENT).expect("valid event"),
            ];
            for object in startup_objects {
                if !self.gateway_access(cid, &base, &name, &object) {
                    return;
                }
            }
        }

        if let Err(e) = self.scm.register_service_table(pid, &[name.clone()]) {
            self.log.push(
                "agent",
                "table_registered",
                json!({ "pid": pid, "table": [name] }),
                SimError::from(e).code(),
            );
            return;
        }
        self.log.ok(
            "agent",
            "table_registered",
            json!({ "pid": pid, "table": [name] }),
        );

        let claimed = self.claimed_name(record);
        match self.scm.register_service_name(pid, &claimed) {
            Ok(()) => {
                self.log.ok(
                    "agent",
                    "name_registered",
                    json!({ "pid": pid, "claimed": claimed, "service": name }),
                );
            }
            Err(e) => {
                let code = SimError::from(e.clone()).code();
                self.log.push(
                    "agent",
                    "name_registered",
                    json!({ "pid": pid, "claimed": claimed, "service": name }),
                    code,
                );
                if let Some(reason) = failure_reason_for(&e) {
                    let _ = self.scm.fail_service(&name, reason);
                    self.log.push(
                        "scm",
                        "start_failed",
                        json!({ "service": name, "reason": reason.to_string() }),
                        code,
                    );
                }
                return;
            }
        }

        // The instance's own ready event, created in its namespace.
        let ready = ResourceName::new(
            ResourceKind::Event,
            format!(r"\BaseNamedObjects\{base}ReadyEvent"),
        )
        .expect("valid event name");
        match realm {
            Realm::Host => {
                let _ = self.store.write_host(ready.clone(), b"set".to_vec());
                self.log.ok(
                    "agent",
                    "ipc_object_created",
                    json!({ "realm": "HOST", "object": ready.name() }),
                );
            }
            Realm::Container(cid) => {
                if !self.gateway_access(cid, &base, &name, &ready) {
                    return;
                }
            }
        }

        match self.scm.report_ready(pid, &name) {
            Ok(()) => {
                self.log
                    .ok("agent", "service_running", json!({ "service": name }));
            }
            Err(e) => {
                self.log.push(
                    "agent",
                    "service_running",
                    json!({ "service": name }),
                    SimError::from(e).code(),
                );
            }
        }
    }

    /// Routes one container IPC access through the gateway. Renamed objects
    /// are created in the container's private layer. Returns false when the
    /// access was denied, after failing the service.
    fn gateway_access(
        &mut self,
        cid: ContainerId,
        base: &str,
        instance: &str,
        object: &ResourceName,
    ) -> bool {
        let decision = self.hio.renaming_decision(cid, base, object);
        let renamed = match &decision {
            Decision::UseRenamed(r) => Some(r.name().to_string()),
            _ => None,
        };
        self.log.ok(
            "hio",
            "renaming_decision",
            json!({
                "container": cid.to_string(),
                "service": base,
                "object": object.name(),
                "decision": decision.label(),
                "renamed": renamed,
            }),
        );
        match decision {
            Decision::UseOriginal => true,
            Decision::UseRenamed(renamed) => {
                let _ = self.store.write(cid, renamed, b"set".to_vec());
                true
            }
            Decision::Denied => {
                let _ = self.scm.fail_service(instance, FailureReason::HioDenied);
                self.log.push(
                    "scm",
                    "start_failed",
                    json!({ "service": instance, "reason": "HioDenied" }),
                    "HioDenied",
                );
                false
            }
        }
    }

    /// The name the instance's step-4 registration call actually uses: for
    /// services embedding their own name, the string constant its binary
    /// passes to the registration API, run through the armed rewrite rule
    /// when present; otherwise the record name.
    fn claimed_name(&mut self, record: &ServiceRecord) -> String {
        if !record.hardcoded_name {
            return record.name.clone();
        }
        let Some(binary) = &record.binary else {
            return record.name.clone();
        };
        let base = base_name(&record.name);
        let Ok(occurrences) = scan_binary(binary, base) else {
            return record.name.clone();
        };
        let registration = occurrences
            .iter()
            .find(|o| o.klass == CallClass::ServiceApi)
            .or_else(|| occurrences.first());
        let Some(occ) = registration else {
            return record.name.clone();
        };
        let mut claimed = occ.matched_string.clone();
        if let Some(rule) = self.armed_rewrites.get(&record.name).cloned() {
            let args = rewrite_runtime_arg(
                &occ.api,
                vec![Value::Str(claimed.clone())],
                &rule.original,
                &rule.duplicated,
            );
            if let Some(Value::Str(rewritten)) = args.into_iter().next() {
                if rewritten != claimed {
                    self.log.ok(
                        "binscan",
                        "argument_rewritten",
                        json!({
                            "api": occ.api,
                            "from": claimed,
                            "to": rewritten,
                            "service": record.name,
                        }),
                    );
                }
                claimed = rewritten;
            }
        }
        claimed
    }

    /// Duplicates a service into a container with rewriting armed for
    /// records that embed their own name.
    pub fn duplicate_service(
        &mut self,
        name: &str,
        cid: ContainerId,
    ) -> Result<DuplicationPlan, SimError> {
        Ok(duplicate_service_impl(self, name, cid, true)?)
    }

    /// Like [`Simulation::duplicate_service`] but with runtime argument
    /// rewriting left unarmed, which reproduces the hard-coded-name
    /// start-up failure.
    pub fn duplicate_service_unrewritten(
        &mut self,
        name: &str,
        cid: ContainerId,
    ) -> Result<DuplicationPlan, SimError> {
        Ok(duplicate_service_impl(self, name, cid, false)?)
    }

    /// Step 6: forwards a request from a host or container client to the
    /// matching service instance and returns its response.
    pub fn dispatch_request(
        &mut self,
        requester: Realm,
        name: &str,
        request: &[u8],
    ) -> Result<String, SimError> {
        match self.scm.dispatch_request(requester, name) {
            Ok((target, response)) => {
                self.log.ok(
                    "scm",
                    "request_dispatched",
                    json!({
                        "requester": requester.to_string(),
                        "service": name,
                        "target": target,
                        "request": String::from_utf8_lossy(request),
                        "response": response,
                    }),
                );
                Ok(response)
            }
            Err(e) => {
                self.log.push(
                    "scm",
                    "request_dispatched",
                    json!({ "requester": requester.to_string(), "service": name }),
                    SimError::from(e.clone()).code(),
                );
                Err(e.into())
            }
        }
    }

    pub fn query_service_status(&self, name: &str) -> Result<ServiceStatus, SimError> {
        Ok(self.scm.query_service_status(name)?)
    }

    /// Raw protocol step 3, for runs with the agent suppressed.
    pub fn register_service_table(&mut self, pid: Pid, names: &[String]) -> Result<(), SimError> {
        let result = self.scm.register_service_table(pid, names);
        let outcome = match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => SimError::from(e.clone()).code().to_string(),
        };
        self.log.push(
            "scm",
            "table_registered",
            json!({ "pid": pid, "table": names }),
            outcome,
        );
        Ok(result?)
    }

    /// Raw protocol step 4, for runs with the agent suppressed.
    pub fn register_service_name(&mut self, pid: Pid, name: &str) -> Result<(), SimError> {
        let result = self.scm.register_service_name(pid, name);
        let outcome = match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => SimError::from(e.clone()).code().to_string(),
        };
        self.log.push(
            "scm",
            "name_registered",
            json!({ "pid": pid, "claimed": name }),
            outcome,
        );
        Ok(result?)
    }

    /// Raw protocol step 5, for runs with the agent suppressed.
    pub fn report_ready(&mut self, pid: Pid, name: &str) -> Result<(), SimError> {
        let result = self.scm.report_ready(pid, name);
        let outcome = match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => SimError::from(e.clone()).code().to_string(),
        };
        self.log.push(
            "scm",
            "service_ready",
            json!({ "pid": pid, "service": name }),
            outcome,
        );
        Ok(result?)
    }
}

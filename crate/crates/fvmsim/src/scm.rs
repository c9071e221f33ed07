//! Service Control Manager model: the service database, simulated service
//! processes, and the ordered service start-up protocol.
//!
//! A service reaches `Running` only through the full sequence: the record is
//! created, a process is spawned (or the service attaches to its svchost
//! group process) and becomes start-pending, the process registers its
//! service table, registers the service name (denied when the name is
//! already registered or absent from the table), and finally reports ready.
//! Name registration is the mechanism that prevents two instances of the
//! same service from running at once.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::binscan::MockBinary;
use crate::namespace::{base_name, decorate_suffix, Realm, ResourceKind, ResourceName};

pub type Pid = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceType {
    /// Runs as its own process from an executable image.
    ExeBased,
    /// Runs as a thread inside the shared svchost process for its group.
    DllBased,
}

impl fmt::Display for ServiceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServiceType::ExeBased => f.write_str("EXE"),
            ServiceType::DllBased => f.write_str("DLL"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartType {
    Automatic,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureReason {
    AlreadyRegistered,
    NotInTable,
    HioDenied,
    DependencyFailed,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailureReason::AlreadyRegistered => "AlreadyRegistered",
            FailureReason::NotInTable => "NotInTable",
            FailureReason::HioDenied => "HioDenied",
            FailureReason::DependencyFailed => "DependencyFailed",
        };
        f.write_str(s)
    }
}

/// Lifecycle state of one service record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceStatus {
    Created,
    StartPending,
    TableRegistered,
    NameRegistered,
    Running,
    Stopped,
    Failed(FailureReason),
}

impl fmt::Display for ServiceStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServiceStatus::Created => f.write_str("Created"),
            ServiceStatus::StartPending => f.write_str("StartPending"),
            ServiceStatus::TableRegistered => f.write_str("TableRegistered"),
            ServiceStatus::NameRegistered => f.write_str("NameRegistered"),
            ServiceStatus::Running => f.write_str("Running"),
            ServiceStatus::Stopped => f.write_str("Stopped"),
            ServiceStatus::Failed(reason) => write!(f, "Failed({reason})"),
        }
    }
}

impl FromStr for ServiceStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let status = match s {
            "Created" => ServiceStatus::Created,
            "StartPending" => ServiceStatus::StartPending,
            "TableRegistered" => ServiceStatus::TableRegistered,
            "NameRegistered" => ServiceStatus::NameRegistered,
            "Running" => ServiceStatus::Running,
            "Stopped" => ServiceStatus::Stopped,
            other => {
                let reason = other
                    .strip_prefix("Failed(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown service status {other:?}"))?;
                let reason = match reason {
                    "AlreadyRegistered" => FailureReason::AlreadyRegistered,
                    "NotInTable" => FailureReason::NotInTable,
                    "HioDenied" => FailureReason::HioDenied,
                    "DependencyFailed" => FailureReason::DependencyFailed,
                    other => return Err(format!("unknown failure reason {other:?}")),
                };
                ServiceStatus::Failed(reason)
            }
        };
        Ok(status)
    }
}

/// One entry of the SCM database.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceRecord {
    pub name: String,
    pub svc_type: ServiceType,
    pub image_path: ResourceName,
    pub params: String,
    pub start_type: StartType,
    pub dependencies: Vec<String>,
    /// svchost group; present exactly for DLL-based services.
    pub group: Option<String>,
    /// The service's binary embeds its own name and uses it in API calls.
    pub hardcoded_name: bool,
    /// Host-bound core records can never be duplicated.
    pub core: bool,
    /// Response this instance serves when a request is dispatched to it.
    pub payload: Option<String>,
    pub binary: Option<MockBinary>,
}

impl ServiceRecord {
    pub fn exe(name: impl Into<String>, image_path: ResourceName) -> Self {
        ServiceRecord {
            name: name.into(),
            svc_type: ServiceType::ExeBased,
            image_path,
            params: String::new(),
            start_type: StartType::Automatic,
            dependencies: Vec::new(),
            group: None,
            hardcoded_name: false,
            core: false,
            payload: None,
            binary: None,
        }
    }

    pub fn dll(
        name: impl Into<String>,
        image_path: ResourceName,
        group: impl Into<String>,
    ) -> Self {
        let group = group.into();
        ServiceRecord {
            name: name.into(),
            svc_type: ServiceType::DllBased,
            image_path,
            params: format!("-k {group}"),
            start_type: StartType::Automatic,
            dependencies: Vec::new(),
            group: Some(group),
            hardcoded_name: false,
            core: false,
            payload: None,
            binary: None,
        }
    }

    pub fn with_dependencies(mut self, deps: &[&str]) -> Self {
        self.dependencies = deps.iter().map(|d| d.to_string()).collect();
        self
    }

    pub fn with_payload(mut self, payload: impl Into<String>) -> Self {
        self.payload = Some(payload.into());
        self
    }

    pub fn with_binary(mut self, binary: MockBinary) -> Self {
        self.binary = Some(binary);
        self
    }

    pub fn hardcoded(mut self) -> Self {
        self.hardcoded_name = true;
        self
    }

    pub fn core_process(mut self) -> Self {
        self.core = true;
        self
    }

    pub fn manual(mut self) -> Self {
        self.start_type = StartType::Manual;
        self
    }

    /// The `-k` group token from the start-up parameters, which for a
    /// duplicated service carries the container decoration.
    pub fn group_token(&self) -> Option<&str> {
        group_token(&self.params)
    }
}

/// The group argument following `-k` in a parameter string.
pub fn group_token(params: &str) -> Option<&str> {
    let mut tokens = params.split_whitespace();
    while let Some(tok) = tokens.next() {
        if tok == "-k" {
            return tokens.next();
        }
    }
    None
}

/// A simulated process: an EXE service process, an svchost group process, or
/// a host core process.
#[derive(Debug, Clone)]
pub struct SimProcess {
    pub pid: Pid,
    pub image_path: ResourceName,
    pub params: String,
    pub realm: Realm,
    pub hosted_services: Vec<String>,
    /// Service names the process registered in its service table.
    pub table: Vec<String>,
    pub binary: Option<MockBinary>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScmError {
    #[error("service {0:?} already exists")]
    ServiceExists(String),
    #[error("malformed service record: {0}")]
    MalformedRecord(String),
    #[error("no such service {0:?}")]
    NoSuchService(String),
    #[error("dependency {dependency:?} of {service:?} failed to start")]
    DependencyFailed { service: String, dependency: String },
    #[error("no such pid {0}")]
    UnknownPid(Pid),
    #[error("service {0:?} is not start-pending for this process")]
    NameNotPending(String),
    #[error("service name {0:?} is already registered")]
    AlreadyRegistered(String),
    #[error("service name {0:?} is not in the process's service table")]
    NotInTable(String),
    #[error("service {service:?} is {status} and cannot {action}")]
    WrongState {
        service: String,
        status: String,
        action: String,
    },
}

/// The SCM core process state: database, statuses, processes, and the
/// global name-registration table.
#[derive(Debug, Clone, Default)]
pub struct Scm {
    records: BTreeMap<String, ServiceRecord>,
    statuses: BTreeMap<String, ServiceStatus>,
    processes: BTreeMap<Pid, SimProcess>,
    /// Registered service names, keyed case-insensitively.
    registered: BTreeMap<String, (String, Pid)>,
    svchost_groups: BTreeMap<String, Pid>,
    next_pid: Pid,
}

impl Scm {
    pub fn new() -> Self {
        Scm {
            next_pid: 1,
            ..Scm::default()
        }
    }

    /// Step 1: adds a record to the database, immediately visible for start.
    ///
    /// A record flagged as embedding its own name gets the canonical
    /// registration stub as its binary when none is supplied, so the
    /// embedded-name behavior is always backed by actual scannable code.
    pub fn create_service(&mut self, mut record: ServiceRecord) -> Result<(), ScmError> {
        if record.name.is_empty() {
            return Err(ScmError::MalformedRecord("empty service name".into()));
        }
        if self.records.contains_key(&record.name) {
            return Err(ScmError::ServiceExists(record.name));
        }
        if record.image_path.kind() != ResourceKind::File {
            return Err(ScmError::MalformedRecord(format!(
                "image path must be a file resource, got {}",
                record.image_path
            )));
        }
        match record.svc_type {
            ServiceType::DllBased => {
                let Some(group) = &record.group else {
                    return Err(ScmError::MalformedRecord(format!(
                        "DLL-based service {:?} requires an svchost group",
                        record.name
                    )));
                };
                let Some(token) = record.group_token() else {
                    return Err(ScmError::MalformedRecord(format!(
                        "DLL-based service {:?} requires \"-k <group>\" parameters",
                        record.name
                    )));
                };
                if base_name(token) != group {
                    return Err(ScmError::MalformedRecord(format!(
                        "group token {token:?} does not match group {group:?}"
                    )));
                }
            }
            ServiceType::ExeBased => {
                if record.group.is_some() {
                    return Err(ScmError::MalformedRecord(format!(
                        "EXE-based service {:?} must not have an svchost group",
                        record.name
                    )));
                }
            }
        }
        if record.hardcoded_name && record.binary.is_none() {
            record.binary = Some(MockBinary::registration_stub(base_name(&record.name)));
        }
        self.statuses
            .insert(record.name.clone(), ServiceStatus::Created);
        self.records.insert(record.name.clone(), record);
        Ok(())
    }

    pub fn spawn_process(
        &mut self,
        image_path: ResourceName,
        params: String,
        realm: Realm,
        binary: Option<MockBinary>,
    ) -> Pid {
        let pid = self.next_pid;
        self.next_pid += 1;
        self.processes.insert(
            pid,
            SimProcess {
                pid,
                image_path,
                params,
                realm,
                hosted_services: Vec::new(),
                table: Vec::new(),
                binary,
            },
        );
        pid
    }

    /// Step 2 bookkeeping: assigns a created service to a live process and
    /// marks it start-pending.
    pub fn attach_service(&mut self, pid: Pid, name: &str) -> Result<(), ScmError> {
        if !self.processes.contains_key(&pid) {
            return Err(ScmError::UnknownPid(pid));
        }
        if !self.records.contains_key(name) {
            return Err(ScmError::NoSuchService(name.to_string()));
        }
        self.advance(name, ServiceStatus::StartPending, "start")?;
        self.processes
            .get_mut(&pid)
            .unwrap()
            .hosted_services
            .push(name.to_string());
        Ok(())
    }

    /// Step 3: the process declares the services it offers. Every listed
    /// name must be start-pending and assigned to this process. Tables
    /// accumulate, so a later service attaching to the same svchost process
    /// registers on top of the earlier table.
    pub fn register_service_table(&mut self, pid: Pid, names: &[String]) -> Result<(), ScmError> {
        let process = self
            .processes
            .get(&pid)
            .ok_or(ScmError::UnknownPid(pid))?;
        for name in names {
            let assigned = process.hosted_services.iter().any(|s| s == name);
            let pending = self.statuses.get(name) == Some(&ServiceStatus::StartPending);
            if !assigned || !pending {
                return Err(ScmError::NameNotPending(name.clone()));
            }
        }
        for name in names {
            self.advance(name, ServiceStatus::TableRegistered, "register table")?;
        }
        let process = self.processes.get_mut(&pid).unwrap();
        for name in names {
            if !process.table.contains(name) {
                process.table.push(name.clone());
            }
        }
        Ok(())
    }

    /// Step 4: registers a service name, enforcing global uniqueness.
    ///
    /// The claimed name normally equals a table entry. A process whose
    /// service embeds its own (undecorated) name may claim that embedded
    /// name instead; the claim binds to the matching table entry, but the
    /// uniqueness check applies to the claimed name itself. That is what
    /// makes a second renamed instance of such a service collide.
    pub fn register_service_name(&mut self, pid: Pid, claimed: &str) -> Result<(), ScmError> {
        let process = self
            .processes
            .get(&pid)
            .ok_or(ScmError::UnknownPid(pid))?;
        let target = if process.table.iter().any(|t| t == claimed) {
            claimed.to_string()
        } else {
            process
                .table
                .iter()
                .find(|t| {
                    self.records
                        .get(*t)
                        .is_some_and(|r| r.hardcoded_name)
                        && base_name(t).eq_ignore_ascii_case(claimed)
                })
                .cloned()
                .ok_or_else(|| ScmError::NotInTable(claimed.to_string()))?
        };
        let folded = claimed.to_ascii_lowercase();
        if self.registered.contains_key(&folded) {
            return Err(ScmError::AlreadyRegistered(claimed.to_string()));
        }
        self.advance(&target, ServiceStatus::NameRegistered, "register name")?;
        self.registered.insert(folded, (claimed.to_string(), pid));
        Ok(())
    }

    /// Step 5: the service reports it is ready to accept requests.
    pub fn report_ready(&mut self, pid: Pid, name: &str) -> Result<(), ScmError> {
        let process = self
            .processes
            .get(&pid)
            .ok_or(ScmError::UnknownPid(pid))?;
        if !process.hosted_services.iter().any(|s| s == name) {
            return Err(ScmError::WrongState {
                service: name.to_string(),
                status: "not hosted by this process".into(),
                action: "report ready".into(),
            });
        }
        self.advance(name, ServiceStatus::Running, "report ready")
    }

    pub fn stop_service(&mut self, name: &str) -> Result<(), ScmError> {
        self.advance(name, ServiceStatus::Stopped, "stop")
    }

    /// Moves a service to the terminal failed state from any live state.
    pub fn fail_service(&mut self, name: &str, reason: FailureReason) -> Result<(), ScmError> {
        self.advance(name, ServiceStatus::Failed(reason), "fail")
    }

    pub fn query_service_status(&self, name: &str) -> Result<ServiceStatus, ScmError> {
        self.statuses
            .get(name)
            .copied()
            .ok_or_else(|| ScmError::NoSuchService(name.to_string()))
    }

    /// Step 6: resolves a request to the duplicated instance for the
    /// requester's container when one exists, falling through to the shared
    /// host instance otherwise. Returns the resolved instance name and its
    /// response.
    pub fn dispatch_request(
        &self,
        requester: Realm,
        name: &str,
    ) -> Result<(String, String), ScmError> {
        let target = match requester {
            Realm::Container(cid) => match decorate_suffix(name, cid) {
                Ok(dup) if self.records.contains_key(&dup) => dup,
                _ => name.to_string(),
            },
            Realm::Host => name.to_string(),
        };
        if self.query_service_status(&target).ok() != Some(ServiceStatus::Running) {
            return Err(ScmError::NoSuchService(name.to_string()));
        }
        let record = &self.records[&target];
        let response = record.payload.clone().unwrap_or_else(|| target.clone());
        Ok((target, response))
    }

    fn advance(
        &mut self,
        name: &str,
        next: ServiceStatus,
        action: &str,
    ) -> Result<(), ScmError> {
        let current = self
            .statuses
            .get_mut(name)
            .ok_or_else(|| ScmError::NoSuchService(name.to_string()))?;
        let legal = matches!(
            (&current, &next),
            (ServiceStatus::Created, ServiceStatus::StartPending)
                | (ServiceStatus::StartPending, ServiceStatus::TableRegistered)
                | (ServiceStatus::TableRegistered, ServiceStatus::NameRegistered)
                | (ServiceStatus::NameRegistered, ServiceStatus::Running)
                | (ServiceStatus::Running, ServiceStatus::Stopped)
        ) || (matches!(next, ServiceStatus::Failed(_))
            && !matches!(current, ServiceStatus::Failed(_)));
        if !legal {
            return Err(ScmError::WrongState {
                service: name.to_string(),
                status: current.to_string(),
                action: action.to_string(),
            });
        }
        *current = next;
        Ok(())
    }

    pub fn record(&self, name: &str) -> Option<&ServiceRecord> {
        self.records.get(name)
    }

    pub(crate) fn record_mut(&mut self, name: &str) -> Option<&mut ServiceRecord> {
        self.records.get_mut(name)
    }

    pub fn records(&self) -> impl Iterator<Item = &ServiceRecord> {
        self.records.values()
    }

    pub fn service_exists(&self, name: &str) -> bool {
        self.records.contains_key(name)
    }

    pub fn process(&self, pid: Pid) -> Option<&SimProcess> {
        self.processes.get(&pid)
    }

    pub fn processes(&self) -> impl Iterator<Item = &SimProcess> {
        self.processes.values()
    }

    /// The process currently hosting a service, if any.
    pub fn process_hosting(&self, name: &str) -> Option<&SimProcess> {
        self.processes
            .values()
            .find(|p| p.hosted_services.iter().any(|s| s == name))
    }

    /// Owner of a registered service name (case-insensitive lookup).
    pub fn registered_owner(&self, name: &str) -> Option<Pid> {
        self.registered
            .get(&name.to_ascii_lowercase())
            .map(|(_, pid)| *pid)
    }

    pub fn svchost_for_group(&self, group: &str) -> Option<Pid> {
        self.svchost_groups.get(group).copied()
    }

    pub fn bind_svchost_group(&mut self, group: &str, pid: Pid) {
        self.svchost_groups.insert(group.to_string(), pid);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::namespace::ContainerId;

    fn image(path: &str) -> ResourceName {
        ResourceName::file(path).unwrap()
    }

    fn host_realm_process(scm: &mut Scm) -> Pid {
        scm.spawn_process(image("/x/proc.exe"), String::new(), Realm::Host, None)
    }

    #[test]
    fn create_stores_record_visible_for_start() {
        let mut scm = Scm::new();
        scm.create_service(ServiceRecord::dll(
            "RpcSS",
            image("/windows/system32/rpcss.dll"),
            "rpcss",
        ))
        .unwrap();
        assert_eq!(
            scm.query_service_status("RpcSS").unwrap(),
            ServiceStatus::Created
        );
        assert_eq!(scm.record("RpcSS").unwrap().group.as_deref(), Some("rpcss"));
    }

    #[test]
    fn create_rejects_duplicate_name() {
        let mut scm = Scm::new();
        let rec = ServiceRecord::exe("B", image("/c/B.exe"));
        scm.create_service(rec.clone()).unwrap();
        assert_eq!(
            scm.create_service(rec),
            Err(ScmError::ServiceExists("B".into()))
        );
    }

    #[test]
    fn create_rejects_dll_without_group() {
        let mut scm = Scm::new();
        let mut rec = ServiceRecord::dll("X", image("/x.dll"), "g");
        rec.group = None;
        assert!(matches!(
            scm.create_service(rec),
            Err(ScmError::MalformedRecord(_))
        ));
    }

    #[test]
    fn create_rejects_exe_with_group() {
        let mut scm = Scm::new();
        let mut rec = ServiceRecord::exe("X", image("/x.exe"));
        rec.group = Some("g".into());
        assert!(matches!(
            scm.create_service(rec),
            Err(ScmError::MalformedRecord(_))
        ));
    }

    #[test]
    fn hardcoded_record_gets_registration_stub() {
        let mut scm = Scm::new();
        scm.create_service(ServiceRecord::exe("Spooler", image("/spool.exe")).hardcoded())
            .unwrap();
        let bin = scm.record("Spooler").unwrap().binary.as_ref().unwrap();
        assert_eq!(
            crate::binscan::scan_binary(bin, "Spooler").unwrap().len(),
            1
        );
    }

    fn run_protocol(scm: &mut Scm, pid: Pid, name: &str) {
        scm.attach_service(pid, name).unwrap();
        scm.register_service_table(pid, &[name.to_string()]).unwrap();
        scm.register_service_name(pid, name).unwrap();
        scm.report_ready(pid, name).unwrap();
    }

    #[test]
    fn full_protocol_reaches_running() {
        let mut scm = Scm::new();
        scm.create_service(ServiceRecord::exe("B", image("/c/B.exe")))
            .unwrap();
        let pid = host_realm_process(&mut scm);
        run_protocol(&mut scm, pid, "B");
        assert_eq!(
            scm.query_service_status("B").unwrap(),
            ServiceStatus::Running
        );
        assert_eq!(scm.registered_owner("b"), Some(pid));
    }

    #[test]
    fn empty_table_registration_is_a_noop() {
        let mut scm = Scm::new();
        let pid = host_realm_process(&mut scm);
        scm.register_service_table(pid, &[]).unwrap();
    }

    #[test]
    fn table_rejects_name_not_assigned_to_pid() {
        let mut scm = Scm::new();
        scm.create_service(ServiceRecord::exe("A", image("/a.exe")))
            .unwrap();
        let pid1 = host_realm_process(&mut scm);
        let pid2 = host_realm_process(&mut scm);
        scm.attach_service(pid1, "A").unwrap();
        assert_eq!(
            scm.register_service_table(pid2, &["A".to_string()]),
            Err(ScmError::NameNotPending("A".into()))
        );
    }

    #[test]
    fn second_registration_of_same_name_is_denied() {
        let mut scm = Scm::new();
        // Two renamed instances of a service whose binary embeds "RpcSS";
        // both processes claim the embedded name.
        for inst in ["RpcSS-vm1", "RpcSS-vm2"] {
            scm.create_service(
                ServiceRecord::dll(inst, image("/windows/system32/rpcss.dll"), "rpcss").hardcoded(),
            )
            .unwrap();
        }
        let pid1 = host_realm_process(&mut scm);
        scm.attach_service(pid1, "RpcSS-vm1").unwrap();
        scm.register_service_table(pid1, &["RpcSS-vm1".to_string()])
            .unwrap();
        scm.register_service_name(pid1, "RpcSS").unwrap();
        assert_eq!(
            scm.query_service_status("RpcSS-vm1").unwrap(),
            ServiceStatus::NameRegistered
        );

        let pid2 = host_realm_process(&mut scm);
        scm.attach_service(pid2, "RpcSS-vm2").unwrap();
        scm.register_service_table(pid2, &["RpcSS-vm2".to_string()])
            .unwrap();
        assert_eq!(
            scm.register_service_name(pid2, "RpcSS"),
            Err(ScmError::AlreadyRegistered("RpcSS".into()))
        );
    }

    #[test]
    fn registering_a_name_absent_from_the_table_fails() {
        let mut scm = Scm::new();
        scm.create_service(ServiceRecord::exe("A", image("/a.exe")))
            .unwrap();
        let pid = host_realm_process(&mut scm);
        scm.attach_service(pid, "A").unwrap();
        scm.register_service_table(pid, &["A".to_string()]).unwrap();
        assert_eq!(
            scm.register_service_name(pid, "Ghost"),
            Err(ScmError::NotInTable("Ghost".into()))
        );
    }

    #[test]
    fn ready_requires_registration_and_happens_once() {
        let mut scm = Scm::new();
        scm.create_service(ServiceRecord::exe("A", image("/a.exe")))
            .unwrap();
        let pid = host_realm_process(&mut scm);
        scm.attach_service(pid, "A").unwrap();
        scm.register_service_table(pid, &["A".to_string()]).unwrap();
        assert!(matches!(
            scm.report_ready(pid, "A"),
            Err(ScmError::WrongState { .. })
        ));
        scm.register_service_name(pid, "A").unwrap();
        scm.report_ready(pid, "A").unwrap();
        assert!(matches!(
            scm.report_ready(pid, "A"),
            Err(ScmError::WrongState { .. })
        ));
    }

    #[test]
    fn dispatch_prefers_duplicated_instance_and_falls_through() {
        let mut scm = Scm::new();
        scm.create_service(
            ServiceRecord::exe("W3SVC", image("/iis.exe")).with_payload("host-page"),
        )
        .unwrap();
        scm.create_service(
            ServiceRecord::exe("W3SVC-vm1", image("/iis.exe"))
                .manual()
                .with_payload("vm1-page"),
        )
        .unwrap();
        let pid_host = host_realm_process(&mut scm);
        run_protocol(&mut scm, pid_host, "W3SVC");
        let pid_vm1 = scm.spawn_process(
            image("/vm1/iis.exe"),
            String::new(),
            Realm::Container(ContainerId::new(1).unwrap()),
            None,
        );
        run_protocol(&mut scm, pid_vm1, "W3SVC-vm1");

        let vm1 = Realm::Container(ContainerId::new(1).unwrap());
        let vm2 = Realm::Container(ContainerId::new(2).unwrap());
        assert_eq!(
            scm.dispatch_request(vm1, "W3SVC").unwrap().1,
            "vm1-page"
        );
        assert_eq!(
            scm.dispatch_request(Realm::Host, "W3SVC").unwrap().1,
            "host-page"
        );
        // No vm2 duplicate: shared host instance answers.
        assert_eq!(
            scm.dispatch_request(vm2, "W3SVC").unwrap().1,
            "host-page"
        );
    }

    #[test]
    fn dispatch_errors_when_nothing_is_running() {
        let mut scm = Scm::new();
        scm.create_service(ServiceRecord::exe("Idle", image("/i.exe")))
            .unwrap();
        assert_eq!(
            scm.dispatch_request(Realm::Host, "Idle"),
            Err(ScmError::NoSuchService("Idle".into()))
        );
        assert_eq!(
            scm.dispatch_request(Realm::Host, "Ghost"),
            Err(ScmError::NoSuchService("Ghost".into()))
        );
    }

    #[test]
    fn status_parse_display_round_trip() {
        for s in [
            "Created",
            "StartPending",
            "TableRegistered",
            "NameRegistered",
            "Running",
            "Stopped",
            "Failed(AlreadyRegistered)",
            "Failed(HioDenied)",
            "Failed(NotInTable)",
            "Failed(DependencyFailed)",
        ] {
            assert_eq!(s.parse::<ServiceStatus>().unwrap().to_string(), s);
        }
        assert!("Dancing".parse::<ServiceStatus>().is_err());
    }

    #[test]
    fn query_unknown_service_errors() {
        let scm = Scm::new();
        assert_eq!(
            scm.query_service_status("Nope"),
            Err(ScmError::NoSuchService("Nope".into()))
        );
    }

    #[test]
    fn group_token_parsing() {
        assert_eq!(group_token("-k netsvcs"), Some("netsvcs"));
        assert_eq!(group_token("-k netsvcs-vm2"), Some("netsvcs-vm2"));
        assert_eq!(group_token("--quiet -k g extra"), Some("g"));
        assert_eq!(group_token(""), None);
        assert_eq!(group_token("-k"), None);
    }
}

//! fvmsim: a deterministic simulator of OS-level service virtualization.
//!
//! The simulator models a host OS whose services can be duplicated into
//! lightweight containers: each container gets a renamed, copy-on-write view
//! of host resources, duplicated services get independent renamed database
//! entries placed into their container, IPC objects of host core processes
//! stay reachable through an access-controlled gateway, and services whose
//! binaries embed their own name are detected and fixed up by runtime
//! argument rewriting. Every run is driven by explicit operations or a
//! scenario script and emits a deterministic event log.
//!
//! Start with the runnable examples, one per major capability:
//!
//! ```text
//! cargo run --example cow_isolation      namespace renaming + copy-on-write
//! cargo run --example service_lifecycle  the service start-up protocol
//! cargo run --example duplicate_service  duplication, placement, the name fix
//! cargo run --example hio_gateway        host-IPC table, learning, enforcement
//! cargo run --example scan_binary        mock-binary scanning and rewriting
//! cargo run --example run_scenario       scripted scenarios and event logs
//! cargo run --example generate_corpus    scanner test-corpus generation
//! ```
//!
//! The `fvmsim` binary exposes the same machinery as a small CLI
//! (`fvmsim run`, `fvmsim scan`, `fvmsim corpus`).

pub mod binscan;
pub mod corpus;
pub mod duplication;
pub mod event;
pub mod hio;
pub mod namespace;
pub mod scenario;
pub mod scm;
pub mod sim;

pub use duplication::{duplicated_name, placement_decision, DuplicationError, DuplicationPlan};
pub use event::{Event, EventLog};
pub use hio::{AccessList, Decision, HioError, HioTable};
pub use namespace::{
    rename_resource, ContainerId, Container, CowStore, NamespaceError, Realm, ResourceKind,
    ResourceName,
};
pub use scenario::{run_scenario, Scenario, ScenarioError, ScenarioRunner};
pub use scm::{
    FailureReason, Pid, Scm, ScmError, ServiceRecord, ServiceStatus, ServiceType, SimProcess,
    StartType,
};
pub use sim::{SimError, Simulation};

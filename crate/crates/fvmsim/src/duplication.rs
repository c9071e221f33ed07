//! Service duplication: logical duplication of SCM database entries,
//! physical duplication through placement encoding, and the in-kernel
//! monitor's placement decision.
//!
//! Duplicating a service into container X creates an independent record
//! named `<service>-vmX` whose dependencies are rewritten to their own
//! duplicates (created recursively), whose start type is manual, and whose
//! start-up parameters or image path carry the container id so the spawned
//! process lands in the right container. DLL-based services encode placement
//! in the svchost group parameter (`-k <group>-vmX`); EXE-based services get
//! their image byte-copied into the container's private layer and encode
//! placement in the resulting path prefix.

use serde::Serialize;
use thiserror::Error;

use crate::namespace::{
    decorate_suffix, prefix_decoration, rename_resource, suffix_decoration, ContainerId,
    NamespaceError, Realm, ResourceName,
};
use crate::scm::{
    group_token, FailureReason, Scm, ScmError, ServiceStatus, ServiceType, StartType,
};
use crate::sim::{RewriteRule, Simulation};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DuplicationError {
    #[error("no such service {0:?}")]
    NoSuchService(String),
    #[error("service {0:?} is already duplicated for that container")]
    AlreadyDuplicated(String),
    #[error("record {0:?} is not a duplicated record for that container")]
    NotDuplicatedRecord(String),
    #[error("core process {0:?} cannot be duplicated")]
    CoreProcessNotDuplicable(String),
    #[error("placement conflict: params say vm{params}, image path says vm{image}")]
    ConflictingPlacement { params: u32, image: u32 },
    #[error("no such container vm{0}")]
    NoSuchContainer(u32),
    #[error("service {service:?} is {status} and cannot be duplicated")]
    SourceNotDuplicable { service: String, status: String },
    #[error("host image {0} not found in the store")]
    ImageNotFound(String),
    #[error(transparent)]
    Namespace(#[from] NamespaceError),
    #[error(transparent)]
    Scm(#[from] ScmError),
}

/// One node of a duplication: what was copied, where it went, and the
/// recursively duplicated dependencies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DuplicationPlan {
    pub source: String,
    pub target_container: ContainerId,
    pub new_name: String,
    pub new_image_path: ResourceName,
    pub new_params: String,
    pub rewritten_dependencies: Vec<String>,
    pub recursive_children: Vec<DuplicationPlan>,
}

impl DuplicationPlan {
    /// This node and every transitive child, depth-first.
    pub fn nodes(&self) -> Vec<&DuplicationPlan> {
        let mut out = vec![self];
        for child in &self.recursive_children {
            out.extend(child.nodes());
        }
        out
    }
}

/// The duplicated name `<name>-vm<id>`; used for service names and svchost
/// group tokens alike.
pub fn duplicated_name(name: &str, cid: ContainerId) -> Result<String, DuplicationError> {
    Ok(decorate_suffix(name, cid)?)
}

/// Recovers the container a record's placement encoding points at: a
/// `-vm<digits>` suffix on the params group token takes precedence, then a
/// `/vm<digits>/` image-path prefix; undecorated records run in the host.
/// When both are present they must agree.
pub fn placement_decision(image_path: &str, params: &str) -> Result<Realm, DuplicationError> {
    let from_params = group_token(params)
        .and_then(suffix_decoration)
        .map(|(_, cid)| cid);
    let from_image = prefix_decoration(image_path).map(|(_, cid)| cid);
    match (from_params, from_image) {
        (Some(p), Some(i)) if p != i => Err(DuplicationError::ConflictingPlacement {
            params: p.get(),
            image: i.get(),
        }),
        (Some(p), _) => Ok(Realm::Container(p)),
        (None, Some(i)) => Ok(Realm::Container(i)),
        (None, None) => Ok(Realm::Host),
    }
}

/// Copies the SCM database entry for `name` under the duplicated name, with
/// three changes: the name itself, every dependency name (dependencies not
/// yet duplicated are duplicated recursively), and the start type, which
/// becomes manual. All other fields are copied verbatim, except that a
/// configured response payload is decorated so each instance answers
/// distinctly. The new record is immediately visible for start.
pub fn logical_duplicate(
    scm: &mut Scm,
    name: &str,
    cid: ContainerId,
) -> Result<DuplicationPlan, DuplicationError> {
    let source = scm
        .record(name)
        .cloned()
        .ok_or_else(|| DuplicationError::NoSuchService(name.to_string()))?;
    if source.core {
        return Err(DuplicationError::CoreProcessNotDuplicable(name.to_string()));
    }
    let new_name = duplicated_name(name, cid)?;
    if scm.service_exists(&new_name) {
        return Err(DuplicationError::AlreadyDuplicated(new_name));
    }

    let rewritten: Vec<String> = source
        .dependencies
        .iter()
        .map(|dep| duplicated_name(dep, cid))
        .collect::<Result<_, _>>()?;

    let mut copy = source.clone();
    copy.name = new_name.clone();
    copy.dependencies = rewritten.clone();
    copy.start_type = StartType::Manual;
    copy.payload = source
        .payload
        .as_ref()
        .map(|p| format!("{p}-vm{}", cid.get()));
    scm.create_service(copy)?;

    let mut children = Vec::new();
    for dep in &source.dependencies {
        let dep_dup = duplicated_name(dep, cid)?;
        if !scm.service_exists(&dep_dup) {
            children.push(logical_duplicate(scm, dep, cid)?);
        }
    }

    Ok(DuplicationPlan {
        source: name.to_string(),
        target_container: cid,
        new_name,
        new_image_path: source.image_path,
        new_params: source.params,
        rewritten_dependencies: rewritten,
        recursive_children: children,
    })
}

/// Encodes the placement of a duplicated record. DLL-based records get the
/// container id appended to their svchost group token; EXE-based records
/// have their image byte-copied from the host layer into the container's
/// private layer and the image path switched to the renamed copy. Returns
/// the record's resulting `(image_path, params)`.
pub fn encode_placement(
    sim: &mut Simulation,
    name: &str,
    cid: ContainerId,
) -> Result<(ResourceName, String), DuplicationError> {
    let record = sim
        .scm
        .record(name)
        .cloned()
        .ok_or_else(|| DuplicationError::NoSuchService(name.to_string()))?;
    match suffix_decoration(&record.name) {
        Some((_, owner)) if owner == cid => {}
        _ => return Err(DuplicationError::NotDuplicatedRecord(name.to_string())),
    }

    let (image_path, params) = match record.svc_type {
        ServiceType::DllBased => {
            let token = record
                .group_token()
                .expect("DLL record validated at creation")
                .to_string();
            let encoded = decorate_suffix(&token, cid)?;
            let params: Vec<String> = record
                .params
                .split_whitespace()
                .map(|t| {
                    if t == token {
                        encoded.clone()
                    } else {
                        t.to_string()
                    }
                })
                .collect();
            (record.image_path.clone(), params.join(" "))
        }
        ServiceType::ExeBased => {
            let bytes = sim
                .store
                .read(Realm::Host, &record.image_path)?
                .ok_or_else(|| DuplicationError::ImageNotFound(record.image_path.to_string()))?;
            let renamed = rename_resource(cid, &record.image_path)?;
            sim.store.write(cid, renamed.clone(), bytes)?;
            (renamed, record.params.clone())
        }
    };

    let rec = sim.scm.record_mut(name).expect("record exists");
    rec.image_path = image_path.clone();
    rec.params = params.clone();
    Ok((image_path, params))
}

/// Duplicates a service into a container: logical duplication, placement
/// encoding for every plan node, gateway interception for the new
/// instances, and, for records that embed their own name, runtime argument
/// rewriting from the original to the duplicated name. The duplicated
/// service is then startable and lands in the target container.
pub fn duplicate_service(
    sim: &mut Simulation,
    name: &str,
    cid: ContainerId,
    arm_rewrite: bool,
) -> Result<DuplicationPlan, DuplicationError> {
    if !sim.store.container_exists(cid) {
        return Err(DuplicationError::NoSuchContainer(cid.get()));
    }
    match sim.scm.query_service_status(name) {
        Ok(ServiceStatus::Created) | Ok(ServiceStatus::Running) => {}
        Ok(status) => {
            return Err(DuplicationError::SourceNotDuplicable {
                service: name.to_string(),
                status: status.to_string(),
            })
        }
        Err(_) => return Err(DuplicationError::NoSuchService(name.to_string())),
    }

    let mut plan = logical_duplicate(&mut sim.scm, name, cid)?;
    encode_plan(sim, &mut plan, cid)?;

    for node in plan.nodes() {
        sim.hio_armed.insert(node.new_name.clone());
        sim.log.ok(
            "engine",
            "hio_interception_armed",
            serde_json::json!({ "service": node.new_name }),
        );
    }

    let hardcoded_nodes: Vec<(String, String)> = plan
        .nodes()
        .iter()
        .filter(|n| {
            sim.scm
                .record(&n.new_name)
                .is_some_and(|r| r.hardcoded_name)
        })
        .map(|n| (n.new_name.clone(), n.source.clone()))
        .collect();
    for (new_name, source) in hardcoded_nodes {
        if arm_rewrite {
            sim.log.ok(
                "engine",
                "rewrite_armed",
                serde_json::json!({ "service": new_name, "original": source }),
            );
            sim.armed_rewrites.insert(
                new_name.clone(),
                RewriteRule {
                    original: source,
                    duplicated: new_name,
                },
            );
        } else {
            sim.log.ok(
                "engine",
                "rewrite_skipped",
                serde_json::json!({ "service": new_name }),
            );
        }
    }

    sim.log.ok(
        "engine",
        "service_duplicated",
        serde_json::json!({
            "source": plan.source,
            "container": plan.target_container.to_string(),
            "plan": serde_json::to_value(&plan).expect("plan serializes"),
        }),
    );
    Ok(plan)
}

fn encode_plan(
    sim: &mut Simulation,
    plan: &mut DuplicationPlan,
    cid: ContainerId,
) -> Result<(), DuplicationError> {
    let (image, params) = encode_placement(sim, &plan.new_name.clone(), cid)?;
    sim.log.ok(
        "engine",
        "placement_encoded",
        serde_json::json!({
            "service": plan.new_name,
            "image": image.name(),
            "params": params,
        }),
    );
    plan.new_image_path = image;
    plan.new_params = params;
    for child in &mut plan.recursive_children {
        encode_plan(sim, child, cid)?;
    }
    Ok(())
}

/// Maps a protocol failure during start-up to the terminal failure reason
/// recorded on the service.
pub fn failure_reason_for(err: &ScmError) -> Option<FailureReason> {
    match err {
        ScmError::AlreadyRegistered(_) => Some(FailureReason::AlreadyRegistered),
        ScmError::NotInTable(_) => Some(FailureReason::NotInTable),
        _ => None,
    }
}

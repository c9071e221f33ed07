//! Per-container namespace renaming and the copy-on-write resource store.
//!
//! Every container sees host resources under transformed names: path-like
//! resources (files, registry keys) gain a `/vm<id>` prefix, everything else
//! (IPC objects, service names) gains a `-vm<id>` suffix. State changes made
//! by a container land in a private layer on top of the shared host layer,
//! which container operations never mutate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::num::NonZeroU32;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

/// Identity of a container (an OS-level virtual machine).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ContainerId(NonZeroU32);

impl ContainerId {
    pub fn new(id: u32) -> Result<Self, NamespaceError> {
        NonZeroU32::new(id)
            .map(ContainerId)
            .ok_or(NamespaceError::InvalidContainerId)
    }

    pub fn get(self) -> u32 {
        self.0.get()
    }
}

impl fmt::Display for ContainerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vm{}", self.0)
    }
}

/// Where a process or request originates: the shared host or a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Realm {
    Host,
    Container(ContainerId),
}

impl Realm {
    pub fn container_id(self) -> Option<ContainerId> {
        match self {
            Realm::Host => None,
            Realm::Container(cid) => Some(cid),
        }
    }
}

impl fmt::Display for Realm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Realm::Host => write!(f, "HOST"),
            Realm::Container(cid) => write!(f, "{cid}"),
        }
    }
}

impl FromStr for Realm {
    type Err = NamespaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("host") {
            return Ok(Realm::Host);
        }
        let id: u32 = s
            .parse()
            .map_err(|_| NamespaceError::MalformedName(format!("not a realm: {s:?}")))?;
        Ok(Realm::Container(ContainerId::new(id)?))
    }
}

/// Resource namespaces the simulator distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ResourceKind {
    File,
    RegistryKey,
    Port,
    NamedPipe,
    Mutex,
    Section,
    Event,
}

impl ResourceKind {
    /// IPC object kinds are renamed by suffix and are subject to the
    /// host-IPC gateway; files and registry keys are renamed by path prefix.
    pub fn is_ipc(self) -> bool {
        !matches!(self, ResourceKind::File | ResourceKind::RegistryKey)
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResourceKind::File => "File",
            ResourceKind::RegistryKey => "RegistryKey",
            ResourceKind::Port => "Port",
            ResourceKind::NamedPipe => "NamedPipe",
            ResourceKind::Mutex => "Mutex",
            ResourceKind::Section => "Section",
            ResourceKind::Event => "Event",
        };
        f.write_str(s)
    }
}

/// A named resource in one of the simulated namespaces.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ResourceName {
    kind: ResourceKind,
    name: String,
}

impl ResourceName {
    /// Path-like kinds must be absolute, `/`-separated paths; every kind
    /// requires a non-empty name.
    pub fn new(kind: ResourceKind, name: impl Into<String>) -> Result<Self, NamespaceError> {
        let name = name.into();
        if name.is_empty() {
            return Err(NamespaceError::MalformedName("empty resource name".into()));
        }
        if matches!(kind, ResourceKind::File | ResourceKind::RegistryKey) && !name.starts_with('/')
        {
            return Err(NamespaceError::MalformedName(format!(
                "{kind} name must start with '/': {name:?}"
            )));
        }
        Ok(ResourceName { kind, name })
    }

    pub fn file(path: impl Into<String>) -> Result<Self, NamespaceError> {
        Self::new(ResourceKind::File, path)
    }

    pub fn kind(&self) -> ResourceKind {
        self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// True if the name carries a container decoration in either form.
    pub fn is_decorated(&self) -> bool {
        is_decorated(&self.name)
    }
}

impl fmt::Display for ResourceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.name)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NamespaceError {
    #[error("container id must be a positive integer")]
    InvalidContainerId,
    #[error("container vm{0} already exists")]
    DuplicateContainerId(u32),
    #[error("no such container vm{0}")]
    NoSuchContainer(u32),
    #[error("name already carries a container decoration: {0:?}")]
    AlreadyDecorated(String),
    #[error("malformed resource name: {0}")]
    MalformedName(String),
}

// ---------------------------------------------------------------------------
// Decoration: the reserved "-vm<digits>" suffix and "/vm<digits>/" prefix.
// ---------------------------------------------------------------------------

/// Splits `<base>-vm<digits>` into its parts, if the name ends that way.
pub fn suffix_decoration(name: &str) -> Option<(&str, ContainerId)> {
    let at = name.rfind("-vm")?;
    let digits = &name[at + 3..];
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let id: u32 = digits.parse().ok()?;
    Some((&name[..at], ContainerId::new(id).ok()?))
}

/// Splits `/vm<digits>/<rest>` into its parts, if the path starts that way.
pub fn prefix_decoration(path: &str) -> Option<(&str, ContainerId)> {
    let rest = path.strip_prefix("/vm")?;
    let digits_len = rest.bytes().take_while(|b| b.is_ascii_digit()).count();
    if digits_len == 0 || !rest[digits_len..].starts_with('/') {
        return None;
    }
    let id: u32 = rest[..digits_len].parse().ok()?;
    Some((&rest[digits_len..], ContainerId::new(id).ok()?))
}

/// The container a decorated name belongs to, in either decoration form.
pub fn decoration_of(name: &str) -> Option<ContainerId> {
    prefix_decoration(name)
        .or_else(|| suffix_decoration(name))
        .map(|(_, cid)| cid)
}

pub fn is_decorated(name: &str) -> bool {
    decoration_of(name).is_some()
}

/// Strips a suffix decoration, returning the base name unchanged when none
/// is present.
pub fn base_name(name: &str) -> &str {
    suffix_decoration(name).map_or(name, |(base, _)| base)
}

/// Applies the suffix rule `<name>-vm<id>` used for IPC objects and service
/// names.
pub fn decorate_suffix(name: &str, cid: ContainerId) -> Result<String, NamespaceError> {
    ensure_undecorated(name)?;
    Ok(format!("{name}-vm{}", cid.get()))
}

/// Applies the prefix rule `/vm<id><path>` used for path-like resources.
pub fn decorate_prefix(path: &str, cid: ContainerId) -> Result<String, NamespaceError> {
    ensure_undecorated(path)?;
    Ok(format!("/vm{}{path}", cid.get()))
}

pub fn ensure_undecorated(name: &str) -> Result<(), NamespaceError> {
    if is_decorated(name) {
        return Err(NamespaceError::AlreadyDecorated(name.to_string()));
    }
    Ok(())
}

/// Returns the container-scoped name for an undecorated resource.
///
/// Deterministic and injective per container: distinct undecorated names map
/// to distinct renamed names, and no two containers ever share a renamed name.
pub fn rename_resource(cid: ContainerId, r: &ResourceName) -> Result<ResourceName, NamespaceError> {
    let renamed = match r.kind {
        ResourceKind::File | ResourceKind::RegistryKey => decorate_prefix(&r.name, cid)?,
        _ => decorate_suffix(&r.name, cid)?,
    };
    ResourceName::new(r.kind, renamed)
}

// ---------------------------------------------------------------------------
// Copy-on-write store
// ---------------------------------------------------------------------------

/// A container's private state: values it has written and host names it has
/// masked by deletion. The two sets are disjoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Container {
    id: u32,
    private: BTreeMap<ResourceName, Vec<u8>>,
    deleted: BTreeSet<ResourceName>,
}

impl Container {
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn private_layer(&self) -> &BTreeMap<ResourceName, Vec<u8>> {
        &self.private
    }

    pub fn deleted_set(&self) -> &BTreeSet<ResourceName> {
        &self.deleted
    }

    pub fn is_empty(&self) -> bool {
        self.private.is_empty() && self.deleted.is_empty()
    }
}

/// Shared host layer plus one private copy-on-write layer per container.
///
/// Container reads fall through to the live host value until the container
/// writes (forks) or deletes (masks) the name. Container operations never
/// touch the host layer.
#[derive(Debug, Clone, Default)]
pub struct CowStore {
    host: BTreeMap<ResourceName, Vec<u8>>,
    containers: BTreeMap<ContainerId, Container>,
}

impl CowStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_container(&mut self, cid: ContainerId) -> Result<&Container, NamespaceError> {
        if self.containers.contains_key(&cid) {
            return Err(NamespaceError::DuplicateContainerId(cid.get()));
        }
        self.containers.insert(
            cid,
            Container {
                id: cid.get(),
                ..Container::default()
            },
        );
        Ok(&self.containers[&cid])
    }

    pub fn container(&self, cid: ContainerId) -> Option<&Container> {
        self.containers.get(&cid)
    }

    pub fn container_exists(&self, cid: ContainerId) -> bool {
        self.containers.contains_key(&cid)
    }

    pub fn container_ids(&self) -> impl Iterator<Item = ContainerId> + '_ {
        self.containers.keys().copied()
    }

    /// Seeds or updates a host resource. Decorated names are rejected so that
    /// no host name can collide with a renamed container name.
    pub fn write_host(&mut self, r: ResourceName, value: Vec<u8>) -> Result<(), NamespaceError> {
        ensure_undecorated(r.name())?;
        self.host.insert(r, value);
        Ok(())
    }

    pub fn host_layer(&self) -> &BTreeMap<ResourceName, Vec<u8>> {
        &self.host
    }

    /// Reads a value as seen from `realm`. Returns `None` for an absent
    /// resource; absence is a value, not an error.
    pub fn read(
        &self,
        realm: Realm,
        r: &ResourceName,
    ) -> Result<Option<Vec<u8>>, NamespaceError> {
        match realm {
            Realm::Host => Ok(self.host.get(r).cloned()),
            Realm::Container(cid) => {
                let layer = self
                    .containers
                    .get(&cid)
                    .ok_or(NamespaceError::NoSuchContainer(cid.get()))?;
                if let Some(v) = layer.private.get(r) {
                    return Ok(Some(v.clone()));
                }
                if layer.deleted.contains(r) {
                    return Ok(None);
                }
                Ok(self.host.get(r).cloned())
            }
        }
    }

    /// Writes into the container's private layer, forking the name away from
    /// the host and clearing any deletion mask.
    pub fn write(
        &mut self,
        cid: ContainerId,
        r: ResourceName,
        value: Vec<u8>,
    ) -> Result<(), NamespaceError> {
        let layer = self
            .containers
            .get_mut(&cid)
            .ok_or(NamespaceError::NoSuchContainer(cid.get()))?;
        layer.deleted.remove(&r);
        layer.private.insert(r, value);
        Ok(())
    }

    /// Masks a name for the container. The host value, if any, is untouched.
    pub fn delete(&mut self, cid: ContainerId, r: &ResourceName) -> Result<(), NamespaceError> {
        let layer = self
            .containers
            .get_mut(&cid)
            .ok_or(NamespaceError::NoSuchContainer(cid.get()))?;
        layer.private.remove(r);
        layer.deleted.insert(r.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cid(n: u32) -> ContainerId {
        ContainerId::new(n).unwrap()
    }

    fn file(p: &str) -> ResourceName {
        ResourceName::file(p).unwrap()
    }

    fn mutex(n: &str) -> ResourceName {
        ResourceName::new(ResourceKind::Mutex, n).unwrap()
    }

    #[test]
    fn create_container_starts_empty() {
        let mut store = CowStore::new();
        let c = store.create_container(cid(1)).unwrap();
        assert_eq!(c.id(), 1);
        assert!(c.is_empty());
    }

    #[test]
    fn create_container_rejects_duplicate_id() {
        let mut store = CowStore::new();
        store.create_container(cid(1)).unwrap();
        assert_eq!(
            store.create_container(cid(1)),
            Err(NamespaceError::DuplicateContainerId(1))
        );
    }

    #[test]
    fn container_id_must_be_positive() {
        assert_eq!(
            ContainerId::new(0),
            Err(NamespaceError::InvalidContainerId)
        );
    }

    #[test]
    fn three_containers_have_disjoint_namespaces() {
        let mut store = CowStore::new();
        for n in 1..=3 {
            store.create_container(cid(n)).unwrap();
        }
        let r = file("/a/b");
        let renamed: Vec<_> = (1..=3)
            .map(|n| rename_resource(cid(n), &r).unwrap())
            .collect();
        assert_eq!(renamed[0].name(), "/vm1/a/b");
        assert_eq!(renamed[1].name(), "/vm2/a/b");
        assert_eq!(renamed[2].name(), "/vm3/a/b");
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_ne!(renamed[i], renamed[j]);
                }
            }
        }
    }

    #[test]
    fn rename_prefixes_paths_and_suffixes_ipc_names() {
        assert_eq!(
            rename_resource(cid(1), &file("/a/b")).unwrap().name(),
            "/vm1/a/b"
        );
        assert_eq!(
            rename_resource(cid(2), &mutex("MyAppMutex")).unwrap().name(),
            "MyAppMutex-vm2"
        );
    }

    #[test]
    fn rename_rejects_decorated_input() {
        assert_eq!(
            rename_resource(cid(1), &file("/vm2/a/b")),
            Err(NamespaceError::AlreadyDecorated("/vm2/a/b".into()))
        );
        assert_eq!(
            rename_resource(cid(1), &mutex("MyAppMutex-vm2")),
            Err(NamespaceError::AlreadyDecorated("MyAppMutex-vm2".into()))
        );
    }

    #[test]
    fn decoration_detection_requires_digits() {
        assert!(suffix_decoration("a-vm12").is_some());
        assert!(suffix_decoration("a-vm").is_none());
        assert!(suffix_decoration("a-vm2x").is_none());
        assert!(prefix_decoration("/vm3/a").is_some());
        assert!(prefix_decoration("/vm/a").is_none());
        assert!(prefix_decoration("/vm3x/a").is_none());
        assert!(prefix_decoration("/vm3").is_none());
        assert_eq!(base_name("RpcSS-vm7"), "RpcSS");
        assert_eq!(base_name("RpcSS"), "RpcSS");
    }

    #[test]
    fn read_falls_through_to_host_until_fork() {
        let mut store = CowStore::new();
        store.create_container(cid(1)).unwrap();
        store.write_host(file("/a/b"), b"h".to_vec()).unwrap();
        assert_eq!(
            store.read(Realm::Container(cid(1)), &file("/a/b")).unwrap(),
            Some(b"h".to_vec())
        );

        store.write(cid(1), file("/a/b"), b"x".to_vec()).unwrap();
        assert_eq!(
            store.read(Realm::Container(cid(1)), &file("/a/b")).unwrap(),
            Some(b"x".to_vec())
        );
        assert_eq!(
            store.read(Realm::Host, &file("/a/b")).unwrap(),
            Some(b"h".to_vec())
        );
    }

    #[test]
    fn delete_masks_host_value() {
        let mut store = CowStore::new();
        store.create_container(cid(1)).unwrap();
        store.write_host(file("/a/b"), b"h".to_vec()).unwrap();
        store.delete(cid(1), &file("/a/b")).unwrap();
        assert_eq!(
            store.read(Realm::Container(cid(1)), &file("/a/b")).unwrap(),
            None
        );
        assert_eq!(
            store.read(Realm::Host, &file("/a/b")).unwrap(),
            Some(b"h".to_vec())
        );
    }

    #[test]
    fn write_then_read_back() {
        let mut store = CowStore::new();
        store.create_container(cid(1)).unwrap();
        store.write(cid(1), mutex("M"), b"v".to_vec()).unwrap();
        assert_eq!(
            store.read(Realm::Container(cid(1)), &mutex("M")).unwrap(),
            Some(b"v".to_vec())
        );
    }

    #[test]
    fn containers_fork_independently() {
        let mut store = CowStore::new();
        store.create_container(cid(1)).unwrap();
        store.create_container(cid(2)).unwrap();
        store.write_host(file("/a/b"), b"h".to_vec()).unwrap();
        store.write(cid(1), file("/a/b"), b"one".to_vec()).unwrap();
        store.write(cid(2), file("/a/b"), b"two".to_vec()).unwrap();
        assert_eq!(
            store.read(Realm::Container(cid(1)), &file("/a/b")).unwrap(),
            Some(b"one".to_vec())
        );
        assert_eq!(
            store.read(Realm::Container(cid(2)), &file("/a/b")).unwrap(),
            Some(b"two".to_vec())
        );
        assert_eq!(
            store.read(Realm::Host, &file("/a/b")).unwrap(),
            Some(b"h".to_vec())
        );
    }

    #[test]
    fn host_writes_invisible_after_fork_visible_before() {
        let mut store = CowStore::new();
        store.create_container(cid(1)).unwrap();
        store.write_host(file("/a/b"), b"h1".to_vec()).unwrap();

        // Shared until forked: a later host write shows through.
        store.write_host(file("/a/b"), b"h2".to_vec()).unwrap();
        assert_eq!(
            store.read(Realm::Container(cid(1)), &file("/a/b")).unwrap(),
            Some(b"h2".to_vec())
        );

        store.write(cid(1), file("/a/b"), b"mine".to_vec()).unwrap();
        store.write_host(file("/a/b"), b"h3".to_vec()).unwrap();
        assert_eq!(
            store.read(Realm::Container(cid(1)), &file("/a/b")).unwrap(),
            Some(b"mine".to_vec())
        );
    }

    #[test]
    fn host_layer_rejects_decorated_names() {
        let mut store = CowStore::new();
        assert!(matches!(
            store.write_host(file("/vm1/a"), b"x".to_vec()),
            Err(NamespaceError::AlreadyDecorated(_))
        ));
        assert!(matches!(
            store.write_host(mutex("M-vm2"), b"x".to_vec()),
            Err(NamespaceError::AlreadyDecorated(_))
        ));
    }

    /// Reference model: each container is an eagerly materialized full copy
    /// of the host map, mutated in place. Equivalent to the copy-on-write
    /// store as long as the host layer is not written after container
    /// creation, which holds for every sequence enumerated here.
    #[derive(Clone)]
    struct ReferenceStore {
        host: BTreeMap<ResourceName, Vec<u8>>,
        views: BTreeMap<ContainerId, BTreeMap<ResourceName, Vec<u8>>>,
    }

    impl ReferenceStore {
        fn new(host: BTreeMap<ResourceName, Vec<u8>>, cids: &[ContainerId]) -> Self {
            let views = cids.iter().map(|c| (*c, host.clone())).collect();
            ReferenceStore { host, views }
        }

        fn write(&mut self, cid: ContainerId, r: &ResourceName, v: &[u8]) {
            self.views.get_mut(&cid).unwrap().insert(r.clone(), v.to_vec());
        }

        fn delete(&mut self, cid: ContainerId, r: &ResourceName) {
            self.views.get_mut(&cid).unwrap().remove(r);
        }

        fn read(&self, realm: Realm, r: &ResourceName) -> Option<Vec<u8>> {
            match realm {
                Realm::Host => self.host.get(r).cloned(),
                Realm::Container(c) => self.views[&c].get(r).cloned(),
            }
        }
    }

    #[derive(Clone, Copy, Debug)]
    enum Op {
        Write(u32, usize, u8),
        Delete(u32, usize),
    }

    /// Exhaustive check of all operation sequences of length <= 3 over a
    /// 2-container, 3-name store against the reference model.
    #[test]
    fn cow_agrees_with_reference_on_all_short_sequences() {
        let names = [file("/a"), file("/b"), mutex("M")];
        let cids = [cid(1), cid(2)];

        let mut alphabet = Vec::new();
        for c in [1u32, 2] {
            for n in 0..names.len() {
                alphabet.push(Op::Write(c, n, b'0' + c as u8));
                alphabet.push(Op::Delete(c, n));
            }
        }

        let mut sequences: Vec<Vec<Op>> = vec![vec![]];
        for len in 1..=3 {
            let mut level: Vec<Vec<Op>> = Vec::new();
            for seq in sequences.iter().filter(|s| s.len() == len - 1) {
                for op in &alphabet {
                    let mut next = seq.clone();
                    next.push(*op);
                    level.push(next);
                }
            }
            sequences.extend(level);
        }

        let mut host = BTreeMap::new();
        host.insert(names[0].clone(), b"h0".to_vec());
        host.insert(names[1].clone(), b"h1".to_vec());
        // names[2] is absent from the host: exercises private-only resources.

        for seq in &sequences {
            let mut store = CowStore::new();
            for (k, v) in &host {
                store.write_host(k.clone(), v.clone()).unwrap();
            }
            for c in cids {
                store.create_container(c).unwrap();
            }
            let mut reference = ReferenceStore::new(host.clone(), &cids);

            for op in seq {
                match *op {
                    Op::Write(c, n, v) => {
                        store.write(cid(c), names[n].clone(), vec![v]).unwrap();
                        reference.write(cid(c), &names[n], &[v]);
                    }
                    Op::Delete(c, n) => {
                        store.delete(cid(c), &names[n]).unwrap();
                        reference.delete(cid(c), &names[n]);
                    }
                }
            }

            for realm in [Realm::Host, Realm::Container(cid(1)), Realm::Container(cid(2))] {
                for name in &names {
                    assert_eq!(
                        store.read(realm, name).unwrap(),
                        reference.read(realm, name),
                        "divergence at {realm} {name} after {seq:?}"
                    );
                }
            }
            assert_eq!(store.host_layer(), &host, "host mutated by {seq:?}");
        }
    }
}

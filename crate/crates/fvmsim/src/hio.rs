//! Host-IPC-object gateway: the table of IPC names owned by host core
//! processes, per-object access-control lists, and the flag that switches
//! the table between learning and enforcement.
//!
//! Container IPC accesses consult [`HioTable::renaming_decision`]: names in
//! the table keep their original host spelling (so duplicated services can
//! still reach host core processes), everything else is renamed into the
//! container's namespace. In learning mode each access records the service
//! name in the object's access list; once frozen, unlisted services are
//! denied.
//!
//! Seed file format, one entry per line, `#` starts a comment:
//!
//! ```text
//! <kind><TAB><name-pattern>
//! ```
//!
//! with kind one of `port`, `pipe`, `mutex`, `section`, `event`. A pattern
//! is either a literal name or a literal prefix ending in `*`, which matches
//! the prefix followed by one or more decimal digits.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use thiserror::Error;

use crate::namespace::{rename_resource, ContainerId, ResourceKind, ResourceName};

/// Outcome of a container's IPC access request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    /// The object is a host IPC object; access it under its original name.
    UseOriginal,
    /// Not a host IPC object; access the container-renamed object.
    UseRenamed(ResourceName),
    /// Enforcement mode and the requesting service is not on the list.
    Denied,
}

impl Decision {
    pub fn label(&self) -> &'static str {
        match self {
            Decision::UseOriginal => "use-original",
            Decision::UseRenamed(_) => "use-renamed",
            Decision::Denied => "denied",
        }
    }
}

/// Services allowed to reach one host IPC object. Grows monotonically while
/// the table is learning and is immutable once frozen.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessList {
    allowed: BTreeSet<String>,
}

impl AccessList {
    pub fn contains(&self, svc: &str) -> bool {
        self.allowed.contains(svc)
    }

    pub fn services(&self) -> impl Iterator<Item = &str> {
        self.allowed.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    kind: ResourceKind,
    acl: AccessList,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HioError {
    #[error("line {line}: malformed pattern {pattern:?}: {reason}")]
    MalformedPattern {
        line: usize,
        pattern: String,
        reason: String,
    },
    #[error("line {line}: malformed seed entry: {reason}")]
    MalformedSeedLine { line: usize, reason: String },
    #[error("line {line}: duplicate pattern {pattern:?}")]
    DuplicatePattern { line: usize, pattern: String },
}

/// Hash-addressed set of host IPC object name patterns with per-object
/// access lists and the global learning/enforcement flag.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HioTable {
    entries: BTreeMap<String, Entry>,
    frozen: bool,
    insertions: u64,
}

impl HioTable {
    /// An empty table in learning mode; every IPC name gets renamed.
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a table from seed entries of `(kind, name-pattern)`.
    pub fn load(seed: &[(ResourceKind, String)]) -> Result<Self, HioError> {
        let mut table = HioTable::new();
        for (lineno, (kind, pattern)) in seed.iter().enumerate() {
            table.insert_pattern(lineno + 1, *kind, pattern)?;
        }
        Ok(table)
    }

    /// Parses the seed file format described in the module docs.
    pub fn load_seed_text(text: &str) -> Result<Self, HioError> {
        let mut table = HioTable::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let stmt = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            };
            if stmt.trim().is_empty() {
                continue;
            }
            let (kind_str, pattern) =
                stmt.split_once('\t')
                    .ok_or_else(|| HioError::MalformedSeedLine {
                        line,
                        reason: "expected <kind><TAB><name-pattern>".into(),
                    })?;
            let kind = match kind_str.trim() {
                "port" => ResourceKind::Port,
                "pipe" => ResourceKind::NamedPipe,
                "mutex" => ResourceKind::Mutex,
                "section" => ResourceKind::Section,
                "event" => ResourceKind::Event,
                other => {
                    return Err(HioError::MalformedSeedLine {
                        line,
                        reason: format!("unknown IPC kind {other:?}"),
                    })
                }
            };
            table.insert_pattern(line, kind, pattern.trim_end())?;
        }
        Ok(table)
    }

    fn insert_pattern(
        &mut self,
        line: usize,
        kind: ResourceKind,
        pattern: &str,
    ) -> Result<(), HioError> {
        validate_pattern(pattern).map_err(|reason| HioError::MalformedPattern {
            line,
            pattern: pattern.to_string(),
            reason,
        })?;
        if self.entries.contains_key(pattern) {
            return Err(HioError::DuplicatePattern {
                line,
                pattern: pattern.to_string(),
            });
        }
        self.entries.insert(
            pattern.to_string(),
            Entry {
                kind,
                acl: AccessList::default(),
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Total number of access-list insertions performed so far. Replaying a
    /// workload the table has already learned leaves this unchanged.
    pub fn insertion_count(&self) -> u64 {
        self.insertions
    }

    pub fn patterns(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn access_list(&self, pattern: &str) -> Option<&AccessList> {
        self.entries.get(pattern).map(|e| &e.acl)
    }

    /// Switches between learning (`false`) and enforcement (`true`).
    /// Idempotent in both directions.
    pub fn set_hio_flag(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// True iff the name equals a literal entry or, for a starred entry
    /// `P*`, equals `P` followed by one or more decimal digits.
    pub fn match_hio(&self, name: &str) -> bool {
        self.matching_pattern(name).is_some()
    }

    /// The entry a name resolves to: a literal match wins over starred
    /// matches; among starred matches the longest prefix wins.
    fn matching_pattern(&self, name: &str) -> Option<&str> {
        if self.entries.contains_key(name) && !name.ends_with('*') {
            return Some(self.entries.get_key_value(name).unwrap().0);
        }
        self.entries
            .keys()
            .filter(|p| pattern_matches_starred(p, name))
            .max_by_key(|p| p.len())
            .map(String::as_str)
    }

    /// Resolves one IPC access by the duplicated service `svc` (undecorated
    /// name) running in container `cid`.
    pub fn renaming_decision(
        &mut self,
        cid: ContainerId,
        svc: &str,
        r: &ResourceName,
    ) -> Decision {
        debug_assert!(r.kind().is_ipc(), "gateway consulted for non-IPC resource");
        let Some(pattern) = self.matching_pattern(r.name()).map(str::to_string) else {
            return match rename_resource(cid, r) {
                Ok(renamed) => Decision::UseRenamed(renamed),
                // Already container-scoped names pass through unchanged.
                Err(_) => Decision::UseRenamed(r.clone()),
            };
        };
        if self.frozen {
            let entry = &self.entries[&pattern];
            if entry.acl.contains(svc) {
                Decision::UseOriginal
            } else {
                Decision::Denied
            }
        } else {
            let entry = self.entries.get_mut(&pattern).expect("pattern resolved");
            if entry.acl.allowed.insert(svc.to_string()) {
                self.insertions += 1;
            }
            Decision::UseOriginal
        }
    }

    /// Canonical serialization: entries sorted lexicographically, one
    /// `pattern<TAB>allowed1,allowed2,...` line each.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (pattern, entry) in &self.entries {
            let allowed: Vec<&str> = entry.acl.services().collect();
            out.push_str(pattern);
            out.push('\t');
            out.push_str(&allowed.join(","));
            out.push('\n');
        }
        out
    }

    /// Run-stable hash of the serialized table, for immutability checks.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        self.serialize().hash(&mut hasher);
        self.frozen.hash(&mut hasher);
        hasher.finish()
    }
}

fn validate_pattern(pattern: &str) -> Result<(), String> {
    if pattern.is_empty() {
        return Err("empty pattern".into());
    }
    match pattern.find('*') {
        None => Ok(()),
        Some(at) if at == pattern.len() - 1 && at > 0 => Ok(()),
        Some(_) => Err("'*' is only allowed as a trailing wildcard".into()),
    }
}

fn pattern_matches_starred(pattern: &str, name: &str) -> bool {
    let Some(prefix) = pattern.strip_suffix('*') else {
        return false;
    };
    match name.strip_prefix(prefix) {
        Some(rest) => !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()),
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cid(n: u32) -> ContainerId {
        ContainerId::new(n).unwrap()
    }

    fn pipe(name: &str) -> ResourceName {
        ResourceName::new(ResourceKind::NamedPipe, name).unwrap()
    }

    fn mutex(name: &str) -> ResourceName {
        ResourceName::new(ResourceKind::Mutex, name).unwrap()
    }

    const CONTROL_PIPE: &str = r"\Device\NamedPipe\net\NtControlPipe*";

    fn small_table() -> HioTable {
        HioTable::load(&[
            (ResourceKind::NamedPipe, CONTROL_PIPE.to_string()),
            (
                ResourceKind::Event,
                r"\BaseNamedObjects\ScmCreatedEvent".to_string(),
            ),
        ])
        .unwrap()
    }

    #[test]
    fn empty_table_renames_everything() {
        let mut table = HioTable::new();
        let d = table.renaming_decision(cid(2), "AnySvc", &mutex("MyAppMutex"));
        assert_eq!(d, Decision::UseRenamed(mutex("MyAppMutex-vm2")));
        assert_eq!(table.insertion_count(), 0);
    }

    #[test]
    fn interior_star_is_malformed() {
        let err = HioTable::load(&[(ResourceKind::NamedPipe, "Nt*Pipe".to_string())]).unwrap_err();
        assert!(matches!(err, HioError::MalformedPattern { .. }));
    }

    #[test]
    fn duplicate_pattern_rejected() {
        let err = HioTable::load(&[
            (ResourceKind::Event, "X".to_string()),
            (ResourceKind::Event, "X".to_string()),
        ])
        .unwrap_err();
        assert!(matches!(err, HioError::DuplicatePattern { .. }));
    }

    #[test]
    fn match_literal_and_starred() {
        let table = small_table();
        assert!(table.match_hio(r"\BaseNamedObjects\ScmCreatedEvent"));
        assert!(table.match_hio(r"\Device\NamedPipe\net\NtControlPipe12"));
        assert!(!table.match_hio(r"\Device\NamedPipe\net\NtControlPipeX"));
        assert!(!table.match_hio(r"\Device\NamedPipe\net\NtControlPipe"));
        assert!(!table.match_hio(r"\BaseNamedObjects\Other"));
    }

    #[test]
    fn learning_inserts_and_returns_original() {
        let mut table = small_table();
        let d = table.renaming_decision(
            cid(1),
            "RpcSS",
            &pipe(r"\Device\NamedPipe\net\NtControlPipe3"),
        );
        assert_eq!(d, Decision::UseOriginal);
        assert!(table.access_list(CONTROL_PIPE).unwrap().contains("RpcSS"));
        assert_eq!(table.insertion_count(), 1);

        // Same service again: no new insertion.
        table.renaming_decision(
            cid(2),
            "RpcSS",
            &pipe(r"\Device\NamedPipe\net\NtControlPipe9"),
        );
        assert_eq!(table.insertion_count(), 1);
    }

    #[test]
    fn enforcement_denies_unlisted_without_mutation() {
        let mut table = small_table();
        table.renaming_decision(
            cid(1),
            "RpcSS",
            &pipe(r"\Device\NamedPipe\net\NtControlPipe3"),
        );
        table.set_hio_flag(true);
        let before = table.fingerprint();

        let d = table.renaming_decision(
            cid(1),
            "Evil",
            &pipe(r"\Device\NamedPipe\net\NtControlPipe3"),
        );
        assert_eq!(d, Decision::Denied);
        assert!(!table.access_list(CONTROL_PIPE).unwrap().contains("Evil"));

        let d = table.renaming_decision(
            cid(2),
            "RpcSS",
            &pipe(r"\Device\NamedPipe\net\NtControlPipe4"),
        );
        assert_eq!(d, Decision::UseOriginal);
        assert_eq!(table.fingerprint(), before);
    }

    #[test]
    fn freezing_is_idempotent_and_reversible() {
        let mut table = small_table();
        table.set_hio_flag(true);
        let frozen_once = table.clone();
        table.set_hio_flag(true);
        assert_eq!(table, frozen_once);

        table.set_hio_flag(false);
        let d = table.renaming_decision(
            cid(1),
            "Later",
            &pipe(r"\Device\NamedPipe\net\NtControlPipe1"),
        );
        assert_eq!(d, Decision::UseOriginal);
        assert_eq!(table.insertion_count(), 1);
    }

    #[test]
    fn non_hio_names_rename_in_any_mode() {
        let mut table = small_table();
        for frozen in [false, true] {
            table.set_hio_flag(frozen);
            let d = table.renaming_decision(cid(2), "AnySvc", &mutex("MyAppMutex"));
            assert_eq!(d, Decision::UseRenamed(mutex("MyAppMutex-vm2")));
        }
    }

    #[test]
    fn literal_match_wins_over_starred() {
        let mut table = HioTable::load(&[
            (ResourceKind::Event, "Obj*".to_string()),
            (ResourceKind::Event, "Obj7".to_string()),
        ])
        .unwrap();
        let d = table.renaming_decision(
            cid(1),
            "Svc",
            &ResourceName::new(ResourceKind::Event, "Obj7").unwrap(),
        );
        assert_eq!(d, Decision::UseOriginal);
        assert!(table.access_list("Obj7").unwrap().contains("Svc"));
        assert!(table.access_list("Obj*").unwrap().is_empty());
    }

    #[test]
    fn seed_text_parses_kinds_comments_and_blanks() {
        let table = HioTable::load_seed_text(
            "# comment\n\
             port\t\\RPC Control\\ntsvcs\n\
             \n\
             pipe\t\\Device\\NamedPipe\\samr\n\
             event\t\\BaseNamedObjects\\userenv: User Profile setup event\n",
        )
        .unwrap();
        assert_eq!(table.len(), 3);
        assert!(table.match_hio(r"\BaseNamedObjects\userenv: User Profile setup event"));
    }

    #[test]
    fn seed_text_reports_bad_lines() {
        let err = HioTable::load_seed_text("socket\tfoo\n").unwrap_err();
        assert!(matches!(err, HioError::MalformedSeedLine { line: 1, .. }));
        let err = HioTable::load_seed_text("pipe foo\n").unwrap_err();
        assert!(matches!(err, HioError::MalformedSeedLine { line: 1, .. }));
    }

    #[test]
    fn serialization_is_sorted_and_lists_services() {
        let mut table = small_table();
        table.renaming_decision(
            cid(1),
            "W3SVC",
            &pipe(r"\Device\NamedPipe\net\NtControlPipe1"),
        );
        table.renaming_decision(
            cid(1),
            "EventLog",
            &pipe(r"\Device\NamedPipe\net\NtControlPipe2"),
        );
        let text = table.serialize();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let mut sorted = lines.clone();
        sorted.sort_unstable();
        assert_eq!(lines, sorted);
        assert!(text.contains("NtControlPipe*\tEventLog,W3SVC"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// match_hio("P*", s) holds exactly for s in P followed by one
            /// or more decimal digits, checked against brute-force string
            /// construction over short suffixes.
            #[test]
            fn wildcard_matches_exactly_prefix_plus_digits(suffix in "[0-9A-Za-z]{0,4}") {
                let table = HioTable::load(&[(ResourceKind::NamedPipe, "Pipe*".to_string())])
                    .unwrap();
                let name = format!("Pipe{suffix}");
                let expected = !suffix.is_empty()
                    && suffix.bytes().all(|b| b.is_ascii_digit());
                prop_assert_eq!(table.match_hio(&name), expected);
            }

            /// In learning mode every access list only ever gains members.
            #[test]
            fn learning_is_monotone(
                accesses in prop::collection::vec(
                    (prop::sample::select(vec!["A", "B", "C"]), 1u32..4, 0u32..30),
                    0..40,
                )
            ) {
                let mut table = HioTable::load(&[
                    (ResourceKind::NamedPipe, CONTROL_PIPE.to_string()),
                ]).unwrap();
                let mut seen: BTreeSet<String> = BTreeSet::new();
                for (svc, container, pipe_no) in accesses {
                    let name = format!(r"\Device\NamedPipe\net\NtControlPipe{pipe_no}");
                    let before: BTreeSet<String> = table
                        .access_list(CONTROL_PIPE).unwrap()
                        .services().map(str::to_string).collect();
                    table.renaming_decision(
                        ContainerId::new(container).unwrap(),
                        svc,
                        &ResourceName::new(ResourceKind::NamedPipe, name).unwrap(),
                    );
                    let after: BTreeSet<String> = table
                        .access_list(CONTROL_PIPE).unwrap()
                        .services().map(str::to_string).collect();
                    prop_assert!(before.is_subset(&after));
                    seen.insert(svc.to_string());
                }
                let final_list: BTreeSet<String> = table
                    .access_list(CONTROL_PIPE).unwrap()
                    .services().map(str::to_string).collect();
                prop_assert_eq!(final_list, seen);
            }

            /// Replays never mutate a table that has already learned the
            /// workload, and a frozen table's fingerprint never changes.
            #[test]
            fn replay_converges_and_frozen_table_is_immutable(
                workload in prop::collection::vec(
                    (prop::sample::select(vec!["A", "B", "C", "D"]), 0u32..20),
                    1..30,
                )
            ) {
                let mut table = HioTable::load(&[
                    (ResourceKind::NamedPipe, CONTROL_PIPE.to_string()),
                    (ResourceKind::Event, r"\BaseNamedObjects\ScmCreatedEvent".to_string()),
                ]).unwrap();
                let run = |table: &mut HioTable| {
                    for (svc, n) in &workload {
                        let name = format!(r"\Device\NamedPipe\net\NtControlPipe{n}");
                        table.renaming_decision(
                            cid(1),
                            svc,
                            &ResourceName::new(ResourceKind::NamedPipe, name).unwrap(),
                        );
                        table.renaming_decision(
                            cid(1),
                            svc,
                            &ResourceName::new(
                                ResourceKind::Event,
                                r"\BaseNamedObjects\ScmCreatedEvent",
                            ).unwrap(),
                        );
                    }
                };
                run(&mut table);
                let after_first = table.insertion_count();
                run(&mut table);
                prop_assert_eq!(table.insertion_count(), after_first);

                table.set_hio_flag(true);
                let frozen_print = table.fingerprint();
                run(&mut table);
                table.renaming_decision(cid(2), "Unseen", &pipe(r"\Device\NamedPipe\net\NtControlPipe1"));
                prop_assert_eq!(table.fingerprint(), frozen_print);
            }
        }
    }
}

//! Deterministic generation of mock-binary corpora with ground truth.
//!
//! The generator plants hard-coded service-name occurrences in a chosen
//! fraction of the programs and records exactly where it planted them, so
//! the ground truth is correct by construction. Decoy strings, including the
//! service name itself, also appear in places that never flow into call
//! arguments. The same `(seed, count, fraction)` always yields byte-identical
//! corpora.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::binscan::{api_arity, classify_callsite, parse_mock_binary, MockBinary, Occurrence};

const SERVICE_POOL: &[&str] = &[
    "RpcSS", "W3SVC", "Spooler", "EventLog", "MySQL", "Netman", "Dhcp", "Tlntsvr",
];

const DECOY_POOL: &[&str] = &[
    "config", "logfile", "warmup", "buffer", "startup", "session", "metrics", "probe",
];

const OTHER_APIS: &[&str] = &["PrintDebug", "LogMessage", "CreateMutexW", "CreateFileW"];
const SERVICE_PLANT_APIS: &[&str] = &[
    "OpenServiceW",
    "CreateService",
    "StartService",
    "RegisterServiceCtrlHandlerEx",
    "QueryServiceStatusEx",
    "SetServiceStatus",
    "GetServiceDisplayName",
];
const STRING_PLANT_APIS: &[&str] = &["RtlInitUnicodeString", "RtlEqualUnicodeString"];
const NO_ARG_APIS: &[&str] = &["OpenSCManagerW", "GetTickCount"];

/// One generated program with its by-construction ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub index: usize,
    pub service_name: String,
    pub source: String,
    pub binary: MockBinary,
    pub ground_truth: Vec<Occurrence>,
}

impl CorpusEntry {
    pub fn file_name(&self) -> String {
        format!("prog_{:04}.mockbin", self.index)
    }
}

/// Generates `count` well-formed mock binaries; `ceil(count * fraction)` of
/// them contain at least one planted occurrence of their service name.
pub fn generate_corpus(seed: u64, count: usize, fraction: f64) -> Vec<CorpusEntry> {
    assert!(
        (0.0..=1.0).contains(&fraction),
        "fraction must be within [0, 1]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted_count = ((count as f64) * fraction).ceil() as usize;
    let planted_count = planted_count.min(count);
    let planted: Vec<usize> =
        rand::seq::index::sample(&mut rng, count.max(1), planted_count.min(count))
            .into_iter()
            .collect();

    (0..count)
        .map(|index| generate_entry(&mut rng, index, planted.contains(&index)))
        .collect()
}

fn generate_entry(rng: &mut ChaCha8Rng, index: usize, plant: bool) -> CorpusEntry {
    let service_name = (*SERVICE_POOL.choose(rng).unwrap()).to_string();

    let mut strings: Vec<String> = Vec::new();
    let intern = |s: &str, strings: &mut Vec<String>| -> usize {
        if let Some(at) = strings.iter().position(|v| v == s) {
            return at;
        }
        strings.push(s.to_string());
        strings.len() - 1
    };

    let block_count = rng.gen_range(2..=6);
    let plant_blocks: Vec<usize> = if plant {
        let sites = rng.gen_range(1..=2.min(block_count));
        rand::seq::index::sample(rng, block_count, sites)
            .into_iter()
            .collect()
    } else {
        Vec::new()
    };

    let mut code_lines: Vec<String> = Vec::new();
    let mut code_len = 0usize;
    let mut ground_truth: Vec<Occurrence> = Vec::new();

    for block in 0..block_count {
        let planted_here = plant_blocks.contains(&block);
        let api = if planted_here {
            // Mirrors what scanning real binaries shows: mostly
            // service-management call sites, some string handling, a few
            // stragglers.
            match rng.gen_range(0..100) {
                0..=59 => *SERVICE_PLANT_APIS.choose(rng).unwrap(),
                60..=84 => *STRING_PLANT_APIS.choose(rng).unwrap(),
                _ => *OTHER_APIS.choose(rng).unwrap(),
            }
        } else if rng.gen_bool(0.2) {
            *NO_ARG_APIS.choose(rng).unwrap()
        } else {
            let all: Vec<&str> = SERVICE_PLANT_APIS
                .iter()
                .chain(STRING_PLANT_APIS)
                .chain(OTHER_APIS)
                .copied()
                .collect();
            *all.choose(rng).unwrap()
        };
        let arity = api_arity(api).unwrap();

        // Values pushed below the arguments never become arguments; this is
        // where the service name may appear as a pure decoy.
        for _ in 0..rng.gen_range(0..=2usize) {
            if rng.gen_bool(0.3) {
                let decoy = if rng.gen_bool(0.4) {
                    cased(rng, &service_name)
                } else {
                    (*DECOY_POOL.choose(rng).unwrap()).to_string()
                };
                let idx = intern(&decoy, &mut strings);
                code_lines.push(format!("PUSHSTR {idx}"));
            } else {
                code_lines.push(format!("PUSHINT {}", rng.gen_range(0..10_000)));
            }
            code_len += 1;
        }

        let mut args: Vec<Option<String>> = (0..arity)
            .map(|_| {
                if rng.gen_bool(0.4) {
                    Some((*DECOY_POOL.choose(rng).unwrap()).to_string())
                } else {
                    None
                }
            })
            .collect();
        let mut planted_positions: Vec<(usize, String)> = Vec::new();
        if planted_here {
            let hits = rng.gen_range(1..=2.min(arity));
            for pos in rand::seq::index::sample(rng, arity, hits).into_iter() {
                let constant = cased(rng, &service_name);
                args[pos] = Some(constant.clone());
                planted_positions.push((pos, constant));
            }
        }

        // Arguments push right to left: highest position first.
        for pos in (0..arity).rev() {
            match &args[pos] {
                Some(s) => {
                    let idx = intern(s, &mut strings);
                    code_lines.push(format!("PUSHSTR {idx}"));
                }
                None => code_lines.push(format!("PUSHINT {}", rng.gen_range(0..10_000))),
            }
            code_len += 1;
        }

        let call_offset = code_len;
        code_lines.push(format!("CALL {api}"));
        code_len += 1;

        planted_positions.sort_by_key(|(pos, _)| *pos);
        for (pos, constant) in planted_positions {
            ground_truth.push(Occurrence {
                code_offset: call_offset,
                api: api.to_string(),
                arg_position: pos,
                matched_string: constant,
                klass: classify_callsite(api).unwrap(),
            });
        }
    }

    // Sometimes the name also sits unused in the string table.
    if rng.gen_bool(0.3) {
        intern(&cased(rng, &service_name), &mut strings);
    }

    let mut source = format!("# corpus program {index:04} (service {service_name})\n");
    for (idx, s) in strings.iter().enumerate() {
        source.push_str(&format!("STR {idx} \"{s}\"\n"));
    }
    for line in &code_lines {
        source.push_str(line);
        source.push('\n');
    }

    let binary = parse_mock_binary(&source).expect("generated programs are well-formed");
    CorpusEntry {
        index,
        service_name,
        source,
        binary,
        ground_truth,
    }
}

fn cased(rng: &mut ChaCha8Rng, name: &str) -> String {
    match rng.gen_range(0..3) {
        0 => name.to_string(),
        1 => name.to_ascii_uppercase(),
        _ => name.to_ascii_lowercase(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binscan::scan_binary;

    #[test]
    fn plants_exactly_the_requested_fraction() {
        let corpus = generate_corpus(42, 100, 0.2);
        assert_eq!(corpus.len(), 100);
        let with_hits = corpus
            .iter()
            .filter(|e| !e.ground_truth.is_empty())
            .count();
        assert_eq!(with_hits, 20);
    }

    #[test]
    fn empty_corpus_is_fine() {
        assert!(generate_corpus(7, 0, 0.5).is_empty());
    }

    #[test]
    fn same_inputs_give_byte_identical_corpora() {
        let a = generate_corpus(42, 50, 0.3);
        let b = generate_corpus(42, 50, 0.3);
        assert_eq!(a, b);
        let c = generate_corpus(43, 50, 0.3);
        assert_ne!(a, c);
    }

    #[test]
    fn scan_matches_ground_truth_on_a_small_corpus() {
        for entry in generate_corpus(7, 200, 0.25) {
            let scanned = scan_binary(&entry.binary, &entry.service_name).unwrap();
            assert_eq!(
                scanned, entry.ground_truth,
                "mismatch in program {}",
                entry.index
            );
        }
    }

    #[test]
    fn ceil_applies_to_fractions() {
        let corpus = generate_corpus(1, 10, 0.01);
        let with_hits = corpus
            .iter()
            .filter(|e| !e.ground_truth.is_empty())
            .count();
        assert_eq!(with_hits, 1);
    }
}

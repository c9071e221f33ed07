//! Mock-binary parsing and hard-coded service-name detection.
//!
//! Some service binaries embed their own service name as a string constant
//! and pass it to API calls, which breaks renamed instances. This module
//! models such binaries in a small stack ISA, finds name constants that flow
//! into call arguments, classifies the call sites, and rewrites matching
//! arguments at run time for duplicated instances.
//!
//! Text format, one statement per line, `#` starts a comment:
//!
//! ```text
//! STR <index> "<text>"     string-table entry
//! PUSHSTR <index>          push a string constant
//! PUSHINT <n>              push an integer
//! CALL <ApiName>           call; consumes the top <arity> values
//! ```
//!
//! Arguments are pushed right to left, so argument 0 of a call is the value
//! on top of the stack. Simplified arities for the known APIs:
//!
//! | API                          | arity | arguments                    |
//! |------------------------------|-------|------------------------------|
//! | OpenSCManagerW               | 0     |                              |
//! | OpenServiceW                 | 3     | handle, name, access         |
//! | CreateService                | 3     | handle, name, image          |
//! | StartService                 | 2     | handle, name                 |
//! | RegisterServiceCtrlHandlerEx | 2     | name, handler                |
//! | QueryServiceStatusEx         | 2     | name, info-level             |
//! | SetServiceStatus             | 2     | name, status                 |
//! | GetServiceDisplayName        | 2     | handle, name                 |
//! | RtlInitUnicodeString         | 2     | dest, source                 |
//! | RtlEqualUnicodeString        | 3     | first, second, case-flag     |
//! | PrintDebug                   | 1     | message                      |
//! | LogMessage                   | 2     | tag, message                 |
//! | CreateMutexW                 | 2     | attrs, name                  |
//! | CreateFileW                  | 2     | path, access                 |
//! | LoadLibraryW                 | 1     | path                         |
//! | HeapAlloc                    | 1     | size                         |
//! | GetTickCount                 | 0     |                              |
//! | ExitProcess                  | 1     | code                         |

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// One instruction of the mock ISA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instr {
    PushStr(usize),
    PushInt(i64),
    Call(String),
}

/// A value on the simulated stack or in a call's argument list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Str(String),
    Int(i64),
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            Value::Int(_) => None,
        }
    }
}

/// Call-site classification by API family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CallClass {
    ServiceApi,
    StringApi,
    Other,
}

impl fmt::Display for CallClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CallClass::ServiceApi => "ServiceApi",
            CallClass::StringApi => "StringApi",
            CallClass::Other => "Other",
        };
        f.write_str(s)
    }
}

const SERVICE_APIS: &[&str] = &[
    "OpenServiceW",
    "CreateService",
    "StartService",
    "RegisterServiceCtrlHandlerEx",
    "QueryServiceStatusEx",
    "SetServiceStatus",
    "GetServiceDisplayName",
    "OpenSCManagerW",
];

const STRING_APIS: &[&str] = &["RtlInitUnicodeString", "RtlEqualUnicodeString"];

/// Known APIs with their simplified arities.
pub fn api_arity(api: &str) -> Option<usize> {
    let arity = match api {
        "OpenSCManagerW" | "GetTickCount" => 0,
        "PrintDebug" | "LoadLibraryW" | "HeapAlloc" | "ExitProcess" => 1,
        "StartService" | "RegisterServiceCtrlHandlerEx" | "QueryServiceStatusEx"
        | "SetServiceStatus" | "GetServiceDisplayName" | "RtlInitUnicodeString"
        | "LogMessage" | "CreateMutexW" | "CreateFileW" => 2,
        "OpenServiceW" | "CreateService" | "RtlEqualUnicodeString" => 3,
        _ => return None,
    };
    Some(arity)
}

pub fn known_apis() -> impl Iterator<Item = &'static str> {
    [
        "OpenSCManagerW",
        "OpenServiceW",
        "CreateService",
        "StartService",
        "RegisterServiceCtrlHandlerEx",
        "QueryServiceStatusEx",
        "SetServiceStatus",
        "GetServiceDisplayName",
        "RtlInitUnicodeString",
        "RtlEqualUnicodeString",
        "PrintDebug",
        "LogMessage",
        "CreateMutexW",
        "CreateFileW",
        "LoadLibraryW",
        "HeapAlloc",
        "GetTickCount",
        "ExitProcess",
    ]
    .into_iter()
}

/// Classifies an API by family.
pub fn classify_callsite(api: &str) -> Result<CallClass, BinscanError> {
    if api_arity(api).is_none() {
        return Err(BinscanError::UnknownApi {
            line: 0,
            api: api.to_string(),
        });
    }
    if SERVICE_APIS.contains(&api) {
        Ok(CallClass::ServiceApi)
    } else if STRING_APIS.contains(&api) {
        Ok(CallClass::StringApi)
    } else {
        Ok(CallClass::Other)
    }
}

/// A parsed mock binary: string table plus instruction stream.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockBinary {
    strings: BTreeMap<usize, String>,
    code: Vec<Instr>,
}

impl MockBinary {
    pub fn strings(&self) -> &BTreeMap<usize, String> {
        &self.strings
    }

    pub fn code(&self) -> &[Instr] {
        &self.code
    }

    /// Renders the binary back to its text form.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        for (idx, s) in &self.strings {
            out.push_str(&format!("STR {idx} \"{s}\"\n"));
        }
        for instr in &self.code {
            match instr {
                Instr::PushStr(i) => out.push_str(&format!("PUSHSTR {i}\n")),
                Instr::PushInt(n) => out.push_str(&format!("PUSHINT {n}\n")),
                Instr::Call(api) => out.push_str(&format!("CALL {api}\n")),
            }
        }
        out
    }

    /// The canonical registration stub: pushes the given name and registers
    /// it as a service control handler. Used for services flagged as
    /// embedding their own name when no explicit binary is supplied.
    pub fn registration_stub(name: &str) -> MockBinary {
        let mut strings = BTreeMap::new();
        strings.insert(0, name.to_string());
        MockBinary {
            strings,
            code: vec![
                Instr::PushInt(0),
                Instr::PushStr(0),
                Instr::Call("RegisterServiceCtrlHandlerEx".to_string()),
            ],
        }
    }
}

/// One detected use of a hard-coded service name as a call argument.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Occurrence {
    /// Instruction index of the `Call`.
    pub code_offset: usize,
    pub api: String,
    /// 0-based argument position; argument 0 is the last value pushed.
    pub arg_position: usize,
    /// The string constant as written in the binary.
    pub matched_string: String,
    pub klass: CallClass,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BinscanError {
    #[error("line {line}: syntax error: {message}")]
    SyntaxError { line: usize, message: String },
    #[error("line {line}: unknown API {api:?}")]
    UnknownApi { line: usize, api: String },
    #[error("line {line}: PUSHSTR {index} has no matching STR entry")]
    BadStringIndex { line: usize, index: usize },
    #[error("call to {api} at instruction {offset} underflows the stack")]
    StackUnderflow { api: String, offset: usize },
}

/// Parses mock-binary source text.
pub fn parse_mock_binary(text: &str) -> Result<MockBinary, BinscanError> {
    let mut strings = BTreeMap::new();
    let mut code = Vec::new();
    let mut pushstr_sites: Vec<(usize, usize)> = Vec::new(); // (line, index)

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

        let (op, rest) = match stmt.split_once(char::is_whitespace) {
            Some((op, rest)) => (op, rest.trim()),
            None => (stmt, ""),
        };

        match op {
            "STR" => {
                let (idx, quoted) = rest.split_once(char::is_whitespace).ok_or_else(|| {
                    BinscanError::SyntaxError {
                        line,
                        message: "expected: STR <index> \"<text>\"".into(),
                    }
                })?;
                let index: usize = idx.parse().map_err(|_| BinscanError::SyntaxError {
                    line,
                    message: format!("bad string index {idx:?}"),
                })?;
                let quoted = quoted.trim();
                let inner = quoted
                    .strip_prefix('"')
                    .and_then(|s| s.strip_suffix('"'))
                    .ok_or_else(|| BinscanError::SyntaxError {
                        line,
                        message: "string literal must be double-quoted".into(),
                    })?;
                if inner.contains('"') {
                    return Err(BinscanError::SyntaxError {
                        line,
                        message: "embedded quotes are not supported".into(),
                    });
                }
                if strings.insert(index, inner.to_string()).is_some() {
                    return Err(BinscanError::SyntaxError {
                        line,
                        message: format!("duplicate STR index {index}"),
                    });
                }
            }
            "PUSHSTR" => {
                let index: usize = rest.parse().map_err(|_| BinscanError::SyntaxError {
                    line,
                    message: format!("bad PUSHSTR operand {rest:?}"),
                })?;
                pushstr_sites.push((line, index));
                code.push(Instr::PushStr(index));
            }
            "PUSHINT" => {
                let n: i64 = rest.parse().map_err(|_| BinscanError::SyntaxError {
                    line,
                    message: format!("bad PUSHINT operand {rest:?}"),
                })?;
                code.push(Instr::PushInt(n));
            }
            "CALL" => {
                if rest.is_empty() || rest.contains(char::is_whitespace) {
                    return Err(BinscanError::SyntaxError {
                        line,
                        message: "expected: CALL <ApiName>".into(),
                    });
                }
                if api_arity(rest).is_none() {
                    return Err(BinscanError::UnknownApi {
                        line,
                        api: rest.to_string(),
                    });
                }
                code.push(Instr::Call(rest.to_string()));
            }
            _ => {
                return Err(BinscanError::SyntaxError {
                    line,
                    message: format!("unknown statement {op:?}"),
                });
            }
        }
    }

    for (line, index) in pushstr_sites {
        if !strings.contains_key(&index) {
            return Err(BinscanError::BadStringIndex { line, index });
        }
    }

    Ok(MockBinary { strings, code })
}

/// Simulates the push stack and reports every call argument whose string
/// constant equals `service_name` case-insensitively. Constants that never
/// flow into a call yield nothing.
///
/// Each call must have at least its arity in values pushed since the
/// previous call; the call consumes exactly its arity.
pub fn scan_binary(
    bin: &MockBinary,
    service_name: &str,
) -> Result<Vec<Occurrence>, BinscanError> {
    let mut occurrences = Vec::new();
    let mut stack: Vec<Value> = Vec::new();
    let mut fresh = 0usize;

    for (offset, instr) in bin.code.iter().enumerate() {
        match instr {
            Instr::PushStr(idx) => {
                stack.push(Value::Str(bin.strings[idx].clone()));
                fresh += 1;
            }
            Instr::PushInt(n) => {
                stack.push(Value::Int(*n));
                fresh += 1;
            }
            Instr::Call(api) => {
                let arity = api_arity(api).expect("parser admits only known APIs");
                if fresh < arity {
                    return Err(BinscanError::StackUnderflow {
                        api: api.clone(),
                        offset,
                    });
                }
                let klass = classify_callsite(api).expect("parser admits only known APIs");
                for pos in 0..arity {
                    let value = &stack[stack.len() - 1 - pos];
                    if let Value::Str(s) = value {
                        if s.eq_ignore_ascii_case(service_name) {
                            occurrences.push(Occurrence {
                                code_offset: offset,
                                api: api.clone(),
                                arg_position: pos,
                                matched_string: s.clone(),
                                klass,
                            });
                        }
                    }
                }
                stack.truncate(stack.len() - arity);
                fresh = 0;
            }
        }
    }

    Ok(occurrences)
}

/// Replaces every string argument case-insensitively equal to `original`
/// with the exact `duplicated` string. Applies only to service-management
/// and string-manipulation APIs; other calls pass through unmodified.
pub fn rewrite_runtime_arg(
    api: &str,
    args: Vec<Value>,
    original: &str,
    duplicated: &str,
) -> Vec<Value> {
    match classify_callsite(api) {
        Ok(CallClass::ServiceApi) | Ok(CallClass::StringApi) => args
            .into_iter()
            .map(|v| match v {
                Value::Str(s) if s.eq_ignore_ascii_case(original) => {
                    Value::Str(duplicated.to_string())
                }
                other => other,
            })
            .collect(),
        _ => args,
    }
}

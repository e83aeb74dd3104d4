use std::fmt;

pub const FAILURE: u8 = 1;
pub const CONFIG: u8 = 2;
pub const TOPOLOGY: u8 = 3;
pub const NUMERIC: u8 = 4;
pub const SEARCH: u8 = 5;
pub const CHECKPOINT: u8 = 6;

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

/// Default exit code of a library error.
pub fn code_of(e: &bionet::Error) -> u8 {
    use bionet::Error::*;
    match e {
        Config(_) => CONFIG,
        Topology(_) | Parse { .. } => TOPOLOGY,
        Numeric(_) => NUMERIC,
        Search(_) => SEARCH,
        Checkpoint(_) => CHECKPOINT,
        _ => FAILURE,
    }
}

/// Exit code for any error reaching `main`.
pub fn classify(e: &anyhow::Error) -> u8 {
    if let Some(f) = e.downcast_ref::<Failure>() {
        return f.code;
    }
    if let Some(b) = e.downcast_ref::<bionet::Error>() {
        return code_of(b);
    }
    FAILURE
}

/// Attaches a fixed exit code to a library result.
pub trait OrExit<T> {
    fn or_exit(self, code: u8) -> anyhow::Result<T>;
}

impl<T> OrExit<T> for bionet::Result<T> {
    fn or_exit(self, code: u8) -> anyhow::Result<T> {
        self.map_err(|e| Failure::new(code, e.to_string()).into())
    }
}

//! Library half of the `geomattn` command-line tool. Each command is a plain
//! function over resolved [`Settings`] so tests can drive the exact code
//! path the binary runs.

pub mod commands;
pub mod settings;

use std::fmt;

pub use settings::Settings;

/// Process exit status for a failed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Config = 1,
    Data = 2,
    Numeric = 3,
}

/// A command failure carrying its exit status.
#[derive(Debug)]
pub struct Failure {
    pub kind: ExitKind,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Config, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Data, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<geomattn::Error> for Failure {
    fn from(e: geomattn::Error) -> Self {
        use geomattn::Error as E;
        let kind = match e {
            E::NonFinite(_) => ExitKind::Numeric,
            E::Io { .. } | E::Format { .. } | E::Data(_) => ExitKind::Data,
            E::Shape { .. }
            | E::Domain { .. }
            | E::NonScalarRoot(_)
            | E::BackwardTwice
            | E::MissingRunningStats(_)
            | E::Config(_) => ExitKind::Config,
        };
        Self { kind, message: e.to_string() }
    }
}

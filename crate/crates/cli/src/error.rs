use std::fmt;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, overrides or input schema.
    Validation(String),
    /// An estimation or I/O step failed.
    Runtime(String),
    /// Diagnostics ran but a threshold was not met.
    Threshold(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Threshold(_) => 3,
        }
    }

    /// Wraps a library error with the step that raised it. Configuration,
    /// formula and schema errors count as validation failures.
    pub fn from_core(step: &str, e: sharelens::Error) -> Self {
        use sharelens::Error as E;
        let msg = format!("{step}: {e}");
        match e {
            E::Config(_) | E::Formula(_) | E::MissingColumn { .. } => CliError::Validation(msg),
            _ => CliError::Runtime(msg),
        }
    }

    pub fn io(context: impl fmt::Display, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{context}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Threshold(m) => write!(f, "diagnostics threshold failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Shorthand for attaching a step name to library results.
pub trait Context<T> {
    fn step(self, step: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for sharelens::Result<T> {
    fn step(self, step: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::from_core(step, e))
    }
}

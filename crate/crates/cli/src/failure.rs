use serde::Serialize;

/// Everything that ends a command early, grouped by exit status.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Core(#[from] uls_dram::Error),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    exit_code: i32,
    message: String,
}

impl Failure {
    pub fn category(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Data(_) => "data",
            Failure::Internal(_) => "internal",
            Failure::Core(e) if e.is_config() => "config",
            Failure::Core(e) if e.is_data() => "data",
            Failure::Core(e) if e.is_numeric() => "numeric",
            Failure::Core(_) => "internal",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "data" => 3,
            "numeric" => 4,
            _ => 5,
        }
    }

    /// One-line JSON record for scripts reading stderr.
    pub fn record(&self) -> String {
        let r = ErrorRecord { error: self.category(), exit_code: self.exit_code(), message: self.to_string() };
        serde_json::to_string(&r).expect("error record serializes")
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(format!("cannot write output: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

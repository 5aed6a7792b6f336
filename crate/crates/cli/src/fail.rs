use mmdit_core::Error;
use serde_json::json;

/// A failed command: usage problems exit with 2, everything else with 1.
#[derive(Debug)]
pub struct CliError {
    usage: bool,
    kind: String,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            usage: true,
            kind: "usage".into(),
            message: message.into(),
        }
    }

    /// Core errors from validating user input.
    pub fn from_core_usage(e: Error) -> Self {
        Self {
            usage: true,
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.usage {
            2
        } else {
            1
        }
    }

    pub fn to_json(&self) -> String {
        json!({
            "error": {
                "kind": self.kind,
                "exit_code": self.exit_code(),
                "message": self.message,
            }
        })
        .to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            usage: matches!(e, Error::Config(_)),
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

use maskeval_core::boxes::BoxError;
use maskeval_core::detect::DetectError;
use maskeval_core::embed::EmbedError;
use maskeval_core::image_io::ImageIoError;
use maskeval_core::losses::LossError;
use maskeval_core::manifest::ManifestError;
use maskeval_core::protocol::ProtocolError;
use maskeval_core::recog::RecogError;
use maskeval_core::splits::SplitError;
use maskeval_core::synth::SynthError;
use thiserror::Error;

/// Process exit codes, one per error category.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const INPUT: i32 = 3;
    pub const DATA: i32 = 4;
    pub const OUTPUT: i32 = 5;
    pub const CHECK_FAILED: i32 = 6;
}

#[derive(Error, Debug)]
pub enum CliError {
    /// Bad flag values, unknown config keys, missing required parameters.
    #[error("{0}")]
    Config(String),
    /// Unreadable or unparseable input files.
    #[error("{0}")]
    Input(String),
    /// Inputs that parse but cannot be evaluated.
    #[error("{0}")]
    Data(String),
    #[error("{path}: {message}")]
    Output { path: String, message: String },
    /// A verification command ran and its check did not pass.
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Data(_) => "data",
            CliError::Output { .. } => "output",
            CliError::CheckFailed(_) => "check",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Input(_) => exit::INPUT,
            CliError::Data(_) => exit::DATA,
            CliError::Output { .. } => exit::OUTPUT,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
        }
    }

    pub fn output(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Output {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::ZeroClassCount => CliError::Data(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ImageIoError> for CliError {
    fn from(e: ImageIoError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::File { .. } => CliError::Input(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RecogError> for CliError {
    fn from(e: RecogError) -> Self {
        match e {
            RecogError::File { .. } => CliError::Input(e.to_string()),
            RecogError::Embedding(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SplitError> for CliError {
    fn from(e: SplitError) -> Self {
        match e {
            SplitError::File { .. } => CliError::Input(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Image(inner) => inner.into(),
            ProtocolError::Embed(inner) => inner.into(),
            ProtocolError::Recog(inner) => inner.into(),
            ProtocolError::Split(inner) => inner.into(),
            ProtocolError::NotFound(_) => CliError::Input(e.to_string()),
            ProtocolError::Unknown { .. } | ProtocolError::Invalid(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Range(_) | DetectError::Threshold(_) | DetectError::NoThresholds => CliError::Config(e.to_string()),
            DetectError::NoGroundTruth(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<BoxError> for CliError {
    fn from(e: BoxError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::UnknownLoss(_) | LossError::CheckParams { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { path, source } => CliError::Output {
                path,
                message: source.to_string(),
            },
            other => CliError::Output {
                path: "corpus".into(),
                message: other.to_string(),
            },
        }
    }
}

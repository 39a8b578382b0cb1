use std::fmt;

/// Snapshot written when a training step produces a non-finite loss.
#[derive(Debug, Clone)]
pub struct StepDiagnostic {
    pub step: usize,
    pub l_ego: f64,
    pub l_mlm: f64,
    pub l_vtm: f64,
    pub grad_norms: Vec<(String, f64)>,
}

impl fmt::Display for StepDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {}: l_ego={} l_mlm={} l_vtm={}",
            self.step, self.l_ego, self.l_mlm, self.l_vtm
        )?;
        let worst = self
            .grad_norms
            .iter()
            .filter(|(_, n)| !n.is_finite())
            .take(5)
            .map(|(name, n)| format!("{name}={n}"))
            .collect::<Vec<_>>();
        if !worst.is_empty() {
            write!(f, "; non-finite grads: {}", worst.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range in {op} (extent {extent})")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint has {stored}, current config is {current}")]
    ConfigHash { stored: String, current: String },

    #[error("non-finite loss ({0})")]
    NonFinite(Box<StepDiagnostic>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::ConfigHash { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

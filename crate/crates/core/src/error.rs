use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error at layer {layer}{}: {what}", head.map(|h| format!(", head {h}")).unwrap_or_default())]
    Numeric {
        layer: usize,
        head: Option<usize>,
        what: String,
    },

    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LabError>,
    },

    #[error("incomplete run: {0}")]
    Incomplete(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }

    pub(crate) fn numeric(layer: usize, head: Option<usize>, what: impl Into<String>) -> Self {
        LabError::Numeric {
            layer,
            head,
            what: what.into(),
        }
    }

    pub(crate) fn at_stage(stage: &'static str) -> impl FnOnce(LabError) -> LabError {
        move |e| LabError::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// Walks through stage wrappers to the underlying error.
    pub fn root(&self) -> &LabError {
        match self {
            LabError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            LabError::Numeric { .. } | LabError::Diverged { .. } => 3,
            LabError::Incomplete(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

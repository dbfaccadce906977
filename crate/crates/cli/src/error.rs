use serde::Serialize;
use sphere_ssm::analysis::AnalysisError;
use sphere_ssm::data::DataError;
use sphere_ssm::geometry::GeometryError;
use sphere_ssm::model::ModelError;
use sphere_ssm::training::TrainError;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }
}

fn model_kind(e: &ModelError) -> ErrorKind {
    match e {
        ModelError::Config(_) | ModelError::UnknownParam(_) => ErrorKind::Usage,
        ModelError::NonFinite(_) | ModelError::Ssm(_) | ModelError::Tensor(_) => ErrorKind::Numeric,
        ModelError::Shape(_)
        | ModelError::Checkpoint { .. }
        | ModelError::TensorMismatch(_)
        | ModelError::Io { .. } => ErrorKind::Data,
    }
}

fn geometry_kind(e: &GeometryError) -> ErrorKind {
    match e {
        GeometryError::OrderOutOfRange(_) | GeometryError::PatchOrderOutOfRange(_) => ErrorKind::Usage,
        _ => ErrorKind::Data,
    }
}

fn train_kind(e: &TrainError) -> ErrorKind {
    match e {
        TrainError::Config(_) => ErrorKind::Usage,
        TrainError::NonFiniteGradient(_)
        | TrainError::Diverged { .. }
        | TrainError::Stats(_)
        | TrainError::Tensor(_) => ErrorKind::Numeric,
        TrainError::Io { .. } => ErrorKind::Data,
        TrainError::Data(d) => data_kind(d),
        TrainError::Model(m) => model_kind(m),
    }
}

fn data_kind(e: &DataError) -> ErrorKind {
    match e {
        DataError::Geometry(g) => geometry_kind(g),
        DataError::Tensor(_) => ErrorKind::Numeric,
        _ => ErrorKind::Data,
    }
}

fn analysis_kind(e: &AnalysisError) -> ErrorKind {
    match e {
        AnalysisError::Invalid(_) | AnalysisError::TimerResolution { .. } => ErrorKind::Usage,
        AnalysisError::BadModel(_) | AnalysisError::Ssm(_) | AnalysisError::Tensor(_) => ErrorKind::Numeric,
        AnalysisError::Io { .. } | AnalysisError::Csv { .. } | AnalysisError::Json { .. } => ErrorKind::Data,
        AnalysisError::Model(m) => model_kind(m),
    }
}

macro_rules! classify {
    ($t:ty, $f:ident) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($f(&e), e.to_string())
            }
        }
    };
}

classify!(ModelError, model_kind);
classify!(GeometryError, geometry_kind);
classify!(TrainError, train_kind);
classify!(DataError, data_kind);
classify!(AnalysisError, analysis_kind);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let e: CliError = TrainError::Diverged {
            epoch: 1,
            what: "nan".into(),
        }
        .into();
        assert_eq!(e.kind.exit_code(), 3);
        let e: CliError = DataError::Empty.into();
        assert_eq!(e.kind.exit_code(), 2);
        let e: CliError = GeometryError::OrderOutOfRange(9).into();
        assert_eq!(e.kind.exit_code(), 1);
        let e: CliError = TrainError::Data(DataError::Geometry(GeometryError::PatchOrderOutOfRange(7))).into();
        assert_eq!(e.kind, ErrorKind::Usage);
        let e: CliError = AnalysisError::BadModel("nan".into()).into();
        assert_eq!(e.kind, ErrorKind::Numeric);
    }
}

use thiserror::Error;

/// Pipeline stage, used to tag propagated failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    RotationAveraging,
    TranslationRefinement,
    Augmentation,
    TranslationAveraging,
    Triangulation,
    BundleAdjustment,
    MatchRefinement,
    Partition,
    LocalSfm,
    Alignment,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::RotationAveraging => "rotation-averaging",
            Stage::TranslationRefinement => "translation-refinement",
            Stage::Augmentation => "augmentation",
            Stage::TranslationAveraging => "translation-averaging",
            Stage::Triangulation => "triangulation",
            Stage::BundleAdjustment => "bundle-adjustment",
            Stage::MatchRefinement => "match-refine",
            Stage::Partition => "partition",
            Stage::LocalSfm => "local-sfm",
            Stage::Alignment => "align-merge",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("empty view graph")]
    EmptyGraph,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<SfmError>,
    },
}

impl SfmError {
    pub fn at(self, stage: Stage) -> SfmError {
        match self {
            tagged @ SfmError::Stage { .. } => tagged,
            other => SfmError::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> SfmError {
        SfmError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = SfmError> = std::result::Result<T, E>;

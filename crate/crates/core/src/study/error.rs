use thiserror::Error;

/// Study failures. Each variant has a stable machine-readable code.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StudyError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown trial {0}")]
    UnknownTrial(String),
    #[error("trial {0} has not been served yet")]
    TrialNotServed(String),
    #[error("trial {0} already has a response")]
    DuplicateResponse(String),
    #[error("session {0} is complete")]
    SessionComplete(String),
    #[error("expected 1 to 5 picks, got {0}")]
    PickCount(usize),
    #[error("category {0} picked twice")]
    DuplicatePick(u32),
    #[error("category {0} is not on the roster")]
    PickOutsideRoster(u32),
    #[error("no answered trials in session {0}")]
    NoAnswers(String),
    #[error("session {0} is not complete; pass partial=true for a report on answered trials")]
    Incomplete(String),
    #[error("{trials} trials cannot cover {categories} categories")]
    CoverageImpossible { trials: usize, categories: usize },
    #[error("asked for {wanted} trials but only {available} images exist")]
    NotEnoughImages { wanted: usize, available: usize },
    #[error("unknown condition {0:?}")]
    UnknownCondition(String),
    #[error("unknown network {0}")]
    UnknownNet(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("storage failure: {0}")]
    Storage(String),
}

impl StudyError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) => "unknown_session",
            Self::UnknownTrial(_) => "unknown_trial",
            Self::TrialNotServed(_) => "trial_not_served",
            Self::DuplicateResponse(_) => "duplicate_response",
            Self::SessionComplete(_) => "session_complete",
            Self::PickCount(_) => "pick_count",
            Self::DuplicatePick(_) => "duplicate_pick",
            Self::PickOutsideRoster(_) => "pick_outside_roster",
            Self::NoAnswers(_) => "no_answers",
            Self::Incomplete(_) => "incomplete",
            Self::CoverageImpossible { .. } => "coverage_impossible",
            Self::NotEnoughImages { .. } => "not_enough_images",
            Self::UnknownCondition(_) => "unknown_condition",
            Self::UnknownNet(_) => "unknown_net",
            Self::BadRequest(_) => "bad_request",
            Self::Storage(_) => "storage",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            Self::UnknownSession(_) | Self::UnknownTrial(_) | Self::UnknownNet(_) => 404,
            Self::DuplicateResponse(_)
            | Self::SessionComplete(_)
            | Self::Incomplete(_)
            | Self::TrialNotServed(_) => 409,
            Self::PickCount(_)
            | Self::DuplicatePick(_)
            | Self::PickOutsideRoster(_)
            | Self::NoAnswers(_)
            | Self::CoverageImpossible { .. }
            | Self::NotEnoughImages { .. } => 422,
            Self::UnknownCondition(_) | Self::BadRequest(_) => 400,
            Self::Storage(_) => 500,
        }
    }
}

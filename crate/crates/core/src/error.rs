use thiserror::Error;

use crate::model::ActionId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("negative rate b_{0}")]
    NegativeRate(usize),
    #[error("rate b_{0} is not finite")]
    NonFiniteRate(usize),
    #[error("mechanism has no offspring (sum of b_k over k >= 2 is zero)")]
    TrivialMechanism,
    #[error("b_1 is derived from the other rates and must not be supplied")]
    EntryForKEqualsOne,
    #[error("action `{0}` is not defined")]
    UnknownActionId(ActionId),
    #[error("action `{0}` is defined or listed more than once")]
    DuplicateActionId(ActionId),
    #[error("state {0} has an empty action set")]
    EmptyActionSet(usize),
    #[error("threshold m must be at least 1")]
    MZero,
    #[error("admissible set given for state {0}, outside 1..=m")]
    StateOutOfRange(usize),
    #[error("mechanism for action `{action}`: {source}")]
    InvalidMechanism {
        action: ActionId,
        #[source]
        source: Box<Error>,
    },
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("state `{0}` is listed more than once")]
    DuplicateState(String),
    #[error("row q(.|{state},{action}) is not conservative")]
    NonConservativeRow { state: String, action: ActionId },
    #[error("row q(.|{state},{action}) has zero exit rate")]
    ZeroExitRate { state: String, action: ActionId },
    #[error("state `{0}` is a target or cemetery state but has outgoing rates")]
    TargetNotAbsorbing(String),
    #[error("non-absorbing state `{0}` has no actions")]
    NoActions(String),
    #[error("cemetery state `{0}` must not be a target state")]
    CemeteryInTarget(String),
    #[error("action `{action}` is not admissible at state {state}")]
    InadmissibleAction { state: String, action: ActionId },
    #[error("no action assigned to state {0}")]
    MissingAction(String),
    #[error("policy length {got} does not match threshold m = {expected}")]
    PolicyShape { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no convergence for {what} after {iterations} iterations")]
    NoConvergence { what: String, iterations: usize },
    #[error("singular system ({context})")]
    SingularSystem { context: String },
    #[error("policy iteration exceeded {bound} evaluations")]
    IterationBound { bound: usize },
    #[error("{count} head policies exceed the enumeration cap {cap}")]
    TooManyPolicies { count: u128, cap: u128 },
}

impl Error {
    /// Numerical failures, as opposed to malformed or invalid input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::SingularSystem { .. }
                | Error::IterationBound { .. }
                | Error::TooManyPolicies { .. }
        )
    }
}

use thiserror::Error;

/// Errors raised by the rate functions, integrators and ensemble engines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Operators or states with incompatible shapes.
    #[error("dimension mismatch: {0}")]
    Structural(String),

    /// The time step is too coarse for the jump probabilities it produces.
    #[error("step size too coarse at t = {time}: {detail}")]
    StepSize { time: f64, detail: String },

    #[error("negative rate in Markovian engine (channel `{channel}` at t = {time}); use the non-Markovian jump engine")]
    NegativeRate { channel: String, time: f64 },

    #[error("numerical blow-up at t = {time}")]
    Blowup { time: f64 },

    #[error("positivity violation: p{state} = {value:e} at t = {time}")]
    Positivity { state: usize, value: f64, time: f64 },

    #[error("impossible jump on channel `{channel}`: |L psi| = {norm:e}")]
    ImpossibleJump { channel: String, norm: f64 },

    /// Reversed-jump quantity requested for a source state with no members.
    #[error("undefined source: member {0} has zero occupation")]
    UndefinedSource(usize),

    #[error("undefined effective rate: target occupation is zero while source occupation is {0}")]
    UndefinedEffectiveRate(f64),
}

impl Error {
    /// True for failures that arise while integrating or sampling, as opposed
    /// to malformed inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::StepSize { .. }
                | Error::NegativeRate { .. }
                | Error::Blowup { .. }
                | Error::Positivity { .. }
                | Error::ImpossibleJump { .. }
                | Error::UndefinedSource(_)
                | Error::UndefinedEffectiveRate(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn structural(msg: impl Into<String>) -> Error {
    Error::Structural(msg.into())
}

use thiserror::Error;

/// Errors raised by the solvers and their supporting infrastructure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("resource limit exceeded: {what} needs {requested} bytes, budget is {budget} bytes")]
    Resource {
        what: String,
        requested: u128,
        budget: u128,
    },

    #[error("non-finite value in {stage} at t-node {t_node:?}, s-node {s_node}, path {path}")]
    NonFinite {
        stage: &'static str,
        t_node: Option<usize>,
        s_node: usize,
        path: usize,
    },

    #[error("missing derivative callbacks: {0}")]
    MissingDerivatives(&'static str),

    #[error("generator declared independent of y but depends on it: {0}")]
    GeneratorDependsOnY(String),

    #[error(
        "derivative callback `{name}` fails finite-difference check (relative error {rel_err:.3e})"
    )]
    DerivativeCheck { name: String, rel_err: f64 },

    #[error("control index {0} is not in the control set")]
    UnknownControl(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Default memory budget for ensembles and two-parameter fields (8 GiB).
pub const DEFAULT_MEMORY_BUDGET: u128 = 8 << 30;

pub(crate) fn check_budget(what: &str, elements: u128, budget: u128) -> Result<()> {
    let requested = elements.saturating_mul(std::mem::size_of::<f64>() as u128);
    if requested > budget {
        return Err(Error::Resource {
            what: what.to_string(),
            requested,
            budget,
        });
    }
    Ok(())
}

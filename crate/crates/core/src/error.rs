use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice spec: {0}")]
    InvalidSpec(String),

    #[error("grid functions live on different lattices")]
    SpecMismatch,

    #[error("expected a real-tagged grid function")]
    NotReal,

    #[error("translation {0:?} is not a whole number of lattice periods")]
    NotCommensurate(Vec<f64>),

    #[error("insulator assumption violated: band Z top {homo:.6e}, band Z+1 bottom {lumo:.6e}")]
    InsulatorViolation { homo: f64, lumo: f64 },

    #[error("{what} did not converge after {iterations} iterations (last residual {last:.3e})")]
    Diverged {
        what: &'static str,
        iterations: usize,
        last: f64,
        trace: Vec<f64>,
    },

    #[error("perturbation violates -gamma0 <= Q <= 1 - gamma0: spectrum of gamma0+Q in [{min:.3e}, {max:.3e}]")]
    Infeasible { min: f64, max: f64 },

    #[error("localization radius {radius} does not fit the supercell of side {side}")]
    RadiusTooLarge { radius: f64, side: f64 },

    #[error("supports overlap after translation")]
    Overlap,

    #[error("state needs {needed} bytes, over the budget of {budget}")]
    MemoryBudget { needed: usize, budget: usize },

    #[error("fit unreliable: {reason}")]
    FitUnreliable { reason: String, table: Vec<(f64, f64)> },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("coefficient evaluation failure: {coefficient} returned a non-finite value at t={t}, x={x:?}, u={u:?}, v={v:?}")]
    Coefficient {
        coefficient: &'static str,
        t: f64,
        x: Vec<f64>,
        u: Vec<f64>,
        v: Vec<f64>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("blow-up at step {step} on path {path}")]
    BlowUp { step: usize, path: usize },

    #[error("lattice branch budget exceeded: {required} nodes required, budget is {budget}")]
    BranchBudget { required: u128, budget: u128 },

    #[error("degenerate basis at step {step}: regression matrix has rank {rank} < {columns}; reduce the basis degree")]
    DegenerateBasis {
        step: usize,
        rank: usize,
        columns: usize,
    },

    #[error("driver blow-up at step {step}")]
    DriverBlowUp { step: usize },

    #[error("monotonicity (CFL) violated, reduce Δt or refine grid: {0}")]
    Cfl(String),

    #[error("stencil not monotone for this σσᵀ: {0}")]
    StencilNotMonotone(String),

    #[error("enumeration budget exceeded: {required} candidates required, budget is {budget}")]
    EnumerationBudget { required: u128, budget: u128 },

    #[error("integration failure: {0}")]
    Integration(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value at step {step}, node {node}")]
    NonFinite { step: usize, node: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LabError::Invalid(msg.into())
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation fault at particle {particle}: {reason}")]
    ParticleFault { particle: usize, reason: String },

    #[error("particle {particle} left the stencil-safe domain at ({x}, {y})")]
    OutOfDomain { particle: usize, x: f64, y: f64 },

    #[error("CFL number {cfl:.4} reached the 0.3 threshold")]
    Cfl { cfl: f64 },

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("inconsistent face orientation between faces {a} and {b}")]
    Orientation { a: usize, b: usize },

    #[error("tape does not match the requested backward pass: {0}")]
    Tape(String),

    #[error("optimization aborted: {0}")]
    Optimization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SimError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        SimError::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

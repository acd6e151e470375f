//! Mapping from failures to process exit codes.

use std::fmt;

pub const SUCCESS: i32 = 0;
pub const USAGE: i32 = 1;
pub const NUMERICAL: i32 = 2;
pub const IO: i32 = 3;

/// A verification or agreement check did not hold.
#[derive(Debug, Clone)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "numerical check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub fn classify(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<CheckFailed>() {
            return NUMERICAL;
        }
        if cause.is::<std::io::Error>() {
            return IO;
        }
        if let Some(e) = cause.downcast_ref::<minsharp::Error>() {
            use minsharp::Error as E;
            return match e {
                E::Io { .. } | E::Idx(_) | E::Checkpoint(_) => IO,
                E::NegativeCurvature { .. } | E::Diverged { .. } | E::NonFinite { .. } => NUMERICAL,
                _ => USAGE,
            };
        }
    }
    USAGE
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification() {
        assert_eq!(classify(&anyhow::Error::new(CheckFailed("x".into()))), NUMERICAL);
        let io = minsharp::Error::Io { path: "p".into(), source: std::io::Error::other("gone") };
        assert_eq!(classify(&anyhow::Error::new(io).context("loading")), IO);
        assert_eq!(classify(&anyhow::Error::new(minsharp::Error::InvalidAlpha("x".into()))), USAGE);
        assert_eq!(classify(&anyhow::Error::new(minsharp::Error::Diverged { epoch: 0, loss: f64::NAN })), NUMERICAL);
        assert_eq!(classify(&anyhow::anyhow!("plain")), USAGE);
    }
}

use std::path::PathBuf;

/// Errors raised by the estimation library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}

/// Non-fatal conditions recorded alongside a result.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Warnings(u8);

impl Warnings {
    pub const RANK_DEFICIENT: Warnings = Warnings(1);
    pub const UNDERDETERMINED: Warnings = Warnings(1 << 1);
    pub const EMPTY_SUPPORT: Warnings = Warnings(1 << 2);
    pub const REFINE_FAILED: Warnings = Warnings(1 << 3);
    pub const TRIAL_FAILED: Warnings = Warnings(1 << 4);

    const NAMES: [(Warnings, &'static str); 5] = [
        (Self::RANK_DEFICIENT, "rank_deficient"),
        (Self::UNDERDETERMINED, "underdetermined"),
        (Self::EMPTY_SUPPORT, "empty_support"),
        (Self::REFINE_FAILED, "refine_failed"),
        (Self::TRIAL_FAILED, "trial_failed"),
    ];

    pub fn empty() -> Self {
        Self(0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, other: Warnings) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn insert_if(&mut self, other: Warnings, on: bool) {
        if on {
            self.0 |= other.0;
        }
    }

    pub fn names(self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .filter(|(w, _)| self.contains(*w))
            .map(|&(_, n)| n)
            .collect()
    }
}

impl std::ops::BitOr for Warnings {
    type Output = Warnings;
    fn bitor(self, rhs: Warnings) -> Warnings {
        Warnings(self.0 | rhs.0)
    }
}

impl std::ops::BitOrAssign for Warnings {
    fn bitor_assign(&mut self, rhs: Warnings) {
        self.0 |= rhs.0;
    }
}

impl std::fmt::Display for Warnings {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.names().join(";"))
    }
}

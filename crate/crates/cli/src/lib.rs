//! Command-line companion to `protoseg-core`: run configuration, on-disk
//! volume/dataset/checkpoint formats, and the train / eval /
//! rectify-report drivers. Everything here is deliberately deterministic:
//! the same config and seed produce byte-identical metrics logs.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod formats;

/// CLI-level failure, classified for the process exit code:
/// configuration problems exit 2, data problems 3, numeric failures 4.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<protoseg_core::err::CoreError> for CliError {
    fn from(e: protoseg_core::err::CoreError) -> Self {
        use protoseg_core::err::CoreError::*;
        match e {
            Config(m) => CliError::Config(m),
            Data(m) => CliError::Data(m),
            Numeric(m) => CliError::Numeric(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// FNV-1a 64-bit hash, used as the content fingerprint for config
/// snapshots (and by the build script for the code version).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hex fingerprint of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

/// Fingerprint of the compiled source tree, stamped in by the build script.
pub fn code_hash() -> &'static str {
    env!("CODE_HASH")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        assert_eq!(content_hash(b""), format!("{:016x}", 0xcbf2_9ce4_8422_2325u64));
        assert_eq!(content_hash(b"abc"), content_hash(b"abc"));
        assert_ne!(content_hash(b"abc"), content_hash(b"abd"));
        assert_eq!(content_hash(b"abc").len(), 16);
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Data("x".into()).exit_code(), 3);
        assert_eq!(CliError::Numeric("x".into()).exit_code(), 4);
    }
}

//! Server, CLI and HTTP model adapter around `aegis-core`.

pub mod adapter;
pub mod api;
pub mod cli;
pub mod server;
pub mod stub_server;

use std::ops::RangeInclusive;

/// `a..b` or `a..=b`, both inclusive sequence numbers; `a..` runs to the end.
pub fn parse_seq_range(s: &str) -> Result<RangeInclusive<u64>, String> {
    let bad = || format!("bad range `{s}` (expected e.g. 10..20)");
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let start: u64 = if a.is_empty() {
        1
    } else {
        a.trim().parse().map_err(|_| bad())?
    };
    let end: u64 = if b.is_empty() {
        u64::MAX
    } else {
        b.trim().parse().map_err(|_| bad())?
    };
    if end < start {
        return Err(bad());
    }
    Ok(start..=end)
}

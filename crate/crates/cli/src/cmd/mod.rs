pub mod anchors;
pub mod arch;
pub mod augment;
pub mod dataset;
pub mod evaluate;

use crate::Failure;

/// Comma-separated positive integers.
pub fn parse_rates(s: &str) -> Result<Vec<usize>, Failure> {
    s.split(',')
        .map(|t| match t.trim().parse::<usize>() {
            Ok(r) if r > 0 => Ok(r),
            _ => Err(Failure::usage("usage", format!("rate `{t}` is not a positive integer"))),
        })
        .collect()
}

pub fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

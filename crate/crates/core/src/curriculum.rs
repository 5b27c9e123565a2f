//! Tail-patch curriculum selection: isolate hard-but-learnable instances
//! whose empirical pass rates fall inside a closed band.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

/// Default band for hard-but-learnable instances.
pub const DEFAULT_LOWER: f64 = 0.125;
pub const DEFAULT_UPPER: f64 = 0.375;

/// Empirical pass rate of one instance over its rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRateRecord {
    pub instance_id: String,
    pub successes: u64,
    pub rollouts: u64,
    pub rate: f64,
}

impl PassRateRecord {
    pub fn new(
        instance_id: String,
        successes: u64,
        rollouts: u64,
    ) -> Result<Self, CurriculumError> {
        if rollouts == 0 || successes > rollouts {
            return Err(CurriculumError::InvalidCounts {
                successes,
                rollouts,
            });
        }
        Ok(PassRateRecord {
            instance_id,
            successes,
            rollouts,
            rate: successes as f64 / rollouts as f64,
        })
    }
}

/// Result of a tail-patch selection over pass-rate records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSlice {
    pub lower: f64,
    pub upper: f64,
    /// Instance ids with `lower <= rate <= upper`, sorted by id.
    pub selected: Vec<String>,
    /// Count of instances with `rate > upper`.
    pub excluded_easy: usize,
    /// Count of instances with `rate < lower`.
    pub excluded_hard: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CurriculumError {
    InvalidBounds { lower: f64, upper: f64 },
    InvalidCounts { successes: u64, rollouts: u64 },
}

impl fmt::Display for CurriculumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurriculumError::InvalidBounds { lower, upper } => {
                write!(f, "invalid curriculum bounds [{lower}, {upper}]")
            }
            CurriculumError::InvalidCounts {
                successes,
                rollouts,
            } => {
                write!(f, "invalid pass-rate counts: {successes}/{rollouts}")
            }
        }
    }
}

/// Partitions instances by pass rate against the closed interval
/// `[lower, upper]`. Both endpoints are members: with G=8 rollouts the
/// band boundaries 1/8 and 3/8 are exactly representable and included.
pub fn select(
    rates: &[PassRateRecord],
    lower: f64,
    upper: f64,
) -> Result<CurriculumSlice, CurriculumError> {
    if !(0.0..=1.0).contains(&lower) || !(0.0..=1.0).contains(&upper) || lower > upper {
        return Err(CurriculumError::InvalidBounds { lower, upper });
    }
    let mut selected = Vec::new();
    let mut excluded_easy = 0;
    let mut excluded_hard = 0;
    for record in rates {
        if record.rate < lower {
            excluded_hard += 1;
        } else if record.rate > upper {
            excluded_easy += 1;
        } else {
            selected.push(record.instance_id.clone());
        }
    }
    selected.sort_unstable();
    Ok(CurriculumSlice {
        lower,
        upper,
        selected,
        excluded_easy,
        excluded_hard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;

    fn rate(id: &str, successes: u64, rollouts: u64) -> PassRateRecord {
        PassRateRecord::new(id.to_string(), successes, rollouts).unwrap()
    }

    #[test]
    fn test_select_interior_rates() {
        let rates: Vec<_> = (0..5).map(|k| rate(&format!("i{k}"), k, 8)).collect();
        let slice = select(&rates, DEFAULT_LOWER, DEFAULT_UPPER).unwrap();
        assert_eq!(slice.selected, vec!["i1", "i2", "i3"]);
        assert_eq!(slice.excluded_hard, 1);
        assert_eq!(slice.excluded_easy, 1);
    }

    #[test]
    fn test_select_saturated() {
        let rates = vec![rate("a", 8, 8), rate("b", 8, 8)];
        let slice = select(&rates, DEFAULT_LOWER, DEFAULT_UPPER).unwrap();
        assert!(slice.selected.is_empty());
        assert_eq!(slice.excluded_easy, 2);
        assert_eq!(slice.excluded_hard, 0);
    }

    #[test]
    fn test_bounds_are_closed() {
        let rates = vec![rate("lo", 1, 8), rate("hi", 3, 8)];
        let slice = select(&rates, 0.125, 0.375).unwrap();
        assert_eq!(slice.selected.len(), 2);
    }

    #[test]
    fn test_partition_reconciles() {
        let rates: Vec<_> = (0..=8).map(|k| rate(&format!("i{k}"), k, 8)).collect();
        let slice = select(&rates, DEFAULT_LOWER, DEFAULT_UPPER).unwrap();
        assert_eq!(
            slice.selected.len() + slice.excluded_easy + slice.excluded_hard,
            rates.len()
        );
    }

    #[test]
    fn test_widening_never_shrinks() {
        let rates: Vec<_> = (0..=8).map(|k| rate(&format!("i{k}"), k, 8)).collect();
        let narrow = select(&rates, 0.2, 0.3).unwrap();
        let wide = select(&rates, 0.1, 0.5).unwrap();
        for id in &narrow.selected {
            assert!(wide.selected.contains(id));
        }
    }

    #[test]
    fn test_idempotence() {
        let rates: Vec<_> = (0..=8).map(|k| rate(&format!("i{k}"), k, 8)).collect();
        let first = select(&rates, DEFAULT_LOWER, DEFAULT_UPPER).unwrap();
        let surviving: Vec<_> = rates
            .iter()
            .filter(|r| first.selected.contains(&r.instance_id))
            .cloned()
            .collect();
        let second = select(&surviving, DEFAULT_LOWER, DEFAULT_UPPER).unwrap();
        assert_eq!(second.selected, first.selected);
        assert_eq!(second.excluded_easy + second.excluded_hard, 0);
    }

    #[test]
    fn test_invalid_bounds() {
        assert!(select(&[], 0.5, 0.2).is_err());
        assert!(select(&[], -0.1, 0.5).is_err());
        assert!(select(&[], 0.1, 1.5).is_err());
    }

    #[test]
    fn test_invalid_counts() {
        assert!(PassRateRecord::new("x".to_string(), 9, 8).is_err());
        assert!(PassRateRecord::new("x".to_string(), 0, 0).is_err());
    }
}

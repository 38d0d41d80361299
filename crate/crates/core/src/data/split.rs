use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{DataError, ParticipantRecord};
use crate::rng::{stream, Purpose};

/// Record indices of the four splits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub pretrain: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn parts(&self) -> [&[usize]; 4] {
        [&self.pretrain, &self.train, &self.val, &self.test]
    }

    pub fn select(records: &[ParticipantRecord], idx: &[usize]) -> Vec<ParticipantRecord> {
        idx.iter().map(|&i| records[i].clone()).collect()
    }
}

/// Splits records into (pretrain, train, val, test), stratified on the label
/// of `task` (records without that label form their own stratum).
pub fn split_cohort(
    records: &[ParticipantRecord],
    fractions: [f64; 4],
    seed: u64,
    task: &str,
) -> Result<Splits, DataError> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(DataError::Config(alloc::format!(
            "fractions: must be non-negative and sum to 1 (got {total})"
        )));
    }
    let mut strata: BTreeMap<Option<u8>, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry(r.label(task)).or_default().push(i);
    }
    let mut rng = stream(seed, Purpose::Split);
    let mut out = Splits::default();
    for (_, mut idx) in strata {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let mut cum = 0.0;
        let mut start = 0;
        for (k, f) in fractions.iter().enumerate() {
            cum += f;
            let end = if k == 3 {
                idx.len()
            } else {
                libm::round(n * cum) as usize
            };
            let part = &idx[start..end.max(start)];
            match k {
                0 => out.pretrain.extend_from_slice(part),
                1 => out.train.extend_from_slice(part),
                2 => out.val.extend_from_slice(part),
                _ => out.test.extend_from_slice(part),
            }
            start = end.max(start);
        }
    }
    for part in [&mut out.pretrain, &mut out.train, &mut out.val, &mut out.test] {
        part.sort_unstable();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_cohort, CohortGenConfig, OrganSchema};

    #[test]
    fn fractions_must_sum_to_one() {
        assert!(split_cohort(&[], [0.5, 0.5, 0.5, 0.0], 0, "global").is_err());
    }

    #[test]
    fn everything_in_pretrain() {
        let cfg = CohortGenConfig {
            n_participants: 100,
            ..Default::default()
        };
        let c = generate_cohort(&cfg, &OrganSchema::desk()).unwrap();
        let s = split_cohort(&c.records, [1.0, 0.0, 0.0, 0.0], 3, "global").unwrap();
        assert_eq!(s.pretrain, (0..100).collect::<Vec<_>>());
        assert!(s.train.is_empty() && s.val.is_empty() && s.test.is_empty());
    }
}

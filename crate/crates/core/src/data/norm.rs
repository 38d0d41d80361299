use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{DataError, OrganSchema, ParticipantRecord};
use crate::math;

pub const STD_FLOOR: f64 = 1e-8;

/// Per-organ, per-feature mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

/// Statistics over the records where each organ is available.
pub fn compute_norm_stats(records: &[ParticipantRecord], schema: &OrganSchema) -> Result<NormStats, DataError> {
    let mut mean = Vec::with_capacity(schema.len());
    let mut std = Vec::with_capacity(schema.len());
    for (o, spec) in schema.organs().iter().enumerate() {
        let d = spec.feature_dim;
        let mut n = 0usize;
        let mut m = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        for r in records {
            let Some(Some(x)) = r.organs.get(o) else {
                continue;
            };
            n += 1;
            for j in 0..d {
                let delta = x[j] - m[j];
                m[j] += delta / n as f64;
                m2[j] += delta * (x[j] - m[j]);
            }
        }
        if n < 2 {
            return Err(DataError::Unobserved(spec.name.clone()));
        }
        std.push(m2.iter().map(|v| math::sqrt(v / n as f64).max(STD_FLOOR)).collect());
        mean.push(m);
    }
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn normalize(&self, record: &ParticipantRecord) -> ParticipantRecord {
        self.map(record, |x, m, s| (x - m) / s)
    }

    pub fn denormalize(&self, record: &ParticipantRecord) -> ParticipantRecord {
        self.map(record, |z, m, s| z * s + m)
    }

    pub fn normalize_all(&self, records: &[ParticipantRecord]) -> Vec<ParticipantRecord> {
        records.iter().map(|r| self.normalize(r)).collect()
    }

    fn map(&self, record: &ParticipantRecord, f: impl Fn(f64, f64, f64) -> f64) -> ParticipantRecord {
        let mut out = record.clone();
        for (o, slot) in out.organs.iter_mut().enumerate() {
            if let Some(x) = slot {
                for (j, v) in x.iter_mut().enumerate() {
                    *v = f(*v, self.mean[o][j], self.std[o][j]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OrganSpec;

    fn one_organ(values: &[f64]) -> (OrganSchema, Vec<ParticipantRecord>) {
        let schema = OrganSchema::new(vec![OrganSpec::new("X", 1, 1)]).unwrap();
        let recs = values
            .iter()
            .enumerate()
            .map(|(i, v)| ParticipantRecord::new(alloc::format!("{i}"), vec![Some(vec![*v])]))
            .collect();
        (schema, recs)
    }

    #[test]
    fn two_values() {
        let (s, r) = one_organ(&[0.0, 2.0]);
        let st = compute_norm_stats(&r, &s).unwrap();
        assert_eq!(st.mean[0][0], 1.0);
        assert_eq!(st.std[0][0], 1.0);
    }

    #[test]
    fn constant_feature_is_floored() {
        let (s, r) = one_organ(&[3.0, 3.0, 3.0]);
        let st = compute_norm_stats(&r, &s).unwrap();
        assert_eq!(st.std[0][0], STD_FLOOR);
    }

    #[test]
    fn unobserved_organ_is_an_error() {
        let (s, r) = one_organ(&[1.0]);
        assert_eq!(compute_norm_stats(&r, &s), Err(DataError::Unobserved("X".into())));
    }

    #[test]
    fn mean_and_one_sigma() {
        let (s, r) = one_organ(&[1.0, 5.0]);
        let st = compute_norm_stats(&r, &s).unwrap();
        let at = |x: f64| {
            st.normalize(&ParticipantRecord::new("q", vec![Some(vec![x])])).organs[0]
                .as_ref()
                .unwrap()[0]
        };
        assert_eq!(at(3.0), 0.0);
        assert_eq!(at(5.0), 1.0);
    }
}

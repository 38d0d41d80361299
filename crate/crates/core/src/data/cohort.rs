use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, OrganSchema, ParticipantRecord};
use crate::math;
use crate::rng::{keyed_stream, stream, Purpose};

/// A binary task: `label ~ Bernoulli(sigmoid(w·u + intercept))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub name: String,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub intercept: f64,
}

/// Linear-Gaussian latent factor cohort with a planted dominant organ.
///
/// Organ features are `x_o = A_o u + noise` with `u ~ N(0, I_F)`. Loadings
/// are random-sign with magnitude `signal_scale / sqrt(F)` times the organ's
/// `organ_signal` multiplier (default 1; 0 gives a pure-noise organ). The
/// dominant organ's loadings on factor 0 are multiplied by `dominance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortGenConfig {
    pub n_participants: usize,
    pub n_latent: usize,
    pub signal_scale: f64,
    pub organ_signal: BTreeMap<String, f64>,
    pub dominant_organ: Option<String>,
    pub dominance: f64,
    pub noise: f64,
    /// Availability rate per organ name; organs not listed are always present.
    pub coverage: BTreeMap<String, f64>,
    pub tasks: Vec<TaskDef>,
    pub seed: u64,
}

/// Per-organ availability rates of the reference cohort.
pub const REFERENCE_COVERAGE: [(&str, f64); 7] = [
    ("Brain", 0.77),
    ("Heart", 0.83),
    ("Adipose", 0.64),
    ("Liver", 0.64),
    ("Kidney", 0.84),
    ("Spleen", 0.66),
    ("Pancreas", 0.64),
];

impl Default for CohortGenConfig {
    fn default() -> Self {
        Self {
            n_participants: 4000,
            n_latent: 4,
            signal_scale: 0.2,
            organ_signal: BTreeMap::new(),
            dominant_organ: Some("Adipose".into()),
            dominance: 3.0,
            noise: 0.5,
            coverage: REFERENCE_COVERAGE.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
            tasks: vec![
                TaskDef {
                    name: "global".into(),
                    weights: vec![2.0, 0.0, 0.0, 0.0],
                    intercept: 0.0,
                },
                TaskDef {
                    name: "secondary".into(),
                    weights: vec![0.0, 1.5, 1.0, 0.0],
                    intercept: -0.5,
                },
            ],
            seed: 0,
        }
    }
}

impl CohortGenConfig {
    pub fn validate(&self, schema: &OrganSchema) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.n_latent == 0 {
            return bad("n_latent: must be positive".into());
        }
        for (field, v) in [
            ("signal_scale", self.signal_scale),
            ("dominance", self.dominance),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{field}: must be finite and non-negative"));
            }
        }
        for (name, c) in &self.coverage {
            if schema.index_of(name).is_none() {
                return bad(format!("coverage.{name}: unknown organ"));
            }
            if !(*c > 0.0 && *c <= 1.0) {
                return bad(format!("coverage.{name}: must lie in (0, 1]"));
            }
        }
        for (name, s) in &self.organ_signal {
            if schema.index_of(name).is_none() {
                return bad(format!("organ_signal.{name}: unknown organ"));
            }
            if !(s.is_finite() && *s >= 0.0) {
                return bad(format!("organ_signal.{name}: must be finite and non-negative"));
            }
        }
        if let Some(d) = &self.dominant_organ {
            if schema.index_of(d).is_none() {
                return bad(format!("dominant_organ: unknown organ {d}"));
            }
        }
        let mut names = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if !names.insert(t.name.as_str()) {
                return bad(format!("tasks[{i}].name: duplicate {}", t.name));
            }
            if t.weights.len() != self.n_latent {
                return bad(format!(
                    "tasks[{i}].weights: expected {} entries, got {}",
                    self.n_latent,
                    t.weights.len()
                ));
            }
        }
        Ok(())
    }

    fn coverage_of(&self, name: &str) -> f64 {
        self.coverage.get(name).copied().unwrap_or(1.0)
    }
}

/// Generated records plus the ground truth behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCohort {
    pub records: Vec<ParticipantRecord>,
    /// Per organ, the `D_o × F` loading matrix in row-major order.
    pub loadings: Vec<Vec<f64>>,
    /// Per participant, the latent vector `u`.
    pub latents: Vec<Vec<f64>>,
}

pub fn generate_cohort(cfg: &CohortGenConfig, schema: &OrganSchema) -> Result<GeneratedCohort, DataError> {
    cfg.validate(schema)?;
    let f = cfg.n_latent;
    let dominant = cfg.dominant_organ.as_deref().and_then(|d| schema.index_of(d));

    let mut rng = stream(cfg.seed, Purpose::Cohort);
    let scale = cfg.signal_scale / math::sqrt(f as f64);
    let loadings: Vec<Vec<f64>> = schema
        .organs()
        .iter()
        .enumerate()
        .map(|(o, spec)| {
            let s = scale * cfg.organ_signal.get(&spec.name).copied().unwrap_or(1.0);
            let mut a: Vec<f64> = (0..spec.feature_dim * f)
                .map(|_| if rng.random::<bool>() { s } else { -s })
                .collect();
            if Some(o) == dominant {
                for i in 0..spec.feature_dim {
                    a[i * f] *= cfg.dominance;
                }
            }
            a
        })
        .collect();
    let coverage: Vec<f64> = schema.names().map(|n| cfg.coverage_of(n)).collect();

    let mut records = Vec::with_capacity(cfg.n_participants);
    let mut latents = Vec::with_capacity(cfg.n_participants);
    for p in 0..cfg.n_participants {
        let mut rng = keyed_stream(cfg.seed, Purpose::Cohort, p as u64);
        let u: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        let avail = loop {
            let a: Vec<bool> = coverage.iter().map(|c| rng.random::<f64>() < *c).collect();
            if a.iter().any(|x| *x) {
                break a;
            }
        };
        let organs = schema
            .organs()
            .iter()
            .enumerate()
            .map(|(o, spec)| {
                let x: Vec<f64> = (0..spec.feature_dim)
                    .map(|i| {
                        let row = &loadings[o][i * f..(i + 1) * f];
                        let signal: f64 = row.iter().zip(&u).map(|(a, b)| a * b).sum();
                        signal + cfg.noise * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                avail[o].then_some(x)
            })
            .collect();
        let mut rec = ParticipantRecord::new(format!("P{p:06}"), organs);
        for t in &cfg.tasks {
            let z: f64 = t.weights.iter().zip(&u).map(|(w, x)| w * x).sum::<f64>() + t.intercept;
            let y = rng.random::<f64>() < math::sigmoid(z);
            rec.labels.insert(t.name.clone(), u8::from(y));
        }
        records.push(rec);
        latents.push(u);
    }
    Ok(GeneratedCohort {
        records,
        loadings,
        latents,
    })
}

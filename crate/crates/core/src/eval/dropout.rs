use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsRow;
use super::probe::{train_linear_probe, LinearProbe, ProbeConfig};
use super::EvalError;
use crate::data::{OrganSchema, OrganSet, ParticipantRecord};
use crate::model::{Encoder, ViewInput};
use crate::rng::{keyed_stream, stable_hash, Purpose};
use crate::tensor::ParamStore;

const MAX_REDRAWS: usize = 10_000;

/// Organs hidden from the encoder at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DropoutSpec {
    #[default]
    None,
    /// `k` organs drawn uniformly per participant from a stream keyed by the
    /// seed and the participant id. Draws that would hide every available
    /// organ are redrawn.
    RandomK {
        k: usize,
        seed: u64,
    },
    Specific {
        organs: OrganSet,
    },
}

impl DropoutSpec {
    pub fn validate(&self, n_organs: usize) -> Result<(), EvalError> {
        match *self {
            DropoutSpec::RandomK { k, .. } if k >= n_organs => {
                Err(EvalError::Config(format!("cannot drop {k} of {n_organs} organs")))
            }
            DropoutSpec::Specific { organs } if organs.iter().any(|o| o >= n_organs) => {
                Err(EvalError::Config(format!("organ set {organs:?} outside schema")))
            }
            _ => Ok(()),
        }
    }

    /// Available organs this spec hides for `record`.
    pub fn dropped(&self, record: &ParticipantRecord, n_organs: usize) -> Result<OrganSet, EvalError> {
        let avail = record.availability();
        match *self {
            DropoutSpec::None => Ok(OrganSet::EMPTY),
            DropoutSpec::Specific { organs } => {
                let hit = organs.intersection(avail);
                if hit == avail {
                    return Err(EvalError::Contract {
                        id: record.id.clone(),
                        msg: format!("dropping {organs:?} leaves no organ visible"),
                    });
                }
                Ok(hit)
            }
            DropoutSpec::RandomK { k, seed } => {
                if k == 0 {
                    return Ok(OrganSet::EMPTY);
                }
                let mut rng = keyed_stream(seed, Purpose::Dropout, stable_hash(record.id.as_bytes()));
                for _ in 0..MAX_REDRAWS {
                    let draw = OrganSet::from_indices(sample(&mut rng, n_organs, k));
                    let hit = draw.intersection(avail);
                    if hit != avail {
                        return Ok(hit);
                    }
                }
                Err(EvalError::Contract {
                    id: record.id.clone(),
                    msg: format!("no drop-{k} draw leaves an organ visible"),
                })
            }
        }
    }
}

/// CLS embeddings with `spec` applied; dropped organs take the mask branch.
pub fn embed_cohort(
    encoder: &Encoder,
    store: &ParamStore,
    records: &[ParticipantRecord],
    spec: &DropoutSpec,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let n_organs = encoder.schema().len();
    spec.validate(n_organs)?;
    let mut views = Vec::with_capacity(records.len());
    for r in records {
        let drop = spec.dropped(r, n_organs)?;
        views.push(ViewInput {
            record: r,
            visible: r.availability().difference(drop),
        });
    }
    Ok(encoder.embed(store, &views)?)
}

/// A test-time availability protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Every test participant with its natural availability.
    Standard,
    /// Complete-organ participants, nothing dropped.
    Full,
    /// Complete-organ participants, `k` organs dropped at random per
    /// dropout seed.
    DropK(usize),
    /// Like `DropK` but averaged over every `k`-subset instead of sampled.
    DropKExhaustive(usize),
    /// Complete-organ participants without one organ.
    Without(usize),
}

impl Protocol {
    pub fn label(&self, schema: &OrganSchema) -> String {
        match *self {
            Protocol::Standard => "standard".into(),
            Protocol::Full => "full".into(),
            Protocol::DropK(k) => format!("drop{k}"),
            Protocol::DropKExhaustive(k) => format!("drop{k}_exhaustive"),
            Protocol::Without(o) => format!("wo_{}", schema.organ(o).name),
        }
    }

    /// Inverse of [`Protocol::label`].
    pub fn parse(s: &str, schema: &OrganSchema) -> Result<Self, EvalError> {
        let bad = || EvalError::Config(format!("unknown protocol {s:?}"));
        Ok(match s {
            "standard" => Protocol::Standard,
            "full" => Protocol::Full,
            _ => {
                if let Some(name) = s.strip_prefix("wo_") {
                    Protocol::Without(schema.index_of(name).ok_or_else(bad)?)
                } else if let Some(rest) = s.strip_prefix("drop") {
                    match rest.strip_suffix("_exhaustive") {
                        Some(k) => Protocol::DropKExhaustive(k.parse().map_err(|_| bad())?),
                        None => Protocol::DropK(rest.parse().map_err(|_| bad())?),
                    }
                } else {
                    return Err(bad());
                }
            }
        })
    }

    pub fn validate(&self, n_organs: usize) -> Result<(), EvalError> {
        match *self {
            Protocol::DropK(k) | Protocol::DropKExhaustive(k) if k >= n_organs => {
                Err(EvalError::Config(format!("cannot drop {k} of {n_organs} organs")))
            }
            Protocol::Without(o) if o >= n_organs => Err(EvalError::Config(format!("organ index {o} outside schema"))),
            _ => Ok(()),
        }
    }

    /// The protocols of the standard robustness battery.
    pub fn battery(n_organs: usize) -> Vec<Protocol> {
        let mut v = vec![Protocol::Standard, Protocol::Full];
        v.extend((1..=3).filter(|k| *k < n_organs).map(Protocol::DropK));
        v.extend((0..n_organs).map(Protocol::Without));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutEvalConfig {
    pub probe_seeds: Vec<u64>,
    pub dropout_seeds: Vec<u64>,
    pub probe: ProbeConfig,
}

impl Default for DropoutEvalConfig {
    fn default() -> Self {
        Self {
            probe_seeds: (0..10).collect(),
            dropout_seeds: (0..5).collect(),
            probe: ProbeConfig::default(),
        }
    }
}

impl DropoutEvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.probe_seeds.is_empty() {
            return Err(EvalError::Config("probe_seeds is empty".into()));
        }
        self.probe.validate()
    }
}

/// Records carrying `task`, with their labels.
fn labelled<'a>(records: &'a [ParticipantRecord], task: &str) -> (Vec<&'a ParticipantRecord>, Vec<u8>) {
    records.iter().filter_map(|r| r.label(task).map(|y| (r, y))).unzip()
}

fn complete(records: &[&ParticipantRecord], n_organs: usize) -> Vec<ParticipantRecord> {
    records
        .iter()
        .filter(|r| r.n_available() == n_organs)
        .map(|r| (*r).clone())
        .collect()
}

/// One probe per probe seed, trained on natural-availability embeddings.
struct Probes {
    probes: Vec<(u64, LinearProbe)>,
}

impl Probes {
    fn train(
        encoder: &Encoder,
        store: &ParamStore,
        train: &[ParticipantRecord],
        task: &str,
        seeds: &[u64],
        cfg: &ProbeConfig,
    ) -> Result<Self, EvalError> {
        let (recs, ys) = labelled(train, task);
        let recs: Vec<ParticipantRecord> = recs.into_iter().cloned().collect();
        let xs = embed_cohort(encoder, store, &recs, &DropoutSpec::None)?;
        let probes = seeds
            .iter()
            .map(|&seed| {
                let cfg = ProbeConfig { seed, ..*cfg };
                train_linear_probe(&xs, &ys, &cfg).map(|p| (seed, p))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { probes })
    }
}

fn all_subsets(n: usize, k: usize) -> Vec<OrganSet> {
    (0u64..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| OrganSet::from_indices((0..n).filter(|i| m >> i & 1 == 1)))
        .collect()
}

/// `(AUROC, BalAcc)` per probe, averaged over the given embedding sets.
fn score_sets(probes: &Probes, sets: &[Vec<Vec<f64>>], ys: &[u8]) -> Result<Vec<(u64, f64, f64)>, EvalError> {
    probes
        .probes
        .iter()
        .map(|(seed, p)| {
            let (mut a, mut b) = (0.0, 0.0);
            for xs in sets {
                let (sa, sb) = p.evaluate(xs, ys)?;
                a += sa;
                b += sb;
            }
            let n = sets.len() as f64;
            Ok((*seed, a / n, b / n))
        })
        .collect()
}

/// Scores fixed `(seed, head)` pairs on `test` under each protocol. Rows are
/// ordered by protocol, head, then dropout seed.
#[allow(clippy::too_many_arguments)]
pub fn protocol_grid(
    encoder: &Encoder,
    store: &ParamStore,
    heads: &[(u64, LinearProbe)],
    test: &[ParticipantRecord],
    task: &str,
    protocols: &[Protocol],
    dropout_seeds: &[u64],
) -> Result<Vec<MetricsRow>, EvalError> {
    let schema = encoder.schema();
    let n_organs = schema.len();
    for p in protocols {
        p.validate(n_organs)?;
    }
    let probes = Probes { probes: heads.to_vec() };
    let (recs, ys) = labelled(test, task);
    let full: Vec<ParticipantRecord> = complete(&recs, n_organs);
    let full_ys: Vec<u8> = full.iter().map(|r| r.label(task).unwrap()).collect();
    let mut rows = Vec::new();
    for proto in protocols {
        let label = proto.label(schema);
        let mut push = |scores: Vec<(u64, f64, f64)>, dropout_seed: Option<u64>| {
            for (probe_seed, auroc, balacc) in scores {
                rows.push(MetricsRow {
                    task: task.to_string(),
                    protocol: label.clone(),
                    auroc,
                    balacc,
                    probe_seed,
                    dropout_seed,
                });
            }
        };
        match *proto {
            Protocol::Standard => {
                let owned: Vec<ParticipantRecord> = recs.iter().map(|r| (*r).clone()).collect();
                let xs = embed_cohort(encoder, store, &owned, &DropoutSpec::None)?;
                push(score_sets(&probes, &[xs], &ys)?, None);
            }
            Protocol::Full => {
                let xs = embed_cohort(encoder, store, &full, &DropoutSpec::None)?;
                push(score_sets(&probes, &[xs], &full_ys)?, None);
            }
            Protocol::Without(o) => {
                let spec = DropoutSpec::Specific {
                    organs: OrganSet::single(o),
                };
                let xs = embed_cohort(encoder, store, &full, &spec)?;
                push(score_sets(&probes, &[xs], &full_ys)?, None);
            }
            Protocol::DropK(k) => {
                for &seed in dropout_seeds {
                    let xs = embed_cohort(encoder, store, &full, &DropoutSpec::RandomK { k, seed })?;
                    let scores = score_sets(&probes, &[xs], &full_ys)?;
                    push(scores, Some(seed));
                }
            }
            Protocol::DropKExhaustive(k) => {
                let sets = all_subsets(n_organs, k)
                    .into_iter()
                    .map(|organs| embed_cohort(encoder, store, &full, &DropoutSpec::Specific { organs }))
                    .collect::<Result<Vec<_>, _>>()?;
                push(score_sets(&probes, &sets, &full_ys)?, None);
            }
        }
    }
    // Within a protocol, order by head seed before dropout seed.
    rows.sort_by_key(|r| r.probe_seed);
    let order: Vec<String> = protocols.iter().map(|p| p.label(schema)).collect();
    rows.sort_by_key(|r| order.iter().position(|l| *l == r.protocol));
    Ok(rows)
}

/// Linear-probe robustness grid over tasks × protocols × probe seeds ×
/// dropout seeds. Probes are trained once per (task, probe seed) on
/// natural-availability embeddings of `train`.
pub fn organ_dropout_eval(
    encoder: &Encoder,
    store: &ParamStore,
    train: &[ParticipantRecord],
    test: &[ParticipantRecord],
    tasks: &[String],
    protocols: &[Protocol],
    cfg: &DropoutEvalConfig,
) -> Result<Vec<MetricsRow>, EvalError> {
    cfg.validate()?;
    for p in protocols {
        p.validate(encoder.schema().len())?;
    }
    let mut rows = Vec::new();
    for task in tasks {
        let probes = Probes::train(encoder, store, train, task, &cfg.probe_seeds, &cfg.probe)?;
        rows.extend(protocol_grid(
            encoder,
            store,
            &probes.probes,
            test,
            task,
            protocols,
            &cfg.dropout_seeds,
        )?);
    }
    Ok(rows)
}

/// Mean and sample standard deviation of one (task, protocol) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub task: String,
    pub protocol: String,
    pub n: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub balacc_mean: f64,
    pub balacc_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, crate::math::sqrt(var))
}

/// Groups rows by (task, protocol) in order of first appearance.
pub fn summarize(rows: &[MetricsRow]) -> Vec<CellSummary> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        let k = (r.task.as_str(), r.protocol.as_str());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(task, protocol)| {
            let cell: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.task == task && r.protocol == protocol)
                .collect();
            let a: Vec<f64> = cell.iter().map(|r| r.auroc).collect();
            let b: Vec<f64> = cell.iter().map(|r| r.balacc).collect();
            let (auroc_mean, auroc_std) = mean_std(&a);
            let (balacc_mean, balacc_std) = mean_std(&b);
            CellSummary {
                task: task.to_string(),
                protocol: protocol.to_string(),
                n: cell.len(),
                auroc_mean,
                auroc_std,
                balacc_mean,
                balacc_std,
            }
        })
        .collect()
}

/// Lower-triangular `O × O` AUROC matrix on complete-organ participants:
/// cell `(i, j)`, `i ≥ j`, has organs `i` and `j` removed. Entries above the
/// diagonal are `None`.
pub fn pairwise_dropout_heatmap(
    encoder: &Encoder,
    store: &ParamStore,
    train: &[ParticipantRecord],
    test: &[ParticipantRecord],
    task: &str,
    cfg: &DropoutEvalConfig,
) -> Result<Vec<Vec<Option<f64>>>, EvalError> {
    cfg.validate()?;
    let n_organs = encoder.schema().len();
    if n_organs < 3 {
        return Err(EvalError::Config("pairwise removal needs at least 3 organs".into()));
    }
    let probes = Probes::train(encoder, store, train, task, &cfg.probe_seeds, &cfg.probe)?;
    let (recs, _) = labelled(test, task);
    let full = complete(&recs, n_organs);
    if full.is_empty() {
        return Err(EvalError::Config("no complete-organ participants".into()));
    }
    let ys: Vec<u8> = full.iter().map(|r| r.label(task).unwrap()).collect();
    let mut m = vec![vec![None; n_organs]; n_organs];
    for i in 0..n_organs {
        for j in 0..=i {
            let organs = OrganSet::from_indices([i, j]);
            let xs = embed_cohort(encoder, store, &full, &DropoutSpec::Specific { organs })?;
            let scores = score_sets(&probes, &[xs], &ys)?;
            let mean = scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64;
            m[i][j] = Some(mean);
        }
    }
    Ok(m)
}

/// `100 · (AUROC_full − AUROC_without_o)` per organ and task, averaged over
/// probe seeds. For organ `o` the comparison uses the test participants that
/// have `o` and at least one other organ. The entry is `None` when no such
/// participant exists or they carry a single class.
pub fn leave_one_out_importance(
    encoder: &Encoder,
    store: &ParamStore,
    train: &[ParticipantRecord],
    test: &[ParticipantRecord],
    tasks: &[String],
    cfg: &DropoutEvalConfig,
) -> Result<Vec<Vec<Option<f64>>>, EvalError> {
    cfg.validate()?;
    let n_organs = encoder.schema().len();
    let mut out = vec![vec![None; tasks.len()]; n_organs];
    for (t, task) in tasks.iter().enumerate() {
        let probes = Probes::train(encoder, store, train, task, &cfg.probe_seeds, &cfg.probe)?;
        let (recs, _) = labelled(test, task);
        for (o, row) in out.iter_mut().enumerate() {
            let subset: Vec<ParticipantRecord> = recs
                .iter()
                .filter(|r| r.is_available(o) && r.n_available() >= 2)
                .map(|r| (*r).clone())
                .collect();
            let ys: Vec<u8> = subset.iter().map(|r| r.label(task).unwrap()).collect();
            if !has_both(&ys) {
                continue;
            }
            let base = embed_cohort(encoder, store, &subset, &DropoutSpec::None)?;
            let spec = DropoutSpec::Specific {
                organs: OrganSet::single(o),
            };
            let dropped = embed_cohort(encoder, store, &subset, &spec)?;
            let full_scores = score_sets(&probes, &[base], &ys)?;
            let drop_scores = score_sets(&probes, &[dropped], &ys)?;
            let delta: f64 = full_scores
                .iter()
                .zip(&drop_scores)
                .map(|(f, d)| 100.0 * (f.1 - d.1))
                .sum::<f64>()
                / full_scores.len() as f64;
            row[t] = Some(delta);
        }
    }
    Ok(out)
}

fn has_both(ys: &[u8]) -> bool {
    ys.iter().any(|y| *y != 0) && ys.contains(&0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_enumerate_binomial() {
        assert_eq!(all_subsets(7, 1).len(), 7);
        assert_eq!(all_subsets(7, 2).len(), 21);
        assert_eq!(all_subsets(7, 3).len(), 35);
        assert_eq!(all_subsets(7, 0), vec![OrganSet::EMPTY]);
    }

    #[test]
    fn protocol_labels_round_trip() {
        let schema = OrganSchema::desk();
        for p in Protocol::battery(7)
            .into_iter()
            .chain([Protocol::DropK(0), Protocol::DropKExhaustive(2)])
        {
            assert_eq!(Protocol::parse(&p.label(&schema), &schema).unwrap(), p);
        }
        assert!(Protocol::parse("drop", &schema).is_err());
        assert!(Protocol::parse("wo_Lung", &schema).is_err());
        assert!(Protocol::DropK(7).validate(7).is_err());
    }

    #[test]
    fn summary_statistics() {
        let row = |a: f64| MetricsRow {
            task: "t".into(),
            protocol: "full".into(),
            auroc: a,
            balacc: 0.5,
            probe_seed: 0,
            dropout_seed: None,
        };
        let s = summarize(&[row(0.6), row(0.8)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].auroc_mean - 0.7).abs() < 1e-15);
        assert!((s[0].auroc_std - 0.1414213562373095).abs() < 1e-12);
        assert_eq!(s[0].balacc_std, 0.0);
    }
}

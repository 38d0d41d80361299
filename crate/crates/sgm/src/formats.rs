//! Schema, cohort JSONL, normalization statistics and split files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use sgm_core::data::{NormStats, OrganSchema, ParticipantRecord, RecordWarning, Splits};

use crate::error::{Error, Result};
use crate::fsio::{read_json, read_to_string, write_atomic, write_json};

pub fn read_schema(path: &Path) -> Result<OrganSchema> {
    read_json(path)
}

pub fn write_schema(path: &Path, schema: &OrganSchema) -> Result<()> {
    write_json(path, schema)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LineIn {
    id: String,
    organs: BTreeMap<String, Option<Vec<Option<f64>>>>,
    #[serde(default)]
    labels: BTreeMap<String, u8>,
}

struct OrgansOut<'a> {
    schema: &'a OrganSchema,
    organs: &'a [Option<Vec<f64>>],
}

impl Serialize for OrgansOut<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.schema.len()))?;
        for (spec, v) in self.schema.organs().iter().zip(self.organs) {
            m.serialize_entry(&spec.name, v)?;
        }
        m.end()
    }
}

#[derive(Serialize)]
struct LineOut<'a> {
    id: &'a str,
    organs: OrgansOut<'a>,
    labels: &'a BTreeMap<String, u8>,
}

/// Serializes records one per line, organs in schema order.
pub fn cohort_to_jsonl(records: &[ParticipantRecord], schema: &OrganSchema) -> String {
    let mut out = String::new();
    for r in records {
        let line = LineOut {
            id: &r.id,
            organs: OrgansOut {
                schema,
                organs: &r.organs,
            },
            labels: &r.labels,
        };
        out.push_str(&serde_json::to_string(&line).expect("finite values"));
        out.push('\n');
    }
    out
}

pub fn write_cohort(path: &Path, records: &[ParticipantRecord], schema: &OrganSchema) -> Result<()> {
    write_atomic(path, cohort_to_jsonl(records, schema).as_bytes())
}

/// Parses cohort JSONL. Organs with missing (`null`) entries or the wrong
/// width are marked absent and reported as warnings; organs not mentioned
/// on a line are absent.
pub fn parse_cohort(
    path: &Path,
    text: &str,
    schema: &OrganSchema,
) -> Result<(Vec<ParticipantRecord>, Vec<RecordWarning>)> {
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            at: format!("line {lineno}"),
            msg,
        };
        let raw: LineIn = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if let Some(prev) = seen.insert(raw.id.clone(), lineno) {
            return Err(err(format!("duplicate id {} (first on line {prev})", raw.id)));
        }
        let mut organs = vec![None; schema.len()];
        for (name, values) in raw.organs {
            let o = schema
                .index_of(&name)
                .ok_or_else(|| err(format!("unknown organ {name}")))?;
            organs[o] = values.map(|v| v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect());
        }
        let mut rec = ParticipantRecord {
            id: raw.id,
            organs,
            labels: raw.labels,
        };
        let w = rec.sanitize(schema);
        for w in &w {
            log::warn!(
                "{}: line {lineno}: organ {} dropped: {}",
                path.display(),
                w.organ,
                w.reason
            );
        }
        warnings.extend(w);
        rec.validate(schema).map_err(|e| err(e.to_string()))?;
        records.push(rec);
    }
    Ok((records, warnings))
}

pub fn read_cohort(path: &Path, schema: &OrganSchema) -> Result<(Vec<ParticipantRecord>, Vec<RecordWarning>)> {
    parse_cohort(path, &read_to_string(path)?, schema)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OrganNorm {
    mean: Vec<f64>,
    std: Vec<f64>,
}

pub fn write_norm_stats(path: &Path, stats: &NormStats, schema: &OrganSchema) -> Result<()> {
    let map: BTreeMap<&str, OrganNorm> = schema
        .names()
        .enumerate()
        .map(|(o, n)| {
            (
                n,
                OrganNorm {
                    mean: stats.mean[o].clone(),
                    std: stats.std[o].clone(),
                },
            )
        })
        .collect();
    write_json(path, &map)
}

pub fn read_norm_stats(path: &Path, schema: &OrganSchema) -> Result<NormStats> {
    let mut map: BTreeMap<String, OrganNorm> = read_json(path)?;
    let bad = |at: &str, msg: String| Error::Parse {
        path: path.to_path_buf(),
        at: at.into(),
        msg,
    };
    let mut stats = NormStats {
        mean: Vec::new(),
        std: Vec::new(),
    };
    for spec in schema.organs() {
        let n = map
            .remove(&spec.name)
            .ok_or_else(|| bad(&spec.name, "missing organ".into()))?;
        if n.mean.len() != spec.feature_dim || n.std.len() != spec.feature_dim {
            return Err(bad(
                &spec.name,
                format!("expected {} values per field", spec.feature_dim),
            ));
        }
        if n.std.iter().any(|s| !(*s > 0.0)) {
            return Err(bad(&spec.name, "std must be positive".into()));
        }
        stats.mean.push(n.mean);
        stats.std.push(n.std);
    }
    if let Some(extra) = map.keys().next() {
        return Err(bad(extra, "organ not in schema".into()));
    }
    Ok(stats)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitIds {
    pretrain: Vec<String>,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

pub fn write_splits(path: &Path, splits: &Splits, records: &[ParticipantRecord]) -> Result<()> {
    let ids = |idx: &[usize]| idx.iter().map(|&i| records[i].id.clone()).collect();
    write_json(
        path,
        &SplitIds {
            pretrain: ids(&splits.pretrain),
            train: ids(&splits.train),
            val: ids(&splits.val),
            test: ids(&splits.test),
        },
    )
}

pub fn read_splits(path: &Path, records: &[ParticipantRecord]) -> Result<Splits> {
    let ids: SplitIds = read_json(path)?;
    let index: HashMap<&str, usize> = records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let resolve = |part: &str, v: &[String]| -> Result<Vec<usize>> {
        v.iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    at: part.into(),
                    msg: format!("unknown id {id}"),
                })
            })
            .collect()
    };
    Ok(Splits {
        pretrain: resolve("pretrain", &ids.pretrain)?,
        train: resolve("train", &ids.train)?,
        val: resolve("val", &ids.val)?,
        test: resolve("test", &ids.test)?,
    })
}

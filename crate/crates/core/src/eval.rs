//! Euclidean ranking, average precision, 4 x recall@4, and manifest-driven
//! evaluation reports.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CknError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Target,
    Both,
}

impl Role {
    pub fn is_query(self) -> bool {
        matches!(self, Role::Query | Role::Both)
    }

    pub fn is_target(self) -> bool {
        matches!(self, Role::Target | Role::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Target => "target",
            Role::Both => "both",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "query" => Ok(Role::Query),
            "target" => Ok(Role::Target),
            "both" => Ok(Role::Both),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// One manifest line: `path<TAB>label<TAB>role`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub role: Role,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.path.display(), self.label, self.role.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let file = std::fs::File::open(path).map_err(|e| CknError::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CknError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(CknError::format(
                    path,
                    format!("line {}: expected `path<TAB>label<TAB>role`", n + 1),
                ));
            }
            let role = fields[2]
                .trim()
                .parse()
                .map_err(|e: String| CknError::format(path, format!("line {}: {e}", n + 1)))?;
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                label: fields[1].to_string(),
                role,
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, entries })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn squared_distance(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// Database ids sorted by ascending Euclidean distance to `query`, ties by id.
pub fn rank(query: ArrayView1<f32>, database: ArrayView2<f32>, ids: &[usize]) -> Result<Vec<usize>> {
    if database.ncols() != query.len() {
        return Err(CknError::DimensionMismatch {
            expected: query.len(),
            actual: database.ncols(),
        });
    }
    if ids.len() != database.nrows() {
        return Err(CknError::DimensionMismatch {
            expected: database.nrows(),
            actual: ids.len(),
        });
    }
    let mut scored: Vec<(f64, usize)> = database
        .rows()
        .into_iter()
        .zip(ids)
        .map(|(row, &id)| (squared_distance(query, row), id))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Average precision of a ranked relevance list; `None` when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|r| **r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, _) in relevant.iter().enumerate().filter(|(_, r)| **r) {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
    }
    Some(sum / total as f64)
}

/// Mean number of same-group items among the four nearest neighbours, the
/// query itself included. Every group must have exactly four members.
pub fn recall4(vectors: ArrayView2<f32>, groups: &[String]) -> Result<f64> {
    if groups.len() != vectors.nrows() {
        return Err(CknError::DimensionMismatch {
            expected: vectors.nrows(),
            actual: groups.len(),
        });
    }
    let mut sizes = std::collections::HashMap::new();
    for g in groups {
        *sizes.entry(g.as_str()).or_insert(0usize) += 1;
    }
    if let Some((g, n)) = sizes.iter().find(|(_, n)| **n != 4) {
        return Err(CknError::InvalidArgument(format!(
            "group `{g}` has {n} members, expected 4"
        )));
    }
    let ids: Vec<usize> = (0..groups.len()).collect();
    let hits: Vec<usize> = (0..groups.len())
        .into_par_iter()
        .map(|q| -> Result<usize> {
            let ranked = rank(vectors.row(q), vectors, &ids)?;
            Ok(ranked.iter().take(4).filter(|&&i| groups[i] == groups[q]).count())
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / groups.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub id: String,
    pub ap: f64,
    pub num_relevant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub map: f64,
    pub skipped: usize,
    pub protocol: String,
    pub self_match: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub queries: Vec<QueryResult>,
    pub summary: EvalSummary,
}

impl EvalReport {
    pub fn map(&self) -> f64 {
        self.summary.map
    }

    /// JSON lines: one object per query, then the summary object.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for q in &self.queries {
            writeln!(out, "{}", serde_json::to_string(q).expect("serializable"))?;
        }
        writeln!(out, "{}", serde_json::to_string(&self.summary).expect("serializable"))
    }
}

/// mAP over manifest queries; a query's own row is excluded from its ranking
/// and relevance is label equality.
pub fn mean_average_precision(
    vectors: ArrayView2<f32>,
    entries: &[ManifestEntry],
    protocol: &str,
) -> Result<EvalReport> {
    if entries.len() != vectors.nrows() {
        return Err(CknError::Manifest(format!(
            "{} manifest entries but {} vectors",
            entries.len(),
            vectors.nrows()
        )));
    }
    let queries: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].role.is_query()).collect();
    let results: Vec<Option<QueryResult>> = queries
        .par_iter()
        .map(|&q| -> Result<Option<QueryResult>> {
            let ids: Vec<usize> = (0..entries.len())
                .filter(|&i| i != q && entries[i].role.is_target())
                .collect();
            let db = vectors.select(ndarray::Axis(0), &ids);
            let ranked = rank(vectors.row(q), db.view(), &ids)?;
            let flags: Vec<bool> = ranked.iter().map(|&i| entries[i].label == entries[q].label).collect();
            Ok(average_precision(&flags).map(|ap| QueryResult {
                id: entries[q].path.display().to_string(),
                ap,
                num_relevant: flags.iter().filter(|f| **f).count(),
            }))
        })
        .collect::<Result<_>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let queries: Vec<QueryResult> = results.into_iter().flatten().collect();
    let map = if queries.is_empty() {
        0.0
    } else {
        queries.iter().map(|q| q.ap).sum::<f64>() / queries.len() as f64
    };
    Ok(EvalReport {
        queries,
        summary: EvalSummary {
            map,
            skipped,
            protocol: protocol.to_string(),
            self_match: "excluded".into(),
        },
    })
}

//! Analytics over learned routes: similarity search, score dispersion,
//! policy evolution and class separation.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::reset::RouteRecord;

pub const SEPARATION_PAIRS: usize = 10_000;
pub const SEPARATION_SEED: u64 = 0x5eed;
const SIMPLEX_TOL: f64 = 1e-6;

/// One flattened route vector per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteMatrix {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    /// Option count of every decision, in route order.
    pub slices: Vec<usize>,
    pub width: usize,
    data: Vec<f64>,
}

impl RouteMatrix {
    pub fn from_records(records: &[RouteRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Analysis("no route records".into()))?;
        let slices: Vec<usize> = first.route.iter().map(|s| s.weights.len()).collect();
        let width = slices.iter().sum();
        let mut data = Vec::with_capacity(records.len() * width);
        for r in records {
            let shape: Vec<usize> = r.route.iter().map(|s| s.weights.len()).collect();
            if shape != slices {
                return Err(Error::Analysis(format!(
                    "sample {} has route layout {shape:?}, expected {slices:?}",
                    r.sample_id
                )));
            }
            for s in &r.route {
                let total: f64 = s.weights.iter().sum();
                if (total - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::Analysis(format!(
                        "sample {} stage {} iteration {} weights sum to {total}",
                        r.sample_id, s.stage, s.iteration
                    )));
                }
                data.extend_from_slice(&s.weights);
            }
        }
        Ok(RouteMatrix {
            ids: records.iter().map(|r| r.sample_id).collect(),
            labels: records.iter().map(|r| r.label).collect(),
            slices,
            width,
            data,
        })
    }

    /// Rows without simplex validation, for synthetic analyses.
    pub fn from_rows(ids: Vec<u64>, labels: Vec<usize>, rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.len() != ids.len() || rows.len() != labels.len() || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Analysis("ragged route rows".into()));
        }
        Ok(RouteMatrix {
            ids,
            labels,
            slices: vec![width],
            width,
            data: rows.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

pub fn manhattan(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// The `top` nearest routes to `query` by L1 distance, excluding the query;
/// ties resolve to the smaller sample id.
pub fn manhattan_neighbors(m: &RouteMatrix, query: u64, top: usize) -> Result<Vec<(u64, f64)>> {
    let q = m
        .ids
        .iter()
        .position(|&id| id == query)
        .ok_or_else(|| Error::Analysis(format!("sample {query} is not in the route matrix")))?;
    let mut d: Vec<(u64, f64)> = (0..m.len())
        .filter(|&i| i != q)
        .map(|i| (m.ids[i], manhattan(m.row(q), m.row(i))))
        .collect();
    let by = |a: &(u64, f64), b: &(u64, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if top < d.len() {
        d.select_nth_unstable_by(top, by);
        d.truncate(top);
    }
    d.sort_by(by);
    Ok(d)
}

/// Population standard deviation of every route component (Welford).
pub fn score_std(m: &RouteMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.width];
    let mut m2 = vec![0.0; m.width];
    for i in 0..m.len() {
        let n = (i + 1) as f64;
        for (j, &x) in m.row(i).iter().enumerate() {
            let d = x - mean[j];
            mean[j] += d / n;
            m2[j] += d * (x - mean[j]);
        }
    }
    let n = m.len().max(1) as f64;
    m2.into_iter().map(|v| (v / n).max(0.0).sqrt()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PolicyRow {
    pub step: u64,
    pub stage: usize,
    pub iteration: usize,
    pub unit: usize,
    pub mean_score: f64,
}

/// Mean score of every `(stage, iteration, unit)` over `records`.
pub fn policy_means(records: &[RouteRecord], step: u64) -> Vec<PolicyRow> {
    let Some(first) = records.first() else {
        return Vec::new();
    };
    let n = records.len() as f64;
    first
        .route
        .iter()
        .enumerate()
        .flat_map(|(d, s)| {
            (0..s.weights.len()).map(move |unit| PolicyRow {
                step,
                stage: s.stage,
                iteration: s.iteration,
                unit,
                mean_score: records.iter().map(|r| r.route[d].weights[unit]).sum::<f64>() / n,
            })
        })
        .collect()
}

pub fn write_policy_csv(rows: &[PolicyRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "step,stage,iteration,unit,mean_score")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.step, r.stage, r.iteration, r.unit, r.mean_score)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Separation {
    pub intra_class_mean_l1: f64,
    pub inter_class_mean_l1: f64,
    pub ratio: f64,
}

/// Mean L1 distance of seeded random same-class pairs over that of
/// different-class pairs.
pub fn class_route_separation(m: &RouteMatrix, pairs: usize, seed: u64) -> Result<Separation> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in m.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Analysis("class separation needs at least two classes".into()));
    }
    let intra_rows: Vec<usize> = (0..m.len()).filter(|&i| by_class[&m.labels[i]].len() >= 2).collect();
    if intra_rows.is_empty() {
        return Err(Error::Analysis("class separation needs a class with two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut intra = 0.0;
    for _ in 0..pairs {
        let i = *intra_rows.choose(&mut rng).unwrap();
        let same = &by_class[&m.labels[i]];
        let j = loop {
            let j = same[rng.gen_range(0..same.len())];
            if j != i {
                break j;
            }
        };
        intra += manhattan(m.row(i), m.row(j));
    }
    let mut inter = 0.0;
    for _ in 0..pairs {
        let i = rng.gen_range(0..m.len());
        let j = loop {
            let j = rng.gen_range(0..m.len());
            if m.labels[j] != m.labels[i] {
                break j;
            }
        };
        inter += manhattan(m.row(i), m.row(j));
    }
    let (intra, inter) = (intra / pairs as f64, inter / pairs as f64);
    if inter == 0.0 {
        return Err(Error::Analysis("all inter-class routes coincide; ratio undefined".into()));
    }
    Ok(Separation {
        intra_class_mean_l1: intra,
        inter_class_mean_l1: inter,
        ratio: intra / inter,
    })
}

/// One JSON object per sample per line.
pub fn write_records_jsonl(records: &[RouteRecord], out: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records_jsonl(input: impl BufRead) -> Result<Vec<RouteRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Analysis(format!("route file line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reset::RouteStep;

    fn matrix(rows: &[Vec<f64>], labels: &[usize]) -> RouteMatrix {
        RouteMatrix::from_rows((0..rows.len() as u64).collect(), labels.to_vec(), rows).unwrap()
    }

    #[test]
    fn neighbor_examples() {
        assert!((manhattan(&[0.2, 0.8], &[0.5, 0.5]) - 0.6).abs() < 1e-12);
        let m = matrix(&[vec![0.2, 0.8], vec![0.5, 0.5], vec![0.2, 0.8], vec![0.5, 0.5]], &[0; 4]);
        let n = manhattan_neighbors(&m, 0, 3).unwrap();
        assert_eq!(n[0], (2, 0.0));
        assert_eq!(n[1].0, 1);
        assert_eq!(n[2].0, 3);
        assert!(manhattan_neighbors(&m, 42, 1).is_err());
    }

    #[test]
    fn score_std_examples() {
        let same = matrix(&vec![vec![0.3, 0.7]; 5], &[0; 5]);
        assert!(score_std(&same).iter().all(|&s| s.abs() < 1e-12));
        let alt: Vec<Vec<f64>> = (0..6).map(|i| vec![(i % 2) as f64, 1.0 - (i % 2) as f64]).collect();
        let s = score_std(&matrix(&alt, &[0; 6]));
        assert!((s[0] - 0.5).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn separation_examples() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let s = class_route_separation(&matrix(&rows, &[0, 0, 1, 1]), 500, 1).unwrap();
        assert_eq!(s.ratio, 0.0);
        assert!(class_route_separation(&matrix(&rows, &[0; 4]), 10, 1).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_policy_means() {
        let recs: Vec<RouteRecord> = (0..3)
            .map(|i| RouteRecord {
                sample_id: i,
                label: i as usize % 2,
                route: (0..2)
                    .map(|j| RouteStep {
                        stage: 0,
                        iteration: j,
                        weights: vec![0.5, 0.5],
                        selected: None,
                        skipped: false,
                        forced: false,
                    })
                    .collect(),
            })
            .collect();
        let mut buf = Vec::new();
        write_records_jsonl(&recs, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 3);
        assert_eq!(read_records_jsonl(&buf[..]).unwrap(), recs);
        let rows = policy_means(&recs, 7);
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.mean_score == 0.5 && r.step == 7));
    }
}

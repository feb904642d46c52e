use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ColumnKind, Desensitization, Normalization, PartyDataset, SandboxError, Schema};

/// Per-column normalization and desensitization plus the id hashing key.
#[derive(Clone, Debug, Default)]
pub struct SandboxPolicy {
    pub id_hash_key: Vec<u8>,
    pub normalization: BTreeMap<String, Normalization>,
    pub desensitization: BTreeMap<String, Desensitization>,
}

impl SandboxPolicy {
    /// Takes per-column settings from the schema.
    pub fn from_schema(schema: &Schema, id_hash_key: Vec<u8>) -> Self {
        let mut p = SandboxPolicy { id_hash_key, ..Default::default() };
        for c in schema.numeric_columns() {
            p.normalization.insert(c.name.clone(), c.normalize);
            p.desensitization.insert(c.name.clone(), c.desensitize);
        }
        p
    }
}

/// Fitted transform for one column: optional bucketing, then `(x - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub name: String,
    pub bucket_edges: Option<Vec<f64>>,
    pub shift: f64,
    pub scale: f64,
}

impl ColumnTransform {
    fn apply(&self, x: f64) -> f64 {
        let v = match &self.bucket_edges {
            Some(edges) => edges.iter().filter(|&&e| x >= e).count() as f64,
            None => x,
        };
        (v - self.shift) / self.scale
    }
}

/// Transform fitted on one dataset, reusable on later data (e.g. an apply job).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<ColumnTransform>,
}

/// Interior quantile edges splitting `values` into `k` near-equal groups.
fn quantile_edges(values: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..k).map(|j| sorted[(j * n / k).min(n - 1)]).collect();
    edges.dedup();
    edges
}

impl Standardizer {
    pub fn fit(ds: &PartyDataset, policy: &SandboxPolicy) -> Result<Self, SandboxError> {
        let mut columns = Vec::new();
        for (name, values) in ds.columns() {
            let norm = *policy.normalization.get(name).ok_or_else(|| SandboxError::PolicyMissing(name.clone()))?;
            let des = *policy.desensitization.get(name).ok_or_else(|| SandboxError::PolicyMissing(name.clone()))?;
            let bucket_edges = match des {
                Desensitization::Drop => continue,
                Desensitization::Keep => None,
                Desensitization::Bucketize(k) if values.is_empty() => Some(Vec::with_capacity(k)),
                Desensitization::Bucketize(k) => Some(quantile_edges(values, k)),
            };
            let mut t = ColumnTransform { name: name.clone(), bucket_edges, shift: 0.0, scale: 1.0 };
            let staged: Vec<f64> = values.iter().map(|&x| t.apply(x)).collect();
            match norm {
                Normalization::None => {}
                Normalization::Zscore => {
                    let n = staged.len();
                    if n < 2 {
                        return Err(SandboxError::DegenerateColumn(name.clone()));
                    }
                    let mean = staged.iter().sum::<f64>() / n as f64;
                    let var = staged.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                    if !(var > 0.0) {
                        return Err(SandboxError::DegenerateColumn(name.clone()));
                    }
                    t.shift = mean;
                    t.scale = var.sqrt();
                }
                Normalization::Minmax => {
                    let lo = staged.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = staged.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if !(hi > lo) {
                        return Err(SandboxError::DegenerateColumn(name.clone()));
                    }
                    t.shift = lo;
                    t.scale = hi - lo;
                }
            }
            columns.push(t);
        }
        Ok(Self { columns })
    }

    /// Applies the fitted transform; columns not in the transform are dropped.
    pub fn apply(&self, ds: &PartyDataset) -> Result<PartyDataset, SandboxError> {
        let mut out = Vec::with_capacity(self.columns.len());
        for t in &self.columns {
            let src = ds.column(&t.name).ok_or_else(|| SandboxError::Schema(format!("missing column {:?}", t.name)))?;
            out.push((t.name.clone(), src.iter().map(|&x| t.apply(x)).collect()));
        }
        let kept: std::collections::BTreeSet<&str> = self.columns.iter().map(|t| t.name.as_str()).collect();
        let mut schema = Schema {
            columns: ds
                .schema()
                .columns
                .iter()
                .filter(|c| c.kind != ColumnKind::Numeric || kept.contains(c.name.as_str()))
                .cloned()
                .collect(),
        };
        for c in schema.columns.iter_mut() {
            if let Some(t) = self.columns.iter().find(|t| t.name == c.name) {
                // the transform is monotone increasing, so bounds map to bounds
                if let (Some(lo), Some(hi)) = (c.min, c.max) {
                    c.min = Some(t.apply(lo));
                    c.max = Some(t.apply(hi));
                }
            }
        }
        Ok(ds.with_columns(out, schema))
    }
}

/// Fits and applies in one step.
pub fn standardize(ds: &PartyDataset, policy: &SandboxPolicy) -> Result<(PartyDataset, Standardizer), SandboxError> {
    let s = Standardizer::fit(ds, policy)?;
    let out = s.apply(ds)?;
    Ok((out, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn one_col(values: Vec<f64>) -> PartyDataset {
        let ids = (0..values.len()).map(|i| format!("e{i}")).collect();
        PartyDataset::from_parts("p", ids, vec![("x".into(), values)], None).unwrap()
    }

    fn policy(norm: Normalization, des: Desensitization) -> SandboxPolicy {
        let mut p = SandboxPolicy::default();
        p.normalization.insert("x".into(), norm);
        p.desensitization.insert("x".into(), des);
        p
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn zscore_of_small_column() {
        let (ds, _) = standardize(&one_col(vec![1.0, 2.0, 3.0]), &policy(Normalization::Zscore, Desensitization::Keep)).unwrap();
        let (m, v) = mean_var(ds.column("x").unwrap());
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(ds.column("x").unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_column_is_degenerate() {
        let r = standardize(&one_col(vec![5.0, 5.0, 5.0]), &policy(Normalization::Zscore, Desensitization::Keep));
        assert!(matches!(r, Err(SandboxError::DegenerateColumn(c)) if c == "x"));
    }

    #[test]
    fn uncovered_column_is_rejected() {
        let r = standardize(&one_col(vec![1.0, 2.0]), &SandboxPolicy::default());
        assert!(matches!(r, Err(SandboxError::PolicyMissing(_))));
    }

    #[test]
    fn dropped_column_is_absent() {
        let (ds, _) = standardize(&one_col(vec![1.0, 2.0]), &policy(Normalization::None, Desensitization::Drop)).unwrap();
        assert_eq!(ds.n_features(), 0);
        assert!(ds.schema().column("x").is_none());
    }

    #[test]
    fn bucketize_uniform_sample() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let n = 10_000;
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
        let (ds, _) =
            standardize(&one_col(values.clone()), &policy(Normalization::None, Desensitization::Bucketize(4))).unwrap();
        let mut counts = BTreeMap::new();
        for v in ds.column("x").unwrap() {
            *counts.entry(*v as i64).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 4);
        // oracle: rank-based quartiles put exactly n/4 distinct values in each
        for c in counts.values() {
            assert_eq!(*c, n / 4);
        }
        // and bucket membership follows sorted order
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let col = ds.column("x").unwrap();
        for (rank, &i) in order.iter().enumerate() {
            assert_eq!(col[i] as usize, rank * 4 / n);
        }
    }

    #[test]
    fn fitted_transform_reapplies() {
        let train = one_col(vec![0.0, 10.0, 20.0]);
        let (_, s) = standardize(&train, &policy(Normalization::Minmax, Desensitization::Keep)).unwrap();
        let later = s.apply(&one_col(vec![5.0, 30.0])).unwrap();
        assert_eq!(later.column("x").unwrap(), &[0.25, 1.5]);
    }

    proptest! {
        #[test]
        fn zscore_and_minmax_are_idempotent(v in proptest::collection::vec(-1e3f64..1e3, 3..60)) {
            prop_assume!(mean_var(&v).1 > 1e-6);
            for norm in [Normalization::Zscore, Normalization::Minmax] {
                let p = policy(norm, Desensitization::Keep);
                let (once, _) = standardize(&one_col(v.clone()), &p).unwrap();
                let (twice, _) = standardize(&once, &p).unwrap();
                for (a, b) in once.column("x").unwrap().iter().zip(twice.column("x").unwrap()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                if norm == Normalization::Minmax {
                    prop_assert!(once.column("x").unwrap().iter().all(|x| (0.0..=1.0).contains(x)));
                } else {
                    let (m, var) = mean_var(once.column("x").unwrap());
                    prop_assert!(m.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}

//! Ridge regression from encrypted sufficient statistics, and linear scoring
//! of encrypted feature vectors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{column_bound, run_secure_aggregate, InfoConfig, InfoError, InfoOutcome, EncryptedAggregate};
use crate::crypto::fixed_point::{decode_at_scale, encode_signed};
use crate::crypto::{Ciphertext, PaillierPublicKey, SignedFixedPoint};
use crate::sandbox::PartyDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
    }
}

fn feature_names(ds: &PartyDataset, target: &str) -> Vec<String> {
    ds.feature_names().into_iter().filter(|n| *n != target).map(String::from).collect()
}

/// Upper triangle of `XᵀX` (row-major) followed by `Xᵀy`, with per-cell
/// magnitude bounds `n·B_i·B_j` taken from the declared column bounds.
pub fn local_ridge_stats(
    ds: &PartyDataset,
    features: &[String],
    target: &str,
) -> Result<(Vec<f64>, Vec<f64>), InfoError> {
    let cols: Vec<&[f64]> = features
        .iter()
        .map(|f| ds.column(f).ok_or_else(|| InfoError::Encoding(format!("{} lacks feature {f:?}", ds.party_id))))
        .collect::<Result<_, _>>()?;
    let y = ds.column(target).ok_or_else(|| InfoError::Encoding(format!("{} lacks target {target:?}", ds.party_id)))?;
    let bounds: Vec<f64> = features.iter().map(|f| column_bound(ds, f)).collect::<Result<_, _>>()?;
    let by = column_bound(ds, target)?;
    let n = ds.n_rows() as f64;
    let d = features.len();
    let mut values = Vec::with_capacity(d * (d + 1) / 2 + d);
    let mut limits = Vec::with_capacity(values.capacity());
    for i in 0..d {
        for j in i..d {
            values.push(cols[i].iter().zip(cols[j]).map(|(a, b)| a * b).sum());
            limits.push(n * bounds[i] * bounds[j]);
        }
    }
    for i in 0..d {
        values.push(cols[i].iter().zip(y).map(|(a, b)| a * b).sum());
        limits.push(n * bounds[i] * by);
    }
    Ok((values, limits))
}

/// Solves `(G + λI) w = b` by Cholesky. A system that is not numerically
/// positive definite is reported instead of returning garbage. Pivots at or
/// below `noise_floor` (absolute) count as zero; pass the encoding error of
/// `G` when it came out of fixed point.
pub fn ridge_solve(
    gram: &DMatrix<f64>,
    moments: &DVector<f64>,
    lambda: f64,
    noise_floor: f64,
) -> Result<Vec<f64>, InfoError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(InfoError::Solver(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let d = gram.nrows();
    let a = gram + DMatrix::identity(d, d) * lambda;
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let chol = a.cholesky().ok_or_else(|| InfoError::Solver("regularized Gram matrix is not positive definite".into()))?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if d > 0 && min_pivot <= (scale * 1e-12).max(noise_floor) {
        return Err(InfoError::Solver("regularized Gram matrix is singular".into()));
    }
    Ok(chol.solve(moments).iter().copied().collect())
}

/// Cross-sample ridge without intercept: every party must share the same
/// feature columns. Features are every column except `target`.
pub fn ridge_fit_encrypted(
    datasets: &[PartyDataset],
    target: &str,
    lambda: f64,
    cfg: &InfoConfig,
) -> Result<InfoOutcome<LinearModel>, InfoError> {
    let first = datasets.first().ok_or_else(|| InfoError::Roles("no data parties".into()))?;
    let features = feature_names(first, target);
    for ds in datasets {
        if feature_names(ds, target) != features {
            return Err(InfoError::Encoding(format!("{} has a different feature set", ds.party_id)));
        }
    }
    let mut contribs = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let (v, b) = local_ridge_stats(ds, &features, target)?;
        contribs.push((ds.party_id.clone(), v, b));
    }
    let out = run_secure_aggregate(&contribs, cfg)?;
    let d = features.len();
    let mut gram = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            gram[(i, j)] = out.value[k];
            gram[(j, i)] = out.value[k];
            k += 1;
        }
    }
    let moments = DVector::from_column_slice(&out.value[k..k + d]);
    // each party rounds each cell by at most 2^-(s+1)
    let noise = datasets.len() as f64 * d as f64 * 16.0 * 2f64.powi(-(cfg.scale_bits as i32));
    let weights = ridge_solve(&gram, &moments, lambda, noise)?;
    Ok(out.map(|_| LinearModel { feature_names: features, weights, bias: 0.0 }))
}

/// Plaintext weights applied to an encrypted feature vector: `E(w·x + b)`.
#[derive(Clone, Debug)]
pub struct LinearScorer {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Fixed-point scale of the weights.
    pub scale_bits: u32,
    /// Scale the encrypted features must carry.
    pub feature_scale_bits: u32,
}

impl LinearScorer {
    pub fn new(model: &LinearModel, scale_bits: u32, feature_scale_bits: u32) -> Self {
        Self { weights: model.weights.clone(), bias: model.bias, scale_bits, feature_scale_bits }
    }

    /// Scale of the returned score.
    pub fn output_scale_bits(&self) -> u32 {
        self.scale_bits + self.feature_scale_bits
    }

    pub fn score(&self, pk: &PaillierPublicKey, x: &EncryptedAggregate) -> Result<Ciphertext, InfoError> {
        if x.scale_bits != self.feature_scale_bits {
            return Err(InfoError::Encoding(format!(
                "features carry {} fractional bits, scorer expects {}",
                x.scale_bits, self.feature_scale_bits
            )));
        }
        if x.cells.len() != self.weights.len() {
            return Err(InfoError::Encoding(format!("{} features for {} weights", x.cells.len(), self.weights.len())));
        }
        let fp = SignedFixedPoint::new(self.scale_bits);
        let coeffs: Vec<i128> = self.weights.iter().map(|&w| fp.to_integer(w)).collect::<Result<_, _>>()?;
        let dot = pk.linear_combination(&x.cells, &coeffs)?;
        let b = SignedFixedPoint::new(self.output_scale_bits()).to_integer(self.bias)?;
        Ok(pk.add_plain(&dot, &encode_signed(b, pk.n())?)?)
    }

    pub fn decode(&self, plaintext: &num_bigint::BigUint, pk: &PaillierPublicKey) -> f64 {
        decode_at_scale(plaintext, pk.n(), self.output_scale_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::PaillierKeyPair;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Gauss-Jordan with partial pivoting on the dense normal equations.
    fn oracle_ridge(rows: &[(Vec<f64>, f64)], lambda: f64) -> Vec<f64> {
        let d = rows[0].0.len();
        let mut a = vec![vec![0.0; d + 1]; d];
        for (x, y) in rows {
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += x[i] * x[j];
                }
                a[i][d] += x[i] * y;
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lambda;
        }
        for c in 0..d {
            let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            let piv = a[c][c];
            for v in a[c].iter_mut() {
                *v /= piv;
            }
            for r in 0..d {
                if r != c {
                    let f = a[r][c];
                    let src = a[c].clone();
                    for (v, s) in a[r].iter_mut().zip(src) {
                        *v -= f * s;
                    }
                }
            }
        }
        a.iter().map(|r| r[d]).collect()
    }

    fn party(name: &str, rows: &[(Vec<f64>, f64)]) -> PartyDataset {
        let d = rows[0].0.len();
        let mut cols: Vec<(String, Vec<f64>)> =
            (0..d).map(|j| (format!("f{j}"), rows.iter().map(|r| r.0[j]).collect())).collect();
        cols.push(("y".into(), rows.iter().map(|r| r.1).collect()));
        let ids = (0..rows.len()).map(|i| format!("{name}-{i}")).collect();
        let mut ds = PartyDataset::from_parts(name, ids, cols, None).unwrap();
        for j in 0..d {
            ds = ds.with_bounds(&format!("f{j}"), -5.0, 5.0).unwrap();
        }
        ds.with_bounds("y", -100.0, 100.0).unwrap()
    }

    fn synth(seed: u64, n: usize, d: usize) -> Vec<(Vec<f64>, f64)> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d).map(|j| (j as f64) - 3.0).collect();
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + rng.gen_range(-0.5..0.5);
                (x, y)
            })
            .collect()
    }

    #[test]
    fn three_parties_match_central_ridge() {
        let data: Vec<Vec<(Vec<f64>, f64)>> = (0..3).map(|p| synth(10 + p, 300, 8)).collect();
        let parties: Vec<PartyDataset> = data.iter().enumerate().map(|(p, r)| party(&format!("p{p}"), r)).collect();
        let all: Vec<(Vec<f64>, f64)> = data.concat();
        for lambda in [0.01, 0.1, 1.0] {
            let fed = ridge_fit_encrypted(&parties, "y", lambda, &InfoConfig::new(512, 1)).unwrap().value;
            let central = oracle_ridge(&all, lambda);
            for (a, b) in fed.weights.iter().zip(&central) {
                assert!((a - b).abs() < 1e-6, "lambda {lambda}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn single_party_is_local_ridge() {
        let rows = synth(4, 50, 3);
        let fed = ridge_fit_encrypted(&[party("solo", &rows)], "y", 0.5, &InfoConfig::new(512, 2)).unwrap().value;
        for (a, b) in fed.weights.iter().zip(oracle_ridge(&rows, 0.5)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_lambda_shrinks_to_zero() {
        let parties = [party("a", &synth(5, 40, 4)), party("b", &synth(6, 40, 4))];
        let w = ridge_fit_encrypted(&parties, "y", 1e6, &InfoConfig::new(512, 3)).unwrap().value.weights;
        assert!(w.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3);
    }

    #[test]
    fn rank_deficient_without_lambda_fails() {
        let rows: Vec<(Vec<f64>, f64)> = (0..10).map(|i| (vec![i as f64 * 0.1, i as f64 * 0.2], i as f64)).collect();
        let r = ridge_fit_encrypted(&[party("a", &rows)], "y", 0.0, &InfoConfig::new(512, 4));
        assert!(matches!(r, Err(InfoError::Solver(_))), "{r:?}");
    }

    #[test]
    fn party_order_does_not_matter() {
        let parties: Vec<PartyDataset> = (0..3).map(|p| party(&format!("p{p}"), &synth(20 + p, 30, 3))).collect();
        let fwd = ridge_fit_encrypted(&parties, "y", 0.1, &InfoConfig::new(512, 5)).unwrap().value;
        let rev: Vec<PartyDataset> = parties.iter().rev().cloned().collect();
        let back = ridge_fit_encrypted(&rev, "y", 0.1, &InfoConfig::new(512, 6)).unwrap().value;
        for (a, b) in fwd.weights.iter().zip(&back.weights) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn scorer_fixture() -> (PaillierKeyPair, ChaCha20Rng) {
        (PaillierKeyPair::generate(512, 9).unwrap(), ChaCha20Rng::seed_from_u64(9))
    }

    fn score_plain(kp: &PaillierKeyPair, s: &LinearScorer, x: &[f64], rng: &mut ChaCha20Rng) -> f64 {
        let enc =
            EncryptedAggregate::encrypt(kp.public_key(), x, x.len() as u32, 1, SignedFixedPoint::default(), rng).unwrap();
        let c = s.score(kp.public_key(), &enc).unwrap();
        s.decode(&kp.private_key().decrypt(&c).unwrap(), kp.public_key())
    }

    #[test]
    fn zero_weights_give_bias_and_one_hot_selects() {
        let (kp, mut rng) = scorer_fixture();
        let x = [3.25, -1.5, 8.0];
        let zero = LinearScorer { weights: vec![0.0; 3], bias: -2.5, scale_bits: 32, feature_scale_bits: 32 };
        assert_eq!(score_plain(&kp, &zero, &x, &mut rng), -2.5);
        for j in 0..3 {
            let mut w = vec![0.0; 3];
            w[j] = 1.0;
            let s = LinearScorer { weights: w, bias: 0.0, scale_bits: 32, feature_scale_bits: 32 };
            assert_eq!(score_plain(&kp, &s, &x, &mut rng), x[j]);
        }
    }

    #[test]
    fn scale_mismatch_is_an_encoding_error() {
        let (kp, mut rng) = scorer_fixture();
        let enc = EncryptedAggregate::encrypt(kp.public_key(), &[1.0], 1, 1, SignedFixedPoint::new(16), &mut rng).unwrap();
        let s = LinearScorer { weights: vec![1.0], bias: 0.0, scale_bits: 32, feature_scale_bits: 32 };
        assert!(matches!(s.score(kp.public_key(), &enc), Err(InfoError::Encoding(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn encrypted_score_matches_dot_product(
            w in proptest::collection::vec(-10.0f64..10.0, 8),
            x in proptest::collection::vec(-10.0f64..10.0, 8),
            b in -10.0f64..10.0,
        ) {
            let (kp, mut rng) = scorer_fixture();
            let s = LinearScorer { weights: w.clone(), bias: b, scale_bits: 32, feature_scale_bits: 32 };
            let got = score_plain(&kp, &s, &x, &mut rng);
            let want = b + w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>();
            prop_assert!((got - want).abs() <= want.abs().max(1.0) * 2f64.powi(-20));
        }
    }
}

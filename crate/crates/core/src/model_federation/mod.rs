//! Model-level federation.
//!
//! Cross-sample (horizontal) jobs run federated averaging: the arbitrator
//! broadcasts the global parameters, every party trains locally and returns
//! a weighted update, optionally under pairwise masks and differential
//! privacy. Cross-feature (vertical) jobs train a logistic regression whose
//! weights are split between a label holder and feature-only parties, with
//! three exchange protocols:
//!
//! * `plaintext` partial logits and residuals, for debugging and oracles;
//! * `he_taylor` residuals kept under a crypto provider's Paillier key using
//!   the first-order sigmoid `σ(z) ≈ ½ + z/4`;
//! * `label_transfer` where the feature party sends masked gradient
//!   candidates for both labels and the label holder picks and sums them.

mod cross_feature;
mod cross_sample;
mod feature_select;
mod label_transfer;
pub mod nn;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cross_feature::{
    cross_feature_feature_side, cross_feature_label_side, cross_feature_provider, run_cross_feature, run_cross_feature_as, taylor_residual,
    CrossFeatureConfig, CrossFeatureOutcome, FeatureSideResult, LabelSideResult, VerticalModel, VerticalProtocol,
};
pub use cross_sample::{
    cross_sample_arbitrator, cross_sample_party, masked_sum_simulated, run_cross_sample, run_cross_sample_as, ArbitratorResult,
    CrossSampleOutcome,
};
pub use feature_select::{
    correlation, feature_select_feature_side, feature_select_label_side, select_features_local, select_features_vertical,
    FeatureSelection, VerticalSelection,
};
pub use label_transfer::{
    label_transfer_feature_side, label_transfer_label_side, label_transfer_setup_feature_side,
    label_transfer_setup_label_side, secure_label_transfer, LabelTransferKeys, LabelTransferOutcome,
};
pub use nn::{sigmoid, DenseNet, Loss};

use crate::alignment::AlignmentError;
use crate::crypto::{CryptoError, DpParams};
use crate::sandbox::{PartyDataset, SandboxError};
use crate::transport::{PartyId, TransportError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged in round {round} (loss is not finite)")]
    Divergence { round: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("datasets are not aligned: {0}")]
    Consistency(String),
    #[error("fixed-point range exceeded: {0}")]
    Range(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear { inputs: usize },
    Logistic { inputs: usize },
    /// At most two hidden layers.
    Mlp { inputs: usize, hidden: Vec<usize> },
}

impl Architecture {
    pub fn inputs(&self) -> usize {
        match self {
            Architecture::Linear { inputs } | Architecture::Logistic { inputs } | Architecture::Mlp { inputs, .. } => *inputs,
        }
    }

    pub fn net(&self) -> Result<DenseNet, ModelError> {
        match self {
            Architecture::Linear { inputs } | Architecture::Logistic { inputs } => DenseNet::new(vec![*inputs, 1]),
            Architecture::Mlp { inputs, hidden } => {
                if hidden.is_empty() || hidden.len() > 2 {
                    return Err(ModelError::Architecture(format!("mlp needs 1 or 2 hidden layers, got {}", hidden.len())));
                }
                let mut sizes = vec![*inputs];
                sizes.extend(hidden);
                sizes.push(1);
                DenseNet::new(sizes)
            }
        }
    }

    pub fn loss(&self) -> Loss {
        match self {
            Architecture::Linear { .. } => Loss::Squared,
            _ => Loss::Logistic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub theta: Vec<f64>,
    /// Round that produced these parameters; 0 before training.
    pub version: u64,
}

impl ModelParams {
    /// Zeros for linear models; Glorot-uniform weights for MLPs.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        let net = arch.net()?;
        let theta = match arch {
            Architecture::Mlp { .. } => {
                let mut rng = crate::alignment::party_rng(seed, &PartyId::new("arbitrator"), "model-init");
                net.init(&mut rng)
            }
            _ => vec![0.0; net.param_count()],
        };
        Ok(Self { arch, theta, version: 0 })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let want = self.arch.net()?.param_count();
        if self.theta.len() != want {
            return Err(ModelError::Architecture(format!("{} parameters for an architecture needing {want}", self.theta.len())));
        }
        Ok(())
    }

    /// Raw network output: a logit for classifiers, the prediction for linear.
    pub fn output(&self, x: &[f64]) -> Result<f64, ModelError> {
        Ok(self.arch.net()?.output(&self.theta, x)[0])
    }

    /// Probability for classifiers, prediction for linear models.
    pub fn predict(&self, x: &[f64]) -> Result<f64, ModelError> {
        let o = self.output(x)?;
        Ok(match self.arch.loss() {
            Loss::Logistic => sigmoid(o),
            Loss::Squared => o,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "plaintext_debug")]
    PlaintextDebug,
    #[serde(rename = "masked")]
    Masked,
    #[serde(rename = "masked+dp")]
    MaskedDp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: u64,
    #[serde(default = "one")]
    pub local_epochs: u64,
    /// 0 means full batch.
    #[serde(default)]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "plaintext")]
    pub mode: TrainMode,
    #[serde(default)]
    pub taylor_sigmoid: bool,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub dp: Option<DpParams>,
}

fn one() -> u64 {
    1
}

fn plaintext() -> TrainMode {
    TrainMode::PlaintextDebug
}

impl TrainConfig {
    pub fn new(rounds: u64, learning_rate: f64, seed: u64) -> Self {
        Self {
            rounds,
            local_epochs: 1,
            batch_size: 0,
            learning_rate,
            seed,
            mode: TrainMode::PlaintextDebug,
            taylor_sigmoid: false,
            l2: 0.0,
            dp: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rounds < 1 || self.local_epochs < 1 {
            return Err(ModelError::Config("rounds and local_epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ModelError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.l2 >= 0.0) {
            return Err(ModelError::Config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        match (self.mode, &self.dp) {
            (TrainMode::MaskedDp, None) => Err(ModelError::Config("masked+dp mode needs dp parameters".into())),
            (TrainMode::MaskedDp, Some(dp)) => Ok(dp.validate()?),
            _ => Ok(()),
        }
    }
}

/// Features and targets pulled out of a labelled dataset.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl TrainingData {
    pub fn from_dataset(ds: &PartyDataset) -> Result<Self, ModelError> {
        let labels = ds
            .labels()
            .ok_or_else(|| ModelError::Config(format!("{} holds no labels", ds.party_id)))?;
        Ok(Self { x: ds.rows(), y: labels.iter().map(|&l| l as f64).collect() })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Mean loss and mean gradient over `idx`.
pub fn batch_loss_grad(arch: &Architecture, theta: &[f64], data: &TrainingData, idx: &[usize]) -> Result<(f64, Vec<f64>), ModelError> {
    let net = arch.net()?;
    let loss = arch.loss();
    let mut grad = vec![0.0; theta.len()];
    let mut total = 0.0;
    for &i in idx {
        let trace = net.forward(theta, &data.x[i]);
        let (l, dl) = loss.eval(trace.output()[0], data.y[i]);
        total += l;
        net.backward(theta, &trace, &[dl], &mut grad);
    }
    let n = idx.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelUpdate {
    pub round: u64,
    pub sample_count: u64,
    pub delta: Vec<f64>,
    /// Loss summed over local rows at the round's starting parameters.
    pub loss_sum: f64,
    /// Rows classified correctly (threshold ½) at the starting parameters.
    pub correct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalUpdate {
    pub round: u64,
    pub delta: Vec<f64>,
    pub sample_count: u64,
    pub loss_sum: f64,
    pub correct: f64,
}

/// Per-round training record, one CSV row each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub train_loss: f64,
    pub eval_metric: f64,
}

fn is_correct(arch: &Architecture, output: f64, y: f64) -> bool {
    let p = match arch.loss() {
        Loss::Logistic => sigmoid(output),
        Loss::Squared => output,
    };
    (p >= 0.5) == (y >= 0.5)
}

/// `E` local epochs of gradient descent; returns `θ_new − θ_old`.
pub fn local_train<R: rand::Rng + ?Sized>(
    data: &TrainingData,
    params: &ModelParams,
    cfg: &TrainConfig,
    round: u64,
    rng: &mut R,
) -> Result<ModelUpdate, ModelError> {
    params.validate()?;
    if data.is_empty() {
        return Err(ModelError::Config("local dataset is empty".into()));
    }
    let net = params.arch.net()?;
    if data.x[0].len() != net.inputs() {
        return Err(ModelError::Architecture(format!("{} features for a {}-input model", data.x[0].len(), net.inputs())));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    for (x, &y) in data.x.iter().zip(&data.y) {
        let o = net.output(&params.theta, x)[0];
        loss_sum += params.arch.loss().eval(o, y).0;
        correct += is_correct(&params.arch, o, y) as u8 as f64;
    }
    if !loss_sum.is_finite() {
        return Err(ModelError::Divergence { round });
    }
    let mut theta = params.theta.clone();
    for _ in 0..cfg.local_epochs {
        let mut order = all.clone();
        let batches: Vec<&[usize]> = if cfg.batch_size == 0 || cfg.batch_size >= order.len() {
            vec![&all]
        } else {
            use rand::seq::SliceRandom;
            order.shuffle(rng);
            order.chunks(cfg.batch_size).collect()
        };
        for b in batches {
            let (l, g) = batch_loss_grad(&params.arch, &theta, data, b)?;
            if !l.is_finite() {
                return Err(ModelError::Divergence { round });
            }
            for (t, g) in theta.iter_mut().zip(&g) {
                *t -= cfg.learning_rate * (g + cfg.l2 * *t);
            }
        }
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(ModelError::Divergence { round });
    }
    let delta = theta.iter().zip(&params.theta).map(|(a, b)| a - b).collect();
    Ok(ModelUpdate { round, sample_count: data.len() as u64, delta, loss_sum, correct })
}

/// Weighted mean `Σ n_k δ_k / Σ n_k`, summed in party-id order so any
/// arrival order gives bit-identical output.
pub fn fed_avg(updates: &[(PartyId, ModelUpdate)]) -> Result<GlobalUpdate, ModelError> {
    let first = updates.first().ok_or_else(|| ModelError::Protocol("no updates to average".into()))?;
    let (round, dim) = (first.1.round, first.1.delta.len());
    let mut sorted: Vec<&(PartyId, ModelUpdate)> = updates.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut acc = vec![0.0; dim];
    let (mut n, mut loss_sum, mut correct) = (0u64, 0.0, 0.0);
    for (p, u) in sorted {
        if u.delta.len() != dim {
            return Err(ModelError::Protocol(format!("update from {p} has {} coordinates, expected {dim}", u.delta.len())));
        }
        if u.round != round {
            return Err(ModelError::Protocol(format!("update from {p} is for round {}, expected {round}", u.round)));
        }
        if u.sample_count == 0 {
            return Err(ModelError::Protocol(format!("update from {p} has no samples")));
        }
        for (a, d) in acc.iter_mut().zip(&u.delta) {
            *a += u.sample_count as f64 * d;
        }
        n += u.sample_count;
        loss_sum += u.loss_sum;
        correct += u.correct;
    }
    // a lone update passes through untouched; n·δ/n is not always δ in floating point
    let delta = if updates.len() == 1 { first.1.delta.clone() } else { acc.into_iter().map(|a| a / n as f64).collect() };
    Ok(GlobalUpdate { round, delta, sample_count: n, loss_sum, correct })
}

/// Per-sample cross-entropy on a logit.
pub(crate) fn softplus_loss(z: f64, y: f64) -> f64 {
    Loss::Logistic.eval(z, y).0
}

/// Area under the ROC curve, ties counted half.
pub fn auc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let pos = labels.iter().filter(|&&y| y >= 0.5).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    // average ranks over ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] >= 0.5 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Keeps the first real error over follow-on `Remote` notifications.
pub(crate) fn collect_outputs<T>(outputs: Vec<(PartyId, Result<T, ModelError>)>) -> Result<Vec<(PartyId, T)>, ModelError> {
    let mut ok = Vec::with_capacity(outputs.len());
    let mut remote: Option<ModelError> = None;
    let mut root: Option<ModelError> = None;
    for (p, r) in outputs {
        match r {
            Ok(v) => ok.push((p, v)),
            Err(e @ ModelError::Transport(TransportError::Remote { .. })) => {
                remote.get_or_insert(e);
            }
            Err(e) => {
                root.get_or_insert(e);
            }
        }
    }
    match root.or(remote) {
        Some(e) => Err(e),
        None => Ok(ok),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn upd(delta: Vec<f64>, n: u64) -> ModelUpdate {
        ModelUpdate { round: 1, sample_count: n, delta, loss_sum: 0.0, correct: 0.0 }
    }

    #[test]
    fn fed_avg_weights_by_sample_count() {
        let g = fed_avg(&[(PartyId::new("a"), upd(vec![2.0], 1)), (PartyId::new("b"), upd(vec![4.0], 3))]).unwrap();
        assert_eq!(g.delta, vec![3.5]);
        let same = fed_avg(&[(PartyId::new("a"), upd(vec![1.5, -2.0], 7)), (PartyId::new("b"), upd(vec![1.5, -2.0], 2))]).unwrap();
        assert_eq!(same.delta, vec![1.5, -2.0]);
    }

    #[test]
    fn fed_avg_rejects_mismatched_lengths() {
        let r = fed_avg(&[(PartyId::new("a"), upd(vec![1.0], 1)), (PartyId::new("b"), upd(vec![1.0, 2.0], 1))]);
        assert!(matches!(r, Err(ModelError::Protocol(_))));
    }

    #[test]
    fn fed_avg_matches_direct_weighted_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ups: Vec<(PartyId, ModelUpdate)> = (0..5)
            .map(|k| (PartyId::new(format!("p{k}")), upd((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(1..100))))
            .collect();
        let g = fed_avg(&ups).unwrap();
        let n: u64 = ups.iter().map(|u| u.1.sample_count).sum();
        for j in 0..6 {
            let want: f64 = ups.iter().map(|u| u.1.sample_count as f64 * u.1.delta[j]).sum::<f64>() / n as f64;
            assert!((g.delta[j] - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn fed_avg_is_bit_identical_under_permutation(
            deltas in proptest::collection::vec((proptest::collection::vec(-1e3f64..1e3, 4), 1u64..50), 1..8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let ups: Vec<(PartyId, ModelUpdate)> =
                deltas.into_iter().enumerate().map(|(k, (d, n))| (PartyId::new(format!("p{k:02}")), upd(d, n))).collect();
            let mut shuffled = ups.clone();
            shuffled.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
            let a = fed_avg(&ups).unwrap().delta;
            let b = fed_avg(&shuffled).unwrap().delta;
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn bias_gradient_of_single_zero_sample() {
        // x = 0 gives σ(0) = ½, so ∂ℓ/∂b = ½ − y
        let arch = Architecture::Logistic { inputs: 2 };
        for y in [0.0, 1.0] {
            let data = TrainingData { x: vec![vec![0.0, 0.0]], y: vec![y] };
            let (_, g) = batch_loss_grad(&arch, &[0.3, -0.7, 0.0], &data, &[0]).unwrap();
            assert_eq!(g, vec![0.0, 0.0, 0.5 - y]);
        }
    }

    #[test]
    fn zero_learning_rate_gives_zero_delta() {
        let cfg = TrainConfig::new(1, 0.0, 1);
        // a job config refuses this, the training step itself is well defined
        assert!(cfg.validate().is_err());
        let data = TrainingData { x: vec![vec![1.0], vec![-0.5]], y: vec![1.0, 0.0] };
        let p = ModelParams::init(Architecture::Mlp { inputs: 1, hidden: vec![2] }, 1).unwrap();
        let u = local_train(&data, &p, &cfg, 1, &mut ChaCha20Rng::seed_from_u64(0)).unwrap();
        assert!(u.delta.iter().all(|&d| d == 0.0));
    }

    fn random_data(rng: &mut ChaCha20Rng, n: usize, d: usize) -> TrainingData {
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let y = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
        TrainingData { x, y }
    }

    /// Central differences with `h = 1e-6·max(1, |θ|)`, relative tolerance
    /// 1e-5 against the larger magnitude (floored at 1e-4).
    pub(crate) fn assert_gradient_matches(f: impl Fn(&[f64]) -> f64, theta: &[f64], grad: &[f64]) {
        for k in 0..theta.len() {
            let h = 1e-6 * theta[k].abs().max(1.0);
            let (mut a, mut b) = (theta.to_vec(), theta.to_vec());
            a[k] += h;
            b[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let scale = fd.abs().max(grad[k].abs()).max(1e-4);
            assert!((fd - grad[k]).abs() <= 1e-5 * scale, "coordinate {k}: analytic {} vs numeric {fd}", grad[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_every_architecture() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for case in 0..10 {
            let d = 1 + case % 4;
            let data = random_data(&mut rng, 12, d);
            let idx: Vec<usize> = (0..data.len()).collect();
            let archs = [
                Architecture::Linear { inputs: d },
                Architecture::Logistic { inputs: d },
                Architecture::Mlp { inputs: d, hidden: vec![3] },
                Architecture::Mlp { inputs: d, hidden: vec![4, 2] },
            ];
            for arch in archs {
                let theta: Vec<f64> = (0..arch.net().unwrap().param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (_, g) = batch_loss_grad(&arch, &theta, &data, &idx).unwrap();
                assert_gradient_matches(|t| batch_loss_grad(&arch, t, &data, &idx).unwrap().0, &theta, &g);
            }
        }
    }

    #[test]
    fn divergence_names_the_round() {
        let data = TrainingData { x: vec![vec![1e200], vec![-1e200]], y: vec![1.0, 0.0] };
        let p = ModelParams::init(Architecture::Linear { inputs: 1 }, 1).unwrap();
        let cfg = TrainConfig { local_epochs: 3, ..TrainConfig::new(1, 1.0, 1) };
        let r = local_train(&data, &p, &cfg, 4, &mut ChaCha20Rng::seed_from_u64(0));
        assert!(matches!(r, Err(ModelError::Divergence { round: 4 })), "{r:?}");
    }

    #[test]
    fn auc_against_pair_counting() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..200).map(|_| (rng.gen_range(0..20) as f64) / 4.0).collect();
        let labels: Vec<f64> = (0..200).map(|_| rng.gen_range(0..2) as f64).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..200 {
            for j in 0..200 {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        assert!((auc(&scores, &labels) - num / den).abs() < 1e-12);
    }
}

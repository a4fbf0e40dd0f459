//! Ensemble prediction, accuracy aggregation and input-output Jacobian
//! sensitivity.
//!
//! A [`Predictor`] records its score function as a list of parts whose
//! element-wise mean is the prediction. Means are accumulated in `f64` over
//! sorted values, so the mean of one part is that part, member order never
//! matters and identical members reproduce a single member exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::data::{DatasetSplit, NormalizationStats};
use crate::tensor::{Element, Mode, RngStream, Tape, Tensor, Var};
use crate::train::{normalized_batch, EnsembleModel};
use crate::zoo::{Head, ModelInstance, ParamUse};
use crate::{Error, Result};

/// Batch size used when scoring or differentiating whole splits.
pub const EVAL_BATCH: usize = 32;

/// Default number of test samples for sensitivity reports.
pub const SENSITIVITY_CAP: usize = 2000;

const TAG_SENSITIVITY: u64 = 0x5345_4e53;

/// Maps raw head outputs `[B, K]` to scores: softmax for the softmax head,
/// `(1 + s) / 2` for cosine similarities.
pub fn phi<T: Element>(tape: &mut Tape<T>, head: Head, output: Var) -> Result<Var> {
    if head.is_cosine() {
        tape.affine(output, 0.5, 0.5)
    } else {
        tape.softmax(output)
    }
}

/// Value-level [`phi`] for one output row.
pub fn phi_row(head: Head, raw: &[f64]) -> Vec<f64> {
    if head.is_cosine() {
        return raw.iter().map(|s| 0.5 * s + 0.5).collect();
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = raw.iter().map(|v| Float::exp(v - max)).collect();
    let z: f64 = exp.iter().sum();
    exp.iter().map(|e| e / z).collect()
}

/// Mean of `values` summed in ascending order. Exact when all values are
/// equal.
pub fn sorted_mean(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let (first, last) = (values[0], values[values.len() - 1]);
    if first == last {
        return first;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Element-wise [`sorted_mean`] of equally sized slices.
pub fn mean_of_parts<T: Element>(parts: &[&[T]]) -> Vec<f64> {
    let n = parts[0].len();
    let mut buf = vec![0.0; parts.len()];
    (0..n)
        .map(|i| {
            for (b, p) in buf.iter_mut().zip(parts) {
                *b = p[i].to_f64();
            }
            sorted_mean(&mut buf)
        })
        .collect()
}

/// A differentiable score function `f(x)` with `K` outputs in `[0, 1]`.
pub trait Predictor<T: Element> {
    /// `[H, W, C]` of one input.
    fn input_shape(&self) -> [usize; 3];

    fn num_classes(&self) -> usize;

    /// Records the parts of `f(x)` for a `[B, H, W, C]` input; each part is
    /// `[B, K]` and `f` is their element-wise mean. Evaluation must be
    /// deterministic and treat samples independently.
    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>>;
}

/// `phi(g(x))` of one network in eval mode.
pub fn record_member<T: Element>(model: &ModelInstance<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let params = model.bind(tape, ParamUse::Frozen);
    let mut rng = RngStream::new(0, 0);
    let pass = model.forward(tape, &params, x, Mode::Eval, &mut rng)?;
    phi(tape, model.head(), pass.output)
}

/// Borrowed members of an ensemble at any precision.
#[derive(Clone, Copy, Debug)]
pub struct Members<'a, T>(pub &'a [ModelInstance<T>]);

impl<T: Element> Predictor<T> for Members<'_, T> {
    fn input_shape(&self) -> [usize; 3] {
        self.0.first().map(|m| m.spec().input).unwrap_or([0; 3])
    }

    fn num_classes(&self) -> usize {
        self.0.first().map(|m| m.spec().num_classes).unwrap_or(0)
    }

    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        if self.0.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        self.0.iter().map(|m| record_member(m, tape, x)).collect()
    }
}

impl<T: Element> Predictor<T> for ModelInstance<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.spec().input
    }

    fn num_classes(&self) -> usize {
        self.spec().num_classes
    }

    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        Ok(vec![record_member(self, tape, x)?])
    }
}

impl Predictor<f32> for EnsembleModel {
    fn input_shape(&self) -> [usize; 3] {
        self.spec.input
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn record(&self, tape: &mut Tape<f32>, x: Var) -> Result<Vec<Var>> {
        Members(&self.members).record(tape, x)
    }
}

/// Scores `[B, K]` for a normalized batch.
pub fn predict<T: Element, P: Predictor<T> + ?Sized>(p: &P, x: &Tensor<T>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let parts = p.record(&mut tape, xv)?;
    if parts.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let shape = tape.shape(parts[0]).to_vec();
    let views: Vec<&[T]> = parts.iter().map(|&v| tape.value(v).data()).collect();
    Tensor::from_vec(&shape, mean_of_parts(&views))
}

/// Ensemble scores `(1/M) sum_m phi(g_m(x))` for a normalized batch.
pub fn ensemble_predict(ensemble: &EnsembleModel, x: &Tensor<f32>) -> Result<Tensor<f64>> {
    predict(ensemble, x)
}

/// Scores for every sample of `split`, normalized with `stats`.
pub fn predict_split<T: Element, P: Predictor<T> + ?Sized>(
    p: &P,
    split: &DatasetSplit,
    stats: &NormalizationStats,
) -> Result<Tensor<f64>> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let k = p.num_classes();
    let mut out = Vec::with_capacity(split.len() * k);
    let all: Vec<usize> = (0..split.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let x = normalized_batch(split, chunk, stats).cast::<T>();
        out.extend_from_slice(predict(p, &x)?.data());
    }
    Tensor::from_vec(&[split.len(), k], out)
}

/// Index of the largest value; ties go to the first.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy_of_scores(scores: &Tensor<f64>, labels: &[u32]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptySplit);
    }
    if scores.rank() != 2 || scores.shape()[0] != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("scores {:?} for {} labels", scores.shape(), labels.len()),
        ));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(scores.row(i)) == l as usize)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Test accuracy without test-time augmentation.
pub fn accuracy<T: Element, P: Predictor<T> + ?Sized>(
    p: &P,
    split: &DatasetSplit,
    stats: &NormalizationStats,
) -> Result<f64> {
    accuracy_of_scores(&predict_split(p, split, stats)?, split.labels())
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, Float::sqrt(var)))
}

/// Accuracies of one configuration over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub fingerprint: String,
}

pub fn aggregate_runs(accuracies: &[f64]) -> Result<RunResult> {
    let (mean, std) = mean_std(accuracies)?;
    Ok(RunResult {
        accuracies: accuracies.to_vec(),
        mean,
        std,
        fingerprint: String::new(),
    })
}

impl RunResult {
    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }
}

/// `||J(x)||_F` for every sample of a normalized batch `[B, H, W, C]`.
///
/// Runs one backward pass per output component and part: since samples are
/// independent, the gradient of `sum_b f_k(x_b)` with respect to `x_b` is
/// row `k` of `J(x_b)`. Part gradients are averaged like the scores.
pub fn jacobian_frobenius_batch<T: Element, P: Predictor<T> + ?Sized>(p: &P, x: &Tensor<T>) -> Result<Vec<f64>> {
    if x.rank() != 4 || x.shape()[1..] != p.input_shape() {
        return Err(Error::shape(
            "jacobian",
            format!("input {:?} does not match [B, {:?}]", x.shape(), p.input_shape()),
        ));
    }
    let b = x.shape()[0];
    let d = x.len() / b.max(1);
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let parts = p.record(&mut tape, xv)?;
    if parts.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let k = tape.shape(parts[0])[1];
    let mut sq = vec![0.0f64; b];
    let mut weights = vec![T::zero(); b * k];
    for c in 0..k {
        weights.iter_mut().for_each(|w| *w = T::zero());
        for row in 0..b {
            weights[row * k + c] = T::one();
        }
        let mut grads = Vec::with_capacity(parts.len());
        for &part in &parts {
            let out = tape.weighted_sum(part, &weights)?;
            grads.push(tape.backward(out)?.take(xv)?);
        }
        let views: Vec<&[T]> = grads.iter().map(|g| g.data()).collect();
        let row = mean_of_parts(&views);
        for (s, chunk) in sq.iter_mut().zip(row.chunks(d)) {
            *s += chunk.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(sq.into_iter().map(Float::sqrt).collect())
}

/// `||J(x)||_F` of `f` at a single input `[H, W, C]` or `[1, H, W, C]`.
pub fn jacobian_frobenius<T: Element, P: Predictor<T> + ?Sized>(p: &P, x: &Tensor<T>) -> Result<f64> {
    let x = if x.rank() == 3 {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        x.clone().reshape(&shape)?
    } else {
        x.clone()
    };
    if x.shape()[0] != 1 {
        return Err(Error::shape(
            "jacobian",
            format!("expected one sample, got {:?}", x.shape()),
        ));
    }
    Ok(jacobian_frobenius_batch(p, &x)?[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityReport {
    /// Indices into the evaluated split.
    pub sample_ids: Vec<usize>,
    pub labels: Vec<u32>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Which test samples a sensitivity report covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleCap {
    All,
    /// Seeded uniform subset of at most this many samples.
    Seeded {
        cap: usize,
        seed: u64,
    },
}

impl Default for SampleCap {
    fn default() -> Self {
        SampleCap::Seeded {
            cap: SENSITIVITY_CAP,
            seed: 0,
        }
    }
}

impl SampleCap {
    /// Sorted indices selected from a split of `n` samples.
    pub fn select(self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        if let SampleCap::Seeded { cap, seed } = self {
            if cap < n {
                RngStream::new(seed, TAG_SENSITIVITY).shuffle(&mut idx);
                idx.truncate(cap);
                idx.sort_unstable();
            }
        }
        idx
    }
}

/// Per-sample Jacobian norms on the normalized inputs of `split`.
pub fn mean_sensitivity<T: Element, P: Predictor<T> + ?Sized>(
    p: &P,
    split: &DatasetSplit,
    stats: &NormalizationStats,
    cap: SampleCap,
) -> Result<SensitivityReport> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let ids = cap.select(split.len());
    let mut values = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_BATCH) {
        let x = normalized_batch(split, chunk, stats).cast::<T>();
        values.extend(jacobian_frobenius_batch(p, &x)?);
    }
    let (mean, std) = mean_std(&values)?;
    Ok(SensitivityReport {
        labels: ids.iter().map(|&i| split.labels()[i]).collect(),
        sample_ids: ids,
        values,
        mean,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{channel_means, synth_clusters};
    use crate::zoo::ArchitectureSpec;

    /// `f(x) = scale * W flatten(x)` with no `phi`.
    struct Linear {
        w: Tensor<f64>,
        shape: [usize; 3],
        k: usize,
    }

    impl Predictor<f64> for Linear {
        fn input_shape(&self) -> [usize; 3] {
            self.shape
        }
        fn num_classes(&self) -> usize {
            self.k
        }
        fn record(&self, tape: &mut Tape<f64>, x: Var) -> Result<Vec<Var>> {
            let f = tape.flatten(x)?;
            let w = tape.constant(&self.w);
            Ok(vec![tape.dense(f, w, None)?])
        }
    }

    fn linear(shape: [usize; 3], k: usize, seed: u64) -> Linear {
        let d: usize = shape.iter().product();
        let mut rng = RngStream::new(seed, 0);
        let w = Tensor::from_vec(&[d, k], (0..d * k).map(|_| rng.normal()).collect()).unwrap();
        Linear { w, shape, k }
    }

    fn small_models(m: usize) -> Vec<ModelInstance<f32>> {
        let spec = ArchitectureSpec::resnet(8, 2, 3).with_input(8, 8, 3);
        (0..m)
            .map(|i| ModelInstance::build(&spec, &mut RngStream::new(5, i as u64)).unwrap())
            .collect()
    }

    fn batch(b: usize, seed: u64) -> Tensor<f32> {
        let mut rng = RngStream::new(seed, 9);
        Tensor::from_vec(&[b, 8, 8, 3], (0..b * 192).map(|_| rng.normal() as f32 * 0.3).collect()).unwrap()
    }

    #[test]
    fn phi_rows() {
        let u = phi_row(Head::SoftmaxXe, &[0.0; 4]);
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = phi_row(Head::SoftmaxXe, &[3.0, -1.0, 0.5]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(phi_row(Head::Cosine, &[1.0, -1.0, 0.0]), vec![1.0, 0.0, 0.5]);
    }

    #[test]
    fn sorted_mean_cases() {
        assert_eq!(sorted_mean(&mut [0.1, 0.1, 0.1]), 0.1);
        assert_eq!(sorted_mean(&mut [1.0, 0.0]), 0.5);
        assert_eq!(sorted_mean(&mut [0.3]), 0.3);
    }

    #[test]
    fn ensemble_identities() {
        let models = small_models(3);
        let x = batch(4, 1);
        let single = predict(&models[0], &x).unwrap();
        let one = predict(&Members(&models[..1]), &x).unwrap();
        assert_eq!(single.data(), one.data());
        let fwd = predict(&Members(&models), &x).unwrap();
        let rev: Vec<_> = models.iter().rev().cloned().collect();
        assert_eq!(fwd.data(), predict(&Members(&rev), &x).unwrap().data());
        for r in 0..4 {
            let s: f64 = fwd.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let same = vec![models[1].clone(); 4];
        assert_eq!(
            predict(&Members(&same), &x).unwrap().data(),
            predict(&models[1], &x).unwrap().data()
        );
        let j1 = jacobian_frobenius_batch(&models[1], &x).unwrap();
        assert_eq!(jacobian_frobenius_batch(&Members(&same), &x).unwrap(), j1);
        assert!(matches!(predict(&Members::<f32>(&[]), &x), Err(Error::EmptyEnsemble)));
    }

    #[test]
    fn linear_jacobian_is_weight_norm() {
        let p = linear([2, 3, 2], 4, 3);
        let fro = Float::sqrt(p.w.data().iter().map(|v| v * v).sum::<f64>());
        let mut rng = RngStream::new(1, 1);
        for _ in 0..3 {
            let x = Tensor::from_vec(&[2, 3, 2], (0..12).map(|_| rng.normal()).collect()).unwrap();
            let j = jacobian_frobenius(&p, &x).unwrap();
            assert!(((j - fro) / fro).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_map_has_norm_two_root_n() {
        let n = 6;
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = 2.0;
        }
        let p = Linear {
            w,
            shape: [1, 1, n],
            k: n,
        };
        let j = jacobian_frobenius(&p, &Tensor::zeros(&[1, 1, n])).unwrap();
        assert!((j - 2.0 * Float::sqrt(n as f64)).abs() < 1e-12);
    }

    #[test]
    fn batched_jacobian_matches_per_sample() {
        let models = small_models(2);
        let x = batch(3, 2);
        let all = jacobian_frobenius_batch(&Members(&models), &x).unwrap();
        for (b, &v) in all.iter().enumerate() {
            let one = Tensor::from_vec(&[1, 8, 8, 3], x.data()[b * 192..(b + 1) * 192].to_vec()).unwrap();
            let s = jacobian_frobenius(&Members(&models), &one).unwrap();
            assert!(((s - v) / v).abs() < 1e-5, "{} vs {}", s, v);
        }
    }

    #[test]
    fn aggregation() {
        let r = aggregate_runs(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((r.mean, r.std), (0.5, 0.0));
        let r = aggregate_runs(&[0.4, 0.6]).unwrap();
        assert!((r.mean - 0.5).abs() < 1e-15 && (r.std - 0.1).abs() < 1e-12);
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn accuracy_and_sensitivity_on_split() {
        let data = synth_clusters(3, 4, [8, 8, 3], 4.0, 2).unwrap();
        let stats = channel_means(&data).unwrap();
        let models = small_models(2);
        let acc = accuracy(&Members(&models), &data, &stats).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let rep = mean_sensitivity(&Members(&models), &data, &stats, SampleCap::All).unwrap();
        assert_eq!(rep.values.len(), 12);
        assert!(rep.values.iter().all(|&v| v >= 0.0));
        let capped = mean_sensitivity(&Members(&models), &data, &stats, SampleCap::Seeded { cap: 5, seed: 1 }).unwrap();
        assert_eq!(capped.sample_ids.len(), 5);
        for (i, &id) in capped.sample_ids.iter().enumerate() {
            let pos = rep.sample_ids.iter().position(|&s| s == id).unwrap();
            assert_eq!(capped.values[i], rep.values[pos]);
        }
    }

    #[test]
    fn accuracy_of_fixed_scores() {
        let labels = [0u32, 1, 2, 0, 1, 2];
        let mut exact = Tensor::zeros(&[6, 3]);
        for (i, &l) in labels.iter().enumerate() {
            exact.data_mut()[i * 3 + l as usize] = 1.0;
        }
        assert_eq!(accuracy_of_scores(&exact, &labels).unwrap(), 1.0);
        let constant = Tensor::full(&[6, 3], 0.2);
        assert!((accuracy_of_scores(&constant, &labels).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(accuracy_of_scores(&constant, &[]).is_err());
    }
}

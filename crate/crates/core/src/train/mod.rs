//! Schedules, optimizers and ensemble training.
//!
//! Every random draw during training comes from a stream keyed by the run
//! seed and a tagged stream id:
//!
//! - member `m` initializes from `(seed, init(m))`;
//! - the sample order of epoch `e` comes from `(seed, order(e))`;
//! - the augmentation of the sample at position `i` of epoch `e` comes from
//!   `(seed, aug(e, i))`, or `(seed, aug(e, i, m))` when members augment
//!   independently;
//! - dropout masks of member `m` at step `t` come from `(seed, dropout(m, t))`.
//!
//! A member's trajectory therefore depends only on the seed and its index,
//! so lockstep training of `M` members and `M` separate single-member runs
//! give bit-identical weights.

mod optim;

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use optim::OptState;
pub use optim::{adam_step, sgd_nesterov_step, AdamState, Optimizer};

use crate::data::{augment, channel_means, AugLevel, AugmentationPolicy, DatasetSplit, NormalizationStats};
use crate::tensor::{mix, Mode, RngStream, Tape, Tensor};
use crate::zoo::{self, ArchitectureSpec, Family, Head, ModelInstance, ParamUse};
use crate::{Error, Result};

const TAG_INIT: u64 = 0x494e_4954;
const TAG_ORDER: u64 = 0x4f52_4452;
const TAG_AUG: u64 = 0x4155_474d;
const TAG_DROPOUT: u64 = 0x4452_4f50;

/// Stream id that member `m` initializes from.
pub fn init_stream(member: usize) -> u64 {
    mix(TAG_INIT, member as u64)
}

fn order_stream(epoch: usize) -> u64 {
    mix(TAG_ORDER, epoch as u64)
}

fn aug_stream(epoch: usize, position: usize, member: Option<usize>) -> u64 {
    let s = mix(mix(TAG_AUG, epoch as u64), position as u64);
    match member {
        Some(m) => mix(s, m as u64 + 1),
        None => s,
    }
}

fn dropout_stream(member: usize, step: u64) -> u64 {
    mix(mix(TAG_DROPOUT, member as u64), step)
}

/// Training epochs by samples per class.
pub const EPOCH_TABLE: [(usize, usize); 4] = [(10, 400), (50, 300), (100, 300), (250, 250)];

/// Epoch count for `n` samples per class; an explicit override wins.
pub fn epochs_for(n_per_class: usize, override_epochs: Option<usize>) -> Result<usize> {
    if let Some(e) = override_epochs {
        return Ok(e);
    }
    EPOCH_TABLE
        .iter()
        .find(|&&(n, _)| n == n_per_class)
        .map(|&(_, e)| e)
        .ok_or(Error::UnknownEpochs(n_per_class))
}

/// Starting learning rate for SGD. Deep residual networks start lower.
pub fn default_lr0(spec: &ArchitectureSpec) -> f64 {
    let low = spec.family == Family::ResNet
        && ((spec.num_classes == 10 && spec.depth >= 26) || (spec.num_classes == 100 && spec.depth >= 110));
    if low {
        0.01
    } else {
        0.1
    }
}

/// Learning rate used during `epoch`: `lr0` before `floor(0.75 * total)`,
/// `lr0 / 10` from there on.
pub fn lr_at(epoch: usize, total: usize, lr0: f64) -> f64 {
    if epoch < decay_epoch(total) {
        lr0
    } else {
        lr0 / 10.0
    }
}

pub fn decay_epoch(total: usize) -> usize {
    total * 3 / 4
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub bn_momentum: f64,
    /// Give every member its own augmentation draws instead of sharing them.
    pub independent_member_augmentation: bool,
}

impl TrainingSchedule {
    pub fn new(epochs: usize, optimizer: Optimizer) -> Self {
        TrainingSchedule {
            epochs,
            batch_size: 32,
            optimizer,
            bn_momentum: 0.9,
            independent_member_augmentation: false,
        }
    }

    /// SGD with the default starting rate for `spec` and the tabulated epoch
    /// count for `n_per_class`.
    pub fn standard(spec: &ArchitectureSpec, n_per_class: usize, epochs: Option<usize>) -> Result<Self> {
        Ok(Self::new(
            epochs_for(n_per_class, epochs)?,
            Optimizer::sgd(default_lr0(spec)),
        ))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.epochs, self.optimizer.initial_lr())
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One trained network with its per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct TrainedMember {
    pub index: usize,
    pub model: ModelInstance<f32>,
    pub loss_trace: Vec<f64>,
}

/// Independently trained members sharing one architecture and the
/// normalization statistics of their training set.
#[derive(Clone, Debug)]
pub struct EnsembleModel {
    pub spec: ArchitectureSpec,
    pub members: Vec<ModelInstance<f32>>,
    pub stats: NormalizationStats,
    pub seed: u64,
    pub loss_traces: Vec<Vec<f64>>,
}

impl EnsembleModel {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn head(&self) -> Head {
        self.spec.head
    }

    /// `(seed, stream)` that each member was initialized from.
    pub fn member_seeds(&self) -> Vec<(u64, u64)> {
        (0..self.members.len()).map(|m| (self.seed, init_stream(m))).collect()
    }

    /// Assembles members trained separately (for example on different
    /// threads). Members must be given in index order starting at 0.
    pub fn from_members(
        spec: ArchitectureSpec,
        stats: NormalizationStats,
        seed: u64,
        members: Vec<TrainedMember>,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if members.iter().enumerate().any(|(i, m)| m.index != i) {
            return Err(Error::InvalidArgument("members must be indexed 0..M in order".into()));
        }
        let (models, traces) = members.into_iter().map(|m| (m.model, m.loss_trace)).unzip();
        Ok(EnsembleModel {
            spec,
            members: models,
            stats,
            seed,
            loss_traces: traces,
        })
    }
}

/// Progress notification after each member finishes an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub member: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Normalized `[B, H, W, C]` batch of the selected images, without
/// augmentation.
pub fn normalized_batch(split: &DatasetSplit, indices: &[usize], stats: &NormalizationStats) -> Tensor<f32> {
    let [h, w, c] = split.shape();
    let mut data = Vec::with_capacity(indices.len() * h * w * c);
    for &i in indices {
        let mut img = split.image_unit(i);
        stats.normalize_unit(&mut img);
        data.extend_from_slice(&img);
    }
    Tensor::from_vec(&[indices.len(), h, w, c], data).expect("batch shape")
}

/// `[B, K]` one-hot targets.
pub fn one_hot(labels: &[u32], k: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (row, &l) in labels.iter().enumerate() {
        t.data_mut()[row * k + l as usize] = 1.0;
    }
    t
}

/// Batch boundaries for `n` samples. A trailing batch of one sample is
/// folded into the previous batch so batch statistics always see at least
/// two samples.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n).step_by(batch_size).map(|s| s..(s + batch_size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

struct Batcher<'a> {
    data: &'a DatasetSplit,
    stats: &'a NormalizationStats,
    policy: &'a AugmentationPolicy,
    seed: u64,
}

impl Batcher<'_> {
    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        RngStream::new(self.seed, order_stream(epoch)).shuffle(&mut idx);
        idx
    }

    fn build(
        &self,
        epoch: usize,
        order: &[usize],
        range: Range<usize>,
        member: Option<usize>,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let shape = self.data.shape();
        let [h, w, c] = shape;
        let mut data = Vec::with_capacity(range.len() * h * w * c);
        let mut labels = Vec::with_capacity(range.len());
        for pos in range {
            let i = order[pos];
            let mut img = self.data.image_unit(i);
            if self.policy.level != AugLevel::None {
                let mut rng = RngStream::new(self.seed, aug_stream(epoch, pos, member));
                img = augment(&img, shape, self.policy, &mut rng)?;
            }
            self.stats.normalize_unit(&mut img);
            data.extend_from_slice(&img);
            labels.push(self.data.labels()[i]);
        }
        let x = Tensor::from_vec(&[labels.len(), h, w, c], data)?;
        Ok((x, one_hot(&labels, self.data.num_classes())))
    }
}

struct MemberState {
    index: usize,
    model: ModelInstance<f32>,
    opt: OptState<f32>,
    trace: Vec<f64>,
    epoch_loss: f64,
    step: u64,
}

impl MemberState {
    fn new(spec: &ArchitectureSpec, schedule: &TrainingSchedule, seed: u64, index: usize) -> Result<Self> {
        let mut rng = RngStream::new(seed, init_stream(index));
        let model = ModelInstance::<f32>::build(spec, &mut rng)?;
        let opt = OptState::new(
            &schedule.optimizer,
            (0..model.num_tensors()).map(|i| model.param(i).len()),
        );
        Ok(MemberState {
            index,
            model,
            opt,
            trace: Vec::with_capacity(schedule.epochs),
            epoch_loss: 0.0,
            step: 0,
        })
    }

    fn step(
        &mut self,
        x: &Tensor<f32>,
        y: &Tensor<f32>,
        schedule: &TrainingSchedule,
        lr: f64,
        seed: u64,
        epoch: usize,
    ) -> Result<()> {
        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape, ParamUse::Trainable);
        let xv = tape.constant(x);
        let mut rng = RngStream::new(seed, dropout_stream(self.index, self.step));
        let pass = self.model.forward(&mut tape, &params, xv, Mode::Train, &mut rng)?;
        let loss = zoo::loss(&mut tape, self.model.head(), pass.output, y)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { epoch, loss: value });
        }
        let mut grads = tape.backward(loss)?;
        for (i, &p) in params.iter().enumerate() {
            let g = grads.take(p)?;
            let decay = self.model.param_kind(i).decays();
            self.opt.step(
                &schedule.optimizer,
                i,
                self.model.param_mut(i).data_mut(),
                g.data(),
                lr,
                decay,
            )?;
        }
        self.model.apply_batch_stats(&pass.batch_stats, schedule.bn_momentum);
        self.epoch_loss += value * x.shape()[0] as f64;
        self.step += 1;
        Ok(())
    }
}

fn member_error(index: usize, e: Error) -> Error {
    Error::Member {
        member: index,
        source: Box::new(e),
    }
}

/// Trains members `members` of an ensemble in lockstep: each batch is
/// materialized once and every member takes one step on it.
pub fn train_members(
    spec: &ArchitectureSpec,
    data: &DatasetSplit,
    schedule: &TrainingSchedule,
    policy: &AugmentationPolicy,
    seed: u64,
    members: Range<usize>,
    observer: &mut dyn FnMut(EpochReport),
) -> Result<Vec<TrainedMember>> {
    spec.validate()?;
    schedule.validate()?;
    if members.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if data.is_empty() {
        return Err(Error::EmptySplit);
    }
    if data.shape() != spec.input || data.num_classes() != spec.num_classes {
        return Err(Error::InvalidArgument(alloc::format!(
            "data {:?} with {} classes does not fit {}",
            data.shape(),
            data.num_classes(),
            spec.name()
        )));
    }
    let stats = channel_means(data)?;
    let batcher = Batcher {
        data,
        stats: &stats,
        policy,
        seed,
    };
    let mut states = members
        .clone()
        .map(|m| MemberState::new(spec, schedule, seed, m).map_err(|e| member_error(m, e)))
        .collect::<Result<Vec<_>>>()?;
    let ranges = batch_ranges(data.len(), schedule.batch_size);
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let order = batcher.order(epoch);
        for r in &ranges {
            if schedule.independent_member_augmentation {
                for st in states.iter_mut() {
                    let (x, y) = batcher.build(epoch, &order, r.clone(), Some(st.index))?;
                    st.step(&x, &y, schedule, lr, seed, epoch)
                        .map_err(|e| member_error(st.index, e))?;
                }
            } else {
                let (x, y) = batcher.build(epoch, &order, r.clone(), None)?;
                for st in states.iter_mut() {
                    st.step(&x, &y, schedule, lr, seed, epoch)
                        .map_err(|e| member_error(st.index, e))?;
                }
            }
        }
        for st in states.iter_mut() {
            let loss = st.epoch_loss / data.len() as f64;
            st.trace.push(loss);
            st.epoch_loss = 0.0;
            observer(EpochReport {
                member: st.index,
                epoch,
                loss,
                lr,
            });
        }
    }
    Ok(states
        .into_iter()
        .map(|s| TrainedMember {
            index: s.index,
            model: s.model,
            loss_trace: s.trace,
        })
        .collect())
}

/// Trains a single network; identical to member 0 of an ensemble with the
/// same seed.
pub fn train_member(
    spec: &ArchitectureSpec,
    data: &DatasetSplit,
    schedule: &TrainingSchedule,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<TrainedMember> {
    let mut out = train_members(spec, data, schedule, policy, seed, 0..1, &mut |_| {})?;
    Ok(out.pop().expect("one member"))
}

pub fn train_ensemble(
    spec: &ArchitectureSpec,
    data: &DatasetSplit,
    m: usize,
    schedule: &TrainingSchedule,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<EnsembleModel> {
    train_ensemble_observed(spec, data, m, schedule, policy, seed, &mut |_| {})
}

pub fn train_ensemble_observed(
    spec: &ArchitectureSpec,
    data: &DatasetSplit,
    m: usize,
    schedule: &TrainingSchedule,
    policy: &AugmentationPolicy,
    seed: u64,
    observer: &mut dyn FnMut(EpochReport),
) -> Result<EnsembleModel> {
    let members = train_members(spec, data, schedule, policy, seed, 0..m, observer)?;
    EnsembleModel::from_members(spec.clone(), channel_means(data)?, seed, members)
}

/// Builds an untrained ensemble with the member initialization streams.
pub fn init_ensemble(spec: &ArchitectureSpec, data: &DatasetSplit, m: usize, seed: u64) -> Result<EnsembleModel> {
    if m == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let members = (0..m)
        .map(|i| ModelInstance::build(spec, &mut RngStream::new(seed, init_stream(i))))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        spec: spec.clone(),
        members,
        stats: channel_means(data)?,
        seed,
        loss_traces: vec![Vec::new(); m],
    })
}

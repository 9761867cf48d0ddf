//! Mini-batch training with deep supervision and periodic validation.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Ctx, Gradients, NodeId, Op, StatsLog, Tape};
use crate::error::{Error, Result};
use crate::eval::metrics::{ClassScores, ConfusionMatrix};
use crate::network::{forward_graph, init_params, predict_points, predict_probs};
use crate::params::ParameterStore;
use crate::pointcloud::{Label, PointCloud};
use crate::sparse_conv::BN_MOMENTUM;
use crate::training::augment::augment;
use crate::training::config::{LossConfig, TrainConfig};
use crate::training::labels::label_pyramid;
use crate::training::optim::Adam;
use crate::voxelizer::voxelize;

/// Loss values of one scene or averaged over several.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub lovasz: f64,
    /// Unweighted sum of auxiliary terms.
    pub aux: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.total += o.total;
        self.ce += o.ce;
        self.lovasz += o.lovasz;
        self.aux += o.aux;
    }

    fn scaled(mut self, f: f64) -> Self {
        self.total *= f;
        self.ce *= f;
        self.lovasz *= f;
        self.aux *= f;
        self
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub lovasz: f64,
    pub aux: f64,
    pub val_miou: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub records: Vec<EpochRecord>,
    pub final_scores: Option<ClassScores>,
}

/// Builds the supervised loss for `labels` on a tape. Returns `None` when
/// no term has a valid target.
fn add_terms(
    tape: &mut Tape,
    logits: &NodeId,
    probs: Option<&NodeId>,
    labels: &Arc<Vec<Label>>,
    cfg: &LossConfig,
    lovasz: bool,
    out: &mut Vec<(NodeId, &'static str)>,
) -> Result<()> {
    if labels.iter().all(|&l| l == cfg.ignore_label) {
        return Ok(());
    }
    if cfg.use_ce {
        let ce = tape.apply(Op::CrossEntropy { labels: labels.clone(), ignore: cfg.ignore_label }, &[logits])?;
        out.push((ce, "ce"));
    }
    if cfg.use_lovasz && lovasz {
        let p = match probs {
            Some(p) => *p,
            None => tape.apply(Op::Softmax, &[logits])?,
        };
        let l = tape.apply(Op::Lovasz { labels: labels.clone(), ignore: cfg.ignore_label }, &[&p])?;
        out.push((l, "lovasz"));
    }
    Ok(())
}

/// Forward and backward pass for one labelled cloud in train mode.
/// Returns `None` if the cloud has no usable labels.
pub fn scene_gradients(
    store: &ParameterStore,
    cfg: &TrainConfig,
    cloud: &PointCloud,
) -> Result<Option<(LossTerms, Gradients, StatsLog)>> {
    let labels = cloud.labels().ok_or_else(|| Error::format("training cloud has no labels"))?;
    let (t0, map) = voxelize(cloud, &cfg.grid()?)?;
    if t0.is_empty() {
        return Ok(None);
    }
    let net = &cfg.network;
    let lc = &cfg.loss;
    let mut tape = Tape::new(store).train_mode(true);
    let out = forward_graph(&mut tape, t0.coord_set(), t0.feats().clone(), net)?;
    let stages: Vec<_> = out.taps.iter().map(|t| t.coords.clone()).collect();
    let pyramid = label_pyramid(&map, labels, t0.coord_set(), &stages, net.stage_stride, net.num_classes, lc.ignore_label)?;

    let mut main = Vec::new();
    add_terms(&mut tape, &out.logits, Some(&out.probs), &Arc::new(pyramid[0].clone()), lc, true, &mut main)?;
    if main.is_empty() {
        return Ok(None);
    }
    let mut aux = Vec::new();
    if lc.dss {
        for (tap, labels) in out.taps.iter().zip(&pyramid[1..]) {
            add_terms(&mut tape, &tap.aux_logits, None, &Arc::new(labels.clone()), lc, lc.aux_full_mix, &mut aux)?;
        }
    }

    let mut weights = vec![1.0; main.len()];
    weights.extend(std::iter::repeat_n(lc.aux_weight, aux.len()));
    let nodes: Vec<&NodeId> = main.iter().chain(&aux).map(|(n, _)| n).collect();
    let total = tape.apply(Op::WeightedSum { weights }, &nodes)?;

    let mut terms = LossTerms { total: tape.value(&total)[[0, 0]], ..Default::default() };
    for (n, kind) in &main {
        let v = tape.value(n)[[0, 0]];
        match *kind {
            "ce" => terms.ce += v,
            _ => terms.lovasz += v,
        }
    }
    terms.aux = aux.iter().map(|(n, _)| tape.value(n)[[0, 0]]).sum();
    if !terms.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", terms.total)));
    }
    let grads = tape.backward(total)?;
    let stats = std::mem::take(&mut tape.stats);
    Ok(Some((terms, grads, stats)))
}

/// Point predictions for an unlabelled or labelled cloud.
pub fn predict_cloud(store: &ParameterStore, cfg: &TrainConfig, cloud: &PointCloud) -> Result<Vec<Label>> {
    let (t0, map) = voxelize(cloud, &cfg.grid()?)?;
    if t0.is_empty() {
        return Ok(vec![cfg.network.unlabeled; cloud.len()]);
    }
    let p = predict_probs(&t0, &cfg.network, store)?;
    predict_points(&p, &map, cfg.network.unlabeled)
}

/// Runs `f` over `items` on up to `threads` scoped workers, keeping order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Confusion matrix of point predictions over `clouds`.
pub fn evaluate(store: &ParameterStore, cfg: &TrainConfig, clouds: &[PointCloud]) -> Result<ConfusionMatrix> {
    let results = parallel_map(clouds, cfg.worker_threads(), |pc| {
        let preds = predict_cloud(store, cfg, pc)?;
        let mut cm = ConfusionMatrix::new(cfg.network.num_classes, cfg.loss.ignore_label);
        let gts = pc.labels().ok_or_else(|| Error::format("evaluation cloud has no labels"))?;
        cm.accumulate(&preds, gts)?;
        Ok::<_, Error>(cm)
    });
    let mut total = ConfusionMatrix::new(cfg.network.num_classes, cfg.loss.ignore_label);
    for cm in results {
        total.merge(&cm?)?;
    }
    Ok(total)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParameterStore,
    pub adam: Adam,
    pub step: usize,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let store = init_params(&cfg.network, cfg.seed)?;
        Ok(Self { cfg, store, adam: Adam::new(), step: 0, epoch: 0 })
    }

    /// Continues from existing parameters, e.g. a checkpoint.
    pub fn with_params(cfg: TrainConfig, store: ParameterStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, store, adam: Adam::new(), step: 0, epoch: 0 })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.schedule.lr(self.epoch)
    }

    /// One optimizer step over `batch`: gradients are averaged over the
    /// scenes that have labels, then running statistics and Adam are
    /// applied in batch order.
    pub fn train_step(&mut self, batch: &[PointCloud]) -> Result<Option<LossTerms>> {
        let results = parallel_map(batch, self.cfg.worker_threads(), |pc| scene_gradients(&self.store, &self.cfg, pc));
        self.store.zero_grads();
        let mut sum = LossTerms::default();
        let mut used = 0usize;
        for r in results {
            let Some((terms, grads, stats)) = r? else { continue };
            grads.accumulate_into(&mut self.store)?;
            for (prefix, mean, var) in stats.0 {
                self.store.update_running_stats(&prefix, &mean, &var, BN_MOMENTUM)?;
            }
            sum.add(&terms);
            used += 1;
        }
        if used == 0 {
            return Ok(None);
        }
        self.store.scale_grads(1.0 / used as f64);
        let lr = self.lr();
        self.adam.step(&mut self.store, lr)?;
        self.step += 1;
        if !self.store.all_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite at step {}", self.step)));
        }
        Ok(Some(sum.scaled(1.0 / used as f64)))
    }

    fn budget_left(&self) -> bool {
        self.cfg.max_steps.is_none_or(|m| self.step < m)
    }

    /// Trains until the epoch count or step budget runs out, emitting a
    /// record after every epoch.
    pub fn fit(
        &mut self,
        train: &[PointCloud],
        val: &[PointCloud],
        mut on_record: impl FnMut(&EpochRecord),
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::Empty("no training scenes".into()));
        }
        let mut records = Vec::new();
        let mut final_scores = None;
        let start_epoch = self.epoch;
        while self.epoch < start_epoch + self.cfg.epochs && self.budget_left() {
            let t = Instant::now();
            let lr = self.lr();
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, self.epoch as u64, 0)));

            let mut sum = LossTerms::default();
            let mut steps = 0usize;
            for chunk in order.chunks(self.cfg.batch_size) {
                if !self.budget_left() {
                    break;
                }
                let batch = chunk
                    .iter()
                    .map(|&i| {
                        if self.cfg.augment {
                            augment(&train[i], &self.cfg.augmentation, mix(self.cfg.seed, self.epoch as u64 + 1, i as u64))
                        } else {
                            Ok(train[i].clone())
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                if let Some(terms) = self.train_step(&batch)? {
                    sum.add(&terms);
                    steps += 1;
                }
            }
            self.epoch += 1;
            let last = self.epoch == start_epoch + self.cfg.epochs || !self.budget_left();
            let val_miou = if !val.is_empty() && (last || (self.epoch - start_epoch) % self.cfg.validate_every == 0) {
                let scores = evaluate(&self.store, &self.cfg, val)?.scores()?;
                let m = scores.miou;
                final_scores = Some(scores);
                Some(m)
            } else {
                None
            };
            let mean = sum.scaled(1.0 / steps.max(1) as f64);
            let rec = EpochRecord {
                epoch: self.epoch,
                step: self.step,
                lr,
                loss: mean.total,
                ce: mean.ce,
                lovasz: mean.lovasz,
                aux: mean.aux,
                val_miou,
                seconds: t.elapsed().as_secs_f64(),
            };
            log::info!("epoch {} step {} loss {:.4} val_miou {:?}", rec.epoch, rec.step, rec.loss, rec.val_miou);
            on_record(&rec);
            records.push(rec);
        }
        Ok(TrainSummary { steps: self.step, epochs: self.epoch - start_epoch, records, final_scores })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_tensor::ScaleSet;
    use crate::training::config::{DataConfig, SceneKind};
    use crate::training::config::load_dataset;

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            voxel_size: 0.5,
            data: DataConfig::Synthetic { scene: SceneKind::Toy, num_scenes: 5, num_points: 600, val_fraction: 0.2 },
            ..Default::default()
        };
        cfg.network.num_blocks = 2;
        cfg.network.channels = 8;
        cfg.network.num_classes = 3;
        cfg.network.scales = ScaleSet::new(vec![2, 4]).unwrap();
        cfg
    }

    #[test]
    fn one_epoch_runs_and_logs() {
        let cfg = tiny();
        let (train, val) = load_dataset(&cfg).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.store.clone();
        let mut seen = 0;
        let s = t.fit(&train, &val, |_| seen += 1).unwrap();
        assert_eq!((s.steps, s.epochs, seen), (2, 1, 1));
        assert!(s.records[0].loss > 0.0);
        assert!(s.records[0].aux > 0.0);
        assert!(s.final_scores.is_some());
        assert_ne!(before, t.store);
        assert!(t.store.get("stem.bn.running_var").unwrap().value.iter().any(|&v| v != 1.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = TrainConfig { max_steps: Some(1), ..tiny() };
        let (train, val) = load_dataset(&cfg).unwrap();
        let mut a = Trainer::new(cfg.clone()).unwrap();
        let mut b = Trainer::new(TrainConfig { threads: 2, ..cfg }).unwrap();
        a.fit(&train, &val, |_| ()).unwrap();
        b.fit(&train, &val, |_| ()).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.step, 1);
    }

    #[test]
    fn no_dss_has_no_aux() {
        let mut cfg = TrainConfig { max_steps: Some(1), ..tiny() };
        cfg.loss.dss = false;
        let (train, _) = load_dataset(&cfg).unwrap();
        let (terms, grads, _) = scene_gradients(&init_params(&cfg.network, 0).unwrap(), &cfg, &train[0]).unwrap().unwrap();
        assert_eq!(terms.aux, 0.0);
        assert!((terms.total - terms.ce - terms.lovasz).abs() < 1e-12);
        assert!(!grads.params.contains_key("block1.aux.w"));
    }

    #[test]
    fn unlabeled_scene_is_skipped() {
        let cfg = tiny();
        let pc = PointCloud::new(vec![[0.0; 3]], vec![0.5], Some(vec![255])).unwrap();
        let store = init_params(&cfg.network, 0).unwrap();
        assert!(scene_gradients(&store, &cfg, &pc).unwrap().is_none());
        let mut t = Trainer::new(cfg).unwrap();
        assert!(t.train_step(&[pc]).unwrap().is_none());
        assert_eq!(t.step, 0);
    }
}

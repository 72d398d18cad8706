//! Momentum-SGD training, evaluation and prediction dumps.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, Dataset, Normalizer};
use crate::error::{invalid_arg, invalid_state, Error, Result};
use crate::nn::{Forward, Mode, ParamId, ParamRole, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::wsms::WsmsNet;

/// SplitMix64 finalizer chained over `tags`; used to derive independent
/// per-epoch and per-record generators from one run seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Piecewise-constant learning rate given as `(epoch, lr)` change points.
/// The first change point must be epoch 1.
pub fn lr_at(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .take_while(|&&(e, _)| e <= epoch.max(1))
        .last()
        .or(schedule.first())
        .map(|&(_, lr)| lr)
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
    pub eval_every: usize,
    pub augment: bool,
    /// Apply weight decay to batch-norm gamma and beta as well.
    pub bn_decay: bool,
    /// Zero the wallclock field so metrics files compare bitwise.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::resnet()
    }
}

impl TrainConfig {
    /// 164 epochs, warm-up at 0.01, then 0.1 / 0.01 / 0.001 from epochs 2 / 82 / 123.
    pub fn resnet() -> Self {
        Self {
            epochs: 164,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: vec![(1, 0.01), (2, 0.1), (82, 0.01), (123, 0.001)],
            seed: 0,
            eval_every: 1,
            augment: true,
            bn_decay: true,
            deterministic: false,
        }
    }

    /// 300 epochs at 0.1, reduced to 0.01 at epoch 150 and 0.001 at 225.
    pub fn densenet() -> Self {
        Self {
            epochs: 300,
            lr_schedule: vec![(1, 0.1), (150, 0.01), (225, 0.001)],
            ..Self::resnet()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(&self.lr_schedule, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid_arg!("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid_arg!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid_arg!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.eval_every == 0 {
            return Err(invalid_arg!("eval_every must be positive"));
        }
        match self.lr_schedule.first() {
            None => return Err(invalid_arg!("lr_schedule is empty")),
            Some(&(e, _)) if e != 1 => return Err(invalid_arg!("lr_schedule must start at epoch 1, starts at {e}")),
            _ => {}
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(invalid_arg!("lr_schedule epochs must increase strictly ({} then {})", w[0].0, w[1].0));
            }
        }
        if let Some(&(e, lr)) = self.lr_schedule.iter().find(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return Err(invalid_arg!("learning rate at epoch {e} must be positive, got {lr}"));
        }
        Ok(())
    }
}

/// Momentum buffers keyed by parameter.
pub type Velocity<T> = BTreeMap<ParamId, Vec<T>>;

/// `v = momentum * v + g + wd * p; p -= lr * v` for every parameter in the
/// store. Each parameter id is updated exactly once.
pub fn sgd_momentum_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<ParamId, Tensor<T>>,
    velocity: &mut Velocity<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    bn_decay: bool,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        if !grads.contains_key(&id) {
            return Err(invalid_state!("missing gradient for trainable parameter {id}"));
        }
    }
    let (lr, m) = (T::of(lr), T::of(momentum));
    for id in ids {
        let g = &grads[&id];
        let wd = match store.get(id).map(|e| e.role) {
            Some(ParamRole::Bn) if !bn_decay => T::zero(),
            _ => T::of(weight_decay),
        };
        let p = store.tensor_mut(id)?;
        if g.shape() != p.shape() {
            return Err(invalid_state!("gradient for {id} has shape {:?}, parameter {:?}", g.shape(), p.shape()));
        }
        let v = velocity.entry(id).or_insert_with(|| vec![T::zero(); g.numel()]);
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vi = m * *vi + gi + wd * *pi;
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
    pub lr: f64,
    pub wallclock: f64,
    /// Error (%) on additional evaluation splits.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub id: u64,
    pub truth: usize,
    pub pred: usize,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.truth == self.pred
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Misclassified share in percent.
    pub error: f64,
    pub loss: f64,
    /// Ordered by example id.
    pub predictions: Vec<Prediction>,
}

/// Eval-mode forward pass of the whole dataset.
pub fn evaluate<T: Scalar>(net: &WsmsNet, store: &ParamStore<T>, ds: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let classes = net.spec.backbone.class_count;
    if ds.class_count != classes {
        return Err(invalid_arg!("dataset has {} classes, model has {classes}", ds.class_count));
    }
    if ds.is_empty() {
        return Err(invalid_arg!("cannot evaluate on an empty dataset"));
    }
    let mut predictions = Vec::with_capacity(ds.len());
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let x = g.constant(ds.batch::<T>(chunk));
        let labels = ds.labels_of(chunk);
        let mut ctx = Forward::new(&mut g, store, Mode::Eval);
        ctx.set_trainable(false);
        let logits = net.forward(&mut ctx, x)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        loss_sum += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
        for (row, &i) in g.value(logits).data().chunks(classes).zip(chunk) {
            predictions.push(Prediction { id: ds.ids[i], truth: ds.labels[i], pred: argmax(row) });
        }
    }
    predictions.sort_by_key(|p| p.id);
    let wrong = predictions.iter().filter(|p| !p.correct()).count();
    Ok(Evaluation {
        error: 100.0 * wrong as f64 / ds.len() as f64,
        loss: loss_sum / ds.len() as f64,
        predictions,
    })
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut out = String::from("id,true,pred,correct\n");
    for p in predictions {
        out.push_str(&format!("{},{},{},{}\n", p.id, p.truth, p.pred, p.correct() as u8));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if n == 0 {
            if line.trim() != "id,true,pred,correct" {
                return Err(Error::Format(format!("{}: unexpected header `{line}`", path.display())));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("{}:{}: malformed row `{line}`", path.display(), n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let p = Prediction {
            id: f[0].trim().parse().map_err(|_| bad())?,
            truth: f[1].trim().parse().map_err(|_| bad())?,
            pred: f[2].trim().parse().map_err(|_| bad())?,
        };
        let flag: u8 = f[3].trim().parse().map_err(|_| bad())?;
        if flag != p.correct() as u8 {
            return Err(bad());
        }
        rows.push(p);
    }
    Ok(rows)
}

/// Ids misclassified by every baseline and classified correctly by the
/// target, restricted to ids present in all dumps.
pub fn compare_preds(baselines: &[Vec<Prediction>], target: &[Prediction]) -> Result<Vec<u64>> {
    if baselines.is_empty() {
        return Err(invalid_arg!("at least one baseline dump is required"));
    }
    let mut ids: BTreeSet<u64> = target.iter().filter(|p| p.correct()).map(|p| p.id).collect();
    for b in baselines {
        let wrong: BTreeSet<u64> = b.iter().filter(|p| !p.correct()).map(|p| p.id).collect();
        ids = &ids & &wrong;
    }
    Ok(ids.into_iter().collect())
}

/// Datasets consumed by [`train`]. `test` drives best-checkpoint selection;
/// `extra` splits are evaluated alongside it.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Dataset,
    pub extra: Vec<(String, Dataset)>,
    pub normalizer: Option<Normalizer>,
}

pub struct TrainOutcome<T> {
    pub metrics: Vec<MetricsRecord>,
    pub final_checkpoint: Checkpoint<T>,
    pub best_checkpoint: Checkpoint<T>,
    pub best_epoch: usize,
    pub final_test_error: f64,
    pub best_test_error: f64,
}

/// Loss and number of correct predictions of one optimization step.
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// Forward, backward and one momentum-SGD update on a single batch. Batch
/// norm runs in train mode and its running statistics are updated.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    net: &WsmsNet,
    store: &mut ParamStore<T>,
    velocity: &mut Velocity<T>,
    x: Tensor<T>,
    labels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (logits, loss, updates) = {
        let mut ctx = Forward::new(&mut g, store, Mode::Train);
        let logits = net.forward(&mut ctx, xv)?;
        let updates = ctx.take_bn_updates();
        let loss = g.softmax_cross_entropy(logits, labels)?;
        (logits, loss, updates)
    };
    let loss_value = g.value(loss).data()[0].as_f64();
    let classes = net.spec.backbone.class_count;
    let correct = g
        .value(logits)
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    if !loss_value.is_finite() {
        return Ok(StepStats { loss: loss_value, correct });
    }
    let grads = g.backward(loss)?.into_params();
    sgd_momentum_step(store, &grads, velocity, lr, cfg.momentum, cfg.weight_decay, cfg.bn_decay)?;
    store.apply_bn_updates(&updates)?;
    Ok(StepStats { loss: loss_value, correct })
}

fn snapshot<T: Scalar>(store: &ParamStore<T>, data: &TrainData, epoch: usize, test_error: f64) -> Checkpoint<T> {
    Checkpoint {
        store: store.clone(),
        normalizer: data.normalizer.clone(),
        meta: serde_json::json!({ "epoch": epoch, "test_error": test_error }).to_string(),
    }
}

/// Runs `cfg.epochs` epochs. An epoch-0 record evaluates the initial model.
/// Every record is passed to `sink` as soon as it is produced.
pub fn train<T: Scalar>(
    net: &WsmsNet,
    store: &mut ParamStore<T>,
    data: &TrainData,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let classes = net.spec.backbone.class_count;
    for (name, ds) in [("train", &data.train), ("test", &data.test)]
        .into_iter()
        .chain(data.extra.iter().map(|(n, d)| (n.as_str(), d)))
    {
        if ds.class_count != classes {
            return Err(invalid_arg!("{name} split has {} classes, model has {classes}", ds.class_count));
        }
    }
    if data.train.is_empty() {
        return Err(invalid_arg!("training split is empty"));
    }
    let start = Instant::now();
    let clock = |s: &Instant| if cfg.deterministic { 0.0 } else { s.elapsed().as_secs_f64() };
    let eval_extra = |store: &ParamStore<T>| -> Result<BTreeMap<String, f64>> {
        data.extra
            .iter()
            .map(|(n, d)| Ok((n.clone(), evaluate(net, store, d, cfg.batch_size)?.error)))
            .collect()
    };

    let mut metrics = Vec::new();
    let init_train = evaluate(net, store, &data.train, cfg.batch_size)?;
    let init_test = evaluate(net, store, &data.test, cfg.batch_size)?;
    let record = MetricsRecord {
        epoch: 0,
        train_loss: Some(init_train.loss),
        train_error: Some(init_train.error),
        test_error: Some(init_test.error),
        lr: cfg.lr_at(1),
        wallclock: clock(&start),
        extra: eval_extra(store)?,
    };
    sink(&record)?;
    metrics.push(record);
    let mut best = (init_test.error, 0usize, snapshot(store, data, 0, init_test.error));
    let mut last_test = init_test.error;

    let mut velocity = Velocity::new();
    let n = data.train.len();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = if cfg.augment {
                let mut batch = Dataset::empty(data.train.channels, data.train.height, data.train.width, classes);
                for &i in chunk {
                    let img = data.train.get(i);
                    let mut rng = derive_rng(cfg.seed, &[epoch as u64, img.id]);
                    batch.push(&augment(&img, &mut rng))?;
                }
                batch.batch::<T>(&(0..chunk.len()).collect::<Vec<_>>())
            } else {
                data.train.batch::<T>(chunk)
            };
            let labels = data.train.labels_of(chunk);
            let stats = train_step(net, store, &mut velocity, x, &labels, lr, cfg)?;
            if !stats.loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss: stats.loss });
            }
            loss_sum += stats.loss * chunk.len() as f64;
            correct += stats.correct;
        }
        let evaluate_now = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let (test_error, extra) = if evaluate_now {
            let e = evaluate(net, store, &data.test, cfg.batch_size)?.error;
            (Some(e), eval_extra(store)?)
        } else {
            (None, BTreeMap::new())
        };
        let record = MetricsRecord {
            epoch,
            train_loss: Some(loss_sum / n as f64),
            train_error: Some(100.0 * (n - correct) as f64 / n as f64),
            test_error,
            lr,
            wallclock: clock(&start),
            extra,
        };
        log::info!("{}", record.to_json());
        sink(&record)?;
        metrics.push(record);
        if let Some(e) = test_error {
            last_test = e;
            if e < best.0 {
                best = (e, epoch, snapshot(store, data, epoch, e));
            }
        }
    }
    let last_epoch = metrics.last().map(|m| m.epoch).unwrap_or(0);
    Ok(TrainOutcome {
        metrics,
        final_checkpoint: snapshot(store, data, last_epoch, last_test),
        best_checkpoint: best.2,
        best_epoch: best.1,
        final_test_error: last_test,
        best_test_error: best.0,
    })
}

/// Appends records as JSON lines.
pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", r.to_json())?;
    }
    Ok(())
}

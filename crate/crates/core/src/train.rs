//! Training loop: patch sampling, deep-supervision loss, momentum SGD with
//! poly decay, periodic validation, logging and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::io::KeyValues;
use crate::loss::total_loss;
use crate::metrics::{dice_metric, hd95, MetricRow};
use crate::network::{NetConfig, Network};
use crate::optim::{poly_lr, sgd_step, SgdConfig, INITIAL_LR, MOMENTUM, WEIGHT_DECAY};
use crate::preprocess::{mirror_augment, SegSample};
use crate::volume::Shape3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patch: Shape3,
    /// Validate after every `val_every` epochs and after the last one.
    pub val_every: usize,
    /// Probability that a patch is centred on a foreground voxel.
    pub foreground_prob: f64,
    pub mirror_axes: [bool; 3],
    /// Sliding-window overlap used for validation.
    pub overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 1000,
            initial_lr: INITIAL_LR,
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            batch_size: 2,
            patch: [32; 3],
            val_every: 10,
            foreground_prob: 1.0 / 3.0,
            mirror_axes: [true; 3],
            overlap: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be at least 1"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::arg(format!("learning rate must be positive, got {}", self.initial_lr)));
        }
        if self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::arg("batch size and validation interval must be positive"));
        }
        if self.patch.contains(&0) {
            return Err(Error::arg("patch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.foreground_prob) || !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::arg("foreground probability must be in [0,1] and overlap in [0,1)"));
        }
        Ok(())
    }

    /// Overrides from `key=value` text; unknown keys are rejected.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        let err = |m: String| Error::Config(m);
        for key in kv.keys() {
            match key {
                "seed" => self.seed = kv.parse_value(key).map_err(err)?,
                "epochs" => self.epochs = kv.parse_value(key).map_err(err)?,
                "lr" | "initial_lr" => self.initial_lr = kv.parse_value(key).map_err(err)?,
                "momentum" => self.momentum = kv.parse_value(key).map_err(err)?,
                "weight_decay" => self.weight_decay = kv.parse_value(key).map_err(err)?,
                "batch" | "batch_size" => self.batch_size = kv.parse_value(key).map_err(err)?,
                "val_every" => self.val_every = kv.parse_value(key).map_err(err)?,
                "foreground_prob" => self.foreground_prob = kv.parse_value(key).map_err(err)?,
                "overlap" => self.overlap = kv.parse_value(key).map_err(err)?,
                "patch" => {
                    let p: Vec<usize> = kv.parse_list(key).map_err(err)?;
                    self.patch = match p.as_slice() {
                        [n] => [*n; 3],
                        [a, b, c] => [*a, *b, *c],
                        _ => return Err(err(format!("patch needs 1 or 3 values, got {}", p.len()))),
                    };
                }
                "mirror_axes" => {
                    let m: Vec<u8> = kv.parse_list(key).map_err(err)?;
                    self.mirror_axes = <[u8; 3]>::try_from(m)
                        .map_err(|_| err("mirror_axes needs 3 values".into()))?
                        .map(|v| v != 0);
                }
                other => return Err(err(format!("unknown training key `{other}`"))),
            }
        }
        self.validate()
    }
}

/// Result of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Zero-based epoch index, the `E_cur` of the learning-rate schedule.
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's samples.
    pub loss: f64,
    /// Per foreground class mean validation Dice, when validated.
    pub val_dice: Option<Vec<f64>>,
}

impl EpochRecord {
    pub fn mean_dice(&self) -> Option<f64> {
        self.val_dice.as_ref().map(|d| mean(d))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Crops a training patch; with probability `foreground_prob` the patch
/// is centred (as far as the borders allow) on a random foreground voxel.
/// Volumes smaller than the patch are zero-padded first.
pub fn sample_patch(sample: &SegSample, patch: Shape3, foreground_prob: f64, rng: &mut impl Rng) -> Result<SegSample> {
    let shape = sample.label.shape();
    let padded: Shape3 = std::array::from_fn(|a| shape[a].max(patch[a]));
    let (image, label) = if padded == shape {
        (sample.image.clone(), sample.label.clone())
    } else {
        (sample.image.embed([0; 3], padded)?, sample.label.embed([0; 3], padded)?)
    };
    let force = rng.random_bool(foreground_prob);
    let foreground: Vec<usize> = if force {
        label
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0)
            .map(|(i, _)| i)
            .collect()
    } else {
        Vec::new()
    };
    let origin: Shape3 = if !foreground.is_empty() {
        let o = foreground[rng.random_range(0..foreground.len())];
        let v = [o / (padded[1] * padded[2]), (o / padded[2]) % padded[1], o % padded[2]];
        std::array::from_fn(|a| v[a].saturating_sub(patch[a] / 2).min(padded[a] - patch[a]))
    } else {
        std::array::from_fn(|a| rng.random_range(0..=padded[a] - patch[a]))
    };
    SegSample::new(sample.case_id.clone(), image.crop(origin, patch)?, label.crop(origin, patch)?)
}

/// Model, optimizer state and progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network<f32>,
    pub momentum: Vec<Vec<f32>>,
    pub cfg: TrainConfig,
    /// Next epoch to run.
    pub epoch: usize,
    pub best_dice: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl Trainer {
    /// Fresh network initialized from `cfg.seed`.
    pub fn new(net_cfg: NetConfig, cfg: TrainConfig) -> Result<Self> {
        let net = Network::new(net_cfg, cfg.seed)?;
        Self::with_network(net, cfg)
    }

    pub fn with_network(net: Network<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let momentum = net.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
        Ok(Trainer {
            net,
            momentum,
            cfg,
            epoch: 0,
            best_dice: None,
            best_epoch: None,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Every random draw of epoch `e` comes from stream `e` of the run seed,
    /// so a resumed run repeats an uninterrupted one exactly.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// Forward and backward on one patch; returns the loss and adds the
    /// gradients into `acc`.
    fn accumulate(&self, patch: &SegSample, acc: &mut [Vec<f32>]) -> Result<f64> {
        let mut g = Graph::new();
        let pass = self.net.forward(&mut g, &patch.image)?;
        let loss = total_loss(&mut g, &pass.heads, &patch.label)?;
        let value = f64::from(g.value(loss.total).data()[0]);
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss on case {} in epoch {}",
                patch.case_id, self.epoch
            )));
        }
        let grads = g.backward(loss.total)?;
        for (slot, &var) in acc.iter_mut().zip(&pass.params) {
            let grad = grads.get(var).expect("parameter leaves receive gradients");
            slot.iter_mut().zip(grad.data()).for_each(|(a, &b)| *a += b);
        }
        Ok(value)
    }

    /// One pass over the training cases in shuffled order, one optimizer
    /// step per batch. Returns the learning rate and mean loss.
    pub fn run_epoch(&mut self, train: &[SegSample]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::Empty("no training cases".into()));
        }
        let lr = poly_lr(self.cfg.initial_lr, self.epoch, self.cfg.epochs);
        let sgd = SgdConfig {
            lr,
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
        };
        let mut rng = self.epoch_rng(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let mut acc: Vec<Vec<f32>> = self.net.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
            for &i in batch {
                let patch = sample_patch(&train[i], self.cfg.patch, self.cfg.foreground_prob, &mut rng)?;
                let patch = mirror_augment(&patch, self.cfg.mirror_axes, &mut rng);
                total += self.accumulate(&patch, &mut acc)?;
            }
            let scale = 1.0 / batch.len() as f32;
            for ((p, grad), vel) in self.net.params_mut().iter_mut().zip(&mut acc).zip(&mut self.momentum) {
                if p.frozen {
                    continue;
                }
                grad.iter_mut().for_each(|g| *g *= scale);
                sgd_step(&p.name, &mut p.values, grad, vel, sgd)?;
            }
        }
        self.epoch += 1;
        Ok((lr, total / train.len() as f64))
    }

    /// Mean Dice per foreground class over the validation cases.
    pub fn validate(&self, val: &[SegSample]) -> Result<Vec<f64>> {
        let classes = self.net.config().num_classes as u32;
        let mut sums = vec![0.0; classes as usize - 1];
        for case in val {
            let pred = self.net.infer(&case.image, self.cfg.patch, self.cfg.overlap)?;
            for c in 1..classes {
                sums[c as usize - 1] += dice_metric(&pred, &case.label, c)?;
            }
        }
        Ok(sums.iter().map(|s| s / val.len().max(1) as f64).collect())
    }

    fn should_validate(&self) -> bool {
        self.epoch.is_multiple_of(self.cfg.val_every) || self.epoch == self.cfg.epochs
    }

    pub fn checkpoint(&self, with_momentum: bool) -> Checkpoint {
        let mut meta = KeyValues::new();
        meta.insert("epoch", self.epoch);
        meta.insert("seed", self.cfg.seed);
        meta.insert("epochs", self.cfg.epochs);
        if let (Some(d), Some(e)) = (self.best_dice, self.best_epoch) {
            meta.insert("best_dice", d);
            meta.insert("best_epoch", e);
        }
        Checkpoint {
            net: self.net.clone(),
            momentum: with_momentum.then(|| self.momentum.clone()),
            meta,
        }
    }

    /// Continues from a checkpoint written with momentum.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let momentum = ckpt
            .momentum
            .ok_or_else(|| Error::config("checkpoint has no optimizer state to resume from"))?;
        let get = |k: &str| ckpt.meta.get(k).and_then(|v| v.parse::<f64>().ok());
        Ok(Trainer {
            net: ckpt.net,
            momentum,
            cfg,
            epoch: get("epoch").map_or(0, |e| e as usize),
            best_dice: get("best_dice"),
            best_epoch: get("best_epoch").map(|e| e as usize),
        })
    }

    /// Runs the remaining epochs. With an output directory, appends to
    /// `log.csv`, keeps `last.nvckpt` (with optimizer state) current at
    /// every validation, and writes `best.nvckpt` when mean validation
    /// Dice improves.
    pub fn fit(
        &mut self,
        train: &[SegSample],
        val: &[SegSample],
        out: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        let log = out.map(|dir| TrainLog::open(dir, self.net.config().num_classes - 1)).transpose()?;
        let mut history = Vec::new();
        while !self.is_finished() {
            let (lr, loss) = self.run_epoch(train)?;
            let val_dice = if self.should_validate() && !val.is_empty() {
                Some(self.validate(val)?)
            } else {
                None
            };
            let record = EpochRecord {
                epoch: self.epoch - 1,
                lr,
                loss,
                val_dice,
            };
            let improved = record
                .mean_dice()
                .is_some_and(|d| self.best_dice.is_none_or(|best| d > best));
            if improved {
                self.best_dice = record.mean_dice();
                self.best_epoch = Some(record.epoch);
            }
            if let (Some(dir), Some(log)) = (out, &log) {
                log.append(&record)?;
                if improved {
                    save_checkpoint(&dir.join("best.nvckpt"), &self.checkpoint(false))?;
                }
                if record.val_dice.is_some() || self.is_finished() {
                    save_checkpoint(&dir.join("last.nvckpt"), &self.checkpoint(true))?;
                }
            }
            on_epoch(&record);
            history.push(record);
        }
        Ok(history)
    }
}

/// Resumes from `dir/last.nvckpt` when it exists.
pub fn trainer_for_dir(dir: &Path, net_cfg: NetConfig, cfg: TrainConfig) -> Result<Trainer> {
    let last = dir.join("last.nvckpt");
    if last.exists() {
        Trainer::resume(load_checkpoint(&last)?, cfg)
    } else {
        Trainer::new(net_cfg, cfg)
    }
}

struct TrainLog {
    path: PathBuf,
    fg_classes: usize,
}

impl TrainLog {
    fn open(dir: &Path, fg_classes: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("log.csv");
        if !path.exists() {
            let mut header = String::from("epoch,lr,loss");
            for c in 1..=fg_classes {
                header.push_str(&format!(",dice_class{c}"));
            }
            header.push_str(",mean_dice\n");
            fs::write(&path, header).map_err(|e| Error::io(&path, e))?;
        }
        Ok(TrainLog { path, fg_classes })
    }

    fn append(&self, r: &EpochRecord) -> Result<()> {
        let mut line = format!("{},{:.9},{:.9}", r.epoch, r.lr, r.loss);
        match &r.val_dice {
            Some(d) => {
                for v in d {
                    line.push_str(&format!(",{v:.6}"));
                }
                line.push_str(&format!(",{:.6}", mean(d)));
            }
            None => line.push_str(&",".repeat(self.fg_classes + 1)),
        }
        line.push('\n');
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Dice and HD95 for every case and foreground class.
pub fn evaluate(net: &Network<f32>, cases: &[SegSample], patch: Shape3, overlap: f64) -> Result<Vec<MetricRow>> {
    let classes = net.config().num_classes as u32;
    let mut rows = Vec::new();
    for case in cases {
        let pred = net.infer(&case.image, patch, overlap)?;
        for c in 1..classes {
            rows.push(MetricRow {
                case_id: case.case_id.clone(),
                class: c,
                dice: dice_metric(&pred, &case.label, c)?,
                hd95_mm: hd95(&pred, &case.label, c, case.spacing())?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{decode_checkpoint, encode_checkpoint};
    use crate::preprocess::{fingerprint, make_phantoms, normalize};

    fn cases(n: usize) -> Vec<SegSample> {
        let ds = make_phantoms(n, [32; 3], 3, 11).unwrap();
        let fp = fingerprint(&ds).unwrap();
        ds.cases.iter().map(|c| normalize(c, &fp)).collect()
    }

    fn tiny() -> NetConfig {
        NetConfig::new(1, 3, 2, 4, 0).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            seed: 5,
            epochs,
            val_every: 2,
            ..Default::default()
        }
    }

    #[test]
    fn forced_patches_contain_foreground() {
        let case = &cases(1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let p = sample_patch(case, [16, 16, 16], 1.0, &mut rng).unwrap();
            assert_eq!(p.label.shape(), [16, 16, 16]);
            assert!(p.label.data().iter().any(|&l| l > 0));
        }
        // smaller volumes are padded up to the patch
        let p = sample_patch(case, [40, 32, 32], 0.0, &mut rng).unwrap();
        assert_eq!(p.image.spatial(), [40, 32, 32]);
    }

    #[test]
    fn key_value_overrides() {
        let mut c = TrainConfig::default();
        let kv = KeyValues::parse("lr=0.02\nbatch=3\npatch=64,32,32\nmirror_axes=0,1,1\n").unwrap();
        c.apply(&kv).unwrap();
        assert_eq!((c.initial_lr, c.batch_size, c.patch), (0.02, 3, [64, 32, 32]));
        assert_eq!(c.mirror_axes, [false, true, true]);
        let bad = KeyValues::parse("learning_rate=1\n").unwrap();
        assert!(matches!(c.apply(&bad), Err(Error::Config(_))));
        let zero = KeyValues::parse("epochs=0\n").unwrap();
        assert!(TrainConfig::default().apply(&zero).is_err());
    }

    #[test]
    fn resumed_run_repeats_the_next_epoch_exactly() {
        let data = cases(3);
        let mut full = Trainer::new(tiny(), cfg(3)).unwrap();
        let losses: Vec<f64> = (0..3).map(|_| full.run_epoch(&data).unwrap().1).collect();

        let mut first = Trainer::new(tiny(), cfg(3)).unwrap();
        first.run_epoch(&data).unwrap();
        first.run_epoch(&data).unwrap();
        let bytes = encode_checkpoint(&first.checkpoint(true));
        let ckpt = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        let mut resumed = Trainer::resume(ckpt, cfg(3)).unwrap();
        assert_eq!(resumed.epoch, 2);
        let (lr, loss) = resumed.run_epoch(&data).unwrap();
        assert_eq!(loss, losses[2]);
        assert_eq!(lr, poly_lr(0.01, 2, 3));
        assert_eq!(resumed.net, full.net);
    }

    #[test]
    fn fit_logs_and_checkpoints() {
        let data = cases(3);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny(), cfg(3)).unwrap();
        let history = t.fit(&data[..2], &data[2..], Some(dir.path()), |_| {}).unwrap();
        assert_eq!(history.len(), 3);
        // validated at epochs 2 and 3 (the last), zero-based 1 and 2
        let validated: Vec<usize> = history.iter().filter(|r| r.val_dice.is_some()).map(|r| r.epoch).collect();
        assert_eq!(validated, vec![1, 2]);
        let log = fs::read_to_string(dir.path().join("log.csv")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], "epoch,lr,loss,dice_class1,dice_class2,mean_dice");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(",,,"));
        assert!(dir.path().join("best.nvckpt").exists());
        let last = load_checkpoint(&dir.path().join("last.nvckpt")).unwrap();
        assert!(last.momentum.is_some());
        assert_eq!(last.meta.get("epoch"), Some("3"));
        // nothing left to do after a completed run
        let mut again = trainer_for_dir(dir.path(), tiny(), cfg(3)).unwrap();
        assert!(again.fit(&data[..2], &data[2..], None, |_| {}).unwrap().is_empty());
    }

    #[test]
    fn evaluation_rows_per_case_and_class() {
        let data = cases(2);
        let net = Network::<f32>::new(tiny(), 1).unwrap();
        let rows = evaluate(&net, &data, [32; 3], 0.5).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].case_id.as_str(), rows[0].class), ("case000", 1));
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.dice)));
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut t = Trainer::new(tiny(), cfg(1)).unwrap();
        assert!(matches!(t.run_epoch(&[]), Err(Error::Empty(_))));
    }
}

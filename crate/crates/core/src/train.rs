//! Adam training, evaluation and the stacks x scales ablation grid.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::{self, TrainState};
use crate::error::{Error, Result};
use crate::heatmap::{self, HeatmapStack};
use crate::keypoints::KeypointSet;
use crate::loss::{self, BatchTargets, LossBreakdown};
use crate::model::{parse_scales, Network, NetworkConfig};
use crate::pck::{self, KeypointFilter, Normalization, PckConfig, PckReport};
use crate::synth::PoseSample;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    /// Gaussian width of groundtruth heatmaps, in heatmap pixels.
    pub sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.0005,
            lr_decay: 0.98,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 10,
            sigma: 1.0,
        }
    }
}

/// Epoch budget used for the synthetic dataset.
pub const SYNTHETIC_EPOCHS: usize = 60;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            _ => return Err(Error::config(format!("unknown train key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "epochs={}\nlr={}\nlr_decay={}\nbatch_size={}\nbeta1={}\nbeta2={}\neps={}\nseed={}\ncheckpoint_every={}\nsigma={}\n",
            self.epochs,
            self.lr,
            self.lr_decay,
            self.batch_size,
            self.beta1,
            self.beta2,
            self.eps,
            self.seed,
            self.checkpoint_every,
            self.sigma
        )
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl Iterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(format!(
                "adam_step: parameter {i} has shape {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(betas.0), T::lit(betas.1));
    let c1 = T::lit(1.0 - betas.0.powi(t));
    let c2 = T::lit(1.0 - betas.1.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(eps));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = b1 * *mj + one_b1 * gj;
            *vj = b2 * *vj + one_b2 * gj * gj;
            let mhat = *mj / c1;
            let vhat = *vj / c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Samples converted to network inputs and groundtruth pyramids.
struct Prepared {
    images: Vec<Tensor<f32>>,
    /// `targets[i][j]` is sample `i`'s `[N, h, w]` map at `scales[j]`.
    targets: Vec<Vec<Tensor<f32>>>,
    scales: Vec<usize>,
}

impl Prepared {
    fn new(samples: &[PoseSample], net: &NetworkConfig, sigma: f64) -> Result<Self> {
        let scales = net.sorted_scales();
        let base = net.base_heatmap_size;
        let mut images = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            check_image(s, net)?;
            images.push(s.image.clone());
            let frame = (net.input_size, net.input_size);
            let pyr = heatmap::pyramid(s.keypoints(), frame, base, base, sigma, &scales)?;
            targets.push(pyr.into_iter().map(|h| h.maps.cast::<f32>()).collect());
        }
        Ok(Self { images, targets, scales })
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, BatchTargets<f32>)> {
        let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &self.images[i]).collect();
        let maps = (0..self.scales.len())
            .map(|j| Tensor::stack(&idx.iter().map(|&i| &self.targets[i][j]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Tensor::stack(&imgs)?,
            BatchTargets {
                scales: self.scales.clone(),
                maps,
            },
        ))
    }
}

fn check_image(s: &PoseSample, net: &NetworkConfig) -> Result<()> {
    let n = net.input_size;
    if s.image.shape() != [3, n, n] {
        return Err(Error::config(format!(
            "sample {} has image shape {:?} but the network expects [3,{n},{n}]",
            s.id,
            s.image.shape()
        )));
    }
    Ok(())
}

/// Loss and gradients of one batch.
fn batch_gradients(
    net: &Network<f32>,
    images: Tensor<f32>,
    targets: &BatchTargets<f32>,
) -> Result<(LossBreakdown, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let x = g.constant(images);
    let out = net.forward_graph(&mut g, x, true)?;
    let (total, terms) = loss::total_loss_node(&mut g, &out, &net.config().sorted_scales(), targets)?;
    let breakdown = loss::breakdown_from_graph(&g, total, &terms)?;
    if !breakdown.total.is_finite() {
        return Ok((breakdown, Vec::new()));
    }
    g.backward(total)?;
    let grads = out
        .params
        .iter()
        .zip(net.params())
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok((breakdown, grads))
}

/// Loss breakdown of `net` over `samples` without updating anything.
pub fn dataset_loss(net: &Network<f32>, samples: &[PoseSample], sigma: f64, batch: usize) -> Result<LossBreakdown> {
    let prep = Prepared::new(samples, net.config(), sigma)?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut acc: Option<LossBreakdown> = None;
    for chunk in idx.chunks(batch.max(1)) {
        let (images, targets) = prep.batch(chunk)?;
        let mut g = Graph::new();
        let x = g.constant(images);
        let out = net.forward_graph(&mut g, x, false)?;
        let (total, terms) = loss::total_loss_node(&mut g, &out, &net.config().sorted_scales(), &targets)?;
        let b = loss::breakdown_from_graph(&g, total, &terms)?;
        let w = chunk.len() as f64 / samples.len() as f64;
        acc.get_or_insert_with(|| b.zeroed()).accumulate(&b, w);
    }
    acc.ok_or_else(|| Error::invalid("dataset is empty"))
}

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Per-sample mean of each term over the epoch's batches.
    pub loss: LossBreakdown,
    pub val_pck: Option<f64>,
}

impl EpochRecord {
    pub fn log_header(&self) -> String {
        let mut s = "epoch\tlr".to_string();
        for n in self.loss.term_names() {
            s.push('\t');
            s.push_str(&n);
        }
        s + "\ttotal\tval_pck"
    }

    /// `epoch, lr, term..., total, val_pck` separated by tabs.
    pub fn log_line(&self) -> String {
        let mut s = format!("{}\t{:e}", self.epoch, self.lr);
        for v in self.loss.term_values() {
            let _ = write!(s, "\t{v:.9e}");
        }
        let _ = write!(s, "\t{:.9e}", self.loss.total);
        match self.val_pck {
            Some(p) => {
                let _ = write!(s, "\t{p:.6}");
            }
            None => s.push_str("\t-"),
        }
        s
    }
}

/// Where training writes its artifacts and what it resumes from.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `train_log.tsv`, `steps.tsv` and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Continue from a checkpoint with a training state.
    pub resume: Option<PathBuf>,
    /// Seed of the network initialisation; defaults to the training seed.
    pub init_seed: Option<u64>,
}

pub const TRAIN_LOG: &str = "train_log.tsv";
pub const STEP_LOG: &str = "steps.tsv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub network: Network<f32>,
    pub state: TrainState<f32>,
    /// Records of the epochs run by this call.
    pub records: Vec<EpochRecord>,
}

struct Logs {
    epoch: Option<BufWriter<File>>,
    step: Option<BufWriter<File>>,
}

impl Logs {
    fn open(dir: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { epoch: None, step: None });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let f = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            epoch: Some(open(TRAIN_LOG)?),
            step: Some(open(STEP_LOG)?),
        })
    }

    fn write(w: &mut Option<BufWriter<File>>, line: &str, name: &str) -> Result<()> {
        if let Some(w) = w {
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(name, e))?;
        }
        Ok(())
    }
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD6E8_FEB8_6659_FD93)
}

/// Trains a network on `train_set`, scoring `val_set` (PCK at alpha 0.2,
/// torso normalization) after every epoch when it is non-empty.
pub fn train(
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    train_set: &[PoseSample],
    val_set: &[PoseSample],
    opts: &TrainOptions,
) -> Result<TrainResult> {
    cfg.validate()?;
    net_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }

    let (mut net, mut state) = match &opts.resume {
        Some(path) => {
            let ck = checkpoint::load::<f32>(path)?;
            if ck.network.config() != net_cfg {
                return Err(Error::config(format!(
                    "checkpoint {} was trained with a different network configuration ({})",
                    path.display(),
                    ck.network.config()
                )));
            }
            let state = ck
                .state
                .ok_or_else(|| Error::config(format!("checkpoint {} has no training state", path.display())))?;
            (ck.network, state)
        }
        None => {
            let net = Network::<f32>::build(net_cfg, opts.init_seed.unwrap_or(cfg.seed))?;
            let adam = AdamState::new(net.params().iter().map(|p| &p.value));
            (net, TrainState { epoch: 0, adam })
        }
    };

    let prep = Prepared::new(train_set, net_cfg, cfg.sigma)?;
    let val_cfg = PckConfig::new(0.2, Normalization::Torso);
    let out_dir = opts.out_dir.as_deref();
    let mut logs = Logs::open(out_dir, opts.resume.is_some())?;
    let n = train_set.len();
    let mut records = Vec::new();
    let mut step = state.adam.step as usize;

    for epoch in state.epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seed, epoch)));
        let mut epoch_loss: Option<LossBreakdown> = None;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, targets) = prep.batch(chunk)?;
            let (breakdown, grads) = batch_gradients(&net, images, &targets)?;
            if epoch == 0 && step == 0 {
                Logs::write(&mut logs.step, &breakdown.log_header(), STEP_LOG)?;
            }
            Logs::write(&mut logs.step, &breakdown.log_line(step), STEP_LOG)?;
            if !breakdown.total.is_finite() {
                log::error!("loss became {} at epoch {epoch}, step {step}", breakdown.total);
                return Err(Error::Diverged { epoch });
            }
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            let mut params: Vec<&mut Tensor<f32>> = net.params_mut().iter_mut().map(|p| &mut p.value).collect();
            adam_step(&mut params, &grad_refs, &mut state.adam, lr, (cfg.beta1, cfg.beta2), cfg.eps)?;
            epoch_loss
                .get_or_insert_with(|| breakdown.zeroed())
                .accumulate(&breakdown, chunk.len() as f64 / n as f64);
            step += 1;
        }
        let val_pck = if val_set.is_empty() {
            None
        } else {
            let preds = NetworkPredictor::new(&net).predict(val_set)?;
            let kps: Vec<KeypointSet> = preds.into_iter().map(|p| p.keypoints).collect();
            pck::pck(&kps, val_set, &val_cfg)?.score()
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss: epoch_loss.expect("non-empty training set"),
            val_pck,
        };
        if epoch == 0 {
            Logs::write(&mut logs.epoch, &record.log_header(), TRAIN_LOG)?;
        }
        Logs::write(&mut logs.epoch, &record.log_line(), TRAIN_LOG)?;
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.5} val pck {}",
            record.loss.total,
            val_pck.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
        );
        records.push(record);
        state.epoch = epoch + 1;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                checkpoint::save(&dir.join(epoch_checkpoint_name(state.epoch)), &net, Some(&state))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join(FINAL_CHECKPOINT), &net, Some(&state))?;
    }
    Ok(TrainResult {
        network: net,
        state,
        records,
    })
}

/// Heatmaps a network prediction is decoded from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeatmapSource {
    /// Output of the regression stage (the last stack's base maps when absent).
    #[default]
    Refined,
    /// Base-scale maps of the last stack, before regression.
    PreRegression,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub keypoints: KeypointSet,
    pub confidences: Vec<f64>,
    pub heatmaps: HeatmapStack<f32>,
}

/// Anything that maps samples to keypoint predictions.
pub trait Predictor {
    fn predict(&self, samples: &[PoseSample]) -> Result<Vec<Prediction>>;
}

pub struct NetworkPredictor<'a> {
    pub network: &'a Network<f32>,
    pub source: HeatmapSource,
    pub batch_size: usize,
}

impl<'a> NetworkPredictor<'a> {
    pub fn new(network: &'a Network<f32>) -> Self {
        Self {
            network,
            source: HeatmapSource::Refined,
            batch_size: 16,
        }
    }

    pub fn with_source(mut self, source: HeatmapSource) -> Self {
        self.source = source;
        self
    }
}

fn prediction_from(hm: HeatmapStack<f32>) -> Result<Prediction> {
    let decoded = heatmap::decode(&hm);
    Ok(Prediction {
        keypoints: decoded.keypoints()?,
        confidences: decoded.confidences(),
        heatmaps: hm,
    })
}

impl Predictor for NetworkPredictor<'_> {
    fn predict(&self, samples: &[PoseSample]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.batch_size.max(1)) {
            for s in chunk {
                check_image(s, self.network.config())?;
            }
            let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
            for o in self.network.forward(&Tensor::stack(&imgs)?)? {
                let hm = match self.source {
                    HeatmapSource::Refined => o.final_heatmaps().clone(),
                    HeatmapSource::PreRegression => o.last_base().clone(),
                };
                out.push(prediction_from(hm)?);
            }
        }
        Ok(out)
    }
}

/// Predicts by decoding the groundtruth's own base-scale heatmaps.
pub struct OraclePredictor {
    pub input_size: usize,
    pub base_heatmap_size: usize,
    pub sigma: f64,
}

impl OraclePredictor {
    pub fn for_config(cfg: &NetworkConfig) -> Self {
        Self {
            input_size: cfg.input_size,
            base_heatmap_size: cfg.base_heatmap_size,
            sigma: 1.0,
        }
    }
}

impl Predictor for OraclePredictor {
    fn predict(&self, samples: &[PoseSample]) -> Result<Vec<Prediction>> {
        samples
            .iter()
            .map(|s| {
                let frame = (self.input_size, self.input_size);
                let b = self.base_heatmap_size;
                prediction_from(heatmap::encode(s.keypoints(), frame, b, b, self.sigma)?.cast())
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: PckReport,
    pub predictions: Vec<Prediction>,
}

/// Predicts every sample and scores the predictions.
pub fn evaluate(predictor: &dyn Predictor, samples: &[PoseSample], cfg: &PckConfig) -> Result<Evaluation> {
    let predictions = predictor.predict(samples)?;
    let kps: Vec<KeypointSet> = predictions.iter().map(|p| p.keypoints.clone()).collect();
    Ok(Evaluation {
        report: pck::pck(&kps, samples, cfg)?,
        predictions,
    })
}

/// Parallelism cap from `MSSNET_THREADS` (default: available cores).
pub fn max_threads() -> usize {
    std::env::var("MSSNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub stack_counts: Vec<usize>,
    pub scale_sets: Vec<Vec<usize>>,
    pub seeds: Vec<u64>,
    /// Epochs per cell.
    pub epochs: usize,
    /// Also train each (stacks, scales, seed) cell without the regression stage.
    pub with_no_regression: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            stack_counts: vec![1, 2, 4],
            scale_sets: vec![vec![1], vec![1, 2], vec![1, 2, 4]],
            seeds: vec![1, 2, 3],
            epochs: SYNTHETIC_EPOCHS,
            with_no_regression: false,
        }
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stack_counts.is_empty() || self.scale_sets.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("ablation needs at least one stack count, scale set and seed"));
        }
        if self.epochs == 0 {
            return Err(Error::config("ablation budget must be at least one epoch"));
        }
        Ok(())
    }

    /// Parses `1,2,4` / `1;1,2;1,2,4` style lists.
    pub fn parse_scale_sets(s: &str) -> Result<Vec<Vec<usize>>> {
        s.split(';').map(parse_scales).collect()
    }

    /// Every cell in grid order: stacks, then scale sets, then regression, then seeds.
    pub fn cells(&self, base: &NetworkConfig) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &stacks in &self.stack_counts {
            for scales in &self.scale_sets {
                let regs: &[bool] = if self.with_no_regression && base.regression {
                    &[true, false]
                } else {
                    std::slice::from_ref(&base.regression)
                };
                for &regression in regs {
                    for &seed in &self.seeds {
                        out.push(CellKey {
                            stacks,
                            scales: scales.clone(),
                            regression,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CellKey {
    pub stacks: usize,
    pub scales: Vec<usize>,
    pub regression: bool,
    pub seed: u64,
}

impl CellKey {
    pub fn scales_label(&self) -> String {
        scales_label(&self.scales)
    }

    pub fn dir_name(&self) -> String {
        format!(
            "stacks{}_scales{}{}_seed{}",
            self.stacks,
            self.scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-"),
            if self.regression { "" } else { "_noreg" },
            self.seed
        )
    }

    pub fn network_config(&self, base: &NetworkConfig) -> NetworkConfig {
        NetworkConfig {
            num_stacks: self.stacks,
            scales: self.scales.clone(),
            regression: self.regression,
            ..base.clone()
        }
    }
}

fn scales_label(scales: &[usize]) -> String {
    format!("[{}]", scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub key: CellKey,
    /// Test PCK under the grid's PCK configuration.
    pub pck: f64,
    /// PCK on recoverable occluded keypoints, when any exist.
    pub occluded_pck: Option<f64>,
    pub final_loss: f64,
}

/// Mean and population standard deviation.
pub fn mean_spread(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub stacks: usize,
    pub scales: Vec<usize>,
    pub regression: bool,
    pub seeds: usize,
    pub mean: f64,
    pub spread: f64,
    pub occluded_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub spec: AblationSpec,
    pub cells: Vec<CellResult>,
}

impl AblationGrid {
    /// Seed-averaged results, one per (stacks, scales, regression).
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut out: Vec<CellSummary> = Vec::new();
        for c in &self.cells {
            let k = &c.key;
            if out
                .iter()
                .any(|s| s.stacks == k.stacks && s.scales == k.scales && s.regression == k.regression)
            {
                continue;
            }
            let group: Vec<&CellResult> = self
                .cells
                .iter()
                .filter(|o| o.key.stacks == k.stacks && o.key.scales == k.scales && o.key.regression == k.regression)
                .collect();
            let pcks: Vec<f64> = group.iter().map(|c| c.pck).collect();
            let occ: Vec<f64> = group.iter().filter_map(|c| c.occluded_pck).collect();
            let (mean, spread) = mean_spread(&pcks);
            out.push(CellSummary {
                stacks: k.stacks,
                scales: k.scales.clone(),
                regression: k.regression,
                seeds: group.len(),
                mean,
                spread,
                occluded_mean: (!occ.is_empty()).then(|| mean_spread(&occ).0),
            });
        }
        out
    }

    pub fn lookup(&self, stacks: usize, scales: &[usize], regression: bool) -> Option<CellSummary> {
        self.summary()
            .into_iter()
            .find(|s| s.stacks == stacks && s.scales == scales && s.regression == regression)
    }

    /// One row per seed-averaged cell, tab-separated.
    pub fn render_table(&self) -> String {
        let mut s = "stacks\tscales\tregression\tseeds\tmean_pck\tspread\toccluded_pck\n".to_string();
        for c in self.summary() {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                c.stacks,
                scales_label(&c.scales),
                c.regression,
                c.seeds,
                c.mean,
                c.spread,
                c.occluded_mean.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
            );
        }
        s
    }

    /// Gnuplot data: one indexed block per scale set (with regression), rows
    /// `stacks mean spread`, blocks separated by two blank lines.
    pub fn render_gnuplot(&self) -> String {
        let summary = self.summary();
        let mut s = String::new();
        for scales in &self.spec.scale_sets {
            let _ = writeln!(s, "# scales {}", scales_label(scales));
            let _ = writeln!(s, "# stacks\tmean_pck\tspread");
            for c in summary.iter().filter(|c| &c.scales == scales && c.regression) {
                let _ = writeln!(s, "{}\t{:.6}\t{:.6}", c.stacks, c.mean, c.spread);
            }
            s.push_str("\n\n");
        }
        s
    }
}

/// Trains and scores one ablation cell.
pub fn run_cell(
    key: &CellKey,
    base_net: &NetworkConfig,
    base_train: &TrainConfig,
    epochs: usize,
    train_set: &[PoseSample],
    test_set: &[PoseSample],
    pck_cfg: &PckConfig,
    out_dir: Option<&Path>,
) -> Result<CellResult> {
    let net_cfg = key.network_config(base_net);
    let train_cfg = TrainConfig {
        epochs,
        seed: key.seed,
        checkpoint_every: 0,
        ..base_train.clone()
    };
    let opts = TrainOptions {
        out_dir: out_dir.map(|d| d.join(key.dir_name())),
        ..TrainOptions::default()
    };
    let result = train(&net_cfg, &train_cfg, train_set, &[], &opts)?;
    let eval = evaluate(&NetworkPredictor::new(&result.network), test_set, pck_cfg)?;
    let kps: Vec<KeypointSet> = eval.predictions.iter().map(|p| p.keypoints.clone()).collect();
    let occ = pck::pck(
        &kps,
        test_set,
        &PckConfig {
            filter: KeypointFilter::RecoverableOccluded,
            ..pck_cfg.clone()
        },
    )?;
    if let Some(dir) = &opts.out_dir {
        let path = dir.join("report.txt");
        fs::write(&path, eval.report.render()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(CellResult {
        key: key.clone(),
        pck: eval.report.score().unwrap_or(0.0),
        occluded_pck: occ.score(),
        final_loss: result.records.last().map(|r| r.loss.total).unwrap_or(f64::NAN),
    })
}

/// Trains every cell of `spec` on up to `threads` worker threads.
pub fn ablate(
    spec: &AblationSpec,
    base_net: &NetworkConfig,
    base_train: &TrainConfig,
    train_set: &[PoseSample],
    test_set: &[PoseSample],
    pck_cfg: &PckConfig,
    threads: usize,
    out_dir: Option<&Path>,
) -> Result<AblationGrid> {
    spec.validate()?;
    let keys = spec.cells(base_net);
    for k in &keys {
        k.network_config(base_net).validate()?;
    }
    let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new(keys.iter().map(|_| None).collect());
    let next = Mutex::new(0usize);
    let workers = threads.clamp(1, keys.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(key) = keys.get(i) else { break };
                log::info!("ablation cell {}", key.dir_name());
                let r = run_cell(key, base_net, base_train, spec.epochs, train_set, test_set, pck_cfg, out_dir);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let cells = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationGrid {
        spec: spec.clone(),
        cells,
    })
}

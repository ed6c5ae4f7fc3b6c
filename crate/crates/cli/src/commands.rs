use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use mssnet::checkpoint;
use mssnet::config::ConfigMap;
use mssnet::heatmap;
use mssnet::keypoints::Keypoint;
use mssnet::model::{parse_scales, NetworkConfig};
use mssnet::pck::{KeypointFilter, Normalization, PckConfig};
use mssnet::render::{pose_overlay, Canvas};
use mssnet::synth::{self, GenParams, PoseSample, ANNOTATION_FILE};
use mssnet::train::{self, AblationSpec, HeatmapSource, NetworkPredictor, TrainConfig, TrainOptions};
use mssnet::Tensor;

use crate::manifest::{RunManifest, SECTIONS};
use crate::{AblateArgs, Cli, Command, EvalArgs, GenDataArgs, NetFlags, PckFlags, PredictArgs, TrainArgs};

/// A bad invocation: reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(mssnet::Error::Config(_)) = cause.downcast_ref::<mssnet::Error>() {
            return 2;
        }
    }
    1
}

pub fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace('\n', " ")
}

pub fn run(cli: Cli) -> Result<()> {
    let name = match &cli.command {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Predict(_) => "predict",
        Command::Ablate(_) => "ablate",
    };
    let cfg = load_config(cli.config.as_deref(), name)?;
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::Train(a) => train_cmd(&cfg, a),
        Command::Eval(a) => eval_cmd(&cfg, a),
        Command::Predict(a) => predict_cmd(&cfg, a),
        Command::Ablate(a) => ablate_cmd(&cfg, a),
    }
}

fn load_config(path: Option<&Path>, command: &str) -> Result<ConfigMap> {
    let Some(path) = path else {
        return Ok(ConfigMap::new());
    };
    if !path.is_file() {
        return Err(usage(format!("config file {} does not exist", path.display())));
    }
    let cfg = ConfigMap::load(path).map_err(|e| usage(e.to_string()))?;
    cfg.check_known(SECTIONS, &[]).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(cmd) = cfg.get("run.command") {
        if cmd != command {
            return Err(usage(format!(
                "{} is a manifest of `{cmd}`, not `{command}`",
                path.display()
            )));
        }
    }
    Ok(cfg)
}

fn setting<T: std::str::FromStr>(flag: Option<T>, cfg: &ConfigMap, key: &str, default: T) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match cfg.get(key) {
        Some(s) => s
            .parse()
            .map_err(|_| usage(format!("invalid value {s:?} for config key {key}"))),
        None => Ok(default),
    }
}

fn path_setting(flag: Option<PathBuf>, cfg: &ConfigMap, key: &str) -> Option<PathBuf> {
    flag.or_else(|| cfg.get(key).map(PathBuf::from))
}

fn required_path(flag: Option<PathBuf>, cfg: &ConfigMap, key: &str, what: &str) -> Result<PathBuf> {
    let p = path_setting(flag, cfg, key).ok_or_else(|| usage(format!("missing --{what}")))?;
    if !p.exists() {
        return Err(usage(format!("--{what} {} does not exist", p.display())));
    }
    Ok(p)
}

fn gen_params(cfg: &ConfigMap) -> Result<GenParams> {
    let mut p = GenParams::default();
    for (k, v) in cfg.section("data") {
        p.set(&k, &v)?;
    }
    Ok(p)
}

fn net_config(cfg: &ConfigMap, flags: &NetFlags) -> Result<NetworkConfig> {
    let mut net = NetworkConfig::default();
    for (k, v) in cfg.section("net") {
        net.set(&k, &v)?;
    }
    if let Some(s) = flags.stacks {
        net.num_stacks = s;
    }
    if let Some(c) = flags.channels {
        net.feature_channels = c;
    }
    if let Some(s) = &flags.scales {
        net.scales = parse_scales(s)?;
    }
    if flags.no_regression {
        net.regression = false;
    }
    net.validate()?;
    Ok(net)
}

fn train_config(cfg: &ConfigMap, epochs: Option<usize>, lr: Option<f64>, decay: Option<f64>, batch: Option<usize>) -> Result<TrainConfig> {
    let mut t = TrainConfig {
        epochs: train::SYNTHETIC_EPOCHS,
        ..TrainConfig::default()
    };
    for (k, v) in cfg.section("train") {
        t.set(&k, &v)?;
    }
    if let Some(e) = epochs {
        t.epochs = e;
    }
    if let Some(l) = lr {
        t.lr = l;
    }
    if let Some(d) = decay {
        t.lr_decay = d;
    }
    if let Some(b) = batch {
        t.batch_size = b;
    }
    t.validate()?;
    Ok(t)
}

fn pck_config(cfg: &ConfigMap, flags: &PckFlags) -> Result<(PckConfig, String)> {
    let alpha = setting(flags.alpha, cfg, "eval.alpha", 0.2)?;
    let norm: String = setting(flags.norm.clone(), cfg, "eval.norm", "torso".to_string())?;
    let subset: String = setting(flags.subset.clone(), cfg, "eval.subset", "all".to_string())?;
    let normalization: Normalization = norm.parse()?;
    let filter = match subset.as_str() {
        "all" => KeypointFilter::All,
        "occluded" => KeypointFilter::RecoverableOccluded,
        s => return Err(usage(format!("unknown subset {s:?} (expected all|occluded)"))),
    };
    if !(alpha > 0.0) {
        return Err(usage(format!("--alpha must be positive, got {alpha}")));
    }
    Ok((
        PckConfig {
            alpha,
            normalization,
            filter,
        },
        subset,
    ))
}

fn load_set(dir: &Path) -> Result<Vec<PoseSample>> {
    let path = dir.join(ANNOTATION_FILE);
    let samples = synth::load_annotations(&path).with_context(|| format!("loading {}", path.display()))?;
    if samples.is_empty() {
        return Err(usage(format!("{} contains no samples", path.display())));
    }
    Ok(samples)
}

/// Training and validation sets of a dataset directory: `train/` and `test/`
/// when present, otherwise the directory itself without validation.
fn load_train_split(dir: &Path) -> Result<(Vec<PoseSample>, Vec<PoseSample>)> {
    if dir.join("train").join(ANNOTATION_FILE).is_file() {
        let val_dir = dir.join("test");
        let val = if val_dir.join(ANNOTATION_FILE).is_file() {
            load_set(&val_dir)?
        } else {
            Vec::new()
        };
        Ok((load_set(&dir.join("train"))?, val))
    } else if dir.join(ANNOTATION_FILE).is_file() {
        Ok((load_set(dir)?, Vec::new()))
    } else {
        Err(usage(format!("{} holds no {ANNOTATION_FILE} (nor train/{ANNOTATION_FILE})", dir.display())))
    }
}

/// Evaluation set of a dataset directory: itself, or its `test/` split.
fn load_eval_set(dir: &Path) -> Result<Vec<PoseSample>> {
    if dir.join(ANNOTATION_FILE).is_file() {
        load_set(dir)
    } else if dir.join("test").join(ANNOTATION_FILE).is_file() {
        load_set(&dir.join("test"))
    } else {
        Err(usage(format!("{} holds no {ANNOTATION_FILE} (nor test/{ANNOTATION_FILE})", dir.display())))
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &ConfigMap, default: &str) -> PathBuf {
    path_setting(flag, cfg, "run.out").unwrap_or_else(|| PathBuf::from(default))
}

fn gen_data(cfg: &ConfigMap, a: GenDataArgs) -> Result<()> {
    let mut params = gen_params(cfg)?;
    if let Some(s) = a.seed {
        params.seed = s;
    }
    let count = setting(a.count, cfg, "gen.count", 600usize)?;
    let test_count = setting(a.test_count, cfg, "gen.test_count", 100usize)?;
    let slice = a.occlusion_slice || setting(None, cfg, "gen.occlusion_slice", false)?;
    let out = a
        .out
        .or_else(|| cfg.get("run.out").map(PathBuf::from))
        .ok_or_else(|| usage("missing --out"))?;
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if !slice && (test_count == 0 || test_count >= count) {
        return Err(usage(format!("--test-count must lie in 1..{count}")));
    }
    params.validate()?;

    let mut entries = ConfigMap::new();
    entries.extend_section("data", &params.to_kv());
    entries.set("gen.count", count.to_string());
    entries.set("gen.test_count", test_count.to_string());
    entries.set("gen.occlusion_slice", slice.to_string());
    entries.set("run.out", out.display().to_string());
    let manifest = RunManifest::new("gen-data", entries);
    manifest.write_start(&out)?;

    if slice {
        let samples = synth::generate(&params.occlusion_slice(), count)?;
        synth::save_annotations(&samples, &out)?;
        println!("wrote {count} occlusion-slice samples to {}", out.display());
    } else {
        let samples = synth::generate(&params, count)?;
        let fraction = (count - test_count) as f64 / count as f64;
        let (tr, te) = synth::split(&samples, fraction, params.seed)?;
        synth::save_annotations(&tr, &out.join("train"))?;
        synth::save_annotations(&te, &out.join("test"))?;
        println!("wrote {} train / {} test samples to {}", tr.len(), te.len(), out.display());
    }
    manifest.write_end(&out)
}

fn train_cmd(cfg: &ConfigMap, a: TrainArgs) -> Result<()> {
    let data = required_path(a.data, cfg, "input.data", "data")?;
    let net = net_config(cfg, &a.net)?;
    let mut tc = train_config(cfg, a.epochs, a.lr, a.lr_decay, a.batch)?;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let resume = match path_setting(a.checkpoint, cfg, "input.checkpoint") {
        Some(p) if !p.is_file() => return Err(usage(format!("--checkpoint {} does not exist", p.display()))),
        p => p,
    };
    let out = out_dir(a.out, cfg, "run");
    let (train_set, val_set) = load_train_split(&data)?;

    let mut entries = ConfigMap::new();
    entries.extend_section("net", &net.to_kv());
    entries.extend_section("train", &tc.to_kv());
    entries.set("input.data", data.display().to_string());
    if let Some(r) = &resume {
        entries.set("input.checkpoint", r.display().to_string());
    }
    entries.set("run.out", out.display().to_string());
    let manifest = RunManifest::new("train", entries);
    manifest.write_start(&out)?;

    log::info!(
        "training {net} on {} samples ({} validation) for {} epochs",
        train_set.len(),
        val_set.len(),
        tc.epochs
    );
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        resume,
        init_seed: None,
    };
    let result = train::train(&net, &tc, &train_set, &val_set, &opts)?;
    if let Some(last) = result.records.last() {
        println!(
            "epoch {}: total loss {:.6}{}",
            last.epoch,
            last.loss.total,
            last.val_pck.map(|v| format!(", val PCK {v:.4}")).unwrap_or_default()
        );
    }
    println!("checkpoint: {}", out.join(train::FINAL_CHECKPOINT).display());
    manifest.write_end(&out)
}

fn eval_cmd(cfg: &ConfigMap, a: EvalArgs) -> Result<()> {
    let ckpt = required_path(a.checkpoint, cfg, "input.checkpoint", "checkpoint")?;
    let data = required_path(a.data, cfg, "input.data", "data")?;
    let (pck_cfg, subset) = pck_config(cfg, &a.pck)?;
    let source: String = if a.pre_regression {
        "pre_regression".into()
    } else {
        setting(None, cfg, "eval.source", "refined".to_string())?
    };
    let source = match source.as_str() {
        "refined" => HeatmapSource::Refined,
        "pre_regression" => HeatmapSource::PreRegression,
        s => return Err(usage(format!("unknown eval.source {s:?}"))),
    };
    let dump = a.dump_heatmaps || setting(None, cfg, "eval.dump_heatmaps", false)?;
    let overlays = a.overlays || setting(None, cfg, "eval.overlays", false)?;
    let out = out_dir(a.out, cfg, "eval");

    let mut entries = ConfigMap::new();
    entries.set("input.checkpoint", ckpt.display().to_string());
    entries.set("input.data", data.display().to_string());
    entries.set("eval.alpha", pck_cfg.alpha.to_string());
    entries.set("eval.norm", pck_cfg.normalization.name());
    entries.set("eval.subset", subset);
    entries.set(
        "eval.source",
        if source == HeatmapSource::Refined { "refined" } else { "pre_regression" },
    );
    entries.set("eval.dump_heatmaps", dump.to_string());
    entries.set("eval.overlays", overlays.to_string());
    entries.set("run.out", out.display().to_string());

    let ck = checkpoint::load::<f32>(&ckpt)?;
    entries.extend_section("net", &ck.network.config().to_kv());
    let manifest = RunManifest::new("eval", entries);
    manifest.write_start(&out)?;

    let samples = load_eval_set(&data)?;
    let predictor = NetworkPredictor::new(&ck.network).with_source(source);
    let eval = train::evaluate(&predictor, &samples, &pck_cfg)?;
    let report = eval.report.render();
    let path = out.join("report.txt");
    fs::write(&path, &report).with_context(|| format!("writing {}", path.display()))?;
    print!("{report}");

    if dump {
        let dir = out.join("heatmaps");
        fs::create_dir_all(&dir)?;
        for (s, p) in samples.iter().zip(&eval.predictions) {
            p.heatmaps.save_dump(&dir.join(format!("{}.msst", s.id)))?;
        }
    }
    if overlays {
        let dir = out.join("overlays");
        fs::create_dir_all(&dir)?;
        for (s, p) in samples.iter().zip(&eval.predictions) {
            pose_overlay(&Canvas::from_tensor(&s.image)?, &p.keypoints, 4).write_ppm(&dir.join(format!("{}.ppm", s.id)))?;
        }
    }
    manifest.write_end(&out)
}

#[derive(Serialize)]
struct KeypointOut {
    name: &'static str,
    x: f64,
    y: f64,
    visible: bool,
    confidence: f64,
}

#[derive(Serialize)]
struct PredictionOut {
    image: String,
    overlay: String,
    overlay_scale: usize,
    keypoints: Vec<KeypointOut>,
}

pub const OVERLAY_SCALE: usize = 4;

fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let t = if bytes.starts_with(b"P6") {
        Canvas::from_ppm(&bytes)?.into_tensor()
    } else {
        Tensor::<f32>::decode(&bytes).with_context(|| format!("decoding {}", path.display()))?
    };
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(usage(format!("{} is not a [3,H,W] image", path.display())));
    }
    Ok(t)
}

fn predict_cmd(cfg: &ConfigMap, a: PredictArgs) -> Result<()> {
    let ckpt = required_path(a.checkpoint, cfg, "input.checkpoint", "checkpoint")?;
    let image_path = required_path(a.image, cfg, "input.image", "image")?;
    let out = out_dir(a.out, cfg, "predict");

    let mut entries = ConfigMap::new();
    entries.set("input.checkpoint", ckpt.display().to_string());
    entries.set("input.image", image_path.display().to_string());
    entries.set("run.out", out.display().to_string());
    let ck = checkpoint::load::<f32>(&ckpt)?;
    entries.extend_section("net", &ck.network.config().to_kv());
    let manifest = RunManifest::new("predict", entries);
    manifest.write_start(&out)?;

    let image = load_image(&image_path)?;
    let n = ck.network.config().input_size;
    if image.shape()[1..] != [n, n] {
        return Err(usage(format!(
            "image is {:?} but the checkpoint expects {n}x{n} inputs",
            &image.shape()[1..]
        )));
    }
    let outputs = ck.network.forward(&image.clone().reshape(&[1, 3, n, n])?)?;
    let decoded = heatmap::decode(outputs[0].final_heatmaps());
    let kps = decoded.keypoints()?;

    let overlay_path = out.join("overlay.ppm");
    pose_overlay(&Canvas::from_tensor(&image)?, &kps, OVERLAY_SCALE).write_ppm(&overlay_path)?;
    let record = PredictionOut {
        image: image_path.display().to_string(),
        overlay: overlay_path.display().to_string(),
        overlay_scale: OVERLAY_SCALE,
        keypoints: Keypoint::ALL
            .iter()
            .zip(&decoded.peaks)
            .map(|(k, p)| KeypointOut {
                name: k.name(),
                x: p.point.x,
                y: p.point.y,
                visible: p.detected,
                confidence: p.confidence,
            })
            .collect(),
    };
    let json_path = out.join("keypoints.json");
    fs::write(&json_path, serde_json::to_string_pretty(&record)? + "\n")
        .with_context(|| format!("writing {}", json_path.display()))?;
    println!("{}", json_path.display());
    manifest.write_end(&out)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| usage(format!("invalid {what} entry {p:?}"))))
        .collect()
}

fn ablate_cmd(cfg: &ConfigMap, a: AblateArgs) -> Result<()> {
    let data = required_path(a.data, cfg, "input.data", "data")?;
    let defaults = AblationSpec::default();
    let stacks: String = setting(a.stacks, cfg, "ablate.stacks", "1,2,4".to_string())?;
    let scales: String = setting(a.scales, cfg, "ablate.scales", "1;1,2;1,2,4".to_string())?;
    let seeds: String = setting(a.seeds, cfg, "ablate.seeds", "1,2,3".to_string())?;
    let spec = AblationSpec {
        stack_counts: parse_list(&stacks, "stack count")?,
        scale_sets: AblationSpec::parse_scale_sets(&scales)?,
        seeds: parse_list(&seeds, "seed")?,
        epochs: setting(a.epochs, cfg, "ablate.epochs", defaults.epochs)?,
        with_no_regression: a.with_no_regression || setting(None, cfg, "ablate.with_no_regression", false)?,
    };
    spec.validate()?;
    let net = net_config(
        cfg,
        &NetFlags {
            channels: a.channels,
            no_regression: a.no_regression,
            ..NetFlags::default()
        },
    )?;
    let tc = train_config(cfg, Some(spec.epochs), a.lr, a.lr_decay, a.batch)?;
    let (pck_cfg, subset) = pck_config(cfg, &a.pck)?;
    let out = out_dir(a.out, cfg, "ablation");
    let (train_set, test_set) = load_train_split(&data)?;
    if test_set.is_empty() {
        return Err(usage(format!("{} has no test/ split to score the grid on", data.display())));
    }

    let mut entries = ConfigMap::new();
    entries.extend_section("net", &net.to_kv());
    entries.extend_section("train", &tc.to_kv());
    entries.set("ablate.stacks", stacks);
    entries.set("ablate.scales", scales);
    entries.set("ablate.seeds", seeds);
    entries.set("ablate.epochs", spec.epochs.to_string());
    entries.set("ablate.with_no_regression", spec.with_no_regression.to_string());
    entries.set("eval.alpha", pck_cfg.alpha.to_string());
    entries.set("eval.norm", pck_cfg.normalization.name());
    entries.set("eval.subset", subset);
    entries.set("input.data", data.display().to_string());
    entries.set("run.out", out.display().to_string());
    let manifest = RunManifest::new("ablate", entries);
    manifest.write_start(&out)?;

    let threads = train::max_threads();
    log::info!("ablation: {} cells on {threads} thread(s)", spec.cells(&net).len());
    let grid = train::ablate(&spec, &net, &tc, &train_set, &test_set, &pck_cfg, threads, Some(&out.join("cells")))?;
    let table = grid.render_table();
    fs::write(out.join("grid.tsv"), &table)?;
    fs::write(out.join("grid.dat"), grid.render_gnuplot())?;
    let mut cells = String::from("stacks\tscales\tregression\tseed\tpck\toccluded_pck\tfinal_loss\n");
    for c in &grid.cells {
        cells += &format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{}\t{:.6e}\n",
            c.key.stacks,
            c.key.scales_label(),
            c.key.regression,
            c.key.seed,
            c.pck,
            c.occluded_pck.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
            c.final_loss
        );
    }
    fs::write(out.join("cells.tsv"), cells)?;
    print!("{table}");
    manifest.write_end(&out)
}

//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit when any
//! criterion fails. Criteria 7 to 10 share one set of fifteen trained cells.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mssnet::autodiff::{Graph, Var};
use mssnet::gradcheck::{grad_check, Probes};
use mssnet::heatmap::{self, HeatmapStack};
use mssnet::keypoints::{Keypoint, KeypointSet, Point, NUM_KEYPOINTS};
use mssnet::loss::{self, BatchTargets};
use mssnet::model::{MultiScaleOutputs, Network, NetworkConfig, OutputVars};
use mssnet::pck::{self, Normalization, PckConfig, PoseLabel};
use mssnet::synth::{self, GenParams, PoseSample};
use mssnet::train::{self, dataset_loss, evaluate, NetworkPredictor, TrainConfig, TrainOptions};
use mssnet::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, g.value(y).shape());
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

type Layer = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn gradients() -> Outcome {
    let layers: Vec<Layer> = vec![
        ("conv2d", vec![vec![2, 3, 6, 5], vec![4, 3, 3, 3], vec![4]], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            contract(g, y, 1)
        })),
        ("conv2d_transpose", vec![vec![2, 3, 4, 4], vec![3, 2, 4, 4], vec![2]], Box::new(|g, v| {
            let y = g.conv2d_transpose(v[0], v[1], v[2], 2, 1)?;
            contract(g, y, 2)
        })),
        ("maxpool", vec![vec![2, 3, 6, 6]], Box::new(|g, v| {
            let y = g.maxpool2d(v[0], 2, 2)?;
            contract(g, y, 3)
        })),
        ("relu", vec![vec![2, 3, 4, 4]], Box::new(|g, v| {
            let y = g.relu(v[0])?;
            contract(g, y, 4)
        })),
        ("concat", vec![vec![2, 3, 4, 4], vec![2, 2, 4, 4]], Box::new(|g, v| {
            let y = g.concat_channels(v)?;
            contract(g, y, 5)
        })),
        ("upsample", vec![vec![2, 3, 3, 3]], Box::new(|g, v| {
            let y = g.upsample_nearest(v[0], 2)?;
            contract(g, y, 6)
        })),
        ("1x1 head", vec![vec![2, 8, 4, 4], vec![16, 8, 1, 1], vec![16]], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 0)?;
            contract(g, y, 7)
        })),
        ("loss terms", vec![vec![1, 16, 8, 8], vec![1, 16, 4, 4], vec![1, 16, 8, 8]], Box::new(|g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let targets = BatchTargets {
                scales: vec![1, 2],
                maps: vec![rand_tensor(&mut rng, &[1, 16, 8, 8]), rand_tensor(&mut rng, &[1, 16, 4, 4])],
            };
            let out = OutputVars {
                params: Vec::new(),
                per_stack: vec![vec![v[0], v[1]]],
                refined: Some(v[2]),
            };
            Ok(loss::total_loss_node(g, &out, &[1, 2], &targets)?.0)
        })),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, shapes, f) in layers {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| {
                let t = rand_tensor(&mut rng, s);
                // keep relu inputs off the kink
                if name == "relu" {
                    t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
                } else {
                    t
                }
            })
            .collect();
        let err = grad_check(|g, v| f(g, v), &inputs, 1e-6, Probes::Random { count: 24, seed: 9 }).unwrap();
        pass &= err < 1e-4;
        parts.push(format!("{name} {err:.1e}"));
    }
    outcome(pass, format!("max rel error per layer (24 probes per input, tol 1e-4): {}", parts.join(", ")))
}

fn adjointness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let (mut worst, mut done) = (0.0f64, 0);
    while done < 50 {
        let (c, o) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let k = rng.gen_range(1..5);
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..k);
        let h = rng.gen_range(2..6);
        let w = rng.gen_range(2..6);
        let (oh, ow) = ((h - 1) * stride + k, (w - 1) * stride + k);
        if oh <= 2 * pad || ow <= 2 * pad {
            continue;
        }
        let y = rand_tensor(&mut rng, &[1, c, h, w]);
        let wt = rand_tensor(&mut rng, &[c, o, k, k]);
        let x = rand_tensor(&mut rng, &[1, o, oh - 2 * pad, ow - 2 * pad]);
        let mut g = Graph::new();
        let (yv, wv, xv) = (g.constant(y.clone()), g.constant(wt.clone()), g.constant(x.clone()));
        let zo = g.constant(Tensor::zeros(&[o]));
        let zc = g.constant(Tensor::zeros(&[c]));
        // <conv(x), y> with weight [c,o,k,k] versus <x, conv_transpose(y)>
        let cx = g.conv2d(xv, wv, zc, stride, pad).unwrap();
        if g.value(cx).shape() != y.shape() {
            continue;
        }
        let ty = g.conv2d_transpose(yv, wv, zo, stride, pad).unwrap();
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
        done += 1;
    }
    outcome(worst < 1e-10, format!("worst relative gap {worst:.2e} over {done} instances (tol 1e-10)"))
}

fn pck_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let (mut mismatches, mut boundary) = (0, 0);
    for i in 0..100 {
        let (alpha, norm) = if i % 2 == 0 { (0.5, Normalization::HeadHalf) } else { (0.25, Normalization::Torso) };
        let m = rng.gen_range(1..=4);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..m {
            let head_size = [8.0, 12.0, 16.0][rng.gen_range(0..3)];
            let torso_size = [16.0, 20.0, 32.0][rng.gen_range(0..3)];
            let h = if norm == Normalization::HeadHalf { head_size / 2.0 } else { torso_size };
            let mut gt = KeypointSet::default();
            let mut pred = KeypointSet::default();
            for n in 0..NUM_KEYPOINTS {
                gt.points[n] = Point::new(rng.gen_range(0..64) as f64, rng.gen_range(0..64) as f64);
                gt.visible[n] = rng.gen_bool(0.85);
                pred.visible[n] = true;
                let r = alpha * h;
                pred.points[n] = if rng.gen_bool(0.3) {
                    Point::new(gt.points[n].x, gt.points[n].y + r)
                } else {
                    Point::new(gt.points[n].x + rng.gen_range(-2.0 * r..2.0 * r), gt.points[n].y)
                };
            }
            preds.push(pred);
            gts.push(PoseLabel { keypoints: gt, head_size, torso_size });
        }
        let (mut correct, mut evaluated) = (0, 0);
        for (p, g) in preds.iter().zip(&gts) {
            let h = if norm == Normalization::HeadHalf { g.head_size / 2.0 } else { g.torso_size };
            for n in 0..NUM_KEYPOINTS {
                if !g.keypoints.visible[n] {
                    continue;
                }
                evaluated += 1;
                let d = ((p.points[n].x - g.keypoints.points[n].x).powi(2) + (p.points[n].y - g.keypoints.points[n].y).powi(2)).sqrt();
                if d == alpha * h {
                    boundary += 1;
                }
                if d / h < alpha {
                    correct += 1;
                }
            }
        }
        let r = pck::pck(&preds, &gts, &PckConfig::new(alpha, norm)).unwrap();
        if (r.overall.correct, r.overall.evaluated) != (correct, evaluated) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && boundary > 0,
        format!("{mismatches} mismatching instances of 100; {boundary} predictions exactly on the threshold"),
    )
}

fn loss_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let stack = |rng: &mut ChaCha8Rng, s: usize, d: usize| {
        HeatmapStack::new(rand_tensor(rng, &[16, s, s]), d, (64, 64)).unwrap()
    };
    let oracle = |p: &HeatmapStack<f64>, g: &HeatmapStack<f64>| {
        let mut acc = 0.0;
        for i in 0..p.maps.numel() {
            let d = p.maps.data()[i] - g.maps.data()[i];
            acc += d * d;
        }
        acc / 16.0
    };
    let (mut worst, mut sum_gap) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let gt = vec![stack(&mut rng, 16, 1), stack(&mut rng, 8, 2)];
        let per_stack = vec![vec![stack(&mut rng, 16, 1), stack(&mut rng, 8, 2)]];
        let refined = stack(&mut rng, 16, 1);
        let mut terms = Vec::new();
        for (p, g) in per_stack[0].iter().zip(&gt) {
            let want = oracle(p, g);
            worst = worst.max((loss::scale_loss(p, g).unwrap() - want).abs() / want);
            terms.push(want);
        }
        terms.push(oracle(&refined, &gt[0]));
        let out = MultiScaleOutputs { per_stack, refined: Some(refined) };
        let b = loss::total_loss(&out, &gt, &gt[0]).unwrap();
        let independent: f64 = terms.iter().sum();
        sum_gap = sum_gap.max((b.total - independent).abs() / independent);
    }
    outcome(
        worst < 1e-12 && sum_gap < 1e-12,
        format!("scale_loss worst rel error {worst:.1e}, total vs independent sum {sum_gap:.1e} (tol 1e-12)"),
    )
}

fn codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let mut k = KeypointSet::default();
        for n in 0..NUM_KEYPOINTS {
            k.points[n] = Point::new(rng.gen_range(0.0..=63.0), rng.gen_range(0.0..=63.0));
            k.visible[n] = rng.gen_bool(0.8);
        }
        let divisor = [1, 2, 4][i % 3];
        let pyr = heatmap::pyramid(&k, (64, 64), 16, 16, 1.0, &[divisor]).unwrap();
        let scale = 64.0 / pyr[0].width() as f64;
        let out = heatmap::decode(&pyr[0]).keypoints().unwrap();
        for kp in Keypoint::ALL {
            if k.is_visible(kp) {
                let (p, q) = (out.point(kp), k.point(kp));
                worst = worst.max((p.x - q.x).abs().max((p.y - q.y).abs()) / scale);
            }
        }
    }
    outcome(worst <= 0.5, format!("worst per-axis error {worst:.4}·scale px over 1000 sets (bound 0.5·scale)"))
}

fn overfit() -> Outcome {
    let samples = synth::generate(&GenParams::default(), 4).unwrap();
    let net_cfg = NetworkConfig {
        num_stacks: 1,
        feature_channels: 16,
        ..NetworkConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        lr: 0.003,
        lr_decay: 1.0,
        seed: 1,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let initial = dataset_loss(&Network::build(&net_cfg, cfg.seed).unwrap(), &samples, cfg.sigma, 4).unwrap().total;
    let r = train::train(&net_cfg, &cfg, &samples, &[], &TrainOptions::default()).unwrap();
    let last = dataset_loss(&r.network, &samples, cfg.sigma, 4).unwrap().total;
    let best_epoch = r.records.iter().map(|e| e.loss.total).fold(f64::INFINITY, f64::min);
    let ratio = last / initial;
    outcome(
        ratio < 0.01,
        format!(
            "loss {initial:.4} -> {last:.4} after 200 epochs, ratio {ratio:.4} (need < 0.01); lowest epoch mean {:.4}",
            best_epoch
        ),
    )
}

struct Cell {
    stacks: usize,
    scales: Vec<usize>,
    regression: bool,
    test: [f64; 3],
    slice: [f64; 3],
}

impl Cell {
    fn mean_test(&self) -> f64 {
        self.test.iter().sum::<f64>() / 3.0
    }
    fn mean_slice(&self) -> f64 {
        self.slice.iter().sum::<f64>() / 3.0
    }
    fn label(&self) -> String {
        format!(
            "{} stacks {:?}{}",
            self.stacks,
            self.scales,
            if self.regression { "" } else { " no-regression" }
        )
    }
}

fn train_cells(train_set: &[PoseSample], test_set: &[PoseSample], slice: &[PoseSample]) -> Vec<Cell> {
    let base = NetworkConfig {
        num_stacks: 2,
        feature_channels: 32,
        scales: vec![1, 2, 4],
        ..NetworkConfig::default()
    };
    let all = PckConfig::new(0.2, Normalization::Torso);
    let layout = [
        (2, vec![1, 2, 4], true),
        (2, vec![1], true),
        (2, vec![1, 2, 4], false),
        (1, vec![1, 2, 4], true),
        (4, vec![1, 2, 4], true),
    ];
    let mut cells = Vec::new();
    for (stacks, scales, regression) in layout {
        let net_cfg = NetworkConfig {
            num_stacks: stacks,
            scales: scales.clone(),
            regression,
            ..base.clone()
        };
        let mut cell = Cell { stacks, scales, regression, test: [0.0; 3], slice: [0.0; 3] };
        for (i, seed) in [1u64, 2, 3].into_iter().enumerate() {
            let t = Instant::now();
            let cfg = TrainConfig {
                epochs: 60,
                seed,
                checkpoint_every: 0,
                ..TrainConfig::default()
            };
            let net = train::train(&net_cfg, &cfg, train_set, &[], &TrainOptions::default()).unwrap().network;
            let p = NetworkPredictor::new(&net);
            cell.test[i] = evaluate(&p, test_set, &all).unwrap().report.score().unwrap();
            let preds: Vec<KeypointSet> = evaluate(&p, slice, &all).unwrap().predictions.into_iter().map(|p| p.keypoints).collect();
            cell.slice[i] = pck::occluded_subset(&preds, slice, &all).unwrap().score().unwrap();
            eprintln!(
                "  trained {} seed {seed}: test PCK {:.4}, occluded slice PCK {:.4} ({:.0}s)",
                cell.label(),
                cell.test[i],
                cell.slice[i],
                t.elapsed().as_secs_f64()
            );
        }
        cells.push(cell);
    }
    cells
}

fn seeds(v: &[f64; 3]) -> String {
    format!("{:.4}/{:.4}/{:.4}", v[0], v[1], v[2])
}

fn reproducibility() -> Outcome {
    let samples = synth::generate(&GenParams { seed: 11, ..GenParams::default() }, 12).unwrap();
    let net_cfg = NetworkConfig {
        num_stacks: 2,
        feature_channels: 16,
        ..NetworkConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        seed: 4,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let pck_cfg = PckConfig::new(0.2, Normalization::Torso);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut ckpts = Vec::new();
    let mut reports = Vec::new();
    for d in &dirs {
        let opts = TrainOptions {
            out_dir: Some(d.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let r = train::train(&net_cfg, &cfg, &samples, &[], &opts).unwrap();
        ckpts.push(fs::read(d.path().join(train::FINAL_CHECKPOINT)).unwrap());
        reports.push(evaluate(&NetworkPredictor::new(&r.network), &samples, &pck_cfg).unwrap().report.render());
    }
    let in_process = ckpts[0] == ckpts[1] && reports[0] == reports[1];

    let work = tempfile::tempdir().unwrap();
    let replay = manifest_replay(work.path());
    outcome(
        in_process && replay.is_ok(),
        format!(
            "in-process checkpoints and reports identical: {in_process}; CLI manifest replay: {}",
            replay.unwrap_or_else(|e| e)
        ),
    )
}

fn cli(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mssnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn manifest_replay(dir: &Path) -> std::result::Result<String, String> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    cli(&["gen-data", "--seed", "5", "--count", "24", "--test-count", "8", "--out", &p("data")])?;
    cli(&["gen-data", "--config", &p("data/manifest.txt"), "--out", &p("data2")])?;
    cli(&[
        "train", "--data", &p("data"), "--stacks", "1", "--channels", "16", "--epochs", "2", "--out", &p("a"),
    ])?;
    cli(&["train", "--config", &p("a/manifest.txt"), "--out", &p("b")])?;
    for run in ["a", "b"] {
        cli(&["eval", "--checkpoint", &p(&format!("{run}/model.ckpt")), "--data", &p("data"), "--out", &p(&format!("eval_{run}"))])?;
    }
    cli(&["eval", "--config", &p("eval_a/manifest.txt"), "--out", &p("eval_a2")])?;
    let same = |a: &str, b: &str| fs::read(dir.join(a)).ok() == fs::read(dir.join(b)).ok();
    if !same("data/train/annotations.json", "data2/train/annotations.json") {
        return Err("replayed dataset differs".into());
    }
    if !same("a/model.ckpt", "b/model.ckpt") || !same("a/train_log.tsv", "b/train_log.tsv") {
        return Err("replayed training differs".into());
    }
    if !same("eval_a/report.txt", "eval_b/report.txt") || !same("eval_a/report.txt", "eval_a2/report.txt") {
        return Err("replayed evaluation differs".into());
    }
    Ok("gen-data, train and eval replays bitwise identical".into())
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("{} {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        std::io::stdout().flush().ok();
        if !o.pass {
            failures += 1;
        }
    };
    report(1, "gradient correctness", gradients());
    report(2, "adjointness", adjointness());
    report(3, "pck exactness", pck_exactness());
    report(4, "loss exactness", loss_exactness());
    report(5, "codec roundtrip", codec());
    report(6, "overfit sanity", overfit());

    let params = GenParams::default();
    let all = synth::generate(&params, 600).unwrap();
    let (train_set, test_set) = synth::split(&all, 500.0 / 600.0, params.seed).unwrap();
    let slice = synth::generate(&GenParams { seed: 1, ..params }.occlusion_slice(), 100).unwrap();
    let t = Instant::now();
    let cells = train_cells(&train_set, &test_set, &slice);
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let (full, single, noreg, one, four) = (&cells[0], &cells[1], &cells[2], &cells[3], &cells[4]);

    report(
        7,
        "desk-scale learning",
        outcome(
            full.mean_test() >= 0.80,
            format!(
                "mean test PCK@0.2 torso {:.4} (seeds {}) >= 0.80; all fifteen cells took {minutes:.1} min",
                full.mean_test(),
                seeds(&full.test)
            ),
        ),
    );
    let gap = full.mean_test() - single.mean_test();
    report(
        8,
        "multi-scale supervision",
        outcome(
            gap >= 0.0,
            format!(
                "[1,2,4] {:.4} vs [1] {:.4} (seeds {}), gap {gap:+.4}",
                full.mean_test(),
                single.mean_test(),
                seeds(&single.test)
            ),
        ),
    );
    let depth = [one.mean_test(), full.mean_test(), four.mean_test()];
    report(
        9,
        "depth",
        outcome(
            depth[0] <= depth[1] && depth[1] <= depth[2],
            format!(
                "1/2/4 stacks {:.4} / {:.4} / {:.4} (1 stack seeds {}, 4 stacks seeds {})",
                depth[0],
                depth[1],
                depth[2],
                seeds(&one.test),
                seeds(&four.test)
            ),
        ),
    );
    let (scale_gap, reg_gap) = (full.mean_slice() - single.mean_slice(), full.mean_slice() - noreg.mean_slice());
    report(
        10,
        "occlusion",
        outcome(
            scale_gap >= 0.0 && reg_gap >= 0.0,
            format!(
                "occluded-subset PCK on {} slice figures: {} {:.4}, {} {:.4} (gap {scale_gap:+.4}), {} {:.4} (gap {reg_gap:+.4})",
                slice.len(),
                full.label(),
                full.mean_slice(),
                single.label(),
                single.mean_slice(),
                noreg.label(),
                noreg.mean_slice()
            ),
        ),
    );
    report(11, "reproducibility", reproducibility());

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}

//! Finite-difference checks of every differentiable layer and of the full
//! network objective, in f64.

use mssnet::autodiff::{Graph, Var};
use mssnet::gradcheck::{grad_check, Probes};
use mssnet::loss::{self, BatchTargets};
use mssnet::model::{Network, NetworkConfig, OutputVars};
use mssnet::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;
const NET_TOL: f64 = 1e-2;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so relu kinks never sit within `EPS`.
fn rand_away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand_tensor(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Contracts `y` against a fixed random tensor so every output coordinate
/// contributes a distinct weight to the scalar.
fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = rand_tensor(g.value(y).shape(), seed);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn probes(seed: u64) -> Probes {
    Probes::Random { count: 24, seed }
}

fn check(name: &str, err: f64) {
    println!("{name}: max relative error {err:.3e}");
    assert!(err < TOL, "{name}: {err:e} >= {TOL:e}");
}

#[test]
fn conv2d_stride1_pad1() {
    let inputs = [rand_tensor(&[2, 3, 6, 5], 1), rand_tensor(&[4, 3, 3, 3], 2), rand_tensor(&[4], 3)];
    let err = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            contract(g, y, 4)
        },
        &inputs,
        EPS,
        probes(5),
    )
    .unwrap();
    check("conv2d 3x3 s1 p1", err);
}

#[test]
fn conv2d_stride2() {
    let inputs = [rand_tensor(&[2, 2, 7, 8], 11), rand_tensor(&[3, 2, 3, 3], 12), rand_tensor(&[3], 13)];
    let err = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            contract(g, y, 14)
        },
        &inputs,
        EPS,
        probes(15),
    )
    .unwrap();
    check("conv2d 3x3 s2 p1", err);
}

#[test]
fn conv2d_pointwise_head() {
    let inputs = [rand_tensor(&[2, 5, 4, 4], 21), rand_tensor(&[16, 5, 1, 1], 22), rand_tensor(&[16], 23)];
    let err = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 0)?;
            contract(g, y, 24)
        },
        &inputs,
        EPS,
        probes(25),
    )
    .unwrap();
    check("1x1 head", err);
}

#[test]
fn conv_transpose_ladder_step() {
    let inputs = [rand_tensor(&[2, 3, 4, 4], 31), rand_tensor(&[3, 2, 4, 4], 32), rand_tensor(&[2], 33)];
    let err = grad_check(
        |g, v| {
            let y = g.conv2d_transpose(v[0], v[1], v[2], 2, 1)?;
            contract(g, y, 34)
        },
        &inputs,
        EPS,
        probes(35),
    )
    .unwrap();
    check("conv2d_transpose k4 s2 p1", err);
}

#[test]
fn conv_transpose_odd_geometry() {
    let inputs = [rand_tensor(&[1, 2, 3, 5], 41), rand_tensor(&[2, 3, 3, 3], 42), rand_tensor(&[3], 43)];
    let err = grad_check(
        |g, v| {
            let y = g.conv2d_transpose(v[0], v[1], v[2], 1, 1)?;
            contract(g, y, 44)
        },
        &inputs,
        EPS,
        probes(45),
    )
    .unwrap();
    check("conv2d_transpose k3 s1 p1", err);
}

#[test]
fn maxpool() {
    // Random continuous values: ties within EPS have probability ~0.
    let inputs = [rand_tensor(&[2, 3, 6, 6], 51)];
    let err = grad_check(
        |g, v| {
            let y = g.maxpool2d(v[0], 2, 2)?;
            contract(g, y, 52)
        },
        &inputs,
        EPS,
        probes(53),
    )
    .unwrap();
    check("maxpool 2x2", err);
}

#[test]
fn relu() {
    let inputs = [rand_away_from_zero(&[2, 3, 4, 4], 61)];
    let err = grad_check(
        |g, v| {
            let y = g.relu(v[0])?;
            contract(g, y, 62)
        },
        &inputs,
        EPS,
        probes(63),
    )
    .unwrap();
    check("relu", err);
}

#[test]
fn concat() {
    let inputs = [rand_tensor(&[2, 3, 4, 4], 71), rand_tensor(&[2, 1, 4, 4], 72), rand_tensor(&[2, 2, 4, 4], 73)];
    let err = grad_check(
        |g, v| {
            let y = g.concat_channels(v)?;
            contract(g, y, 74)
        },
        &inputs,
        EPS,
        probes(75),
    )
    .unwrap();
    check("concat", err);
}

#[test]
fn upsample() {
    let inputs = [rand_tensor(&[2, 3, 2, 3], 81)];
    let err = grad_check(
        |g, v| {
            let y = g.upsample_nearest(v[0], 4)?;
            contract(g, y, 82)
        },
        &inputs,
        EPS,
        Probes::All,
    )
    .unwrap();
    check("upsample x4", err);
}

#[test]
fn elementwise_ops() {
    let inputs = [rand_tensor(&[3, 4], 91), rand_tensor(&[3, 4], 92)];
    let err = grad_check(
        |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let k = g.scale(m, -1.7)?;
            let t = g.sum(k)?;
            let u = g.mean(v[0])?;
            g.add_scalars(&[t, u])
        },
        &inputs,
        EPS,
        Probes::All,
    )
    .unwrap();
    check("add/sub/mul/scale/sum/mean", err);
}

#[test]
fn scale_loss_term() {
    let gt = rand_tensor(&[2, 16, 4, 4], 101).map(f64::abs);
    let inputs = [rand_tensor(&[2, 16, 4, 4], 102)];
    let err = grad_check(
        |g, v| loss::scale_loss_node(g, v[0], &gt),
        &inputs,
        EPS,
        probes(103),
    )
    .unwrap();
    check("scale loss term", err);
}

#[test]
fn total_loss_over_terms() {
    let scales = vec![1, 2];
    let targets = BatchTargets {
        scales: scales.clone(),
        maps: vec![rand_tensor(&[1, 16, 8, 8], 111), rand_tensor(&[1, 16, 4, 4], 112)],
    };
    let inputs = [
        rand_tensor(&[1, 16, 8, 8], 113),
        rand_tensor(&[1, 16, 4, 4], 114),
        rand_tensor(&[1, 16, 8, 8], 115),
    ];
    let err = grad_check(
        |g, v| {
            let outputs = OutputVars {
                params: Vec::new(),
                per_stack: vec![vec![v[0], v[1]]],
                refined: Some(v[2]),
            };
            Ok(loss::total_loss_node(g, &outputs, &scales, &targets)?.0)
        },
        &inputs,
        EPS,
        probes(116),
    )
    .unwrap();
    check("total loss", err);
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        num_stacks: 2,
        feature_channels: 16,
        scales: vec![1, 2, 4],
        input_size: 32,
        base_heatmap_size: 16,
        regression_layers: 2,
        ..NetworkConfig::default()
    }
}

fn tiny_targets(cfg: &NetworkConfig, seed: u64) -> BatchTargets<f64> {
    let scales = cfg.sorted_scales();
    let maps = scales
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let h = cfg.base_heatmap_size / d;
            rand_tensor(&[1, 16, h, h], seed + i as u64).map(f64::abs)
        })
        .collect();
    BatchTargets { scales, maps }
}

/// The whole network holds thousands of relu units, so a bias probe shifts
/// many pre-activations at once and one of them may cross zero inside the
/// difference interval. Each probe therefore takes the best of three step
/// sizes, with the error denominator floored at the rounding noise of the
/// difference quotient at that step. Crossings still leave errors near 1e-3 on
/// coordinates whose gradient is tiny next to the loss, so the whole-network
/// bound is 1e-2; wiring mistakes show up as O(1) errors. The per-layer checks
/// above carry the 1e-4 bound.
#[test]
fn full_network_objective() {
    let cfg = tiny_config();
    let net = Network::<f64>::build(&cfg, 7).unwrap();
    let image = rand_tensor(&[1, 3, 32, 32], 121).map(|v| 0.5 + 0.5 * v);
    let targets = tiny_targets(&cfg, 122);
    let scales = cfg.sorted_scales();
    let objective = |params: &[Tensor<f64>], trainable: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        let x = g.constant(image.clone());
        let out = net.forward_graph_with(&mut g, x, vars.clone()).unwrap();
        let (total, _) = loss::total_loss_node(&mut g, &out, &scales, &targets).unwrap();
        (g, vars, total)
    };

    let base: Vec<Tensor<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
    let (mut g, vars, total) = objective(&base, true);
    g.backward(total).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut work = base.clone();
    let (mut worst, mut probed) = (0.0f64, 0);
    for (i, p) in net.params().iter().enumerate() {
        let analytic = g.grad(vars[i]).expect("parameter gradient").clone();
        for _ in 0..3 {
            let c = rng.gen_range(0..p.value.numel());
            let orig = work[i].data()[c];
            let mut best = f64::INFINITY;
            for eps in [EPS * 10.0, EPS, EPS / 10.0] {
                work[i].data_mut()[c] = orig + eps;
                let (gp, _, tp) = objective(&work, false);
                work[i].data_mut()[c] = orig - eps;
                let (gm, _, tm) = objective(&work, false);
                work[i].data_mut()[c] = orig;
                let (fp, fm) = (gp.value(tp).item().unwrap(), gm.value(tm).item().unwrap());
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic.data()[c];
                let noise = 8.0 * f64::EPSILON * fp.abs().max(fm.abs()) / eps;
                best = best.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(noise));
            }
            worst = worst.max(best);
            probed += 1;
        }
    }
    assert!(probed >= 20);
    println!("full network: max relative error {worst:.3e}");
    assert!(worst < NET_TOL, "full network: {worst:e}");
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = tiny_config();
    let net = Network::<f64>::build(&cfg, 9).unwrap();
    let image = rand_tensor(&[2, 3, 32, 32], 131).map(|v| 0.5 + 0.5 * v);
    let mut targets = tiny_targets(&cfg, 132);
    for m in &mut targets.maps {
        let t = Tensor::stack(&[&*m, &*m]).unwrap();
        let s = t.shape().to_vec();
        *m = t.reshape(&[2, s[2], s[3], s[4]]).unwrap();
    }
    let mut g = Graph::new();
    let x = g.constant(image);
    let out = net.forward_graph(&mut g, x, true).unwrap();
    let (total, _) = loss::total_loss_node(&mut g, &out, &cfg.sorted_scales(), &targets).unwrap();
    g.backward(total).unwrap();
    for (p, &v) in net.params().iter().zip(&out.params) {
        let grad = g.grad(v).expect("parameter gradient");
        let linf = grad.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(linf > 0.0, "{} has an all-zero gradient", p.name);
    }
}

//! Finite-difference gradient checks shared by the integration targets.
#![allow(dead_code)]

use carm_core::anatomy::canonical_skeleton;
use carm_core::losses::{nll_loss, skeleton_pose_loss, Vec3s};
use carm_core::regressor::GaussianPrediction;
use carm_core::rng;
use carm_core::tensor::{draw_batch_masks, Matrix, Mlp};
use carm_core::LANDMARKS;
use rand::Rng as _;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

/// Random MLP, batch, dropout masks and output weights; returns the worst
/// relative error over all parameters and inputs of `sum(out * w)`.
pub fn mlp_instance(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck/mlp", 0);
    let depth = r.random_range(1..4);
    let mut sizes = vec![r.random_range(2..7)];
    for _ in 0..depth {
        sizes.push(r.random_range(2..9));
    }
    sizes.push(r.random_range(1..5));
    let activate_output = r.random_bool(0.5);
    let mut net = Mlp::<f64>::new(&sizes, activate_output, &mut r).unwrap();
    let batch = r.random_range(1..4);
    let input = Matrix::from_vec(
        batch,
        sizes[0],
        (0..batch * sizes[0]).map(|_| r.random_range(-2.0..2.0)).collect(),
    );
    let masks = draw_batch_masks::<f64>(&net.dropout_widths(), batch, 0.3, &mut r).unwrap();
    let out_dim = *sizes.last().unwrap();
    let w = Matrix::from_vec(
        batch,
        out_dim,
        (0..batch * out_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
    );

    let objective = |net: &Mlp<f64>, x: &Matrix<f64>| -> f64 {
        let (out, _) = net.forward(x, Some(&masks)).unwrap();
        out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    };
    let (_, trace) = net.forward(&input, Some(&masks)).unwrap();
    let (grads, grad_in) = net.backward(&trace, &w).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (ti, tensor) in analytic.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let x0 = net.tensors()[ti][i];
            let mut f = |x: f64| {
                net.tensors_mut()[ti][i] = x;
                objective(&net, &input)
            };
            let n = central(&mut f, x0);
            net.tensors_mut()[ti][i] = x0;
            worst = worst.max(rel_err(a, n));
        }
    }
    for i in 0..input.as_slice().len() {
        let mut x = input.clone();
        let x0 = x.as_slice()[i];
        let mut f = |v: f64| {
            x.as_mut_slice()[i] = v;
            objective(&net, &x)
        };
        let n = central(&mut f, x0);
        worst = worst.max(rel_err(grad_in.as_slice()[i], n));
    }
    worst
}

/// NLL gradients with respect to the means and log-variances.
pub fn nll_instance(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck/nll", 0);
    let mut mean = [[0.0; 3]; LANDMARKS];
    let mut logvar = [[0.0; 3]; LANDMARKS];
    let mut target = [[0.0; 3]; LANDMARKS];
    for k in 0..LANDMARKS {
        for a in 0..3 {
            mean[k][a] = r.random_range(-0.5..0.5);
            logvar[k][a] = r.random_range(-4.0..2.0);
            target[k][a] = r.random_range(-0.5..0.5);
        }
    }
    let beta = if r.random_bool(0.5) {
        1.0
    } else {
        r.random_range(0.0..2.0)
    };
    let value = |m: &Vec3s<f64>, l: &Vec3s<f64>| {
        let pred = GaussianPrediction {
            mean: *m,
            variance: l.map(|v| v.map(f64::exp)),
        };
        nll_loss(&pred, &target, beta).unwrap()
    };
    let g = value(&mean, &logvar);
    let mut worst: f64 = 0.0;
    for k in 0..LANDMARKS {
        for a in 0..3 {
            let mut m = mean;
            let mut f = |x: f64| {
                m[k][a] = x;
                value(&m, &logvar).value
            };
            worst = worst.max(rel_err(g.grad_mean[k][a], central(&mut f, mean[k][a])));
            let mut l = logvar;
            let mut f = |x: f64| {
                l[k][a] = x;
                value(&mean, &l).value
            };
            worst = worst.max(rel_err(g.grad_log_variance[k][a], central(&mut f, logvar[k][a])));
        }
    }
    worst
}

/// Skeleton loss gradients with respect to the predicted positions.
///
/// The loss has kinks where an edge length matches exactly; instances whose
/// gaps fall within `1e-3` of a kink are redrawn so the central difference
/// never straddles one.
pub fn skeleton_instance(seed: u64) -> f64 {
    let graph = canonical_skeleton();
    let mut r = rng::stream(seed, "gradcheck/skeleton", 0);
    let (pred, truth) = loop {
        let mut pred = [[0.0; 3]; LANDMARKS];
        let mut truth = [[0.0; 3]; LANDMARKS];
        for k in 0..LANDMARKS {
            for a in 0..3 {
                truth[k][a] = graph.canonical_positions[k][a];
                pred[k][a] = truth[k][a] + r.random_range(-0.1..0.1);
            }
        }
        let near_kink = graph.edges.iter().any(|&(i, j)| {
            let d = |p: &Vec3s<f64>| {
                let (a, b) = (p[i.slot()], p[j.slot()]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            };
            (d(&pred) - d(&truth)).abs() < 1e-3
        });
        if !near_kink {
            break (pred, truth);
        }
    };
    let g = skeleton_pose_loss(&pred, &truth, &graph);
    let mut worst: f64 = 0.0;
    for k in 0..LANDMARKS {
        for a in 0..3 {
            let mut p = pred;
            let mut f = |x: f64| {
                p[k][a] = x;
                skeleton_pose_loss(&p, &truth, &graph).value
            };
            worst = worst.max(rel_err(g.grad_positions[k][a], central(&mut f, pred[k][a])));
        }
    }
    worst
}

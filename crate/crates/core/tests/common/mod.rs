//! Hand-written reference computations shared by the integration tests.
//! Nothing here calls the library's loss code.
#![allow(dead_code)]

pub mod suites;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retinex_gan::adversarial::{BackwardChain, CycleState, ForwardChain};
use retinex_gan::autograd::{Graph, Var};
use retinex_gan::nn::ParamSet;
use retinex_gan::{DecompSpec, DiscSpec, Tensor, UNetSpec};

pub const EPS: f64 = 1e-7;

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn oracle_bce(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub fn oracle_mean_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs());
    d.sum::<f64>() / a.len() as f64
}

/// Per-sample root-mean-square difference, averaged over the batch.
pub fn oracle_rms(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let n = a.shape()[0];
    let per = a.len() / n;
    (0..n)
        .map(|s| {
            let sq: f64 = (s * per..(s + 1) * per).map(|i| (a.data()[i] - b.data()[i]).powi(2)).sum();
            (sq / per as f64).sqrt()
        })
        .sum::<f64>()
        / n as f64
}

pub fn oracle_cycle_s(st: &CycleState<f64>) -> f64 {
    let f = st.forward.as_ref().unwrap();
    let b = st.backward.as_ref().unwrap();
    oracle_mean_abs(&f.s_low_pp, &f.s_low) + oracle_mean_abs(&b.s_high_pp, &b.s_high)
}

pub fn oracle_cycle_r(st: &CycleState<f64>) -> f64 {
    let f = st.forward.as_ref().unwrap();
    let b = st.backward.as_ref().unwrap();
    oracle_rms(&f.r_low, &f.r_high_p) + oracle_rms(&b.r_high, &b.r_low_p)
}

/// Random (not self-consistent) cycle state; losses only read the tensors.
pub fn random_state(n: usize, size: usize, seed: u64) -> CycleState<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |c: usize| rand_tensor(&[n, c, size, size], 0.0, 1.0, &mut rng);
    CycleState {
        forward: Some(ForwardChain {
            s_low: t(3),
            r_low: t(3),
            i_low: t(1),
            i_high_p: t(1),
            s_high_p: t(3),
            r_high_p: t(3),
            i_low_pp: t(1),
            s_low_pp: t(3),
        }),
        backward: Some(BackwardChain {
            s_high: t(3),
            r_high: t(3),
            i_high: t(1),
            i_low_p: t(1),
            s_low_p: t(3),
            r_low_p: t(3),
            i_high_pp: t(1),
            s_high_pp: t(3),
        }),
    }
}

/// A one-layer 1×1 discriminator: `D(x) = σ(w·x + b)` per pixel.
pub fn pixel_disc_spec() -> DiscSpec {
    DiscSpec {
        widths: vec![1],
        strides: vec![1],
        kernel: 1,
        pad: 0,
    }
}

/// Scores of [`pixel_disc_spec`] computed from its raw parameters.
pub fn oracle_pixel_disc(params: &ParamSet<f64>, prefix: &str, x: &Tensor<f64>) -> Vec<f64> {
    let w = params.get(&format!("{prefix}.conv0.weight")).unwrap().data();
    let b = params.get(&format!("{prefix}.conv0.bias")).unwrap().data()[0];
    let (n, c, h, wd) = x.dims4();
    let mut out = Vec::with_capacity(n * h * wd);
    for s in 0..n {
        for p in 0..h * wd {
            let z: f64 = (0..c).map(|ch| w[ch] * x.data()[(s * c + ch) * h * wd + p]).sum::<f64>() + b;
            out.push(1.0 / (1.0 + (-z).exp()));
        }
    }
    out
}

pub fn tiny_decomp() -> DecompSpec {
    DecompSpec {
        width: 4,
        hidden_layers: 1,
        input_kernel: 3,
    }
}

pub fn tiny_unet() -> UNetSpec {
    UNetSpec {
        input_size: 8,
        num_down: 2,
        num_up: 2,
        channel_plan: vec![4, 4, 4],
        kernel: 3,
        out_channels: 1,
    }
}

pub fn tiny_disc() -> DiscSpec {
    DiscSpec {
        widths: vec![4, 4, 1],
        strides: vec![2, 1, 1],
        kernel: 3,
        pad: 1,
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Relative error with a floor so that vanishing gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares analytic parameter gradients with central differences.
///
/// `sets` exposes the parameter sets of `nets` that are checked; `loss` records
/// the loss on a fresh graph. `count` coordinates are drawn with `seed`.
pub fn gradcheck<N: Clone>(
    nets: &N,
    sets: fn(&mut N) -> Vec<&mut ParamSet<f64>>,
    loss: impl Fn(&N, &mut Graph<f64>) -> Var,
    count: usize,
    step: f64,
    seed: u64,
) -> GradCheck {
    let mut g = Graph::new();
    let l = loss(nets, &mut g);
    g.backward(l).unwrap();

    let mut probe = nets.clone();
    let mut coords = Vec::new();
    for (si, set) in sets(&mut probe).into_iter().enumerate() {
        for (name, t) in set.iter() {
            for idx in 0..t.len() {
                coords.push((si, name.clone(), idx));
            }
        }
    }
    assert!(coords.len() >= count, "only {} parameters available", coords.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    while picked.len() < count {
        let c = coords.swap_remove(rng.random_range(0..coords.len()));
        picked.push(c);
    }

    let eval = |si: usize, name: &str, idx: usize, delta: f64| {
        let mut n = nets.clone();
        sets(&mut n)[si].get_mut(name).unwrap().data_mut()[idx] += delta;
        let mut g = Graph::new();
        let l = loss(&n, &mut g);
        g.scalar(l)
    };
    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for (si, name, idx) in picked {
        let analytic = g.param_grad(&name).map_or(0.0, |t| t.data()[idx]);
        let numeric = (eval(si, &name, idx, step) - eval(si, &name, idx, -step)) / (2.0 * step);
        let r = rel_err(analytic, numeric);
        if r >= out.max_rel {
            out.max_rel = r;
            out.worst = format!("{name}[{idx}]: analytic {analytic:e} numeric {numeric:e}");
        }
        out.checked += 1;
    }
    out
}

/// Prints one acceptance line and returns whether it passed.
pub fn report(id: u32, name: &str, pass: bool, detail: impl std::fmt::Display) -> bool {
    println!("criterion {id:>2} {:<4} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

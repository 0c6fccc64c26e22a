//! Helpers shared by the integration test targets.

use dflsim::dataset::PIXELS;
use dflsim::neuralnet::{init_params, loss_and_grad, ArchitectureConfig, ParamSet};
use dflsim::rng::{derive, Stream};
use rand::Rng;

pub fn random_params(arch: ArchitectureConfig, seed: u64) -> ParamSet {
    let mut p = init_params(&arch, &mut derive(seed, Stream::Init, &[])).unwrap();
    // non-zero biases so the bias paths are exercised too
    let mut rng = derive(seed, Stream::Init, &[1]);
    for t in p.tensors_mut() {
        if t.name.ends_with(".bias") {
            for v in t.data.iter_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    p
}

pub fn random_batch(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = derive(seed, Stream::Subset, &[]);
    (0..n * PIXELS).map(|_| rng.random::<f64>()).collect()
}

/// Per-tensor result of [`gradient_check`].
pub struct ProbeReport {
    pub tensor: String,
    pub max_rel: f64,
    /// Probes replaced because they straddled a ReLU or max-pool kink.
    pub kinks: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Central finite-difference check (eps = 1e-4) of `probes` random
/// coordinates in every tensor.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-5)`;
/// the floor keeps near-zero gradients from dividing noise by noise. A probe
/// whose central difference fails but whose analytic value agrees with one
/// of the one-sided differences sits on a kink and is replaced by a fresh
/// coordinate, at most `probes` times per tensor.
pub fn gradient_check(arch: ArchitectureConfig, seed: u64, probes: usize) -> Vec<ProbeReport> {
    let p = random_params(arch, seed);
    let x = random_batch(3, seed + 100);
    let labels = [4u8, 9, 1];
    let loss = |q: &ParamSet| {
        loss_and_grad(q, &x, &labels, &mut derive(seed, Stream::Training, &[])).unwrap()
    };
    let (base, grads) = loss(&p);
    let eps = 1e-4;
    let mut pick = derive(seed, Stream::Allocation, &[]);
    let mut out = Vec::new();
    for (ti, t) in p.tensors().iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut kinks = 0;
        let mut accepted = 0;
        while accepted < probes {
            let k = pick.random_range(0..t.data.len());
            let mut plus = p.clone();
            plus.tensors_mut()[ti].data[k] += eps;
            let mut minus = p.clone();
            minus.tensors_mut()[ti].data[k] -= eps;
            let (lp, lm) = (loss(&plus).0, loss(&minus).0);
            let analytic = grads.tensors()[ti].data[k];
            let rel = rel_err(analytic, (lp - lm) / (2.0 * eps));
            let one_sided =
                rel_err(analytic, (lp - base) / eps).min(rel_err(analytic, (base - lm) / eps));
            if rel > 1e-3 && one_sided <= 1e-2 && kinks < probes {
                kinks += 1;
                continue;
            }
            max_rel = max_rel.max(rel);
            accepted += 1;
        }
        out.push(ProbeReport {
            tensor: t.name.clone(),
            max_rel,
            kinks,
        });
    }
    out
}

//! Analytic gradients against central finite differences.
//!
//! Networks use tanh hidden units so the losses are smooth, and every
//! check runs 100 random trials. The error is measured as
//! `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over the whole parameter vector.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqcount::nn::{Activation, DenseNet};
use vqcount::rl::policy::GaussianPolicy;
use vqcount::rl::sac::{actor_loss_and_grad, critic_loss_and_grad, min_q_and_action_grad, CriticInputs, CriticTargets};
use vqcount::vqvae::{Codebook, CodebookSet, VqConfig, VqVae};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
const TRIALS: u64 = 100;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn central_diff(params: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + STEP;
            let up = loss(&p);
            p[i] = orig - STEP;
            let down = loss(&p);
            p[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn tanh_net(dims: &[usize], rng: &mut ChaCha8Rng) -> DenseNet {
    DenseNet::new(dims, Activation::Tanh, Activation::Identity, rng).unwrap()
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

#[test]
fn critic_loss_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let critic = tanh_net(&[5, 8, 8, 1], &mut rng);
        let n = 6;
        let s = uniform(n, 3, -1.0, 1.0, &mut rng);
        let a = uniform(n, 2, -1.0, 1.0, &mut rng);
        let an = uniform(n, 2, -1.0, 1.0, &mut rng);
        let ns = uniform(n, 3, -1.0, 1.0, &mut rng);
        let nan = uniform(n, 2, -1.0, 1.0, &mut rng);
        let targets = CriticTargets {
            bellman: Array1::from_shape_simple_fn(n, || rng.random_range(-2.0..2.0)),
            ood_current: Array1::from_shape_simple_fn(n, || rng.random_range(0.0..2.0)),
            ood_next: Array1::from_shape_simple_fn(n, || rng.random_range(0.0..2.0)),
        };
        let inputs = CriticInputs {
            states: s.view(),
            actions: a.view(),
            new_actions: an.view(),
            next_states: ns.view(),
            next_new_actions: nan.view(),
        };
        let (_, grads) = critic_loss_and_grad(&critic, inputs, &targets).unwrap();
        let fd = central_diff(&critic.params_flat(), |p| {
            let mut c = critic.clone();
            c.set_params_flat(p).unwrap();
            critic_loss_and_grad(&c, inputs, &targets).unwrap().0.total()
        });
        worst = worst.max(rel_err(&grads.to_flat(), &fd));
    }
    println!("critic gradient: worst relative error {worst:e}");
    assert!(worst <= TOLERANCE, "critic gradient relative error {worst:e}");
}

#[test]
fn actor_loss_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
        let policy = GaussianPolicy::from_net(tanh_net(&[3, 8, 4], &mut rng)).unwrap();
        let critics = [tanh_net(&[5, 8, 1], &mut rng), tanh_net(&[5, 8, 1], &mut rng)];
        let n = 5;
        let s = uniform(n, 3, -1.0, 1.0, &mut rng);
        let noise = policy.noise(n, &mut rng);
        let alpha = rng.random_range(0.05..1.0);
        let loss_of = |p: &GaussianPolicy| {
            let smp = p.sample(s.view(), noise.view()).unwrap();
            actor_loss_and_grad(p, &smp, s.view(), alpha, |st, ac| min_q_and_action_grad(&critics, st, ac)).unwrap()
        };
        let smp = policy.sample(s.view(), noise.view()).unwrap();
        let (_, grads) =
            actor_loss_and_grad(&policy, &smp, s.view(), alpha, |st, ac| min_q_and_action_grad(&critics, st, ac))
                .unwrap();
        let fd = central_diff(&policy.net().params_flat(), |p| {
            let mut net = policy.net().clone();
            net.set_params_flat(p).unwrap();
            loss_of(&GaussianPolicy::from_net(net).unwrap()).0.loss
        });
        worst = worst.max(rel_err(&grads.to_flat(), &fd));
    }
    println!("actor gradient: worst relative error {worst:e}");
    assert!(worst <= TOLERANCE, "actor gradient relative error {worst:e}");
}

/// Builds a small VQVAE with tanh networks and codebooks drawn near the
/// encoder's outputs.
fn smooth_vqvae(rng: &mut ChaCha8Rng) -> VqVae {
    let config = VqConfig {
        latent_dim: 4,
        codebooks: 2,
        codebook_size: 5,
        hidden: vec![6],
        ..VqConfig::new(3, 2)
    };
    let encoder = tanh_net(&[5, 6, 4], rng);
    let decoder = tanh_net(&[7, 6, 2], rng);
    let books = (0..2)
        .map(|_| Codebook::from_vectors(2, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    VqVae::from_parts(config, encoder, decoder, CodebookSet::new(books).unwrap()).unwrap()
}

#[test]
fn vq_loss_gradient_with_straight_through_matches_surrogate() {
    // The straight-through estimator is the exact gradient of a surrogate
    // in which z_q = z_e + δ with the offset δ and the selected codes
    // frozen at the evaluation point.
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + trial);
        let model = smooth_vqvae(&mut rng);
        let n = 4;
        let s = uniform(n, 3, -1.0, 1.0, &mut rng);
        let a = uniform(n, 2, -1.0, 1.0, &mut rng);
        let (_, grads, fwd) = model.loss_and_gradients(s.view(), a.view()).unwrap();
        let delta = &fwd.quantized - &fwd.latents;
        let gamma = model.config().commitment;
        let x = ndarray::concatenate![ndarray::Axis(1), s.view(), a.view()];
        let enc_params = model.encoder().params_flat();
        let dec_params = model.decoder().params_flat();
        let split = enc_params.len();
        let all: Vec<f64> = enc_params.iter().chain(&dec_params).copied().collect();
        let surrogate = |p: &[f64]| {
            let mut enc = model.encoder().clone();
            let mut dec = model.decoder().clone();
            enc.set_params_flat(&p[..split]).unwrap();
            dec.set_params_flat(&p[split..]).unwrap();
            let z = enc.forward_batch(x.view()).unwrap();
            let zq = &z + &delta;
            let dec_in = ndarray::concatenate![ndarray::Axis(1), zq.view(), s.view()];
            let recon = dec.forward_batch(dec_in.view()).unwrap();
            let r: f64 = (&recon - &a).iter().map(|v| v * v).sum();
            // Codebook term is constant in the networks; commitment pulls
            // z_e toward the frozen codes.
            let c: f64 = (&z - &fwd.quantized).iter().map(|v| v * v).sum();
            (r + gamma * c) / n as f64
        };
        let fd = central_diff(&all, surrogate);
        let analytic: Vec<f64> = grads.encoder.to_flat().into_iter().chain(grads.decoder.to_flat()).collect();
        worst = worst.max(rel_err(&analytic, &fd));

        // Codebook gradient: derivative of the codebook term with the
        // assignment frozen.
        let code_params: Vec<f64> = (0..2).flat_map(|h| model.codebooks().book(h).vectors().to_vec()).collect();
        let code_fd = central_diff(&code_params, |p| {
            let mut total = 0.0;
            for (i, seq) in fwd.labels.iter().enumerate() {
                for (h, &k) in seq.iter().enumerate() {
                    for j in 0..2 {
                        let e = p[h * 10 + k * 2 + j];
                        total += (fwd.latents[[i, h * 2 + j]] - e).powi(2);
                    }
                }
            }
            total / n as f64
        });
        let code_analytic: Vec<f64> = grads.codebooks.concat();
        worst = worst.max(rel_err(&code_analytic, &code_fd));
    }
    println!("VQ gradient: worst relative error {worst:e}");
    assert!(worst <= TOLERANCE, "VQ gradient relative error {worst:e}");
}

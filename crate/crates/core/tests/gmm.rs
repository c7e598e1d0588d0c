use proptest::prelude::*;
use rand::Rng;

use rws_core::diff::Tape;
use rws_core::gmm::*;
use rws_core::math;
use rws_core::rng::stream;

fn small_config(iterations: usize) -> GmmConfig {
    GmmConfig {
        iterations,
        cadence: 5,
        batch_size: 20,
        test_set_size: 10,
        grad_std_repeats: 3,
        ..GmmConfig::default()
    }
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

/// Posterior by direct normalization of the joint densities.
fn brute_force_posterior(theta: &[f64], x: f64) -> Vec<f64> {
    let max = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = theta.iter().map(|t| (t - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let joint: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(c, w)| {
            let d = x - 10.0 * c as f64;
            w / total * (-d * d / 50.0).exp() / (2.0 * std::f64::consts::PI * 25.0).sqrt()
        })
        .collect();
    let z: f64 = joint.iter().sum();
    joint.iter().map(|j| j / z).collect()
}

#[test]
fn true_prior_is_proportional_to_c_plus_five() {
    let p = GmmModel::true_model(20).unwrap().prior();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((p[0] - 5.0 / 290.0).abs() < 1e-12);
    assert!((p[19] - 24.0 / 290.0).abs() < 1e-12);
    assert!(p.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn sampled_components_match_prior_frequencies() {
    let model = GmmModel::true_model(20).unwrap();
    let prior = model.prior();
    let n = 100_000;
    let draws = model.sample_pairs(n, &mut stream(11, 0, "freq"));
    let mut counts = vec![0usize; 20];
    let mut offsets = 0.0;
    for &(z, x) in &draws {
        counts[z] += 1;
        offsets += x - 10.0 * z as f64;
    }
    for (c, &count) in counts.iter().enumerate() {
        let f = count as f64 / n as f64;
        let se = (prior[c] * (1.0 - prior[c]) / n as f64).sqrt();
        assert!((f - prior[c]).abs() < 4.0 * se, "component {c}: {f} vs {}", prior[c]);
    }
    // Residuals x - μ_z are N(0, 25).
    let mean_offset = offsets / n as f64;
    assert!(mean_offset.abs() < 4.0 * 5.0 / (n as f64).sqrt());
}

#[test]
fn exact_posterior_symmetry_and_argmax() {
    let p = GmmModel::new(vec![0.0, 0.0]).unwrap().exact_posterior(5.0);
    assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    let q = GmmModel::new(vec![0.0; 10]).unwrap().exact_posterior(30.0);
    assert_eq!(math::argmax(&q), 3);
}

#[test]
fn exact_posterior_matches_brute_force_up_to_fifty_components() {
    let mut rng = stream(5, 0, "posterior");
    for c in 2..=50 {
        let theta: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let model = GmmModel::new(theta.clone()).unwrap();
        for _ in 0..5 {
            let x = rng.random_range(-20.0..10.0 * c as f64 + 20.0);
            let exact = model.exact_posterior(x);
            let brute = brute_force_posterior(&theta, x);
            for (a, b) in exact.iter().zip(&brute) {
                assert!((a - b).abs() < 1e-12, "C={c} x={x}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn l2_prior_examples() {
    let truth = GmmModel::true_model(20).unwrap();
    assert!(l2_prior(&true_theta(20), &truth) < 1e-15);
    let onehot_first = GmmModel::new(vec![800.0, 0.0]).unwrap();
    assert!((l2_prior(&[0.0, 800.0], &onehot_first) - 2f64.sqrt()).abs() < 1e-12);

    let mut rng = stream(2, 0, "l2");
    let a: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (pa, pb) = (math::softmax(&a), math::softmax(&b));
    let direct = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!((l2_prior(&a, &GmmModel::new(b).unwrap()) - direct).abs() < 1e-15);
}

#[test]
fn l2_prior_is_permutation_covariant() {
    let a = [0.3, -1.0, 2.0, 0.0];
    let b = [1.0, 0.5, -0.5, 0.2];
    let perm = [2, 0, 3, 1];
    let pa: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
    let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
    let d = l2_prior(&a, &GmmModel::new(b.to_vec()).unwrap());
    let dp = l2_prior(&pa, &GmmModel::new(pb).unwrap());
    assert!((d - dp).abs() < 1e-15);
}

#[test]
fn l2_posterior_of_uniform_proposal_matches_direct_average() {
    let mut net = GmmInferenceNet::new(20, &mut stream(0, 0, "net"));
    for t in net.params_mut().tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let truth = GmmModel::true_model(20).unwrap();
    let test_set = truth.sample_batch(50, &mut stream(0, 0, "test"));
    let uniform = vec![0.05; 20];
    let direct = test_set
        .iter()
        .map(|&x| math::l2_distance(&uniform, &truth.exact_posterior(x)))
        .sum::<f64>()
        / 50.0;
    let metric = l2_posterior(&net, &truth, &test_set).unwrap();
    assert!((metric - direct).abs() < 1e-12);

    // Far from every mean but the last, the posterior is nearly one-hot.
    let far = l2_posterior(&net, &truth, &[1000.0]).unwrap();
    let onehot_gap = (0.95f64.powi(2) + 19.0 * 0.05f64.powi(2)).sqrt();
    assert!((far - onehot_gap).abs() < 1e-9);
    assert!(l2_posterior(&net, &truth, &[]).is_err());
}

#[test]
fn init_modes() {
    let uniform = math::softmax(&init_theta(InitMode::Uniform, 20));
    assert!(uniform.iter().all(|p| (p - 0.05).abs() < 1e-15));
    let adverse = math::softmax(&init_theta(InitMode::Adverse, 20));
    let ratio = adverse[1] / adverse[0];
    assert!(ratio < 1.0);
    for w in adverse.windows(2) {
        assert!((w[1] / w[0] - ratio).abs() < 1e-12);
    }
    assert!((adverse[0] / adverse[19] / 19f64.exp() - 1.0).abs() < 1e-12);
    assert_eq!("adverse".parse::<InitMode>().unwrap(), InitMode::Adverse);
    assert!("steep".parse::<InitMode>().is_err());
}

#[test]
fn branch_support_examples() {
    assert_eq!(branch_support(&[0.05; 20], 1e-3).len(), 20);
    let mut onehot = vec![0.0; 20];
    onehot[4] = 1.0;
    assert_eq!(branch_support(&onehot, 1e-3), vec![4]);
    let mut pruned = vec![0.0; 20];
    for p in pruned.iter_mut().take(10) {
        *p = 0.1;
    }
    assert_eq!(branch_support(&pruned, 1e-3), (0..10).collect::<Vec<_>>());
}

#[test]
fn relaxed_log_joint_is_exact_at_vertices_and_soft_inside() {
    let theta = [0.2, -0.4, 1.0];
    let model = GmmModel::new(theta.to_vec()).unwrap();
    let pi = math::softmax(&theta);
    let x = 12.0;
    let soft = [0.2, 0.5, 0.3];
    let tape = Tape::new();
    let mut rows = Vec::new();
    for c in 0..3 {
        let mut e = vec![0.0; 3];
        e[c] = 1.0;
        rows.extend(e);
    }
    rows.extend(soft);
    let s = tape.constant_from(vec![4, 3], rows).unwrap();
    let prior = tape.constant_from(vec![3, 1], pi.clone()).unwrap();
    let xr = tape.constant_from(vec![4, 1], vec![x; 4]).unwrap();
    let out = relaxed_log_joint(s, prior, xr).unwrap().value();
    for c in 0..3 {
        let hard = pi[c].ln() + model.log_likelihood(x, c);
        assert!((out[c] - hard).abs() < 1e-12);
    }
    let mix_prior: f64 = soft.iter().zip(&pi).map(|(a, b)| a * b).sum();
    let mean: f64 = soft.iter().enumerate().map(|(c, w)| w * 10.0 * c as f64).sum();
    let var: f64 = soft.iter().map(|w| w * 25.0).sum();
    let expected = mix_prior.ln() - 0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean).powi(2) / (2.0 * var);
    assert!((out[3] - expected).abs() < 1e-12);
}

#[test]
fn ws_and_ww_share_the_first_theta_update() {
    let config = small_config(10);
    let mut ws = GmmTrainer::new(config.clone(), GmmMethod::Ws, 5, 3).unwrap();
    let mut ww = GmmTrainer::new(config, GmmMethod::Ww, 5, 3).unwrap();
    assert_eq!(ws.net(), ww.net());
    ws.step().unwrap();
    ww.step().unwrap();
    assert_eq!(bits(ws.model().theta()), bits(ww.model().theta()));
    assert_ne!(ws.net(), ww.net());
    ws.step().unwrap();
    ww.step().unwrap();
    assert_ne!(bits(ws.model().theta()), bits(ww.model().theta()));
}

#[test]
fn delta_ww_at_zero_reproduces_ww_bit_for_bit() {
    let config = GmmConfig { delta: 0.0, ..small_config(30) };
    let mut a = GmmTrainer::new(config.clone(), GmmMethod::DeltaWw, 4, 9).unwrap();
    let mut b = GmmTrainer::new(config, GmmMethod::Ww, 4, 9).unwrap();
    let la = a.run(|_| {}).unwrap();
    let lb = b.run(|_| {}).unwrap();
    assert_eq!(la, lb);
    assert_eq!(bits(a.model().theta()), bits(b.model().theta()));
    assert_eq!(a.net(), b.net());
}

#[test]
fn metrics_logs_are_reproducible() {
    for method in [GmmMethod::Ws, GmmMethod::Vimco, GmmMethod::Concrete] {
        let a = train_gmm(small_config(12), method, 3, 4).unwrap();
        let b = train_gmm(small_config(12), method, 3, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|m| m.iteration).collect::<Vec<_>>(), vec![0, 5, 10]);
    }
}

#[test]
fn invalid_method_and_k_combinations_fail() {
    assert!(GmmTrainer::new(GmmConfig::default(), GmmMethod::Vimco, 1, 0).is_err());
    assert!(GmmTrainer::new(GmmConfig::default(), GmmMethod::Ws, 0, 0).is_err());
    assert!("wake-wake".parse::<GmmMethod>().is_err());
    for m in GmmMethod::ALL {
        assert_eq!(m.name().parse::<GmmMethod>().unwrap(), m);
    }
    let bad = GmmConfig { components: 1, ..GmmConfig::default() };
    assert!(GmmTrainer::new(bad, GmmMethod::Ws, 2, 0).is_err());
}

#[test]
fn every_method_trains_with_finite_metrics() {
    for method in GmmMethod::ALL {
        let log = train_gmm(small_config(10), method, 3, 1).unwrap();
        for m in &log {
            assert!(m.l2_prior.is_finite() && m.l2_posterior.is_finite() && m.grad_std.is_finite(), "{method}");
            assert!(m.support_size >= 1 && m.support_size <= 20);
        }
    }
}

#[test]
fn rebar_control_variate_trains() {
    let config = GmmConfig { control_variate: ControlVariateKind::Rebar, ..small_config(10) };
    let log = train_gmm(config, GmmMethod::Relax, 2, 0).unwrap();
    assert!(log.iter().all(|m| m.grad_std.is_finite()));
}

#[test]
fn concrete_temperature_anneals_linearly() {
    let mut t = GmmTrainer::new(small_config(4), GmmMethod::Concrete, 2, 0).unwrap();
    let mut temps = vec![t.temperature()];
    for _ in 0..4 {
        t.step().unwrap();
        temps.push(t.temperature());
    }
    let expected = [3.0, 2.375, 1.75, 1.125, 0.5];
    for (a, b) in temps.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn wake_phi_bias_oracle_matches_monte_carlo() {
    let config = GmmConfig { components: 3, ..small_config(1) };
    let t = GmmTrainer::new(config, GmmMethod::Ww, 2, 0).unwrap();
    let xs = [4.0, 13.0];
    let exact = t.exact_wake_phi_gradient(&xs).unwrap().concat();
    let bias = t.wake_phi_bias(&xs, 2, 400_000, &mut stream(0, 0, "bias")).unwrap();
    let reps = 20_000;
    let mut rng = stream(1, 0, "draws");
    let draws: Vec<Vec<f64>> = (0..reps)
        .map(|_| t.estimate(GmmMethod::Ww, 2, &xs, &mut rng).unwrap().phi.concat())
        .collect();
    let mut worst: f64 = 0.0;
    for i in 0..exact.len() {
        let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        let mean = col.iter().sum::<f64>() / reps as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        let z = (mean - exact[i] - bias[i]).abs() / (se + 1e-4);
        worst = worst.max(z);
    }
    assert!(worst < 4.5, "worst z {worst}");
    assert!(bias.iter().map(|b| b * b).sum::<f64>().sqrt() > 1e-3);
}

#[test]
fn wake_phi_bias_shrinks_with_more_particles() {
    let t = GmmTrainer::new(small_config(1), GmmMethod::Ww, 1, 0).unwrap();
    let xs = t.truth().sample_batch(5, &mut stream(0, 0, "xs"));
    let norm = |k: usize| {
        let b = t.wake_phi_bias(&xs, k, 20_000, &mut stream(0, k, "bias")).unwrap();
        b.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let norms: Vec<f64> = [1, 10, 100].iter().map(|&k| norm(k)).collect();
    assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
}

proptest! {
    #[test]
    fn l2_metrics_are_nonnegative_and_zero_only_on_match(a in prop::collection::vec(-4.0f64..4.0, 5), b in prop::collection::vec(-4.0f64..4.0, 5)) {
        let d = l2_prior(&a, &GmmModel::new(b.clone()).unwrap());
        prop_assert!(d >= 0.0);
        prop_assert!(l2_prior(&a, &GmmModel::new(a.clone()).unwrap()) < 1e-15);
        let (pa, pb) = (math::softmax(&a), math::softmax(&b));
        if pa.iter().zip(&pb).any(|(x, y)| (x - y).abs() > 1e-9) {
            prop_assert!(d > 0.0);
        }
    }
}

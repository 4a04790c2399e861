use detrame_core::dict::{md_direct, theorem1_check, DictionaryFactor};
use detrame_core::layers::{Mode, QReluLayer};
use detrame_core::network::{build_detrame_plainnet, build_plainnet, LayerSpec, Network, ParamKind};
use detrame_core::qmetric::{
    build_reparams, fb_precond_iterate, fb_reparams, fixed_point_residual, prox_objective, q_norm,
    qprox_iterate, qprox_oracle, PrecondParams,
};
use detrame_core::tensor::{conv2d, matmul, RealMatrix, RealVector};
use detrame_core::train::{init_params, sgd_step, OptimizerState, TrainConfig};
use detrame_core::{Rng, Tensor};
use proptest::prelude::*;

fn dominant_metric(rng: &mut Rng, k: usize) -> RealMatrix {
    let mut q = RealMatrix::zeros(k, k);
    for i in 0..k {
        for l in 0..i {
            let v = rng.uniform(-0.5, 0.5);
            q[(i, l)] = v;
            q[(l, i)] = v;
        }
    }
    for i in 0..k {
        let off: f64 = (0..k).filter(|&l| l != i).map(|l| q[(i, l)].abs()).sum();
        q[(i, i)] = off + rng.uniform(0.2, 1.5);
    }
    q
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize, std: f64) -> RealMatrix {
    RealMatrix::from_fn(r, c, |_, _| rng.normal(0.0, std))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn delta_kernel_is_identity(seed in any::<u64>(), c in 1usize..4, h in 1usize..7, w in 1usize..7, half in 0usize..3) {
        let mut rng = Rng::new(seed);
        let k = 2 * half + 1;
        let x = rng.normal_tensor(&[2, c, h, w], 0.0, 1.0);
        let mut kern = Tensor::zeros(&[c, c, k, k]);
        for ch in 0..c {
            kern.data_mut()[((ch * c + ch) * k + half) * k + half] = 1.0;
        }
        let y = conv2d(&x, &kern, 1, half).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (a, b, c) = (random_matrix(&mut rng, 8, 8, 1.0), random_matrix(&mut rng, 8, 8, 1.0), random_matrix(&mut rng, 8, 8, 1.0));
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!((left - right).amax() <= 1e-10);
    }

    #[test]
    fn dictionary_layer_is_feasible_and_matches_prox(seed in any::<u64>(), m in 2usize..8, k in 2usize..10, alpha in 0.1f64..2.0) {
        let mut rng = Rng::new(seed);
        let d = random_matrix(&mut rng, m, k, 1.0);
        let shift = RealVector::from_fn(k, |_, _| rng.normal(0.0, 0.3));
        let f = DictionaryFactor::new(d, alpha, rng.uniform(0.05, 0.5), rng.uniform(0.0, 0.2), shift).unwrap();
        let x = RealVector::from_fn(m, |_, _| rng.normal(0.0, 1.0));
        let a = md_direct(&f, &x).unwrap();
        prop_assert!(a.iter().all(|&v| v >= 0.0));
        let report = theorem1_check(&f, &x, 1e-6).unwrap();
        prop_assert!(report.passed, "diff {}", report.max_abs_diff);
    }

    #[test]
    fn appendix_reparams_at_unit_step(seed in any::<u64>(), k in 1usize..10) {
        let mut rng = Rng::new(seed);
        let q = dominant_metric(&mut rng, k);
        let (lambda, beta) = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
        let direct = build_reparams(&q, lambda, beta, 1).unwrap();
        let fb = fb_reparams(&q, lambda, beta, &q.diagonal(), 1.0);
        prop_assert!((direct.wtilde() - &fb.wtilde).amax() <= 1e-14);
        prop_assert!((direct.h() - &fb.h).amax() <= 1e-14);
        prop_assert!((direct.b() - &fb.b).amax() <= 1e-14);
        prop_assert!((0..k).all(|i| fb.wtilde[(i, i)] == 0.0));
    }

    #[test]
    fn oracle_prox_is_nonexpansive_in_metric(seed in any::<u64>(), k in 1usize..8, n in 1usize..4) {
        let mut rng = Rng::new(seed);
        let q = dominant_metric(&mut rng, k);
        let (lambda, beta) = (rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5));
        let z1 = random_matrix(&mut rng, k, n, 1.0);
        let z2 = random_matrix(&mut rng, k, n, 1.0);
        let p1 = qprox_oracle(&q, &z1, lambda, beta).unwrap();
        let p2 = qprox_oracle(&q, &z2, lambda, beta).unwrap();
        prop_assert!(q_norm(&q, &(p1 - p2)) <= (1.0 + 1e-10) * q_norm(&q, &(z1 - z2)));
    }

    #[test]
    fn forward_backward_objective_never_increases(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = Rng::new(seed);
        let q = dominant_metric(&mut rng, k);
        let (lambda, beta) = (rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5));
        let z = random_matrix(&mut rng, k, 2, 1.0);
        let pp = PrecondParams::diagonal(&q, rng.uniform(0.3, 1.0)).unwrap();
        let mut prev = f64::INFINITY;
        for t in 1..30 {
            let u = fb_precond_iterate(&z, &q, lambda, beta, &pp, t, None).unwrap().u;
            prop_assert!(u.iter().all(|&v| v >= 0.0));
            let obj = prox_objective(&q, &z, &u, lambda, beta);
            prop_assert!(obj <= prev + 1e-12, "step {}: {} > {}", t, obj, prev);
            prev = obj;
        }
    }

    #[test]
    fn solvers_agree_and_satisfy_fixed_point(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = Rng::new(seed);
        let q = dominant_metric(&mut rng, k);
        let (lambda, beta) = (rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5));
        let z = random_matrix(&mut rng, k, 3, 1.0);
        let oracle = qprox_oracle(&q, &z, lambda, beta).unwrap();
        let rec = qprox_iterate(&z, &build_reparams(&q, lambda, beta, 100_000).unwrap(), Some(1e-14)).unwrap();
        let pp = PrecondParams::diagonal(&q, 1.0).unwrap();
        let fb = fb_precond_iterate(&z, &q, lambda, beta, &pp, 100_000, Some(1e-14)).unwrap();
        for u in [&oracle, &rec.u, &fb.u] {
            prop_assert!(u.iter().all(|&v| v >= 0.0));
            prop_assert!((u - &oracle).amax() <= 1e-6);
            prop_assert!(fixed_point_residual(u, &q, &z, lambda, beta) <= 1e-6);
        }
    }

    #[test]
    fn unrolled_qrelu_approaches_oracle_monotonically(seed in any::<u64>(), k in 1usize..7) {
        let mut rng = Rng::new(seed);
        let q = dominant_metric(&mut rng, k);
        let (lambda, beta) = (rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5));
        let z = random_matrix(&mut rng, k, 2, 1.0);
        let oracle = qprox_oracle(&q, &z, lambda, beta).unwrap();
        let mut prev = f64::INFINITY;
        for t in 1..25 {
            let p = build_reparams(&q, lambda, beta, t).unwrap();
            let err = (qprox_iterate(&z, &p, None).unwrap().u - &oracle).amax();
            prop_assert!(err <= prev + 1e-12, "T={}: {} > {}", t, err, prev);
            prev = err;
        }
    }

    #[test]
    fn qrelu_output_is_nonnegative(seed in any::<u64>(), steps in 1usize..6, c in 1usize..5) {
        let mut rng = Rng::new(seed);
        let mut layer = QReluLayer::conv(Tensor::zeros(&[c, c, 3, 3]), rng.uniform_tensor(&[c], 0.0, 1.0), rng.uniform_tensor(&[c], 0.0, 0.5), steps, 1).unwrap();
        layer.wtilde = rng.normal_tensor(&[c, c, 3, 3], 0.0, 0.5);
        for i in layer.pinned_indices() {
            layer.wtilde.data_mut()[i] = 0.0;
        }
        let z = rng.normal_tensor(&[2, c, 4, 5], 0.0, 2.0);
        let (u, _) = layer.forward(&z).unwrap();
        prop_assert!(u.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pointwise_conv_qrelu_equals_dense(seed in any::<u64>(), k in 1usize..6, steps in 1usize..5) {
        let mut rng = Rng::new(seed);
        let mut w = rng.normal_tensor(&[k, k], 0.0, 0.4);
        (0..k).for_each(|i| w.data_mut()[i * k + i] = 0.0);
        let h = rng.uniform_tensor(&[k], 0.0, 1.0);
        let b = rng.uniform_tensor(&[k], 0.0, 0.3);
        let dense = QReluLayer::dense(w.clone(), h.clone(), b.clone(), steps).unwrap();
        let conv = QReluLayer::conv(w.reshape(&[k, k, 1, 1]).unwrap(), h, b, steps, 1).unwrap();
        let z = rng.normal_tensor(&[3, k], 0.0, 1.0);
        let ud = dense.forward(&z).unwrap().0;
        let uc = conv.forward(&z.clone().reshape(&[3, k, 1, 1]).unwrap()).unwrap().0;
        prop_assert_eq!(ud.data(), uc.data());
    }

    #[test]
    fn projected_sgd_keeps_constraints(seed in any::<u64>(), scale in 0.0f64..100.0) {
        let spec = detrame_core::network::build_plainnet_with(3, 2, Some(2), detrame_core::network::PlainNetOptions { width: 2, image: 4, ..Default::default() }).unwrap();
        let mut net = Network::zeroed(&spec).unwrap();
        let mut rng = Rng::new(seed);
        init_params(&mut net, &mut rng);
        let mut state = OptimizerState::new(&net);
        let cfg = TrainConfig::default();
        for _ in 0..3 {
            let grads: Vec<Tensor> = net.params().iter().map(|p| rng.normal_tensor(p.shape(), 0.0, scale)).collect();
            sgd_step(&mut net, &mut state, &grads, &cfg, 0.1).unwrap();
            for (slot, p) in net.slots().iter().zip(net.params()) {
                match slot.kind {
                    ParamKind::Wtilde => prop_assert!(slot.pinned.iter().all(|&i| p.data()[i] == 0.0)),
                    ParamKind::Gain => prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v))),
                    ParamKind::Threshold => prop_assert!(p.data().iter().all(|&v| v >= 0.0)),
                    _ => {}
                }
            }
        }
        let x = rng.normal_tensor(&[1, 3, 4, 4], 0.0, 1.0);
        prop_assert!(net.forward(&x, Mode::Eval, &mut rng).is_ok());
    }
}

#[test]
fn plain_and_detrame_differ_only_in_activations() {
    for depth in [3, 6, 9, 12] {
        let plain = build_plainnet(depth, 10).unwrap();
        let det = build_detrame_plainnet(depth, 10, 3).unwrap();
        assert_eq!(plain.layers.len(), det.layers.len());
        for (a, b) in plain.layers.iter().zip(&det.layers) {
            match (a, b) {
                (LayerSpec::Relu, LayerSpec::Qrelu { steps: 3, .. }) => {}
                _ => assert_eq!(a, b),
            }
        }
        // the parameter difference is exactly the Q-metric blocks
        let extra: usize = det
            .layers
            .windows(2)
            .filter_map(|w| match (w[0], w[1]) {
                (LayerSpec::Conv { filters, kernel, .. }, LayerSpec::Qrelu { .. }) => {
                    Some(filters * filters * kernel * kernel + 2 * filters)
                }
                _ => None,
            })
            .sum();
        assert_eq!(det.param_count().unwrap(), plain.param_count().unwrap() + extra);
        let shapes = det.validate().unwrap();
        assert_eq!(*shapes.last().unwrap(), detrame_core::network::Shape::Flat(10));
    }
}

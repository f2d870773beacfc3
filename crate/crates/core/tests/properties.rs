use icfl_core::ensemble::{h_ensemble, mix, random_init, rotate_pushforward};
use icfl_core::objective::Problem;
use icfl_core::quadrature::{draw_eval_set, feature_values, InputDist};
use icfl_core::teacher::{build_teacher, random_contraction, random_orthonormal, TeacherSpec};
use icfl_core::{seeded_rng, Activation, Ensemble, Particle, Rotation};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn problem(seed: u64, ridge: f64) -> Problem {
    let e = draw_eval_set(seed, 256, 4, InputDist::Gaussian).unwrap();
    let mut rng = seeded_rng(seed ^ 0xabcd);
    let t = build_teacher(&TeacherSpec::new(3, 30), &e, Activation::Sigmoid, &mut rng).unwrap();
    Problem::with_ridge(t, e, Activation::Sigmoid, ridge).unwrap()
}

fn model(seed: u64, n: usize) -> Ensemble {
    random_init(n, 3, 4, 0.5, &mut seeded_rng(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn activation_derivatives_match_differences(z in -8.0f64..8.0, tanh in any::<bool>()) {
        let act = if tanh { Activation::Tanh } else { Activation::Sigmoid };
        let h = 1e-5;
        let d1 = (act.value(z + h) - act.value(z - h)) / (2.0 * h);
        let d2 = (act.derivative(z + h) - act.derivative(z - h)) / (2.0 * h);
        prop_assert!((d1 - act.derivative(z)).abs() < 1e-8);
        prop_assert!((d2 - act.second_derivative(z)).abs() < 1e-8);
        let (v, d) = act.value_and_derivative(z);
        prop_assert_eq!(v, act.value(z));
        prop_assert!((d - act.derivative(z)).abs() < 1e-15);
    }

    #[test]
    fn particle_coords_round_trip(a in prop::collection::vec(-2.0f64..2.0, 3), w in prop::collection::vec(-2.0f64..2.0, 5)) {
        let p = Particle::new(a, w);
        prop_assert_eq!(Particle::from_coords(&p.coords(), 3), p);
    }

    #[test]
    fn mixture_features_are_affine(seed in 0u64..1000, s in 0.0f64..=1.0) {
        let mu = model(seed, 7);
        let nu = model(seed + 1, 11);
        let m = mix(&mu, &nu, s).unwrap();
        let x = [0.3, -1.2, 0.5, 2.0];
        let act = Activation::Tanh;
        let (hm, hu, hn) = (h_ensemble(&m, &x, act).unwrap(), h_ensemble(&mu, &x, act).unwrap(), h_ensemble(&nu, &x, act).unwrap());
        for i in 0..3 {
            prop_assert!((hm[i] - ((1.0 - s) * hu[i] + s * hn[i])).abs() < 1e-13);
        }
        prop_assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pushforward_applies_the_rotation(seed in 0u64..1000, norm in 0.05f64..=1.0) {
        let mu = model(seed, 9);
        let r = random_contraction(3, norm, &mut seeded_rng(seed + 5));
        let pushed = rotate_pushforward(&mu, &Rotation::new(r.clone()).unwrap()).unwrap();
        let e = draw_eval_set(seed, 16, 4, InputDist::Gaussian).unwrap();
        let h = feature_values(&mu, e.samples(), Activation::Sigmoid).unwrap();
        let hp = feature_values(&pushed, e.samples(), Activation::Sigmoid).unwrap();
        prop_assert!((hp - &r * h).amax() < 1e-12);
    }

    #[test]
    fn reduced_loss_is_rotation_invariant(seed in 0u64..200) {
        let p = problem(seed % 7, 0.0);
        let mu = model(seed, 15);
        let q = random_orthonormal(3, 3, &mut seeded_rng(seed + 9));
        let turned = rotate_pushforward(&mu, &Rotation::new(q).unwrap()).unwrap();
        let (l0, l1) = (p.reduced_loss(&mu).unwrap().loss, p.reduced_loss(&turned).unwrap().loss);
        prop_assert!((l0 - l1).abs() <= 1e-9 * l0.abs().max(1e-12));
    }

    #[test]
    fn closed_form_attention_is_optimal(seed in 0u64..200, scale in 0.01f64..1.0) {
        let p = problem(seed % 5, 0.0);
        let mu = model(seed, 12);
        let pack = p.reduced_loss(&mu).unwrap();
        let mut rng = seeded_rng(seed + 3);
        let dir = random_contraction(3, 1.0, &mut rng);
        let w = &pack.w_opt + dir * (scale * pack.w_opt.norm());
        let best = p.loss_tf(&mu, &pack.w_opt).unwrap();
        prop_assert!((best - pack.loss).abs() <= 1e-9 * pack.zero_readout_loss());
        prop_assert!(p.loss_tf(&mu, &w).unwrap() >= best - 1e-12);
        prop_assert!(pack.loss <= pack.zero_readout_loss() + 1e-12);
        prop_assert!(pack.loss >= -1e-12);
    }
}

#[test]
fn teacher_recovers_linear_task() {
    let p = problem(3, 0.0);
    let v = DVector::from_vec(vec![0.7, -1.1, 0.4]);
    let t = p.teacher().clone();
    let g = move |x: &[f64]| DVector::from_vec(h_ensemble(&t, x, Activation::Sigmoid).unwrap()).dot(&v);
    let query = draw_eval_set(99, 512, 4, InputDist::Gaussian).unwrap();
    let w = p.reduced_loss(p.teacher()).unwrap().w_opt;
    let te = p.test_error(p.teacher(), &w, &g, &query).unwrap();
    assert!(te.error < 1e-20, "error {:e}", te.error);
    assert!(te.floor < 1e-20, "floor {:e}", te.floor);
}

#[test]
fn untrained_model_misses_linear_task() {
    let p = problem(4, 1e-8);
    let v = DVector::from_vec(vec![1.0, 0.5, -0.8]);
    let t = p.teacher().clone();
    let g = move |x: &[f64]| DVector::from_vec(h_ensemble(&t, x, Activation::Sigmoid).unwrap()).dot(&v);
    let query = draw_eval_set(98, 512, 4, InputDist::Gaussian).unwrap();
    let mu = model(4, 40);
    let w = p.reduced_loss(&mu).unwrap().w_opt;
    let te = p.test_error(&mu, &w, &g, &query).unwrap();
    assert!(te.error >= te.floor);
    let gq: Vec<f64> = (0..query.m()).map(|m| g(&query.sample(m))).collect();
    let second = gq.iter().map(|v| v * v).sum::<f64>() / gq.len() as f64;
    assert!(te.error > 1e-3 * second);
}

#[test]
fn rejects_mismatched_dimensions() {
    let p = problem(1, 1e-8);
    let wrong = random_init(5, 3, 6, 0.5, &mut seeded_rng(0)).unwrap();
    assert!(p.reduced_loss(&wrong).is_err());
    assert!(p.loss_tf(&model(0, 5), &DMatrix::zeros(2, 2)).is_err());
    assert!(mix(&model(0, 3), &model(1, 3), 1.5).is_err());
    assert!(Ensemble::new(vec![], vec![]).is_err());
}

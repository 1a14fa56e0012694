mod common;

use irs_autodiff::check::{max_relative_error, numeric_gradient};
use irs_autodiff::{Graph, Tensor};
use irs_core::losses::{
    anatomy_loss, anatomy_loss_per_sample, consistency_loss, pseudo_labels, soft_dice, supervised_loss, total_loss, SubsetMode,
};
use irs_core::relation::RelationKind;
use irs_core::Error;
use proptest::prelude::*;

fn scalar(f: impl FnOnce(&mut Graph) -> irs_autodiff::Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item()
}

fn mask_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), n)
}

fn prob_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_dice_matches_oracle_and_is_symmetric(a in prob_strategy(36), b in prob_strategy(36)) {
        let ab = scalar(|g| { let (x, y) = (g.constant(Tensor::new(&[6, 6], a.clone())), g.constant(Tensor::new(&[6, 6], b.clone()))); soft_dice(g, x, y).unwrap() });
        let ba = scalar(|g| { let (x, y) = (g.constant(Tensor::new(&[6, 6], b.clone())), g.constant(Tensor::new(&[6, 6], a.clone()))); soft_dice(g, x, y).unwrap() });
        prop_assert!((ab - common::soft_dice_ref(&a, &b)).abs() < 1e-12);
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn unrelated_is_identically_zero(y in mask_strategy(25), p in prob_strategy(25)) {
        for mode in [SubsetMode::Literal, SubsetMode::Prose] {
            let v = scalar(|g| { let (y, p) = (g.constant(Tensor::new(&[5, 5], y.clone())), g.constant(Tensor::new(&[5, 5], p.clone()))); anatomy_loss(g, y, p, RelationKind::Unrelated, mode).unwrap() });
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn exclusive_vanishes_on_disjoint_support(y in mask_strategy(25), p in prob_strategy(25)) {
        let p: Vec<f64> = p.iter().zip(&y).map(|(p, y)| p * (1.0 - y)).collect();
        let v = scalar(|g| { let (y, p) = (g.constant(Tensor::new(&[5, 5], y.clone())), g.constant(Tensor::new(&[5, 5], p.clone()))); anatomy_loss(g, y, p, RelationKind::MutuallyExclusive, SubsetMode::Literal).unwrap() });
        prop_assert!(v.abs() < 1e-12);
    }

    #[test]
    fn superset_vanishes_inside_the_new_class(y in mask_strategy(25), p in prob_strategy(25)) {
        let p: Vec<f64> = p.iter().zip(&y).map(|(p, y)| p * y).collect();
        let v = scalar(|g| { let (y, p) = (g.constant(Tensor::new(&[5, 5], y.clone())), g.constant(Tensor::new(&[5, 5], p.clone()))); anatomy_loss(g, y, p, RelationKind::NewSupersetOfOld, SubsetMode::Literal).unwrap() });
        prop_assert!(v.abs() <= 1e-4);
    }

    #[test]
    fn prose_subset_vanishes_when_old_covers_new(y in mask_strategy(25), p in prob_strategy(25)) {
        prop_assume!(y.iter().any(|&v| v == 1.0));
        let p: Vec<f64> = p.iter().zip(&y).map(|(p, y)| p.max(*y)).collect();
        let v = scalar(|g| { let (y, p) = (g.constant(Tensor::new(&[5, 5], y.clone())), g.constant(Tensor::new(&[5, 5], p.clone()))); anatomy_loss(g, y, p, RelationKind::NewSubsetOfOld, SubsetMode::Prose).unwrap() });
        prop_assert!(v.abs() < 1e-6);
    }

    #[test]
    fn anatomy_values_are_bounded(y in mask_strategy(25), p in prob_strategy(25)) {
        for rel in RelationKind::ALL {
            for mode in [SubsetMode::Literal, SubsetMode::Prose] {
                let v = scalar(|g| { let (y, p) = (g.constant(Tensor::new(&[5, 5], y.clone())), g.constant(Tensor::new(&[5, 5], p.clone()))); anatomy_loss(g, y, p, rel, mode).unwrap() });
                prop_assert!((-1.0..=1.0).contains(&v), "{rel:?} {mode:?} {v}");
            }
        }
    }

    #[test]
    fn consistency_is_a_premetric(t in prop::collection::vec(-3.0f64..3.0, 24), s in prop::collection::vec(-3.0f64..3.0, 24), axis in 0usize..3) {
        let shape = [2, 3, 4];
        let ts = scalar(|g| { let (a, b) = (g.constant(Tensor::new(&shape, t.clone())), g.constant(Tensor::new(&shape, s.clone()))); consistency_loss(g, a, b, axis).unwrap() });
        let tt = scalar(|g| { let (a, b) = (g.constant(Tensor::new(&shape, t.clone())), g.constant(Tensor::new(&shape, t.clone()))); consistency_loss(g, a, b, axis).unwrap() });
        prop_assert!(ts >= -1e-12);
        prop_assert!(tt.abs() < 1e-12);
        prop_assert!((ts - common::consistency_ref(&t, &s, &shape, axis)).abs() < 1e-9);
    }

    #[test]
    fn supervised_matches_oracle(logits in prop::collection::vec(-6.0f64..6.0, 2 * 2 * 16), y in mask_strategy(32)) {
        let v = scalar(|g| { let (z, y) = (g.constant(Tensor::new(&[2, 2, 4, 4], logits.clone())), g.constant(Tensor::new(&[2, 4, 4], y.clone()))); supervised_loss(g, z, y).unwrap() });
        prop_assert!((v - common::supervised_ref(&logits, &y, 2, 16)).abs() < 1e-9);
        prop_assert!(v >= 0.0);
    }
}

#[test]
fn per_sample_anatomy_averages_to_the_scalar_form() {
    let mut rng = common::rng(1);
    let y = common::binary(&mut rng, 3 * 16, 0.5);
    let p = common::uniform(&mut rng, 3 * 16);
    for rel in RelationKind::ALL {
        let mut g = Graph::new();
        let yv = g.constant(Tensor::new(&[3, 4, 4], y.clone()));
        let pv = g.constant(Tensor::new(&[3, 4, 4], p.clone()));
        let per = anatomy_loss_per_sample(&mut g, yv, pv, rel, SubsetMode::Literal).unwrap();
        let per = g.value(per).data().to_vec();
        for b in 0..3 {
            let one = scalar(|g| {
                let y = g.constant(Tensor::new(&[4, 4], y[b * 16..(b + 1) * 16].to_vec()));
                let p = g.constant(Tensor::new(&[4, 4], p[b * 16..(b + 1) * 16].to_vec()));
                anatomy_loss(g, y, p, rel, SubsetMode::Literal).unwrap()
            });
            assert!((per[b] - one).abs() < 1e-12, "{rel:?} sample {b}");
        }
    }
}

#[test]
fn literal_subset_is_minus_dice_of_label_and_union() {
    let y = [1.0, 1.0, 0.0, 0.0];
    let p = [0.5, 0.0, 0.25, 0.0];
    let union: Vec<f64> = y.iter().zip(&p).map(|(y, p)| y + p - y * p).collect();
    let want = -common::soft_dice_ref(&y, &union);
    let got = scalar(|g| {
        let (yv, pv) = (g.constant(Tensor::new(&[2, 2], y.to_vec())), g.constant(Tensor::new(&[2, 2], p.to_vec())));
        anatomy_loss(g, yv, pv, RelationKind::NewSubsetOfOld, SubsetMode::Literal).unwrap()
    });
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn superset_example_value() {
    // Y covers the left half; P puts 0.5 everywhere.
    let y: Vec<f64> = (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
    let p = vec![0.5; 16];
    let got = scalar(|g| {
        let (yv, pv) = (g.constant(Tensor::new(&[4, 4], y.clone())), g.constant(Tensor::new(&[4, 4], p.clone())));
        anatomy_loss(g, yv, pv, RelationKind::NewSupersetOfOld, SubsetMode::Literal).unwrap()
    });
    let want = 2.0 * 4.0 / (8.0 + 8.0 + irs_core::losses::DICE_EPS);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn non_binary_label_is_rejected() {
    let mut g = Graph::new();
    let y = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.5, 0.0, 0.0]));
    let p = g.constant(Tensor::new(&[2, 2], vec![0.1; 4]));
    let e = anatomy_loss(&mut g, y, p, RelationKind::MutuallyExclusive, SubsetMode::Literal).unwrap_err();
    assert!(matches!(e, Error::InvalidMask));
}

#[test]
fn shape_mismatches_are_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(soft_dice(&mut g, a, b), Err(Error::Shape(_))));
    assert!(matches!(consistency_loss(&mut g, a, a, 2), Err(Error::Shape(_))));
    let z = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let y = g.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(matches!(supervised_loss(&mut g, z, y), Err(Error::Shape(_))));
}

#[test]
fn non_finite_components_are_rejected() {
    let mut g = Graph::new();
    let ok = g.constant(Tensor::scalar(1.0));
    let bad = g.constant(Tensor::scalar(f64::NAN));
    assert!(matches!(total_loss(&mut g, ok, bad, ok, 1.0, 1.0), Err(Error::NonFinite(_))));
    let t = total_loss(&mut g, ok, ok, ok, 0.5, 0.25).unwrap();
    assert_eq!(g.value(t).item(), 1.75);
}

#[test]
fn consistency_gradient_reaches_only_the_student() {
    let mut rng = common::rng(6);
    let shape = [2, 3, 4];
    let t0 = Tensor::new(&shape, common::normal_ish(&mut rng, 24, 2.0));
    let s0 = Tensor::new(&shape, common::normal_ish(&mut rng, 24, 2.0));
    let mut g = Graph::new();
    let t = g.input(t0.clone());
    let s = g.input(s0.clone());
    let l = consistency_loss(&mut g, t, s, 1).unwrap();
    let grads = g.backward(l);
    assert!(grads.wrt(t).is_none_or(|gt| gt.data().iter().all(|&v| v == 0.0)));
    let numeric = numeric_gradient(&s0, 1e-6, |x| {
        scalar(|g| {
            let (a, b) = (g.constant(t0.clone()), g.constant(x.clone()));
            consistency_loss(g, a, b, 1).unwrap()
        })
    });
    assert!(max_relative_error(grads.wrt(s).unwrap(), &numeric, 1e-6) < 1e-5);
}

#[test]
fn anatomy_gradients_match_finite_differences() {
    let mut rng = common::rng(8);
    let y = Tensor::new(&[6, 6], common::binary(&mut rng, 36, 0.5));
    let p0 = Tensor::new(&[6, 6], common::uniform(&mut rng, 36));
    for rel in RelationKind::ALL {
        for mode in [SubsetMode::Literal, SubsetMode::Prose] {
            let mut g = Graph::new();
            let yv = g.constant(y.clone());
            let p = g.input(p0.clone());
            let l = anatomy_loss(&mut g, yv, p, rel, mode).unwrap();
            let grads = g.backward(l);
            let numeric = numeric_gradient(&p0, 1e-5, |x| {
                scalar(|g| {
                    let (a, b) = (g.constant(y.clone()), g.constant(x.clone()));
                    anatomy_loss(g, a, b, rel, mode).unwrap()
                })
            });
            let analytic = grads.wrt(p).cloned().unwrap_or_else(|| Tensor::zeros(&[6, 6]));
            assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-5, "{rel:?} {mode:?}");
        }
    }
}

#[test]
fn pseudo_labels_threshold_strictly_above_half() {
    // Foreground probabilities 0.5, ~0.73, ~0.27 for logit gaps 0, 1, -1.
    let logits = Tensor::new(&[1, 2, 1, 3], vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(pseudo_labels(&logits).data(), &[0.0, 1.0, 0.0]);
}

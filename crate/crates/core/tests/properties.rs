mod common;

use drd::domains::{domain_distance, generate_domain, DomainSpec, DomainTransform, LabeledDataset};
use drd::losses::{entropy_balance, mutual_information, region_pseudo_labels, student_loss};
use drd::nn::{init_mlp, softmax, softmax_rows};
use drd::region::{build_region, fused_probability, jsd};
use drd::scalar::argmax;
use drd::teacher::TeacherModel;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn logit_batch() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..10, 2usize..8).prop_flat_map(|(b, c)| (matrix(b, c, -6.0, 6.0), matrix(b, c, -6.0, 6.0)))
}

fn distribution(c: usize) -> impl Strategy<Value = Array1<f64>> {
    prop::collection::vec(-5.0f64..5.0, c).prop_map(|v| softmax(Array1::from(v).view()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_shift_invariant_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
        let x = Array1::from(v);
        let p = softmax(x.view());
        prop_assert!(p.iter().all(|&q| (0.0..=1.0).contains(&q)));
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        let shifted = softmax(x.mapv(|a| a + shift).view());
        for (a, b) in p.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mutual_information_is_symmetric_and_bounded((a, b) in logit_batch()) {
        let (p, q) = (softmax_rows(a.view()), softmax_rows(b.view()));
        let (ipq, _) = mutual_information(p.view(), q.view()).unwrap();
        let (iqp, _) = mutual_information(q.view(), p.view()).unwrap();
        prop_assert_eq!(ipq.to_bits(), iqp.to_bits());
        let c = p.ncols() as f64;
        prop_assert!(ipq >= -1e-9 && ipq <= c.ln() + 1e-9, "I = {}", ipq);
    }

    #[test]
    fn entropy_balance_is_bounded((a, _) in logit_batch()) {
        let q = softmax_rows(a.view());
        let v = entropy_balance(q.view()).unwrap();
        let c = q.ncols() as f64;
        prop_assert!(v >= -c.ln() - 1e-12 && v <= 1e-12, "{}", v);
    }

    #[test]
    fn student_loss_is_linear_in_each_weight(
        (d, s) in logit_batch(),
        w in prop::array::uniform3(0.0f64..2.0),
        probe in prop::array::uniform3(0.0f64..3.0),
    ) {
        let base = student_loss(d.view(), s.view(), w[0], w[1], w[2]).unwrap().0;
        for k in 0..3 {
            let mut ws = w;
            let mut totals = Vec::new();
            for &x in &[0.0, probe[k], 2.0 * probe[k] + 1.0] {
                ws[k] = x;
                totals.push((x, student_loss(d.view(), s.view(), ws[0], ws[1], ws[2]).unwrap().0.total));
            }
            let term = [base.l_mu, base.l_pl, base.l_en][k];
            for &(x, t) in &totals {
                let expected = totals[0].1 + x * term;
                prop_assert!((t - expected).abs() <= 1e-12 * (1.0 + t.abs()), "k={} x={} {} vs {}", k, x, t, expected);
            }
        }
    }

    #[test]
    fn pseudo_labels_ignore_row_shifts((d, _) in logit_batch(), shift in -40.0f64..40.0) {
        let before = region_pseudo_labels(softmax_rows(d.view()).view());
        let after = region_pseudo_labels(softmax_rows(d.mapv(|v| v + shift).view()).view());
        prop_assert_eq!(before, after);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded(c in 2usize..9, seed_a in any::<u64>(), seed_b in any::<u64>()) {
        let mut r = common::rng(seed_a ^ seed_b.rotate_left(17));
        let p = softmax(common::uniform(&mut r, 1, c, 5.0).row(0));
        let q = softmax(common::uniform(&mut r, 1, c, 5.0).row(0));
        let (pq, qp) = (jsd(p.view(), q.view()), jsd(q.view(), p.view()));
        prop_assert_eq!(pq.to_bits(), qp.to_bits());
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert_eq!(jsd(p.view(), p.view()), 0.0);
    }

    #[test]
    fn fusion_is_commutative(o in distribution(6), e1 in prop::collection::vec(-3.0f64..3.0, 6), e2 in prop::collection::vec(-3.0f64..3.0, 6)) {
        let (e1, e2) = (Array1::from(e1), Array1::from(e2));
        let a = fused_probability(o.view(), e1.view(), e2.view()).unwrap();
        let b = fused_probability(o.view(), e2.view(), e1.view()).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fused_argmax_ignores_common_shift((t, s) in logit_batch(), shift in -20.0f64..20.0) {
        let plain = build_region(t.view(), s.view(), 2, 1).unwrap().logits;
        let moved = build_region(t.mapv(|v| v + shift).view(), s.mapv(|v| v + shift).view(), 2, 1).unwrap().logits;
        for (a, b) in plain.rows().into_iter().zip(moved.rows()) {
            prop_assert_eq!(argmax(a.iter().copied()), argmax(b.iter().copied()));
        }
    }

    #[test]
    fn warm_up_region_ignores_the_student((t, s) in logit_batch(), warm_up in 1usize..6, noise in 0.1f64..10.0) {
        let epoch = 1 + (warm_up - 1) / 2;
        let a = build_region(t.view(), s.view(), epoch, warm_up).unwrap().logits;
        let b = build_region(t.view(), s.mapv(|v| v * noise - 1.0).view(), epoch, warm_up).unwrap().logits;
        prop_assert_eq!(&a, &t);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn finite_differences_agree(seed in any::<u64>()) {
        prop_assert!(common::student_loss_case(seed) < 1e-5);
        prop_assert!(common::teacher_loss_case(seed) < 1e-5);
        prop_assert!(common::prompt_case(seed) < 1e-5);
        prop_assert!(common::backward_case(seed).max_rel < 1e-5);
    }

    #[test]
    fn teacher_logits_stay_within_tau(seed in any::<u64>(), tau in 0.5f64..60.0, steps in 1usize..5) {
        let mut r = common::rng(seed);
        let enc = common::uniform(&mut r, 5, 4, 1.0);
        let protos = common::uniform(&mut r, 3, 5, 1.0);
        let mut t = TeacherModel::new(enc, protos, tau, seed).unwrap();
        let (enc0, protos0) = (t.encoder().clone(), t.prototypes().clone());
        let x = common::uniform(&mut r, 7, 4, 3.0);
        for _ in 0..steps {
            let (logits, cache) = t.forward(x.view()).unwrap();
            prop_assert!(logits.iter().all(|v| v.abs() <= tau * (1.0 + 1e-12)));
            let g = common::uniform(&mut r, 7, 3, 1.0);
            t.tune_prompts(g.view(), &cache, 0.05, 0.9).unwrap();
        }
        prop_assert_eq!(t.encoder(), &enc0);
        prop_assert_eq!(t.prototypes(), &protos0);
    }
}

fn small_spec(seed: u64, rotation: f64) -> DomainSpec {
    let mut r = common::rng(seed);
    DomainSpec {
        classes: 3,
        dim: 4,
        base_means: common::uniform(&mut r, 3, 4, 3.0),
        base_cov_scale: 1.0,
        transform: DomainTransform {
            rotation_deg: rotation,
            ..DomainTransform::identity(4)
        },
        label_noise_rate: 0.0,
        samples_per_class: 25,
        tag: "t".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn domain_distance_is_symmetric(seed in any::<u64>(), rot in 0.0f64..90.0) {
        let a: LabeledDataset<f64> = generate_domain(&small_spec(seed, 0.0), seed).unwrap();
        let b: LabeledDataset<f64> = generate_domain(&small_spec(seed, rot), seed ^ 1).unwrap();
        prop_assert_eq!(domain_distance(&a, &b).unwrap(), domain_distance(&b, &a).unwrap());
        prop_assert_eq!(domain_distance(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(a.class_counts(), vec![25, 25, 25]);
    }

    #[test]
    fn training_steps_are_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut m = init_mlp::<f64>(&[4, 8, 3], seed).unwrap();
            let mut r = common::rng(seed);
            for _ in 0..3 {
                let x = common::uniform(&mut r, 5, 4, 2.0);
                let g = common::uniform(&mut r, 5, 3, 1.0);
                let (_, cache) = m.forward(x.view()).unwrap();
                let grads = m.backward(&cache, g.view()).unwrap();
                m.sgd_momentum_step(&grads, 0.1, 0.9).unwrap();
            }
            m
        };
        prop_assert_eq!(run(), run());
    }
}

mod common;

use ndarray::{Array1, Array2};
use rand::Rng;
use septa_core::fusion::{
    accuracy, train_fusion, ChoiceFeatures, FusionConfig, FusionHead, HeadLayout, InstanceFeatures,
};

use common::{fusion_instance, random_matrix, random_vector, rng};

fn random_head(seed: u64, d: usize, heads: usize, layout: HeadLayout) -> FusionHead {
    let mut r = rng(seed);
    let mut head = FusionHead::init(d, heads, layout, 0.5, seed).unwrap();
    for t in head.tensors_mut() {
        for x in t.iter_mut() {
            *x = r.gen_range(-1.0..1.0);
        }
    }
    head
}

#[test]
fn attention_rows_are_distributions_and_keys_commute() {
    let mut r = rng(0);
    for seed in 0..50 {
        let layout = if seed % 2 == 0 { HeadLayout::Split } else { HeadLayout::FullWidth };
        let head = random_head(seed, 8, 4, layout);
        let k = r.gen_range(1..12);
        let t = random_vector(&mut r, 8);
        let g = random_matrix(&mut r, k, 8);
        let a = head.attend(t.view(), g.view()).unwrap();
        assert_eq!(a.weights.dim(), (4, k));
        for row in a.weights.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
        let perm: Vec<usize> = (0..k).rev().collect();
        let shuffled = Array2::from_shape_fn((k, 8), |(i, j)| g[[perm[i], j]]);
        let b = head.attend(t.view(), shuffled.view()).unwrap();
        for (x, y) in a.output.iter().zip(b.output.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for h in 0..4 {
            for i in 0..k {
                assert!((a.weights[[h, perm[i]]] - b.weights[[h, i]]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn blend_is_affine_in_lambda() {
    let mut r = rng(1);
    let mut head = random_head(2, 8, 2, HeadLayout::Split);
    let c = ChoiceFeatures {
        query: random_vector(&mut r, 8),
        retrieved: Some(random_matrix(&mut r, 5, 8)),
        context: random_vector(&mut r, 8),
    };
    head.lambda = 0.0;
    let at0 = head.score(&c).unwrap();
    head.lambda = 1.0;
    let at1 = head.score(&c).unwrap();
    assert_eq!(at0.p, at0.p_tilde);
    assert_eq!(at1.p, at1.p_hat);
    for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
        head.lambda = lambda;
        let s = head.score(&c).unwrap();
        assert_eq!((s.p_hat, s.p_tilde), (at0.p_hat, at0.p_tilde));
        assert!((s.p - (lambda * at1.p + (1.0 - lambda) * at0.p)).abs() < 1e-12);
    }
}

#[test]
fn shared_score_shift_changes_nothing() {
    let mut r = rng(3);
    for seed in 0..20 {
        let head = random_head(seed, 8, 2, HeadLayout::Split);
        let inst = fusion_instance(&mut r, 8, 5, 4);
        let mut shifted = head.clone();
        shifted.b_knowledge[0] += 3.0;
        shifted.b_context[0] += 3.0;
        let (a, sa) = head.predict(&inst).unwrap();
        let (b, sb) = shifted.predict(&inst).unwrap();
        assert_eq!(a, b);
        for (x, y) in sa.iter().zip(&sb) {
            assert!((y.p - x.p - 3.0).abs() < 1e-9);
        }
        let la = head.mean_loss(std::slice::from_ref(&inst)).unwrap();
        let lb = shifted.mean_loss(std::slice::from_ref(&inst)).unwrap();
        assert!((la - lb).abs() < 1e-9);
    }
}

#[test]
fn missing_subgraphs_mean_zero_attention() {
    let mut r = rng(4);
    let head = random_head(5, 8, 2, HeadLayout::Split);
    let t = random_vector(&mut r, 8);
    let v = random_vector(&mut r, 8);
    let s = head
        .score(&ChoiceFeatures {
            query: t.clone(),
            retrieved: None,
            context: v.clone(),
        })
        .unwrap();
    let direct = head.score_choice(t.view(), Array1::zeros(8).view(), v.view()).unwrap();
    assert_eq!((s.p_hat, s.p_tilde, s.p), (direct.p_hat, direct.p_tilde, direct.p));
    let by_hand = head.w_knowledge.dot(&t) + head.b_knowledge[0];
    assert!((s.p_hat - by_hand).abs() < 1e-12);
}

/// The correct choice is the only one whose context points along a hidden
/// direction; a trained head should find it.
fn separable(r: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize, dir: &Array1<f64>) -> Vec<InstanceFeatures> {
    (0..n)
        .map(|i| {
            let answer = r.gen_range(0..4);
            let choices = (0..4)
                .map(|c| {
                    let mut v = random_vector(r, d) * 0.3;
                    if c == answer {
                        v += dir;
                    }
                    ChoiceFeatures {
                        query: random_vector(r, d),
                        retrieved: Some(random_matrix(r, 3, d)),
                        context: v,
                    }
                })
                .collect();
            InstanceFeatures {
                id: format!("s{i}"),
                choices,
                answer: Some(answer),
            }
        })
        .collect()
}

#[test]
fn training_learns_a_separable_task_deterministically() {
    let mut r = rng(6);
    let dir = random_vector(&mut r, 8);
    let train = separable(&mut r, 200, 8, &dir);
    let dev = separable(&mut r, 50, 8, &dir);
    let test = separable(&mut r, 100, 8, &dir);
    let config = FusionConfig {
        heads: 2,
        lambda: 0.5,
        ..FusionConfig::default()
    };
    let a = train_fusion(8, &train, &dev, &config).unwrap();
    let b = train_fusion(8, &train, &dev, &config).unwrap();
    assert_eq!(a.head.to_bytes(), b.head.to_bytes());
    assert!(accuracy(&a.head, &test).unwrap() > 0.9);
    assert!(a.log.len() >= 2);
    assert_eq!(FusionHead::from_bytes(&a.head.to_bytes()).unwrap(), a.head);
}

#[test]
fn unlabelled_training_data_is_rejected() {
    let mut r = rng(7);
    let mut inst = fusion_instance(&mut r, 8, 3, 2);
    inst.answer = None;
    assert!(train_fusion(8, &[inst], &[], &FusionConfig { heads: 2, ..Default::default() }).is_err());
}

mod common;

use common::*;
use ndarray::{array, Array1, Array2, IxDyn};
use noisemix::autograd::{Graph, Tensor};
use noisemix::losses::{
    contrastive_loss, contrastive_loss_graph, contrastive_pair_loss, decision_loss, decision_loss_graph, mixup_features,
    mixup_label, one_hot, AnchorView, ContrastiveBatch, UncertaintyWeights,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn vectorized_contrastive_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let n = rng.random_range(2..=16);
        let p = rng.random_range(1..=32);
        let u = random_matrix(&mut rng, 2 * n, p);
        for with_positive in [false, true] {
            let mut b = ContrastiveBatch::new(u.clone(), 0.5).unwrap();
            b.include_positive_in_denominator = with_positive;
            let v = contrastive_loss(&b).unwrap();
            let oracle = contrastive_oracle(&u, 0.5, with_positive);
            assert!((v.sum - oracle).abs() < 1e-6, "{} vs {oracle}", v.sum);
            assert!((v.mean - oracle / (2 * n) as f64).abs() < 1e-6);
        }
    }
}

#[test]
fn pair_losses_add_up_to_the_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = random_matrix(&mut rng, 10, 6);
    let b = ContrastiveBatch::new(u, 0.5).unwrap();
    let mut total = 0.0;
    for i in 0..5 {
        for a in [AnchorView::First, AnchorView::Second] {
            total += contrastive_pair_loss(i, a, &b).unwrap();
        }
    }
    assert!((contrastive_loss(&b).unwrap().sum - total).abs() < 1e-10);
}

#[test]
fn contrastive_hand_values() {
    let same = Array2::ones((4, 3));
    assert!((contrastive_oracle(&same, 0.5, false) / 4.0 - 4f64.ln()).abs() < 1e-12);
    let b = ContrastiveBatch::new(same, 0.5).unwrap();
    assert!((contrastive_loss(&b).unwrap().mean - 4f64.ln()).abs() < 1e-12);

    let orth = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
    let b = ContrastiveBatch::new(orth, 0.5).unwrap();
    assert!((contrastive_loss(&b).unwrap().mean - (4f64.ln() - 2.0)).abs() < 1e-12);
}

#[test]
fn contrastive_scale_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = random_matrix(&mut rng, 8, 5);
    let a = contrastive_loss(&ContrastiveBatch::new(u.clone(), 0.5).unwrap()).unwrap().sum;
    let b = contrastive_loss(&ContrastiveBatch::new(u * 7.5, 0.5).unwrap()).unwrap().sum;
    assert!((a - b).abs() < 1e-10);
}

fn contrastive_gradient(u: &Array2<f64>, with_positive: bool) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.leaf(u.clone().into_dyn());
    let (sum, _) = contrastive_loss_graph(&mut g, v, 0.5, with_positive).unwrap();
    g.backward(sum).unwrap().get(v).unwrap().iter().copied().collect()
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let n = rng.random_range(2..=6);
        let p = rng.random_range(2..=8);
        let u = random_matrix(&mut rng, 2 * n, p);
        for with_positive in [false, true] {
            let analytic = contrastive_gradient(&u, with_positive);
            let numeric = numeric_gradient(&flat(&u), H, |x| contrastive_oracle(&reshape(x, 2 * n, p), 0.5, with_positive));
            let err = max_relative_error(&analytic, &numeric, 1e-3);
            assert!(err < TOL, "relative error {err}");
        }
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..10 {
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..6));
        let z = random_matrix(&mut rng, b, c) * 3.0;
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let t = one_hot(&labels, c).unwrap();
        let mut g = Graph::new();
        let zv = g.leaf(z.clone().into_dyn());
        let tv = g.constant(t.clone().into_dyn());
        let l = g.soft_cross_entropy(zv, tv).unwrap();
        assert!((g.scalar(l) - cross_entropy_oracle(&z, &t)).abs() < 1e-12);
        let analytic: Vec<f64> = g.backward(l).unwrap().get(zv).unwrap().iter().copied().collect();
        let numeric = numeric_gradient(&flat(&z), H, |x| cross_entropy_oracle(&reshape(x, b, c), &t));
        assert!(max_relative_error(&analytic, &numeric, 1e-3) < TOL);
    }
}

#[test]
fn mixup_chain_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..10 {
        let (m, d, c) = (rng.random_range(1..=4), rng.random_range(2..=5), rng.random_range(2..=4));
        let intra = trial % 2 == 0;
        let labels = if intra { vec![rng.random_range(0..c); m] } else { (0..m).map(|_| rng.random_range(0..c)).collect() };
        let case = MixupCase { m, d, c, labels, intra };
        let v = random_matrix(&mut rng, m, d);
        let wa = random_matrix(&mut rng, m * d, m);
        let wc = random_matrix(&mut rng, d, c);
        let (value, [gv, ga, gc]) = mixup_chain_graph(&case, &v, &wa, &wc);
        assert!((value - mixup_chain_oracle(&case, &v, &wa, &wc)).abs() < 1e-12);
        let nv = numeric_gradient(&flat(&v), H, |x| mixup_chain_oracle(&case, &reshape(x, m, d), &wa, &wc));
        let na = numeric_gradient(&flat(&wa), H, |x| mixup_chain_oracle(&case, &v, &reshape(x, m * d, m), &wc));
        let nc = numeric_gradient(&flat(&wc), H, |x| mixup_chain_oracle(&case, &v, &wa, &reshape(x, d, c)));
        for (a, n) in [(gv, nv), (ga, na), (gc, nc)] {
            assert!(max_relative_error(&a, &n, 1e-3) < TOL);
        }
    }
}

fn scalar(x: f64) -> Tensor {
    Tensor::from_elem(IxDyn(&[]), x)
}

#[test]
fn decision_loss_gradients_including_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..20 {
        let (lm, ls) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let (s1, s2) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let mut g = Graph::new();
        let vars = [lm, ls, s1, s2].map(|x| g.leaf(scalar(x)));
        let l = decision_loss_graph(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
        let (sig1, sig2) = (f64::exp(s1), f64::exp(s2));
        assert!((g.scalar(l) - decision_oracle(lm, ls, sig1, sig2)).abs() < 1e-12);
        let w = UncertaintyWeights { sigma_mixup: sig1, sigma_supervised: sig2 };
        assert!((decision_loss(lm, ls, w).unwrap() - decision_oracle(lm, ls, sig1, sig2)).abs() < 1e-12);

        let grads = g.backward(l).unwrap();
        let gs: Vec<f64> = vars.iter().map(|&v| grads.get(v).unwrap().iter().next().copied().unwrap()).collect();
        // the graph is parameterized by s = ln σ, so dL/dσ = (dL/ds) / σ
        let analytic = [gs[0], gs[1], gs[2] / sig1, gs[3] / sig2];
        let numeric = numeric_gradient(&[lm, ls, sig1, sig2], H, |x| decision_oracle(x[0], x[1], x[2], x[3]));
        assert!(max_relative_error(&analytic, &numeric, 1e-3) < TOL);
    }
}

#[test]
fn mixup_degenerate_cases() {
    let f = array![[0.5, -1.0, 2.0]];
    assert_eq!(mixup_features(f.view(), array![0.3].view()).unwrap(), f.row(0).to_owned());
    let y = one_hot(&[1, 1, 1], 3).unwrap();
    assert_eq!(mixup_label(y.view(), array![0.1, 0.5, 0.9].view()).unwrap(), array![0.0, 1.0, 0.0]);
}

proptest! {
    #[test]
    fn mixture_is_in_the_convex_hull(
        m in 1usize..6,
        d in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_matrix(&mut rng, m, d);
        let w: Array1<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let mixed = mixup_features(v.view(), w.view()).unwrap();
        for k in 0..d {
            let col = v.column(k);
            let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            prop_assert!(mixed[k] >= lo - 1e-12 && mixed[k] <= hi + 1e-12);
        }
        let equal = mixup_features(v.view(), Array1::from_elem(m, 0.37).view()).unwrap();
        let mean = v.mean_axis(ndarray::Axis(0)).unwrap();
        for k in 0..d {
            prop_assert!((equal[k] - mean[k]).abs() < 1e-12);
        }
        let label = rng.random_range(0..4);
        let y = one_hot(&vec![label; m], 4).unwrap();
        prop_assert_eq!(mixup_label(y.view(), w.view()).unwrap(), y.row(0).to_owned());
    }

    #[test]
    fn contrastive_is_invariant_to_sample_order(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_matrix(&mut rng, 2 * n, 4);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
            p
        };
        let shuffled = Array2::from_shape_fn((2 * n, 4), |(r, c)| u[[2 * perm[r / 2] + r % 2, c]]);
        let a = contrastive_loss(&ContrastiveBatch::new(u, 0.5).unwrap()).unwrap().sum;
        let b = contrastive_loss(&ContrastiveBatch::new(shuffled, 0.5).unwrap()).unwrap().sum;
        prop_assert!((a - b).abs() < 1e-9);
    }
}

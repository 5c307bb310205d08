//! Loss oracles and the algebra of the three mixing modes.

use std::f64::consts::LN_2;

use diffmix::autodiff::{Graph, ParamStore, Var};
use diffmix::losses::{arcface_logits, bce_value, bce_with_logits, cosine_similarity, focal_loss, ArcMargin, FocalParams};
use diffmix::mixer::{lerp_rows, mix_inputs, mix_loss, mix_representation, pair_batches, sample_lambdas};
use diffmix::rng;
use diffmix::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn rows(g: &mut Graph<f64>, data: &[f64], cols: usize) -> Var {
    g.input(Tensor::new(vec![data.len() / cols, cols], data.to_vec()).unwrap()).unwrap()
}

fn gaussian<T: diffmix::tensor::Element>(shape: &[usize], r: &mut rng::Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(r.sample::<f64, _>(StandardNormal)))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn bce_at_zero_is_ln2() {
    let mut g = Graph::new();
    let z = rows(&mut g, &[0.0], 1);
    let l = bce_with_logits(&mut g, z, &[1.0]).unwrap();
    assert!((g.value(l).item() - LN_2).abs() < 1e-9);
}

#[test]
fn arcface_without_margin_is_cosine_similarity() {
    let mut r = rng::stream(3, "arc", 0);
    let mut g = Graph::<f64>::new();
    let f = g.input(gaussian(&[5, 7], &mut r)).unwrap();
    let c = g.input(gaussian(&[28, 7], &mut r)).unwrap();
    let y: Vec<f64> = (0..5 * 28).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let z = arcface_logits(&mut g, f, c, &ArcMargin::new(1.0, 0.0).unwrap(), &y).unwrap();
    let cos = cosine_similarity(&mut g, f, c).unwrap();
    // Independent cosine: normalise by hand.
    let (fd, cd) = (g.value(f).data().to_vec(), g.value(c).data().to_vec());
    for b in 0..5 {
        for k in 0..28 {
            let (u, v) = (&fd[b * 7..b * 7 + 7], &cd[k * 7..k * 7 + 7]);
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let want = dot / (nu * nv);
            assert!((g.value(z).data()[b * 28 + k] - want).abs() < 1e-6);
            assert!((g.value(cos).data()[b * 28 + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn arcface_aligned_logit_is_scaled_cos_margin() {
    for (s, m) in [(30.0, 0.5), (1.0, 0.3), (64.0, 1.2)] {
        let mut g = Graph::new();
        let c = rows(&mut g, &[0.6, -0.8, 0.0, 1.0], 2);
        let f = rows(&mut g, &[1.5, -2.0], 2);
        let z = arcface_logits(&mut g, f, c, &ArcMargin::new(s, m).unwrap(), &[1.0, 0.0]).unwrap();
        let want: f64 = s * m.cos();
        assert!((g.value(z).data()[0] - want).abs() < 1e-6);
    }
    let want: f64 = 30.0 * 0.5f64.cos();
    assert!((want - 26.3274).abs() < 1e-4);
    assert!((-30.0 * 0.5f64.sin() + 14.3827).abs() < 1e-4);
}

proptest! {
    #[test]
    fn bce_matches_direct_evaluation(z in -30.0f64..30.0, y in 0.0f64..=1.0) {
        let mut g = Graph::new();
        let zv = rows(&mut g, &[z], 1);
        let l = bce_with_logits(&mut g, zv, &[y]).unwrap();
        // 1 - sigmoid(z) is evaluated as sigmoid(-z) so the oracle itself
        // keeps full precision at |z| = 30.
        let direct = -(y * sigmoid(z).ln() + (1.0 - y) * sigmoid(-z).ln());
        prop_assert!((g.value(l).item() - direct).abs() < 1e-6);
        prop_assert!((bce_value(z, y) - direct).abs() < 1e-6);
    }

    #[test]
    fn focal_without_focusing_is_bce(zs in prop::collection::vec(-20.0f64..20.0, 28 * 2), bits in prop::collection::vec(any::<bool>(), 28 * 2)) {
        let y: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
        let mut g = Graph::new();
        let z = rows(&mut g, &zs, 28);
        let f = focal_loss(&mut g, z, &y, &FocalParams::unweighted(0.0)).unwrap();
        let b = bce_with_logits(&mut g, z, &y).unwrap();
        prop_assert!((g.value(f).item() - g.value(b).item()).abs() < 1e-6);
    }

    #[test]
    fn margin_never_raises_the_positive_logit(theta in 0.0f64..std::f64::consts::PI, m in 0.0f64..1.5, s in 0.5f64..64.0) {
        let mut g = Graph::new();
        let c = rows(&mut g, &[1.0, 0.0], 2);
        let f = rows(&mut g, &[theta.cos(), theta.sin()], 2);
        let with = arcface_logits(&mut g, f, c, &ArcMargin::new(s, m).unwrap(), &[1.0]).unwrap();
        let without = arcface_logits(&mut g, f, c, &ArcMargin::new(s, 0.0).unwrap(), &[1.0]).unwrap();
        prop_assert!(g.value(with).item() <= g.value(without).item() + 1e-12);
    }

    #[test]
    fn mixed_labels_are_convex_and_symmetric(
        a in prop::collection::vec(0.0f64..=1.0, 28),
        b in prop::collection::vec(0.0f64..=1.0, 28),
        lam in 0.0f64..=1.0,
    ) {
        let ta = Tensor::new(vec![1, 28], a.clone()).unwrap();
        let tb = Tensor::new(vec![1, 28], b.clone()).unwrap();
        let ab = lerp_rows(&ta, &tb, &[lam]).unwrap();
        let ba = lerp_rows(&tb, &ta, &[1.0 - lam]).unwrap();
        for k in 0..28 {
            let v = ab.data()[k];
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v >= a[k].min(b[k]) - 1e-15 && v <= a[k].max(b[k]) + 1e-15);
            prop_assert!((v - ba.data()[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn endpoints_are_bitwise_exact_in_every_mode() {
    let mut r = rng::stream(5, "endpoints", 0);
    let x1: Tensor<f32> = gaussian(&[3, 4, 2, 2], &mut r);
    let x2: Tensor<f32> = gaussian(&[3, 4, 2, 2], &mut r);
    let p1: Tensor<f32> = Tensor::from_fn(&[3, 28], |i| (i % 5 == 0) as u8 as f32);
    let p2: Tensor<f32> = Tensor::from_fn(&[3, 28], |i| (i % 7 == 0) as u8 as f32);
    let f1: Tensor<f32> = gaussian(&[3, 16], &mut r);
    let f2: Tensor<f32> = gaussian(&[3, 16], &mut r);
    let l_r = [0.31, 0.77, 1.9];
    let l_g = [0.12, 2.5, 0.01];
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();

    let (x, p) = mix_inputs(&x1, &x2, &p1, &p2, &[1.0; 3]).unwrap();
    assert_eq!((bits(&x), bits(&p)), (bits(&x1), bits(&p1)));
    let (x, p) = mix_inputs(&x1, &x2, &p1, &p2, &[0.0; 3]).unwrap();
    assert_eq!((bits(&x), bits(&p)), (bits(&x2), bits(&p2)));

    let (f, y) = mix_representation(&f1, &f2, &p1, &p2, &[1.0; 3]).unwrap();
    assert_eq!((bits(&f), bits(&y)), (bits(&f1), bits(&p1)));
    let (f, y) = mix_representation(&f1, &f2, &p1, &p2, &[0.0; 3]).unwrap();
    assert_eq!((bits(&f), bits(&y)), (bits(&f2), bits(&p2)));

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (z, l) = mix_loss(&f1, &f2, &l_r, &l_g, &[1.0; 3]).unwrap();
    assert_eq!((bits(&z), l.to_bits()), (bits(&f1), mean(&l_r).to_bits()));
    let (z, l) = mix_loss(&f1, &f2, &l_r, &l_g, &[0.0; 3]).unwrap();
    assert_eq!((bits(&z), l.to_bits()), (bits(&f2), mean(&l_g).to_bits()));

    // The graph op used during training behaves the same way.
    let mut g = Graph::<f32>::new();
    let (a, b) = (g.input(f1.clone()).unwrap(), g.input(f2.clone()).unwrap());
    let m = g.lerp_rows(a, b, &[1.0, 0.0, 1.0]).unwrap();
    let out = bits(g.value(m));
    assert_eq!(&out[..16], &bits(&f1)[..16]);
    assert_eq!(&out[16..32], &bits(&f2)[16..32]);
    assert_eq!(&out[32..], &bits(&f1)[32..]);
}

/// Per-pair losses of a linear classifier `z = W x + b` under BCE.
fn pair_losses(g: &mut Graph<f64>, s: &ParamStore<f64>, x: &Tensor<f64>, y: &[f64]) -> Var {
    let ids: Vec<_> = s.ids().collect();
    let (w, b) = (g.param(s, ids[0]).unwrap(), g.param(s, ids[1]).unwrap());
    let xv = g.constant(x.clone()).unwrap();
    let z = g.linear(xv, w, Some(b)).unwrap();
    g.bce_rows(z, y).unwrap()
}

#[test]
fn loss_mode_gradient_decomposes() {
    let mut r = rng::stream(6, "decomp", 0);
    let mut store = ParamStore::new();
    store.add("w", gaussian::<f64>(&[28, 5], &mut r));
    store.add("b", gaussian::<f64>(&[28], &mut r));
    let (xr, xg) = (gaussian::<f64>(&[4, 5], &mut r), gaussian::<f64>(&[4, 5], &mut r));
    let yr: Vec<f64> = (0..4 * 28).map(|i| (i % 9 == 0) as u8 as f64).collect();
    let yg: Vec<f64> = (0..4 * 28).map(|i| (i % 4 == 1) as u8 as f64).collect();

    let grads = |f: &dyn Fn(&mut Graph<f64>) -> Var| -> Vec<f64> {
        let mut g = Graph::new();
        let root = f(&mut g);
        g.backward(root).unwrap();
        let mut s = store.clone();
        s.zero_grad();
        s.accumulate_grads(&g);
        s.ids().flat_map(|id| s.grad(id).to_vec()).collect()
    };
    for lam in [0.0, 0.13, 0.5, 0.91, 1.0] {
        let mixed = grads(&|g| {
            let lr = pair_losses(g, &store, &xr, &yr);
            let lg = pair_losses(g, &store, &xg, &yg);
            let m = g.lerp_rows(lr, lg, &[lam; 4]).unwrap();
            g.mean(m).unwrap()
        });
        let real = grads(&|g| {
            let l = pair_losses(g, &store, &xr, &yr);
            g.mean(l).unwrap()
        });
        let synth = grads(&|g| {
            let l = pair_losses(g, &store, &xg, &yg);
            g.mean(l).unwrap()
        });
        assert_eq!(mixed.len(), real.len());
        for i in 0..mixed.len() {
            let want = lam * real[i] + (1.0 - lam) * synth[i];
            assert!((mixed[i] - want).abs() < 1e-10, "lam {lam} entry {i}: {} vs {want}", mixed[i]);
        }
    }
}

#[test]
fn loss_mode_slope_in_lambda_is_branch_difference() {
    let z = Tensor::<f64>::zeros(&[3, 2]);
    let (l_r, l_g) = ([0.4, 1.7, 0.05], [1.1, 0.2, 0.9]);
    let want = (0..3).map(|i| l_r[i] - l_g[i]).sum::<f64>() / 3.0;
    for lam in [0.2, 0.5, 0.8] {
        let h = 1e-6;
        let (_, up) = mix_loss(&z, &z, &l_r, &l_g, &[lam + h; 3]).unwrap();
        let (_, down) = mix_loss(&z, &z, &l_r, &l_g, &[lam - h; 3]).unwrap();
        assert!(((up - down) / (2.0 * h) - want).abs() < 1e-8);
    }
}

#[test]
fn lambda_one_sends_no_gradient_to_the_synthetic_branch() {
    let mut r = rng::stream(7, "stop", 0);
    let mut store = ParamStore::new();
    let a = store.add("real", gaussian::<f64>(&[3, 6], &mut r));
    let b = store.add("synth", gaussian::<f64>(&[3, 6], &mut r));
    let mut g = Graph::new();
    let (av, bv) = (g.param(&store, a).unwrap(), g.param(&store, b).unwrap());
    let m = g.lerp_rows(av, bv, &[1.0; 3]).unwrap();
    let s = g.sigmoid(m).unwrap();
    let l = g.sum(s).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(bv).unwrap().iter().all(|&v| v == 0.0));
    assert!(g.grad(av).unwrap().iter().all(|&v| v != 0.0));
}

#[test]
fn affine_network_makes_input_and_representation_mixing_agree() {
    let mut r = rng::stream(8, "equiv", 0);
    let w1: Tensor<f32> = gaussian(&[6, 12], &mut r).map(|v| v / 4.0);
    let b1: Tensor<f32> = gaussian(&[6], &mut r);
    let w2: Tensor<f32> = gaussian(&[28, 6], &mut r).map(|v| v / 3.0);
    let b2: Tensor<f32> = gaussian(&[28], &mut r);
    let x1: Tensor<f32> = gaussian(&[5, 12], &mut r);
    let x2: Tensor<f32> = gaussian(&[5, 12], &mut r);
    let p1: Tensor<f32> = Tensor::from_fn(&[5, 28], |i| (i % 6 == 0) as u8 as f32);
    let p2: Tensor<f32> = Tensor::from_fn(&[5, 28], |i| (i % 11 == 3) as u8 as f32);
    let lams = sample_lambdas(&mut rng::stream(8, "lambda", 0), 0.3, 5).unwrap();

    let mut g = Graph::<f32>::inference();
    let (w1, b1, w2, b2) = (
        g.constant(w1).unwrap(),
        g.constant(b1).unwrap(),
        g.constant(w2).unwrap(),
        g.constant(b2).unwrap(),
    );
    let (xm, pm) = mix_inputs(&x1, &x2, &p1, &p2, &lams).unwrap();
    let xm = g.constant(xm).unwrap();
    let f = g.linear(xm, w1, Some(b1)).unwrap();
    let z_input = g.linear(f, w2, Some(b2)).unwrap();

    let (x1v, x2v) = (g.constant(x1).unwrap(), g.constant(x2).unwrap());
    let f1 = g.linear(x1v, w1, Some(b1)).unwrap();
    let f2 = g.linear(x2v, w1, Some(b1)).unwrap();
    let l32: Vec<f32> = lams.iter().map(|&l| l as f32).collect();
    let fm = g.lerp_rows(f1, f2, &l32).unwrap();
    let z_rep = g.linear(fm, w2, Some(b2)).unwrap();
    let (_, ym) = mix_representation(g.value(f1), g.value(f2), &p1, &p2, &lams).unwrap();

    let worst = g
        .value(z_input)
        .data()
        .iter()
        .zip(g.value(z_rep).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 1e-6, "max logit difference {worst}");
    assert_eq!(pm, ym);
}

#[test]
fn beta_draws_have_the_expected_shape() {
    let mut r = rng::stream(9, "beta", 0);
    let n = 100_000;
    let draws = sample_lambdas(&mut r, 0.3, n).unwrap();
    assert!(draws.iter().all(|l| (0.0..=1.0).contains(l)));
    let mean = draws.iter().sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    // Beta(0.3, 0.3) is U-shaped: well over half its mass lies within 0.1 of
    // an endpoint (about 0.55), against 0.2 for a uniform.
    let tails = draws.iter().filter(|&&l| !(0.1..=0.9).contains(&l)).count() as f64 / n as f64;
    assert!(tails > 0.45, "tail mass {tails}");

    let mut u = sample_lambdas(&mut rng::stream(9, "beta", 1), 1.0, n).unwrap();
    u.sort_by(f64::total_cmp);
    let ks = u
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64 / n as f64 - v).abs().max((v - i as f64 / n as f64).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS distance {ks}");
}

#[test]
fn synthetic_partners_are_uniform() {
    let (real, synth) = (500, 10);
    let mut counts = vec![0usize; synth];
    for epoch in 0..40 {
        let pairs = pair_batches(real, synth, &mut rng::stream(11, "pairs", epoch)).unwrap();
        let mut seen: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..real).collect::<Vec<_>>());
        for (_, s) in pairs {
            counts[s] += 1;
        }
    }
    let expected = (real * 40 / synth) as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-squared with 9 degrees of freedom.
    assert!(chi2 < 27.88, "chi2 {chi2}");
}

#[test]
fn pairing_is_a_function_of_the_stream() {
    let a = pair_batches(50, 7, &mut rng::stream(1, "pairs", 3)).unwrap();
    let b = pair_batches(50, 7, &mut rng::stream(1, "pairs", 3)).unwrap();
    let c = pair_batches(50, 7, &mut rng::stream(1, "pairs", 4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

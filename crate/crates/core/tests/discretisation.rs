//! Oracle checks for grids, bases, truncated operators and Sobolev cubatures.

mod common;

use common::{monomial_integral, Poly2};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use psm_core::basis::{
    chebyshev_eval, chebyshev_t, interpolate, interpolate_fn, l2_project, lagrange_eval,
};
use psm_core::grid::{legendre_rule_1d, lex_cmp};
use psm_core::operators::{adjoint_dense, multi_indices_up_to};
use psm_core::sobolev::dual_testfunction_form;
use psm_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- grid

#[test]
fn legendre_rule_two_nodes_match_companion_roots() {
    // P_2(x) = (3x² − 1)/2; monic companion matrix of x² − 1/3.
    let companion = DMatrix::from_row_slice(2, 2, &[0.0, 1.0 / 3.0, 1.0, 0.0]);
    let mut roots: Vec<f64> = companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .collect();
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let r = legendre_rule_1d(1);
    for (a, b) in r.nodes.iter().zip(&roots) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((roots[1] - 0.5773502691896258).abs() < 1e-15);
    // Weights from exactness on {1, x²}: w0 + w1 = 2, (w0 + w1) x² = 2/3.
    assert!((r.weights[0] - 1.0).abs() < 1e-14 && (r.weights[1] - 1.0).abs() < 1e-14);
}

#[test]
fn legendre_rule_n4_integrates_x8() {
    let r = legendre_rule_1d(4);
    let s: f64 = r
        .nodes
        .iter()
        .zip(&r.weights)
        .map(|(x, w)| w * x.powi(8))
        .sum();
    assert!((s - 2.0 / 9.0).abs() < 1e-13);
}

#[test]
fn legendre_rule_invariants() {
    for n in [0usize, 1, 2, 5, 10, 30, 50, 100, 200] {
        let r = legendre_rule_1d(n);
        assert_eq!(r.nodes.len(), n + 1);
        for w in r.nodes.windows(2) {
            assert!(w[0] < w[1]);
        }
        for i in 0..=n {
            assert!((r.nodes[i] + r.nodes[n - i]).abs() < 1e-14);
            assert!(r.weights[i] > 0.0);
            assert!(r.nodes[i] > -1.0 && r.nodes[i] < 1.0);
        }
        let sum: f64 = r.weights.iter().sum();
        assert!((sum - 2.0).abs() < 1e-13, "n={n}: weight sum {sum}");
        for j in 0..=(2 * n + 1).min(60) {
            let q: f64 = r
                .nodes
                .iter()
                .zip(&r.weights)
                .map(|(x, w)| w * x.powi(j as i32))
                .sum();
            let exact = monomial_integral(j);
            let scale = exact.abs().max(1e-300);
            assert!(
                (q - exact).abs() <= 1e-12 * scale.max(1.0),
                "n={n}, j={j}: {q} vs {exact}"
            );
        }
    }
}

#[test]
fn multi_index_order_matches_brute_force_sort() {
    let set = MultiIndexSet::new(3, 1).unwrap();
    let mut brute: Vec<Vec<usize>> = Vec::new();
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                brute.push(vec![a, b, c]);
            }
        }
    }
    // Oracle: sort by the reversed tuple.
    brute.sort_by(|x, y| {
        let rx: Vec<_> = x.iter().rev().collect();
        let ry: Vec<_> = y.iter().rev().collect();
        rx.cmp(&ry)
    });
    let ours: Vec<_> = set.iter().collect();
    assert_eq!(ours, brute);
    let p110 = set.position_of(&[1, 1, 0]).unwrap();
    let p001 = set.position_of(&[0, 0, 1]).unwrap();
    assert!(p110 < p001);
}

proptest! {
    #[test]
    fn multi_index_round_trip(m in 1usize..5, n in 0usize..6) {
        let set = MultiIndexSet::new(m, n).unwrap();
        prop_assert_eq!(set.len(), (n + 1).pow(m as u32));
        let all: Vec<_> = set.iter().collect();
        for (i, a) in all.iter().enumerate() {
            prop_assert_eq!(set.position_of(a), Some(i));
            prop_assert!(a.iter().all(|&x| x <= n));
        }
        for w in all.windows(2) {
            prop_assert_eq!(lex_cmp(&w[0], &w[1]), std::cmp::Ordering::Less);
        }
    }

    #[test]
    fn grid_weights_sum_to_volume(a in -5.0f64..0.0, len in 0.1f64..7.0, b in -3.0f64..3.0, len2 in 0.1f64..4.0, n in 0usize..20) {
        let dom = BoxDomain::new(vec![(a, a + len), (b, b + len2)]).unwrap();
        let g = TensorGrid::new(n, &dom).unwrap();
        let s: f64 = g.weights().iter().sum();
        prop_assert!((s - len * len2).abs() <= 1e-12 * len * len2);
    }
}

#[test]
fn grid_construction_is_deterministic() {
    let dom = BoxDomain::cube(2, -5.3, 5.3).unwrap();
    let a = TensorGrid::new(40, &dom).unwrap();
    let b = TensorGrid::new(40, &dom).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.weights(), b.weights());
}

#[test]
fn grid_volume_examples() {
    let g = TensorGrid::new(10, &BoxDomain::reference(2)).unwrap();
    assert!((g.weights().iter().sum::<f64>() - 4.0).abs() < 1e-12);
    let g = TensorGrid::new(10, &BoxDomain::cube(2, -5.3, 5.3).unwrap()).unwrap();
    assert!((g.weights().iter().sum::<f64>() - 10.6f64.powi(2)).abs() < 1e-10);
}

#[test]
fn tensor_cubature_is_exact_for_monomials_on_a_box() {
    let dom = BoxDomain::new(vec![(-0.5, 2.0), (1.0, 3.5)]).unwrap();
    let n = 6;
    let g = TensorGrid::new(n, &dom).unwrap();
    let int1 = |k: i32, a: f64, b: f64| (b.powi(k + 1) - a.powi(k + 1)) / (k as f64 + 1.0);
    for i in 0..=(2 * n + 1) as i32 {
        for j in 0..=(2 * n + 1) as i32 {
            let vals = g.sample(|x| x[0].powi(i) * x[1].powi(j));
            let q = g.integrate(&vals);
            let exact = int1(i, -0.5, 2.0) * int1(j, 1.0, 3.5);
            assert!((q - exact).abs() <= 1e-12 * exact.abs().max(1.0), "{i},{j}");
        }
    }
}

// ---------------------------------------------------------------- basis

#[test]
fn chebyshev_recurrence_matches_trigonometric_form() {
    for i in 0..=200 {
        let x = -1.0 + 2.0 * i as f64 / 200.0;
        let (mut prev, mut cur) = (1.0, x);
        for k in 1..40 {
            let next = 2.0 * x * cur - prev;
            prev = cur;
            cur = next;
            assert!((chebyshev_t(k + 1, x) - cur).abs() < 1e-13, "k={k}, x={x}");
        }
    }
}

#[test]
fn chebyshev_eval_in_a_box() {
    let dom = BoxDomain::new(vec![(0.0, 4.0)]).unwrap();
    // x = 3 maps to t = 0.5; T_3(0.5) = 4/8 − 3/2 = −1
    assert!((chebyshev_eval(&[3], &[3.0], &dom) + 1.0).abs() < 1e-14);
}

#[test]
fn barycentric_matches_product_formula() {
    let dom = BoxDomain::reference(1);
    for n in 1..8 {
        let g = TensorGrid::new(n, &dom).unwrap();
        let p = &g.rule().nodes;
        for a in 0..=n {
            for s in 0..25 {
                let x = -1.0 + 2.0 * s as f64 / 24.0 + 1e-3;
                let mut prod = 1.0;
                for j in 0..=n {
                    if j != a {
                        prod *= (x - p[j]) / (p[a] - p[j]);
                    }
                }
                assert!((lagrange_eval(&[a], &g, &[x]) - prod).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn transform_round_trip_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (m, n) in [(1usize, 64usize), (2, 12), (3, 4)] {
        let t = BasisTransform::new(m, n).unwrap();
        if m == 1 {
            let prod = t.to_lagrange_dense() * t.to_chebyshev_dense();
            let id = DMatrix::<f64>::identity(n + 1, n + 1);
            assert!((prod - id).amax() < 1e-10);
        }
        let len = (n + 1).pow(m as u32);
        let theta: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let back = t.to_chebyshev(&t.to_lagrange(&theta));
        for (a, b) in theta.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn polynomial_reproduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dom = BoxDomain::reference(2);
    for n in [3usize, 8, 20, 30] {
        let q = Poly2::random(n, &mut rng);
        let g = TensorGrid::new(n, &dom).unwrap();
        let s = interpolate_fn(&g, |x| q.eval(x[0], x[1])).unwrap();
        let ev = s.evaluator();
        let scale = q.c.iter().map(|c| c.abs()).sum::<f64>();
        for _ in 0..100 {
            let x = rng.gen_range(-1.0..1.0);
            let y = rng.gen_range(-1.0..1.0);
            let exact = q.eval(x, y);
            assert!((ev.eval(&[x, y]) - exact).abs() <= 1e-10 * scale, "n={n}");
        }
    }
}

#[test]
fn interpolation_examples() {
    let g = TensorGrid::new(5, &BoxDomain::reference(2)).unwrap();
    let s = interpolate(&g, &vec![3.0; g.len()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        assert!((s.eval(&x) - 3.0).abs() < 1e-12);
    }
    let g1 = TensorGrid::new(4, &BoxDomain::reference(1)).unwrap();
    let s = interpolate_fn(&g1, |x| x[0] * x[0]).unwrap();
    for _ in 0..100 {
        let x = rng.gen_range(-1.0..1.0);
        assert!((s.eval(&[x]) - x * x).abs() < 1e-11);
    }
}

#[test]
fn projections_are_idempotent_and_consistent() {
    let g = TensorGrid::new(7, &BoxDomain::new(vec![(-1.0, 2.0), (0.0, 1.0)]).unwrap()).unwrap();
    let f = |x: &[f64]| (3.0 * x[0]).sin() * (x[1] * x[1]).exp();
    let i1 = interpolate_fn(&g, f).unwrap();
    let i2 = interpolate_fn(&g, |x| i1.eval(x)).unwrap();
    for (a, b) in i1.coeffs.iter().zip(&i2.coeffs) {
        assert!((a - b).abs() < 1e-12);
    }
    let p1 = l2_project(&g, f).unwrap();
    let p2 = l2_project(&g, |x| p1.eval(x)).unwrap();
    for (a, b) in p1.coeffs.iter().zip(&p2.coeffs) {
        assert!((a - b).abs() < 1e-10);
    }
    // π(𝓘 f) = 𝓘 f
    let pi = l2_project(&g, |x| i1.eval(x)).unwrap();
    for (a, b) in pi.coeffs.iter().zip(&i1.coeffs) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn projection_of_polynomial_equals_interpolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = Poly2::random(6, &mut rng);
    let g = TensorGrid::new(6, &BoxDomain::reference(2)).unwrap();
    let pi = l2_project(&g, |x| q.eval(x[0], x[1])).unwrap();
    let ii = interpolate_fn(&g, |x| q.eval(x[0], x[1])).unwrap();
    for (a, b) in pi.coeffs.iter().zip(&ii.coeffs) {
        assert!((a - b).abs() < 1e-10);
    }
}

// ---------------------------------------------------------------- operators

#[test]
fn mixed_derivative_of_xy_is_one() {
    let c = OperatorCache::new(5, &BoxDomain::reference(2)).unwrap();
    let f = c.grid().sample(|x| x[0] * x[1]);
    let d = c.diff_operator(&[1, 1]).apply_slice(&f);
    assert!(d.iter().all(|v| (v - 1.0).abs() < 1e-10));
}

#[test]
fn second_derivative_of_smooth_function() {
    let c = OperatorCache::new(20, &BoxDomain::reference(2)).unwrap();
    let f = c.grid().sample(|x| x[0].sin() * x[1].cos());
    let d = c.diff_operator(&[2, 0]).apply_slice(&f);
    let exact = c.grid().sample(|x| -x[0].sin() * x[1].cos());
    for (a, b) in d.iter().zip(&exact) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn truncated_differentiation_is_exact_on_polynomials() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for n in [4usize, 10, 20] {
        let q = Poly2::random(n, &mut rng);
        let c = OperatorCache::new(n, &BoxDomain::reference(2)).unwrap();
        let vals = c.grid().sample(|x| q.eval(x[0], x[1]));
        for beta in [[1usize, 0], [0, 1], [2, 0], [1, 1], [0, 2]] {
            let dq = q.derivative(&beta);
            let exact = c.grid().sample(|x| dq.eval(x[0], x[1]));
            let got = c.diff_operator(&beta).apply_slice(&vals);
            let scale = exact.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let err = got
                .iter()
                .zip(&exact)
                .fold(0.0f64, |a, (g, e)| a.max((g - e).abs()));
            assert!(err <= 1e-9 * scale, "n={n} β={beta:?}: {err:e} / {scale:e}");
        }
    }
}

#[test]
fn kronecker_application_matches_dense_assembly() {
    for n in 1..=6 {
        let c =
            OperatorCache::new(n, &BoxDomain::new(vec![(0.0, 2.0), (-1.0, 0.5)]).unwrap()).unwrap();
        let d = c.d1(0).clone();
        let e = c.d1(1).clone();
        let id = DMatrix::<f64>::identity(n + 1, n + 1);
        // First axis fastest: 𝔻_{(1,0)} = I ⊗ D, 𝔻_{(0,1)} = E ⊗ I, 𝔻_{(1,2)} = E² ⊗ D.
        let cases = [
            ([1usize, 0], id.kronecker(&d)),
            ([0, 1], e.kronecker(&id)),
            ([1, 2], (&e * &e).kronecker(&d)),
        ];
        for (beta, dense) in cases {
            let kron = c.diff_operator(&beta).to_dense();
            assert!((kron - dense).amax() < 1e-12);
        }
    }
}

#[test]
fn adjoint_pairing_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (m, n) in [(1usize, 8usize), (2, 6), (2, 8)] {
        let c = OperatorCache::new(n, &BoxDomain::reference(m)).unwrap();
        let w = c.grid().weights().to_vec();
        for beta in multi_indices_up_to(m, 2) {
            let d = c.diff_operator(&beta);
            let adj = c.adjoint(&d);
            for _ in 0..5 {
                let q1: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let q2: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let dq1 = d.apply_slice(&q1);
                let aq2 = adj.apply_slice(&q2);
                let lhs: f64 = dq1
                    .iter()
                    .zip(&q2)
                    .zip(&w)
                    .map(|((a, b), w)| a * b * w)
                    .sum();
                let rhs: f64 = q1
                    .iter()
                    .zip(&aq2)
                    .zip(&w)
                    .map(|((a, b), w)| a * b * w)
                    .sum();
                let n1 = q1.iter().map(|v| v * v).sum::<f64>().sqrt();
                let n2 = q2.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = d.to_dense().amax().max(1.0);
                assert!((lhs - rhs).abs() <= 1e-11 * n1 * n2 * scale, "β={beta:?}");
            }
            // Involution.
            let twice = c.adjoint(&adj).to_dense();
            assert!((twice - d.to_dense()).amax() <= 1e-12 * d.to_dense().amax().max(1.0));
        }
    }
}

/// Definitional dense construction of the Sobolev weights.
fn reference_weight(c: &OperatorCache, k: i32, variant: Variant) -> DMatrix<f64> {
    let size = c.len();
    let w = c.grid().weights().to_vec();
    let wd = DMatrix::from_diagonal(&DVector::from_column_slice(&w));
    if k == 0 {
        return wd;
    }
    let mut sum = DMatrix::zeros(size, size);
    for beta in multi_indices_up_to(c.dim(), k.unsigned_abs() as usize) {
        let d = c.diff_operator(&beta).to_dense();
        let ds = adjoint_dense(&d, &w);
        sum += match variant {
            Variant::Plain => &ds * &d,
            Variant::Starred => &d * &ds,
        };
    }
    let m = if k > 0 {
        &wd * sum
    } else {
        &wd * sum.try_inverse().unwrap()
    };
    (&m + m.transpose()) * 0.5
}

#[test]
fn sobolev_weights_match_definitional_construction() {
    for (m, n) in [(1usize, 6usize), (2, 4), (2, 6)] {
        let c = OperatorCache::new(n, &BoxDomain::new(vec![(-1.0, 1.5); m]).unwrap()).unwrap();
        for k in [-2, -1, 0, 1, 2] {
            for variant in [Variant::Plain, Variant::Starred] {
                let ours = c.sobolev_weight(k, variant).unwrap().to_dense(c.len());
                let reference = reference_weight(&c, k, variant);
                let scale = reference.amax();
                let err = (&ours - &reference).amax();
                assert!(
                    err <= 1e-9 * scale,
                    "m={m} n={n} k={k} {variant:?}: {err:e}"
                );
            }
        }
    }
}

#[test]
fn inner_sobolev_operator_is_positive_definite() {
    for n in [4usize, 10, 20] {
        let c = OperatorCache::new(n, &BoxDomain::reference(2)).unwrap();
        for variant in [Variant::Plain, Variant::Starred] {
            let a = c.sobolev_weight(1, variant).unwrap().to_dense(c.len());
            assert!(a.clone().cholesky().is_some(), "n={n} {variant:?}");
        }
    }
}

#[test]
fn h1_norm_of_x() {
    let c = OperatorCache::new(4, &BoxDomain::reference(1)).unwrap();
    let f = c.grid().sample(|x| x[0]);
    let m = SobolevMetric::new(&c, 1, Variant::Plain).unwrap();
    assert!((m.inner(&f, &f).unwrap() - 8.0 / 3.0).abs() < 1e-10);
}

#[test]
fn h1_inner_of_x_cubed() {
    let c = OperatorCache::new(6, &BoxDomain::reference(1)).unwrap();
    let f = c.grid().sample(|x| x[0].powi(3));
    let m = SobolevMetric::new(&c, 1, Variant::Plain).unwrap();
    assert!((m.inner(&f, &f).unwrap() - (2.0 / 7.0 + 18.0 / 5.0)).abs() < 1e-10);
}

#[test]
fn negative_and_positive_orders_cancel() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let c = OperatorCache::new(6, &BoxDomain::reference(2)).unwrap();
    let w = c.grid().weights().to_vec();
    let pos = c.sobolev_weight(1, Variant::Plain).unwrap();
    let neg = c.sobolev_weight(-1, Variant::Plain).unwrap();
    for _ in 0..5 {
        let v: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // 𝕎_{-1} W⁻¹ 𝕎_{1} v = W J* W⁻¹ W J*⁻¹ v = W v
        let a = pos.apply_slice(&v);
        let b: Vec<f64> = a.iter().zip(&w).map(|(x, w)| x / w).collect();
        let out = neg.apply_slice(&b);
        for ((o, vi), wi) in out.iter().zip(&v).zip(&w) {
            assert!((o - wi * vi).abs() < 1e-9);
        }
    }
}

#[test]
fn sobolev_cubature_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for n in [2usize, 5, 8] {
        let c = OperatorCache::new(n, &BoxDomain::reference(2)).unwrap();
        for k in 0..=2usize {
            let metric = SobolevMetric::new(&c, k as i32, Variant::Plain).unwrap();
            for _ in 0..20 {
                let q1 = Poly2::random(n, &mut rng);
                let q2 = Poly2::random(n, &mut rng);
                let exact: f64 = multi_indices_up_to(2, k)
                    .iter()
                    .map(|b| q1.derivative(b).l2_exact(&q2.derivative(b)))
                    .sum();
                let f = c.grid().sample(|x| q1.eval(x[0], x[1]));
                let g = c.grid().sample(|x| q2.eval(x[0], x[1]));
                let got = metric.inner(&f, &g).unwrap();
                let scale = exact.abs().max(1.0);
                assert!(
                    (got - exact).abs() <= 1e-9 * scale,
                    "n={n} k={k}: {got} vs {exact}"
                );
            }
        }
    }
}

#[test]
fn sobolev_forms_are_symmetric_and_bilinear() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let c = OperatorCache::new(5, &BoxDomain::reference(2)).unwrap();
    for (k, v) in [
        (0, Variant::Plain),
        (1, Variant::Plain),
        (1, Variant::Starred),
        (-1, Variant::Plain),
        (-1, Variant::Starred),
        (-2, Variant::Starred),
    ] {
        let m = SobolevMetric::new(&c, k, v).unwrap();
        for _ in 0..10 {
            let f: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = 0.7;
            let fg = m.inner(&f, &g).unwrap();
            let gf = m.inner(&g, &f).unwrap();
            let scale = m.norm(&f).unwrap() * m.norm(&g).unwrap();
            assert!(
                (fg - gf).abs() <= 1e-12 * scale.max(1e-300) * 10.0,
                "k={k} {v:?}"
            );
            let lin: Vec<f64> = f.iter().zip(&h).map(|(x, y)| a * x + y).collect();
            let lhs = m.inner(&lin, &g).unwrap();
            let rhs = a * fg + m.inner(&h, &g).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * (lhs.abs() + rhs.abs()).max(1e-300) * 10.0);
            assert!(m.inner(&f, &f).unwrap() > 0.0);
        }
    }
}

#[test]
fn norm_monotonicity_l2_below_h1() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let c = OperatorCache::new(7, &BoxDomain::reference(2)).unwrap();
    let l2 = SobolevMetric::l2(&c).unwrap();
    let h1 = SobolevMetric::new(&c, 1, Variant::Plain).unwrap();
    for _ in 0..50 {
        let f: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!(l2.norm(&f).unwrap() <= h1.norm(&f).unwrap());
    }
}

#[test]
fn dual_norm_bounded_by_eigenvalue_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let c = OperatorCache::new(5, &BoxDomain::reference(2)).unwrap();
    let dual = SobolevMetric::new(&c, -1, Variant::Starred).unwrap();
    let l2 = SobolevMetric::l2(&c).unwrap();
    let w = c.grid().weights();
    // c² = λ_max(W^{-1/2} M W^{-1/2}) bounds fᵀMf / fᵀWf.
    let m = dual.weight().to_dense(c.len());
    let isq = DMatrix::from_diagonal(&DVector::from_iterator(
        w.len(),
        w.iter().map(|x| 1.0 / x.sqrt()),
    ));
    let s = &isq * m * &isq;
    let lmax = SymmetricEigen::new((&s + s.transpose()) * 0.5)
        .eigenvalues
        .max();
    let bound = lmax.sqrt();
    for _ in 0..50 {
        let f: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!(dual.norm(&f).unwrap() <= bound * l2.norm(&f).unwrap() * (1.0 + 1e-12));
    }
    // The dual norm is weaker than L² here.
    assert!(bound <= 1.0 + 1e-12);
}

#[test]
fn dual_testfunction_form_two_paths() {
    let c = OperatorCache::new(6, &BoxDomain::reference(1)).unwrap();
    let w = c.grid().weights().to_vec();
    let f = c.grid().sample(|x| x[0] * x[0]);
    let d = c.diff_operator(&[1]).to_dense();
    let ds = adjoint_dense(&d, &w);
    let dsf = &ds * DVector::from_column_slice(&f);
    let explicit: f64 = dsf.iter().zip(&w).map(|(v, w)| v * v * w).sum();
    let ours = dual_testfunction_form(&c, &f, &[1]).unwrap();
    assert!((ours - explicit).abs() < 1e-11);
}

#[test]
fn dual_testfunction_form_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let c = OperatorCache::new(5, &BoxDomain::new(vec![(0.0, 2.0), (-1.0, 1.0)]).unwrap()).unwrap();
    let w = c.grid().weights().to_vec();
    for beta in [[1usize, 0], [0, 1], [1, 1], [2, 0]] {
        let adj = c.adjoint(&c.diff_operator(&beta));
        for _ in 0..50 {
            let f: Vec<f64> = (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = adj.apply_slice(&f);
            let explicit: f64 = a.iter().zip(&w).map(|(v, w)| v * v * w).sum();
            let ours = dual_testfunction_form(&c, &f, &beta).unwrap();
            assert!((ours - explicit).abs() <= 1e-10 * explicit.max(1.0));
        }
    }
}

// ---------------------------------------------------------------- traces

#[test]
fn trace_of_x_on_right_face() {
    let c = OperatorCache::new(3, &BoxDomain::reference(2)).unwrap();
    let f = c.grid().sample(|x| x[0]);
    let face = Face {
        axis: 0,
        side: Side::Upper,
    };
    let v = c.trace_operator(6, face).apply_slice(&f);
    assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-12));
}

#[test]
fn trace_with_mixed_degrees() {
    let c = OperatorCache::new(3, &BoxDomain::reference(2)).unwrap();
    let f = c.grid().sample(|x| x[0] * x[0] * x[1]);
    let face = Face {
        axis: 1,
        side: Side::Lower,
    };
    let v = c.trace_operator(7, face).apply_slice(&f);
    let faces = c.faces(7).unwrap();
    let fg = faces.iter().find(|g| g.face().unwrap().0 == face).unwrap();
    for (i, val) in v.iter().enumerate() {
        let p = fg.embedded_point(i);
        assert_eq!(p[1], -1.0);
        assert!((val + p[0] * p[0]).abs() < 1e-11);
    }
}

#[test]
fn trace_lagrange_equals_chebyshev_trace_after_inverse_transform() {
    let dom = BoxDomain::new(vec![(-2.0, 1.0), (0.0, 3.0)]).unwrap();
    let c = OperatorCache::new(5, &dom).unwrap();
    let t = BasisTransform::new(2, 5).unwrap();
    for face in Face::all(2) {
        let s_lag = c.trace_operator(9, face).to_dense();
        let s_cheb = c.trace_operator_chebyshev(9, face).to_dense();
        let composed = s_cheb * t.to_chebyshev_dense();
        assert!((composed - s_lag).amax() < 1e-10);
    }
}

use nalgebra::DMatrix;
use proptest::prelude::*;

use tsne_limits::continuum::{continuum_attraction, rearrange_1d, ContinuumMap, PiecewiseLinearMap};
use tsne_limits::data::{pushforward_density_1d, BandwidthField, DensitySpec, PointCloud};
use tsne_limits::discrete::{gradient, kl_terms, rescaled_energy, Mode};
use tsne_limits::error::Error;
use tsne_limits::graph::{build_affinities, GraphOptions};
use tsne_limits::kernels::{KernelFamily, KernelSpec, RepulsionKernel, Scale};
use tsne_limits::microstructure::{CuttingMap, Potential};
use tsne_limits::nonlocal::{nonlocal_attraction, nonlocal_repulsion, GridMap};
use tsne_limits::solver1d::{Potential1D, Problem1D};

fn family() -> impl Strategy<Value = KernelFamily> {
    prop_oneof![
        Just(KernelFamily::Epanechnikov),
        Just(KernelFamily::Gaussian),
        Just(KernelFamily::TruncatedGaussian)
    ]
}

fn points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
}

/// Increasing piecewise linear map on `[0, 1]` from positive slopes on equal cells.
fn increasing_map(slopes: &[f64]) -> PiecewiseLinearMap {
    let k = slopes.len();
    let x: Vec<f64> = (0..=k).map(|j| j as f64 / k as f64).collect();
    let mut t = vec![0.0];
    for s in slopes {
        let last = *t.last().unwrap();
        t.push(last + s / k as f64);
    }
    PiecewiseLinearMap::new(x, t).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kernels_have_unit_mass(fam in family(), dim in 1usize..=3) {
        let k = KernelSpec::new(fam, dim).unwrap();
        prop_assert!((k.moment(0).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn phi_s_decreases_in_s_and_obeys_jensen(a in prop::collection::vec(-3.0f64..3.0, 4), s1 in 0.1f64..5.0, ds in 0.01f64..5.0) {
        let k = KernelSpec::epanechnikov(2);
        let m = DMatrix::from_row_slice(2, 2, &a);
        prop_assume!(m.norm() > 1e-3);
        let p1 = k.phi_s(Scale::Finite(s1), &m).unwrap();
        let p2 = k.phi_s(Scale::Finite(s1 + ds), &m).unwrap();
        prop_assert!(p1 >= p2 - 1e-12);
        let jensen = (s1.powi(-2) + k.directional_second_moment() * m.norm_squared()).ln();
        prop_assert!(p1 <= jensen + 1e-10);
    }

    #[test]
    fn theta_is_increasing_with_increasing_secant(fam in family(), lv in -4.0f64..6.0, dl in 0.01f64..1.0) {
        let k = KernelSpec::new(fam, 1).unwrap();
        let (v1, v2) = (10f64.powf(lv), 10f64.powf(lv + dl));
        let (t1, t2) = (k.theta(v1).unwrap(), k.theta(v2).unwrap());
        prop_assert!(t2 > t1);
        prop_assert!(t2 / v2 > t1 / v1 * (1.0 - 1e-12));
    }

    #[test]
    fn sampling_is_deterministic(n in 1usize..200, seed in any::<u64>()) {
        let d = DensitySpec::mixture(0.4, 0.005, 0.5).unwrap();
        let a = d.sample(n, seed).unwrap();
        let b = d.sample(n, seed).unwrap();
        prop_assert_eq!(&a.points, &b.points);
        prop_assert!(a.points.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn exact_pushforward_conserves_mass_and_matches_l2(slopes in prop::collection::vec(0.2f64..5.0, 1..12)) {
        let map = increasing_map(&slopes);
        let d = DensitySpec::unit_interval();
        let (pf, exact) = pushforward_density_1d(&map, &d).unwrap();
        prop_assert!(exact);
        prop_assert!((pf.mass() - 1.0).abs() < 1e-8);
        let direct: f64 = slopes.iter().map(|s| 1.0 / (s * slopes.len() as f64)).sum();
        prop_assert!((pf.l2_squared() - direct).abs() < 1e-6);
    }

    #[test]
    fn affinities_are_symmetric_local_and_scale_consistent(x in points(3..40), h in 0.05f64..0.5, sig in 0.5f64..2.0) {
        let d = DensitySpec::unit_interval();
        let cloud = PointCloud::from_points(1, x.clone()).unwrap();
        let k = KernelSpec::epanechnikov(1);
        let p = match build_affinities(&cloud, &k, &BandwidthField::constant(sig), &d, h, GraphOptions::default()) {
            Err(Error::IsolatedVertex(_)) => return Err(TestCaseError::reject("isolated vertex")),
            r => r.unwrap(),
        };
        let n = x.len();
        for i in 0..n {
            prop_assert_eq!(p.symmetric.get(i, i), 0.0);
            for j in 0..n {
                prop_assert!((p.symmetric.get(i, j) - p.symmetric.get(j, i)).abs() < 1e-15);
                if p.conditional.get(i, j) > 0.0 {
                    prop_assert!((x[i] - x[j]).abs() <= sig * h * (1.0 + 1e-12));
                }
            }
        }
        let q = build_affinities(&cloud, &k, &BandwidthField::constant(sig / 2.0), &d, 2.0 * h, GraphOptions::default()).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((p.symmetric.get(i, j) - q.symmetric.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_rewrite_translation_and_zero_force(x in points(3..25), y in prop::collection::vec(-5.0f64..5.0, 50), shift in -10.0f64..10.0) {
        let n = x.len();
        let d = DensitySpec::unit_interval();
        let cloud = PointCloud::from_points(1, x).unwrap();
        let p = build_affinities(&cloud, &KernelSpec::gaussian(1), &BandwidthField::constant(1.0), &d, 0.3, GraphOptions::default()).unwrap();
        let y = &y[..2 * n];
        let (kl, c, a, r) = kl_terms(&p, y, 2, RepulsionKernel::StudentT).unwrap();
        prop_assert!((kl - (c + a + r)).abs() < 1e-10);
        let moved: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let e1 = rescaled_energy(&p, y, 2, 0.7).unwrap();
        let e2 = rescaled_energy(&p, &moved, 2, 0.7).unwrap();
        prop_assert!((e1.kl - e2.kl).abs() < 1e-9);
        for mode in [Mode::Tsne, Mode::Sne] {
            let g = gradient(&p, y, 2, mode).unwrap();
            let g2 = gradient(&p, &moved, 2, mode).unwrap();
            let scale = g.iter().map(|v| v.abs()).fold(1e-300, f64::max);
            for a in 0..2 {
                let s: f64 = (0..n).map(|i| g[2 * i + a]).sum();
                prop_assert!(s.abs() < 1e-9 * scale.max(1.0));
            }
            prop_assert!(g.iter().zip(&g2).all(|(u, v)| (u - v).abs() < 1e-9 * scale.max(1.0)));
        }
    }

    #[test]
    fn gradient_direction_is_unit_consistent(x in points(4..15), y in prop::collection::vec(-3.0f64..3.0, 15), h in 0.1f64..2.0) {
        // without the self term, ∇_T (A_n + R_n) at bandwidth h equals h⁻¹ ∇_Y KL at Y = T/h
        let n = x.len();
        let d = DensitySpec::unit_interval();
        let cloud = PointCloud::from_points(1, x).unwrap();
        let opts = GraphOptions { include_self_in_degree: false };
        let p = build_affinities(&cloud, &KernelSpec::gaussian(1), &BandwidthField::constant(1.0), &d, 0.3, opts).unwrap();
        let t = &y[..n];
        let scaled: Vec<f64> = t.iter().map(|v| v / h).collect();
        let g = gradient(&p, &scaled, 1, Mode::Tsne).unwrap();
        let e = |t: &[f64]| rescaled_energy(&p, t, 1, h).unwrap();
        let eps = 1e-6;
        for i in 0..n {
            let mut a = t.to_vec();
            let mut b = t.to_vec();
            a[i] += eps;
            b[i] -= eps;
            let fd = ((e(&a).a_n + e(&a).r_n) - (e(&b).a_n + e(&b).r_n)) / (2.0 * eps);
            let scale = g.iter().map(|v| v.abs()).fold(1e-3, f64::max) / h;
            prop_assert!((fd - g[i] / h).abs() < 1e-5 * scale, "{} {}", fd, g[i] / h);
        }
    }

    #[test]
    fn rearrangement_keeps_attraction_and_lowers_repulsion(slopes in prop::collection::vec(-3.0f64..3.0, 2..10)) {
        prop_assume!(slopes.iter().all(|s| s.abs() > 0.1));
        let k = slopes.len();
        let x: Vec<f64> = (0..=k).map(|j| j as f64 / k as f64).collect();
        let mut t = vec![0.0];
        for s in &slopes {
            let last = *t.last().unwrap();
            t.push(last + s / k as f64);
        }
        let map = PiecewiseLinearMap::new(x, t).unwrap();
        let star = rearrange_1d(&map);
        let d = DensitySpec::unit_interval();
        let ker = KernelSpec::epanechnikov(1);
        let one = BandwidthField::constant(1.0);
        let a0 = continuum_attraction(&map, &ker, &one, &d, Scale::Finite(1.0)).unwrap();
        let a1 = continuum_attraction(&star, &ker, &one, &d, Scale::Finite(1.0)).unwrap();
        prop_assert!((a0 - a1).abs() < 1e-10);
        prop_assert!(star.repulsion(&d).unwrap() <= map.repulsion(&d).unwrap() + 1e-12);
    }

    #[test]
    fn log_shift_at_infinite_scale(slopes in prop::collection::vec(0.2f64..4.0, 1..8), lambda in 0.05f64..20.0) {
        let map = increasing_map(&slopes);
        let d = DensitySpec::unit_interval();
        let k = KernelSpec::epanechnikov(1);
        let one = BandwidthField::constant(1.0);
        let e0 = map.energy(&k, &one, &d, Scale::Infinite).unwrap().total;
        let e1 = map.dilate(lambda).energy(&k, &one, &d, Scale::Infinite).unwrap().total;
        prop_assert!((e1 - e0 - lambda.ln()).abs() < 1e-8);
    }

    #[test]
    fn truncation_never_increases_f(vals in prop::collection::vec(0.1f64..5.0, 65)) {
        let p = Problem1D::new(&DensitySpec::unit_interval(), &BandwidthField::constant(1.0), Potential1D::kernel(KernelSpec::epanechnikov(1)), 65).unwrap();
        let ub = p.u_b(p.b_functional(&vals).unwrap()).unwrap();
        let lo: Vec<f64> = vals.iter().zip(&ub).map(|(a, b)| a.min(*b)).collect();
        let hi: Vec<f64> = vals.iter().zip(&ub).map(|(a, b)| a.max(*b)).collect();
        let f = p.functional_f(&vals).unwrap();
        prop_assert!(p.functional_f(&lo).unwrap() <= f + 1e-10);
        prop_assert!(p.functional_f(&hi).unwrap() <= f + 1e-10);
    }

    #[test]
    fn cutting_histograms_conserve_mass(k in 1usize..40, seed in any::<u64>()) {
        let map = CuttingMap::with_mu(2, 1, k, 0.2).unwrap();
        let hist = map.sample_histogram(2000, seed, 8).unwrap();
        prop_assert!((hist.mass() - 1.0).abs() < 1e-12);
        prop_assert!((map.l2_squared_exact() * k as f64).is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn nonlocal_energies_are_translation_and_orientation_invariant(amp in 0.0f64..0.5, freq in 0.5f64..6.0, c in -5.0f64..5.0) {
        let d = DensitySpec::unit_interval();
        let k = KernelSpec::epanechnikov(1);
        let one = BandwidthField::constant(1.0);
        let map = GridMap::from_fn(&[[0.0, 1.0]], 257, 1, |x| vec![x[0] + amp * (freq * x[0]).sin()]).unwrap();
        let h = 0.05;
        let a0 = nonlocal_attraction(&map, &k, &one, &d, h).unwrap();
        let r0 = nonlocal_repulsion(&map, &d, h).unwrap();
        for other in [map.translated(&[c]), map.reflected()] {
            prop_assert!((nonlocal_attraction(&other, &k, &one, &d, h).unwrap() - a0).abs() < 1e-9);
            prop_assert!((nonlocal_repulsion(&other, &d, h).unwrap() - r0).abs() < 1e-9);
        }
        let big = map.scaled(1.5);
        if amp < 0.15 {
            prop_assert!(nonlocal_attraction(&big, &k, &one, &d, h).unwrap() > a0);
            prop_assert!(nonlocal_repulsion(&big, &d, h).unwrap() < r0);
        }
    }

    #[test]
    fn single_strip_cutting_map_is_the_projection(d in 2usize..=3, alpha in 0.1f64..0.9) {
        let m = d - 1;
        let map = CuttingMap::new(d, m, 1, 0.5).unwrap();
        let pot = Potential::Sublinear { c: 1.0, alpha };
        let mut p = DMatrix::zeros(m, d);
        for i in 0..m {
            p[(i, i)] = 1.0;
        }
        prop_assert!((map.attraction(&pot).unwrap() - pot.eval(&p).unwrap()).abs() < 1e-12);
        prop_assert!((map.l2_squared_exact() - 1.0).abs() < 1e-12);
    }
}

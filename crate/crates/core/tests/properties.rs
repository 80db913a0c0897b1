use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtlod::fem::{
    assemble_div, assemble_weighted_mass_values, interpolation_pi_h, prolongation, PressureSpace, RtSpace,
};
use rtlod::fields::{make_noise, make_source, SourceTag};
use rtlod::lod::{solve_reference, Discretization};
use rtlod::mesh::{build_hierarchy, Domain};
use rtlod::saddle::{build_constrained_system, ConstraintBlock, SolveOptions};
use rtlod::sparse::{dot, CsrMatrix};

fn domain(i: usize) -> Domain {
    if i == 0 {
        Domain::UnitSquare
    } else {
        Domain::LShape
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn patches_grow_and_neighbours_are_symmetric(dom in 0usize..2, level in 1u32..4, k in 0usize..4, pick in 0usize..10_000) {
        let h = build_hierarchy(&domain(dom), level, level + 1).unwrap();
        let n = h.coarse().num_triangles();
        let t = pick % n;
        let small = h.patch(t, k);
        let big = h.patch(t, k + 1);
        prop_assert!(small.contains(t));
        for &s in &small.coarse_triangles {
            prop_assert!(big.contains(s));
        }
        for s in h.patch(t, 1).coarse_triangles {
            prop_assert!(h.patch(s, 1).contains(t));
        }
    }

    #[test]
    fn coarse_flux_survives_prolongation(dom in 0usize..2, level in 0u32..3, r in 1u32..3, seed in any::<u64>()) {
        let h = build_hierarchy(&domain(dom), level, level + r).unwrap();
        let p = prolongation(&h);
        let pi = interpolation_pi_h(&h);
        let n = p.matrix.ncols();
        for e in 0..n {
            let mut unit = vec![0.0; n];
            unit[e] = 1.0;
            let back = pi.apply(&p.apply(&unit));
            for (i, v) in back.iter().enumerate() {
                let want = if i == e { 1.0 } else { 0.0 };
                prop_assert!((v - want).abs() < 1e-12, "edge {e}: component {i} is {v}");
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_vec(&mut rng, n);
        let back = pi.apply(&p.apply(&v));
        for (a, b) in back.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_commutes_with_interpolation(dom in 0usize..2, level in 0u32..3, r in 1u32..3, seed in any::<u64>()) {
        let h = build_hierarchy(&domain(dom), level, level + r).unwrap();
        let fs = RtSpace::new(h.fine());
        let cs = RtSpace::new(h.coarse());
        let bf = assemble_div(&fs, &PressureSpace::new(h.fine()), true);
        let bc = assemble_div(&cs, &PressureSpace::new(h.coarse()), false);
        let pi = interpolation_pi_h(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_vec(&mut rng, fs.dim());
        let coarse = bc.apply(&pi.apply(&v));
        let fine = bf.apply(&v);
        for (t, c) in coarse.iter().enumerate() {
            let sum: f64 = h.children(t).iter().map(|&s| fine[s]).sum();
            prop_assert!((c - sum).abs() < 1e-12 * (1.0 + sum.abs()), "T={t}: {c} vs {sum}");
        }
    }

    #[test]
    fn interpolation_of_tangential_constants(level in 0u32..3, r in 1u32..3, cx in -2.0f64..2.0, cy in -2.0f64..2.0) {
        // only interior edges carry DOFs, and there the mean flux of a constant is exact
        let h = build_hierarchy(&Domain::UnitSquare, level, level + r).unwrap();
        let fs = RtSpace::new(h.fine());
        let cs = RtSpace::new(h.coarse());
        let coarse = interpolation_pi_h(&h).apply(&fs.interpolate_constant([cx, cy]));
        let want = cs.interpolate_constant([cx, cy]);
        for (a, b) in coarse.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_mass_is_exactly_symmetric(dom in 0usize..2, level in 1u32..4, seed in any::<u64>()) {
        let h = build_hierarchy(&domain(dom), 0, level).unwrap();
        let fs = RtSpace::new(h.fine());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeff: Vec<f64> = (0..h.fine().num_triangles()).map(|_| rng.random_range(0.01..100.0)).collect();
        let m = assemble_weighted_mass_values(&fs, &coeff, true).unwrap();
        prop_assert_eq!(m.matrix.asymmetry(), 0.0);
    }

    #[test]
    fn noise_bounds_and_refinement_invariance(n_log in 0u32..4, amplitude in 0.0f64..8.0, seed in any::<u64>()) {
        let n = 1usize << n_log;
        let field = make_noise(n, amplitude, seed).unwrap();
        prop_assert!(field.alpha().is_finite() && field.beta().is_finite());
        prop_assert_eq!(field.alpha(), 1.0 / field.max());
        prop_assert_eq!(field.beta(), 1.0 / field.min());
        prop_assert!(field.values().iter().all(|v| *v > 0.0));
        let h = build_hierarchy(&Domain::UnitSquare, n_log, n_log + 2).unwrap();
        let coarse = field.eval_on_mesh(h.coarse()).unwrap();
        let fine = field.eval_on_mesh(h.fine()).unwrap();
        for (t, v) in fine.iter().enumerate() {
            prop_assert_eq!(*v, coarse[h.parent(t)]);
        }
    }

    #[test]
    fn constrained_minimum_is_feasible_and_optimal(n in 4usize..24, m_frac in 0.1f64..0.8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = ((n as f64 * m_frac) as usize).max(1);
        // SPD tridiagonal block
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((i, i, 4.0 + rng.random_range(0.0..1.0)));
            if i + 1 < n {
                let o = rng.random_range(-1.0..1.0);
                trip.push((i, i + 1, o));
                trip.push((i + 1, i, o));
            }
        }
        let m = CsrMatrix::from_triplets(n, n, &trip);
        let mut ctrip = Vec::new();
        for r in 0..rows {
            ctrip.push((r, r, 1.0 + rng.random_range(0.0..1.0)));
            let c = rng.random_range(0..n);
            if c != r {
                ctrip.push((r, c, rng.random_range(-1.0..1.0)));
            }
        }
        let c = CsrMatrix::from_triplets(rows, n, &ctrip);
        let g = random_vec(&mut rng, n);
        let sys = build_constrained_system(m.clone(), vec![ConstraintBlock::new("c", c.clone())]).unwrap();

        let r = random_vec(&mut rng, rows);
        let sol = sys.solve(&g, &r, SolveOptions::default()).unwrap();
        let res: f64 = c.matvec(&sol.primal).iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let rnorm = dot(&r, &r).sqrt();
        prop_assert!(res <= 1e-10 * (1.0 + rnorm), "residual {res}");

        let zero = vec![0.0; rows];
        let sol = sys.solve(&g, &zero, SolveOptions::default()).unwrap();
        let objective = |v: &[f64]| 0.5 * dot(v, &m.matvec(v)) - dot(&g, v);
        let base = objective(&sol.primal);
        let kernel = null_space(&c.to_dense());
        for _ in 0..10 {
            if kernel.ncols() == 0 {
                break;
            }
            let coef: Vec<f64> = random_vec(&mut rng, kernel.ncols());
            let dir = &kernel * nalgebra::DVector::from_vec(coef);
            let mut w = sol.primal.clone();
            for (wi, di) in w.iter_mut().zip(dir.iter()) {
                *wi += 1e-3 * di;
            }
            prop_assert!(objective(&w) > base);
        }
    }
}

fn null_space(c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.ncols();
    let svd = c.transpose().svd(true, false);
    let u = svd.u.unwrap();
    // full basis of R^n from the thin SVD of C^T: complete with Gram-Schmidt
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > 1e-12 {
            basis.push(u.column(i).into_owned());
        }
    }
    let rank = basis.len();
    for e in 0..n {
        let mut v = nalgebra::DVector::zeros(n);
        v[e] = 1.0;
        for b in &basis {
            let p = b.dot(&v);
            v -= b * p;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    let cols: Vec<_> = basis[rank..].to_vec();
    if cols.is_empty() {
        return DMatrix::zeros(n, 0);
    }
    DMatrix::from_columns(&cols)
}

#[test]
fn named_sources_integrate_to_zero() {
    for (tag, dom) in [
        (SourceTag::CheckerQuarters, Domain::UnitSquare),
        (SourceTag::HalfplanePm1, Domain::UnitSquare),
        (SourceTag::LshapeLinear, Domain::LShape),
        (SourceTag::spe10_wells(), Domain::spe10_coarse()),
    ] {
        let f = make_source(&tag, &dom).unwrap();
        let (total, l1) = f.domain_integrals(&dom).unwrap();
        assert!(l1 > 0.0);
        assert!(total.abs() <= 1e-12 * l1, "{tag}: {total} vs {l1}");
    }
}

#[test]
fn reference_divergence_matches_source() {
    let h = build_hierarchy(&Domain::UnitSquare, 1, 4).unwrap();
    let field = make_noise(16, 3.0, 5).unwrap();
    let d = Discretization::from_field(&h, &field, SolveOptions::default()).unwrap();
    let f = make_source(&SourceTag::CheckerQuarters, &Domain::UnitSquare)
        .unwrap()
        .triangle_integrals(h.fine())
        .unwrap();
    let u = solve_reference(&d, &f).unwrap();
    let bu = d.div().apply(&u.flux);
    let scale = f.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for (a, b) in bu.iter().zip(&f) {
        assert!((a + b).abs() <= 1e-10 * scale, "{a} vs {b}");
    }
}

use nld_core::dynamics::{markov_variance_drop, reverse_evolve, step_original, step_proposed, StepStats, Weight};
use nld_core::kernels::{
    build_kernel_matrix, eval_affinity, normalize_rows, sinkhorn_normalize, AffinityKernelSpec, FeatureField,
    KernelMatrix,
};
use nld_core::nonlocal_ops::{apply_diffusion, dirichlet_energy, field_inner, markov_matrix};
use nld_core::spectrum::{eig_symmetric, symmetrize};
use nld_core::{Field, Kernel, KernelSpec, Mat};
use proptest::prelude::*;

fn field(m: usize, d: usize) -> impl Strategy<Value = Field> {
    prop::collection::vec(-2.0f64..2.0, m * d)
        .prop_map(move |v| FeatureField::new(Mat::from_vec(m, d, v).unwrap()).unwrap())
}

fn sized_field() -> impl Strategy<Value = Field> {
    (2usize..=12, 1usize..=4).prop_flat_map(|(m, d)| field(m, d))
}

/// Symmetric doubly stochastic kernel together with a state on the same positions.
fn ds_kernel_and_state() -> impl Strategy<Value = (Kernel, Field)> {
    (2usize..=16, 1usize..=4, 1usize..=3)
        .prop_flat_map(|(m, d, f)| (field(m, f), field(m, d)))
        .prop_map(|(x, z)| {
            let raw = build_kernel_matrix(&x, &KernelSpec::rbf_adaptive()).unwrap();
            (sinkhorn_normalize(&raw, 10_000, 1e-12).unwrap(), z)
        })
}

fn symmetric(n: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-5.0f64..5.0, n * n)
        .prop_map(move |v| symmetrize(&Mat::from_vec(n, n, v).unwrap()).unwrap())
}

fn det(a: &Mat) -> f64 {
    let n = a.rows();
    if n == 1 {
        return a[(0, 0)];
    }
    (0..n)
        .map(|j| {
            let minor = Mat::from_fn(n - 1, n - 1, |r, c| a[(r + 1, if c < j { c } else { c + 1 })]);
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * a[(0, j)] * det(&minor)
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affinities_are_symmetric(x in sized_field(), which in 0usize..3) {
        let spec = [KernelSpec::Gaussian, KernelSpec::DotProduct, KernelSpec::rbf(1.3)][which].clone();
        let m = x.num_positions();
        for i in 0..m {
            for j in 0..m {
                prop_assert_eq!(eval_affinity(&spec, i, j, &x).unwrap(), eval_affinity(&spec, j, i, &x).unwrap());
            }
        }
    }

    #[test]
    fn row_normalization_gives_unit_rows(x in sized_field()) {
        let k = normalize_rows(&build_kernel_matrix(&x, &KernelSpec::Gaussian).unwrap()).unwrap();
        for s in k.row_sums() {
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        prop_assert!(k.flags().row_stochastic);
    }

    #[test]
    fn embedded_kernel_matches_kernel_of_embedded_field(
        x in field(6, 3),
        theta in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let theta = Mat::from_vec(2, 3, theta).unwrap();
        for inner in [KernelSpec::Gaussian, KernelSpec::rbf(0.8)] {
            let direct = build_kernel_matrix(&x, &AffinityKernelSpec::embedded(theta.clone(), inner.clone())).unwrap();
            let y = nld_core::kernels::embed_field(&x, &theta).unwrap();
            let via = build_kernel_matrix(&y, &inner).unwrap();
            prop_assert!(direct.entries().max_abs_diff(via.entries()).unwrap() <= 1e-14);
        }
    }

    #[test]
    fn diffusion_is_mean_zero_and_negative_semidefinite((k, z) in ds_kernel_and_state()) {
        let lz = apply_diffusion(&k, &z).unwrap();
        for s in lz.values().col_sums() {
            prop_assert!(s.abs() <= 1e-10);
        }
        let q = field_inner(&z, &lz);
        let e = dirichlet_energy(&k, &z).unwrap();
        prop_assert!(q <= 1e-12);
        prop_assert!((q + e).abs() <= 1e-10 * e.max(1.0));
    }

    #[test]
    fn markov_step_is_unit_weight_proposed_step((k, z) in ds_kernel_and_state()) {
        let a = step_proposed(&z, &k, &Weight::Scalar(1.0)).unwrap();
        let b = markov_matrix(&k).unwrap().apply(&z).unwrap();
        let rs = k.row_sums().iter().fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
        prop_assert!(a.values().max_abs_diff(b.values()).unwrap() <= 1e-14, "diff {:e} rowsum dev {:e}", a.values().max_abs_diff(b.values()).unwrap(), rs);
    }

    #[test]
    fn proposed_step_is_linear_in_the_state(
        (k, z1) in ds_kernel_and_state(),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        w in 0.0f64..1.5,
    ) {
        let z2 = FeatureField::new(z1.values().map(|v| (3.0 * v).sin())).unwrap();
        let mut combo = z1.values().scale(a);
        combo.axpy(b, z2.values()).unwrap();
        let lhs = step_proposed(&FeatureField::new(combo).unwrap(), &k, &Weight::Scalar(w)).unwrap();
        let mut rhs = step_proposed(&z1, &k, &Weight::Scalar(w)).unwrap().values().scale(a);
        rhs.axpy(b, step_proposed(&z2, &k, &Weight::Scalar(w)).unwrap().values()).unwrap();
        prop_assert!(lhs.values().max_abs_diff(&rhs).unwrap() <= 1e-10);
    }

    #[test]
    fn markov_variance_drop_matches_the_energy_identity((k, z) in ds_kernel_and_state()) {
        let next = markov_matrix(&k).unwrap().apply(&z).unwrap();
        let measured = StepStats::of(&z).variance - StepStats::of(&next).variance;
        let predicted = markov_variance_drop(&k, &z).unwrap();
        prop_assert!((measured - predicted).abs() <= 1e-10, "{measured:e} vs {predicted:e}");
        prop_assert!(measured >= -1e-12);
    }

    #[test]
    fn reverse_growth_is_bounded((k, z) in ds_kernel_and_state(), w in 0.0f64..1.0) {
        let rec = reverse_evolve(&z, &k, w, 5).unwrap();
        prop_assert!(rec.max_growth() <= 1.0 + 2.0 * w + 1e-12);
    }

    #[test]
    fn eigenvalues_preserve_trace_and_determinant(a in (1usize..=5).prop_flat_map(symmetric)) {
        let eig = eig_symmetric(&a, 1e-14).unwrap();
        let scale = a.frobenius_norm().max(1.0);
        let sum: f64 = eig.eigenvalues.iter().sum();
        prop_assert!((sum - a.trace()).abs() <= 1e-9 * scale);
        let prod: f64 = eig.eigenvalues.iter().product();
        prop_assert!((prod - det(&a)).abs() <= 1e-9 * scale.powi(a.rows() as i32));
        prop_assert!(eig.reconstruct().max_abs_diff(&a).unwrap() <= 1e-9 * scale);
    }

    #[test]
    fn eigenvalues_are_orthogonally_invariant(a in symmetric(6), b in symmetric(6)) {
        let q = eig_symmetric(&b, 1e-14).unwrap().eigenvectors;
        let rotated = symmetrize(&q.matmul(&a).unwrap().matmul_t(&q).unwrap()).unwrap();
        let ea = eig_symmetric(&a, 1e-14).unwrap().eigenvalues;
        let eb = eig_symmetric(&rotated, 1e-14).unwrap().eigenvalues;
        for (x, y) in ea.iter().zip(&eb) {
            prop_assert!((x - y).abs() <= 1e-9 * a.frobenius_norm().max(1.0));
        }
    }

    #[test]
    fn quadratic_form_only_sees_the_symmetric_part(
        w in prop::collection::vec(-3.0f64..3.0, 25),
        z in prop::collection::vec(-3.0f64..3.0, 5),
    ) {
        let w = Mat::from_vec(5, 5, w).unwrap();
        let s = symmetrize(&w).unwrap();
        let q = |m: &Mat| nld_core::matrix::dot(&z, &m.matvec(&z).unwrap());
        prop_assert!((q(&w) - q(&s)).abs() <= 1e-10);
    }
}

#[test]
fn original_step_is_not_linear() {
    let z = FeatureField::<f64>::from_f64_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, -0.5]]).unwrap();
    let spec = KernelSpec::Gaussian;
    let w = Weight::Scalar(-0.5);
    let once = step_original(&z, &spec, &w).unwrap();
    let doubled = FeatureField::new(z.values().scale(2.0)).unwrap();
    let twice = step_original(&doubled, &spec, &w).unwrap();
    let gap = twice.values().max_abs_diff(&once.values().scale(2.0)).unwrap();
    assert!(gap > 1e-3, "homogeneity defect {gap}");
}

#[test]
fn sinkhorn_output_is_symmetric_doubly_stochastic() {
    let x = FeatureField::<f64>::from_f64_rows(&[&[0.0], &[0.3], &[1.7], &[-2.0]]).unwrap();
    let k = sinkhorn_normalize(&build_kernel_matrix(&x, &KernelSpec::rbf(1.0)).unwrap(), 10_000, 1e-12).unwrap();
    let f = k.flags();
    assert!(f.symmetric && f.doubly_stochastic && f.nonnegative);
    let _ = KernelMatrix::from_entries(k.entries().clone()).unwrap();
}

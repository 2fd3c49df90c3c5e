//! SMO solver checked against an independent projected-gradient QP oracle,
//! and Gram invariants checked against a Jacobi eigenvalue oracle.

mod common;

use common::{dual_objective, jacobi_eigenvalues, min_eigenvalue, qp_dual_oracle};
use mkvt::kernels::{combine_grams, gram_matrix, KernelSpec, KernelWeights};
use mkvt::mkl::solve_smo;
use mkvt::numerics::{Matrix, Rng};

fn random_instance(rng: &mut Rng, kind: &KernelSpec) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
    let n = 4 + rng.below(5); // 4..=8
    let d = 1 + rng.below(3); // 1..=3
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect())
        .collect();
    let mut ys: Vec<f64> = (0..n)
        .map(|_| if rng.next_f64() < 0.5 { -1.0 } else { 1.0 })
        .collect();
    ys[0] = 1.0;
    ys[1] = -1.0;
    let c = [0.1, 1.0, 10.0][rng.below(3)];
    let _ = kind;
    (xs, ys, c)
}

#[test]
fn smo_matches_projected_gradient_oracle_on_random_instances() {
    let kinds = [
        KernelSpec::Linear,
        KernelSpec::Rbf { gamma: 0.5 },
        KernelSpec::Polynomial { degree: 2, coef0: 1.0 },
        KernelSpec::Cosine,
    ];
    let mut rng = Rng::new(2024);
    let mut checked = 0;
    while checked < 50 {
        let kind = kinds[checked % kinds.len()];
        let (xs, ys, c) = random_instance(&mut rng, &kind);
        let gram = gram_matrix(&kind, &xs).unwrap();
        // A KKT residual of 1e-3 only pins the objective loosely; solving to
        // 1e-7 makes the 1e-6 objective comparison meaningful.
        let sol = solve_smo(&gram, &ys, c, 1e-7, 100 * ys.len()).unwrap();
        let (_, oracle_obj) = qp_dual_oracle(gram.values(), &ys, c, 200_000);

        let smo_obj = dual_objective(gram.values(), &ys, &sol.alpha);
        assert!(
            (smo_obj - sol.dual_objective).abs() < 1e-9,
            "solver-reported objective drifted from its own alphas: {} vs {}",
            sol.dual_objective,
            smo_obj
        );
        assert!(
            (sol.dual_objective - oracle_obj).abs() <= 1e-6,
            "instance {checked} ({kind}, C={c}): SMO {} vs oracle {}",
            sol.dual_objective,
            oracle_obj
        );
        assert!(sol.kkt_violation <= 1e-3);
        checked += 1;
    }
}

#[test]
fn random_gram_matrices_are_psd_by_eigenvalue_oracle() {
    let mut rng = Rng::new(31);
    let kinds = [
        KernelSpec::Linear,
        KernelSpec::Rbf { gamma: 0.5 },
        KernelSpec::Polynomial { degree: 2, coef0: 1.0 },
        KernelSpec::Cosine,
    ];
    for kind in kinds {
        for _ in 0..25 {
            let n = 5;
            let xs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect())
                .collect();
            let g = gram_matrix(&kind, &xs).unwrap();
            let min = min_eigenvalue(g.values());
            assert!(min >= -1e-8, "{kind}: min eigenvalue {min}");
        }
    }
}

#[test]
fn convex_combination_of_random_psd_pair_stays_psd() {
    let mut rng = Rng::new(77);
    for _ in 0..20 {
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .collect();
        let g1 = gram_matrix(&KernelSpec::Linear, &xs).unwrap();
        let g2 = gram_matrix(&KernelSpec::Rbf { gamma: 0.5 }, &xs).unwrap();
        let w = KernelWeights::new(vec![0.3, 0.7]).unwrap();
        let c = combine_grams(&[g1, g2], &w).unwrap();
        assert!(min_eigenvalue(c.values()) >= -1e-8);
    }
}

#[test]
fn jacobi_oracle_reproduces_known_spectra() {
    // Eigenvalues of [[2,1],[1,2]] are 1 and 3.
    let m = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
    let mut eig = jacobi_eigenvalues(&m);
    eig.sort_by(f64::total_cmp);
    assert!((eig[0] - 1.0).abs() < 1e-10);
    assert!((eig[1] - 3.0).abs() < 1e-10);

    let id = Matrix::identity(4);
    for v in jacobi_eigenvalues(&id) {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

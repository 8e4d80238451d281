use drgossip::topology::{
    contraction_check, generate_erdos_renyi, generate_geometric, generate_grid, generate_ring, metropolis_weights,
    spectral_norm, verify_mixing, Graph, MixingMatrix,
};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

/// Dense-eigensolver reference for `||W^T W - J||_2`.
fn eigen_spectral_norm(w: &DMatrix<f64>) -> f64 {
    let k = w.nrows();
    let s = w.transpose() * w - DMatrix::from_element(k, k, 1.0 / k as f64);
    SymmetricEigen::new(s).eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn bfs_reaches_all(g: &Graph) -> bool {
    let mut seen = vec![false; g.num_nodes()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &v in g.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.iter().all(|&s| s)
}

#[test]
fn golden_erdos_renyi_edge_set() {
    let g = generate_erdos_renyi(10, 0.3, 7).unwrap();
    assert!(bfs_reaches_all(&g));
    assert_eq!(g.to_edge_list(), include_str!("golden/erdos_renyi_k10_p0.3_seed7.txt"));
}

#[test]
fn golden_geometric_edge_set() {
    let g = generate_geometric(8, 0.6, 1).unwrap();
    assert!(bfs_reaches_all(&g));
    assert_eq!(g.to_edge_list(), include_str!("golden/geometric_k8_r0.6_seed1.txt"));
}

#[test]
fn path3_spectral_norm_matches_eigensolver() {
    let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
    let w = metropolis_weights(&g).unwrap();
    assert!((w.spectral_norm() - 4.0 / 9.0).abs() < 1e-10);
    assert!((eigen_spectral_norm(w.entries()) - 4.0 / 9.0).abs() < 1e-12);
}

#[test]
fn structured_graphs_contract() {
    for g in [generate_ring(7).unwrap(), generate_grid(3, 4, 12).unwrap(), generate_geometric(10, 0.5, 2).unwrap()] {
        let w = metropolis_weights(&g).unwrap();
        assert!(w.spectral_norm() < 1.0);
        assert!((w.spectral_norm() - eigen_spectral_norm(w.entries())).abs() < 1e-8);
    }
}

#[test]
fn identity_is_not_contracting() {
    let eye = MixingMatrix::from_entries(DMatrix::identity(4, 4)).unwrap();
    assert!((eye.spectral_norm() - 1.0).abs() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metropolis_invariants(k in 4usize..=32, p in 0.2f64..=0.9, seed in any::<u64>()) {
        let g = generate_erdos_renyi(k, p, seed).unwrap();
        prop_assert!(bfs_reaches_all(&g));
        for i in 0..k {
            prop_assert_eq!(g.degree(i), g.edges().iter().filter(|&&(a, b)| a == i || b == i).count());
        }
        let w = metropolis_weights(&g).unwrap();
        let e = w.entries();
        for i in 0..k {
            prop_assert!((e.row(i).sum() - 1.0).abs() <= 1e-12);
            prop_assert!((e.column(i).sum() - 1.0).abs() <= 1e-12);
            for j in 0..k {
                prop_assert_eq!(e[(i, j)], e[(j, i)]);
                if i != j && !g.has_edge(i, j) {
                    prop_assert_eq!(e[(i, j)], 0.0);
                }
            }
        }
        prop_assert!(verify_mixing(e, Some(&g)).is_ok());
        prop_assert!(w.spectral_norm() < 1.0);
        prop_assert!((w.spectral_norm() - eigen_spectral_norm(e)).abs() < 1e-6);
    }

    #[test]
    fn generators_are_deterministic(k in 2usize..=20, p in 0.3f64..=1.0, seed in any::<u64>()) {
        prop_assert_eq!(generate_erdos_renyi(k, p, seed).unwrap(), generate_erdos_renyi(k, p, seed).unwrap());
        prop_assert_eq!(generate_geometric(k, 0.8, seed).unwrap(), generate_geometric(k, 0.8, seed).unwrap());
    }

    #[test]
    fn edge_list_round_trip(k in 2usize..=16, seed in any::<u64>()) {
        let g = generate_erdos_renyi(k, 0.5, seed).unwrap();
        prop_assert_eq!(Graph::from_edge_list(&g.to_edge_list()).unwrap(), g);
    }

    #[test]
    fn contraction_inequality(
        k in 3usize..=12,
        d in 1usize..=6,
        power in 1u32..=5,
        seed in any::<u64>(),
        values in prop::collection::vec(-10.0f64..10.0, 72),
    ) {
        let g = generate_erdos_renyi(k, 0.5, seed).unwrap();
        let w = metropolis_weights(&g).unwrap();
        let a = DMatrix::from_fn(d, k, |r, c| values[(r * k + c) % values.len()] + r as f64 * 0.1);
        let (lhs, rhs) = contraction_check(&a, &w, power);
        prop_assert!(lhs <= rhs + 1e-9, "lhs {} rhs {}", lhs, rhs);
    }
}

#[test]
fn spectral_norm_of_uniform_matrix_is_zero() {
    let j = DMatrix::from_element(6, 6, 1.0 / 6.0);
    assert!(spectral_norm(&j).unwrap() < 1e-12);
    assert_eq!(MixingMatrix::uniform(6).spectral_norm(), 0.0);
}

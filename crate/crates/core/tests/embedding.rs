use std::f64::consts::PI;

use proptest::prelude::*;
use specvol::eval;
use specvol::graph::{spectral_embedding, GraphKind};

fn circle(angles: &[f64], wobble: &[f64]) -> Vec<Vec<f64>> {
    angles
        .iter()
        .zip(wobble)
        .map(|(t, w)| vec![(1.0 + w) * t.cos(), (1.0 + w) * t.sin(), 0.3 * w])
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn noisy_circle_embeds_as_a_circle(
        angles in prop::collection::vec(0.0..2.0 * PI, 400),
        wobble in prop::collection::vec(-0.05f64..0.05, 400),
    ) {
        let pts = circle(&angles, &wobble);
        let (_, basis) = spectral_embedding(&pts, GraphKind::Knn { k: 10 }, 5).unwrap();
        prop_assert!(basis.orthonormality_defect() <= 1e-8);
        prop_assert_eq!(eval::embedding_winding(&basis, &angles, 64).unwrap().abs(), 1);
        prop_assert!(eval::radius_cv(&basis) <= 0.15);
    }

    #[test]
    fn embedding_follows_a_relabelling(seed in 0u64..1000) {
        let n = 150;
        let angles: Vec<f64> = (0..n).map(|i| 2.0 * PI * ((i as f64 * 0.618_034 + seed as f64 * 0.1) % 1.0)).collect();
        let wobble: Vec<f64> = (0..n).map(|i| 0.02 * ((i * 7 + seed as usize) % 5) as f64).collect();
        let pts = circle(&angles, &wobble);
        let perm: Vec<usize> = (0..n).map(|i| (i * 37 + seed as usize) % n).collect();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let kind = GraphKind::Gaussian { sigma: 0.3 };
        let (_, a) = spectral_embedding(&pts, kind, 4).unwrap();
        let (_, b) = spectral_embedding(&shuffled, kind, 4).unwrap();
        for l in 0..4 {
            prop_assert!((a.eigvals[l] - b.eigvals[l]).abs() <= 1e-8);
        }
        // The trivial eigenvector is unique, so it must follow the labels exactly
        // up to sign.
        let sign = if a.phi(perm[0], 0) * b.phi(0, 0) < 0.0 { -1.0 } else { 1.0 };
        for (s, &i) in perm.iter().enumerate() {
            prop_assert!((a.phi(i, 0) - sign * b.phi(s, 0)).abs() <= 1e-8);
        }
    }
}

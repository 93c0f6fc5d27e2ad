mod common;

use common::*;
use conegraph::{Cone, ConeProduct};
use proptest::prelude::*;

fn cone() -> impl Strategy<Value = Cone> {
    prop_oneof![
        (1usize..8).prop_map(Cone::Zero),
        (1usize..8).prop_map(Cone::NonNeg),
        (1usize..8).prop_map(Cone::SecondOrder),
    ]
}

fn point(cone: Cone) -> impl Strategy<Value = (Cone, Vec<f64>, Vec<f64>)> {
    let d = cone.dim();
    (
        Just(cone),
        prop::collection::vec(-100.0f64..100.0, d),
        prop::collection::vec(-100.0f64..100.0, d),
    )
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn idempotent((k, v, _) in cone().prop_flat_map(point)) {
        let p = k.project(&v).unwrap();
        let pp = k.project(&p).unwrap();
        prop_assert!(norm(&sub(&pp, &p)) <= 1e-12 * norm(&v).max(1.0));
    }

    #[test]
    fn nonexpansive((k, v, w) in cone().prop_flat_map(point)) {
        let d = sub(&k.project(&v).unwrap(), &k.project(&w).unwrap());
        prop_assert!(norm(&d) <= norm(&sub(&v, &w)) * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn moreau((k, v, _) in cone().prop_flat_map(point)) {
        // v = Π_K(v) + Π_{K°}(v) with K° = −K*
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let polar: Vec<f64> = k.project_dual(&neg).unwrap().iter().map(|x| -x).collect();
        let p = k.project(&v).unwrap();
        let rebuilt: Vec<f64> = p.iter().zip(&polar).map(|(a, b)| a + b).collect();
        prop_assert!(norm(&sub(&rebuilt, &v)) <= 1e-12 * norm(&v).max(1.0));
        // the two parts are orthogonal
        prop_assert!(dot(&p, &polar).abs() <= 1e-10 * norm(&v).max(1.0).powi(2));
    }

    #[test]
    fn output_in_cone((k, v, _) in cone().prop_flat_map(point)) {
        prop_assert!(k.contains(&k.project(&v).unwrap(), 1e-9));
    }

    /// Optimality conditions of `p = argmin ‖p − v‖ over K`: `p ∈ K`,
    /// `p − v ∈ K*` and `⟨p, p − v⟩ = 0`. This characterizes the projection
    /// independently of the closed form.
    #[test]
    fn soc_projection_kkt(v in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        let k = Cone::SecondOrder(v.len());
        let p = k.project(&v).unwrap();
        let r = sub(&p, &v);
        prop_assert!(k.contains(&p, 1e-12));
        prop_assert!(k.contains(&r, 1e-12));
        prop_assert!(dot(&p, &r).abs() <= 1e-10 * norm(&v).max(1.0).powi(2));
    }

    #[test]
    fn product_is_blockwise(v in prop::collection::vec(-10.0f64..10.0, 9)) {
        let k = ConeProduct::new(vec![Cone::NonNeg(2), Cone::SecondOrder(4), Cone::Zero(3)]).unwrap();
        let p = k.project(&v).unwrap();
        prop_assert_eq!(&p[..2], &Cone::NonNeg(2).project(&v[..2]).unwrap()[..]);
        prop_assert_eq!(&p[2..6], &Cone::SecondOrder(4).project(&v[2..6]).unwrap()[..]);
        prop_assert_eq!(&p[6..], &[0.0; 3][..]);
    }
}

#[test]
fn soc_matches_brute_force_minimizer() {
    // nearest point of the 3-dimensional cone by scanning its boundary
    let mut r = rng(7);
    for _ in 0..50 {
        let v = randn(&mut r, 3);
        let p = Cone::SecondOrder(3).project(&v).unwrap();
        let mut best = norm(&v);
        for i in 0..2000 {
            let theta = i as f64 / 2000.0 * std::f64::consts::TAU;
            let dir = [1.0, theta.cos(), theta.sin()];
            // best multiple of a boundary ray
            let t = dot(&dir, &v).max(0.0) / 2.0;
            let q: Vec<f64> = dir.iter().map(|d| d * t).collect();
            best = best.min(norm(&sub(&q, &v)));
        }
        let inside = Cone::SecondOrder(3).contains(&v, 0.0);
        let dist = norm(&sub(&p, &v));
        assert!(if inside { dist == 0.0 } else { dist <= best + 1e-12 && dist >= best - 1e-4 });
    }
}

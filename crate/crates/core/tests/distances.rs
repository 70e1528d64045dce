use pocketforge::cloud::rotate_vertical;
use pocketforge::distances::{chamfer, chamfer_indexed, chamfer_with, emd_exact, emd_exact_capped, uhd, Reduction};
use pocketforge::{seed, PointCloud};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn cloud(points: &[[f64; 3]]) -> PointCloud {
    PointCloud::new(points.to_vec()).unwrap()
}

fn random_cloud(n: usize, rng: &mut impl Rng) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
}

fn shuffled(c: &PointCloud, rng: &mut impl Rng) -> PointCloud {
    let mut p = c.points().to_vec();
    p.shuffle(rng);
    PointCloud::new(p).unwrap()
}

#[test]
fn chamfer_examples() {
    let a = cloud(&[[0.0, 0.0, 0.0]]);
    let b = cloud(&[[1.0, 0.0, 0.0]]);
    assert_eq!(chamfer(&a, &b), 2.0);
    assert_eq!(chamfer(&cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), &b), 3.0);
    let c = random_cloud(100, &mut seed::stream(0, "c"));
    assert_eq!(chamfer(&c, &c), 0.0);
    assert_eq!(chamfer_indexed(&c, &c), 0.0);
    assert_eq!(chamfer_indexed(&a, &b), chamfer(&a, &b));
}

#[test]
fn mean_reduction_divides_each_direction() {
    let p = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
    let q = cloud(&[[1.0, 0.0, 0.0]]);
    // (1 + 1) / 2 from P, 1 / 1 from Q
    assert_eq!(chamfer_with(&p, &q, Reduction::Mean), 2.0);
    assert_eq!(chamfer_with(&p, &q, Reduction::Sum), 3.0);
}

#[test]
fn emd_examples() {
    let p = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    let q = cloud(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
    assert_eq!(emd_exact(&p, &q).unwrap(), 0.0);
    assert_eq!(emd_exact(&p, &p).unwrap(), 0.0);
    assert!(emd_exact(&p, &cloud(&[[0.0; 3]])).is_err());
    let mut rng = seed::stream(0, "cap");
    let big = random_cloud(513, &mut rng);
    let err = emd_exact(&big, &big).unwrap_err();
    assert!(err.to_string().contains("subsample"), "{err}");
    assert!(emd_exact_capped(&big, &big, 600).is_ok());
}

#[test]
fn emd_matches_enumeration_on_four_points() {
    let mut rng = seed::stream(0, "enum4");
    for _ in 0..20 {
        let (p, q) = (random_cloud(4, &mut rng), random_cloud(4, &mut rng));
        let mut perm = [0usize, 1, 2, 3];
        let mut best = f64::INFINITY;
        // Heap's algorithm over all 24 permutations
        let mut c = [0usize; 4];
        let cost = |perm: &[usize; 4]| {
            (0..4)
                .map(|i| {
                    let (a, b) = (p.points()[i], q.points()[perm[i]]);
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                })
                .sum::<f64>()
                / 4.0
        };
        best = best.min(cost(&perm));
        let mut i = 0;
        while i < 4 {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                best = best.min(cost(&perm));
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        assert!((emd_exact(&p, &q).unwrap() - best).abs() < 1e-12);
    }
}

#[test]
fn uhd_examples() {
    assert_eq!(uhd(&cloud(&[[0.0, 0.0, 0.0]]), &cloud(&[[3.0, 4.0, 0.0]])), 5.0);
    assert_eq!(uhd(&cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), &cloud(&[[0.0, 0.0, 0.0]])), 1.0);
    let full = random_cloud(200, &mut seed::stream(0, "u"));
    let part = full.select(&(0..200).step_by(7).collect::<Vec<_>>()).unwrap();
    assert_eq!(uhd(&part, &full), 0.0);
}

#[test]
fn emd_triangle_inequality() {
    let mut rng = seed::stream(0, "tri");
    for _ in 0..30 {
        let (a, b, c) = (random_cloud(12, &mut rng), random_cloud(12, &mut rng), random_cloud(12, &mut rng));
        let (ab, bc, ac) = (emd_exact(&a, &b).unwrap(), emd_exact(&b, &c).unwrap(), emd_exact(&a, &c).unwrap());
        assert!(ac <= ab + bc + 1e-9);
    }
}

#[test]
fn rigid_motion_leaves_distances_unchanged() {
    let mut rng = seed::stream(0, "rigid");
    let (p, q) = (random_cloud(40, &mut rng), random_cloud(40, &mut rng));
    let (rp, rq) = (rotate_vertical(&p, 1.1), rotate_vertical(&q, 1.1));
    assert!((chamfer(&p, &q) - chamfer(&rp, &rq)).abs() < 1e-9);
    assert!((emd_exact(&p, &q).unwrap() - emd_exact(&rp, &rq).unwrap()).abs() < 1e-9);
    assert!((uhd(&p, &q) - uhd(&rp, &rq)).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chamfer_symmetric_permutation_invariant_and_indexed(seed_value in any::<u64>(), n in 1usize..80, m in 1usize..80) {
        let mut rng = seed::stream(seed_value, "prop");
        let (p, q) = (random_cloud(n, &mut rng), random_cloud(m, &mut rng));
        let base = chamfer(&p, &q);
        prop_assert_eq!(base, chamfer(&q, &p));
        let (sp, sq) = (shuffled(&p, &mut rng), shuffled(&q, &mut rng));
        prop_assert!((chamfer(&sp, &sq) - base).abs() <= 1e-12 * base.max(1.0));
        let fast = chamfer_indexed(&p, &q);
        prop_assert!((fast - base).abs() <= 1e-9 * base.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn emd_permutation_invariant(seed_value in any::<u64>(), n in 1usize..10) {
        let mut rng = seed::stream(seed_value, "emd-prop");
        let (p, q) = (random_cloud(n, &mut rng), random_cloud(n, &mut rng));
        let base = emd_exact(&p, &q).unwrap();
        let other = emd_exact(&shuffled(&p, &mut rng), &shuffled(&q, &mut rng)).unwrap();
        prop_assert!((base - other).abs() < 1e-12);
        prop_assert!(base >= 0.0);
    }
}

use combimatch::geom::{chamfer_points, knn_query, random_rotation, weighted_kabsch_pairs, RigidTransform, Rotation, Vec3};
use combimatch::matcher::sinkhorn_with_dustbin;
use combimatch::metrics::{relative_poses, rmse_pose};
use combimatch::oracles::oracle_knn;
use ndarray::Array2;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Vec3<f64>> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]
}

fn transform() -> impl Strategy<Value = RigidTransform<f64>> {
    (any::<u64>(), point()).prop_map(|(s, t)| RigidTransform::new(random_rotation(s), t))
}

fn close(a: Vec3<f64>, b: Vec3<f64>, tol: f64) -> bool {
    (0..3).all(|k| (a[k] - b[k]).abs() < tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_undoes_transform(t in transform(), p in point()) {
        prop_assert!(close(t.inverse().apply(t.apply(p)), p, 1e-12));
        prop_assert!(close(t.compose(&t.inverse()).apply(p), p, 1e-12));
    }

    #[test]
    fn compose_applies_right_operand_first(a in transform(), b in transform(), p in point()) {
        prop_assert!(close(a.compose(&b).apply(p), a.apply(b.apply(p)), 1e-12));
    }

    #[test]
    fn axis_angle_round_trips(axis in point(), angle in 0.01..3.1f64) {
        prop_assume!(axis.iter().map(|x| x * x).sum::<f64>() > 1e-2);
        let r = Rotation::from_axis_angle(axis, angle);
        prop_assert!((r.angle() - angle).abs() < 1e-9);
        prop_assert!(r.orthonormality_error() < 1e-12);
    }

    #[test]
    fn kabsch_recovers_noiseless_transform(t in transform(), pts in prop::collection::vec(point(), 4..20), w in prop::collection::vec(0.1..2.0f64, 20)) {
        let tgt: Vec<_> = pts.iter().map(|p| t.apply(*p)).collect();
        let fit = weighted_kabsch_pairs(&pts, &tgt, &w[..pts.len()]).unwrap();
        prop_assume!(!fit.degenerate);
        prop_assert!(fit.transform.rotation.angle_to(&t.rotation) < 1e-6);
        prop_assert!(close(fit.transform.translation, t.translation, 1e-6));
    }

    #[test]
    fn sinkhorn_meets_marginals(vals in prop::collection::vec(-3.0..3.0f64, 30), dustbin in -2.0..2.0f64) {
        let cost = Array2::from_shape_vec((5, 6), vals).unwrap();
        let z = sinkhorn_with_dustbin(&cost, 500, dustbin).unwrap();
        prop_assert!(z.marginal_error() < 1e-6);
        // Real cells are probabilities; the dustbin corner may exceed one.
        prop_assert!((0..5).all(|i| (0..6).all(|j| z.log[[i, j]] <= 1e-12)));
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_itself(a in prop::collection::vec(point(), 1..30), b in prop::collection::vec(point(), 1..30)) {
        let ab = chamfer_points(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - chamfer_points(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(chamfer_points(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn knn_matches_sorting(pts in prop::collection::vec(point(), 2..60), k in 1usize..8) {
        let k = k.min(pts.len() - 1);
        prop_assert_eq!(knn_query(&pts, &pts, k, true).unwrap(), oracle_knn(&pts, &pts, k, true).value);
    }

    #[test]
    fn pose_errors_ignore_common_frame(pred in prop::collection::vec(transform(), 3), gt in prop::collection::vec(transform(), 3), common in transform()) {
        let moved: Vec<_> = pred.iter().map(|p| common.compose(p)).collect();
        let a = rmse_pose(&relative_poses(&pred, 0)[1..], &relative_poses(&gt, 0)[1..]);
        let b = rmse_pose(&relative_poses(&moved, 0)[1..], &relative_poses(&gt, 0)[1..]);
        prop_assert!((a.0 - b.0).abs() < 1e-8 && (a.1 - b.1).abs() < 1e-10);
    }
}

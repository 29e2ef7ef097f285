use proptest::prelude::*;
use stalkfusion::geomfeat::{
    dimension_transform, estimate_head_pose, fit_scaler, relative_distance, FrameFeatureVector, FrameRow, Point,
    SixPoints,
};

const MODEL: [[f64; 3]; 6] = [
    [0.0, 0.0, 0.0],
    [0.0, -330.0, -65.0],
    [-225.0, 170.0, -135.0],
    [225.0, 170.0, -135.0],
    [-150.0, -150.0, -125.0],
    [150.0, -150.0, -125.0],
];

/// Written out from scratch: R = Ry(yaw)·Rx(pitch)·Rz(roll), camera flip diag(1,−1,−1),
/// pinhole with focal = width and centred principal point.
fn oracle_projection(yaw: f64, pitch: f64, roll: f64, t: [f64; 3], w: f64, h: f64) -> SixPoints {
    let (sy, cy) = yaw.to_radians().sin_cos();
    let (sp, cp) = pitch.to_radians().sin_cos();
    let (sr, cr) = roll.to_radians().sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    };
    let r = mul(mul(ry, rx), rz);
    let mut pts = [Point::default(); 6];
    for (p, m) in pts.iter_mut().zip(MODEL) {
        let q: Vec<f64> = (0..3).map(|i| (0..3).map(|k| r[i][k] * m[k]).sum()).collect();
        let (x, y, z) = (q[0] + t[0], -q[1] + t[1], -q[2] + t[2]);
        *p = Point::new(w * x / z + w / 2.0, w * y / z + h / 2.0);
    }
    SixPoints(pts)
}

fn recover(yaw: f64, pitch: f64) -> (f64, f64) {
    let pts = oracle_projection(yaw, pitch, 0.0, [0.0, 0.0, 3000.0], 640.0, 480.0);
    let a = estimate_head_pose(&pts, 640.0, 480.0).unwrap();
    (a.yaw, a.pitch)
}

#[test]
fn documented_pose_cases() {
    for (yaw, pitch) in [(0.0, 0.0), (20.0, 0.0), (-15.0, 10.0)] {
        let (y, p) = recover(yaw, pitch);
        assert!((y - yaw).abs() < 0.01 && (p - pitch).abs() < 0.01, "({yaw}, {pitch}) -> ({y}, {p})");
    }
}

#[test]
fn pose_grid_roundtrip() {
    for yi in -4..=4 {
        for pi in -4..=4 {
            let (yaw, pitch) = (yi as f64 * 10.0, pi as f64 * 10.0);
            let (y, p) = recover(yaw, pitch);
            assert!((y - yaw).abs() < 0.01 && (p - pitch).abs() < 0.01, "({yaw}, {pitch}) -> ({y}, {p})");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_roundtrip_anywhere(
        yaw in -60.0f64..60.0, pitch in -30.0f64..30.0, roll in -15.0f64..15.0,
        tx in -800.0f64..800.0, ty in -500.0f64..500.0, tz in 2500.0f64..6000.0,
    ) {
        let pts = oracle_projection(yaw, pitch, roll, [tx, ty, tz], 640.0, 480.0);
        let a = estimate_head_pose(&pts, 640.0, 480.0).unwrap();
        prop_assert!((a.yaw - yaw).abs() < 0.01 && (a.pitch - pitch).abs() < 0.01);
    }

    #[test]
    fn distance_properties(ax in -1e3f64..1e3, ay in -1e3f64..1e3, bx in -1e3f64..1e3, by in -1e3f64..1e3, dx in -1e3f64..1e3, dy in -1e3f64..1e3) {
        let (a, b) = (Point::new(ax, ay), Point::new(bx, by));
        let d = relative_distance(a, b);
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, relative_distance(b, a));
        let moved = relative_distance(Point::new(ax + dx, ay + dy), Point::new(bx + dx, by + dy));
        prop_assert!((moved - d).abs() < 1e-9);
        prop_assert_eq!(d == 0.0, a == b);
    }

    #[test]
    fn scaler_standardizes(seed in 0u64..1000, rows in 2usize..60) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..rows).map(|_| (0..29).map(|j| r.gen_range(-5.0..5.0) * (j + 1) as f64).collect()).collect();
        let p = fit_scaler(&data).unwrap();
        let z = p.transform(&data).unwrap();
        for j in 0..29 {
            if p.flagged.contains(&j) { continue; }
            let mean = z.iter().map(|row| row[j]).sum::<f64>() / rows as f64;
            let var = z.iter().map(|row| (row[j] - mean).powi(2)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reshape_is_a_permutation(videos in 1usize..8, seed in 0u64..100) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rows = Vec::new();
        for v in 0..videos {
            for f in 0..5 {
                let mut vals = [0.0; 29];
                vals[0] = v as f64;
                vals[1] = f as f64;
                rows.push(FrameRow { video_id: format!("v{v}"), frame_name: format!("f{f}"), features: FrameFeatureVector(vals) });
            }
        }
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let vm = dimension_transform(shuffled).unwrap();
        let mut out: Vec<(u64, u64)> = vm.data.data().chunks(29).map(|c| (c[0] as u64, c[1] as u64)).collect();
        let mut want: Vec<(u64, u64)> = rows.iter().map(|r| (r.features.0[0] as u64, r.features.0[1] as u64)).collect();
        // Output is already in (video, frame) order.
        prop_assert_eq!(&out, &want);
        out.sort(); want.sort();
        prop_assert_eq!(out, want);
    }
}

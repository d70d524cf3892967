//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use drilltwin::calibration::{
    build_motion_pairs, filter_motion_pairs, hand_eye_calibrate, kabsch_axis_calibrate, kabsch_rotation,
    pivot_calibrate, register, FilterOptions, IcpOptions, TrajectoryPair,
};
use drilltwin::camera::{self, Intrinsics, Label, LabelImage, PinholeCamera};
use drilltwin::engine::{self, to_stream_line, CalibrationBundle, EngineOptions, FrameId, PoseSample};
use drilltwin::error_budget::{
    budget_report, monte_carlo, translation_bound, worst_case_rotation_bound, ChainErrorSpec, MonteCarloOptions,
};
use drilltwin::geometry::rotation_exp;
use drilltwin::{synth, PointCloud, RigidTransform, VoxelVolume};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn timed(f: impl FnOnce() -> Verdict) -> (Verdict, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drilltwin"))
}

fn c1_rotation_bound() -> Verdict {
    let out = bin().args(["error-budget", "--alpha-deg", "1.0", "0.3", "0.4", "1.0"]).output().expect("spawn");
    if !out.status.success() {
        return verdict(false, format!("error-budget failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).expect("json report");
    let printed = report["rotation_bound_deg"].as_f64().unwrap_or(f64::NAN);
    let direct = worst_case_rotation_bound([1.0, 0.3, 0.4, 1.0]);
    let err = (printed - 2.7).abs().max((direct - 2.7).abs());
    verdict(err <= 1e-12, format!("rotation_bound_deg = {printed}, |err| = {err:.1e}"))
}

fn c2_c3_monte_carlo() -> (Verdict, Verdict) {
    let spec = ChainErrorSpec::bench();
    let draws = 100_000;
    let bench = monte_carlo(&spec, &MonteCarloOptions::new(draws, 20_240_601));
    let random = monte_carlo(&spec, &MonteCarloOptions { random_chains: true, ..MonteCarloOptions::new(draws, 7) });
    let rot_v = bench.rotation_violations + random.rotation_violations;
    let rot_max = bench.rotation_error_deg.max.max(random.rotation_error_deg.max);
    let c2 = verdict(
        rot_v == 0 && bench.draws == draws && random.draws == draws,
        format!("2×{draws} draws at caps, {rot_v} violations, max propagated {rot_max:.4}° ≤ 2.7°"),
    );
    let bound = translation_bound(&spec.alpha_deg, &spec.eps_mm, &spec.chain);
    let trans_v = bench.translation_violations + random.translation_violations;
    let ratio = bench.translation_max_bound_ratio.max(random.translation_max_bound_ratio);
    let c3 = verdict(
        trans_v == 0 && (5.0..=15.0).contains(&bound),
        format!("{trans_v} violations, max error/bound {ratio:.3}, bench bound {bound:.3} mm in [5, 15]"),
    );
    (c2, c3)
}

fn c4_calibration() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |name: &str, err: f64, tol: f64| {
        pass &= err <= tol;
        notes.push(format!("{name} {err:.1e}"));
    };

    let tip = Vector3::new(3.0, -2.0, 185.0);
    let pivot = Vector3::new(120.0, -60.0, 1050.0);
    let poses = synth::pivot_poses(&mut rng, tip, pivot, 60, 35.0, 0.0);
    let r = pivot_calibrate(&poses).expect("pivot");
    check("pivot", (r.tip_offset - tip).norm().max((r.pivot_point - pivot).norm()), 1e-6);

    let rot = rotation_exp(&Vector3::new(0.3, -0.4, 0.2));
    let p: Vec<Vector3<f64>> = (0..50).map(|i| Vector3::new(0.0, 0.0, i as f64)).collect();
    let q: Vec<Vector3<f64>> = p.iter().map(|x| rot * x + Vector3::new(10.0, -4.0, 150.0)).collect();
    let cal = kabsch_axis_calibrate(&TrajectoryPair::new(p, q).expect("pair")).expect("axis");
    let axis_err = ((cal.rotation * Vector3::z()).cross(&(rot * Vector3::z())).norm()).asin();
    let scatter: Vec<Vector3<f64>> = (0..30).map(|_| synth::gaussian_vector(&mut rng, 20.0)).collect();
    let rotated: Vec<Vector3<f64>> = scatter.iter().map(|x| rot * x).collect();
    let kabsch = kabsch_rotation(&scatter, &rotated).expect("kabsch");
    check("axis", axis_err.max((kabsch - rot).abs().max()), 1e-6);

    let target = synth::skull_surface(1600);
    let truth = RigidTransform::from_axis_angle(Vector3::new(0.4, -1.0, 0.3), 0.12, Vector3::new(2.5, -1.5, 3.0));
    let source =
        PointCloud::new(target.points().iter().step_by(4).map(|x| truth.inverse().transform_point(x)).collect());
    let icp = register(&source, &target, None, &IcpOptions::default()).expect("icp");
    check("icp", icp.transform.max_abs_diff(&truth), 1e-6);

    let x = RigidTransform::from_axis_angle(Vector3::new(0.3, -0.2, 1.0), 0.6, Vector3::new(15.0, -25.0, 40.0));
    let rec = synth::hand_eye_sequence(&mut rng, &x, 30, 0.0, 0.0);
    let pairs = build_motion_pairs(&rec.tracker, &rec.pattern, 0.015).expect("pairs");
    let kept = filter_motion_pairs(&pairs, &FilterOptions::default()).expect("filter").kept;
    let he = hand_eye_calibrate(&kept).expect("hand-eye");
    check("hand-eye", he.x.max_abs_diff(&x), 1e-6);

    let worst = (0..100)
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + run);
            let poses = synth::pivot_poses(&mut rng, tip, pivot, 60, 35.0, 0.02);
            (pivot_calibrate(&poses).expect("noisy pivot").tip_offset - tip).norm()
        })
        .fold(0.0, f64::max);
    check("noisy pivot (worst of 100)", worst, 0.2);
    verdict(pass, notes.join(", "))
}

fn c5_carving() -> Verdict {
    let spacing = 0.5;
    let mut vol = VoxelVolume::solid([32; 3], Vector3::repeat(spacing), Vector3::zeros()).expect("grid");
    let mut truth = vec![true; 32 * 32 * 32];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatched_calls = 0;
    for _ in 0..200 {
        let c = Vector3::new(rng.gen_range(-2.0..18.0), rng.gen_range(-2.0..18.0), rng.gen_range(-2.0..18.0));
        let r = rng.gen_range(0.2..4.0);
        let removed = vol.carve_sphere(&c, r);
        let mut brute = 0;
        for k in 0..32 {
            for j in 0..32 {
                for i in 0..32 {
                    let p = Vector3::new(i as f64, j as f64, k as f64) * spacing;
                    let idx = (k * 32 + j) * 32 + i;
                    if truth[idx] && (p - c).norm_squared() <= r * r {
                        truth[idx] = false;
                        brute += 1;
                    }
                }
            }
        }
        if removed != brute {
            mismatched_calls += 1;
        }
    }
    let state_diff =
        (0..32 * 32 * 32).filter(|&idx| vol.get(idx % 32, (idx / 32) % 32, idx / 1024) != truth[idx]).count();

    // Plunge: 2 mm burr straight down 10 mm in 2.5 mm strides, from 2 mm
    // above the top face of a 40³ block at 0.5 mm.
    let block = VoxelVolume::solid([40; 3], Vector3::repeat(spacing), Vector3::zeros()).expect("grid");
    let bundle = CalibrationBundle {
        f_db_d: Some(RigidTransform::from_translation(Vector3::new(0.0, 0.0, 200.0))),
        f_pb_p: Some(RigidTransform::from_translation(Vector3::new(-20.0, 10.0, -50.0))),
        f_cb_c: None,
    };
    let pb = RigidTransform::from_translation(Vector3::new(100.0, 50.0, 900.0));
    let (x, y) = (10.0, 9.5);
    let zs = [21.5, 19.0, 16.5, 14.0, 11.5];
    let samples: Vec<PoseSample> = zs
        .iter()
        .enumerate()
        .flat_map(|(n, z)| {
            let t = n as f64 / 30.0;
            let tip =
                pb.compose(&bundle.f_pb_p.unwrap()).compose(&RigidTransform::from_translation(Vector3::new(x, y, *z)));
            let db = tip.compose(&bundle.f_db_d.unwrap().inverse());
            [
                PoseSample { timestamp: t, frame_id: FrameId::DrillBase, pose: db },
                PoseSample { timestamp: t, frame_id: FrameId::PhantomBase, pose: pb },
            ]
        })
        .collect();
    let out = engine::replay(samples, bundle, block, EngineOptions::default()).expect("replay");
    // Integer oracle in half-millimetre units.
    let (a, b, r) = ([20i64, 19, 43], [20i64, 19, 23], 4i64);
    let mut plunge_diff = 0;
    for k in 0..40i64 {
        for j in 0..40i64 {
            for i in 0..40i64 {
                let c = [i, j, k];
                let t_num: i64 = (0..3).map(|d| (c[d] - a[d]) * (b[d] - a[d])).sum();
                let len2: i64 = (0..3).map(|d| (b[d] - a[d]).pow(2)).sum();
                let dist2_scaled = if t_num <= 0 {
                    (0..3).map(|d| (c[d] - a[d]).pow(2)).sum::<i64>() * len2
                } else if t_num >= len2 {
                    (0..3).map(|d| (c[d] - b[d]).pow(2)).sum::<i64>() * len2
                } else {
                    (0..3).map(|d| (c[d] - a[d]).pow(2)).sum::<i64>() * len2 - t_num * t_num
                };
                let carved = dist2_scaled <= r * r * len2;
                if carved == out.state.volume().get(i as usize, j as usize, k as usize) {
                    plunge_diff += 1;
                }
            }
        }
    }
    let conserved = out.summary.initial_occupied - out.summary.final_occupied == out.summary.total_removed;
    verdict(
        mismatched_calls == 0 && state_diff == 0 && plunge_diff == 0 && conserved,
        format!("200 carves: {mismatched_calls} count mismatches, {state_diff} voxel mismatches; plunge: {plunge_diff} voxel mismatches"),
    )
}

fn c6_performance() -> Verdict {
    let sc = synth::drilling_scenario(1000, [256; 3], 0.5);
    let wall = Instant::now();
    let out = engine::replay(sc.samples, sc.bundle, sc.volume, EngineOptions::default()).expect("replay");
    let wall = wall.elapsed().as_secs_f64();
    let s = &out.summary;
    verdict(
        s.frames == 1000 && s.stepping_time_s <= 1000.0 / 28.0 && s.effective_fps >= 28.0,
        format!(
            "{} frames, stepping {:.3} s ({:.0} FPS), P95 step {:.3} ms, mean {:.3} ms, wall {:.2} s, removed {}",
            s.frames, s.stepping_time_s, s.effective_fps, s.latency_p95_ms, s.latency_mean_ms, wall, s.total_removed
        ),
    )
}

fn c7_rpe() -> Verdict {
    let mm = camera::rpe_to_metric(16.0, 190.0, 1600.0).expect("rpe");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut linear = true;
    for _ in 0..10_000 {
        let rpe: f64 = rng.gen_range(0.0..100.0);
        let (d, f) = (rng.gen_range(50.0..500.0), rng.gen_range(200.0..4000.0));
        let base = camera::rpe_to_metric(rpe, d, f).expect("rpe");
        for k in -4..=4 {
            let s = 2f64.powi(k);
            linear &= camera::rpe_to_metric(rpe * s, d, f).expect("rpe") == base * s;
        }
    }
    verdict(
        (mm - 1.9).abs() <= 1e-9 && linear,
        format!("16 px → {mm} mm (|err| {:.1e}), power-of-two scaling exact: {linear}", (mm - 1.9).abs()),
    )
}

fn hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn c8_rendering() -> Verdict {
    let a = LabelImage::from_codes(64, 32, (0..64 * 32).map(|p| if p % 64 < 32 { 128 } else { 0 }).collect())
        .expect("mask");
    let b = LabelImage::from_codes(64, 32, (0..64 * 32).map(|p| if p % 64 < 32 { 0 } else { 128 }).collect())
        .expect("mask");
    let self_score = camera::dice(&a, &a, Label::Phantom).expect("dice");
    let disjoint = camera::dice(&a, &b, Label::Phantom).expect("dice");

    // 20 mm cube rendered at ~120 mm, 640×480.
    let vol = VoxelVolume::solid([40; 3], Vector3::repeat(0.5), Vector3::repeat(0.25)).expect("grid");
    let pose = RigidTransform::from_axis_angle(Vector3::new(-0.5, 0.8, 0.4), 0.7, Vector3::new(-6.0, -12.0, 115.0));
    let k = Intrinsics::new(620.0, 620.0, 320.0, 240.0, 640, 480).expect("intrinsics");
    let cam = PinholeCamera::new(k, RigidTransform::identity()).expect("camera");
    let labels = camera::render(&cam, &vol, &pose, None).labels;
    let corners: Vec<(f64, f64)> = (0..8)
        .map(|c| {
            let local = Vector3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64) * 20.0;
            k.project(&pose.transform_point(&local)).expect("in front")
        })
        .collect();
    let poly = hull(corners);
    let mut codes = vec![0u8; 640 * 480];
    let mut outside_band = 0;
    for j in 0..480u32 {
        for i in 0..640u32 {
            let p = (i as f64, j as f64);
            let mut inside = true;
            let mut dmin = f64::INFINITY;
            for e in 0..poly.len() {
                let (a, b) = (poly[e], poly[(e + 1) % poly.len()]);
                let (ex, ey) = (b.0 - a.0, b.1 - a.1);
                inside &= ex * (p.1 - a.1) - ey * (p.0 - a.0) >= 0.0;
                let t = (((p.0 - a.0) * ex + (p.1 - a.1) * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
                dmin = dmin.min(((a.0 + t * ex - p.0).powi(2) + (a.1 + t * ey - p.1).powi(2)).sqrt());
            }
            if inside {
                codes[(j * 640 + i) as usize] = 128;
            }
            if (labels.get(i, j) == Label::Phantom) != inside && dmin > 1.0 {
                outside_band += 1;
            }
        }
    }
    let oracle = LabelImage::from_codes(640, 480, codes).expect("oracle");
    let cube = camera::dice(&labels, &oracle, Label::Phantom).expect("dice");
    verdict(
        self_score == 1.0 && disjoint == 0.0 && cube >= 0.98 && outside_band == 0,
        format!("self {self_score}, disjoint {disjoint}, cube silhouette {cube:.4} ({} px), {outside_band} mismatches beyond 1 px", oracle.count(Label::Phantom)),
    )
}

fn c9_determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();
    let sc = synth::drilling_scenario(400, [64; 3], 0.5);
    engine::save_pose_log(d.join("log.csv"), &sc.samples).expect("log");
    sc.bundle.save(d.join("b.json")).expect("bundle");
    sc.volume.save(d.join("vol")).expect("volume");

    let replayed = bin()
        .current_dir(d)
        .args(["replay", "--log", "log.csv", "--bundle", "b.json", "--volume", "vol", "--out-volume", "replayed"])
        .output()
        .expect("spawn replay");
    if !replayed.status.success() {
        return verdict(false, format!("replay failed: {}", String::from_utf8_lossy(&replayed.stderr)));
    }
    let mut child = bin()
        .current_dir(d)
        .args(["serve", "--port", "0", "--once", "--bundle", "b.json", "--volume", "vol", "--out-volume", "served"])
        .stdout(Stdio::piped())
        .spawn()
        .expect("spawn serve");
    let mut banner = String::new();
    BufReader::new(child.stdout.as_mut().expect("stdout")).read_line(&mut banner).expect("banner");
    let addr = banner.trim().trim_start_matches("listening on ").to_owned();
    {
        let mut conn = TcpStream::connect(&addr).expect("connect");
        for s in &sc.samples {
            conn.write_all(to_stream_line(s).as_bytes()).expect("send");
        }
    }
    let served_ok = child.wait().expect("serve exit").success();
    let a = std::fs::read(d.join("replayed.vvb")).unwrap_or_default();
    let b = std::fs::read(d.join("served.vvb")).unwrap_or_default();
    let volumes_equal = served_ok && !a.is_empty() && a == b;

    let spec = ChainErrorSpec::bench();
    let opts = MonteCarloOptions { random_chains: true, ..MonteCarloOptions::new(20_000, 99) };
    let j1 = budget_report(&spec, Some(&opts)).to_json();
    let j2 = budget_report(&spec, Some(&opts)).to_json();
    let cli = |seed: &str| {
        bin().args(["error-budget", "--draws", "20000", "--seed", seed]).output().map(|o| o.stdout).unwrap_or_default()
    };
    let cli_equal = cli("5") == cli("5") && cli("5") != cli("6");
    verdict(
        volumes_equal && j1 == j2 && cli_equal,
        format!(
            "serve vs replay .vvb ({} bytes) identical: {volumes_equal}; seeded Monte-Carlo JSON identical: {}",
            a.len(),
            j1 == j2 && cli_equal
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict, Duration, Duration)> = Vec::new();
    let (v, t) = timed(c1_rotation_bound);
    results.push((1, "error-budget reproduces 1.0+0.3+0.4+1.0 = 2.7°", v, t, Duration::from_secs(1)));
    let start = Instant::now();
    let (v2, v3) = c2_c3_monte_carlo();
    let t = start.elapsed();
    results.push((2, "Monte-Carlo rotation never exceeds the bound", v2, t, Duration::from_secs(30)));
    results.push((
        3,
        "Monte-Carlo translation within its bound; bench bound in [5, 15] mm",
        v3,
        t,
        Duration::from_secs(30),
    ));
    let (v, t) = timed(c4_calibration);
    results.push((4, "calibration recovers ground truth", v, t, Duration::from_secs(60)));
    let (v, t) = timed(c5_carving);
    results.push((5, "carving matches brute-force and capsule oracles", v, t, Duration::from_secs(60)));
    let (v, t) = timed(c6_performance);
    results.push((6, "replay 1000 frames on 256³ at ≥ 28 FPS", v, t, Duration::from_secs(120)));
    let (v, t) = timed(c7_rpe);
    results.push((7, "RPE 16 px → 1.9 mm, exact linearity", v, t, Duration::from_secs(5)));
    let (v, t) = timed(c8_rendering);
    results.push((8, "Dice properties and cube silhouette", v, t, Duration::from_secs(30)));
    let (v, t) = timed(c9_determinism);
    results.push((9, "serve/replay and seeded Monte-Carlo determinism", v, t, Duration::from_secs(120)));

    let mut failed = 0;
    for (id, name, v, took, limit) in &results {
        let pass = v.pass && took <= limit;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {id}: {name} | {} | {:.3} s (limit {} s)",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

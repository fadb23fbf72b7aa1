use relate3d::data_io::{
    generate_frames, generate_scene, parse_kitti_labels, read_frames, write_frames, ObjectClass,
    ScenePattern, SceneSpec,
};
use relate3d::geometry::normalize_angle;

#[test]
fn hundred_frames_round_trip_bitwise() {
    let template = SceneSpec::new(ScenePattern::Mixed, 12, 0);
    let frames = generate_frames(&template, 100, 42).unwrap();
    let mut bytes = Vec::new();
    write_frames(&mut bytes, &frames).unwrap();
    let back = read_frames(bytes.as_slice()).unwrap();
    assert_eq!(back.len(), 100);
    for (a, b) in frames.iter().zip(&back) {
        assert_eq!(a.frame_id, b.frame_id);
        let bits = |f: &relate3d::data_io::Frame| -> Vec<u64> {
            let mut v: Vec<u64> = f.proposals.features().data().iter().map(|x| x.to_bits()).collect();
            for bx in f.proposals.boxes() {
                v.extend([bx.x, bx.y, bx.z, bx.h, bx.w, bx.l, bx.theta].map(f64::to_bits));
            }
            v.extend(f.proposals.scores().iter().map(|s| s.to_bits()));
            for g in &f.ground_truth {
                let bx = g.box3d.unwrap();
                v.extend([bx.x, bx.y, bx.z, bx.theta, g.alpha, g.truncation].map(f64::to_bits));
                v.extend(g.bbox2d.map(f64::to_bits));
            }
            v
        };
        assert_eq!(bits(a), bits(b));
    }
    let mut again = Vec::new();
    write_frames(&mut again, &back).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn empty_frame_list_is_an_empty_file() {
    let mut bytes = Vec::new();
    write_frames(&mut bytes, &[]).unwrap();
    assert!(bytes.is_empty());
    assert!(read_frames(bytes.as_slice()).unwrap().is_empty());
}

/// Parked rows share one ground-truth heading, so the spread of proposal
/// headings inside a row estimates the heading noise.
#[test]
fn heading_spread_within_rows_matches_noise() {
    for sd in [0.05, 0.15, 0.3] {
        let mut stds = Vec::new();
        for seed in 0..100 {
            let spec = SceneSpec {
                heading_noise_sd: sd,
                num_distractors: 0,
                ..SceneSpec::new(ScenePattern::ParallelParking, 12, seed)
            };
            let frame = generate_scene(&spec).unwrap();
            let mut rows: Vec<(u64, Vec<f64>)> = Vec::new();
            for (g, p) in frame.ground_truth.iter().zip(frame.proposals.boxes()) {
                let theta = g.box3d.unwrap().theta;
                let err = normalize_angle(p.theta - theta);
                match rows.iter_mut().find(|r| r.0 == theta.to_bits()) {
                    Some(r) => r.1.push(err),
                    None => rows.push((theta.to_bits(), vec![err])),
                }
            }
            for (_, errs) in rows.iter().filter(|r| r.1.len() >= 2) {
                let n = errs.len() as f64;
                let mean = errs.iter().sum::<f64>() / n;
                let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
                stds.push(var.sqrt());
            }
        }
        assert!(stds.len() >= 100);
        let mean_std = stds.iter().sum::<f64>() / stds.len() as f64;
        assert!((mean_std / sd - 1.0).abs() < 0.2, "sd {sd}: measured {mean_std}");
    }
}

#[test]
fn kitti_file_with_mixed_classes() {
    let text = "\
Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59
Pedestrian 0.00 1 0.21 423.17 173.67 433.17 224.03 1.60 0.38 0.30 -5.80 1.64 27.79 0.01
DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10

Cyclist 0.50 2 1.00 10.0 100.0 60.0 180.0 1.70 0.60 1.80 2.00 1.60 10.00 0.30 0.87
";
    let labels = parse_kitti_labels(text).unwrap();
    let classes: Vec<_> = labels.iter().map(|l| l.class).collect();
    assert_eq!(
        classes,
        [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::DontCare, ObjectClass::Cyclist]
    );
    assert!(labels[2].box3d.is_none() && labels[2].is_ignorable());
    assert_eq!(labels[3].score, Some(0.87));
    // internal x is camera z, internal z is the box middle
    let car = labels[0].box3d.unwrap();
    assert!((car.x - 46.70).abs() < 1e-12 && (car.y - 0.65).abs() < 1e-12);
    assert!((car.z - (-1.71 + 0.825)).abs() < 1e-12);
    assert!((car.theta - normalize_angle(1.59 - std::f64::consts::FRAC_PI_2)).abs() < 1e-12);
}

use vsr_core::media::{write_clip, Frame, VideoClip};
use vsr_core::metrics::{evaluate, Metric, MetricReport};

fn constant_clip(value: f32, frames: usize) -> VideoClip {
    VideoClip::new(vec![Frame::filled(24, 32, value).unwrap(); frames], 24.0).unwrap()
}

fn value(report: &MetricReport, clip: &str, metric: &str) -> f64 {
    report.clips.iter().find(|c| c.clip == clip).unwrap().values[metric].0
}

#[test]
fn directory_evaluation_pairs_clips_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, reference) = (tmp.path().join("pred"), tmp.path().join("ref"));
    let textured = VideoClip::new(
        vec![Frame::from_fn(24, 32, |c, y, x| ((x * 5 + y * 3 + c) % 11) as f32 / 10.0).unwrap(); 3],
        24.0,
    )
    .unwrap();
    write_clip(&textured, &pred.join("same"), false).unwrap();
    write_clip(&textured, &reference.join("same"), false).unwrap();
    write_clip(&constant_clip(0.0, 3), &reference.join("offset"), false).unwrap();
    // 8-bit storage: 128/255 rather than exactly 0.5.
    write_clip(&constant_clip(0.5, 3), &pred.join("offset"), false).unwrap();

    let report = evaluate(&pred, Some(&reference), &[Metric::Psnr, Metric::Ssim, Metric::Warp]).unwrap();
    assert_eq!(report.clips.len(), 2);
    assert_eq!(value(&report, "same", "psnr"), f64::INFINITY);
    assert!((value(&report, "same", "ssim") - 1.0).abs() < 1e-9);
    let expected = -20.0 * (128.0f64 / 255.0).log10();
    assert!((value(&report, "offset", "psnr") - expected).abs() < 1e-3);
    assert!(value(&report, "offset", "warp").abs() < 1e-6);

    let json = report.to_json().unwrap();
    assert!(json.contains("\"inf\""));
    let back: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn missing_reference_clip_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_clip(&constant_clip(0.5, 2), &tmp.path().join("pred/a"), false).unwrap();
    std::fs::create_dir_all(tmp.path().join("ref")).unwrap();
    assert!(evaluate(&tmp.path().join("pred"), Some(&tmp.path().join("ref")), &[Metric::Psnr]).is_err());
    assert!(evaluate(&tmp.path().join("pred"), None, &[Metric::Psnr]).is_err());
    let warp_only = evaluate(&tmp.path().join("pred"), None, &[Metric::Warp]).unwrap();
    assert_eq!(warp_only.clips.len(), 1);
}

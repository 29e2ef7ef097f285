use stalkfusion::datapipe::{
    load_manifest, load_sample, synth_generate, write_dataset, yaw_toward, FrameSignal, Label, Passthrough, SynthConfig,
};
use stalkfusion::geomfeat::PoseSolver;

fn config(videos: usize, noise: f64, signal: FrameSignal) -> SynthConfig {
    SynthConfig {
        videos,
        landmark_noise: noise,
        signal,
        ..SynthConfig::default()
    }
}

#[test]
fn balanced_labels_and_shapes() {
    let vids = synth_generate(&config(240, 1.0, FrameSignal::Rendered)).unwrap();
    let stalking = vids.iter().filter(|v| v.sample.label == Label::Stalking).count();
    assert_eq!((stalking, vids.len() - stalking), (120, 120));
    for v in &vids {
        assert_eq!(v.sample.frames.len(), 5);
        assert_eq!(v.sample.persons.len(), 5);
        assert!(v.sample.frames.iter().all(|f| f.shape() == [32, 32, 3]));
    }
}

#[test]
fn noise_free_landmarks_recover_truth() {
    let vids = synth_generate(&config(40, 0.0, FrameSignal::Noise)).unwrap();
    let solver = PoseSolver::default();
    let (w, h) = (640.0, 480.0);
    let mut worst: f64 = 0.0;
    for v in &vids {
        for (persons, truth) in v.sample.persons.iter().zip(&v.truth) {
            for (pts, agent) in [(&persons.victim, &truth.victim), (&persons.stalker, &truth.stalker)] {
                let sol = solver.solve(pts, w, h).unwrap();
                worst = worst.max((sol.yaw - agent.yaw).abs()).max((sol.pitch - agent.pitch).abs());
            }
            if v.sample.label == Label::Stalking {
                let sol = solver.solve(&persons.stalker, w, h).unwrap();
                let want = yaw_toward(truth.stalker.position, truth.victim.position);
                assert!((sol.yaw - want).abs() < 1.0, "{} vs {want}", sol.yaw);
            }
        }
    }
    assert!(worst < 0.5, "worst angle error {worst}");
}

#[test]
fn noise_frames_carry_no_label_signal() {
    let vids = synth_generate(&config(120, 1.0, FrameSignal::Noise)).unwrap();
    let mean = |label: Label| {
        let (mut sum, mut n) = (0.0, 0usize);
        for v in vids.iter().filter(|v| v.sample.label == label) {
            for f in &v.sample.frames {
                sum += f.data().iter().sum::<f64>();
                n += f.len();
            }
        }
        sum / n as f64
    };
    assert!((mean(Label::Stalking) - mean(Label::NonStalking)).abs() < 0.01);
}

#[test]
fn written_dataset_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let vids = synth_generate(&config(6, 1.0, FrameSignal::Rendered)).unwrap();
    let path = write_dataset(dir.path(), &vids).unwrap();
    let manifest = load_manifest(&path).unwrap();
    assert_eq!(manifest.records.len(), 6);
    let text = std::fs::read_to_string(&path).unwrap();
    let again = dir.path().join("again.jsonl");
    stalkfusion::datapipe::write_manifest(&again, &manifest.records).unwrap();
    assert_eq!(std::fs::read_to_string(&again).unwrap(), text);
    for (rec, v) in manifest.records.iter().zip(&vids) {
        let s = load_sample(&manifest, rec, 32, &Passthrough).unwrap();
        assert_eq!(s.id, v.sample.id);
        assert_eq!(s.label, v.sample.label);
        assert_eq!(s.persons, v.sample.persons);
        assert_eq!(s.annotation_size, (640.0, 480.0));
        for (a, b) in s.frames.iter().zip(&v.sample.frames) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }
}

//! Dataset files and generator invariants at scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stlstm::data::{
    generate_lane_dataset, read_dataset, write_dataset, CurvatureMode, FrameSegment, LaneWorld, Sample, KAPPA_MAX,
    STEERING_GAIN,
};
use stlstm::Tensor;

#[test]
fn random_samples_roundtrip_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<Sample> = (0..1200)
        .map(|i| {
            let frames = Tensor::from_vec(&[3, 3, 4, 5], (0..180).map(|_| rng.gen::<f32>()).collect()).unwrap();
            Sample { segment: FrameSegment { frames, timestamp_index: i + 2 }, steering_deg: rng.gen_range(-20.0..20.0) }
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("random.stld");
    write_dataset(&samples, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(back.samples()) {
        assert_eq!(a.steering_deg.to_bits(), b.steering_deg.to_bits());
        assert_eq!(a.segment.timestamp_index, b.segment.timestamp_index);
        assert!(a.segment.frames.data().iter().zip(b.segment.frames.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn generated_labels_respect_the_curvature_bound() {
    let bound = (STEERING_GAIN * KAPPA_MAX) as f32;
    for mode in [
        CurvatureMode::Sine { amplitude: KAPPA_MAX, period: 40.0 },
        CurvatureMode::RandomWalk { step: 0.01 },
        CurvatureMode::Constant { curvature: -KAPPA_MAX },
    ] {
        let mut world = LaneWorld::from_mode(&mode, 300, 1, 3).unwrap();
        world.height = 8;
        world.width = 16;
        world.noise_level = 0.05;
        let samples = generate_lane_dataset(&world, 300).unwrap();
        assert_eq!(samples.len(), 300);
        for s in &samples {
            assert!(s.steering_deg.abs() <= bound, "{mode:?}: {}", s.steering_deg);
            assert!(s.segment.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn sine_profile_spans_both_directions() {
    let world = LaneWorld::from_mode(&CurvatureMode::Sine { amplitude: KAPPA_MAX, period: 150.0 }, 2000, 1, 7).unwrap();
    let labels: Vec<f32> = generate_lane_dataset(&LaneWorld { height: 8, width: 16, ..world }, 2000)
        .unwrap()
        .iter()
        .map(|s| s.steering_deg)
        .collect();
    let max = labels.iter().cloned().fold(f32::MIN, f32::max);
    let min = labels.iter().cloned().fold(f32::MAX, f32::min);
    assert!(max > 19.0 && min < -19.0, "range [{min}, {max}]");
}

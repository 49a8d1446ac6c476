//! Synthetic data: oracle separability, locality of the label and the
//! dataset file format.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stts::config::ModelConfig;
use stts::model::VideoClip;
use stts::select::AnchorGrid;
use stts::synth::{
    class_pattern, generate, generate_sample, ground_truth_tokens, read_dataset, write_dataset,
    GeneratorSpec, Region, SyntheticSample,
};
use stts::Error;

/// Best zero-mean template correlation over every frame and aligned
/// position; returns the winning class.
fn template_oracle(clip: &VideoClip, spec: &GeneratorSpec) -> usize {
    let size = spec.region_size;
    let templates: Vec<Vec<f32>> = (0..spec.classes)
        .map(|c| {
            let t: Vec<f32> = (0..size * size)
                .map(|i| class_pattern(c, spec.classes, size, i / size, i % size))
                .collect();
            let m = t.iter().sum::<f32>() / t.len() as f32;
            t.into_iter().map(|v| v - m).collect()
        })
        .collect();
    let mut best = (f32::NEG_INFINITY, 0);
    for d in 0..clip.frames() {
        for row in (0..=clip.height() - size).step_by(spec.cube_p) {
            for col in (0..=clip.width() - size).step_by(spec.cube_p) {
                let patch: Vec<f32> = (0..size * size)
                    .map(|i| {
                        (0..clip.channels())
                            .map(|c| clip.get(d, row + i / size, col + i % size, c))
                            .sum::<f32>()
                    })
                    .collect();
                let m = patch.iter().sum::<f32>() / patch.len() as f32;
                for (class, t) in templates.iter().enumerate() {
                    let score: f32 = patch.iter().zip(t).map(|(p, q)| (p - m) * q).sum();
                    if score > best.0 {
                        best = (score, class);
                    }
                }
            }
        }
    }
    best.1
}

fn oracle_accuracy(samples: &[SyntheticSample], spec: &GeneratorSpec) -> f64 {
    let hits = samples
        .iter()
        .filter(|s| template_oracle(&s.clip, spec) == s.label)
        .count();
    hits as f64 / samples.len() as f64
}

#[test]
fn noiseless_data_is_perfectly_template_separable() {
    let spec = GeneratorSpec {
        samples: 200,
        noise_level: 0.0,
        ..GeneratorSpec::default()
    };
    let ds = generate(&spec).unwrap();
    assert_eq!(oracle_accuracy(&ds.samples, &spec), 1.0);
}

#[test]
fn default_noise_keeps_the_oracle_accurate() {
    let spec = GeneratorSpec {
        samples: 200,
        ..GeneratorSpec::default()
    };
    let ds = generate(&spec).unwrap();
    assert!(oracle_accuracy(&ds.samples, &spec) > 0.98);
}

#[test]
fn labels_only_change_the_signal_region() {
    let spec = GeneratorSpec::default();
    for index in 0..20 {
        let a = generate_sample(&spec, index, 0).unwrap();
        let b = generate_sample(&spec, index, 2).unwrap();
        assert_eq!((&a.signal_frames, a.region), (&b.signal_frames, b.region));
        let mut differs = false;
        for d in 0..spec.frames {
            for y in 0..spec.height {
                for x in 0..spec.width {
                    for c in 0..3 {
                        if a.clip.get(d, y, x, c) != b.clip.get(d, y, x, c) {
                            let r = a.region;
                            assert!(a.signal_frames.contains(&d));
                            assert!((r.row..r.row + r.height).contains(&y));
                            assert!((r.col..r.col + r.width).contains(&x));
                            differs = true;
                        }
                    }
                }
            }
        }
        assert!(differs);
    }
}

#[test]
fn removing_signal_frames_drops_the_oracle_to_chance() {
    let spec = GeneratorSpec {
        samples: 1000,
        seed: 3,
        ..GeneratorSpec::default()
    };
    let mut ds = generate(&spec).unwrap();
    for s in &mut ds.samples {
        for &d in &s.signal_frames {
            s.clip.clear_frame(d);
        }
    }
    let acc = oracle_accuracy(&ds.samples, &spec);
    assert!((acc - 0.25).abs() <= 0.05, "ablated oracle accuracy {acc}");
}

#[test]
fn shuffling_non_signal_frames_keeps_oracle_accuracy() {
    let spec = GeneratorSpec {
        samples: 1000,
        noise_level: 0.3,
        seed: 4,
        ..GeneratorSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let before = oracle_accuracy(&ds.samples, &spec);
    // Swap every non-signal frame with the same frame slot of another sample
    // where that slot is also non-signal.
    let mut shuffled = ds.samples.clone();
    let mut order: Vec<usize> = (0..shuffled.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let frame_len = spec.height * spec.width * spec.channels;
    for (i, &j) in order.iter().enumerate() {
        for d in 0..spec.frames {
            if ds.samples[i].signal_frames.contains(&d) || ds.samples[j].signal_frames.contains(&d)
            {
                continue;
            }
            let src = &ds.samples[j].clip.pixels()[d * frame_len..(d + 1) * frame_len];
            shuffled[i].clip.pixels_mut()[d * frame_len..(d + 1) * frame_len].copy_from_slice(src);
        }
    }
    let after = oracle_accuracy(&shuffled, &spec);
    assert!((before - after).abs() <= 0.02, "{before} vs {after}");
}

#[test]
fn generation_is_deterministic_and_in_range() {
    let spec = GeneratorSpec {
        samples: 50,
        seed: 9,
        ..GeneratorSpec::default()
    };
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a, b);
    for s in &a.samples {
        assert!(s.clip.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.signal_frames.len(), 2);
        let groups: BTreeSet<usize> = s.signal_frames.iter().map(|f| f / 2).collect();
        assert_eq!(groups.len(), 2);
        assert_eq!((s.region.row % 4, s.region.col % 4), (0, 0));
    }
    let labels: BTreeSet<usize> = a.samples.iter().map(|s| s.label).collect();
    assert_eq!(labels.len(), 4);
}

#[test]
fn oversized_regions_are_argument_errors() {
    for spec in [
        GeneratorSpec {
            region_size: 28,
            ..GeneratorSpec::default()
        },
        GeneratorSpec {
            signal_frame_count: 5,
            ..GeneratorSpec::default()
        },
        GeneratorSpec {
            classes: 1,
            ..GeneratorSpec::default()
        },
    ] {
        assert!(matches!(generate(&spec), Err(Error::Argument(_))));
    }
}

fn sample_with(frames: Vec<usize>, region: Region) -> SyntheticSample {
    SyntheticSample {
        clip: VideoClip::zeros(8, 24, 24, 3),
        label: 0,
        signal_frames: frames,
        region,
        noise_level: 0.0,
    }
}

#[test]
fn ground_truth_examples() {
    let cfg = ModelConfig::tiny();
    let one_patch = Region {
        row: 4,
        col: 8,
        height: 4,
        width: 4,
    };
    let gt = ground_truth_tokens(&sample_with(vec![2, 3], one_patch), &cfg).unwrap();
    assert_eq!(gt.frames, BTreeSet::from([1]));
    assert_eq!(gt.tokens, BTreeSet::from([8]));

    let misaligned = Region {
        row: 2,
        col: 0,
        height: 8,
        width: 8,
    };
    assert!(matches!(
        ground_truth_tokens(&sample_with(vec![0], misaligned), &cfg),
        Err(Error::Argument(_))
    ));
}

#[test]
fn anchor_sets_match_brute_force_inclusion() {
    let cfg = ModelConfig::tiny();
    for row in (0..=16).step_by(4) {
        for col in (0..=16).step_by(4) {
            for size in [4usize, 8] {
                if row + size > 24 || col + size > 24 {
                    continue;
                }
                let region = Region {
                    row,
                    col,
                    height: size,
                    width: size,
                };
                let gt = ground_truth_tokens(&sample_with(vec![0, 5], region), &cfg).unwrap();
                for p in 1..=6 {
                    for s in 1..=6 {
                        let Ok(grid) = AnchorGrid::new(6, 6, p, s) else {
                            continue;
                        };
                        let cover: BTreeSet<usize> = (0..grid.count())
                            .filter(|&g| gt.tokens.iter().all(|t| grid.anchor(g).contains(t)))
                            .collect();
                        let overlap: BTreeSet<usize> = (0..grid.count())
                            .filter(|&g| gt.tokens.iter().any(|t| grid.anchor(g).contains(t)))
                            .collect();
                        assert_eq!(gt.covering_anchors(&grid), cover);
                        assert_eq!(gt.overlapping_anchors(&grid), overlap);
                    }
                }
            }
        }
    }
}

#[test]
fn dataset_files_round_trip_bit_exactly() {
    let spec = GeneratorSpec {
        samples: 12,
        seed: 5,
        ..GeneratorSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    write_dataset(&path, &ds).unwrap();
    let first = std::fs::read(&path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, ds);
    let again = dir.path().join("again.bin");
    write_dataset(&again, &back).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), first);
    assert_eq!(&first[..8], b"STTSDAT1");
    let per = 8 * 24 * 24 * 3 * 4 + 4 + 8 + 8;
    assert_eq!(first.len(), 8 + 24 + 12 * per);
}

#[test]
fn corrupt_datasets_are_rejected() {
    let spec = GeneratorSpec {
        samples: 2,
        ..GeneratorSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    write_dataset(&path, &ds).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
    assert!(matches!(
        read_dataset(&dir.path().join("missing.bin")),
        Err(Error::Io { .. })
    ));
}

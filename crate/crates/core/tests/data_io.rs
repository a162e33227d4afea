use mspe::data::{
    dataset_from_idx, dataset_to_idx, generate_synthetic, load_idx, load_idx_dataset, save_idx, IdxArray, IdxData,
    ResolutionSource, SyntheticShapes, SyntheticShapesSpec,
};
use mspe::Error;
use proptest::prelude::*;

fn idx_bytes(code: u8, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, code, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

#[test]
fn ten_28x28_images_load_as_single_channel_items() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..10 * 28 * 28).map(|i| (i % 256) as u8).collect();
    let labels: Vec<u8> = (0..10).collect();
    let img_path = dir.path().join("images.idx");
    let lbl_path = dir.path().join("labels.idx");
    std::fs::write(&img_path, idx_bytes(0x08, &[10, 28, 28], &pixels)).unwrap();
    std::fs::write(&lbl_path, idx_bytes(0x08, &[10], &labels)).unwrap();

    let ds = load_idx_dataset(&img_path, &lbl_path).unwrap();
    assert_eq!(ds.len(), 10);
    assert_eq!(ds.num_classes, 10);
    assert_eq!(ds.labels(), (0..10).collect::<Vec<_>>());
    for s in &ds.samples {
        assert_eq!(s.image.dim(), (28, 28, 1));
        assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    // pixel 255 sits at flat index 255 of the first image
    assert_eq!(ds.samples[0].image[[255 / 28, 255 % 28, 0]], 1.0);
    assert_eq!(ds.samples[0].image[[0, 0, 0]], 0.0);
}

#[test]
fn idx_file_round_trip_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let payload: Vec<u8> = (0..3 * 5 * 4 * 4).map(|i| (i * 7 % 256) as u8).collect();
    let original = idx_bytes(0x0D, &[3, 5, 4], &payload);
    let path = dir.path().join("a.idx");
    std::fs::write(&path, &original).unwrap();
    let array = load_idx(&path).unwrap();
    let copy = dir.path().join("b.idx");
    save_idx(&copy, &array).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), original);
}

#[test]
fn malformed_idx_reports_byte_offset() {
    let cases: Vec<(Vec<u8>, u64)> = vec![
        (vec![0, 0], 2),
        (vec![1, 0, 0x08, 1, 0, 0, 0, 1, 5], 0),
        (vec![0, 0, 0x42, 1, 0, 0, 0, 1, 5], 2),
        (vec![0, 0, 0x08, 2, 0, 0, 0, 1], 8),
        (idx_bytes(0x08, &[4], &[1, 2, 3]), 11),
        (idx_bytes(0x08, &[2], &[1, 2, 3]), 10),
    ];
    for (bytes, offset) in cases {
        match IdxArray::decode(&bytes) {
            Err(Error::Format { offset: got, .. }) => assert_eq!(got, offset, "{bytes:?}"),
            other => panic!("expected format error for {bytes:?}, got {other:?}"),
        }
    }
}

#[test]
fn dataset_idx_export_round_trips() {
    let ds = generate_synthetic(SyntheticShapesSpec {
        samples_per_class: 3,
        resolution_range: (12, 12),
        ..Default::default()
    })
    .unwrap();
    let (images, labels) = dataset_to_idx(&ds).unwrap();
    let back = dataset_from_idx(
        &IdxArray::decode(&images.encode()).unwrap(),
        &IdxArray::decode(&labels.encode()).unwrap(),
        "copy",
    )
    .unwrap();
    assert_eq!(back.labels(), ds.labels());
    for (a, b) in back.samples.iter().zip(&ds.samples) {
        assert_eq!(a.image, b.image);
    }
}

#[test]
fn synthetic_generation_is_seed_deterministic() {
    let spec = SyntheticShapesSpec {
        samples_per_class: 20,
        resolution_range: (16, 40),
        seed: 9,
        ..Default::default()
    };
    let a = generate_synthetic(spec.clone()).unwrap();
    let b = generate_synthetic(spec.clone()).unwrap();
    assert_eq!(a.samples, b.samples);
    let c = generate_synthetic(SyntheticShapesSpec { seed: 10, ..spec }).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn synthetic_classes_are_balanced_and_native_sizes_in_range() {
    let spec = SyntheticShapesSpec {
        samples_per_class: 37,
        resolution_range: (8, 48),
        min_side: 8,
        ..Default::default()
    };
    let ds = generate_synthetic(spec).unwrap();
    assert_eq!(ds.class_counts(), vec![37; 4]);
    let mut sizes = std::collections::BTreeSet::new();
    for s in &ds.samples {
        let (h, w) = s.resolution();
        assert_eq!(h, w);
        assert!((8..=48).contains(&h));
        sizes.insert(h);
    }
    assert!(sizes.len() > 10, "native resolutions should vary: {sizes:?}");
}

#[test]
fn resolution_below_minimum_is_rejected() {
    let spec = SyntheticShapesSpec {
        resolution_range: (3, 32),
        min_side: 4,
        ..Default::default()
    };
    assert!(matches!(generate_synthetic(spec), Err(Error::InvalidArgument(_))));
}

#[test]
fn contrast_stays_within_intensity_ranges() {
    let spec = SyntheticShapesSpec {
        samples_per_class: 250,
        ..Default::default()
    };
    let (bg, fg) = (spec.background, spec.foreground);
    let ds = generate_synthetic(spec).unwrap();
    assert_eq!(ds.len(), 1000);
    let eps = 1e-6;
    let (mut bg_sum, mut fg_sum, mut contrast_sum) = (0.0f64, 0.0f64, 0.0f64);
    for s in &ds.samples {
        let lo = s.image.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = s.image.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        // corners are never covered, so the darkest pixel is pure background
        assert!(lo >= bg.0 - eps && lo <= bg.1 + eps, "background {lo}");
        assert!(hi <= fg.1 + eps, "foreground {hi}");
        bg_sum += lo as f64;
        fg_sum += hi as f64;
        contrast_sum += (hi - lo) as f64;
    }
    let n = ds.len() as f64;
    let (bg_mean, fg_mean, contrast) = (bg_sum / n, fg_sum / n, contrast_sum / n);
    assert!((bg.0 as f64..=bg.1 as f64).contains(&bg_mean), "{bg_mean}");
    assert!((fg.0 as f64..=fg.1 as f64).contains(&fg_mean), "{fg_mean}");
    assert!(((fg.0 - bg.1) as f64..=(fg.1 - bg.0) as f64).contains(&contrast), "{contrast}");
}

#[test]
fn scenes_rerender_natively_at_any_resolution() {
    let shapes = SyntheticShapes::generate(SyntheticShapesSpec {
        samples_per_class: 2,
        ..Default::default()
    })
    .unwrap();
    let ds = shapes.at_resolution((20, 36)).unwrap();
    assert_eq!(ds.len(), 8);
    assert!(ds.samples.iter().all(|s| s.resolution() == (20, 36)));
    assert_eq!(ds.labels(), shapes.native().labels());
}

fn idx_strategy() -> impl Strategy<Value = IdxArray> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        let data = prop_oneof![
            prop::collection::vec(any::<u8>(), n).prop_map(IdxData::U8),
            prop::collection::vec(any::<i8>(), n).prop_map(IdxData::I8),
            prop::collection::vec(any::<i16>(), n).prop_map(IdxData::I16),
            prop::collection::vec(any::<i32>(), n).prop_map(IdxData::I32),
            prop::collection::vec(-1e6f32..1e6, n).prop_map(IdxData::F32),
            prop::collection::vec(-1e6f64..1e6, n).prop_map(IdxData::F64),
        ];
        (Just(dims), data).prop_map(|(dims, data)| IdxArray { dims, data })
    })
}

proptest! {
    #[test]
    fn idx_encode_decode_round_trip(array in idx_strategy()) {
        let bytes = array.encode();
        let back = IdxArray::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &array);
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncated_idx_never_decodes(array in idx_strategy(), cut in 1usize..8) {
        let bytes = array.encode();
        let cut = cut.min(bytes.len());
        prop_assert!(IdxArray::decode(&bytes[..bytes.len() - cut]).is_err());
    }
}

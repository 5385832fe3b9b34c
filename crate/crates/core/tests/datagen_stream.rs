use lrt_core::datagen::{
    label_entropy, load_idx, make_partitions, parse_idx_images, synthetic_digits, to_idx_bytes, AugmentParams,
    BlockFlags, DataError, ElasticParams, OnlineStream, PartitionSizes, ShiftSchedule,
};

#[test]
fn idx_files_roundtrip_through_disk() {
    let data = synthetic_digits(1, 40);
    let (img, lab) = to_idx_bytes(&data);
    let dir = tempfile::tempdir().unwrap();
    let (pi, pl) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    std::fs::write(&pi, img).unwrap();
    std::fs::write(&pl, lab).unwrap();
    let back = load_idx(&pi, &pl).unwrap();
    assert_eq!(back.labels, data.labels);
    // Pixels are stored as bytes, so values come back on the 1/255 grid.
    let err = back
        .images
        .iter()
        .zip(data.images.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err <= 0.5 / 255.0 + 1e-12, "{err}");
}

#[test]
fn idx_errors_are_typed() {
    let data = synthetic_digits(2, 3);
    let (mut img, _) = to_idx_bytes(&data);
    img[3] = 0x01;
    assert!(matches!(parse_idx_images(&img), Err(DataError::BadMagic { .. })));
    let (img, _) = to_idx_bytes(&data);
    assert!(matches!(parse_idx_images(&img[..img.len() - 5]), Err(DataError::Truncated { .. })));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert!(matches!(load_idx(&missing, &missing), Err(DataError::Io { .. })));
}

#[test]
fn partitions_are_disjoint_and_sized() {
    let source = synthetic_digits(3, 120);
    let sizes = PartitionSizes {
        train_source: 50,
        val_source: 20,
        online_source: 50,
        train: 80,
        val: 20,
        online: 300,
    };
    let p = make_partitions(&source, sizes, ElasticParams::default(), 9).unwrap();
    assert_eq!((p.train.len(), p.val.len(), p.online_source.len()), (80, 20, 50));
    let mut all: Vec<usize> = p.source_indices.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 120);
    let short = make_partitions(&synthetic_digits(3, 10), sizes, ElasticParams::default(), 9);
    assert!(matches!(short, Err(DataError::Insufficient { need: 120, have: 10 })));
}

#[test]
fn stream_is_reproducible_and_bounded() {
    let source = synthetic_digits(4, 200);
    let schedule = ShiftSchedule::distribution_shift(50);
    let take = |seed| -> Vec<(u8, f64)> {
        OnlineStream::new(&source, 500, schedule.clone(), AugmentParams::default(), seed)
            .unwrap()
            .map(|s| (s.label, s.image.sum()))
            .collect()
    };
    let a = take(7);
    assert_eq!(a.len(), 500);
    assert_eq!(a, take(7));
    assert_ne!(a, take(8));
    for s in OnlineStream::new(&source, 500, schedule, AugmentParams::default(), 7).unwrap() {
        assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(s.label, source.labels[s.source]);
    }
}

#[test]
fn class_clustering_lowers_window_entropy() {
    let source = synthetic_digits(5, 500);
    let cd = ShiftSchedule {
        block_len: 100_000,
        blocks: vec![BlockFlags {
            cd: true,
            ..BlockFlags::NONE
        }],
    };
    let labels = |schedule: ShiftSchedule| -> Vec<u8> {
        OnlineStream::new(&source, 5000, schedule, AugmentParams::default(), 3)
            .unwrap()
            .map(|s| s.label)
            .collect()
    };
    let window = 250;
    let mean_entropy = |l: &[u8]| l.chunks(window).map(label_entropy).sum::<f64>() / (l.len() / window) as f64;
    let plain = mean_entropy(&labels(ShiftSchedule::none()));
    let clustered = mean_entropy(&labels(cd));
    assert!(plain > 2.2, "{plain}");
    assert!(clustered < plain - 0.15, "clustered {clustered} vs plain {plain}");
}

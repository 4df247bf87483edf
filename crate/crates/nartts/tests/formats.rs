use nartts::checkpoint::Checkpoint;
use nartts::durations::{format_durations, parse_durations};
use nartts::error::Error;
use nartts::features::{decode, encode, HEADER_LEN};
use nartts::manifest::{format_manifest, parse_manifest, ManifestEntry};
use nartts_core::frames::AcousticFrames;
use nartts_core::Tensor;
use proptest::prelude::*;
use std::path::{Path, PathBuf};

fn frames_strategy() -> impl Strategy<Value = AcousticFrames> {
    (1usize..8, 1usize..24).prop_flat_map(|(t, d)| {
        prop::collection::vec(-1e3f64..1e3, t * d)
            .prop_map(move |v| AcousticFrames::new(Tensor::new(&[t, d], v).unwrap()).unwrap())
    })
}

fn checkpoint_strategy() -> impl Strategy<Value = Checkpoint> {
    let tensor = (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
        prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), r * c)
            .prop_map(move |v| Tensor::new(&[r, c], v).unwrap())
    });
    (
        prop::collection::btree_map("[a-z]{1,6}(\\.[a-z]{1,4})?", tensor, 0..6),
        "[ -~\n]{0,40}",
    )
        .prop_map(|(m, config)| Checkpoint {
            tensors: m.into_iter().filter(|(k, _)| k != "config").collect(),
            config,
        })
}

proptest! {
    #[test]
    fn features_round_trip_within_f32(f in frames_strategy()) {
        let bytes = encode(&f);
        prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * f.len() * f.dim());
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.tensor().shape(), f.tensor().shape());
        for (a, b) in back.tensor().data().iter().zip(f.tensor().data()) {
            prop_assert_eq!(*a, (*b as f32) as f64);
            prop_assert!((a - b).abs() <= 1e-6 * b.abs());
        }
    }

    #[test]
    fn features_reject_trailing_and_truncation(f in frames_strategy(), extra in 1usize..8, cut in 1usize..16) {
        let mut bytes = encode(&f);
        let n = bytes.len();
        let mut long = bytes.clone();
        long.extend(std::iter::repeat(0u8).take(extra));
        let long_is_format = matches!(decode(&long), Err(Error::Format { .. }));
        prop_assert!(long_is_format);
        bytes.truncate(n - cut.min(n));
        let short_is_format = matches!(decode(&bytes), Err(Error::Format { .. }));
        prop_assert!(short_is_format);
    }

    #[test]
    fn durations_round_trip(entries in prop::collection::vec(("[A-Za-z0-9_]{1,8}", prop::collection::vec(0usize..50, 1..10)), 0..8)) {
        let text = format_durations(&entries);
        prop_assert_eq!(parse_durations(&text).unwrap(), entries);
    }

    #[test]
    fn manifest_round_trip(entries in prop::collection::btree_map("[a-z0-9]{1,8}", prop::collection::vec(0usize..16, 1..10), 1..8)) {
        let entries: Vec<ManifestEntry> = entries
            .into_iter()
            .map(|(id, tokens)| ManifestEntry { features: PathBuf::from(format!("feats/{id}.feat")), id, tokens })
            .collect();
        let back = parse_manifest(&format_manifest(&entries), Path::new("")).unwrap();
        prop_assert_eq!(back, entries);
    }

    #[test]
    fn checkpoint_bytes_are_canonical(c in checkpoint_strategy(), extra in 1usize..4) {
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.config.as_str(), c.config.as_str());
        prop_assert_eq!(back.tensors.len(), c.tensors.len());
        for ((na, ta), (nb, tb)) in back.tensors.iter().zip(&c.tensors) {
            prop_assert_eq!(na, nb);
            prop_assert!(ta.bitwise_eq(tb));
        }
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        let mut long = bytes.clone();
        long.extend(std::iter::repeat(7u8).take(extra));
        prop_assert!(Checkpoint::from_bytes(&long).is_err());
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

#[test]
fn empty_feature_file_fails_at_offset_zero() {
    match decode(&[]) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn duplicate_checkpoint_names_are_rejected() {
    let t = Tensor::zeros(&[1, 1]);
    let c = Checkpoint {
        tensors: vec![("a".into(), t.clone()), ("a".into(), t)],
        config: String::new(),
    };
    assert!(c.to_bytes().is_err());
}

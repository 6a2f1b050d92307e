use diffcore::{ParamStore, Tensor};
use dera::alignment::dfea::{self, FeatureFile, StreamTag};
use dera::argen::TokenFile;
use dera::tokenizer::{Checkpoint, TokenSequence};
use dera::videolab::dvid::{self, Dtype};
use dera::videolab::VideoClip;
use proptest::prelude::*;

fn clip_strategy() -> impl Strategy<Value = VideoClip> {
    (1usize..4, 1usize..5, 1usize..5, any::<bool>(), 0u32..10).prop_flat_map(|(t, h, w, labelled, label)| {
        prop::collection::vec(-1.0f32..=1.0, t * h * w * 3)
            .prop_map(move |px| VideoClip::new(t, h, w, px, labelled.then_some(label)).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dvid_f32_round_trips_bitwise(clip in clip_strategy()) {
        let bytes = dvid::encode(&clip, Dtype::F32);
        let back = dvid::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &clip);
        prop_assert_eq!(dvid::encode(&back, Dtype::F32), bytes);
    }

    #[test]
    fn dvid_u8_is_stable_after_one_trip(clip in clip_strategy()) {
        let once = dvid::decode(&dvid::encode(&clip, Dtype::U8)).unwrap();
        let bytes = dvid::encode(&once, Dtype::U8);
        prop_assert_eq!(dvid::encode(&dvid::decode(&bytes).unwrap(), Dtype::U8), bytes);
    }

    #[test]
    fn dfea_round_trips_bitwise(n in 1usize..6, d in 1usize..6, video in any::<bool>(), seed in any::<u8>()) {
        let data: Vec<f32> = (0..n * d).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
        let f = FeatureFile {
            stream: if video { StreamTag::Video } else { StreamTag::Image },
            hash: [seed; 32],
            features: Tensor::new(vec![n, d], data).unwrap(),
        };
        let bytes = dfea::encode(&f);
        let back = dfea::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(dfea::encode(&back), bytes);
    }

    #[test]
    fn deratoks_round_trips_bitwise(
        rows in prop::collection::vec(prop::collection::vec(0u32..256, 6), 0..5),
        labelled in any::<bool>(),
    ) {
        let sequences: Vec<TokenSequence> = rows.iter().map(|r| TokenSequence::new(r.clone(), 2, 4).unwrap()).collect();
        let labels = labelled.then(|| (0..sequences.len() as u32).collect());
        let f = TokenFile { sequences, labels };
        let bytes = f.encode().unwrap();
        let back = TokenFile::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn dckp_round_trips_bitwise(values in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..12)) {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
        store.insert("b", Tensor::scalar(values[0])).unwrap();
        let ckpt = Checkpoint::with_params("{\"kind\":\"test\"}".into(), &store, "model.");
        let bytes = ckpt.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes);
        prop_assert_eq!(back.params("model.").unwrap(), store);
    }
}

#[test]
fn truncated_files_are_format_errors() {
    let clip = VideoClip::filled(1, 2, 2, 0.5).unwrap();
    let bytes = dvid::encode(&clip, Dtype::F32);
    assert!(matches!(dvid::decode(&bytes[..bytes.len() - 1]), Err(dera::Error::Format { .. })));
    let toks = TokenFile { sequences: vec![TokenSequence::new(vec![1, 2], 1, 1).unwrap()], labels: None };
    let bytes = toks.encode().unwrap();
    assert!(matches!(TokenFile::decode(&bytes[..bytes.len() - 2]), Err(dera::Error::Format { .. })));
    assert!(matches!(Checkpoint::decode(b"DERACKP"), Err(dera::Error::Format { .. })));
}

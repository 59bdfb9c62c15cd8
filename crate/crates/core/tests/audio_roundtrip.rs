use advspeech::audio::{decode_wav, encode_wav, read_wav, write_wav, Waveform};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn integer_waveforms_survive_encoding(samples in prop::collection::vec(-32768i32..=32767, 1..4000)) {
        let w = Waveform::new(samples.iter().map(|&s| f64::from(s)).collect());
        let back = decode_wav(&encode_wav(&w).unwrap()).unwrap();
        prop_assert_eq!(back, w);
    }

    #[test]
    fn writing_rounds_half_away_from_zero(v in -32767.0f64..32766.0) {
        let w = Waveform::new(vec![v]);
        let back = decode_wav(&encode_wav(&w).unwrap()).unwrap();
        prop_assert_eq!(back.as_slice()[0], v.round());
    }
}

#[test]
fn one_second_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    let w = Waveform::new((0..16000).map(|n| ((n * 7919) % 65536) as f64 - 32768.0).collect());
    write_wav(&path, &w).unwrap();
    assert_eq!(read_wav(&path).unwrap(), w);
    assert!(write_wav(&path, &Waveform::new(vec![40000.0])).is_err());
}

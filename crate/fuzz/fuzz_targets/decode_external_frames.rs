#![no_main]

use libfuzzer_sys::fuzz_target;
use ultras::quantizer::{decode_external_frames, encode_external_frames};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = decode_external_frames(data) {
        let bytes = encode_external_frames(&records).expect("decoded records encode");
        assert_eq!(
            decode_external_frames(&bytes).expect("round trip").len(),
            records.len()
        );
    }
});

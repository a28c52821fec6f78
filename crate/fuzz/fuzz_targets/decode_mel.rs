#![no_main]

use libfuzzer_sys::fuzz_target;
use ultras::data::{decode_mel, encode_mel};

fuzz_target!(|data: &[u8]| {
    if let Ok(mel) = decode_mel(data) {
        assert_eq!(encode_mel(&mel), data);
    }
});

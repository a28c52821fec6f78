#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(pcm) = ultras::wav::decode_wav(data) {
        let again = ultras::wav::decode_wav(&ultras::wav::encode_wav(&pcm))
            .expect("re-encoded wav decodes");
        assert_eq!(again, pcm);
    }
});

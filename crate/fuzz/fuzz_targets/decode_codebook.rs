#![no_main]

use libfuzzer_sys::fuzz_target;
use ultras::quantizer::{decode_codebook, encode_codebook};

fuzz_target!(|data: &[u8]| {
    if let Ok(cb) = decode_codebook(data) {
        assert_eq!(cb.centroids.len(), cb.k * cb.dim);
        let again = decode_codebook(&encode_codebook(&cb)).expect("re-encoded codebook decodes");
        assert_eq!(again.k, cb.k);
        assert_eq!(again.dim, cb.dim);
    }
});

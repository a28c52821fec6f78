#![no_main]

//! Input is a little-endian u32 manifest length, the manifest JSON, then the blob.

use libfuzzer_sys::fuzz_target;
use ultras::trainer::decode_checkpoint;

fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let n = u32::from_le_bytes(data[..4].try_into().unwrap()) as usize;
    let rest = &data[4..];
    let (manifest, blob) = rest.split_at(n.min(rest.len()));
    if let Ok(ck) = decode_checkpoint(manifest, blob) {
        assert_eq!(ck.params.data.len(), ck.optim.m.len());
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use ultras::data::CorpusManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = CorpusManifest::parse(text, "root") {
        let again = CorpusManifest::parse(&m.to_tsv(), "root").expect("serialized manifest parses");
        assert_eq!(again, m);
    }
});

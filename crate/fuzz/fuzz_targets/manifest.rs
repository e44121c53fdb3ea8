#![no_main]

use arinv::harness::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_manifest(data) {
        let text = serde_json::to_vec(&m).expect("manifest serializes");
        assert_eq!(parse_manifest(&text).expect("re-parses"), m);
    }
});

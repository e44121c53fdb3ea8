#![no_main]

use arinv::data::{decode_png, MAX_PNG_SIDE};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_png(data) {
        let (c, h, w) = t.dims3().expect("rank 3");
        assert_eq!(c, 3);
        assert!(h as u32 <= MAX_PNG_SIDE && w as u32 <= MAX_PNG_SIDE);
    }
});

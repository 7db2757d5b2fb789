#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = gfk_core::dataset::parse_manifest(text) {
            assert!(!m.frames.is_empty());
        }
    }
});

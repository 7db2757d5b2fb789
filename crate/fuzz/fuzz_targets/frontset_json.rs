#![no_main]

use gfk_core::zones::FrontSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(f) = FrontSet::from_json(text) {
            let back = FrontSet::from_json(&f.to_json()).expect("serialized fronts parse");
            assert_eq!(back.polylines, f.polylines);
        }
    }
});

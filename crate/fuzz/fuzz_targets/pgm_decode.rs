#![no_main]

use gfk_core::dataset::{decode_pgm, labels_from_gray};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((w, h, px)) = decode_pgm(data) {
        assert_eq!(px.len(), w * h);
        let _ = labels_from_gray(&px);
    }
});

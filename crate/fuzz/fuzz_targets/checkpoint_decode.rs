#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = gfk_autodiff::checkpoint::decode(data) {
        // whatever decodes must encode back to the same bytes
        let again = gfk_autodiff::checkpoint::encode(&store);
        assert_eq!(gfk_autodiff::checkpoint::decode(&again).unwrap().len(), store.len());
    }
});

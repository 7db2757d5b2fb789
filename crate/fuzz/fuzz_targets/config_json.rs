#![no_main]

use gfk_core::experiment::ExperimentConfig;
use gfk_core::network::ModelConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<ExperimentConfig>(data) {
        let _ = cfg.validate();
    }
    if let Ok(m) = serde_json::from_slice::<ModelConfig>(data) {
        if m.validate().is_ok() && m.context <= 64 {
            let _ = gfk_core::network::param_count(&m);
        }
    }
});

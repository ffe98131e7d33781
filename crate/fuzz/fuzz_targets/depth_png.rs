#![no_main]

use depthadapt::datasets::decode_depth_png;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = decode_depth_png(data, 0.001, "fuzz") {
        assert!(map.depths.iter().all(|d| d.is_finite() && *d >= 0.0));
    }
});

#![no_main]

use depthadapt_cli::logs::{parse_epoch_log, parse_iteration_log};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_iteration_log(text);
        let _ = parse_epoch_log(text);
    }
});

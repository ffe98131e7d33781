#![no_main]

use depthadapt::resources::PowerLog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = PowerLog::parse(text);
    }
});

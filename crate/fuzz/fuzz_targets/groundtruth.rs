#![no_main]

use cellnas::data::parse_groundtruth;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(boxes) = parse_groundtruth(text) {
            assert!(boxes.iter().all(|b| b.is_finite()));
        }
    }
});

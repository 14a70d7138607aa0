#![no_main]

use cellnas::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = RunConfig::from_toml(text) {
            let _ = config.validate();
            let _ = config.hash();
        }
    }
});

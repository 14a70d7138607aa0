#![no_main]

use cellnas::genotype::Genotype;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(g) = Genotype::from_toml(text) {
            let again = Genotype::from_toml(&g.to_toml().unwrap()).unwrap();
            assert_eq!(g, again);
        }
    }
});

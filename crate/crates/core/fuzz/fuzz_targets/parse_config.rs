#![no_main]

use std::collections::BTreeMap;

use libfuzzer_sys::fuzz_target;
use prodcat::config::{parse_config, RunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(map) = parse_config(text) {
        if let Ok(cfg) = RunConfig::resolve("train", &map, &BTreeMap::new()) {
            // the effective config must resolve to itself
            let again = RunConfig::resolve("train", &cfg.to_map(), &BTreeMap::new()).unwrap();
            assert_eq!(again.to_map(), cfg.to_map());
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use prodcat::features::read_embeddings;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = read_embeddings(data) {
        for t in table.tokens() {
            assert_eq!(table.get(t).map(<[f64]>::len), Some(table.dim()));
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use prodcat::corpus::{build_taxonomy, read_products, Schema};

fuzz_target!(|data: &[u8]| {
    let schema = Schema {
        title_secondary: Some("title_en".into()),
        ..Schema::default()
    };
    if let Ok(products) = read_products(data, &schema, "fuzz") {
        let _ = build_taxonomy(&products, schema.locale);
    }
});

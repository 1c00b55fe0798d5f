#![no_main]

use libfuzzer_sys::fuzz_target;
use prodcat::features::{tokenize, Locale};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for locale in [Locale::Turkish, Locale::Generic] {
        let once = tokenize(text, locale);
        let joined = once.tokens().join(" ");
        assert_eq!(tokenize(&joined, locale), once);
    }
});

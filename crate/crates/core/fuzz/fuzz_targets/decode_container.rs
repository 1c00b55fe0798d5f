#![no_main]

use libfuzzer_sys::fuzz_target;
use prodcat::container::decode;

fuzz_target!(|data: &[u8]| {
    if let Ok(decoded) = decode(data) {
        // external embedding files are never read here
        let _ = decoded.into_container(|_| Err(prodcat::Error::Integrity("no files while fuzzing".into())));
    }
});

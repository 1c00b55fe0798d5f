#![no_main]

//! Treats the input as a container body and appends a valid hash, so the
//! section parsers are reached. The seeds are the valid containers from
//! `corpus/decode_container` with their footers removed.

use libfuzzer_sys::fuzz_target;
use prodcat::container::decode;
use sha2::{Digest, Sha256};

fuzz_target!(|body: &[u8]| {
    let mut bytes = body.to_vec();
    bytes.extend_from_slice(&Sha256::digest(body));
    if let Ok(decoded) = decode(&bytes) {
        let _ = decoded.into_container(|_| Err(prodcat::Error::Integrity("no files while fuzzing".into())));
    }
});

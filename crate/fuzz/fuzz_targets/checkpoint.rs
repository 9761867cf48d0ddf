#![no_main]

use drinet::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((meta, store)) = decode(data) else { return };
    let bytes = encode(&meta, &store).expect("decoded checkpoint encodes");
    let (m2, s2) = decode(&bytes).expect("re-encoded checkpoint decodes");
    assert_eq!(m2, meta);
    assert_eq!(s2, store);
});

#![no_main]

use drinet::pointcloud::{decode_ascii_xyz, encode_ascii_xyz};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(pc) = decode_ascii_xyz(text) else { return };
    let again = decode_ascii_xyz(&encode_ascii_xyz(&pc)).expect("re-encoded cloud parses");
    assert_eq!(again, pc);
});

#![no_main]

use drinet::pointcloud::LabelRemap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = LabelRemap::parse(text, 255) {
        let _ = r.map(0);
    }
});

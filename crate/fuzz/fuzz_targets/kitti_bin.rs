#![no_main]

use drinet::pointcloud::{decode_kitti_bin, encode_kitti_bin};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(pc) = decode_kitti_bin(data) else { return };
    assert_eq!(pc.len(), data.len() / 16);
    // values came from f32, so re-encoding is lossless up to intensity clamping
    let again = decode_kitti_bin(&encode_kitti_bin(&pc)).expect("re-encoded cloud decodes");
    assert_eq!(again, pc);
});

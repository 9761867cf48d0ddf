#![no_main]

use drinet::pointcloud::{decode_labels, encode_labels};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(labels) = decode_labels(data, None) else { return };
    assert_eq!(labels.len(), data.len() / 4);
    assert_eq!(decode_labels(&encode_labels(&labels), Some(labels.len())).unwrap(), labels);
});

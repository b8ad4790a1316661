#![no_main]

use hybridps::transport::frame::{decode_frame, encode_frame};
use hybridps::transport::NodeId;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((f, used)) = decode_frame(data, NodeId::SCHEDULER, 1 << 16) {
        assert!(used <= data.len());
        assert_eq!(encode_frame(f.src, f.tag, &f.payload), &data[..used]);
    }
});

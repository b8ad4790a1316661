#![no_main]

use hybridps::transport::{FrameHeader, DEFAULT_MAX_FRAME};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(h) = FrameHeader::decode(data, DEFAULT_MAX_FRAME) {
        assert_eq!(&h.encode()[..], &data[..13]);
    }
});

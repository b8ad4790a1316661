#![no_main]

use hybridps::collectives::{decode_chunk, encode_chunk};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((h, values)) = decode_chunk(data) {
        assert_eq!(h.count as usize, values.len());
        assert_eq!(encode_chunk(h.ring, h.stage, &values), data);
    }
});

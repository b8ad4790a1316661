#![no_main]

use hybridps::transport::tcp::decode_register;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(addr) = decode_register(data) {
        assert_eq!(addr.len() + 2, data.len());
    }
});

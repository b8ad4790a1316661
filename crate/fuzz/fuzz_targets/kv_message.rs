#![no_main]

use hybridps::kvstore::KvMessage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&tag, payload)) = data.split_first() else { return };
    if let Ok(m) = KvMessage::decode(tag, payload) {
        assert_eq!(m.tag(), tag);
        assert_eq!(m.encode(), payload);
    }
});

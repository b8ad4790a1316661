#![no_main]

use hybridps::trainer::parse_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(samples) = parse_csv(data) {
        if let Some(first) = samples.first() {
            assert!(samples.iter().all(|s| s.x.len() == first.x.len()));
        }
    }
});

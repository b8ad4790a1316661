#![no_main]

use hybridps::launcher::ChildReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(report) = ChildReport::decode(data) {
        let again = report.encode();
        assert!(ChildReport::decode(&again).is_ok());
    }
});

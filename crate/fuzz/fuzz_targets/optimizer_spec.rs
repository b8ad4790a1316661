#![no_main]

use hybridps::optimizers::OptimizerSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = OptimizerSpec::decode(data) {
        assert!(spec.validate().is_ok());
        assert_eq!(&spec.encode()[..], data);
    }
});

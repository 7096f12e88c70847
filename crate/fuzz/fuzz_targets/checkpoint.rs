#![no_main]

use bmr_core::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode(data) {
        // Accepted input need not be canonical, but its re-encoding is a
        // fixed point.
        let bytes = encode(&model).unwrap();
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }
});

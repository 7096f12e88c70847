#![no_main]

use bmr_cli::commands::parse_synth_spec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = parse_synth_spec(text) {
        assert!(spec.violations().is_empty());
    }
});

#![no_main]

use bmr_cli::commands::parse_grid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_grid(text) {
        assert!(!rows.is_empty());
    }
});

#![no_main]

use std::path::Path;

use bmr_cli::run_config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text, Path::new("")) {
        assert!(cfg.violations().is_empty());
    }
});

#![no_main]

use bmr_core::config::parse_views;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(views) = parse_views(text) {
        assert!(!views.is_empty());
        let joined: Vec<_> = views.iter().map(|v| v.name()).collect();
        assert_eq!(parse_views(&joined.join(",")).unwrap(), views);
    }
});

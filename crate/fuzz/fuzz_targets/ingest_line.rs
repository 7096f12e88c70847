#![no_main]

use std::path::Path;

use bmr_cli::ingest::{encode_records, parse_line, synthetic_vocabulary, ImageField, IngestOptions};
use bmr_core::CleanRules;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let Ok(record) = parse_line(line) else { return };
    // Only inline and null images; paths would reach the filesystem.
    if matches!(record.image, Some(ImageField::Path(_))) {
        return;
    }
    let opts = IngestOptions {
        image_h: 8,
        image_w: 8,
        rules: CleanRules {
            min_side: 4,
            ..CleanRules::new(8, 8)
        },
        require_labels: false,
    };
    if let Ok(set) = encode_records(&[record], &synthetic_vocabulary(32), Path::new(""), &opts) {
        let img = &set.news[0].image;
        assert_eq!((img.height, img.width), (8, 8));
        assert!(set.news[0].text.iter().all(|&id| id < 32));
    }
});

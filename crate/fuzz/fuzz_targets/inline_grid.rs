#![no_main]

use bmr_cli::ingest::InlineGrid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(inline) = serde_json::from_slice::<InlineGrid>(data) else {
        return;
    };
    if let Ok(grid) = inline.decode() {
        assert_eq!(grid.data.len(), grid.height * grid.width);
        assert!(grid.data.iter().all(|v| v.is_finite()));
        // The exact f64 encoding must reproduce the grid bit for bit.
        assert_eq!(InlineGrid::encode(&grid).decode().unwrap(), grid);
    }
});

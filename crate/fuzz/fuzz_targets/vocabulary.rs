#![no_main]

use bmr_cli::ingest::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(vocab) = serde_json::from_slice::<Vocabulary>(data) else {
        return;
    };
    if let Ok(vocab) = vocab.checked() {
        for id in 5..vocab.len() as u32 {
            let word = vocab.word(id).unwrap();
            assert_eq!(vocab.encode(word), vec![id]);
        }
    }
});

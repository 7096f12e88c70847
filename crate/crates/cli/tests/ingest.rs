use std::path::Path;

use bmr_cli::commands::synth_cmd;
use bmr_cli::ingest::*;
use bmr_core::{synth_corpus, CleanRules, Grid, RawNews, SynthSpec};
use proptest::prelude::*;

fn opts(h: usize, w: usize, min_side: usize) -> IngestOptions {
    IngestOptions {
        image_h: h,
        image_w: w,
        rules: CleanRules {
            min_side,
            ..CleanRules::new(h, w)
        },
        require_labels: true,
    }
}

fn round_trip(set: &Dataset, vocab: &Vocabulary, o: &IngestOptions) -> Dataset {
    let mut buf = Vec::new();
    write_jsonl(set, vocab, &mut buf).unwrap();
    let records = parse_jsonl(buf.as_slice()).unwrap();
    encode_records(&records, vocab, Path::new(""), o).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn written_datasets_read_back_identically(
        items in prop::collection::vec(
            (prop::collection::vec(-1.0e3f64..1.0e3, 12), prop::collection::vec(5u32..20, 5..10), 0u8..2),
            1..6,
        )
    ) {
        let vocab = synthetic_vocabulary(20);
        let o = opts(3, 4, 3);
        let set = Dataset {
            ids: (0..items.len()).map(|i| format!("r{i}")).collect(),
            news: items
                .into_iter()
                .map(|(px, text, label)| RawNews { image: Grid::new(3, 4, px).unwrap(), text, label: Some(label) })
                .collect(),
        };
        prop_assert_eq!(round_trip(&set, &vocab, &o), set);
    }
}

#[test]
fn cleaned_items_survive_the_cycle() {
    let vocab = synthetic_vocabulary(12);
    let o = opts(4, 4, 4);
    let records = parse_jsonl(
        concat!(
            r#"{"id": "a", "text": "w5 w6", "image": null, "label": 0}"#,
            "\n",
            r#"{"id": "b", "text": "w5 w6 w7 w8 w9 zzz", "image": null, "label": 1}"#,
            "\n"
        )
        .as_bytes(),
    )
    .unwrap();
    let set = encode_records(&records, &vocab, Path::new(""), &o).unwrap();
    assert_eq!(set.news[0].text, vec![2, 3, 4]);
    assert_eq!(set.news[1].text, vec![5, 6, 7, 8, 9, 1]);
    assert_eq!(round_trip(&set, &vocab, &o), set);
}

#[test]
fn synthetic_files_ingest_to_the_generated_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n: 30,
        image_h: 8,
        image_w: 8,
        vocab: 32,
        topics: 4,
        period: 2,
        class_words: 4,
        ..SynthSpec::default()
    };
    synth_cmd(&spec, 5, dir.path()).unwrap();
    let corpus = synth_corpus(&spec, 5).unwrap();
    let vocab: Vocabulary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("vocab.json")).unwrap()).unwrap();
    assert_eq!(vocab, synthetic_vocabulary(32));
    let o = opts(8, 8, 8);
    assert_eq!(
        ingest(&dir.path().join("train.jsonl"), &vocab, &o).unwrap().news,
        corpus.train
    );
    assert_eq!(
        ingest(&dir.path().join("test.jsonl"), &vocab, &o).unwrap().news,
        corpus.test
    );
}

#[test]
fn rasters_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut pgm = b"P5\n3 2\n255\n".to_vec();
    pgm.extend([0u8, 51, 102, 153, 204, 255]);
    std::fs::write(dir.path().join("a.pgm"), pgm).unwrap();
    image::GrayImage::from_raw(3, 2, vec![255, 0, 255, 0, 255, 0])
        .unwrap()
        .save(dir.path().join("b.png"))
        .unwrap();
    let jsonl = dir.path().join("news.jsonl");
    std::fs::write(
        &jsonl,
        concat!(
            r#"{"id": "a", "text": "x", "image": "a.pgm", "label": 0}"#,
            "\n",
            r#"{"id": "b", "text": "x", "image": "b.png", "label": 1}"#,
            "\n"
        ),
    )
    .unwrap();
    let set = ingest(&jsonl, &synthetic_vocabulary(8), &opts(2, 3, 2)).unwrap();
    let expect = |v: &[f64]| v.iter().map(|x| x / 255.0).collect::<Vec<_>>();
    for (got, want) in set.news[0]
        .image
        .data
        .iter()
        .zip(expect(&[0.0, 51.0, 102.0, 153.0, 204.0, 255.0]))
    {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert_eq!(set.news[1].image.data, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);

    let resized = ingest(&jsonl, &synthetic_vocabulary(8), &opts(4, 6, 2)).unwrap();
    assert_eq!((resized.news[0].image.height, resized.news[0].image.width), (4, 6));
}

#[test]
fn bad_inputs_name_their_line_or_record() {
    let dir = tempfile::tempdir().unwrap();
    let jsonl = dir.path().join("news.jsonl");
    std::fs::write(
        &jsonl,
        "{\"id\": \"ok\", \"text\": \"x\", \"image\": null, \"label\": 0}\n{not json\n",
    )
    .unwrap();
    let err = ingest(&jsonl, &synthetic_vocabulary(8), &opts(2, 2, 1))
        .unwrap_err()
        .to_string();
    assert!(err.contains("line 2"), "{err}");

    std::fs::write(
        &jsonl,
        r#"{"id": "gone", "text": "x", "image": "missing.png", "label": 0}"#,
    )
    .unwrap();
    let err = ingest(&jsonl, &synthetic_vocabulary(8), &opts(2, 2, 1))
        .unwrap_err()
        .to_string();
    assert!(err.contains("`gone`"), "{err}");

    std::fs::write(&jsonl, r#"{"id": "u", "text": "x", "image": null, "label": null}"#).unwrap();
    let err = ingest(&jsonl, &synthetic_vocabulary(8), &opts(2, 2, 1))
        .unwrap_err()
        .to_string();
    assert!(err.contains("label"), "{err}");
}

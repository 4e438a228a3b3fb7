use layerprobe::embedding_io::{
    read_embeddings, write_archive_extras, write_embeddings, EmbeddingArchive, EmbeddingManifest, EmbeddingRecord,
    MANIFEST_FILE, VECTORS_FILE,
};
use layerprobe::data::Vocabulary;
use layerprobe::nn::DecoderHead;
use layerprobe::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const HEADER: u64 = 12;

fn stride(dim: usize) -> u64 {
    4 + 2 + 4 + 4 * dim as u64
}

fn random_records(n: usize, layers: u16, dim: usize, vocab: u32, seed: u64) -> Vec<EmbeddingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| EmbeddingRecord {
            probe_index: (i / layers as usize) as u32,
            layer_index: 1 + (i % layers as usize) as u16,
            gold_token_id: rng.random_range(0..vocab),
            vector: (0..dim).map(|_| f32::from_bits(rng.random_range(0..0x7f00_0000u32)) * if rng.random() { 1.0 } else { -1.0 }).collect(),
        })
        .collect()
}

fn manifest(layers: usize, dim: usize) -> EmbeddingManifest {
    EmbeddingManifest::new("toy", layers, dim, 50, "trex")
}

#[test]
fn thousand_records_round_trip_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let records = random_records(1000, 4, 16, 50, 1);
    let (written, paths) = write_embeddings(&manifest(4, 16), &records, dir.path()).unwrap();
    assert_eq!(written.record_count, 1000);
    let bytes = std::fs::read(&paths.vectors).unwrap();
    assert_eq!(bytes.len() as u64, HEADER + 1000 * stride(16));
    assert_eq!(hex::encode(Sha256::digest(&bytes)), written.vectors_sha256);

    let (read, stream) = read_embeddings(dir.path()).unwrap();
    assert_eq!(read, written);
    let back: Vec<EmbeddingRecord> = stream.collect::<Result<_, _>>().unwrap();
    assert_eq!(back.len(), records.len());
    for (a, b) in records.iter().zip(&back) {
        assert_eq!((a.probe_index, a.layer_index, a.gold_token_id), (b.probe_index, b.layer_index, b.gold_token_id));
        assert!(a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let archive = EmbeddingArchive::open(dir.path()).unwrap();
    assert_eq!(archive.record_at(777).unwrap(), records[777]);
    assert!(archive.record_at(1000).is_err());
}

#[test]
fn manifest_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (written, paths) = write_embeddings(&manifest(2, 3), &random_records(6, 2, 3, 50, 2), dir.path()).unwrap();
    let text = std::fs::read_to_string(paths.manifest).unwrap();
    let parsed: EmbeddingManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, written);
}

#[test]
fn flipped_byte_fails_digest() {
    let dir = tempfile::tempdir().unwrap();
    let (written, paths) = write_embeddings(&manifest(4, 8), &random_records(40, 4, 8, 50, 3), dir.path()).unwrap();
    let mut bytes = std::fs::read(&paths.vectors).unwrap();
    let at = (HEADER + 17 * stride(8) + 11) as usize;
    bytes[at] ^= 0x01;
    std::fs::write(&paths.vectors, &bytes).unwrap();
    let recomputed = hex::encode(Sha256::digest(&bytes));
    assert_ne!(recomputed, written.vectors_sha256);
    match EmbeddingArchive::open(dir.path()) {
        Err(Error::DigestMismatch { expected, computed }) => {
            assert_eq!(expected, written.vectors_sha256);
            assert_eq!(computed, recomputed);
        }
        other => panic!("expected digest mismatch, got {other:?}"),
    }
}

#[test]
fn truncation_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let (_, paths) = write_embeddings(&manifest(2, 5), &random_records(20, 2, 5, 50, 4), dir.path()).unwrap();
    let bytes = std::fs::read(&paths.vectors).unwrap();
    // Cut in the middle of record 13.
    let cut = (HEADER + 13 * stride(5) + 7) as usize;
    std::fs::write(&paths.vectors, &bytes[..cut]).unwrap();
    match read_embeddings(dir.path()) {
        Err(Error::Truncated { record, offset }) => {
            assert_eq!(record, 13);
            assert_eq!(offset, HEADER + 13 * stride(5));
        }
        Err(e) => panic!("expected truncation, got {e}"),
        Ok(_) => panic!("expected truncation"),
    }
}

#[test]
fn empty_archive_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = write_embeddings(&manifest(4, 8), &[], dir.path()).unwrap();
    assert_eq!(m.record_count, 0);
    let (_, stream) = read_embeddings(dir.path()).unwrap();
    assert_eq!(stream.count(), 0);
}

#[test]
fn base_sized_archive_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let records = random_records(24, 12, 768, 30522, 5);
    let m = EmbeddingManifest::new("bert-base-uncased", 12, 768, 30522, "google_re");
    write_embeddings(&m, &records, dir.path()).unwrap();
    let archive = EmbeddingArchive::open(dir.path()).unwrap();
    assert_eq!((archive.manifest().num_layers, archive.manifest().hidden_dim), (12, 768));
    assert_eq!(archive.records().unwrap().count(), 24);
}

#[test]
fn invalid_records_leave_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = random_records(4, 2, 3, 50, 6);
    records[2].vector[1] = f32::NAN;
    assert!(write_embeddings(&manifest(2, 3), &records, dir.path()).is_err());
    records[2].vector[1] = 0.0;
    records[3].gold_token_id = 50;
    assert!(write_embeddings(&manifest(2, 3), &records, dir.path()).is_err());
    records[3].gold_token_id = 1;
    records[0].layer_index = 3;
    assert!(write_embeddings(&manifest(2, 3), &records, dir.path()).is_err());
    assert!(!dir.path().join(MANIFEST_FILE).exists());
    assert!(!dir.path().join(VECTORS_FILE).exists());
}

#[test]
fn extras_carry_vocabulary_and_head() {
    let dir = tempfile::tempdir().unwrap();
    write_embeddings(&manifest(1, 4), &[], dir.path()).unwrap();
    let vocab = Vocabulary::from_corpus(["a b c"], 1);
    let head = DecoderHead::random(4, vocab.len(), 9);
    write_archive_extras(dir.path(), &vocab, Some(&head)).unwrap();
    let archive = EmbeddingArchive::open(dir.path()).unwrap();
    assert_eq!(archive.vocabulary().unwrap(), vocab);
    let loaded = archive.pretrained_head().unwrap().unwrap();
    // Stored as f32.
    let max_err = loaded.output.weight.iter().zip(head.output.weight.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(max_err < 1e-7);
}

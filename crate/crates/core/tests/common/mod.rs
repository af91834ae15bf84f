#![allow(dead_code)]

use mlkg::autodiff::Mat;
use mlkg::corpus::{ChunkRecord, CorpusBundle, DocumentRecord, TripleRecord};
use mlkg::params::{ModelConfig, QsgnnParameters};
use rand::seq::SliceRandom;
use rand::Rng;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "pu", "ra", "si", "to", "vu", "ze", "ba", "do", "fi", "gu", "he", "jo", "ku", "le", "mo", "ni",
    "po", "ru", "sa", "te", "vi", "wo", "xa", "yu", "zo", "qe",
];

/// Distinct pronounceable token for every index.
pub fn word(mut index: usize) -> String {
    let base = SYLLABLES.len();
    let mut out = String::new();
    for _ in 0..3 {
        out.push_str(SYLLABLES[index % base]);
        index /= base;
    }
    out
}

/// Random valid bundle with at most `max_docs` documents, `max_chunks`
/// chunks and `max_entities` distinct entity names.
pub fn random_bundle(rng: &mut impl Rng, max_docs: usize, max_chunks: usize, max_entities: usize) -> CorpusBundle {
    let mut b = CorpusBundle::default();
    let docs = rng.gen_range(1..=max_docs);
    let vocab: Vec<String> = (0..40).map(word).collect();
    let sentence = |rng: &mut dyn rand::RngCore| -> String {
        let len = rng.gen_range(2..7);
        (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect::<Vec<_>>().join(" ")
    };
    let mut budget = max_chunks.max(docs);
    for d in 0..docs {
        let remaining_docs = docs - d - 1;
        let m = rng.gen_range(1..=3).min(budget - remaining_docs);
        budget -= m;
        let id = format!("doc{d}");
        b.documents.push(DocumentRecord { doc_id: id.clone(), title: word(100 + d), text: sentence(rng) });
        for p in 0..m {
            b.chunks.push(ChunkRecord { chunk_id: format!("{id}#{p}"), doc_id: id.clone(), position: p, text: sentence(rng) });
        }
    }
    let names: Vec<String> = (0..max_entities).map(|i| format!("Entity {}", word(200 + i))).collect();
    let triples = rng.gen_range(0..=2 * max_entities);
    for _ in 0..triples {
        let c = b.chunks.choose(rng).unwrap().clone();
        b.triples.push(TripleRecord {
            subject: names[rng.gen_range(0..names.len())].clone(),
            predicate: word(rng.gen_range(300..306)),
            object: names[rng.gen_range(0..names.len())].clone(),
            chunk_id: c.chunk_id,
            doc_id: c.doc_id,
        });
    }
    b.chunks.shuffle(rng);
    b
}

pub fn set(params: &mut QsgnnParameters, name: &str, value: Mat) {
    let i = params.index_of(name).unwrap_or_else(|| panic!("no tensor {name}"));
    assert_eq!(params.tensors[i].dim(), value.dim(), "{name}");
    params.tensors[i] = value;
}

/// Identity projections everywhere: square maps are `I`, concatenated key
/// maps are `[I; I]`, biases zero, gains one.
pub fn identity_params(n: usize, layers: usize) -> QsgnnParameters {
    let mut p = QsgnnParameters::zeros(ModelConfig::new(n, n, layers)).unwrap();
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for name in names {
        let i = p.index_of(&name).unwrap();
        let (r, c) = p.tensors[i].dim();
        if name.ends_with("norm_gain") {
            p.tensors[i] = Mat::ones((1, c));
        } else if r == c {
            p.tensors[i] = Mat::eye(n);
        } else if r == 2 * c {
            p.tensors[i] = ndarray::concatenate![ndarray::Axis(0), Mat::eye(n), Mat::eye(n)];
        }
    }
    p
}

/// Every tensor (biases and gains included) drawn at random so no unit
/// sits exactly at a ReLU kink or produces an exactly-zero row.
pub fn random_params(config: ModelConfig, rng: &mut impl Rng) -> QsgnnParameters {
    let mut p = QsgnnParameters::init(config, rng).unwrap();
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for name in names {
        let i = p.index_of(&name).unwrap();
        if name.ends_with("norm_gain") {
            p.tensors[i].mapv_inplace(|_| rng.gen_range(0.5..1.5));
        } else if name.ends_with("bias") {
            p.tensors[i].mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
    }
    p
}

/// Twelve documents with disjoint vocabularies except for the bridge
/// entities linking document `i` to document `i + 1`.
pub fn overfit_corpus() -> CorpusBundle {
    let mut b = CorpusBundle::default();
    let w = |doc: usize, k: usize| word(doc * 20 + k);
    let bridge = |doc: usize| format!("{} {}", w(doc, 0), w(doc, 1));
    for d in 0..12 {
        let id = format!("doc{d:02}");
        let head = w(d, 2);
        let rel = w(d, 3);
        let mut sentences = vec![(format!("{head} {rel} {}.", bridge(d)), (head.clone(), rel.clone(), bridge(d)))];
        if d > 0 {
            let rel2 = w(d, 4);
            let tail = w(d, 5);
            sentences.push((format!("{} {rel2} {tail}.", bridge(d - 1)), (bridge(d - 1), rel2, tail)));
        }
        let filler = format!("{} {} {} {}.", w(d, 6), w(d, 7), w(d, 8), w(d, 9));
        let text = sentences.iter().map(|s| s.0.clone()).chain(std::iter::once(filler.clone())).collect::<Vec<_>>().join(" ");
        b.documents.push(DocumentRecord { doc_id: id.clone(), title: w(d, 10), text });
        for (p, (sentence, (s, r, o))) in sentences.iter().enumerate() {
            let chunk_id = format!("{id}#{p}");
            b.chunks.push(ChunkRecord { chunk_id: chunk_id.clone(), doc_id: id.clone(), position: p, text: sentence.clone() });
            b.triples.push(TripleRecord {
                subject: s.clone(),
                predicate: r.clone(),
                object: o.clone(),
                chunk_id,
                doc_id: id.clone(),
            });
        }
        let p = sentences.len();
        b.chunks.push(ChunkRecord { chunk_id: format!("{id}#{p}"), doc_id: id.clone(), position: p, text: filler });
    }
    b
}

const PREDICATES: &[&str] = &["founded", "visited", "married", "painted", "governed", "studied", "designed", "named"];

/// Sixty documents: thirty long multi-topic documents linked by bridge
/// entities and thirty short distractors that repeat names from the chains.
pub fn distractor_corpus(seed: u64) -> CorpusBundle {
    distractor_corpus_with(seed, 60, 6)
}

/// `bridges` chains over thirty long documents, each padded with `filler`
/// unrelated chunks, plus thirty distractors.
pub fn distractor_corpus_with(seed: u64, bridges: usize, filler: usize) -> CorpusBundle {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gold = 30;
    let mut b = CorpusBundle::default();
    let vocab: Vec<String> = (1000..1600).map(word).collect();
    let mut facts: Vec<Vec<(String, String, String)>> = vec![Vec::new(); gold];
    let mut names = Vec::new();
    for k in 0..bridges {
        let source = k % gold;
        let target = (source + 1 + rng.gen_range(0..gold - 1)) % gold;
        let bridge = word(2000 + k);
        let head = word(3000 + k);
        let tail = word(4000 + k);
        let p = |rng: &mut rand_chacha::ChaCha8Rng| PREDICATES[rng.gen_range(0..PREDICATES.len())].to_string();
        facts[source].push((head.clone(), p(&mut rng), bridge.clone()));
        facts[target].push((bridge.clone(), p(&mut rng), tail.clone()));
        names.extend([bridge, head, tail]);
    }
    let sentence = |rng: &mut rand_chacha::ChaCha8Rng, len: usize| -> String {
        (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].as_str()).collect::<Vec<_>>().join(" ")
    };
    for (d, doc_facts) in facts.iter().enumerate() {
        let id = format!("g{d:02}");
        let mut chunks: Vec<(String, Option<(String, String, String)>)> = Vec::new();
        for f in doc_facts {
            chunks.push((format!("{} {} {} {}.", f.0, f.1, f.2, sentence(&mut rng, 3)), Some(f.clone())));
        }
        for _ in 0..filler {
            chunks.push((format!("{}.", sentence(&mut rng, 10)), None));
        }
        chunks.shuffle(&mut rng);
        push_document(&mut b, &id, &word(5000 + d), chunks);
    }
    for d in 0..60 - gold {
        let id = format!("x{d:02}");
        let picked: Vec<&String> = names.choose_multiple(&mut rng, 3).collect();
        let text = format!(
            "{} {} {} {} {}.",
            picked[0],
            PREDICATES[rng.gen_range(0..PREDICATES.len())],
            picked[1],
            picked[2],
            sentence(&mut rng, 2)
        );
        push_document(&mut b, &id, &word(6000 + d), vec![(text, None)]);
    }
    b
}

pub fn push_document(b: &mut CorpusBundle, id: &str, title: &str, chunks: Vec<(String, Option<(String, String, String)>)>) {
    let text = chunks.iter().map(|c| c.0.as_str()).collect::<Vec<_>>().join(" ");
    b.documents.push(DocumentRecord { doc_id: id.to_string(), title: title.to_string(), text });
    for (p, (chunk, fact)) in chunks.into_iter().enumerate() {
        let chunk_id = format!("{id}#{p}");
        if let Some((s, r, o)) = fact {
            b.triples.push(TripleRecord {
                subject: s,
                predicate: r,
                object: o,
                chunk_id: chunk_id.clone(),
                doc_id: id.to_string(),
            });
        }
        b.chunks.push(ChunkRecord { chunk_id, doc_id: id.to_string(), position: p, text: chunk });
    }
}

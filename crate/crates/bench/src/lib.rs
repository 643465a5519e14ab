//! Fixtures shared by the benchmarks.

use hpadapt::data::{generate, Corpus, CorpusSpec, Domain, Split, SplitCounts, Utterance};
use hpadapt::supernet::{ArchSpace, SpaceConfig};

/// Desk-sized space and a small corpus with default utterance lengths.
pub fn fixture() -> (ArchSpace, Corpus) {
    let mut spec = CorpusSpec::default();
    spec.source_counts = SplitCounts::new(20, 4, 4);
    spec.target_counts = SplitCounts::new(20, 4, 4);
    let corpus = generate(&spec).expect("default spec is valid");
    (SpaceConfig::desk().build().expect("desk space is valid"), corpus)
}

pub fn first(corpus: &Corpus, domain: Domain, n: usize) -> Vec<&Utterance> {
    corpus.select(domain, Split::Train).into_iter().take(n).collect()
}

//! Long-tailed datasets: imbalance profiles, synthetic mixtures, corpus
//! subsampling, frequency splits and batch samplers.

mod corpus;
mod dataset;
mod profile;
mod sampler;
mod split;

pub use corpus::{
    cache_root, ensure_cached, load_cached, read_corpus, write_corpus, CachedDataset, DataSource, DatasetRecipe,
    CACHE_ENV, CORPUS_FORMAT, DEFAULT_CACHE_DIR,
};
pub use dataset::{
    hflip, subsample_corpus, synthesize_mixture, synthesize_mixture_as, LongTailDataset, MixtureSpec, SampleShape,
};
pub use profile::{build_profile, realized_imbalance, ImbalanceProfile, ProfileKind};
pub use sampler::{BatchSampler, SamplingMode};
pub use split::{split_classes, ClassSplit, SplitGroup, FEW_BELOW, MANY_ABOVE};

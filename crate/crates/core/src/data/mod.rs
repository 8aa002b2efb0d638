//! Omniglot ingestion, preprocessing, augmentation, damage and caching.

mod cache;
mod damage;
mod dataset;
mod omniglot;
mod preprocess;
pub mod synthetic;

pub use cache::{read_cache, read_cache_header, write_cache, CacheHeader, CACHE_MAGIC, CACHE_VERSION};
pub use damage::{apply_damage, damage_image, DamagePhase, DamageRule, DamageSchedule, DamagedView};
pub use dataset::{rotate90, ClassInfo, Dataset, ImageSource, Split};
pub use omniglot::{
    ingest, load_raw, prepare_split, IngestMode, Omniglot, RawClass, RawImage, BACKGROUND_ALPHABETS,
    EVALUATION_ALPHABETS, EXAMPLES_PER_CLASS, RAW_SIDE,
};
pub use preprocess::{area_resize, nearest_resize, preprocess, subtract_mean};

//! Objective evaluation: token error rate from a rule-based recognizer and
//! speaker similarity from a reference embedder, aggregated per system.

pub mod embedding;
pub mod metrics;
pub mod recognizer;
pub mod system;

pub use embedding::{cosine, embed_speaker, secs, SpeakerEmbedder, SpeakerEmbedding};
pub use metrics::{cer, edit_distance, mean_std};
pub use recognizer::{recognize, Recognizer};
pub use system::{
    comparison_table, evaluate_pairs, evaluate_system, load_eval_items, sample_pairs, Converter, EvalItem, EvalReport,
    IdentityConverter, PairRecord, SystemSummary, IDENTITY_SYSTEM, PAIRS_FILE, REPORT_FILE, TABLE_FILE,
};

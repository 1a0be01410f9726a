//! Dataset manifests, word-level tokenizer, synthetic corpus generation, and
//! the mixed general/medical batch sampler.

mod manifest;
mod sampler;
mod synth;
mod tokenizer;

pub use manifest::{load_manifest, write_manifest, CaptionSample, Domain, Manifest, Split};
pub use sampler::{sample_batches, BatchStream, MixSpec};
pub use synth::{
    sample_medical_scene,
    draw_mark, generate_probe_set, generate_synthetic_corpus, GeneratorConfig, MedicalScene,
    ProbeSample, MARK_NAMES, REGION_NAMES,
};
pub use tokenizer::{normalize as normalize_text, Tokenizer, BOS_ID, CLS_ID, EOS_ID, PAD_ID, UNK_ID};

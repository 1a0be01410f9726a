//! Checkpoint format: a directory holding `manifest.json` (version, config
//! echo, blob index, fingerprints, RNG states) plus `blobs.bin` of raw
//! 32-bit little-endian floats, row-major, in index order.
//!
//! Writes go to a sibling temp directory and land with a single rename.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fingerprint::{hex, mat_from_f32_le_bytes, to_f32_le_bytes};
use crate::tensor::Mat;
use crate::{Error, Result};

pub const CKPT_VERSION: &str = "msmedcap-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    /// u128 serialized as a string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed_hex: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed_hex.len() != 64 {
            return Err(Error::CorruptBlob("rng seed must be 32 bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in seed.iter_mut().enumerate() {
            let byte = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::CorruptBlob("bad rng seed hex".into()))?;
            *chunk = byte;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::CorruptBlob("bad rng word_pos".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobEntry {
    pub group: String,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: String,
    pub stage: String,
    pub step: u64,
    /// Full resolved run config at save time.
    pub config: serde_json::Value,
    pub tokenizer_vocab: Vec<String>,
    pub tokenizer_max_tokens: usize,
    pub blobs: Vec<BlobEntry>,
    /// Component name -> content digest for everything frozen.
    pub fingerprints: BTreeMap<String, String>,
    /// Named RNG streams (per branch / stage).
    pub rng: BTreeMap<String, RngState>,
}

/// Blobs keyed by `(group, name)`; groups are `param`, `opt_m`, `opt_v`.
pub type BlobMap = BTreeMap<(String, String), Mat>;

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blobs: BlobMap,
}

impl Checkpoint {
    pub fn params(&self) -> BTreeMap<String, Mat> {
        self.blobs
            .iter()
            .filter(|((g, _), _)| g == "param")
            .map(|((_, n), m)| (n.clone(), m.clone()))
            .collect()
    }

    pub fn group(&self, group: &str) -> BTreeMap<String, Mat> {
        self.blobs
            .iter()
            .filter(|((g, _), _)| g == group)
            .map(|((_, n), m)| (n.clone(), m.clone()))
            .collect()
    }
}

pub struct SaveSpec<'a> {
    pub stage: &'a str,
    pub step: u64,
    pub config: serde_json::Value,
    pub tokenizer_vocab: Vec<String>,
    pub tokenizer_max_tokens: usize,
    pub fingerprints: BTreeMap<String, String>,
    pub rng: BTreeMap<String, RngState>,
    /// `(group, name, tensor)`; sorted on write.
    pub blobs: Vec<(String, String, Mat)>,
}

pub fn save_checkpoint(dir: &Path, spec: SaveSpec) -> Result<()> {
    let mut entries: Vec<(String, String, Mat)> = spec.blobs;
    entries.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));

    let mut index = Vec::with_capacity(entries.len());
    let mut payload: Vec<u8> = Vec::new();
    for (group, name, mat) in &entries {
        let bytes = to_f32_le_bytes(mat);
        index.push(BlobEntry {
            group: group.clone(),
            name: name.clone(),
            rows: mat.nrows(),
            cols: mat.ncols(),
            offset: payload.len() as u64,
            len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let meta = CheckpointMeta {
        version: CKPT_VERSION.to_string(),
        stage: spec.stage.to_string(),
        step: spec.step,
        config: spec.config,
        tokenizer_vocab: spec.tokenizer_vocab,
        tokenizer_max_tokens: spec.tokenizer_max_tokens,
        blobs: index,
        fingerprints: spec.fingerprints,
        rng: spec.rng,
    };

    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let meta_text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(tmp.join("manifest.json"), meta_text + "\n")
        .map_err(|e| Error::io(tmp.join("manifest.json"), e))?;
    fs::write(tmp.join("blobs.bin"), &payload).map_err(|e| Error::io(tmp.join("blobs.bin"), e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join("manifest.json");
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "checkpoint manifest {}",
            meta_path.display()
        )));
    }
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::CorruptBlob(format!("manifest.json: {e}")))?;
    if meta.version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            found: meta.version,
            expected: CKPT_VERSION.to_string(),
        });
    }
    let blob_path = dir.join("blobs.bin");
    let payload = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut blobs = BlobMap::new();
    for e in &meta.blobs {
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        if end > payload.len() {
            return Err(Error::CorruptBlob(format!(
                "blob {}/{} extends past end of blobs.bin ({} > {})",
                e.group,
                e.name,
                end,
                payload.len()
            )));
        }
        let mat = mat_from_f32_le_bytes(&payload[start..end], e.rows, e.cols).ok_or_else(|| {
            Error::CorruptBlob(format!(
                "blob {}/{}: length {} does not match shape {}x{}",
                e.group, e.name, e.len, e.rows, e.cols
            ))
        })?;
        blobs.insert((e.group.clone(), e.name.clone()), mat);
    }
    Ok(Checkpoint { meta, blobs })
}

/// Compares stored fingerprints against live component digests.
pub fn verify_fingerprints(
    stored: &BTreeMap<String, String>,
    live: &BTreeMap<String, String>,
) -> Result<()> {
    for (component, live_fp) in live {
        if let Some(stored_fp) = stored.get(component) {
            if stored_fp != live_fp {
                return Err(Error::FingerprintMismatch {
                    component: component.clone(),
                    stored: stored_fp.clone(),
                    live: live_fp.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Maps a fully qualified parameter name to the component the freezing
/// contract talks about.
pub fn component_of(name: &str) -> String {
    for branch in ["clip", "sam"] {
        let prefix = format!("qf_{branch}.");
        if let Some(rest) = name.strip_prefix(&prefix) {
            if rest == "query_bank" {
                return format!("query_bank_{branch}");
            }
            if rest.starts_with("out_proj.") {
                return format!("proj_{branch}");
            }
            return format!("qformer_{branch}");
        }
    }
    if let Some(dot) = name.find('.') {
        name[..dot].to_string()
    } else {
        name.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn sample_spec(stage: &str) -> SaveSpec<'_> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            Mat::from_shape_fn((r, c), |_| (rng.random::<f64>() - 0.5) as f32 as f64)
        };
        SaveSpec {
            stage,
            step: 42,
            config: serde_json::json!({"seed": 7}),
            tokenizer_vocab: vec!["<pad>".into(), "<bos>".into()],
            tokenizer_max_tokens: 32,
            fingerprints: [("enc_general".to_string(), "abc".to_string())].into(),
            rng: [(
                "finetune".to_string(),
                RngState::capture(&ChaCha8Rng::seed_from_u64(9)),
            )]
            .into(),
            blobs: vec![
                ("param".into(), "qf_clip.query_bank".into(), mk(2, 3, &mut rng)),
                ("param".into(), "qf_clip.tau".into(), mk(1, 1, &mut rng)),
                ("opt_m".into(), "qf_clip.tau".into(), mk(1, 1, &mut rng)),
            ],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let c1 = dir.path().join("ckpt");
        save_checkpoint(&c1, sample_spec("pretrain")).unwrap();
        let loaded = load_checkpoint(&c1).unwrap();
        let c2 = dir.path().join("ckpt2");
        save_checkpoint(
            &c2,
            SaveSpec {
                stage: &loaded.meta.stage,
                step: loaded.meta.step,
                config: loaded.meta.config.clone(),
                tokenizer_vocab: loaded.meta.tokenizer_vocab.clone(),
                tokenizer_max_tokens: loaded.meta.tokenizer_max_tokens,
                fingerprints: loaded.meta.fingerprints.clone(),
                rng: loaded.meta.rng.clone(),
                blobs: loaded
                    .blobs
                    .iter()
                    .map(|((g, n), m)| (g.clone(), n.clone(), m.clone()))
                    .collect(),
            },
        )
        .unwrap();
        for f in ["manifest.json", "blobs.bin"] {
            assert_eq!(
                fs::read(c1.join(f)).unwrap(),
                fs::read(c2.join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn truncated_blob_is_a_corrupt_blob_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("ckpt");
        save_checkpoint(&c, sample_spec("pretrain")).unwrap();
        let blob_path = c.join("blobs.bin");
        let mut bytes = fs::read(&blob_path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&blob_path, bytes).unwrap();
        match load_checkpoint(&c) {
            Err(Error::CorruptBlob(_)) => {}
            Err(other) => panic!("expected corrupt blob, got {other:?}"),
            Ok(_) => panic!("expected corrupt blob, got success"),
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("ckpt");
        save_checkpoint(&c, sample_spec("pretrain")).unwrap();
        let meta_path = c.join("manifest.json");
        let text = fs::read_to_string(&meta_path)
            .unwrap()
            .replace(CKPT_VERSION, "msmedcap-ckpt-v0");
        fs::write(&meta_path, text).unwrap();
        match load_checkpoint(&c) {
            Err(Error::VersionMismatch { .. }) => {}
            Err(other) => panic!("expected version mismatch, got {other:?}"),
            Ok(_) => panic!("expected version mismatch, got success"),
        }
    }

    #[test]
    fn fingerprint_mismatch_is_distinct() {
        let stored: BTreeMap<String, String> = [("enc".to_string(), "aaa".to_string())].into();
        let live: BTreeMap<String, String> = [("enc".to_string(), "bbb".to_string())].into();
        match verify_fingerprints(&stored, &live) {
            Err(Error::FingerprintMismatch { .. }) => {}
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }
        assert!(verify_fingerprints(&live, &live).is_ok());
    }

    #[test]
    fn rng_state_round_trips_mid_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..17 {
            let _: f64 = rng.random();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        for _ in 0..5 {
            assert_eq!(rng.random::<u64>(), restored.random::<u64>());
        }
    }

    #[test]
    fn component_mapping() {
        assert_eq!(component_of("qf_clip.query_bank"), "query_bank_clip");
        assert_eq!(component_of("qf_sam.out_proj.w"), "proj_sam");
        assert_eq!(component_of("qf_clip.block0.sa.q.w"), "qformer_clip");
        assert_eq!(component_of("qf_sam.tau"), "qformer_sam");
        assert_eq!(component_of("lm.token_embed"), "lm");
        assert_eq!(component_of("enc_general"), "enc_general");
    }
}

//! Writing artifacts under an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use mmdit_core::flow::FlowState;
use mmdit_core::io::encode_matrix;
use mmdit_core::{Matrix, Result};
use serde::Serialize;
use serde_json::{json, Value};

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn bytes(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Pretty JSON with a trailing newline.
    pub fn json(&self, rel: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(rel, text.as_bytes())
    }

    pub fn matrix(&self, rel: &str, m: &Matrix) -> Result<()> {
        self.bytes(rel, &encode_matrix(m))
    }
}

/// FNV-1a over the blob encoding, as a short fingerprint for reports.
pub fn fingerprint(m: &Matrix) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in encode_matrix(m) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn summary(m: &Matrix) -> Value {
    json!({
        "shape": [m.rows(), m.cols()],
        "frobenius": m.frobenius_sq().sqrt(),
        "fingerprint": fingerprint(m),
    })
}

/// Writes every state as `dir/state_NNN.bin` plus `dir/manifest.json`
/// holding the knots, the file list and `meta`.
pub fn dump_trajectory(out: &OutDir, dir: &str, states: &[FlowState], meta: Value) -> Result<String> {
    let mut files = Vec::with_capacity(states.len());
    for (i, s) in states.iter().enumerate() {
        let name = format!("state_{i:03}.bin");
        out.matrix(&format!("{dir}/{name}"), &s.latent)?;
        files.push(name);
    }
    let knots: Vec<f64> = states.iter().map(|s| s.t).collect();
    let manifest = json!({
        "knots": knots,
        "files": files,
        "meta": meta,
    });
    let rel = format!("{dir}/manifest.json");
    out.json(&rel, &manifest)?;
    Ok(rel)
}

/// Keeps `[A-Za-z0-9_-]`, replacing everything else with `_`.
pub fn file_safe(word: &str) -> String {
    word.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_bits() {
        let a = Matrix::random_normal(3, 2, 1);
        let mut b = a.clone();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        b.set(0, 0, b.get(0, 0) + 1e-15);
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn file_safe_words() {
        assert_eq!(file_safe("cat's"), "cat_s");
        assert_eq!(file_safe("<pad>"), "_pad_");
    }
}

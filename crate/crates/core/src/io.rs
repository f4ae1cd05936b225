//! On-disk formats: JSONL datasets, vocabulary manifests and binary
//! checkpoints.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassId, EmbeddingTable, Example, TokenId, TokenRole};
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Ntp,
    Qa,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub context: Vec<TokenId>,
    pub label: ClassId,
    pub kind: ExampleKind,
    pub is_rare: bool,
}

impl DatasetRecord {
    pub fn new(example: &Example, kind: ExampleKind) -> Self {
        Self {
            context: example.context.clone(),
            label: example.label,
            kind,
            is_rare: example.is_rare,
        }
    }

    pub fn example(&self) -> Example {
        Example {
            context: self.context.clone(),
            label: self.label,
            is_rare: self.is_rare,
        }
    }
}

pub fn export_dataset<W: Write>(mut out: W, records: &[DatasetRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a JSONL dataset. Blank lines are skipped. When a table is given,
/// every token must exist in it and every label must be a class it assigns.
pub fn import_dataset<R: BufRead>(input: R, table: Option<&EmbeddingTable>) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| Error::Decode(format!("line {lineno}: {e}")))?;
        if rec.context.is_empty() {
            return Err(Error::Decode(format!("line {lineno}: empty context")));
        }
        if let Some(t) = table {
            if let Some(&bad) = rec.context.iter().find(|&&tok| tok >= t.len()) {
                return Err(Error::Decode(format!(
                    "line {lineno}: token {bad} not in vocabulary of {}",
                    t.len()
                )));
            }
            if rec.label >= t.dim() || t.token_of_class(rec.label).is_none() {
                return Err(Error::Decode(format!(
                    "line {lineno}: label {} is not a token class",
                    rec.label
                )));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabEntry {
    pub token: TokenId,
    pub role: TokenRole,
    pub class: ClassId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabManifest {
    pub dim: usize,
    pub tokens: Vec<VocabEntry>,
}

impl VocabManifest {
    pub fn from_table(table: &EmbeddingTable) -> Self {
        Self {
            dim: table.dim(),
            tokens: table
                .roles()
                .iter()
                .enumerate()
                .map(|(token, &role)| VocabEntry {
                    token,
                    role,
                    class: table.class_of_token(token),
                })
                .collect(),
        }
    }

    pub fn to_table(&self) -> Result<EmbeddingTable> {
        let mut entries = self.tokens.clone();
        entries.sort_by_key(|e| e.token);
        if entries.iter().enumerate().any(|(i, e)| e.token != i) {
            return Err(Error::Decode("token ids must be 0..n without gaps".into()));
        }
        EmbeddingTable::from_assignment(
            self.dim,
            entries.iter().map(|e| e.role).collect(),
            entries.iter().map(|e| e.class).collect(),
        )
    }
}

const MAGIC: &[u8; 4] = b"FLCK";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8 + 8;

/// Model parameters plus a free-form JSON manifest (seeds, config).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub manifest: serde_json::Value,
}

/// Layout, all little-endian: magic `FLCK`, u32 version, u64 d, u64 m,
/// f64 lambda, u64 manifest length, manifest JSON bytes, then W and Z as
/// row-major f64.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ckpt.params;
    let (d, m) = (p.dim(), p.m());
    let manifest = serde_json::to_vec(&ckpt.manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + 8 * (d * m * d + d * d));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&p.lambda().to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for v in p.w().rows().into_iter().flat_map(|r| r.into_iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in p.z().rows().into_iter().flat_map(|r| r.into_iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Decode(format!("truncated {what}")));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn to_usize(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Decode(format!("{what} {v} out of range")))
}

fn read_matrix(bytes: &[u8], rows: usize, cols: usize) -> Array2<f64> {
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("length checked by caller")
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { buf: bytes };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Decode(format!("unsupported version {version}")));
    }
    let d = to_usize(cur.u64("dim")?, "dim")?;
    let m = to_usize(cur.u64("width")?, "width")?;
    let lambda = f64::from_le_bytes(cur.take(8, "lambda")?.try_into().expect("8 bytes"));
    let manifest_len = to_usize(cur.u64("manifest length")?, "manifest length")?;
    let manifest = serde_json::from_slice(cur.take(manifest_len, "manifest")?)
        .map_err(|e| Error::Decode(format!("manifest: {e}")))?;

    let w_len = d
        .checked_mul(m)
        .and_then(|dm| dm.checked_mul(d))
        .ok_or_else(|| Error::Decode("W size overflows".into()))?;
    let z_len = d
        .checked_mul(d)
        .ok_or_else(|| Error::Decode("Z size overflows".into()))?;
    let expected = w_len
        .checked_add(z_len)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Decode("payload size overflows".into()))?;
    if cur.buf.len() != expected {
        return Err(Error::Decode(format!(
            "payload is {} bytes, expected {expected}",
            cur.buf.len()
        )));
    }
    let w = read_matrix(cur.take(w_len * 8, "W")?, d * m, d);
    let z = read_matrix(cur.take(z_len * 8, "Z")?, d, d);
    let params = ModelParams::from_parts(w, z, m, lambda).map_err(|e| Error::Decode(e.to_string()))?;
    Ok(Checkpoint { params, manifest })
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, VocabSpec};
    use crate::model::{init_params, ModelSpec};

    fn corpus() -> Corpus {
        Corpus::generate(
            &VocabSpec {
                n_freq: 4,
                n_rare: 2,
                k: 2,
                r_size: 3,
                dim: 32,
            },
            0.5,
            9,
        )
        .unwrap()
    }

    #[test]
    fn dataset_roundtrip() {
        let c = corpus();
        let mut recs: Vec<_> = c.ntp.iter().map(|e| DatasetRecord::new(e, ExampleKind::Ntp)).collect();
        recs.extend(c.qa.iter().map(|e| DatasetRecord::new(e, ExampleKind::Qa)));
        let mut buf = Vec::new();
        export_dataset(&mut buf, &recs).unwrap();
        let back = import_dataset(&buf[..], Some(&c.table)).unwrap();
        assert_eq!(back, recs);
        assert_eq!(back[0].example(), c.ntp[0]);
    }

    #[test]
    fn dataset_rejects_bad_lines() {
        let c = corpus();
        let bad_token = format!(
            r#"{{"context":[{}],"label":0,"kind":"qa","is_rare":false}}"#,
            c.table.len()
        );
        let cases = [
            "not json",
            r#"{"context":[],"label":0,"kind":"qa","is_rare":false}"#,
            r#"{"context":[0],"label":0,"kind":"other","is_rare":false}"#,
            r#"{"context":[0],"label":0,"kind":"qa","is_rare":false,"x":1}"#,
            r#"{"context":[0],"label":99999,"kind":"qa","is_rare":false}"#,
            bad_token.as_str(),
        ];
        for case in cases {
            let input = format!("\n{case}\n");
            match import_dataset(input.as_bytes(), Some(&c.table)) {
                Err(Error::Decode(msg)) => assert!(msg.starts_with("line 2"), "{msg}"),
                other => panic!("{case}: {other:?}"),
            }
        }
    }

    #[test]
    fn vocab_manifest_roundtrip() {
        let c = corpus();
        let man = VocabManifest::from_table(&c.table);
        let json = serde_json::to_string(&man).unwrap();
        let back: VocabManifest = serde_json::from_str(&json).unwrap();
        let t = back.to_table().unwrap();
        assert_eq!(t.vectors(), c.table.vectors());
        assert_eq!(t.roles(), c.table.roles());

        let mut gap = man.clone();
        gap.tokens[0].token = 999;
        assert!(gap.to_table().is_err());
    }

    fn ckpt() -> Checkpoint {
        Checkpoint {
            params: init_params(
                &ModelSpec {
                    dim: 8,
                    m: 3,
                    lambda: 12.5,
                },
                0.7,
                4,
            )
            .unwrap(),
            manifest: serde_json::json!({"seed": 4, "stage": "II"}),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let c = ckpt();
        let bytes = encode_checkpoint(&c).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.manifest, c.manifest);
        assert_eq!(back.params.lambda().to_bits(), c.params.lambda().to_bits());
        for (a, b) in back.params.w().iter().zip(c.params.w().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.params.z(), c.params.z());
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_rejects_malformed() {
        let bytes = encode_checkpoint(&ckpt()).unwrap();
        for cut in [0, 3, 10, HEADER_LEN, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Decode(_))),
                "cut {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).is_err());
        let mut huge = bytes.clone();
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_checkpoint(&huge).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = std::env::temp_dir().join(format!("factlab-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.ckpt");
        let c = ckpt();
        save_checkpoint(&path, &c).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
        assert!(!dir.join("w.ckpt.tmp").exists());
        fs::remove_dir_all(&dir).unwrap();
    }
}

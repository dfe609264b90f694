//! Per-entity dense feature matrices and their on-disk form.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::cache::Description;
use super::prompt::extract_description;
use super::text_encoder::TextEncoder;
use crate::container::{self, Dtype};
use crate::corpus::{MetadataTable, Vocabulary};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Item,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

/// Rows aligned to a vocabulary. Values are stored at 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub kind: EntityKind,
    pub modality: Modality,
    pub ids: Vec<String>,
    matrix: Array2<f64>,
    /// Rows with no underlying content. For raw feature imports these rows are
    /// all-zero; for generated tables they mark degraded (title-only) items.
    pub absent: Vec<bool>,
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    kind: EntityKind,
    modality: Modality,
    d_feat: usize,
    fingerprint: String,
    ids: Vec<String>,
    absent: Vec<bool>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

impl FeatureTable {
    pub fn new(
        kind: EntityKind,
        modality: Modality,
        ids: Vec<String>,
        matrix: Array2<f64>,
        absent: Vec<bool>,
        fingerprint: String,
    ) -> Result<Self> {
        if matrix.nrows() != ids.len() || absent.len() != ids.len() {
            return Err(Error::Internal(format!(
                "feature table has {} rows, {} ids, {} mask entries",
                matrix.nrows(),
                ids.len(),
                absent.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature table contains a non-finite value".into()));
        }
        Ok(Self {
            kind,
            modality,
            ids,
            matrix: matrix.mapv(|v| v as f32 as f64),
            absent,
            fingerprint,
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d_feat(&self) -> usize {
        self.matrix.ncols()
    }

    /// Check that rows line up with `ids`.
    pub fn check_alignment(&self, ids: &[String]) -> Result<()> {
        if self.ids.as_slice() != ids {
            return Err(Error::format(
                "feature table",
                "row order does not match the interaction vocabulary",
            ));
        }
        Ok(())
    }

    /// Write the matrix container to `path` and the id index to `path.json`.
    pub fn write(&self, path: &Path) -> Result<()> {
        container::write(path, &self.matrix, Dtype::F32)?;
        crate::io::write_json(
            &sidecar_path(path),
            &Sidecar {
                kind: self.kind,
                modality: self.modality,
                d_feat: self.d_feat(),
                fingerprint: self.fingerprint.clone(),
                ids: self.ids.clone(),
                absent: self.absent.clone(),
            },
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (matrix, _) = container::read(path)?;
        let sidecar: Sidecar = crate::io::read_json(&sidecar_path(path))?;
        if sidecar.d_feat != matrix.ncols() {
            return Err(Error::format(path.display().to_string(), "sidecar width disagrees with payload"));
        }
        Self::new(
            sidecar.kind,
            sidecar.modality,
            sidecar.ids,
            matrix,
            sidecar.absent,
            sidecar.fingerprint,
        )
    }

    /// Import precomputed item features (e.g. CNN image embeddings) from a
    /// delimited file of `item_key,f1,f2,...` rows. Items without a row get
    /// an all-zero row and the absence flag.
    pub fn import_delimited(path: &Path, vocab: &Vocabulary, modality: Modality) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.n_items()];
        let mut width = None;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let delim = if line.contains('\t') { '\t' } else { ',' };
            let mut fields = line.split(delim).map(str::trim);
            let key = fields.next().unwrap_or_default();
            let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let values = match values {
                Ok(v) => v,
                Err(_) if idx == 0 => continue,
                Err(e) => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        message: e.to_string(),
                    })
                }
            };
            if *width.get_or_insert(values.len()) != values.len() || values.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: "inconsistent feature width".into(),
                });
            }
            if let Some(i) = vocab.item_index(key) {
                rows[i] = Some(values);
            }
        }
        let width = width.ok_or_else(|| Error::format(path.display().to_string(), "no feature rows"))?;
        let mut matrix = Array2::zeros((vocab.n_items(), width));
        let mut absent = vec![true; vocab.n_items()];
        let mut fp = Fingerprinter::new("imported-features");
        fp.str(&path.display().to_string());
        for (i, row) in rows.iter().enumerate() {
            if let Some(values) = row {
                absent[i] = false;
                for (j, v) in values.iter().enumerate() {
                    matrix[[i, j]] = *v;
                    fp.f64(*v as f32 as f64);
                }
            } else {
                fp.u64(u64::MAX);
            }
        }
        Self::new(
            EntityKind::Item,
            modality,
            vocab.items.to_vec(),
            matrix,
            absent,
            fp.finish(),
        )
    }
}

/// Textual input for one item: `brand. title. description. category`, empty
/// segments dropped.
pub fn textual_input(meta: &crate::corpus::ItemMetadata) -> String {
    [&meta.brand, &meta.title, &meta.description, &meta.category]
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(". ")
}

fn encode_rows(encoder: &dyn TextEncoder, texts: &[String]) -> Result<Array2<f64>> {
    let vectors = encoder.encode_batch(texts)?;
    let d = encoder.dim();
    let mut matrix = Array2::zeros((texts.len(), d));
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(Error::Internal(format!(
                "encoder returned width {} for row {i}, expected {d}",
                v.len()
            )));
        }
        for (j, x) in v.iter().enumerate() {
            matrix[[i, j]] = *x as f64;
        }
    }
    Ok(matrix)
}

/// Encode item text fields. Independent of any vision-language output.
pub fn build_textual_table(
    vocab: &Vocabulary,
    metadata: &MetadataTable,
    encoder: &dyn TextEncoder,
) -> Result<FeatureTable> {
    let texts: Vec<String> = metadata.rows.iter().map(textual_input).collect();
    let mut fp = Fingerprinter::new("textual-features");
    fp.str(&encoder.id());
    for (key, text) in vocab.items.iter().zip(&texts) {
        fp.str(key).str(text);
    }
    let matrix = encode_rows(encoder, &texts)?;
    FeatureTable::new(
        EntityKind::Item,
        Modality::Textual,
        vocab.items.to_vec(),
        matrix,
        vec![false; vocab.n_items()],
        fp.finish(),
    )
}

/// Encode generated descriptions into the visual feature table.
pub fn build_visual_table(
    vocab: &Vocabulary,
    descriptions: &[Description],
    encoder: &dyn TextEncoder,
    marker: Option<&str>,
) -> Result<FeatureTable> {
    let mut ordered: Vec<Option<&Description>> = vec![None; vocab.n_items()];
    for d in descriptions {
        if d.item_index >= vocab.n_items() || vocab.items[d.item_index] != d.item_key {
            return Err(Error::Internal(format!("description for {} is misaligned", d.item_key)));
        }
        ordered[d.item_index] = Some(d);
    }
    if let Some(missing) = ordered.iter().position(Option::is_none) {
        return Err(Error::MissingArtifact {
            what: format!("description for item {}", vocab.items[missing]),
            command: "enrich".into(),
        });
    }
    let ordered: Vec<&Description> = ordered.into_iter().flatten().collect();
    let texts: Vec<String> = ordered
        .iter()
        .map(|d| if d.degraded { d.text.clone() } else { extract_description(&d.text, marker) })
        .collect();
    let mut fp = Fingerprinter::new("visual-features");
    fp.str(&encoder.id()).str(marker.unwrap_or(""));
    for (d, text) in ordered.iter().zip(&texts) {
        fp.str(&d.item_key)
            .str(text)
            .str(&d.model_name)
            .str(&d.template_id)
            .u64(d.prompt_version as u64)
            .str(&d.prompt_hash)
            .u64(d.degraded as u64);
    }
    let matrix = encode_rows(encoder, &texts)?;
    FeatureTable::new(
        EntityKind::Item,
        Modality::Visual,
        vocab.items.to_vec(),
        matrix,
        ordered.iter().map(|d| d.degraded).collect(),
        fp.finish(),
    )
}

/// Both item tables in one call: `(visual, textual)`.
pub fn build_feature_tables(
    vocab: &Vocabulary,
    metadata: &MetadataTable,
    descriptions: &[Description],
    encoder: &dyn TextEncoder,
    marker: Option<&str>,
) -> Result<(FeatureTable, FeatureTable)> {
    Ok((
        build_visual_table(vocab, descriptions, encoder, marker)?,
        build_textual_table(vocab, metadata, encoder)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{InteractionSet, ItemMetadata};
    use crate::enrichment::text_encoder::HashingEncoder;

    fn vocab(n: usize) -> Vocabulary {
        let keys: Vec<(String, String)> = (0..n).map(|i| ("u".to_string(), format!("i{i:03}"))).collect();
        InteractionSet::from_keys(keys.iter().map(|(u, i)| (u.as_str(), i.as_str())))
            .vocab()
            .clone()
    }

    fn description(vocab: &Vocabulary, i: usize, text: &str, version: u32) -> Description {
        Description {
            item_index: i,
            item_key: vocab.items[i].clone(),
            text: text.into(),
            model_name: "stub".into(),
            template_id: "t".into(),
            prompt_version: version,
            prompt_hash: "h".into(),
            created_at: 0,
            degraded: false,
        }
    }

    #[test]
    fn textual_concatenation_drops_empty_segments() {
        let meta = ItemMetadata {
            title: "title".into(),
            ..Default::default()
        };
        assert_eq!(textual_input(&meta), "title");
        let full = ItemMetadata {
            brand: "Acme".into(),
            title: "Mug".into(),
            description: "Holds tea".into(),
            category: "Kitchen".into(),
            image: None,
        };
        assert_eq!(textual_input(&full), "Acme. Mug. Holds tea. Kitchen");
    }

    #[test]
    fn shapes_and_fingerprint_contract() {
        let v = vocab(100);
        let enc = HashingEncoder::new(32).unwrap();
        let mut meta = MetadataTable::empty(100);
        for (i, row) in meta.rows.iter_mut().enumerate() {
            row.title = format!("item {i}");
        }
        let d1: Vec<_> = (0..100).map(|i| description(&v, i, &format!("red thing {i}"), 1)).collect();
        let d2: Vec<_> = (0..100).map(|i| description(&v, i, &format!("red thing {i}"), 2)).collect();
        let (vis1, txt1) = build_feature_tables(&v, &meta, &d1, &enc, None).unwrap();
        let (vis2, txt2) = build_feature_tables(&v, &meta, &d2, &enc, None).unwrap();
        assert_eq!((vis1.n_rows(), txt1.n_rows()), (100, 100));
        assert_eq!(vis1.d_feat(), enc.dim());
        assert_ne!(vis1.fingerprint, vis2.fingerprint);
        assert_eq!(txt1.fingerprint, txt2.fingerprint);
        assert_eq!(vis1.matrix(), vis2.matrix());
    }

    #[test]
    fn missing_description_is_reported() {
        let v = vocab(3);
        let enc = HashingEncoder::new(8).unwrap();
        let d = vec![description(&v, 0, "a", 1), description(&v, 2, "b", 1)];
        assert!(matches!(build_visual_table(&v, &d, &enc, None), Err(Error::MissingArtifact { .. })));
    }

    #[test]
    fn write_read_round_trip() {
        let v = vocab(4);
        let enc = HashingEncoder::new(16).unwrap();
        let table = build_textual_table(&v, &MetadataTable::empty(4), &enc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("textual.vft");
        table.write(&path).unwrap();
        assert_eq!(FeatureTable::read(&path).unwrap(), table);
        assert!(path.with_extension("vft.json").exists());
    }

    #[test]
    fn delimited_import_flags_missing_rows() {
        let v = vocab(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.csv");
        std::fs::write(&path, "item,f0,f1\ni000,1.0,2.0\ni002,3.0,4.0\nunknown,5,6\n").unwrap();
        let t = FeatureTable::import_delimited(&path, &v, Modality::Visual).unwrap();
        assert_eq!(t.absent, vec![false, true, false]);
        assert!(t.matrix().row(1).iter().all(|x| *x == 0.0));
        assert_eq!(t.matrix()[[2, 1]], 4.0);
    }
}

//! Planted block-structure data for smoke tests and demos.
//!
//! Users and items are assigned round-robin to blocks. Each user interacts
//! mostly with items of its own block. Both feature modalities share a
//! noisy block code; the visual modality additionally carries a second,
//! independent block code, while the textual modality pads with noise.

use std::fs;
use std::path::Path;

use base64::Engine as _;
use ndarray::{s, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionSet, Vocabulary};
use crate::enrichment::{EntityKind, FeatureTable, Modality};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_blocks: usize,
    pub in_block_per_user: usize,
    pub random_per_user: usize,
    /// Width of the code shared by both modalities.
    pub shared_dim: usize,
    /// Width of the visual-only code and of the textual noise padding.
    pub specific_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 300,
            n_blocks: 20,
            in_block_per_user: 6,
            random_per_user: 4,
            shared_dim: 16,
            specific_dim: 16,
            feature_noise: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub interactions: InteractionSet,
    pub visual: FeatureTable,
    pub textual: FeatureTable,
    pub user_block: Vec<usize>,
    pub item_block: Vec<usize>,
}

pub fn user_key(u: usize) -> String {
    format!("user{u:05}")
}

pub fn item_key(i: usize) -> String {
    format!("item{i:05}")
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

pub fn planted_blocks(config: &SyntheticConfig) -> Result<SyntheticData> {
    let c = config;
    if c.n_blocks == 0 || c.n_users < c.n_blocks || c.n_items < c.n_blocks {
        return Err(Error::Config("need at least one user and item per block".into()));
    }
    let block_items = c.n_items / c.n_blocks;
    if c.in_block_per_user > block_items || c.in_block_per_user + c.random_per_user > c.n_items {
        return Err(Error::Config(format!(
            "{} in-block interactions requested but blocks hold {block_items} items",
            c.in_block_per_user
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let user_block: Vec<usize> = (0..c.n_users).map(|u| u % c.n_blocks).collect();
    let item_block: Vec<usize> = (0..c.n_items).map(|i| i % c.n_blocks).collect();
    let members: Vec<Vec<u32>> = (0..c.n_blocks)
        .map(|b| (0..c.n_items).filter(|&i| item_block[i] == b).map(|i| i as u32).collect())
        .collect();

    let mut pairs = Vec::new();
    for (u, &b) in user_block.iter().enumerate() {
        let block = &members[b];
        let mut chosen: Vec<u32> = sample(&mut rng, block.len(), c.in_block_per_user)
            .into_iter()
            .map(|k| block[k])
            .collect();
        while chosen.len() < c.in_block_per_user + c.random_per_user {
            let i = rng.random_range(0..c.n_items as u32);
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
        pairs.extend(chosen.into_iter().map(|i| (u as u32, i)));
    }
    let vocab = Vocabulary {
        users: (0..c.n_users).map(user_key).collect(),
        items: (0..c.n_items).map(item_key).collect(),
    };
    let interactions = InteractionSet::from_pairs(vocab.clone(), pairs);

    let shared_codes = gaussian(&mut rng, c.n_blocks, c.shared_dim);
    let visual_codes = gaussian(&mut rng, c.n_blocks, c.specific_dim);
    let width = c.shared_dim + c.specific_dim;
    let mut visual = gaussian(&mut rng, c.n_items, width) * c.feature_noise;
    let mut textual = gaussian(&mut rng, c.n_items, width) * c.feature_noise;
    for (i, &b) in item_block.iter().enumerate() {
        let shared = shared_codes.row(b);
        visual.slice_mut(s![i, ..c.shared_dim]).scaled_add(1.0, &shared);
        textual.slice_mut(s![i, ..c.shared_dim]).scaled_add(1.0, &shared);
        visual.slice_mut(s![i, c.shared_dim..]).scaled_add(1.0, &visual_codes.row(b));
    }
    normalize_rows(&mut visual);
    normalize_rows(&mut textual);

    let config_json = serde_json::to_string(config).expect("config serializes");
    let table = |modality: Modality, matrix: Array2<f64>| {
        let tag = match modality {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        };
        FeatureTable::new(
            EntityKind::Item,
            modality,
            vocab.items.to_vec(),
            matrix,
            vec![false; c.n_items],
            Fingerprinter::new("synthetic-features").str(&config_json).str(tag).finish(),
        )
    };
    Ok(SyntheticData {
        interactions,
        visual: table(Modality::Visual, visual)?,
        textual: table(Modality::Textual, textual)?,
        user_block,
        item_block,
    })
}

const COLORS: [&str; 10] = ["red", "blue", "green", "amber", "violet", "teal", "ivory", "coral", "slate", "olive"];
const NOUNS: [&str; 10] = ["stroller", "blanket", "bottle", "rattle", "carrier", "monitor", "bib", "crib", "teether", "swaddle"];

/// Words describing a block's look, used for titles and canned descriptions.
pub fn block_phrase(block: usize) -> String {
    format!("{} {}", COLORS[block % COLORS.len()], NOUNS[(block / COLORS.len()) % NOUNS.len()])
}

/// A tiny PNG-signed payload naming the block; enough for MIME sniffing and
/// for a stub endpoint to recover the block.
pub fn image_bytes(block: usize) -> Vec<u8> {
    let mut bytes = b"\x89PNG\r\n\x1a\n".to_vec();
    bytes.extend_from_slice(format!("block={block}").as_bytes());
    bytes
}

/// Inverse of [`image_bytes`] applied to a base64 payload.
pub fn block_of_image_base64(encoded: &str) -> Option<usize> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(encoded).ok()?;
    let text = std::str::from_utf8(bytes.get(8..)?).ok()?;
    text.strip_prefix("block=")?.parse().ok()
}

/// Write `interactions.tsv`, `metadata.jsonl` and `images/` for the data set.
pub fn write_corpus(data: &SyntheticData, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let vocab = data.interactions.vocab();
    let mut tsv = String::from("user\titem\n");
    for (u, i) in data.interactions.pairs() {
        tsv.push_str(&format!("{}\t{}\n", vocab.users[u as usize], vocab.items[i as usize]));
    }
    io::write_atomic(&dir.join("interactions.tsv"), tsv.as_bytes())?;

    let mut jsonl = String::new();
    for (i, key) in vocab.items.iter().enumerate() {
        let block = data.item_block[i];
        let file = format!("{key}.png");
        io::write_atomic(&images.join(&file), &image_bytes(block))?;
        let row = serde_json::json!({
            "item": key,
            "title": format!("{} no. {i}", block_phrase(block)),
            "brand": format!("brand{}", i % 7),
            "description": "",
            "category": "Baby",
            "image": format!("images/{file}"),
        });
        jsonl.push_str(&row.to_string());
        jsonl.push('\n');
    }
    io::write_atomic(&dir.join("metadata.jsonl"), jsonl.as_bytes())
}

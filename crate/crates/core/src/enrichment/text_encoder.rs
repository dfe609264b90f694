//! Text encoders mapping strings to dense feature vectors.

use std::hash::Hasher;
use std::time::Duration;

use fnv::FnvHasher;
use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};

pub trait TextEncoder: Send + Sync {
    /// Identifier that changes whenever the encoder's output would.
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Vec<f32>>;

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts.iter().map(|t| self.encode(t)).collect()
    }
}

/// Offline encoder: signed feature hashing of word unigrams, word bigrams and
/// character trigrams, L2-normalized. A constant bias feature keeps the
/// empty string away from the zero vector.
#[derive(Debug, Clone)]
pub struct HashingEncoder {
    dim: usize,
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Encoder("hashing encoder dimension must be positive".into()));
        }
        Ok(Self { dim })
    }

    fn add(&self, acc: &mut [f64], feature: &str, weight: f64) {
        let mut hasher = FnvHasher::default();
        hasher.write(feature.as_bytes());
        let h = hasher.finish();
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[(h % self.dim as u64) as usize] += sign * weight;
    }
}

impl TextEncoder for HashingEncoder {
    fn id(&self) -> String {
        format!("hashing-v1-d{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>> {
        let mut acc = vec![0.0f64; self.dim];
        self.add(&mut acc, "b:<s>", 0.25);
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        for (i, word) in words.iter().enumerate() {
            self.add(&mut acc, &format!("w:{word}"), 1.0);
            if let Some(next) = words.get(i + 1) {
                self.add(&mut acc, &format!("p:{word}_{next}"), 0.7);
            }
            let padded: Vec<char> = format!("#{word}#").chars().collect();
            for tri in padded.windows(3) {
                self.add(&mut acc, &format!("c:{}", tri.iter().collect::<String>()), 0.5);
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(acc.iter().map(|v| (v / norm) as f32).collect())
    }
}

/// Client for an OpenAI-style `/v1/embeddings` endpoint, e.g. a locally
/// served sentence-embedding model.
pub struct HttpEmbeddingEncoder {
    agent: ureq::Agent,
    url: String,
    model: String,
    dim: usize,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    embedding: Vec<f32>,
}

impl HttpEmbeddingEncoder {
    /// Connects and probes the output dimension with the empty string.
    pub fn connect(url: impl Into<String>, model: impl Into<String>) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        let mut encoder = Self {
            agent,
            url: url.into(),
            model: model.into(),
            dim: 0,
        };
        let probe = encoder.request(&[String::new()])?;
        encoder.dim = probe[0].len();
        if encoder.dim == 0 {
            return Err(Error::Encoder("embedding endpoint returned an empty vector".into()));
        }
        Ok(encoder)
    }

    fn request(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let response: EmbeddingResponse = self
            .agent
            .post(&self.url)
            .send_json(json!({ "model": self.model, "input": texts }))
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| Error::Encoder(format!("{}: {e}", self.url)))?;
        if response.data.len() != texts.len() {
            return Err(Error::Encoder(format!(
                "asked for {} embeddings, received {}",
                texts.len(),
                response.data.len()
            )));
        }
        Ok(response.data.into_iter().map(|r| r.embedding).collect())
    }
}

impl TextEncoder for HttpEmbeddingEncoder {
    fn id(&self) -> String {
        format!("http:{}:{}", self.url, self.model)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.request(&[text.to_string()])?.remove(0))
    }

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(64) {
            out.extend(self.request(chunk)?);
        }
        if let Some(bad) = out.iter().position(|v| v.len() != self.dim) {
            return Err(Error::Internal(format!("embedding {bad} has inconsistent width")));
        }
        Ok(out)
    }
}

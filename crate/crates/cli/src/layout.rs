use std::path::{Path, PathBuf};

use infofuse_core::fingerprint::short;
use infofuse_core::trainer::AblationArm;

/// Where the visual feature table of an arm comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualSource {
    /// Descriptions generated with the title-guided prompt.
    Titled,
    /// Descriptions generated without the title clause.
    Untitled,
    /// Imported pre-extracted image features.
    Raw,
}

impl VisualSource {
    pub fn of(arm: AblationArm) -> Self {
        match arm {
            AblationArm::VlmNoTitle => VisualSource::Untitled,
            AblationArm::RawVisual => VisualSource::Raw,
            _ => VisualSource::Titled,
        }
    }

    fn stem(self) -> &'static str {
        match self {
            VisualSource::Titled => "visual",
            VisualSource::Untitled => "visual_no_title",
            VisualSource::Raw => "visual_raw",
        }
    }

    /// Command that produces this table.
    pub fn producer(self) -> &'static str {
        match self {
            VisualSource::Titled => "infofuse enrich",
            VisualSource::Untitled => "infofuse enrich --no-title",
            VisualSource::Raw => "infofuse encode (with paths.raw_visual set)",
        }
    }
}

/// File layout under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.root.join("prepared")
    }

    pub fn split_dir(&self) -> PathBuf {
        self.prepared_dir().join("split")
    }

    pub fn prepare_manifest(&self) -> PathBuf {
        self.prepared_dir().join("prepare.json")
    }

    pub fn bipartite(&self) -> PathBuf {
        self.prepared_dir().join("bipartite.tsv")
    }

    pub fn user_graph(&self) -> PathBuf {
        self.prepared_dir().join("user_graph.bin")
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn textual(&self) -> PathBuf {
        self.features_dir().join("textual.vft")
    }

    pub fn visual(&self, source: VisualSource) -> PathBuf {
        self.features_dir().join(format!("{}.vft", source.stem()))
    }

    pub fn descriptions(&self, source: VisualSource) -> PathBuf {
        self.features_dir().join(format!("{}_descriptions.jsonl", source.stem()))
    }

    pub fn failures(&self, source: VisualSource) -> PathBuf {
        self.features_dir().join(format!("{}_failures.json", source.stem()))
    }

    pub fn run_dir(&self, arm: AblationArm, fingerprint: &str) -> PathBuf {
        self.root.join("runs").join(format!("{}-{}", arm.tag(), short(fingerprint)))
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablation")
    }

    pub fn exports_dir(&self) -> PathBuf {
        self.root.join("exports")
    }
}

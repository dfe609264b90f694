//! Title-guided prompt templates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TITLE_PLACEHOLDER: &str = "{title}";

/// Subject clause used when an item has no title (or the title-free arm runs).
pub const GENERIC_SUBJECT: &str = "the main retail product";

const DEFAULT_TEMPLATE: &str = "\
You are given a product image from an online store.
Think step by step.
Step 1: Identify {title} in the image. Ignore people, backgrounds, props and any other objects.
Step 2: Describe only that product's visual attributes: color, shape, material and distinguishing features.
Step 3: Output the final description of the product as a single paragraph.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template_id: String,
    pub template_text: String,
    pub version: u32,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            template_id: "cot-product".into(),
            template_text: DEFAULT_TEMPLATE.into(),
            version: 1,
        }
    }
}

impl PromptSpec {
    pub fn new(template_id: impl Into<String>, template_text: impl Into<String>, version: u32) -> Result<Self> {
        let spec = Self {
            template_id: template_id.into(),
            template_text: template_text.into(),
            version,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.template_text.matches(TITLE_PLACEHOLDER).count() {
            1 => Ok(()),
            0 => Err(Error::Config(format!(
                "prompt template {:?} has no {TITLE_PLACEHOLDER} placeholder",
                self.template_id
            ))),
            n => Err(Error::Config(format!(
                "prompt template {:?} has {n} {TITLE_PLACEHOLDER} placeholders, expected one",
                self.template_id
            ))),
        }
    }
}

/// Render the prompt for one item. An empty title falls back to
/// [`GENERIC_SUBJECT`].
pub fn build_prompt(spec: &PromptSpec, title: &str) -> Result<String> {
    spec.validate()?;
    let title = title.trim();
    let subject = if title.is_empty() {
        GENERIC_SUBJECT.to_string()
    } else {
        format!("the product titled \"{title}\"")
    };
    Ok(spec.template_text.replacen(TITLE_PLACEHOLDER, &subject, 1))
}

/// Strip echoed reasoning from a raw generation.
///
/// With a marker, keeps the text after its last occurrence. Otherwise (or if
/// the marker is absent) keeps the final non-empty paragraph, dropping a
/// leading `Step N:` label.
pub fn extract_description(raw: &str, marker: Option<&str>) -> String {
    if let Some(marker) = marker.filter(|m| !m.is_empty()) {
        if let Some(pos) = raw.rfind(marker) {
            let tail = raw[pos + marker.len()..].trim();
            if !tail.is_empty() {
                return tail.to_string();
            }
        }
    }
    let normalized = raw.replace("\r\n", "\n");
    let paragraph = normalized
        .split("\n\n")
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .last()
        .unwrap_or("");
    let joined = paragraph.lines().map(str::trim).collect::<Vec<_>>().join(" ");
    strip_step_label(&joined).to_string()
}

fn strip_step_label(text: &str) -> &str {
    let Some(rest) = text.strip_prefix("Step ") else { return text };
    let digits = rest.chars().take_while(|c| c.is_ascii_digit()).count();
    match rest[digits..].strip_prefix(':') {
        Some(tail) if digits > 0 => tail.trim_start(),
        _ => text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn title_appears_verbatim_once() {
        let prompt = build_prompt(&PromptSpec::default(), "baby carrier").unwrap();
        assert_eq!(prompt.matches("baby carrier").count(), 1);
        assert!(!prompt.contains(TITLE_PLACEHOLDER));
    }

    #[test]
    fn empty_title_uses_generic_subject() {
        let prompt = build_prompt(&PromptSpec::default(), "  ").unwrap();
        assert!(prompt.contains(GENERIC_SUBJECT));
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = PromptSpec::default();
        assert_eq!(build_prompt(&spec, "mug").unwrap(), build_prompt(&spec, "mug").unwrap());
    }

    #[test]
    fn default_template_has_three_steps() {
        let text = PromptSpec::default().template_text;
        for step in ["Step 1:", "Step 2:", "Step 3:"] {
            assert!(text.contains(step));
        }
        assert!(text.contains("color, shape, material"));
    }

    #[test]
    fn missing_placeholder_is_config_error() {
        assert!(matches!(PromptSpec::new("x", "describe the image", 1), Err(Error::Config(_))));
        assert!(matches!(PromptSpec::new("x", "{title} and {title}", 1), Err(Error::Config(_))));
    }

    #[test]
    fn extraction_prefers_marker_then_last_paragraph() {
        let raw = "Step 1: I see a carrier.\n\nStep 2: It is grey.\n\nStep 3: A grey padded baby\ncarrier with buckles.";
        assert_eq!(extract_description(raw, None), "A grey padded baby carrier with buckles.");
        let marked = "reasoning...\nDescription: A red mug.";
        assert_eq!(extract_description(marked, Some("Description:")), "A red mug.");
        assert_eq!(extract_description("single", Some("Description:")), "single");
    }
}

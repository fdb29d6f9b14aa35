//! Instruction templates for every model role.
//!
//! Placeholders are written `{{name}}`. Rendering fails if a placeholder is unbound or if
//! a supplied value has no placeholder, so template drift surfaces immediately.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InstructionRole {
    /// Ranks search snippets by relevance before page fetching (used in bootstrap and every round).
    SnippetRank,
    QueryPlanning,
    TextFilter,
    ImageFilter,
    Sufficiency,
    ContentRefine,
    VisualRefine,
    PromptExtend,
    JudgeQuestion,
    JudgeAlignment,
}

impl InstructionRole {
    pub const ALL: [InstructionRole; 10] = [
        InstructionRole::SnippetRank,
        InstructionRole::QueryPlanning,
        InstructionRole::TextFilter,
        InstructionRole::ImageFilter,
        InstructionRole::Sufficiency,
        InstructionRole::ContentRefine,
        InstructionRole::VisualRefine,
        InstructionRole::PromptExtend,
        InstructionRole::JudgeQuestion,
        InstructionRole::JudgeAlignment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstructionRole::SnippetRank => "SnippetRank",
            InstructionRole::QueryPlanning => "QueryPlanning",
            InstructionRole::TextFilter => "TextFilter",
            InstructionRole::ImageFilter => "ImageFilter",
            InstructionRole::Sufficiency => "Sufficiency",
            InstructionRole::ContentRefine => "ContentRefine",
            InstructionRole::VisualRefine => "VisualRefine",
            InstructionRole::PromptExtend => "PromptExtend",
            InstructionRole::JudgeQuestion => "JudgeQuestion",
            InstructionRole::JudgeAlignment => "JudgeAlignment",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            InstructionRole::SnippetRank => &["prompt", "query", "snippets"],
            InstructionRole::QueryPlanning => &["prompt", "knowledge", "max_queries"],
            InstructionRole::TextFilter => &["prompt", "knowledge", "candidates"],
            InstructionRole::ImageFilter => &["prompt", "knowledge", "candidates"],
            InstructionRole::Sufficiency => &["prompt", "knowledge", "questions"],
            InstructionRole::ContentRefine => &["prompt", "knowledge", "images"],
            InstructionRole::VisualRefine => &["prompt", "images", "textual_features"],
            InstructionRole::PromptExtend => {
                &["prompt", "visual_features", "images", "textual_features"]
            }
            InstructionRole::JudgeQuestion => &["question", "reference_note"],
            InstructionRole::JudgeAlignment => &["feature", "evidence"],
        }
    }

    pub fn default_template(self) -> &'static str {
        match self {
            InstructionRole::SnippetRank => SNIPPET_RANK,
            InstructionRole::QueryPlanning => QUERY_PLANNING,
            InstructionRole::TextFilter => TEXT_FILTER,
            InstructionRole::ImageFilter => IMAGE_FILTER,
            InstructionRole::Sufficiency => SUFFICIENCY,
            InstructionRole::ContentRefine => CONTENT_REFINE,
            InstructionRole::VisualRefine => VISUAL_REFINE,
            InstructionRole::PromptExtend => PROMPT_EXTEND,
            InstructionRole::JudgeQuestion => JUDGE_QUESTION,
            InstructionRole::JudgeAlignment => JUDGE_ALIGNMENT,
        }
    }
}

impl fmt::Display for InstructionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template for {role} has unbound placeholder `{name}`")]
    Unbound { role: InstructionRole, name: String },
    #[error("template for {role} has no placeholder for supplied value `{name}`")]
    Unused { role: InstructionRole, name: String },
    #[error("template for {role} is empty")]
    Empty { role: InstructionRole },
    #[error("unknown template file {0:?}")]
    UnknownRole(String),
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

/// Role → template text. Starts from the built-in defaults.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    by_role: BTreeMap<InstructionRole, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            by_role: InstructionRole::ALL
                .into_iter()
                .map(|r| (r, r.default_template().to_string()))
                .collect(),
        }
    }
}

impl Templates {
    pub fn get(&self, role: InstructionRole) -> &str {
        &self.by_role[&role]
    }

    /// Replace one template after checking it against the role's placeholder set.
    pub fn set(&mut self, role: InstructionRole, text: impl Into<String>) -> Result<(), TemplateError> {
        let text = text.into();
        check_template(role, &text)?;
        self.by_role.insert(role, text);
        Ok(())
    }

    /// Override defaults from `<dir>/<RoleName>.txt` files.
    pub fn load_overrides(&mut self, dir: &Path) -> Result<usize, TemplateError> {
        let io = |e: std::io::Error| TemplateError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        let mut n = 0;
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let entry = entry.map_err(io)?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let role =
                InstructionRole::from_name(stem).ok_or_else(|| TemplateError::UnknownRole(stem.into()))?;
            let text = std::fs::read_to_string(&path).map_err(io)?;
            self.set(role, text)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn render(&self, role: InstructionRole, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        render(role, self.get(role), vars)
    }
}

fn placeholders_in(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                out.push(after[..end].trim());
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    out
}

fn check_template(role: InstructionRole, text: &str) -> Result<(), TemplateError> {
    if text.trim().is_empty() {
        return Err(TemplateError::Empty { role });
    }
    let found = placeholders_in(text);
    for name in &found {
        if !role.placeholders().contains(name) {
            return Err(TemplateError::Unbound {
                role,
                name: name.to_string(),
            });
        }
    }
    for name in role.placeholders() {
        if !found.contains(name) {
            return Err(TemplateError::Unused {
                role,
                name: name.to_string(),
            });
        }
    }
    Ok(())
}

fn render(role: InstructionRole, template: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
    let found = placeholders_in(template);
    for (name, _) in vars {
        if !found.contains(name) {
            return Err(TemplateError::Unused {
                role,
                name: name.to_string(),
            });
        }
    }
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            rest = "";
            break;
        };
        let name = after[..end].trim();
        let value = vars
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| TemplateError::Unbound {
                role,
                name: name.to_string(),
            })?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

const SNIPPET_RANK: &str = "\
You rank web search results for a factual image generation task.
Image prompt: {{prompt}}
Search query: {{query}}

Results (numbered from 1):
{{snippets}}

Rank the results by how relevant their snippet is to the prompt and query, most relevant first.
Include every result that could be useful; omit only clearly irrelevant ones.
Reply with JSON only: {\"ranking\": [<result numbers>]}";

const QUERY_PLANNING: &str = "\
You plan web retrieval for generating a factually accurate image.
Image prompt: {{prompt}}

Current knowledge base:
{{knowledge}}

Identify information that is missing or under-specified for drawing this image correctly.
Decompose the gaps into sub-questions and map each to the best modality: text queries for
attributes, relations, dates, and specifications; image queries for appearance, proportions,
and spatial layout. Propose between 1 and {{max_queries}} queries in total, most important first.
If the knowledge base already covers everything, return an empty query list.
Reply with JSON only:
{\"sub_questions\": [\"...\"], \"queries\": [{\"modality\": \"text\" | \"image\", \"query\": \"...\"}]}";

const TEXT_FILTER: &str = "\
You filter retrieved web text for a factual image generation task.
Image prompt: {{prompt}}

Current knowledge base:
{{knowledge}}

Retrieved texts (numbered from 1):
{{candidates}}

Keep a text only if it is semantically aligned with the prompt and factually consistent with
the knowledge base. Do not rewrite anything; select by number.
Reply with JSON only: {\"keep\": [<text numbers>]}";

const IMAGE_FILTER: &str = "\
You filter retrieved web images for a factual image generation task.
Image prompt: {{prompt}}

Current knowledge base (including the texts just accepted):
{{knowledge}}

Retrieved images (numbered from 1, attached in the same order):
{{candidates}}

Keep an image only if it is coherent with the textual evidence and with the images already in
the knowledge base. Select by number.
Reply with JSON only: {\"keep\": [<image numbers>]}";

const SUFFICIENCY: &str = "\
You decide whether retrieval for a factual image generation task can stop.
Image prompt: {{prompt}}

Knowledge base:
{{knowledge}}

Open sub-questions:
{{questions}}

If the knowledge base is incomplete or lacks essential details for these sub-questions, answer
Retrieval. If it is sufficient to write a precise generation prompt, answer Refine.
Reply with JSON only: {\"decision\": \"Retrieval\" | \"Refine\", \"rationale\": \"...\"}";

const CONTENT_REFINE: &str = "\
You refine retrieved evidence before prompt writing for a factual image generation task.
Image prompt: {{prompt}}

Knowledge base:
{{knowledge}}

Knowledge-base images (numbered from 1, attached in the same order):
{{images}}

1. Extract the visually descriptive, generation-relevant textual features (appearance, size,
   materials, colors, relations, time-specific states) as short standalone statements.
2. Deduplicate the images: keep the minimal set of distinct, informative reference images.
Reply with JSON only: {\"textual_features\": [\"...\"], \"keep_images\": [<image numbers>]}";

const VISUAL_REFINE: &str = "\
You extract visual control cues from reference images for a factual image generation task.
Image prompt: {{prompt}}

Reference images (numbered from 1, attached in the same order):
{{images}}

Textual features:
{{textual_features}}

Using the textual features as guidance, name the critical visual elements in each reference
image that the generator must preserve, and ignore irrelevant background.
Reply with JSON only: {\"visual_features\": [{\"image\": <image number>, \"feature\": \"...\"}]}";

const PROMPT_EXTEND: &str = "\
You write the final prompt for an image generator that also receives reference images.
Original prompt: {{prompt}}

Textual features:
{{textual_features}}

Reference images (numbered from 1):
{{images}}

Visual features to preserve:
{{visual_features}}

Write one enriched generation prompt that incorporates the factual details and tells the
generator which elements of which reference image to follow.
Reply with JSON only: {\"prompt\": \"...\"}";

const JUDGE_QUESTION: &str = "\
You are grading a generated image. Look at the attached generated image{{reference_note}}.
Statement: {{question}}
Is the statement true for the generated image? Reply with JSON only: {\"verdict\": \"True\" | \"False\"}";

const JUDGE_ALIGNMENT: &str = "\
You check whether retrieved evidence supports a ground-truth fact.
Fact: {{feature}}

Retrieved evidence (texts, and image records; images attached):
{{evidence}}

Does the evidence contain or depict this fact? Reply with JSON only: {\"verdict\": \"True\" | \"False\"}";

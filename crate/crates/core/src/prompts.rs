//! Prompt templates.
//!
//! `[Image]` is left in the output as a literal sentinel; the extractor
//! replaces it with the model's image embedding protocol. Recognition prompts
//! end with the cue list `name1, name2, ..., namek,` (trailing comma), or stop
//! at the colon when there are no cues.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{CategoryCatalog, CategoryIndex};
use crate::error::{Error, Result};

pub const IMAGE_SENTINEL: &str = "[Image]";

const ENTAIL_BEFORE: &str = "[Image] This image describes \"";
const ENTAIL_AFTER: &str = "\". Is it right? Answer:";
const REC_PREFIX: &str = "[Image] This image contains the following types of objects:";
const VAR1_PREFIX: &str = "[Image] What types of objects are there here? Please list them:";
const VAR2_PREFIX: &str = "[Image] Objects in this picture are:";
const VAR3_PREFIX: &str = "[Image] There can be several types of objects in this image, \
including up to eighty kinds of objects. These objects can be any color, including red, \
green, blue, orange, yellow, purple, pink, and etc. Some of these objects can be very huge, \
while others can be very small. In the meantime, there are also many objects which can be \
overlapping with others. Please look carefully at the image for any detailed information. \
Now, you can write which type of objects you can find in the image:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms, non_camel_case_types)]
pub enum TemplateId {
    ENTAIL,
    REC_WITHCAT,
    REC_NOCAT,
    VAR1,
    VAR2,
    VAR3,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::ENTAIL,
        TemplateId::REC_WITHCAT,
        TemplateId::REC_NOCAT,
        TemplateId::VAR1,
        TemplateId::VAR2,
        TemplateId::VAR3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ENTAIL => "ENTAIL",
            TemplateId::REC_WITHCAT => "REC_WITHCAT",
            TemplateId::REC_NOCAT => "REC_NOCAT",
            TemplateId::VAR1 => "VAR1",
            TemplateId::VAR2 => "VAR2",
            TemplateId::VAR3 => "VAR3",
        }
    }

    pub fn is_recognition(self) -> bool {
        self != TemplateId::ENTAIL
    }

    pub fn is_variant(self) -> bool {
        matches!(self, TemplateId::VAR1 | TemplateId::VAR2 | TemplateId::VAR3)
    }

    /// Text preceding the cue list for recognition templates.
    fn cue_prefix(self) -> Option<&'static str> {
        match self {
            TemplateId::ENTAIL => None,
            TemplateId::REC_WITHCAT | TemplateId::REC_NOCAT => Some(REC_PREFIX),
            TemplateId::VAR1 => Some(VAR1_PREFIX),
            TemplateId::VAR2 => Some(VAR2_PREFIX),
            TemplateId::VAR3 => Some(VAR3_PREFIX),
        }
    }

    /// Template body with placeholder markers, as stored in `templates.json`.
    pub fn body(self) -> String {
        match self {
            TemplateId::ENTAIL => format!("{ENTAIL_BEFORE}[Caption]{ENTAIL_AFTER}"),
            TemplateId::REC_NOCAT => REC_PREFIX.to_string(),
            TemplateId::REC_WITHCAT => format!("{REC_PREFIX} [Obj_1], [Obj_2], ..., [Obj_n-1],"),
            v => format!("{} [Obj_1], [Obj_2], ..., [Obj_k],", v.cue_prefix().unwrap()),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTemplate(s.to_string()))
    }
}

/// Recognition prompt condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    WithCat,
    NoCat,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::WithCat => "WithCat",
            Condition::NoCat => "NoCat",
        }
    }

    /// Default recognition template for the condition.
    pub fn template(self) -> TemplateId {
        match self {
            Condition::WithCat => TemplateId::REC_WITHCAT,
            Condition::NoCat => TemplateId::REC_NOCAT,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "WithCat" | "withcat" => Ok(Condition::WithCat),
            "NoCat" | "nocat" => Ok(Condition::NoCat),
            _ => Err(Error::Invalid(format!("unknown condition {s:?}"))),
        }
    }
}

pub fn render_entailment(caption_text: &str) -> Result<String> {
    if caption_text.trim().is_empty() {
        return Err(Error::Precondition("caption must be non-empty".into()));
    }
    Ok(format!("{ENTAIL_BEFORE}{caption_text}{ENTAIL_AFTER}"))
}

fn render_cues(prefix: &str, cue_names: &[&str]) -> String {
    let mut out = String::from(prefix);
    for name in cue_names {
        out.push(' ');
        out.push_str(name);
        out.push(',');
    }
    out
}

fn check_names(catalog: &CategoryCatalog, cue_names: &[&str]) -> Result<()> {
    match cue_names.iter().find(|n| catalog.index_of(n).is_none()) {
        Some(n) => Err(Error::UnknownCategory(n.to_string())),
        None => Ok(()),
    }
}

/// Renders the main recognition prompt. An empty WithCat cue list renders as
/// the NoCat form; NoCat with cues is rejected.
pub fn render_recognition(
    catalog: &CategoryCatalog,
    cue_names: &[&str],
    condition: Condition,
) -> Result<String> {
    if condition == Condition::NoCat && !cue_names.is_empty() {
        return Err(Error::Precondition("NoCat prompts carry no category cues".into()));
    }
    check_names(catalog, cue_names)?;
    Ok(render_cues(REC_PREFIX, cue_names))
}

/// Renders one of the three variant recognition prompts.
pub fn render_variant(
    catalog: &CategoryCatalog,
    variant: TemplateId,
    cue_names: &[&str],
) -> Result<String> {
    if !variant.is_variant() {
        return Err(Error::UnknownTemplate(format!("{variant} is not a variant template")));
    }
    check_names(catalog, cue_names)?;
    Ok(render_cues(variant.cue_prefix().unwrap(), cue_names))
}

/// Renders a recognition template from category indices.
pub fn render_cue_indices(
    catalog: &CategoryCatalog,
    template: TemplateId,
    cues: &[CategoryIndex],
) -> Result<String> {
    let prefix = template
        .cue_prefix()
        .ok_or_else(|| Error::UnknownTemplate(format!("{template} takes a caption, not cues")))?;
    if template == TemplateId::REC_NOCAT && !cues.is_empty() {
        return Err(Error::Precondition("NoCat prompts carry no category cues".into()));
    }
    let names = cues
        .iter()
        .map(|&c| {
            catalog
                .name(c)
                .ok_or_else(|| Error::UnknownCategory(format!("#{c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(render_cues(prefix, &names))
}

/// Splits a rendered recognition prompt back into its cue names. Returns
/// `None` if the prompt does not start with the template's prefix or the cue
/// region is malformed.
pub fn parse_cues(template: TemplateId, rendered: &str) -> Option<Vec<String>> {
    let rest = rendered.strip_prefix(template.cue_prefix()?)?;
    if rest.is_empty() {
        return Some(Vec::new());
    }
    let rest = rest.strip_prefix(' ')?.strip_suffix(',')?;
    Some(rest.split(", ").map(str::to_string).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub template_id: TemplateId,
    pub body: String,
}

/// Contents of the shipped `templates.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateFile {
    pub format: String,
    pub image_sentinel: String,
    pub templates: Vec<TemplateRecord>,
}

/// The golden template file shipped with the crate.
pub const TEMPLATES_JSON: &str = include_str!("../data/templates.json");

impl TemplateFile {
    pub fn from_code() -> Self {
        Self {
            format: "layerprobe-templates/1".into(),
            image_sentinel: IMAGE_SENTINEL.into(),
            templates: TemplateId::ALL
                .into_iter()
                .map(|t| TemplateRecord {
                    template_id: t,
                    body: t.body(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("templates serialize");
        s.push('\n');
        s
    }
}

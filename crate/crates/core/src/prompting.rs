//! Prompt construction: background suffixes, style recaption instructions and
//! the gray-canvas paste that accompanies them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compositor::{resize_raster, Premul, ResizeFilter};
use crate::error::{Error, Result};
use crate::layer::{RgbRaster, TransparentLayer};

/// Mid-gray used for generation backgrounds and recaption canvases.
pub const GRAY: [u8; 3] = [128, 128, 128];

pub const COLOR_PLACEHOLDER: &str = "{color}";
pub const STYLE_PLACEHOLDER: &str = "STYLEPROMPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SuffixTemplateId {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
}

impl SuffixTemplateId {
    pub const ALL: [SuffixTemplateId; 8] = [
        SuffixTemplateId::A,
        SuffixTemplateId::B,
        SuffixTemplateId::C,
        SuffixTemplateId::D,
        SuffixTemplateId::E,
        SuffixTemplateId::F,
        SuffixTemplateId::G,
        SuffixTemplateId::H,
    ];
}

impl std::str::FromStr for SuffixTemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = match s.trim().to_ascii_uppercase().as_str() {
            "A" => SuffixTemplateId::A,
            "B" => SuffixTemplateId::B,
            "C" => SuffixTemplateId::C,
            "D" => SuffixTemplateId::D,
            "E" => SuffixTemplateId::E,
            "F" => SuffixTemplateId::F,
            "G" => SuffixTemplateId::G,
            "H" => SuffixTemplateId::H,
            other => return Err(Error::Config(format!("unknown suffix template `{other}`"))),
        };
        Ok(id)
    }
}

impl std::fmt::Display for SuffixTemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// The built-in background suffixes; `{color}` is replaced by the colour word.
const DEFAULT_TEMPLATES: [(SuffixTemplateId, &str); 8] = [
    (SuffixTemplateId::A, "on a solid plain {color} background."),
    (SuffixTemplateId::B, "with a clear, solid {color} background."),
    (SuffixTemplateId::C, "on a solid single {color} background."),
    (SuffixTemplateId::D, "floating with a background that is solid {color}."),
    (SuffixTemplateId::E, "cut-out on a solid {color} background."),
    (SuffixTemplateId::F, "standing on a background that is fully solid {color}"),
    (SuffixTemplateId::G, "without any surrounding details"),
    (SuffixTemplateId::H, "isolated on a solid {color} background"),
];

pub const DEFAULT_COLORS: [&str; 11] = [
    "gray",
    "green",
    "blue",
    "red",
    "white",
    "black",
    "transparent",
    "half green and half red",
    "half red and half blue",
    "half gray and half black",
    "half gray and half white",
];

/// Released style set. The first twenty form the regeneration preset.
pub const DEFAULT_STYLES: [&str; 21] = [
    "toy",
    "melting silver",
    "line draw",
    "ink",
    "doodle art",
    "watercolor",
    "pixel art",
    "origami",
    "claymation",
    "neon",
    "3d render",
    "flat illustration",
    "pencil sketch",
    "stained glass",
    "vintage poster",
    "low poly",
    "paper cut",
    "oil painting",
    "pop art",
    "cyberpunk",
    "embroidery",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixTemplate {
    pub id: SuffixTemplateId,
    pub text: String,
}

impl SuffixTemplate {
    pub fn instantiate(&self, color: &str) -> String {
        self.text.replace(COLOR_PLACEHOLDER, color)
    }
}

/// Overrides loadable from a JSON config file. Missing fields keep defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    #[serde(default)]
    pub styles: Option<Vec<String>>,
    #[serde(default)]
    pub colors: Option<Vec<String>>,
    #[serde(default)]
    pub templates: BTreeMap<SuffixTemplateId, String>,
}

/// Suffix templates, colour words and registered styles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRegistry {
    templates: BTreeMap<SuffixTemplateId, SuffixTemplate>,
    colors: Vec<String>,
    styles: Vec<String>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self {
            templates: DEFAULT_TEMPLATES
                .iter()
                .map(|&(id, text)| {
                    (
                        id,
                        SuffixTemplate {
                            id,
                            text: text.to_string(),
                        },
                    )
                })
                .collect(),
            colors: DEFAULT_COLORS.iter().map(|s| s.to_string()).collect(),
            styles: DEFAULT_STYLES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PromptRegistry {
    pub fn from_config(cfg: &PromptConfig) -> Result<Self> {
        let mut reg = Self::default();
        if let Some(styles) = &cfg.styles {
            if styles.is_empty() {
                return Err(Error::Config("style registry must not be empty".into()));
            }
            reg.styles = styles.clone();
        }
        if let Some(colors) = &cfg.colors {
            reg.colors = colors.clone();
        }
        for (&id, text) in &cfg.templates {
            reg.templates.insert(
                id,
                SuffixTemplate {
                    id,
                    text: text.clone(),
                },
            );
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: PromptConfig = serde_json::from_slice(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_config(&cfg)
    }

    pub fn template(&self, id: SuffixTemplateId) -> Result<&SuffixTemplate> {
        self.templates
            .get(&id)
            .ok_or_else(|| Error::Config(format!("suffix template {id} not registered")))
    }

    pub fn templates(&self) -> impl Iterator<Item = &SuffixTemplate> {
        self.templates.values()
    }

    pub fn styles(&self) -> &[String] {
        &self.styles
    }

    pub fn colors(&self) -> &[String] {
        &self.colors
    }

    pub fn has_style(&self, style: &str) -> bool {
        self.styles.iter().any(|s| s == style)
    }

    /// Appends `", " + suffix` unless the instantiated suffix is already present.
    pub fn apply_suffix(&self, prompt: &str, id: SuffixTemplateId, color: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::Precondition("prompt must not be empty".into()));
        }
        if !self.colors.iter().any(|c| c == color) {
            return Err(Error::Config(format!("unknown colour word `{color}`")));
        }
        let suffix = self.template(id)?.instantiate(color);
        if prompt.contains(&suffix) {
            return Ok(prompt.to_string());
        }
        Ok(format!("{prompt}, {suffix}"))
    }

    pub fn build_style_recaption_request(
        &self,
        image: RgbRaster,
        style: &str,
    ) -> Result<RecaptionRequest> {
        if !self.has_style(style) {
            return Err(Error::Config(format!("style `{style}` is not registered")));
        }
        Ok(RecaptionRequest {
            image,
            style: Some(style.to_string()),
            instruction: STYLE_RECAPTION_TEMPLATE.replace(STYLE_PLACEHOLDER, style),
        })
    }
}

/// Appends a suffix from the default registry.
pub fn apply_suffix(prompt: &str, id: SuffixTemplateId, color: &str) -> Result<String> {
    PromptRegistry::default().apply_suffix(prompt, id, color)
}

/// Image plus instruction handed to the recaption backend.
#[derive(Debug, Clone, PartialEq)]
pub struct RecaptionRequest {
    pub image: RgbRaster,
    pub style: Option<String>,
    pub instruction: String,
}

pub fn build_style_recaption_request(image: RgbRaster, style: &str) -> Result<RecaptionRequest> {
    PromptRegistry::default().build_style_recaption_request(image, style)
}

/// Recovers the style named in an instruction built from
/// [`STYLE_RECAPTION_TEMPLATE`].
pub fn style_from_instruction(instruction: &str) -> Option<&str> {
    const OPEN: &str = "starting with **\"This is a ";
    const CLOSE: &str = " style image.\"**";
    let start = instruction.find(OPEN)? + OPEN.len();
    let len = instruction[start..].find(CLOSE)?;
    Some(&instruction[start..start + len])
}

/// Scales `layer` to fit `canvas` (aspect preserved), centres it, and blends
/// it over a uniform `gray` backdrop.
pub fn paste_on_gray(layer: &TransparentLayer, canvas: (u32, u32), gray: [u8; 3]) -> Result<RgbRaster> {
    let (cw, ch) = canvas;
    let (lw, lh) = layer.image.dims();
    let scale = (cw as f64 / lw as f64).min(ch as f64 / lh as f64);
    let nw = ((lw as f64 * scale).round() as u32).clamp(1, cw);
    let nh = ((lh as f64 * scale).round() as u32).clamp(1, ch);
    let fitted = resize_raster(&layer.image, nw, nh, ResizeFilter::Auto)?;
    let (ox, oy) = ((cw - nw) / 2, (ch - nh) / 2);

    let mut out = RgbRaster::filled(cw, ch, gray)?;
    let back = Premul::from_u8([gray[0], gray[1], gray[2], 255]);
    for y in 0..nh {
        for x in 0..nw {
            let px = Premul::from_u8(fitted.pixel(x, y)).over(back).to_u8();
            out.set_pixel(ox + x, oy + y, [px[0], px[1], px[2]]);
        }
    }
    Ok(out)
}

pub const STYLE_RECAPTION_TEMPLATE: &str = r#"You will receive an RGBA image placed on a gray background. Your task is to generate a highly detailed description of the image's content while adhering to a given stylistic (STYLEPROMPT) requirement.

**Key Guidelines:**

1. **Ignore the Gray Background:**
    - Do not mention or describe the gray background in any way. Focus solely on the foreground content.

2. **Handling Text in the Image:**
    - If the image contains any textual elements, the description **must** begin with **"Text:"** followed by a precise transcription of all visible text.
    - Transcribe every word, symbol, punctuation mark, and character **without omission or modification**.
    - The description of text must be brief and the style description should be limited to 5 words.

3. **Handling Non-Text Elements:**
    - If the image contains **non-text elements**, generate an **detailed** description, capturing all visible aspects.
    - Ensure that the provided style, STYLEPROMPT, is seamlessly **integrated into the description**, maintaining coherence and natural flow.

4. **Output Format:**
    - Provide only the description of the image. Do **not** include any additional explanations, comments, or meta-information about the task itself.
    - The description **must explicitly state** that the image is in **STYLEPROMPT style**, starting with **"This is a STYLEPROMPT style image."** (VERY IMPORTANT)
    - Limited to 70 words!!!

The image is shown below:"#;

pub const OBJECT_PLACEHOLDER: &str = "OBJECT";

/// Instruction for turning a single object word into a creative test prompt.
pub const CREATIVE_CAPTION_TEMPLATE: &str = r#"You are tasked with generating imaginative and creative image descriptions based on a given object word. The generated description should follow these specific guidelines:

### **1. Input:**

- You will receive a single object word (e.g., "penguin", "teapot", "robot", etc.).

- Use this object as the central focus of the description.

### **2. Output Requirements:**

- The description should be **creative and unexpected**, modifying the object or adding elements that make it unusual, humorous, or visually striking.

- The description **must not include details about the background**—focus only on the main object and any additional elements that make it more interesting.

- Aim for a **concise but vivid** description, ideally **within 20 to 30 words**.

- Use **strong visual language** to create a mental image.

- Avoid generic descriptions—make it **fun, unique, and imaginative**.

### **3. Examples for Reference:**

| Given Object | Generated Description |

|-------------|-----------------------|

| Kangaroo | A kangaroo holding a beer, wearing ski goggles and passionately singing silly songs. |

| Car | A car made out of vegetables. |

| Raccoon | A cyberpunk-styled raccoon wearing neon glasses and a futuristic jacket, holding a laser gun in one paw. |

| Teapot | A giant teapot with robotic arms, serving tea while wearing a tiny monocle and top hat. |

| Penguin | A punk-styled penguin with a mohawk, leather jacket, and electric guitar, rocking out on an ice stage. |

### **4. Constraints & Guidelines:**

- Do **not** include the background in the description.

- Feel free to **modify the object's appearance, abilities, or accessories** to make it more interesting.

- If necessary, **add related objects** (e.g., a robot might have futuristic gadgets, a dog might have sunglasses and a skateboard).

- Keep the tone fun, artistic, and engaging.

### **5. Additional Notes:**

Please directly respond to the prompt with the creative description.

Object: OBJECT"#;

pub fn build_creative_caption_prompt(object: &str) -> String {
    CREATIVE_CAPTION_TEMPLATE.replace(OBJECT_PLACEHOLDER, object)
}

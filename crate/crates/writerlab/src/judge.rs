//! Six-aspect LLM judge: fills a versioned prompt template, sends one chat
//! request, and parses the scoring JSON. Scores are Language Style (LS),
//! Expression (EX), Sentence Length/Complexity (SLC), Main Storyline (SM),
//! Character Behavior/Motivation (CBM), and Emotion/Conflict (EM), each 1-5.

use std::thread::sleep;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::chat::{ChatClient, ChatMessage};
use crate::error::{Error, Result};

pub const JUDGE_PROMPT_EN: &str = include_str!("prompts/judge_en.txt");
pub const JUDGE_PROMPT_ZH: &str = include_str!("prompts/judge_zh.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeLanguage {
    English,
    Chinese,
}

impl JudgeLanguage {
    pub fn parse(s: &str) -> Result<JudgeLanguage> {
        match s {
            "english" | "en" => Ok(JudgeLanguage::English),
            "chinese" | "zh" => Ok(JudgeLanguage::Chinese),
            other => Err(Error::Config(format!("unknown judge language '{}'", other))),
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            JudgeLanguage::English => JUDGE_PROMPT_EN,
            JudgeLanguage::Chinese => JUDGE_PROMPT_ZH,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub model: String,
    pub language: JudgeLanguage,
    pub retry_limit: usize,
    pub concurrency: usize,
    /// initial backoff between retries, milliseconds
    pub backoff_ms: u64,
}

impl Default for JudgeConfig {
    fn default() -> JudgeConfig {
        JudgeConfig {
            model: "gpt-4o".into(),
            language: JudgeLanguage::English,
            retry_limit: 3,
            concurrency: 2,
            backoff_ms: 500,
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retry_limit < 1 {
            return Err(Error::Config("judge retry limit must be >= 1".into()));
        }
        if self.concurrency < 1 {
            return Err(Error::Config("judge concurrency must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectScores {
    pub ls: u8,
    pub ex: u8,
    pub slc: u8,
    pub sm: u8,
    pub cbm: u8,
    pub em: u8,
}

impl AspectScores {
    pub fn as_tuple(&self) -> (u8, u8, u8, u8, u8, u8) {
        (self.ls, self.ex, self.slc, self.sm, self.cbm, self.em)
    }

    fn validate(self) -> Result<AspectScores> {
        for (name, v) in [
            ("LS", self.ls),
            ("EX", self.ex),
            ("SLC", self.slc),
            ("SM", self.sm),
            ("CBM", self.cbm),
            ("EM", self.em),
        ] {
            if !(1..=5).contains(&v) {
                return Err(Error::Parse(format!("aspect {} score {} outside 1..=5", name, v)));
            }
        }
        Ok(self)
    }
}

/// Accepted key spellings per aspect, in LS/EX/SLC/SM/CBM/EM order. The
/// English template's instruction block and its few-shot exemplars disagree
/// slightly ("Expression Analysis" vs "Expression Techniques Analysis",
/// "Emotion" vs "Emotions"), so both spellings parse; the Chinese keys map
/// positionally to the same six aspects.
const ASPECT_KEYS: [&[&str]; 6] = [
    &["Language Style Analysis", "语言风格分析"],
    &["Expression Analysis", "Expression Techniques Analysis", "表达方式分析"],
    &["Sentence Length and Complexity Analysis", "句子长度与复杂度分析"],
    &["Main Storyline Analysis", "故事主线分析"],
    &["Character Behavior and Motivation Analysis", "人物行为与动机分析"],
    &["Emotion and Conflict Analysis", "Emotions and Conflict Analysis", "情感与冲突分析"],
];

/// Pull the first {...} blob out of a possibly chatty reply.
fn extract_json_object(text: &str) -> Result<&str> {
    let start = text
        .find('{')
        .ok_or_else(|| Error::Parse("no JSON object in judge reply".into()))?;
    let end = text[start..]
        .find('}')
        .ok_or_else(|| Error::Parse("unterminated JSON object in judge reply".into()))?;
    Ok(&text[start..start + end + 1])
}

pub fn parse_aspects(reply: &str) -> Result<AspectScores> {
    let blob = extract_json_object(reply)?;
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(blob)
        .map_err(|e| Error::Parse(format!("judge reply is not a JSON object: {}", e)))?;
    let mut out = [0u8; 6];
    for (i, variants) in ASPECT_KEYS.iter().enumerate() {
        let (key, value) = variants
            .iter()
            .find_map(|k| map.get(*k).map(|v| (*k, v)))
            .ok_or_else(|| {
                Error::Parse(format!("missing aspect key (any of {:?})", variants))
            })?;
        let n = value
            .as_i64()
            .or_else(|| value.as_str().and_then(|s| s.trim().parse().ok()))
            .ok_or_else(|| Error::Parse(format!("key '{}' value is not an integer", key)))?;
        if !(0..=255).contains(&n) {
            return Err(Error::Parse(format!("key '{}' value {} out of range", key, n)));
        }
        out[i] = n as u8;
    }
    AspectScores { ls: out[0], ex: out[1], slc: out[2], sm: out[3], cbm: out[4], em: out[5] }
        .validate()
}

pub fn build_judge_prompt(candidate: &str, reference: &str, language: JudgeLanguage) -> String {
    language
        .template()
        .replace("{reference}", reference)
        .replace("{candidate}", candidate)
}

/// One judged comparison. Transport failures retry with exponential backoff
/// up to the configured limit; a reply that still fails to parse after the
/// retries surfaces as a parse error so the caller can mark the item
/// judge-failed.
pub fn judge_aspects(
    candidate: &str,
    reference: &str,
    config: &JudgeConfig,
    client: &mut dyn ChatClient,
) -> Result<AspectScores> {
    config.validate()?;
    let prompt = build_judge_prompt(candidate, reference, config.language);
    let messages = [ChatMessage::user(prompt)];
    let mut last_err = None;
    for attempt in 0..config.retry_limit {
        if attempt > 0 {
            sleep(Duration::from_millis(config.backoff_ms << (attempt - 1).min(6)));
        }
        match client.complete(&config.model, &messages) {
            Ok(reply) => match parse_aspects(&reply) {
                Ok(scores) => return Ok(scores),
                Err(e) => last_err = Some(e),
            },
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Client("judge produced no attempts".into())))
}

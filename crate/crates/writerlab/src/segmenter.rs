//! Optional LLM-backed chapter segmentation. The segmenter asks the client to
//! split a chapter into sections with short summaries, then re-anchors each
//! proposed section by exact substring match against the chapter body.
//! Unanchorable proposals are dropped. The pipeline works without this module
//! via sidecar plot files.

use serde::Deserialize;

use crate::chat::{ChatClient, ChatMessage};
use crate::corpus::PlotUnit;
use crate::error::{Error, Result};

const SEGMENT_PROMPT: &str = "Segment the following chapter into consecutive sections and write a concise plot summary for each. Reply with a JSON array of objects, each {\"summary\": \"...\", \"text\": \"<the exact section text, copied verbatim>\"}. Do not add any other output.\n\nChapter:\n";

#[derive(Deserialize)]
struct ProposedUnit {
    summary: String,
    text: String,
}

fn extract_json_array(reply: &str) -> Result<&str> {
    let start = reply
        .find('[')
        .ok_or_else(|| Error::Parse("no JSON array in segmenter reply".into()))?;
    let end = reply
        .rfind(']')
        .ok_or_else(|| Error::Parse("unterminated JSON array in segmenter reply".into()))?;
    if end < start {
        return Err(Error::Parse("malformed JSON array in segmenter reply".into()));
    }
    Ok(&reply[start..=end])
}

/// Anchor each proposal as a char-offset span. Search resumes after the
/// previous accepted span so repeated text anchors in order.
fn anchor_units(chapter: usize, body: &str, proposals: Vec<ProposedUnit>) -> Vec<PlotUnit> {
    let body_chars: Vec<char> = body.chars().collect();
    let mut units = Vec::new();
    let mut cursor = 0usize; // char offset
    for p in proposals {
        let needle: Vec<char> = p.text.chars().collect();
        if needle.is_empty() || p.summary.trim().is_empty() {
            continue;
        }
        let found = (cursor..=body_chars.len().saturating_sub(needle.len()))
            .find(|&i| body_chars[i..i + needle.len()] == needle[..]);
        if let Some(start) = found {
            let end = start + needle.len();
            units.push(PlotUnit { chapter, index: units.len(), summary: p.summary, start, end });
            cursor = end;
        }
        // not a substring from the cursor onward: proposal rejected
    }
    units
}

pub fn segment_with_llm(
    chapter: usize,
    body: &str,
    model: &str,
    client: Option<&mut dyn ChatClient>,
) -> Result<Vec<PlotUnit>> {
    let client = client.ok_or_else(|| {
        Error::Unavailable("segmenter client not configured; use sidecar plot files".into())
    })?;
    let messages = [ChatMessage::user(format!("{}{}", SEGMENT_PROMPT, body))];
    let mut last_err = None;
    for _attempt in 0..3 {
        match client.complete(model, &messages) {
            Err(e) => last_err = Some(e),
            Ok(reply) => match extract_json_array(&reply)
                .and_then(|blob| serde_json::from_str::<Vec<ProposedUnit>>(blob).map_err(Error::Json))
            {
                Ok(proposals) => return Ok(anchor_units(chapter, body, proposals)),
                Err(e) => last_err = Some(e),
            },
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Parse("segmenter produced no attempts".into())))
}

//! Deterministic synthetic toy corpus: templated characters with planted
//! trait tokens, a cyclic event chain for plots, and rotating style-marker
//! tokens in the prose. Lets every experiment run on generated text instead
//! of copyrighted corpora.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{render_corpus_text, write_jsonl, Annotations, Chapter, CharacterProfile, NovelCorpus, PlotUnit};
use crate::error::Result;

pub const NAMES: [&str; 20] = [
    "arin", "belda", "corin", "draven", "elara", "finn", "gorm", "halric", "isolde", "janor",
    "kelvin", "lira", "morwen", "nerys", "orin", "petra", "quill", "ravena", "selwyn", "tamsin",
];

pub const TRAITS: [&str; 20] = [
    "ashbound",
    "brightweave",
    "coldiron",
    "dawnforged",
    "emberkeen",
    "froststep",
    "goldmarked",
    "hawkeyed",
    "ironwilled",
    "jadetouched",
    "keenspoken",
    "lowvoiced",
    "moonread",
    "nightcalm",
    "oathbound",
    "palehanded",
    "quietfooted",
    "runeversed",
    "stormborn",
    "truesighted",
];

pub const EVENTS: [&str; 20] = [
    "ambush", "banquet", "council", "duel", "exile", "feast", "gift", "hunt", "intrigue",
    "journey", "kinship", "lantern", "march", "naming", "omen", "pact", "quarrel", "ransom",
    "siege", "tourney",
];

pub const MARKERS: [&str; 4] = ["verily", "anon", "forsooth", "hark"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthSize {
    /// a few chapters for unit tests
    Tiny,
    /// ~120 chapters, ~200KB, the experiment corpus
    Small,
}

impl SynthSize {
    pub fn parse(s: &str) -> Option<SynthSize> {
        match s {
            "tiny" => Some(SynthSize::Tiny),
            "small" => Some(SynthSize::Small),
            _ => None,
        }
    }

    fn dims(self) -> (usize, usize) {
        match self {
            SynthSize::Tiny => (12, 4),
            SynthSize::Small => (120, 12),
        }
    }
}

/// The trait planted in a character's profile.
pub fn trait_of(name: &str) -> Option<&'static str> {
    NAMES.iter().position(|&n| n == name).map(|i| TRAITS[i])
}

/// Deterministic successor in the event cycle.
pub fn next_event(event: &str) -> Option<&'static str> {
    EVENTS.iter().position(|&e| e == event).map(|i| EVENTS[(i + 1) % EVENTS.len()])
}

/// The style marker assigned to the plot with this event.
pub fn marker_of_event(event: &str) -> Option<&'static str> {
    EVENTS.iter().position(|&e| e == event).map(|i| MARKERS[i % MARKERS.len()])
}

/// First planted event token found in a summary or segment.
pub fn event_in(text: &str) -> Option<&'static str> {
    // longest match first so e.g. "gift" never shadows a longer event name
    let mut hits: Vec<&'static str> = EVENTS
        .iter()
        .copied()
        .filter(|e| text.split_whitespace().any(|w| w.trim_matches('.') == *e))
        .collect();
    hits.sort_by_key(|e| std::cmp::Reverse(e.len()));
    hits.first().copied()
}

pub fn summary_for(global_index: usize, seed: u64) -> String {
    let event = EVENTS[(global_index + seed as usize) % EVENTS.len()];
    format!("then came the {}.", event)
}

fn segment_for(global_index: usize, seed: u64) -> String {
    let event = EVENTS[(global_index + seed as usize) % EVENTS.len()];
    let name = NAMES[(global_index * 7 + seed as usize) % NAMES.len()];
    let marker = marker_of_event(event).unwrap();
    format!(
        "{} the {} came to the hall of {}. the folk spoke long of the {} and the fire burned low.\n",
        marker, event, name, event
    )
}

/// Generate a corpus with sidecar annotations. Identical (seed, size) pairs
/// produce byte-identical artifacts.
pub fn generate(seed: u64, size: SynthSize) -> (NovelCorpus, Annotations) {
    let (n_chapters, plots_per_chapter) = size.dims();
    let mut chapters = Vec::with_capacity(n_chapters);
    let mut plots = Vec::new();
    let mut global = 0usize;
    for ci in 1..=n_chapters {
        let mut body = String::new();
        for pi in 1..=plots_per_chapter {
            let seg = segment_for(global, seed);
            let start = body.chars().count();
            let end = start + seg.chars().count();
            plots.push(PlotUnit {
                chapter: ci,
                index: pi,
                summary: summary_for(global, seed),
                start,
                end,
            });
            body.push_str(&seg);
            global += 1;
        }
        let mut title = String::new();
        let _ = write!(title, "the {} chapter", EVENTS[(ci - 1) % EVENTS.len()]);
        chapters.push(Chapter { index: ci, title, body });
    }
    let profiles = NAMES
        .iter()
        .zip(TRAITS.iter())
        .map(|(&name, &tr)| CharacterProfile {
            name: name.to_string(),
            description: format!("the one called {} bears the mark {} and walks the old road.", name, tr),
        })
        .collect();
    (
        NovelCorpus { title: "the synthetic chronicle".to_string(), chapters },
        Annotations { plots, profiles },
    )
}

/// Write corpus.txt, plots.jsonl, profiles.jsonl under `dir`.
pub fn write_to_dir(dir: &Path, corpus: &NovelCorpus, ann: &Annotations) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("corpus.txt"), render_corpus_text(corpus))?;
    write_jsonl(&dir.join("plots.jsonl"), &ann.plots)?;
    write_jsonl(&dir.join("profiles.jsonl"), &ann.profiles)?;
    Ok(())
}

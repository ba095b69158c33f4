//! Transcript template pools for the synthetic corpus.

use rand::seq::SliceRandom;
use rand::Rng;

pub const TRIGGER_PHRASE: &str = "hey device";

pub const DIRECTED_TEMPLATES: &[&str] = &[
    "set a timer for {num} minutes",
    "play {song}",
    "what's the weather in {city}",
    "call {name}",
    "send a message to {name}",
    "turn the volume up",
    "wake me up at {time}",
    "remind me to call {name} at {time}",
    "skip this song",
    "how long will it take to drive to {city}",
    "turn off the lights",
    "what time is it in {city}",
    "add milk to my shopping list",
    "set an alarm for {time}",
    "pause the music",
    "navigate to {city}",
    "read my new messages",
    "what is {num} times {num}",
    "shuffle my {song} playlist",
    "turn the temperature down to {num} degrees",
    "open the camera",
    "text {name} i'm running late",
];

pub const BACKGROUND_TEMPLATES: &[&str] = &[
    "i told {name} we would be there by {time}",
    "did you see the game last night",
    "{name} said the {song} concert was great",
    "we drove to {city} last summer",
    "i think it costs about {num} dollars",
    "no i don't want to go yet",
    "can you pass me the salt please",
    "my sister moved to {city} when she was {num}",
    "that movie was way too long",
    "let's just meet at {time} tomorrow",
    "he keeps humming {song} all day",
    "so anyway she left early",
    "welcome back to the show everyone",
    "in other news the market fell {num} points",
    "i'll be right there honey",
    "where did you put my keys",
    "and then {name} just started laughing",
    "the traffic in {city} is terrible",
    "our next guest needs no introduction",
    "hold on i'm on the phone",
    "you should have seen the look on his face",
    "yeah i read about that somewhere",
];

const SONGS: &[&str] = &[
    "yellow submarine",
    "blue skies",
    "river song",
    "golden hour",
    "night drive",
    "paper planes",
    "summer rain",
    "city lights",
];
const NAMES: &[&str] = &[
    "anna", "mark", "lucia", "tom", "priya", "jonas", "mei", "omar", "sara", "leo",
];
const CITIES: &[&str] = &[
    "paris", "boston", "tokyo", "berlin", "lagos", "lima", "oslo", "denver", "madrid",
];
const TIMES: &[&str] = &[
    "seven am",
    "six thirty",
    "noon",
    "eight fifteen",
    "nine pm",
    "half past ten",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Command,
    Background,
}

impl Pool {
    pub fn templates(self) -> &'static [&'static str] {
        match self {
            Pool::Command => DIRECTED_TEMPLATES,
            Pool::Background => BACKGROUND_TEMPLATES,
        }
    }

    /// Returns true if `text` (with any leading trigger phrase removed) is an
    /// instance of one of this pool's templates.
    pub fn contains(self, text: &str) -> bool {
        let body = strip_trigger(text);
        self.templates().iter().any(|t| matches_template(t, body))
    }
}

pub fn strip_trigger(text: &str) -> &str {
    text.strip_prefix(TRIGGER_PHRASE)
        .map(str::trim_start)
        .unwrap_or(text)
}

fn fill_slot<R: Rng>(slot: &str, rng: &mut R) -> String {
    match slot {
        "num" => rng.gen_range(2..60u32).to_string(),
        "song" => SONGS.choose(rng).unwrap().to_string(),
        "name" => NAMES.choose(rng).unwrap().to_string(),
        "city" => CITIES.choose(rng).unwrap().to_string(),
        "time" => TIMES.choose(rng).unwrap().to_string(),
        other => panic!("unknown template slot {other}"),
    }
}

/// Instantiates a template, filling each `{slot}` independently.
pub fn render<R: Rng>(template: &str, rng: &mut R) -> String {
    let mut out = String::with_capacity(template.len() + 16);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').expect("unterminated slot");
        out.push_str(&fill_slot(&rest[open + 1..close], rng));
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    out
}

pub fn sample<R: Rng>(pool: Pool, rng: &mut R) -> (usize, String) {
    let templates = pool.templates();
    let idx = rng.gen_range(0..templates.len());
    (idx, render(templates[idx], rng))
}

fn literal_segments(template: &str) -> Vec<&str> {
    let mut segs = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        segs.push(&rest[..open]);
        let close = open + rest[open..].find('}').unwrap();
        rest = &rest[close + 1..];
    }
    segs.push(rest);
    segs
}

/// Anchored match of the template's literal segments, slots matching any
/// non-empty span.
fn matches_template(template: &str, text: &str) -> bool {
    let segs = literal_segments(template);
    if segs.len() == 1 {
        return text == segs[0];
    }
    let (first, last) = (segs[0], segs[segs.len() - 1]);
    if !text.starts_with(first) || !text.ends_with(last) || text.len() < first.len() + last.len()
    {
        return false;
    }
    let mut hay = &text[first.len()..text.len() - last.len()];
    for mid in &segs[1..segs.len() - 1] {
        // each slot consumes at least one byte before the next literal
        match hay.get(1..).and_then(|h| h.find(mid)) {
            Some(pos) => hay = &hay[1 + pos + mid.len()..],
            None => return false,
        }
    }
    !hay.is_empty()
}

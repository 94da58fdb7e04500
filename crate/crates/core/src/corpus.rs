//! Synthetic marketplace corpus with planted toxic campaigns.
//!
//! Item text is an undelimited stream of pseudo-words, so retrieval has to
//! work on arbitrary substrings. Benign items draw from a shared vocabulary
//! and a per-category vocabulary. Toxic items belong to a campaign and are
//! rendered from the campaign template: every member carries all of the
//! campaign's signature phrases verbatim, surrounded by disguise words that
//! also occur in benign listings of the same category. Signature phrases are
//! the only place digits occur, which is what keeps them out of benign text.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::rng::{mix, stream, stream_rng, Rng};

const CATEGORY_NAMES: [&str; 12] = [
    "electronics",
    "apparel",
    "pets",
    "books",
    "beauty",
    "toys",
    "sports",
    "home",
    "health",
    "tickets",
    "collectibles",
    "services",
];

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";
const DIGITS: &[u8] = b"0123456789";

const SHARED_WORDS: usize = 120;
const CATEGORY_WORDS: usize = 150;
/// Disguise words skip this many of the most frequent category words.
const DISGUISE_MIN_RANK: usize = 30;
const MAX_REGENERATIONS: usize = 10_000;

/// Maximum characters in an annotated signature phrase and the minimum of a
/// verbose annotation.
pub const SHORT_PHRASE_MAX: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid corpus configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("requested {requested} reports but only {available} toxic items exist")]
    Capacity { requested: usize, available: usize },
    #[error("generation failed: {0}")]
    Generation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Category(pub u16);

impl Category {
    pub fn name(self) -> &'static str {
        CATEGORY_NAMES.get(self.0 as usize).copied().unwrap_or("other")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: u64,
    pub category: Category,
    pub is_toxic: bool,
    pub campaign_id: Option<u32>,
    pub text: String,
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Campaign {
    pub id: u32,
    pub category: Category,
    pub signature_phrases: Vec<String>,
    pub disguise_vocabulary: Vec<String>,
    /// Slot sequence: `{sN}` signature N, `{d}` disguise word, `{g}` generic
    /// word.
    pub template: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub item_id: u64,
    pub oracle_keywords: Vec<String>,
    pub tick: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_items: usize,
    pub toxic_fraction: f64,
    pub n_campaigns: usize,
    pub n_categories: usize,
    pub annotation_noise: f64,
    /// Time period of the item draw. Campaigns and vocabulary depend only on
    /// `seed`, so corpora that differ only in `period` share campaigns.
    pub period: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_items: 10_000,
            toxic_fraction: 0.05,
            n_campaigns: 10,
            n_categories: 6,
            annotation_noise: 0.3,
            period: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: &str| Err(CorpusError::Config(msg.to_string()));
        if self.n_items == 0 {
            return bad("n_items must be > 0");
        }
        if !(0.0..=1.0).contains(&self.toxic_fraction) {
            return bad("toxic_fraction must lie in [0, 1]");
        }
        if self.toxic_fraction > 0.0 && self.n_campaigns == 0 {
            return bad("n_campaigns must be >= 1 when toxic_fraction > 0");
        }
        if self.n_categories == 0 || self.n_categories > CATEGORY_NAMES.len() {
            return Err(CorpusError::Config(format!(
                "n_categories must lie in [1, {}]",
                CATEGORY_NAMES.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.annotation_noise) {
            return bad("annotation_noise must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn toxic_count(&self) -> usize {
        libm::round(self.n_items as f64 * self.toxic_fraction) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub campaigns: Vec<Campaign>,
    pub items: Vec<Item>,
}

impl Corpus {
    pub fn item(&self, id: u64) -> Option<&Item> {
        // ids are positions for generated corpora; fall back to a scan for
        // hand-built ones
        match self.items.get(id as usize) {
            Some(item) if item.id == id => Some(item),
            _ => self.items.iter().find(|i| i.id == id),
        }
    }

    pub fn campaign(&self, id: u32) -> Option<&Campaign> {
        self.campaigns.iter().find(|c| c.id == id)
    }

    pub fn toxic_items(&self) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(|i| i.is_toxic)
    }
}

/// Pseudo-word pools shared by every period of a seed.
struct Vocabulary {
    shared: Vec<String>,
    shared_weights: WeightedIndex<f64>,
    by_category: Vec<Vec<String>>,
    category_weights: WeightedIndex<f64>,
}

fn zipf_weights(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|r| 1.0 / (r as f64 + 2.0))).expect("non-empty pool")
}

fn syllable(rng: &mut Rng, out: &mut String) {
    out.push(*CONSONANTS.choose(rng).unwrap() as char);
    out.push(*VOWELS.choose(rng).unwrap() as char);
}

fn pseudo_word(rng: &mut Rng) -> String {
    let syllables = match rng.random_range(0..20) {
        0..=2 => 1,
        3..=13 => 2,
        _ => 3,
    };
    let mut w = String::new();
    for _ in 0..syllables {
        syllable(rng, &mut w);
    }
    w
}

impl Vocabulary {
    fn new(seed: u64, n_categories: usize) -> Self {
        let mut rng = stream_rng(seed, stream::VOCABULARY);
        let mut seen = BTreeSet::new();
        let mut draw = |rng: &mut Rng, n: usize| {
            let mut words = Vec::with_capacity(n);
            while words.len() < n {
                let w = pseudo_word(rng);
                if seen.insert(w.clone()) {
                    words.push(w);
                }
            }
            words
        };
        let shared = draw(&mut rng, SHARED_WORDS);
        let by_category = (0..n_categories).map(|_| draw(&mut rng, CATEGORY_WORDS)).collect();
        Self {
            shared,
            shared_weights: zipf_weights(SHARED_WORDS),
            by_category,
            category_weights: zipf_weights(CATEGORY_WORDS),
        }
    }

    fn generic_word(&self, rng: &mut Rng, category: Category) -> &str {
        if rng.random_bool(0.3) {
            &self.shared[self.shared_weights.sample(rng)]
        } else {
            &self.by_category[category.0 as usize][self.category_weights.sample(rng)]
        }
    }

    fn benign_text(&self, rng: &mut Rng, category: Category) -> String {
        let n = rng.random_range(5..=9);
        let mut text = String::new();
        for _ in 0..n {
            text.push_str(self.generic_word(rng, category));
        }
        text
    }
}

fn signature_phrase(rng: &mut Rng) -> String {
    let len = rng.random_range(2..=SHORT_PHRASE_MAX);
    let mut chars: Vec<u8> = Vec::with_capacity(len);
    while chars.len() < len {
        chars.push(*CONSONANTS.choose(rng).unwrap());
        if chars.len() < len {
            chars.push(*VOWELS.choose(rng).unwrap());
        }
    }
    let n_digits = if len >= 6 { 2 } else { 1 };
    for pos in index::sample(rng, len, n_digits) {
        chars[pos] = *DIGITS.choose(rng).unwrap();
    }
    chars.into_iter().map(char::from).collect()
}

fn make_campaigns(config: &CorpusConfig, vocab: &Vocabulary) -> Vec<Campaign> {
    let mut rng = stream_rng(config.seed, stream::CAMPAIGNS);
    let mut all_phrases: Vec<String> = Vec::new();
    let mut campaigns = Vec::with_capacity(config.n_campaigns);
    for id in 0..config.n_campaigns {
        let category = Category(rng.random_range(0..config.n_categories) as u16);
        let n_sig = rng.random_range(1..=5);
        let mut phrases = Vec::with_capacity(n_sig);
        while phrases.len() < n_sig {
            let p = signature_phrase(&mut rng);
            // no phrase may contain another, so membership stays unambiguous
            let clash = all_phrases
                .iter()
                .any(|q| q.contains(p.as_str()) || p.contains(q.as_str()));
            if !clash {
                all_phrases.push(p.clone());
                phrases.push(p);
            }
        }
        let pool = &vocab.by_category[category.0 as usize];
        let n_disguise = rng.random_range(3..=5);
        // jargon comes from the rarer part of the category vocabulary
        let rare = &pool[DISGUISE_MIN_RANK..];
        let disguise: Vec<String> = index::sample(&mut rng, rare.len(), n_disguise)
            .into_iter()
            .map(|i| rare[i].clone())
            .collect();

        let mut slots: Vec<String> = (0..n_sig).map(|i| format!("{{s{i}}}")).collect();
        for _ in 0..rng.random_range(2..=3) {
            slots.push("{d}".to_string());
        }
        for _ in 0..rng.random_range(1..=2) {
            slots.push("{g}".to_string());
        }
        slots.shuffle(&mut rng);
        campaigns.push(Campaign {
            id: id as u32,
            category,
            signature_phrases: phrases,
            disguise_vocabulary: disguise,
            template: slots.concat(),
        });
    }
    campaigns
}

enum Slot {
    Signature(usize),
    Disguise,
    Generic,
}

fn parse_template(template: &str) -> Vec<Slot> {
    template
        .split('}')
        .filter(|s| !s.is_empty())
        .map(|s| match s.trim_start_matches('{') {
            "d" => Slot::Disguise,
            "g" => Slot::Generic,
            sig => Slot::Signature(sig[1..].parse().unwrap_or(0)),
        })
        .collect()
}

fn campaign_text(rng: &mut Rng, campaign: &Campaign, vocab: &Vocabulary) -> String {
    let mut parts: Vec<&str> = Vec::new();
    for slot in parse_template(&campaign.template) {
        match slot {
            Slot::Signature(i) => parts.push(&campaign.signature_phrases[i]),
            Slot::Disguise => parts.push(campaign.disguise_vocabulary.choose(rng).unwrap()),
            Slot::Generic => parts.push(vocab.generic_word(rng, campaign.category)),
        }
    }
    for _ in 0..rng.random_range(0..=2) {
        let pos = rng.random_range(0..=parts.len());
        parts.insert(pos, vocab.generic_word(rng, campaign.category));
    }
    parts.concat()
}

/// Generates the corpus for `config`. Pure in `config`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    config.validate()?;
    let vocab = Vocabulary::new(config.seed, config.n_categories);
    let campaigns = if config.n_campaigns > 0 {
        make_campaigns(config, &vocab)
    } else {
        Vec::new()
    };

    let mut rng = stream_rng(mix(config.seed, config.period as u64), stream::ITEMS);
    let n_toxic = config.toxic_count();
    let mut toxic_slots = index::sample(&mut rng, config.n_items, n_toxic).into_vec();
    toxic_slots.sort_unstable();
    let mut membership: Vec<Option<u32>> = alloc::vec![None; config.n_items];
    let mut order: Vec<usize> = (0..n_toxic).collect();
    order.shuffle(&mut rng);
    for (k, &pos) in order.iter().enumerate() {
        membership[toxic_slots[pos]] = Some((k % campaigns.len().max(1)) as u32);
    }

    let mut items = Vec::with_capacity(config.n_items);
    for (pos, member) in membership.iter().enumerate() {
        let item = match member {
            Some(cid) => {
                let campaign = &campaigns[*cid as usize];
                Item {
                    id: pos as u64,
                    category: campaign.category,
                    is_toxic: true,
                    campaign_id: Some(*cid),
                    text: campaign_text(&mut rng, campaign, &vocab),
                    created_at: pos as u64,
                }
            }
            None => {
                let category = Category(rng.random_range(0..config.n_categories) as u16);
                Item {
                    id: pos as u64,
                    category,
                    is_toxic: false,
                    campaign_id: None,
                    text: vocab.benign_text(&mut rng, category),
                    created_at: pos as u64,
                }
            }
        };
        items.push(item);
    }

    // A signature phrase can still form across a slot boundary inside another
    // campaign's item; redraw such items until the corpus is separable.
    let mut regenerations = 0;
    loop {
        let offender = items.iter().position(|item| {
            item.campaign_id.is_some_and(|own| {
                campaigns
                    .iter()
                    .any(|c| c.id != own && c.signature_phrases.iter().any(|p| item.text.contains(p.as_str())))
            })
        });
        let Some(pos) = offender else { break };
        regenerations += 1;
        if regenerations > MAX_REGENERATIONS {
            return Err(CorpusError::Generation(
                "could not separate campaign signature phrases".to_string(),
            ));
        }
        let campaign = &campaigns[items[pos].campaign_id.unwrap() as usize];
        items[pos].text = campaign_text(&mut rng, campaign, &vocab);
    }

    Ok(Corpus {
        config: config.clone(),
        campaigns,
        items,
    })
}

/// Character positions of `text` covered by any of `phrases`.
fn covered_positions(text: &[char], phrases: &[String]) -> Vec<bool> {
    let mut covered = alloc::vec![false; text.len()];
    for p in phrases {
        let pc: Vec<char> = p.chars().collect();
        if pc.is_empty() || pc.len() > text.len() {
            continue;
        }
        for start in 0..=text.len() - pc.len() {
            if text[start..start + pc.len()] == pc[..] {
                covered[start..start + pc.len()].iter_mut().for_each(|c| *c = true);
            }
        }
    }
    covered
}

/// A span longer than [`SHORT_PHRASE_MAX`] that contains a signature phrase.
fn verbose_phrase(rng: &mut Rng, text: &[char], campaign: &Campaign) -> Option<String> {
    if text.len() <= SHORT_PHRASE_MAX {
        return None;
    }
    let text_s: String = text.iter().collect();
    let sig = campaign.signature_phrases.choose(rng)?;
    let byte_pos = text_s.find(sig.as_str())?;
    let start_char = text_s[..byte_pos].chars().count();
    let sig_len = sig.chars().count();
    let target = rng
        .random_range(SHORT_PHRASE_MAX + 1..=SHORT_PHRASE_MAX + 6)
        .min(text.len());
    let extra = target - sig_len;
    let max_left = extra.min(start_char);
    let min_left = extra.saturating_sub(text.len() - start_char - sig_len);
    if min_left > max_left {
        return None;
    }
    let left = rng.random_range(min_left..=max_left);
    let begin = start_char - left;
    Some(text[begin..begin + target].iter().collect())
}

/// A 6-9 character fragment away from every signature that joins part of a
/// disguise word to part of an item-specific generic word, so it rarely
/// recurs in other items.
fn filler_fragment(rng: &mut Rng, text: &[char], campaign: &Campaign) -> Option<String> {
    let signature = covered_positions(text, &campaign.signature_phrases);
    let disguise = covered_positions(text, &campaign.disguise_vocabulary);
    let mut windows = Vec::new();
    for len in 6..=9usize.min(text.len()) {
        for begin in 0..=text.len() - len {
            let span = begin..begin + len;
            if signature[span.clone()].iter().any(|&c| c) {
                continue;
            }
            let generic = span.filter(|&i| !disguise[i]).count();
            if generic >= 2 && generic < len {
                windows.push((begin, len));
            }
        }
    }
    let &(begin, len) = windows.choose(rng)?;
    Some(text[begin..begin + len].iter().collect())
}

fn disguise_word(rng: &mut Rng, text: &str, campaign: &Campaign) -> Option<String> {
    let present: Vec<&String> = campaign
        .disguise_vocabulary
        .iter()
        .filter(|w| text.contains(w.as_str()))
        .collect();
    present.choose(rng).map(|w| (*w).clone())
}

/// Simulated auditor annotation of a reported toxic item.
///
/// With probability `1 - noise` the annotation names one or two of the
/// campaign's signature phrases. Otherwise it names imperfect phrases only:
/// a verbose span around a signature, a filler fragment, or a disguise word.
/// Every keyword is a substring of the item text.
pub fn oracle_annotate(item: &Item, campaign: &Campaign, noise: f64, seed: u64) -> Result<Vec<String>, CorpusError> {
    if !item.is_toxic || item.campaign_id != Some(campaign.id) {
        return Err(CorpusError::Contract(format!(
            "item {} is not a toxic member of campaign {}",
            item.id, campaign.id
        )));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(CorpusError::Contract("noise must lie in [0, 1]".to_string()));
    }
    let mut rng = stream_rng(mix(seed, item.id), stream::ANNOTATE);
    let wanted = if rng.random_bool(0.8) { 1 } else { 2 };
    let noisy = rng.random_bool(noise);
    let mut keywords: Vec<String> = Vec::new();

    if !noisy {
        let n = wanted.min(campaign.signature_phrases.len());
        for i in index::sample(&mut rng, campaign.signature_phrases.len(), n) {
            keywords.push(campaign.signature_phrases[i].clone());
        }
        return Ok(keywords);
    }

    let chars: Vec<char> = item.text.chars().collect();
    let mut attempts = 0;
    while keywords.len() < wanted && attempts < 16 {
        attempts += 1;
        let phrase = match rng.random_range(0..3) {
            0 => verbose_phrase(&mut rng, &chars, campaign),
            1 => filler_fragment(&mut rng, &chars, campaign),
            _ => disguise_word(&mut rng, &item.text, campaign),
        };
        if let Some(p) = phrase {
            let is_signature = campaign.signature_phrases.contains(&p);
            if !is_signature && !keywords.contains(&p) {
                keywords.push(p);
            }
        }
    }
    if keywords.is_empty() {
        // last resort: the whole text is always verbose enough to differ
        // from every signature phrase unless the item is a bare signature
        let whole = item.text.clone();
        if !campaign.signature_phrases.contains(&whole) {
            keywords.push(whole);
        }
    }
    Ok(keywords)
}

/// Samples `n` distinct toxic items uniformly and annotates each of them.
pub fn sample_reports(corpus: &Corpus, n: usize, seed: u64) -> Result<Vec<Report>, CorpusError> {
    let toxic: Vec<&Item> = corpus.toxic_items().collect();
    if n > toxic.len() {
        return Err(CorpusError::Capacity {
            requested: n,
            available: toxic.len(),
        });
    }
    let mut rng = stream_rng(seed, stream::REPORTS);
    let mut picks = index::sample(&mut rng, toxic.len(), n).into_vec();
    picks.sort_unstable();
    let mut reports = Vec::with_capacity(n);
    for (tick, pos) in picks.into_iter().enumerate() {
        let item = toxic[pos];
        let campaign = item
            .campaign_id
            .and_then(|cid| corpus.campaign(cid))
            .ok_or_else(|| CorpusError::Contract(format!("item {} lacks a campaign", item.id)))?;
        let oracle_keywords = oracle_annotate(item, campaign, corpus.config.annotation_noise, seed)?;
        reports.push(Report {
            item_id: item.id,
            oracle_keywords,
            tick: tick as u64,
        });
    }
    Ok(reports)
}

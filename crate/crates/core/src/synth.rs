//! Deterministic generator for the bundled synthetic corpora.
//!
//! Two topical domains ("nature", "finance") each own a few dozen
//! invented cue words built from domain-specific syllables. Pivot words such
//! as `bank` appear in both and take their sense from the surrounding cues.
//! A separate sentence family exercises part-of-speech ambiguity: words such
//! as `duck` are nouns after a determiner or adjective and verbs after a
//! pronoun, adverb or noun. A third domain ("harbor") only appears in the
//! domain-shift corpus used for fine-tuning.

use std::fs;
use std::path::Path;

use crate::data::{format_sense_example, format_tagged, SenseExample, Sentence, TaggedSentence};
use crate::error::Result;
use crate::rng::SeedRng;

pub const PIVOTS: [&str; 6] = ["bank", "branch", "current", "spring", "note", "bill"];
pub const POS_AMBIGUOUS: [&str; 6] = ["duck", "fish", "watch", "park", "ring", "drum"];

const NATURE_SYLLABLES: [&str; 12] = ["ver", "lo", "mar", "fen", "wil", "bro", "ash", "tal", "ree", "mos", "ful", "dun"];
const FINANCE_SYLLABLES: [&str; 12] = ["cap", "dex", "mon", "tra", "quo", "vis", "pex", "lun", "sto", "gar", "rix", "zel"];
const HARBOR_SYLLABLES: [&str; 8] = ["kai", "po", "nu", "hem", "sab", "oru", "yel", "ist"];

const VERBS: [&str; 8] = ["saw", "held", "found", "moved", "kept", "left", "made", "took"];
const ADJS: [&str; 6] = ["old", "new", "small", "bright", "quiet", "red"];
const ADVS: [&str; 5] = ["today", "again", "slowly", "there", "often"];
const NATURE_VERBS: [&str; 6] = ["grew", "flowed", "bloomed", "drifted", "rustled", "faded"];
const FINANCE_VERBS: [&str; 6] = ["traded", "paid", "invested", "lent", "audited", "billed"];
const NATURE_ADJS: [&str; 4] = ["mossy", "wild", "muddy", "green"];
const FINANCE_ADJS: [&str; 4] = ["fiscal", "liquid", "net", "annual"];
const FILLERS: [&[&str]; 5] = [
    &["as", "we", "said"],
    &["for", "a", "while"],
    &["at", "dawn"],
    &["once", "more"],
    &["so", "they", "say"],
];

const NOUNS: [&str; 10] = ["dog", "cat", "bird", "tree", "river", "road", "house", "car", "boy", "girl"];
const POS_VERBS: [&str; 6] = ["saw", "liked", "found", "chased", "heard", "met"];
const SUBJ: [&str; 4] = ["we", "they", "you", "i"];
const OBJ: [&str; 4] = ["them", "us", "him", "her"];
const DETS: [&str; 4] = ["the", "a", "this", "that"];
const ADPS: [&str; 4] = ["under", "near", "over", "behind"];

/// Chance that a verb or adjective slot in pretraining text is filled with
/// a domain-specific word. Labelled corpora use shared words only, so the
/// only domain evidence they carry is the cue words themselves.
pub const PRETRAIN_RICHNESS: f64 = 0.5;

/// Seed used for the corpora shipped in `data/`.
pub const DEFAULT_SEED: u64 = 2018;

/// Cue words per topical domain.
pub const CUES_PER_DOMAIN: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Nature,
    Finance,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Nature, Domain::Finance];

    /// Tag used in the tagging task.
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Nature => "NAT",
            Domain::Finance => "FIN",
        }
    }

    /// Sense number of every pivot in this domain (1-based, as in `bank%1`).
    pub fn sense(self) -> usize {
        match self {
            Domain::Nature => 1,
            Domain::Finance => 2,
        }
    }
}

/// A generated topical sentence with its pivot position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSentence {
    pub tokens: Sentence,
    pub tags: Vec<String>,
    pub pivot: usize,
    pub domain: Domain,
}

impl DomainSentence {
    pub fn sense_example(&self) -> SenseExample {
        let lemma = self.tokens[self.pivot].clone();
        SenseExample {
            sense: format!("{lemma}%{}", self.domain.sense()),
            lemma,
            tokens: self.tokens.clone(),
            target_index: self.pivot,
        }
    }

    pub fn tagged(&self) -> TaggedSentence {
        TaggedSentence {
            tokens: self.tokens.clone(),
            tags: self.tags.clone(),
        }
    }
}

/// Invented words from a syllable set: every two-syllable word in a seeded
/// order, then three-syllable words until `n` are drawn.
fn cue_words(syllables: &[&str], n: usize, rng: &mut SeedRng) -> Vec<String> {
    let mut two: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().filter(move |b| *b != a).map(move |b| format!("{a}{b}")))
        .collect();
    rng.shuffle(&mut two);
    let mut out: Vec<String> = Vec::with_capacity(n);
    for w in two {
        if out.len() == n {
            return out;
        }
        out.push(w);
    }
    while out.len() < n {
        let w = format!("{}{}{}", rng.pick(syllables), rng.pick(syllables), rng.pick(syllables));
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// Which cue words a corpus may use. The tagging task trains on the first
/// half of each domain's cues and is evaluated on the second half, so its
/// dev cues are known only from unlabeled pretraining text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CuePool {
    All,
    First,
    Second,
}

/// Vocabularies shared by every corpus generated from one seed.
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub nature: Vec<String>,
    pub finance: Vec<String>,
    pub harbor: Vec<String>,
}

impl Lexicon {
    pub fn new(seed: u64) -> Self {
        let root = SeedRng::new(seed).split("lexicon");
        Lexicon {
            nature: cue_words(&NATURE_SYLLABLES, CUES_PER_DOMAIN, &mut root.split("nature")),
            finance: cue_words(&FINANCE_SYLLABLES, CUES_PER_DOMAIN, &mut root.split("finance")),
            harbor: cue_words(&HARBOR_SYLLABLES, 60, &mut root.split("harbor")),
        }
    }

    pub fn cues(&self, domain: Domain) -> &[String] {
        match domain {
            Domain::Nature => &self.nature,
            Domain::Finance => &self.finance,
        }
    }

    /// The part of a domain's cue list a corpus may draw from.
    pub fn cue_pool(&self, domain: Domain, pool: CuePool) -> &[String] {
        let all = self.cues(domain);
        let half = all.len() / 2;
        match pool {
            CuePool::All => all,
            CuePool::First => &all[..half],
            CuePool::Second => &all[half..],
        }
    }

    /// A topical sentence. Each verb and adjective slot is filled with a
    /// domain-specific word with probability `rich`, else a shared one.
    pub fn domain_sentence(&self, domain: Domain, pivot: &str, rich: f64, rng: &mut SeedRng) -> DomainSentence {
        self.domain_sentence_from(domain, pivot, rich, CuePool::All, rng)
    }

    /// As [`Lexicon::domain_sentence`] with cues restricted to `pool`.
    pub fn domain_sentence_from(
        &self,
        domain: Domain,
        pivot: &str,
        rich: f64,
        pool: CuePool,
        rng: &mut SeedRng,
    ) -> DomainSentence {
        #[derive(Clone, Copy)]
        enum S {
            W(&'static str),
            Cue,
            Pivot,
            Verb,
            Adj,
            Adv,
            Filler,
        }
        use S::*;
        const TEMPLATES: [&[S]; 6] = [
            &[W("the"), Cue, Verb, W("the"), Pivot, Filler, W("near"), W("the"), Cue],
            &[Cue, W("and"), Cue, Verb, W("by"), W("the"), Pivot, Adv],
            &[W("a"), Adj, Cue, Verb, W("the"), Pivot, W("with"), Cue],
            &[W("the"), Pivot, W("of"), W("the"), Cue, Filler, Verb, W("a"), Cue],
            &[W("every"), Cue, Verb, W("that"), W("the"), Pivot, Verb, Cue, Adv],
            &[Cue, Verb, Filler, W("the"), Adj, Pivot, W("and"), Cue],
        ];
        let template = *rng.pick(&TEMPLATES);
        let cues = self.cue_pool(domain, pool);
        let (dom_verbs, dom_adjs) = match domain {
            Domain::Nature => (&NATURE_VERBS, &NATURE_ADJS),
            Domain::Finance => (&FINANCE_VERBS, &FINANCE_ADJS),
        };
        let (mut tokens, mut tags) = (Vec::new(), Vec::new());
        let mut pivot_at = None;
        for slot in template {
            let template_pos = tokens.len();
            let mut push = |w: &str, tag: &str| {
                tokens.push(w.to_string());
                tags.push(tag.to_string());
            };
            match *slot {
                W(w) => push(w, "O"),
                Cue => push(rng.pick(cues), domain.tag()),
                Pivot => {
                    pivot_at = Some(template_pos);
                    push(pivot, domain.tag());
                }
                Verb if rng.chance(rich) => push(rng.pick(dom_verbs), "O"),
                Verb => push(rng.pick(&VERBS), "O"),
                Adj if rng.chance(rich) => push(rng.pick(dom_adjs), "O"),
                Adj => push(rng.pick(&ADJS), "O"),
                Adv => push(rng.pick(&ADVS), "O"),
                Filler => {
                    if rng.chance(0.5) {
                        for w in *rng.pick(&FILLERS) {
                            push(w, "O");
                        }
                    }
                }
            }
        }
        DomainSentence {
            tokens,
            tags,
            pivot: pivot_at.expect("every template has a pivot"),
            domain,
        }
    }

    /// A sentence from the part-of-speech family. The ambiguous word is
    /// tagged NOUN after a determiner or adjective and VERB otherwise.
    pub fn pos_sentence(&self, rng: &mut SeedRng) -> TaggedSentence {
        let amb = *rng.pick(&POS_AMBIGUOUS);
        let mut out: Vec<(&str, &str)> = Vec::new();
        match rng.below(6) {
            0 => out.extend([
                (*rng.pick(&DETS), "DET"),
                (amb, "NOUN"),
                (*rng.pick(&POS_VERBS), "VERB"),
                (*rng.pick(&DETS), "DET"),
                (*rng.pick(&NOUNS), "NOUN"),
                (*rng.pick(&ADVS), "ADV"),
            ]),
            1 => out.extend([
                (*rng.pick(&SUBJ), "PRON"),
                (amb, "VERB"),
                (*rng.pick(&DETS), "DET"),
                (*rng.pick(&ADJS), "ADJ"),
                (*rng.pick(&NOUNS), "NOUN"),
            ]),
            2 => out.extend([
                (*rng.pick(&DETS), "DET"),
                (*rng.pick(&ADJS), "ADJ"),
                (amb, "NOUN"),
                (*rng.pick(&POS_VERBS), "VERB"),
                (*rng.pick(&OBJ), "PRON"),
            ]),
            3 => out.extend([
                (*rng.pick(&SUBJ), "PRON"),
                (*rng.pick(&POS_VERBS), "VERB"),
                (*rng.pick(&DETS), "DET"),
                (amb, "NOUN"),
                (*rng.pick(&ADVS), "ADV"),
            ]),
            4 => out.extend([
                (*rng.pick(&SUBJ), "PRON"),
                (*rng.pick(&ADVS), "ADV"),
                (amb, "VERB"),
                (*rng.pick(&ADPS), "ADP"),
                (*rng.pick(&DETS), "DET"),
                (*rng.pick(&NOUNS), "NOUN"),
            ]),
            _ => out.extend([
                (*rng.pick(&DETS), "DET"),
                (*rng.pick(&NOUNS), "NOUN"),
                (amb, "VERB"),
                (*rng.pick(&OBJ), "PRON"),
                (*rng.pick(&ADVS), "ADV"),
            ]),
        }
        TaggedSentence {
            tokens: out.iter().map(|(w, _)| w.to_string()).collect(),
            tags: out.iter().map(|(_, t)| t.to_string()).collect(),
        }
    }

    /// A sentence from the domain-shift corpus: new cue words and new
    /// sentence shapes.
    pub fn shift_sentence(&self, rng: &mut SeedRng) -> Sentence {
        let c = |rng: &mut SeedRng| rng.pick(&self.harbor).clone();
        let words: Vec<String> = match rng.below(3) {
            0 => vec![
                "at".into(),
                "the".into(),
                c(rng),
                "pier".into(),
                c(rng),
                "crews".into(),
                "unload".into(),
                c(rng),
            ],
            1 => vec![
                c(rng),
                "boats".into(),
                "drift".into(),
                "past".into(),
                c(rng),
                "at".into(),
                "low".into(),
                "tide".into(),
            ],
            _ => vec![
                "sailors".into(),
                "tie".into(),
                c(rng),
                "ropes".into(),
                "to".into(),
                "the".into(),
                c(rng),
                "mast".into(),
            ],
        };
        words
    }

    /// Balanced sentences: domains alternate, pivots cycle.
    pub fn domain_sentences(&self, n: usize, rich: f64, rng: &mut SeedRng) -> Vec<DomainSentence> {
        self.domain_sentences_from(n, rich, CuePool::All, rng)
    }

    pub fn domain_sentences_from(&self, n: usize, rich: f64, pool: CuePool, rng: &mut SeedRng) -> Vec<DomainSentence> {
        (0..n)
            .map(|i| {
                let domain = Domain::ALL[i % 2];
                let pivot = PIVOTS[(i / 2) % PIVOTS.len()];
                self.domain_sentence_from(domain, pivot, rich, pool, rng)
            })
            .collect()
    }
}

/// Every bundled corpus.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub pretrain: Vec<Sentence>,
    pub toy: Vec<Sentence>,
    pub shift: Vec<Sentence>,
    pub wsd_train: Vec<SenseExample>,
    pub wsd_test: Vec<SenseExample>,
    pub pos_train: Vec<TaggedSentence>,
    pub pos_dev: Vec<TaggedSentence>,
    pub task_train: Vec<TaggedSentence>,
    pub task_dev: Vec<TaggedSentence>,
}

#[derive(Clone, Copy, Debug)]
pub struct BundleSizes {
    pub pretrain_domain: usize,
    pub pretrain_pos: usize,
    pub toy: usize,
    pub shift: usize,
    pub wsd_train: usize,
    pub wsd_test: usize,
    pub pos_train: usize,
    pub pos_dev: usize,
    pub task_train: usize,
    pub task_dev: usize,
}

impl Default for BundleSizes {
    fn default() -> Self {
        BundleSizes {
            pretrain_domain: 2400,
            pretrain_pos: 800,
            toy: 200,
            shift: 400,
            wsd_train: 240,
            wsd_test: 240,
            pos_train: 300,
            pos_dev: 200,
            task_train: 120,
            task_dev: 200,
        }
    }
}

pub fn generate(seed: u64, sizes: &BundleSizes) -> Bundle {
    let lex = Lexicon::new(seed);
    let root = SeedRng::new(seed).split("bundle");
    let mut pre_rng = root.split("pretrain");
    let mut pretrain: Vec<Sentence> = Vec::with_capacity(sizes.pretrain_domain + sizes.pretrain_pos);
    for s in lex.domain_sentences(sizes.pretrain_domain, PRETRAIN_RICHNESS, &mut pre_rng) {
        pretrain.push(s.tokens);
    }
    for _ in 0..sizes.pretrain_pos {
        pretrain.push(lex.pos_sentence(&mut pre_rng).tokens);
    }
    pre_rng.shuffle(&mut pretrain);
    let toy = pretrain[..sizes.toy.min(pretrain.len())].to_vec();

    let mut shift_rng = root.split("shift");
    let shift = (0..sizes.shift).map(|_| lex.shift_sentence(&mut shift_rng)).collect();

    let mut wsd_rng = root.split("wsd");
    let wsd_train = lex
        .domain_sentences(sizes.wsd_train, 0.0, &mut wsd_rng)
        .iter()
        .map(DomainSentence::sense_example)
        .collect();
    let wsd_test = lex
        .domain_sentences(sizes.wsd_test, 0.0, &mut wsd_rng)
        .iter()
        .map(DomainSentence::sense_example)
        .collect();

    let mut pos_rng = root.split("pos");
    let pos_train = (0..sizes.pos_train).map(|_| lex.pos_sentence(&mut pos_rng)).collect();
    let pos_dev = (0..sizes.pos_dev).map(|_| lex.pos_sentence(&mut pos_rng)).collect();

    let mut task_rng = root.split("task");
    let mut task_train: Vec<TaggedSentence> = lex
        .domain_sentences_from(sizes.task_train, 0.0, CuePool::First, &mut task_rng)
        .iter()
        .map(DomainSentence::tagged)
        .collect();
    task_rng.shuffle(&mut task_train);
    let task_dev = lex
        .domain_sentences_from(sizes.task_dev, 0.0, CuePool::Second, &mut task_rng)
        .iter()
        .map(DomainSentence::tagged)
        .collect();

    Bundle {
        pretrain,
        toy,
        shift,
        wsd_train,
        wsd_test,
        pos_train,
        pos_dev,
        task_train,
        task_dev,
    }
}

fn lines<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(|x| f(x) + "\n").collect()
}

/// File names used inside a bundle directory.
pub mod files {
    pub const PRETRAIN: &str = "pretrain.txt";
    pub const TOY: &str = "toy.txt";
    pub const SHIFT: &str = "shift.txt";
    pub const WSD_TRAIN: &str = "wsd_train.tsv";
    pub const WSD_TEST: &str = "wsd_test.tsv";
    pub const POS_TRAIN: &str = "pos_train.txt";
    pub const POS_DEV: &str = "pos_dev.txt";
    pub const TASK_TRAIN: &str = "task_train.txt";
    pub const TASK_DEV: &str = "task_dev.txt";
}

impl Bundle {
    /// `(file name, contents)` for every corpus.
    pub fn render(&self) -> Vec<(&'static str, String)> {
        let plain = |c: &[Sentence]| lines(c, |s| s.join(" "));
        vec![
            (files::PRETRAIN, plain(&self.pretrain)),
            (files::TOY, plain(&self.toy)),
            (files::SHIFT, plain(&self.shift)),
            (files::WSD_TRAIN, lines(&self.wsd_train, format_sense_example)),
            (files::WSD_TEST, lines(&self.wsd_test, format_sense_example)),
            (files::POS_TRAIN, lines(&self.pos_train, format_tagged)),
            (files::POS_DEV, lines(&self.pos_dev, format_tagged)),
            (files::TASK_TRAIN, lines(&self.task_train, format_tagged)),
            (files::TASK_DEV, lines(&self.task_dev, format_tagged)),
        ]
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        fs::create_dir_all(dir.as_ref())?;
        for (name, text) in self.render() {
            fs::write(dir.as_ref().join(name), text)?;
        }
        Ok(())
    }
}

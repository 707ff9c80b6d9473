//! Corpora, vocabularies and batching.
//!
//! Three text formats are read here:
//!
//! * plain corpora: one whitespace-tokenized sentence per line;
//! * sense corpora: `tokens \t target_index \t lemma \t sense_id`;
//! * tagged corpora: `token_TAG token_TAG …`, split at the last `_`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeedRng;

pub type Sentence = Vec<String>;

/// Character ids: raw UTF-8 bytes `0..=255` plus five sentinels.
pub const BOW: usize = 256;
pub const EOW: usize = 257;
pub const BOS: usize = 258;
pub const EOS: usize = 259;
pub const PAD: usize = 260;
pub const N_CHARS: usize = 261;

pub const BOS_TOKEN: &str = "<S>";
pub const EOS_TOKEN: &str = "</S>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;

/// Word id stored at padded positions of a [`SentenceBatch`].
pub const PAD_WORD: usize = usize::MAX;

pub const DEFAULT_MAX_WORD_LEN: usize = 16;

/// Fixed-width byte encoding of tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CharCodec {
    max_word_len: usize,
}

impl Default for CharCodec {
    fn default() -> Self {
        CharCodec {
            max_word_len: DEFAULT_MAX_WORD_LEN,
        }
    }
}

impl CharCodec {
    pub fn new(max_word_len: usize) -> Result<Self> {
        if max_word_len < 3 {
            return Err(Error::Argument(format!("max_word_len {max_word_len} leaves no room for characters")));
        }
        Ok(CharCodec { max_word_len })
    }

    pub fn max_word_len(&self) -> usize {
        self.max_word_len
    }

    /// `BOW`, up to `max_word_len − 2` leading bytes, `EOW`, then `PAD`.
    /// The sentence sentinels `<S>` and `</S>` encode as `BOW BOS EOW` and
    /// `BOW EOS EOW`.
    pub fn encode(&self, token: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.max_word_len);
        ids.push(BOW);
        match token {
            BOS_TOKEN => ids.push(BOS),
            EOS_TOKEN => ids.push(EOS),
            _ => ids.extend(token.bytes().take(self.max_word_len - 2).map(usize::from)),
        }
        ids.push(EOW);
        ids.resize(self.max_word_len, PAD);
        ids
    }

    /// Inverse of [`encode`](Self::encode) for tokens that were not truncated.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        if ids.first() != Some(&BOW) {
            return Err(Error::Format("character row does not start with BOW".into()));
        }
        let end = ids
            .iter()
            .position(|&c| c == EOW)
            .ok_or_else(|| Error::Format("character row has no EOW".into()))?;
        match &ids[1..end] {
            [BOS] => return Ok(BOS_TOKEN.to_string()),
            [EOS] => return Ok(EOS_TOKEN.to_string()),
            _ => {}
        }
        let bytes = ids[1..end]
            .iter()
            .map(|&c| u8::try_from(c).map_err(|_| Error::Format(format!("sentinel {c} inside a word"))))
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Word vocabulary with reserved ids `<S>=0`, `</S>=1`, `<UNK>=2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from an explicit token list (reserved ids first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[BOS_ID] != BOS_TOKEN || tokens[EOS_ID] != EOS_TOKEN || tokens[UNK_ID] != UNK_TOKEN
        {
            return Err(Error::Format("vocabulary must start with <S>, </S>, <UNK>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Keeps tokens seen at least `min_count` times, most frequent first, ties
/// broken lexicographically.
pub fn build_vocab(corpus: &[Sentence], min_count: usize) -> Result<Vocab> {
    if min_count == 0 {
        return Err(Error::Argument("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in corpus.iter().flatten() {
        *counts.entry(tok.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && ![BOS_TOKEN, EOS_TOKEN, UNK_TOKEN].contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Vocab::from_tokens(tokens)
}

/// A padded batch of sentences with `<S>`/`</S>` added.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceBatch {
    /// `[batch × t_max × max_word_len]`
    pub char_ids: Vec<usize>,
    /// `[batch × t_max]`, [`PAD_WORD`] past each sentence end.
    pub word_ids: Vec<usize>,
    /// Token counts including both sentinels.
    pub lengths: Vec<usize>,
    pub t_max: usize,
    pub max_word_len: usize,
}

impl SentenceBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Row-major `[batch × t_max]` validity mask.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.batch_size() * self.t_max];
        for (b, &len) in self.lengths.iter().enumerate() {
            m[b * self.t_max..b * self.t_max + len].iter_mut().for_each(|v| *v = true);
        }
        m
    }

    pub fn word(&self, b: usize, t: usize) -> usize {
        self.word_ids[b * self.t_max + t]
    }
}

pub fn encode_batch(sentences: &[Sentence], vocab: &Vocab, codec: &CharCodec, t_max: usize) -> Result<SentenceBatch> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus("cannot encode an empty batch".into()));
    }
    let w = codec.max_word_len();
    let n = sentences.len();
    let mut char_ids = vec![PAD; n * t_max * w];
    let mut word_ids = vec![PAD_WORD; n * t_max];
    let mut lengths = Vec::with_capacity(n);
    for (b, sent) in sentences.iter().enumerate() {
        let len = sent.len() + 2;
        if len > t_max {
            return Err(Error::Length { len, max: t_max });
        }
        let tokens = std::iter::once(BOS_TOKEN)
            .chain(sent.iter().map(String::as_str))
            .chain(std::iter::once(EOS_TOKEN));
        for (t, tok) in tokens.enumerate() {
            let at = b * t_max + t;
            word_ids[at] = match tok {
                BOS_TOKEN if t == 0 => BOS_ID,
                EOS_TOKEN if t == len - 1 => EOS_ID,
                _ => vocab.lookup(tok),
            };
            char_ids[at * w..(at + 1) * w].copy_from_slice(&codec.encode(tok));
        }
        lengths.push(len);
    }
    Ok(SentenceBatch {
        char_ids,
        word_ids,
        lengths,
        t_max,
        max_word_len: w,
    })
}

/// Encodes with the tightest `t_max` for these sentences.
pub fn encode_tight(sentences: &[Sentence], vocab: &Vocab, codec: &CharCodec) -> Result<SentenceBatch> {
    let t_max = sentences.iter().map(Vec::len).max().unwrap_or(0) + 2;
    encode_batch(sentences, vocab, codec, t_max)
}

pub fn parse_corpus(text: &str) -> Vec<Sentence> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Sentence>())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let corpus = parse_corpus(&fs::read_to_string(path)?);
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(corpus)
}

/// Seeded shuffle, then the first `⌈fraction·N⌉` sentences.
pub fn subsample<T: Clone>(corpus: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("fraction {fraction} outside (0, 1]")));
    }
    let order = SeedRng::new(seed).split("subsample").permutation(corpus.len());
    let keep = ((fraction * corpus.len() as f64) - 1e-9).ceil() as usize;
    Ok(order[..keep.min(corpus.len())].iter().map(|&i| corpus[i].clone()).collect())
}

/// Last `⌊N/10⌋` sentences as dev; the whole corpus doubles as dev when that
/// would be empty.
pub fn dev_split<T: Clone>(corpus: &[T]) -> (Vec<T>, Vec<T>) {
    let n_dev = corpus.len() / 10;
    if n_dev == 0 {
        return (corpus.to_vec(), corpus.to_vec());
    }
    let cut = corpus.len() - n_dev;
    (corpus[..cut].to_vec(), corpus[cut..].to_vec())
}

/// One sentence with a single annotated target word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SenseExample {
    pub tokens: Sentence,
    pub target_index: usize,
    pub lemma: String,
    pub sense: String,
}

pub fn parse_sense_corpus(text: &str) -> Result<Vec<SenseExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [tokens, index, lemma, sense] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        let tokens: Sentence = tokens.split_whitespace().map(str::to_string).collect();
        let target_index: usize = index.trim().parse().map_err(|_| bad("target index is not an integer"))?;
        if target_index >= tokens.len() {
            return Err(bad("target index past end of sentence"));
        }
        out.push(SenseExample {
            tokens,
            target_index,
            lemma: lemma.trim().to_string(),
            sense: sense.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn load_sense_corpus(path: impl AsRef<Path>) -> Result<Vec<SenseExample>> {
    let path = path.as_ref();
    let corpus = parse_sense_corpus(&fs::read_to_string(path)?)?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(corpus)
}

pub fn format_sense_example(ex: &SenseExample) -> String {
    format!("{}\t{}\t{}\t{}", ex.tokens.join(" "), ex.target_index, ex.lemma, ex.sense)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: Sentence,
    pub tags: Vec<String>,
}

pub fn parse_tagged_corpus(text: &str) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        for pair in line.split_whitespace() {
            let (tok, tag) = pair.rsplit_once('_').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("{pair:?} is not token_TAG"),
            })?;
            if tok.is_empty() || tag.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("{pair:?} has an empty side"),
                });
            }
            tokens.push(tok.to_string());
            tags.push(tag.to_string());
        }
        if !tokens.is_empty() {
            out.push(TaggedSentence { tokens, tags });
        }
    }
    Ok(out)
}

pub fn load_tagged_corpus(path: impl AsRef<Path>) -> Result<Vec<TaggedSentence>> {
    let path = path.as_ref();
    let corpus = parse_tagged_corpus(&fs::read_to_string(path)?)?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(corpus)
}

pub fn format_tagged(s: &TaggedSentence) -> String {
    s.tokens
        .iter()
        .zip(&s.tags)
        .map(|(t, g)| format!("{t}_{g}"))
        .collect::<Vec<_>>()
        .join(" ")
}

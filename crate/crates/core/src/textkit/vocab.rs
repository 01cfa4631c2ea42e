use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const BT_TAG: u32 = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BT_TAG_TOKEN: &str = "<bt>";

/// Suffix marking a word-final subword.
pub const END_OF_WORD: &str = "</w>";

const BASE_SPECIALS: [&str; 5] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, BT_TAG_TOKEN];

/// Token used to select a target language in multilingual training.
pub fn direction_token(target_language: &str) -> String {
    format!("<2{target_language}>")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pretokenize {
    /// Whitespace split with punctuation detached into its own words.
    #[default]
    Punct,
    /// Whitespace split only; the raw text goes straight to BPE.
    None,
}

impl Pretokenize {
    fn name(self) -> &'static str {
        match self {
            Pretokenize::Punct => "punct",
            Pretokenize::None => "none",
        }
    }
}

/// Punctuation and symbol characters, ASCII plus the common typographic ones.
pub fn is_punct_or_symbol(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '„' | '“' | '”' | '‟' | '«' | '»' | '‘' | '’' | '‚' | '‹' | '›' | '—' | '–' | '…' | '¿' | '¡' | '·' | '§' | '°'
                | '€' | '£' | '¥' | '¢' | '©' | '®' | '™' | '±' | '×' | '÷' | '。' | '，' | '、' | '！' | '？' | '：'
                | '；' | '（' | '）' | '《' | '》' | '「' | '」'
        )
}

pub fn pretokenize(text: &str, mode: Pretokenize) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        match mode {
            Pretokenize::None => words.push(chunk.to_owned()),
            Pretokenize::Punct => {
                let mut cur = String::new();
                for c in chunk.chars() {
                    if is_punct_or_symbol(c) {
                        if !cur.is_empty() {
                            words.push(std::mem::take(&mut cur));
                        }
                        words.push(c.to_string());
                    } else {
                        cur.push(c);
                    }
                }
                if !cur.is_empty() {
                    words.push(cur);
                }
            }
        }
    }
    words
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpeOptions {
    pub merges: usize,
    pub min_frequency: usize,
    pub upsample_low_resource: bool,
    pub pretokenize: Pretokenize,
    /// Target languages that get a `<2xx>` direction token.
    pub direction_languages: Vec<String>,
}

impl Default for BpeOptions {
    fn default() -> Self {
        BpeOptions { merges: 6000, min_frequency: 1, upsample_low_resource: false, pretokenize: Pretokenize::Punct, direction_languages: Vec::new() }
    }
}

/// BPE merge table plus the token/id bijection. Immutable once built.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    merges: Vec<(String, String)>,
    rank: HashMap<(String, String), usize>,
    parents: HashMap<String, (String, String)>,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    freqs: Vec<u64>,
    n_specials: usize,
    pretokenize: Pretokenize,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
            && self.tokens == other.tokens
            && self.freqs == other.freqs
            && self.n_specials == other.n_specials
            && self.pretokenize == other.pretokenize
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i + 1 == chars.len() { format!("{c}{END_OF_WORD}") } else { c.to_string() })
        .collect()
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

fn char_mass(lines: &[String]) -> usize {
    lines.iter().map(|l| l.chars().filter(|c| !c.is_whitespace()).count()).sum()
}

/// Replicates each corpus cyclically (whole sentences) until its character
/// mass reaches that of the largest corpus.
pub fn balance_corpora(corpora: &[Vec<String>]) -> Vec<Vec<String>> {
    let target = corpora.iter().map(|c| char_mass(c)).max().unwrap_or(0);
    corpora
        .iter()
        .map(|c| {
            let mass = char_mass(c);
            if mass == 0 || mass >= target {
                return c.clone();
            }
            let mut out = Vec::new();
            let mut acc = 0;
            for line in c.iter().cycle() {
                if acc >= target {
                    break;
                }
                acc += line.chars().filter(|ch| !ch.is_whitespace()).count();
                out.push(line.clone());
            }
            out
        })
        .collect()
}

/// Learns a BPE vocabulary.
///
/// Merges stop early once no pair reaches `min_frequency`. Tokens whose final
/// frequency is below `min_frequency` are removed and their occurrences fall
/// back to the pieces they were merged from.
pub fn learn_bpe(corpora: &[Vec<String>], opts: &BpeOptions) -> Result<Vocabulary> {
    if corpora.is_empty() {
        return Err(Error::EmptyCorpus("no corpora given to learn_bpe".into()));
    }
    if let Some(i) = corpora.iter().position(|c| c.iter().all(|l| l.trim().is_empty())) {
        return Err(Error::EmptyCorpus(format!("corpus {i} has no text")));
    }
    if opts.min_frequency == 0 {
        return Err(Error::invalid("min_frequency must be at least 1"));
    }
    let balanced;
    let corpora = if opts.upsample_low_resource {
        balanced = balance_corpora(corpora);
        &balanced
    } else {
        corpora
    };
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for line in corpora.iter().flatten() {
        for w in pretokenize(line, opts.pretokenize) {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = word_freq.iter().map(|(w, &f)| (word_symbols(w), f)).collect();
    let mut symbols: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let mut merges = Vec::new();
    while merges.len() < opts.merges {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *counts.entry((&w[0], &w[1])).or_default() += f;
            }
        }
        let best = counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((l, r), count)) = best else { break };
        if count < opts.min_frequency as u64 {
            break;
        }
        let (l, r) = (l.to_owned(), r.to_owned());
        for (syms, _) in words.iter_mut() {
            merge_pair(syms, &l, &r);
        }
        symbols.insert(format!("{l}{r}"));
        merges.push((l, r));
    }

    let specials = special_list(&opts.direction_languages);
    let mut vocab = Vocabulary::assemble(merges, &specials, Vec::new(), opts.pretokenize);
    let mut allowed: BTreeSet<String> = symbols.into_iter().filter(|s| !specials.contains(s)).collect();
    let counts = loop {
        let counts = vocab.count_tokens(&word_freq, &allowed);
        let rare: Vec<String> = allowed
            .iter()
            .filter(|t| counts.get(*t).is_some_and(|&c| c < opts.min_frequency as u64))
            .cloned()
            .collect();
        if rare.is_empty() {
            break counts;
        }
        for t in rare {
            allowed.remove(&t);
        }
    };
    let mut kept: Vec<(String, u64)> = counts.into_iter().filter(|(t, _)| allowed.contains(t)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    vocab = Vocabulary::assemble(vocab.merges, &specials, kept, opts.pretokenize);
    Ok(vocab)
}

fn special_list(direction_languages: &[String]) -> Vec<String> {
    let mut out: Vec<String> = BASE_SPECIALS.iter().map(|s| s.to_string()).collect();
    for l in direction_languages {
        let t = direction_token(l);
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

impl Vocabulary {
    fn assemble(merges: Vec<(String, String)>, specials: &[String], tokens: Vec<(String, u64)>, pretokenize: Pretokenize) -> Self {
        let mut rank = HashMap::new();
        let mut parents = HashMap::new();
        for (i, (l, r)) in merges.iter().enumerate() {
            rank.entry((l.clone(), r.clone())).or_insert(i);
            parents.entry(format!("{l}{r}")).or_insert_with(|| (l.clone(), r.clone()));
        }
        let mut all: Vec<String> = specials.to_vec();
        let mut freqs = vec![0; specials.len()];
        for (t, f) in tokens {
            all.push(t);
            freqs.push(f);
        }
        let ids = all.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { merges, rank, parents, tokens: all, ids, freqs, n_specials: specials.len(), pretokenize }
    }

    /// Vocabulary holding only the special tokens, for tests and tooling.
    pub fn specials_only(direction_languages: &[String]) -> Self {
        Self::assemble(Vec::new(), &special_list(direction_languages), Vec::new(), Pretokenize::Punct)
    }

    fn count_tokens(&self, word_freq: &BTreeMap<String, u64>, allowed: &BTreeSet<String>) -> BTreeMap<String, u64> {
        let mut counts = BTreeMap::new();
        for (w, &f) in word_freq {
            for t in self.segment_with(w, &|t: &str| allowed.contains(t)) {
                if let Some(t) = t {
                    *counts.entry(t).or_default() += f;
                }
            }
        }
        counts
    }

    /// Applies merges to one word, then splits anything `known` rejects back
    /// into its merge parents. `None` marks an unknown character.
    fn segment_with(&self, word: &str, known: &dyn Fn(&str) -> bool) -> Vec<Option<String>> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.rank.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w[0].clone(), w[1].clone())))
                .min();
            let Some((_, l, r)) = best else { break };
            merge_pair(&mut syms, &l, &r);
        }
        let mut out = Vec::with_capacity(syms.len());
        for s in syms {
            self.split_unknown(s, known, &mut out);
        }
        out
    }

    fn split_unknown(&self, token: String, known: &dyn Fn(&str) -> bool, out: &mut Vec<Option<String>>) {
        if known(&token) {
            out.push(Some(token));
        } else if let Some((l, r)) = self.parents.get(&token) {
            self.split_unknown(l.clone(), known, out);
            self.split_unknown(r.clone(), known, out);
        } else {
            out.push(None);
        }
    }

    fn is_learned(&self, t: &str) -> bool {
        self.ids.get(t).is_some_and(|&id| id as usize >= self.n_specials)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn pretokenize_mode(&self) -> Pretokenize {
        self.pretokenize
    }

    pub fn num_specials(&self) -> usize {
        self.n_specials
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.n_specials
    }

    pub fn specials(&self) -> &[String] {
        &self.tokens[..self.n_specials]
    }

    pub fn special_id(&self, token: &str) -> Result<u32> {
        self.ids
            .get(token)
            .copied()
            .filter(|&id| self.is_special(id))
            .ok_or_else(|| Error::UnknownSpecial(token.to_owned()))
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> Option<u64> {
        self.freqs.get(id as usize).copied()
    }

    /// Tokens of the non-special part of the vocabulary, in id order.
    pub fn learned_tokens(&self) -> impl Iterator<Item = (u32, &str)> {
        self.tokens.iter().enumerate().skip(self.n_specials).map(|(i, t)| (i as u32, t.as_str()))
    }

    /// Segments a sentence into token ids. Characters never seen at learn time map to [`UNK`].
    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in pretokenize(sentence, self.pretokenize) {
            for t in self.segment_with(&w, &|t: &str| self.is_learned(t)) {
                out.push(t.and_then(|t| self.id(&t)).unwrap_or(UNK));
            }
        }
        out
    }

    /// Subword strings for a sentence, for inspection.
    pub fn segment(&self, sentence: &str) -> Vec<String> {
        self.encode(sentence).into_iter().map(|id| self.token(id).unwrap_or(UNK_TOKEN).to_owned()).collect()
    }

    /// Joins subwords back into words. Padding, BOS and EOS are dropped; other
    /// specials appear as standalone words.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut cur = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            if self.is_special(id) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(tok.to_owned());
            } else if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                cur.push_str(stem);
                words.push(std::mem::take(&mut cur));
            } else {
                cur.push_str(tok);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words.join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "#deskmt-bpe v1 specials={} merges={} tokens={} pretokenize={}\n",
            self.n_specials,
            self.merges.len(),
            self.tokens.len(),
            self.pretokenize.name()
        );
        for (l, r) in &self.merges {
            s.push_str(&format!("{l} {r}\n"));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{t}\t{i}\t{}\n", self.freqs[i]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("vocabulary file", d);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut fields = HashMap::new();
        let mut parts = header.split_whitespace();
        if parts.next() != Some("#deskmt-bpe") || parts.next() != Some("v1") {
            return Err(bad(format!("unrecognised header `{header}`")));
        }
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| bad(format!("bad header field `{p}`")))?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> {
            fields.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("missing `{k}`")))
        };
        let (n_specials, n_merges, n_tokens) = (num("specials")?, num("merges")?, num("tokens")?);
        let pretokenize = match fields.get("pretokenize").copied() {
            Some("none") => Pretokenize::None,
            Some("punct") | None => Pretokenize::Punct,
            Some(other) => return Err(bad(format!("unknown pretokenize `{other}`"))),
        };
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let l = lines.next().ok_or_else(|| bad("truncated merge list".into()))?;
            let (a, b) = l.split_once(' ').ok_or_else(|| bad(format!("bad merge `{l}`")))?;
            merges.push((a.to_owned(), b.to_owned()));
        }
        let mut specials = Vec::new();
        let mut tokens = Vec::new();
        for i in 0..n_tokens {
            let l = lines.next().ok_or_else(|| bad("truncated token list".into()))?;
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 3 || f[1].parse::<usize>().ok() != Some(i) {
                return Err(bad(format!("bad token line `{l}`")));
            }
            let freq: u64 = f[2].parse().map_err(|_| bad(format!("bad frequency in `{l}`")))?;
            if i < n_specials {
                specials.push(f[0].to_owned());
            } else {
                tokens.push((f[0].to_owned(), freq));
            }
        }
        if specials.len() < BASE_SPECIALS.len() || specials[..BASE_SPECIALS.len()] != BASE_SPECIALS {
            return Err(bad("special tokens out of order".into()));
        }
        Ok(Vocabulary::assemble(merges, &specials, tokens, pretokenize))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Prepends a registered special token. Callers must not tag twice.
pub fn prepend_tag(vocab: &Vocabulary, ids: &[u32], tag: &str) -> Result<Vec<u32>> {
    let id = vocab.special_id(tag)?;
    let mut out = Vec::with_capacity(ids.len() + 1);
    out.push(id);
    out.extend_from_slice(ids);
    Ok(out)
}

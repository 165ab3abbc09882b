//! Synthetic data: a small agreement grammar, a planted attribute vocabulary
//! and name-frequency lists. Used by tests and by `fairflow init-fixture`.
//!
//! Only the subject words (`she/he`, `woman/man`, `mother/father`) carry a
//! planted attribute signal. Reflexives and possessives agree with the subject
//! in the grammar but are neutral in the toy embedding space, so substituting
//! subjects alone leaves agreement errors for the correction stage.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{case_fold, Attribute, CorpusRecord, Tokenizer};
use crate::dictionary::{Entry, NameFrequency, NameFrequencyList, Source, WordPairDictionary};
use crate::embedding::PlantedWord;

/// `(group a, group b, concept)`.
pub const PLANTED_PAIRS: [(&str, &str, &str); 3] =
    [("she", "he", "pronoun"), ("woman", "man", "person"), ("mother", "father", "parent")];

pub const REFLEXIVE: (&str, &str) = ("herself", "himself");
pub const POSSESSIVE: (&str, &str) = ("her", "his");

/// `(name, frequency)` per group.
pub const NAMES_A: [(&str, u64); 3] = [("Anna", 100), ("Mary", 80), ("Laura", 60)];
pub const NAMES_B: [(&str, u64); 3] = [("John", 95), ("Peter", 70), ("Anthony", 50)];

pub const TOPICS: [&str; 12] =
    ["python", "music", "art", "chess", "history", "poetry", "physics", "cooking", "painting", "biology", "dancing", "law"];
pub const PROFESSIONS: [&str; 12] =
    ["nurse", "doctor", "teacher", "engineer", "pilot", "writer", "lawyer", "chef", "farmer", "painter", "baker", "singer"];
pub const OBJECTS: [&str; 13] =
    ["keys", "wallet", "notebook", "umbrella", "ticket", "phone", "bag", "hat", "map", "pen", "book", "watch", "coat"];
pub const ADJECTIVES: [&str; 13] =
    ["happy", "tired", "busy", "quiet", "clever", "kind", "brave", "calm", "proud", "young", "famous", "curious", "honest"];

/// The 50 neutral content words.
pub fn distractors() -> Vec<&'static str> {
    TOPICS.iter().chain(&PROFESSIONS).chain(&OBJECTS).chain(&ADJECTIVES).copied().collect()
}

pub fn planted_words() -> Vec<PlantedWord> {
    PLANTED_PAIRS
        .iter()
        .flat_map(|&(a, b, concept)| {
            [
                PlantedWord { word: a.into(), concept: concept.into(), group: Attribute::A },
                PlantedWord { word: b.into(), concept: concept.into(), group: Attribute::B },
            ]
        })
        .collect()
}

/// Every gendered word of the grammar, for the evaluation attribute classifier.
pub fn evaluation_planted_words() -> Vec<PlantedWord> {
    let mut out = planted_words();
    let names = NAMES_A.iter().zip(&NAMES_B).map(|((a, _), (b, _))| (*a, *b));
    for (i, (a, b)) in [REFLEXIVE, POSSESSIVE].into_iter().chain(names).enumerate() {
        out.push(PlantedWord { word: case_fold(a), concept: format!("eval{i}"), group: Attribute::A });
        out.push(PlantedWord { word: case_fold(b), concept: format!("eval{i}"), group: Attribute::B });
    }
    out
}

/// Toy backend in which every gendered word of the grammar carries the attribute.
pub fn evaluation_backend() -> crate::embedding::ToyBackend {
    crate::embedding::ToyBackend::new(Default::default(), &evaluation_planted_words()).expect("valid default config")
}

pub fn name_list() -> NameFrequencyList {
    let names = NAMES_A
        .iter()
        .map(|&(n, f)| NameFrequency { name: n.into(), frequency: f, group: Attribute::A })
        .chain(NAMES_B.iter().map(|&(n, f)| NameFrequency { name: n.into(), frequency: f, group: Attribute::B }))
        .collect();
    NameFrequencyList::new(names).expect("fixture names are unique")
}

/// Subject words and names, without the agreeing pronouns.
pub fn subject_dictionary() -> WordPairDictionary {
    let subjects = PLANTED_PAIRS.iter().map(|&(a, b, _)| Entry::new(a, b, Source::Discovered));
    let names = NAMES_A.iter().zip(&NAMES_B).map(|((a, _), (b, _))| Entry::new(a, b, Source::Name));
    WordPairDictionary::from_entries(subjects.chain(names))
}

/// [`subject_dictionary`] plus the pronoun pairs.
pub fn full_dictionary() -> WordPairDictionary {
    let mut d = subject_dictionary();
    for (a, b) in [REFLEXIVE, POSSESSIVE] {
        d.insert(Entry::new(a, b, Source::Discovered)).expect("pronouns are not yet covered");
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// `S taught REFL some TOPIC.`
    Taught,
    /// `S discovered POSS passion for TOPIC.`
    Discovered,
    /// `S lost POSS OBJ.`
    Lost,
    /// `S is a ADJ PROF.`
    Is,
    /// `The PROF bought a OBJ.`
    Bought,
    /// `The ADJ PROF studied TOPIC.`
    Studied,
}

impl Template {
    pub const ALL: [Template; 6] =
        [Template::Taught, Template::Discovered, Template::Lost, Template::Is, Template::Bought, Template::Studied];

    /// Templates with a subject-agreeing pronoun.
    pub const AGREEMENT: [Template; 3] = [Template::Taught, Template::Discovered, Template::Lost];

    pub fn is_gendered(self) -> bool {
        !matches!(self, Template::Bought | Template::Studied)
    }

    fn slots(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            Template::Taught => &[Subject, Lit("taught"), Reflexive, Lit("some"), Topic, Lit(".")],
            Template::Discovered => &[Subject, Lit("discovered"), Possessive, Lit("passion"), Lit("for"), Topic, Lit(".")],
            Template::Lost => &[Subject, Lit("lost"), Possessive, Object, Lit(".")],
            Template::Is => &[Subject, Lit("is"), Lit("a"), Adjective, Profession, Lit(".")],
            Template::Bought => &[Lit("the"), Profession, Lit("bought"), Lit("a"), Object, Lit(".")],
            Template::Studied => &[Lit("the"), Adjective, Profession, Lit("studied"), Topic, Lit(".")],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Lit(&'static str),
    Subject,
    Reflexive,
    Possessive,
    Topic,
    Profession,
    Object,
    Adjective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjectKind {
    Pronoun,
    Noun(usize),
    Name(usize),
}

fn subject_words(kind: SubjectKind, group: Attribute) -> Vec<String> {
    let pick = |(a, b): (&str, &str)| if group == Attribute::A { a } else { b }.to_string();
    match kind {
        SubjectKind::Pronoun => vec![pick((PLANTED_PAIRS[0].0, PLANTED_PAIRS[0].1))],
        SubjectKind::Noun(i) => vec!["the".into(), pick((PLANTED_PAIRS[1 + i].0, PLANTED_PAIRS[1 + i].1))],
        SubjectKind::Name(i) => vec![pick((NAMES_A[i].0, NAMES_B[i].0))],
    }
}

/// A generated sentence with its ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub template: Template,
    pub group: Option<Attribute>,
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn join(words: &[String]) -> String {
    let mut out = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 && w != "." {
            out.push(' ');
        }
        out.push_str(&if i == 0 { capitalize(w) } else { w.clone() });
    }
    out
}

pub fn sentence(rng: &mut impl Rng, template: Template, group: Attribute, subject: SubjectKind) -> Sentence {
    let mut words: Vec<String> = Vec::new();
    for slot in template.slots() {
        match *slot {
            Slot::Lit(w) => words.push(w.into()),
            Slot::Subject => words.extend(subject_words(subject, group)),
            Slot::Reflexive => words.push(if group == Attribute::A { REFLEXIVE.0 } else { REFLEXIVE.1 }.into()),
            Slot::Possessive => words.push(if group == Attribute::A { POSSESSIVE.0 } else { POSSESSIVE.1 }.into()),
            Slot::Topic => words.push(TOPICS.choose(rng).unwrap().to_string()),
            Slot::Profession => words.push(PROFESSIONS.choose(rng).unwrap().to_string()),
            Slot::Object => words.push(OBJECTS.choose(rng).unwrap().to_string()),
            Slot::Adjective => words.push(ADJECTIVES.choose(rng).unwrap().to_string()),
        }
    }
    Sentence { text: join(&words), template, group: template.is_gendered().then_some(group) }
}

pub fn random_subject(rng: &mut impl Rng) -> SubjectKind {
    match rng.random_range(0..4) {
        0 => SubjectKind::Pronoun,
        1 => SubjectKind::Noun(0),
        2 => SubjectKind::Noun(1),
        _ => SubjectKind::Name(rng.random_range(0..NAMES_A.len())),
    }
}

pub fn random_sentence(rng: &mut impl Rng) -> Sentence {
    let template = *Template::ALL.choose(rng).unwrap();
    let group = Attribute::from_index(rng.random_range(0..2));
    let subject = random_subject(rng);
    sentence(rng, template, group, subject)
}

/// `n` sentences as corpus records with ids `{prefix}-{i}`; gendered ones carry their group.
pub fn corpus_records(n: usize, seed: u64, prefix: &str) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s = random_sentence(&mut rng);
            CorpusRecord { text: s.text, label: None, group: s.group, id: Some(format!("{prefix}-{i}")) }
        })
        .collect()
}

/// `n` distinct gendered sentences paired with their fully swapped counterparts.
pub fn template_pairs(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = Tokenizer::whitespace();
    let dict = full_dictionary();
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = random_sentence(&mut rng);
        if s.group.is_none() || !seen.insert(s.text.clone()) {
            continue;
        }
        let (swapped, _) = crate::rewrite::substitute(&crate::rewrite::words_from_text(&s.text, &tok), &dict, &tok);
        out.push((s.text, crate::rewrite::render(&swapped)));
    }
    out
}

fn group_of(word: &str) -> Option<Attribute> {
    let w = case_fold(word);
    let lists: [(&[&str], Attribute); 2] = [
        (&[PLANTED_PAIRS[0].0, PLANTED_PAIRS[1].0, PLANTED_PAIRS[2].0, REFLEXIVE.0, POSSESSIVE.0], Attribute::A),
        (&[PLANTED_PAIRS[0].1, PLANTED_PAIRS[1].1, PLANTED_PAIRS[2].1, REFLEXIVE.1, POSSESSIVE.1], Attribute::B),
    ];
    for (list, g) in lists {
        if list.contains(&w.as_str()) {
            return Some(g);
        }
    }
    if NAMES_A.iter().any(|(n, _)| case_fold(n) == w) {
        return Some(Attribute::A);
    }
    if NAMES_B.iter().any(|(n, _)| case_fold(n) == w) {
        return Some(Attribute::B);
    }
    None
}

/// Length of the subject phrase at the start of `words` and its group.
fn match_subject(words: &[String]) -> Option<(usize, Attribute)> {
    let first = words.first()?;
    if first == "the" {
        let w = words.get(1)?;
        let nouns = [PLANTED_PAIRS[1], PLANTED_PAIRS[2]];
        return nouns.iter().find_map(|&(a, b, _)| {
            if w == a {
                Some((2, Attribute::A))
            } else if w == b {
                Some((2, Attribute::B))
            } else {
                None
            }
        });
    }
    let is_name = NAMES_A.iter().chain(&NAMES_B).any(|(n, _)| case_fold(n) == *first);
    if first == PLANTED_PAIRS[0].0 || first == PLANTED_PAIRS[0].1 || is_name {
        return group_of(first).map(|g| (1, g));
    }
    None
}

fn matches(template: Template, words: &[String]) -> bool {
    let mut i = 0;
    let mut group: Option<Attribute> = None;
    let mut agree = |g: Attribute| -> bool { *group.get_or_insert(g) == g };
    for slot in template.slots() {
        let ok = match *slot {
            Slot::Subject => match match_subject(&words[i..]) {
                Some((len, g)) => {
                    i += len;
                    agree(g)
                }
                None => false,
            },
            _ => {
                let Some(w) = words.get(i) else { return false };
                i += 1;
                match *slot {
                    Slot::Lit(l) => w == l,
                    Slot::Reflexive if w == REFLEXIVE.0 || w == REFLEXIVE.1 => agree(group_of(w).unwrap()),
                    Slot::Possessive if w == POSSESSIVE.0 || w == POSSESSIVE.1 => agree(group_of(w).unwrap()),
                    Slot::Topic => TOPICS.contains(&w.as_str()),
                    Slot::Profession => PROFESSIONS.contains(&w.as_str()),
                    Slot::Object => OBJECTS.contains(&w.as_str()),
                    Slot::Adjective => ADJECTIVES.contains(&w.as_str()),
                    _ => false,
                }
            }
        };
        if !ok {
            return false;
        }
    }
    i == words.len()
}

/// Grammar membership, including pronoun agreement. Case-insensitive.
pub fn is_grammatical(text: &str) -> bool {
    let words: Vec<String> = Tokenizer::pre_tokenize(text).into_iter().map(|(w, _)| case_fold(&w)).collect();
    Template::ALL.iter().any(|&t| matches(t, &words))
}

/// Wordpiece vocabulary that keeps every fixture word whole except a few
/// deliberately split ones (`duchess ##es`, `paint ##er`).
pub fn wordpiece_vocab() -> Vec<String> {
    let mut v: Vec<String> = ["the", "men", "are", "duchess", "##es", "paint", "##er", "##ing", "."]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (a, b, _) in PLANTED_PAIRS {
        v.extend([a.to_string(), b.to_string()]);
    }
    for w in distractors().into_iter().filter(|w| !w.starts_with("paint")) {
        v.push(w.into());
    }
    for w in [REFLEXIVE.0, REFLEXIVE.1, POSSESSIVE.0, POSSESSIVE.1, "taught", "some", "discovered", "passion", "for", "lost", "is", "a", "bought", "studied"] {
        v.push(w.into());
    }
    for (n, _) in NAMES_A.iter().chain(&NAMES_B) {
        v.push(case_fold(n));
    }
    v
}

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use fairflow::dictionary::{names_intervention, Entry, NameFrequency, NameFrequencyList, Source, WordPairDictionary};
use fairflow::Attribute;
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-f]{1,2}"
}

fn entries() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec((word(), word()), 0..40)
}

fn build(pairs: &[(String, String)], source: Source) -> WordPairDictionary {
    WordPairDictionary::from_entries(pairs.iter().map(|(a, b)| Entry::new(a, b, source)))
}

fn assert_bijection(d: &WordPairDictionary) {
    let mut covered: HashMap<&str, usize> = HashMap::new();
    for e in d.entries() {
        assert_ne!(e.word_a, e.word_b);
        *covered.entry(&e.word_a).or_default() += 1;
        *covered.entry(&e.word_b).or_default() += 1;
    }
    assert!(covered.values().all(|&c| c == 1));
    for e in d.entries() {
        assert_eq!(d.counterpart(&e.word_a), Some(e.word_b.as_str()));
        assert_eq!(d.counterpart(&e.word_b), Some(e.word_a.as_str()));
    }
    d.validate().unwrap();
}

fn unordered(d: &WordPairDictionary) -> BTreeSet<(String, String)> {
    d.entries()
        .iter()
        .map(|e| if e.word_a < e.word_b { (e.word_a.clone(), e.word_b.clone()) } else { (e.word_b.clone(), e.word_a.clone()) })
        .collect()
}

proptest! {
    #[test]
    fn insertion_keeps_bijection(pairs in entries()) {
        assert_bijection(&build(&pairs, Source::Discovered));
    }

    #[test]
    fn merge_size_matches_set_arithmetic(base in entries(), extra in entries()) {
        let base = build(&base, Source::Discovered);
        let extra = build(&extra, Source::Name);
        let (merged, report) = base.merge(&extra);
        assert_bijection(&merged);
        // brute count: an extra entry survives iff neither word is covered by base
        let covered: BTreeSet<&str> = base.entries().iter().flat_map(|e| [e.word_a.as_str(), e.word_b.as_str()]).collect();
        let base_pairs = unordered(&base);
        let mut conflicts = 0;
        let mut duplicates = 0;
        for e in extra.entries() {
            let key = if e.word_a < e.word_b { (e.word_a.clone(), e.word_b.clone()) } else { (e.word_b.clone(), e.word_a.clone()) };
            if base_pairs.contains(&key) {
                duplicates += 1;
            } else if covered.contains(e.word_a.as_str()) || covered.contains(e.word_b.as_str()) {
                conflicts += 1;
            }
        }
        prop_assert_eq!(report.conflicts.len(), conflicts);
        prop_assert_eq!(report.duplicates, duplicates);
        prop_assert_eq!(merged.len(), base.len() + extra.len() - conflicts - duplicates);
        for e in base.entries() {
            prop_assert_eq!(merged.counterpart(&e.word_a), Some(e.word_b.as_str()));
        }
    }

    #[test]
    fn merge_associative_without_conflicts(
        a in prop::collection::vec(("[a-c]{1,2}", "[a-c]{1,2}"), 0..20),
        b in prop::collection::vec(("[d-f]{1,2}", "[d-f]{1,2}"), 0..20),
        c in prop::collection::vec(("[g-i]{1,2}", "[g-i]{1,2}"), 0..20),
    ) {
        let (a, b, c) = (build(&a, Source::Discovered), build(&b, Source::Discovered), build(&c, Source::Name));
        let left = a.merge(&b).0.merge(&c).0;
        let right = a.merge(&b.merge(&c).0).0;
        prop_assert_eq!(left.to_tsv_string(), right.to_tsv_string());
    }

    #[test]
    fn rank_matching_ignores_input_order(
        freqs_a in prop::collection::vec(0u64..5, 1..8),
        freqs_b in prop::collection::vec(0u64..5, 1..8),
        rotate in 0usize..8,
    ) {
        let names = |freqs: &[u64], group: Attribute, prefix: &str| -> Vec<NameFrequency> {
            freqs.iter().enumerate().map(|(i, &f)| NameFrequency { name: format!("{prefix}{i}"), frequency: f, group }).collect()
        };
        let mut all = names(&freqs_a, Attribute::A, "a");
        all.extend(names(&freqs_b, Attribute::B, "b"));
        let list = NameFrequencyList::new(all.clone()).unwrap();
        let r = rotate % all.len();
        all.rotate_left(r);
        all.reverse();
        let shuffled = NameFrequencyList::new(all).unwrap();
        let d1 = names_intervention(&list, &list);
        let d2 = names_intervention(&shuffled, &shuffled);
        prop_assert_eq!(d1.to_tsv_string(), d2.to_tsv_string());
        prop_assert_eq!(d1.len(), freqs_a.len().min(freqs_b.len()));
    }
}

#[test]
fn thousand_entries_reserialize_identically() {
    let entries: Vec<Entry> = (0..1000)
        .map(|i| {
            let source = [Source::Prompt, Source::Discovered, Source::Name][i % 3];
            let e = Entry::new(&format!("w{i:04}a"), &format!("w{i:04}b"), source);
            if source == Source::Discovered { e.with_votes(i % 7 + 1, 8) } else { e }
        })
        .collect();
    let d = WordPairDictionary::from_entries(entries.into_iter().rev());
    assert_eq!(d.len(), 1000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dict.tsv");
    d.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = WordPairDictionary::load(&path).unwrap();
    loaded.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(unordered(&loaded), unordered(&d));
    let text = String::from_utf8(first).unwrap();
    let sources: Vec<&str> = text.lines().map(|l| l.split('\t').nth(2).unwrap()).collect();
    let mut sorted = sources.clone();
    sorted.sort_by_key(|s| ["prompt", "discovered", "name"].iter().position(|x| x == s));
    assert_eq!(sources, sorted);
    assert!(WordPairDictionary::load(Path::new("/nonexistent/dict.tsv")).is_err());
}

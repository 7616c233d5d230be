/// Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// The lexicon entry closest to `word` by case-insensitive edit distance;
/// ties go to the lexicographically smallest entry. `None` for an empty
/// lexicon.
pub fn lexicon_correct<'a>(word: &str, lexicon: &'a [String]) -> Option<&'a str> {
    let w = word.to_lowercase();
    lexicon
        .iter()
        .map(|e| (edit_distance(&w, &e.to_lowercase()), e))
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)))
        .map(|(_, e)| e.as_str())
}

/// Minimum transcription length scored under the IC15 rules.
pub const IC15_MIN_LEN: usize = 3;

/// Strips non-alphanumeric characters from both ends of `word` and flags
/// it as ignored when fewer than three characters remain.
pub fn ic15_filter(word: &str) -> (String, bool) {
    let s = word.trim_matches(|c: char| !c.is_alphanumeric()).to_string();
    let ignore = s.chars().count() < IC15_MIN_LEN;
    (s, ignore)
}

/// Transcription comparison used by the end-to-end metric.
pub fn texts_match(a: &str, b: &str, case_sensitive: bool) -> bool {
    if case_sensitive {
        a == b
    } else {
        a.to_lowercase() == b.to_lowercase()
    }
}

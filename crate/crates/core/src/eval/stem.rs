//! Porter stemmer for English.
//!
//! Implements the classic five-step suffix-stripping algorithm. Within each
//! step only the longest matching suffix is considered; if its condition
//! fails, the step leaves the word unchanged (no fallback to shorter
//! suffixes). Words shorter than three characters are returned as-is.

/// Reduces an English word to its stem.
///
/// Input is expected to be lowercase; bytes outside `a..=z` are treated as
/// consonants, so tokens with apostrophes or digits still stem
/// deterministically.
pub fn stem(word: &str) -> String {
    if word.len() <= 2 {
        return word.to_string();
    }
    let mut w: Vec<u8> = word.bytes().collect();
    step_1a(&mut w);
    step_1b(&mut w);
    step_1c(&mut w);
    step_2(&mut w);
    step_3(&mut w);
    step_4(&mut w);
    step_5a(&mut w);
    step_5b(&mut w);
    String::from_utf8(w).expect("stemming only removes or rewrites ASCII bytes")
}

/// True when `w[i]` acts as a consonant: vowels are a, e, i, o, u, plus y
/// when it follows a vowel (so the leading y of "yes" is a consonant while
/// the y of "sky" is a vowel).
fn is_consonant(w: &[u8], i: usize) -> bool {
    match w[i] {
        b'a' | b'e' | b'i' | b'o' | b'u' => false,
        b'y' => i == 0 || !is_consonant(w, i - 1),
        _ => true,
    }
}

/// The measure m of a stem: the number of vowel-to-consonant transitions in
/// its [C](VC)^m[V] form.
fn measure(w: &[u8]) -> usize {
    let mut m = 0;
    let mut prev_vowel = false;
    for i in 0..w.len() {
        let cons = is_consonant(w, i);
        if cons && prev_vowel {
            m += 1;
        }
        prev_vowel = !cons;
    }
    m
}

fn has_vowel(w: &[u8]) -> bool {
    (0..w.len()).any(|i| !is_consonant(w, i))
}

/// True when the stem ends in a double consonant (e.g. "hopp", "fall").
fn ends_double_consonant(w: &[u8]) -> bool {
    let n = w.len();
    n >= 2 && w[n - 1] == w[n - 2] && is_consonant(w, n - 1)
}

/// The *o condition: stem ends consonant-vowel-consonant where the final
/// consonant is not w, x, or y (e.g. "hop" yes, "snow" no).
fn ends_cvc(w: &[u8]) -> bool {
    let n = w.len();
    n >= 3
        && is_consonant(w, n - 3)
        && !is_consonant(w, n - 2)
        && is_consonant(w, n - 1)
        && !matches!(w[n - 1], b'w' | b'x' | b'y')
}

fn ends_with(w: &[u8], suffix: &str) -> bool {
    w.len() >= suffix.len() && &w[w.len() - suffix.len()..] == suffix.as_bytes()
}

/// If the word ends with `suffix` and the remaining stem satisfies `cond`,
/// replaces the suffix with `replacement` and returns true. Returning true
/// only signals that the suffix *matched*, captured via `fired`.
fn replace_if(
    w: &mut Vec<u8>,
    suffix: &str,
    replacement: &str,
    cond: impl Fn(&[u8]) -> bool,
) -> Option<bool> {
    if !ends_with(w, suffix) {
        return None;
    }
    let stem_len = w.len() - suffix.len();
    if cond(&w[..stem_len]) {
        w.truncate(stem_len);
        w.extend_from_slice(replacement.as_bytes());
        Some(true)
    } else {
        Some(false)
    }
}

/// Applies the first rule whose suffix matches; the list must be ordered
/// longest-suffix-first so the longest match wins.
fn apply_rules(w: &mut Vec<u8>, min_measure: usize, rules: &[(&str, &str)]) {
    for (suffix, replacement) in rules {
        if replace_if(w, suffix, replacement, |s| measure(s) > min_measure).is_some() {
            return;
        }
    }
}

fn step_1a(w: &mut Vec<u8>) {
    for (suffix, replacement) in [("sses", "ss"), ("ies", "i"), ("ss", "ss"), ("s", "")] {
        if replace_if(w, suffix, replacement, |_| true).is_some() {
            return;
        }
    }
}

fn step_1b(w: &mut Vec<u8>) {
    if let Some(_fired) = replace_if(w, "eed", "ee", |s| measure(s) > 0) {
        return; // "eed" consumes the step whether or not its condition held.
    }
    let removed = replace_if(w, "ed", "", has_vowel) == Some(true)
        || replace_if(w, "ing", "", has_vowel) == Some(true);
    if !removed {
        return;
    }
    for (suffix, replacement) in [("at", "ate"), ("bl", "ble"), ("iz", "ize")] {
        if replace_if(w, suffix, replacement, |_| true) == Some(true) {
            return;
        }
    }
    if ends_double_consonant(w) && !matches!(w[w.len() - 1], b'l' | b's' | b'z') {
        w.pop();
    } else if measure(w) == 1 && ends_cvc(w) {
        w.push(b'e');
    }
}

fn step_1c(w: &mut Vec<u8>) {
    replace_if(w, "y", "i", has_vowel);
}

fn step_2(w: &mut Vec<u8>) {
    apply_rules(
        w,
        0,
        &[
            ("ational", "ate"),
            ("ization", "ize"),
            ("iveness", "ive"),
            ("fulness", "ful"),
            ("ousness", "ous"),
            ("biliti", "ble"),
            ("tional", "tion"),
            ("ation", "ate"),
            ("alism", "al"),
            ("aliti", "al"),
            ("iviti", "ive"),
            ("entli", "ent"),
            ("ousli", "ous"),
            ("enci", "ence"),
            ("anci", "ance"),
            ("izer", "ize"),
            ("abli", "able"),
            ("alli", "al"),
            ("ator", "ate"),
            ("eli", "e"),
        ],
    );
}

fn step_3(w: &mut Vec<u8>) {
    apply_rules(
        w,
        0,
        &[
            ("icate", "ic"),
            ("ative", ""),
            ("alize", "al"),
            ("iciti", "ic"),
            ("ical", "ic"),
            ("ness", ""),
            ("ful", ""),
        ],
    );
}

fn step_4(w: &mut Vec<u8>) {
    // "ion" is only dropped after s or t; it is checked against the longer
    // "-sion"/"-tion" forms so the stem condition sees the right boundary.
    let ion = |s: &[u8]| measure(s) > 1 && !s.is_empty() && matches!(s[s.len() - 1], b's' | b't');
    for (suffix, cond) in [
        ("ement", None),
        ("ance", None),
        ("ence", None),
        ("able", None),
        ("ible", None),
        ("ment", None),
        ("ion", Some(&ion as &dyn Fn(&[u8]) -> bool)),
        ("ant", None),
        ("ent", None),
        ("ism", None),
        ("ate", None),
        ("iti", None),
        ("ous", None),
        ("ive", None),
        ("ize", None),
        ("al", None),
        ("er", None),
        ("ic", None),
        ("ou", None),
    ] {
        let fired = match cond {
            Some(c) => replace_if(w, suffix, "", c),
            None => replace_if(w, suffix, "", |s| measure(s) > 1),
        };
        if fired.is_some() {
            return;
        }
    }
}

fn step_5a(w: &mut Vec<u8>) {
    replace_if(w, "e", "", |s| {
        measure(s) > 1 || (measure(s) == 1 && !ends_cvc(s))
    });
}

fn step_5b(w: &mut Vec<u8>) {
    if measure(w) > 1 && ends_double_consonant(w) && w[w.len() - 1] == b'l' {
        w.pop();
    }
}

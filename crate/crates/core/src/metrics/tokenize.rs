//! Language-agnostic tokenization shared by the word-level metrics.

use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

fn is_punct(c: char) -> bool {
    // Devanagari danda and double danda are category Po, so they are covered
    // by the general punctuation group.
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// Split on whitespace; a punctuation character becomes its own token when it
/// sits next to a non-punctuation character. Idempotent on already-separated
/// text.
pub fn mt_tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut spaced = String::with_capacity(text.len() + 8);
    for (i, &c) in chars.iter().enumerate() {
        if i > 0 {
            let p = chars[i - 1];
            if !p.is_whitespace() && !c.is_whitespace() && is_punct(p) != is_punct(c) {
                spaced.push(' ');
            }
        }
        spaced.push(c);
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// Lowercase Latin-script characters only; Devanagari has no case and other
/// scripts are left untouched.
pub fn latin_lowercase(text: &str) -> String {
    text.chars()
        .flat_map(|c| {
            let latin = c.is_ascii_alphabetic() || ('\u{00C0}'..='\u{024F}').contains(&c);
            if latin {
                c.to_lowercase().collect::<Vec<char>>()
            } else {
                vec![c]
            }
        })
        .collect()
}

//! Rule-based tokenizer.
//!
//! Rules, applied in order to each whitespace-separated chunk:
//! 1. leading non-alphanumeric characters are split off one at a time;
//! 2. trailing non-alphanumeric characters are split off one at a time;
//! 3. an English clitic at the end of what remains is split off:
//!    `n't`, or an apostrophe followed by `s`, `re`, `ve`, `ll`, `d`, `m`.
//!
//! Characters inside a word (hyphens, dots in `U.S`, apostrophes elsewhere)
//! are left alone.

const CLITICS: [&str; 6] = ["'s", "'re", "'ve", "'ll", "'d", "'m"];
const OPENERS: [&str; 4] = ["(", "[", "{", "¿"];
const CLOSERS: [&str; 10] = [".", ",", ";", ":", "!", "?", ")", "]", "}", "%"];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in line.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while end - start > 1 && !is_word_char(chars[start]) {
            out.push(chars[start].to_string());
            start += 1;
        }
        let mut trailing = Vec::new();
        while end - start > 1 && !is_word_char(chars[end - 1]) {
            trailing.push(chars[end - 1].to_string());
            end -= 1;
        }
        let core: String = chars[start..end].iter().collect();
        out.extend(split_clitic(&core));
        out.extend(trailing.into_iter().rev());
    }
    out
}

fn split_clitic(word: &str) -> Vec<String> {
    let lower = word.to_lowercase();
    if lower.len() == word.len() {
        if lower.ends_with("n't") && word.len() > 3 {
            let at = word.len() - 3;
            return vec![word[..at].to_string(), word[at..].to_string()];
        }
        for c in CLITICS {
            if lower.ends_with(c) && word.len() > c.len() {
                let at = word.len() - c.len();
                return vec![word[..at].to_string(), word[at..].to_string()];
            }
        }
    }
    vec![word.to_string()]
}

/// Joins tokens with single spaces, attaching closing punctuation and
/// clitics to the left and opening brackets to the right.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        let lower = t.to_lowercase();
        let attach_left = CLOSERS.contains(&t) || CLITICS.contains(&lower.as_str()) || lower == "n't";
        if i > 0 && !attach_left && !glue_next {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = OPENERS.contains(&t);
    }
    out
}

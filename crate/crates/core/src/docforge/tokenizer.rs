/// Counts tokens in a document.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Approximates byte-level BPE pre-tokenization.
///
/// Pieces are: a letter run (optionally led by one non-letter, non-digit
/// character such as a space or quote); a run of at most three digits; a
/// punctuation run (optionally led by one space); or a whitespace run, whose
/// last space is left to a following letter or punctuation piece.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultTokenizer;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Space,
    Punct,
}

fn class(c: char) -> Class {
    if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Digit
    } else if c.is_whitespace() {
        Class::Space
    } else {
        Class::Punct
    }
}

impl Tokenizer for DefaultTokenizer {
    fn count(&self, text: &str) -> usize {
        let chars: Vec<Class> = text.chars().map(class).collect();
        let raw: Vec<char> = text.chars().collect();
        let n = chars.len();
        let run_end = |from: usize, c: Class| {
            let mut j = from;
            while j < n && chars[j] == c {
                j += 1;
            }
            j
        };
        let mut count = 0;
        let mut i = 0;
        while i < n {
            count += 1;
            match chars[i] {
                Class::Letter => i = run_end(i, Class::Letter),
                Class::Digit => {
                    let mut j = i;
                    while j < n && j - i < 3 && chars[j] == Class::Digit {
                        j += 1;
                    }
                    i = j;
                }
                Class::Punct => {
                    if i + 1 < n && chars[i + 1] == Class::Letter {
                        i = run_end(i + 1, Class::Letter);
                    } else {
                        i = run_end(i, Class::Punct);
                    }
                }
                Class::Space => {
                    let j = run_end(i, Class::Space);
                    let hands_off = j < n
                        && raw[j - 1] == ' '
                        && matches!(chars[j], Class::Letter | Class::Punct);
                    if !hands_off {
                        i = j;
                    } else if j - 1 > i {
                        // Whitespace minus the final space is its own piece.
                        i = j - 1;
                    } else {
                        // Single space leads the next piece.
                        i = match chars[j] {
                            Class::Letter => run_end(j, Class::Letter),
                            _ => run_end(j, Class::Punct),
                        };
                    }
                }
            }
        }
        count
    }
}

/// Token count under the default tokenizer.
pub fn estimate_tokens(text: &str) -> usize {
    DefaultTokenizer.count(text)
}

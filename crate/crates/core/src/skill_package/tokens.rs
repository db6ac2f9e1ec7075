/// Counts model tokens in a piece of text.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Model-free estimate: `ceil(words * 4 / 3)`, where a word is a maximal run of
/// non-whitespace characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordHeuristic;

impl TokenCounter for WordHeuristic {
    fn count(&self, text: &str) -> usize {
        let words = text.split_whitespace().count();
        (4 * words).div_ceil(3)
    }
}

pub fn count_tokens(text: &str) -> usize {
    WordHeuristic.count(text)
}

/// Keeps the longest whitespace-delimited prefix of `text` whose count does
/// not exceed `max_tokens`. Returns the prefix and whether anything was cut.
pub fn truncate_to_budget(counter: &dyn TokenCounter, text: &str, max_tokens: usize) -> (String, bool) {
    if counter.count(text) <= max_tokens {
        return (text.to_string(), false);
    }
    // Word boundaries as byte offsets of each word end.
    let mut ends = Vec::new();
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                ends.push(i);
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    if in_word {
        ends.push(text.len());
    }
    // Largest word prefix within budget.
    let (mut lo, mut hi) = (0usize, ends.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if counter.count(&text[..ends[mid - 1]]) <= max_tokens {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let cut = if lo == 0 { 0 } else { ends[lo - 1] };
    (text[..cut].to_string(), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_values() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("alpha beta gamma"), 4);
        assert_eq!(count_tokens(&"w ".repeat(3750)), 5000);
        assert_eq!(count_tokens("  \n\t "), 0);
        assert_eq!(count_tokens("one"), 2);
    }

    #[test]
    fn truncation_respects_budget() {
        let text = "a b c d e f g h i j";
        let (cut, flagged) = truncate_to_budget(&WordHeuristic, text, 5);
        assert!(flagged);
        assert_eq!(cut, "a b c");
        assert_eq!(count_tokens(&cut), 4);
        let (same, flagged) = truncate_to_budget(&WordHeuristic, text, 100);
        assert!(!flagged);
        assert_eq!(same, text);
    }

    proptest! {
        #[test]
        fn monotone_under_concatenation(a in "[a-z \n]{0,60}", b in "[a-z \n]{0,60}") {
            let joined = format!("{a}{b}");
            prop_assert!(count_tokens(&joined) >= count_tokens(&a).max(count_tokens(&b)));
        }

        #[test]
        fn truncated_text_fits(text in "[a-z ]{0,200}", budget in 0usize..40) {
            let (cut, _) = truncate_to_budget(&WordHeuristic, &text, budget);
            prop_assert!(count_tokens(&cut) <= budget);
            prop_assert!(text.starts_with(&cut));
        }
    }
}

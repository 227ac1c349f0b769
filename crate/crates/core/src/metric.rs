// SPDX-License-Identifier: MIT OR Apache-2.0

//! Answer matching for generated text.

/// Case-insensitive containment at whitespace-token granularity: the gold
/// tokens must appear as a contiguous run in the generation, so `a1` does not
/// match inside `a10`. An empty gold answer never matches.
pub fn answer_matches(generation: &str, gold: &str) -> bool {
    let gold: Vec<String> = gold.split_whitespace().map(str::to_lowercase).collect();
    if gold.is_empty() {
        return false;
    }
    let gen: Vec<String> = generation.split_whitespace().map(str::to_lowercase).collect();
    gen.windows(gold.len()).any(|w| w == gold.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_rules() {
        assert!(answer_matches("a3", "a3"));
        assert!(answer_matches("it is A3 .", "a3"));
        assert!(answer_matches("x new york city", "New York"));
        assert!(!answer_matches("a10", "a1"));
        assert!(!answer_matches("york new", "new york"));
        assert!(!answer_matches("", "a1"));
        assert!(!answer_matches("a1", ""));
        assert!(!answer_matches("a1", "   "));
    }
}

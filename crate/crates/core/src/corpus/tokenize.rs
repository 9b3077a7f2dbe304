use std::fmt;
use std::sync::Arc;

/// English stopword set used when stopword removal is enabled.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "if", "in", "into", "is", "it",
    "no", "not", "of", "on", "or", "such", "that", "the", "their", "then", "there", "these",
    "they", "this", "to", "was", "will", "with",
];

/// Hook for plugging a stemmer into the analyzer.
pub trait Stemmer: Send + Sync {
    /// Stable name, recorded in serialized indexes.
    fn name(&self) -> &str;
    fn stem(&self, term: &str) -> String;
}

/// Splits text into lowercase terms.
///
/// Words are maximal runs of alphanumeric characters plus apostrophes.
/// A word containing apostrophes is split at them and any single-character
/// fragment from that split is dropped ("EQT's" gives `eqt`). Stopword
/// removal and stemming are applied afterwards when configured.
#[derive(Clone, Default)]
pub struct Analyzer {
    pub remove_stopwords: bool,
    stemmer: Option<Arc<dyn Stemmer>>,
}

impl fmt::Debug for Analyzer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Analyzer")
            .field("remove_stopwords", &self.remove_stopwords)
            .field("stemmer", &self.stemmer_name())
            .finish()
    }
}

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}')
}

impl Analyzer {
    pub fn new(remove_stopwords: bool) -> Self {
        Analyzer {
            remove_stopwords,
            stemmer: None,
        }
    }

    pub fn with_stemmer(mut self, stemmer: Arc<dyn Stemmer>) -> Self {
        self.stemmer = Some(stemmer);
        self
    }

    pub fn stemmer_name(&self) -> Option<&str> {
        self.stemmer.as_deref().map(|s| s.name())
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split(|c: char| !(c.is_alphanumeric() || is_apostrophe(c))) {
            if word.is_empty() {
                continue;
            }
            if word.contains(is_apostrophe) {
                for frag in word.split(is_apostrophe) {
                    if frag.chars().count() > 1 {
                        self.push_term(frag, &mut out);
                    }
                }
            } else {
                self.push_term(word, &mut out);
            }
        }
        out
    }

    fn push_term(&self, raw: &str, out: &mut Vec<String>) {
        let term = raw.to_lowercase();
        if self.remove_stopwords && STOPWORDS.contains(&term.as_str()) {
            return;
        }
        match &self.stemmer {
            Some(s) => out.push(s.stem(&term)),
            None => out.push(term),
        }
    }
}

/// Tokenizes with the default analyzer (stopwords kept, no stemming).
pub fn tokenize(text: &str) -> Vec<String> {
    Analyzer::default().tokenize(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_lowercase_and_punct() {
        assert_eq!(tokenize("The Eiffel Tower!"), vec!["the", "eiffel", "tower"]);
    }

    #[test]
    fn empty_input() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  ?! ").is_empty());
    }

    #[test]
    fn apostrophe_fragments_dropped() {
        assert_eq!(tokenize("EQT's headquarters"), vec!["eqt", "headquarters"]);
        assert_eq!(tokenize("EQT\u{2019}s"), vec!["eqt"]);
        assert_eq!(tokenize("'quoted'"), vec!["quoted"]);
    }

    #[test]
    fn standalone_single_chars_kept() {
        assert_eq!(tokenize("a b a"), vec!["a", "b", "a"]);
    }

    #[test]
    fn unicode_words() {
        assert_eq!(tokenize("Zürich–Genève, 1999"), vec!["zürich", "genève", "1999"]);
    }

    #[test]
    fn stopwords_removed_when_enabled() {
        let a = Analyzer::new(true);
        assert_eq!(a.tokenize("The Eiffel Tower is in Paris"), vec!["eiffel", "tower", "paris"]);
    }

    struct Chop;
    impl Stemmer for Chop {
        fn name(&self) -> &str {
            "chop-s"
        }
        fn stem(&self, term: &str) -> String {
            term.strip_suffix('s').unwrap_or(term).to_string()
        }
    }

    #[test]
    fn stemmer_hook_applies() {
        let a = Analyzer::default().with_stemmer(Arc::new(Chop));
        assert_eq!(a.tokenize("towers tower"), vec!["tower", "tower"]);
        assert_eq!(a.stemmer_name(), Some("chop-s"));
    }
}

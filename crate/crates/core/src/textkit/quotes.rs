use serde::{Deserialize, Serialize};

/// Double-quote convention for post-processing output text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuoteStyle {
    #[default]
    AsIs,
    /// `"x"`
    Straight,
    /// `“x”`
    English,
    /// `„x“`
    German,
    /// `«x»`
    French,
}

impl QuoteStyle {
    fn glyphs(self) -> Option<(char, char)> {
        match self {
            QuoteStyle::AsIs => None,
            QuoteStyle::Straight => Some(('"', '"')),
            QuoteStyle::English => Some(('“', '”')),
            QuoteStyle::German => Some(('„', '“')),
            QuoteStyle::French => Some(('«', '»')),
        }
    }
}

fn is_double_quote(c: char) -> bool {
    matches!(c, '"' | '“' | '”' | '„' | '‟' | '«' | '»')
}

/// Rewrites paired double quotes into `style`. Quotes are paired in reading
/// order; a trailing unpaired quote is left as it is.
pub fn localize_quotes(text: &str, style: QuoteStyle) -> String {
    let Some((open, close)) = style.glyphs() else {
        return text.to_owned();
    };
    let mut chars: Vec<char> = text.chars().collect();
    let positions: Vec<usize> = chars.iter().enumerate().filter(|(_, &c)| is_double_quote(c)).map(|(i, _)| i).collect();
    for pair in positions.chunks_exact(2) {
        chars[pair[0]] = open;
        chars[pair[1]] = close;
    }
    chars.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn german_quotes() {
        assert_eq!(localize_quotes("\"x\"", QuoteStyle::German), "„x“");
        assert_eq!(localize_quotes("er sagte \"ja\" und \"nein\"", QuoteStyle::German), "er sagte „ja“ und „nein“");
    }

    #[test]
    fn typographic_input_and_unpaired_quote() {
        assert_eq!(localize_quotes("“a” \"b", QuoteStyle::French), "«a» \"b");
    }

    #[test]
    fn as_is_and_quote_free_text() {
        assert_eq!(localize_quotes("\"x\"", QuoteStyle::AsIs), "\"x\"");
        assert_eq!(localize_quotes("no quotes here", QuoteStyle::German), "no quotes here");
    }

    proptest! {
        #[test]
        fn preserves_non_quote_characters(s in "[a-z \"“”„«»]{0,40}", style in 0usize..5) {
            let style = [QuoteStyle::AsIs, QuoteStyle::Straight, QuoteStyle::English, QuoteStyle::German, QuoteStyle::French][style];
            let out = localize_quotes(&s, style);
            prop_assert_eq!(out.chars().count(), s.chars().count());
            let strip = |t: &str| t.chars().filter(|&c| !is_double_quote(c)).collect::<String>();
            prop_assert_eq!(strip(&out), strip(&s));
        }
    }
}

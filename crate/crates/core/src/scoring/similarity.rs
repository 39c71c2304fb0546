use std::collections::HashMap;

/// Lowercased runs of two or more word characters (letters, digits, `_`).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut len = 0usize;
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            current.extend(ch.to_lowercase());
            len += 1;
        } else {
            if len >= 2 {
                tokens.push(std::mem::take(&mut current));
            }
            current.clear();
            len = 0;
        }
    }
    if len >= 2 {
        tokens.push(current);
    }
    tokens
}

/// Cosine similarity between the TF-IDF vectors of `a` and `b`, with the
/// vectorizer fit on the two-document corpus `{a, b}`.
///
/// Term frequency is the raw count, IDF is `ln((1 + n) / (1 + df)) + 1` with
/// `n = 2`, and both vectors are L2-normalized before the dot product.
///
/// A document with no tokens is "empty". Two empty documents score 1.0 when
/// their trimmed text is equal and 0.0 otherwise; exactly one empty document
/// scores 0.0.
pub fn lexical_similarity(a: &str, b: &str) -> f64 {
    let ta = tokenize(a);
    let tb = tokenize(b);
    match (ta.is_empty(), tb.is_empty()) {
        (true, true) => return if a.trim() == b.trim() { 1.0 } else { 0.0 },
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }

    let ca = counts(&ta);
    let cb = counts(&tb);
    let idf = |term: &str| -> f64 {
        let df = usize::from(ca.contains_key(term)) + usize::from(cb.contains_key(term));
        ((1.0 + 2.0) / (1.0 + df as f64)).ln() + 1.0
    };

    let weigh = |c: &HashMap<&str, usize>| -> HashMap<String, f64> {
        c.iter()
            .map(|(t, n)| (t.to_string(), *n as f64 * idf(t)))
            .collect()
    };
    let wa = weigh(&ca);
    let wb = weigh(&cb);

    let norm = |w: &HashMap<String, f64>| w.values().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = wa
        .iter()
        .filter_map(|(t, v)| wb.get(t).map(|u| u * v))
        .sum();
    let cos = dot / (norm(&wa) * norm(&wb));
    cos.clamp(0.0, 1.0)
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_drops_single_characters() {
        assert_eq!(tokenize("a bc D_e 4 files!"), vec!["bc", "d_e", "files"]);
        assert_eq!(tokenize("Hello.java"), vec!["hello", "java"]);
    }

    #[test]
    fn identical_documents() {
        assert_eq!(lexical_similarity("4 files", "4 files"), 1.0);
        let s = lexical_similarity("dir1/a.txt\ndir2/b.txt", "dir1/a.txt\ndir2/b.txt");
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_vocabularies() {
        assert_eq!(lexical_similarity("alpha beta", "gamma delta"), 0.0);
    }

    #[test]
    fn empty_document_rules() {
        assert_eq!(lexical_similarity("", ""), 1.0);
        assert_eq!(lexical_similarity("", "some output"), 0.0);
        assert_eq!(lexical_similarity("some output", "  "), 0.0);
        // token-free but non-empty: equality decides
        assert_eq!(lexical_similarity("5\n", "5"), 1.0);
        assert_eq!(lexical_similarity("5", "4"), 0.0);
    }

    #[test]
    fn order_of_terms_does_not_matter() {
        assert!((lexical_similarity("foo bar baz", "baz foo bar") - 1.0).abs() < 1e-12);
    }
}

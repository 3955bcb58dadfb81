//! Entity-id patterns: `*` matches any run of characters, `?` exactly one.
//! There is no escaping; every other character matches itself.

/// Returns true if `text` matches `pattern` in full.
pub fn matches(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    // Position of the last `*` and the text index it is currently absorbing up to.
    let mut star: Option<(usize, usize)> = None;

    while ti < t.len() {
        match p.get(pi) {
            Some('*') => {
                star = Some((pi, ti));
                pi += 1;
            }
            Some(&c) if c == '?' || c == t[ti] => {
                pi += 1;
                ti += 1;
            }
            _ => match star {
                Some((sp, st)) => {
                    pi = sp + 1;
                    ti = st + 1;
                    star = Some((sp, st + 1));
                }
                None => return false,
            },
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive recursive reference matcher.
    fn oracle(p: &[char], t: &[char]) -> bool {
        match p.split_first() {
            None => t.is_empty(),
            Some(('*', rest)) => (0..=t.len()).any(|k| oracle(rest, &t[k..])),
            Some((&c, rest)) => match t.split_first() {
                Some((&x, trest)) => (c == '?' || c == x) && oracle(rest, trest),
                None => false,
            },
        }
    }

    fn oracle_str(p: &str, t: &str) -> bool {
        let p: Vec<char> = p.chars().collect();
        let t: Vec<char> = t.chars().collect();
        oracle(&p, &t)
    }

    #[test]
    fn fixed_corpus_agrees_with_oracle() {
        let patterns = ["meter-*", "meter-1??", "*", "", "meter-?", "*-0*1", "m*r-*7", "meter-001"];
        let ids = [
            "meter-001", "meter-007", "meter-2", "meter-100", "meter-1", "meter-", "", "gauge-007",
            "meter-10", "meter-0101", "meter-r0-0001",
        ];
        for p in patterns {
            for t in ids {
                assert_eq!(matches(p, t), oracle_str(p, t), "{p:?} vs {t:?}");
            }
        }
        assert!(matches("meter-*", "meter-007"));
        assert!(!matches("meter-1??", "meter-2"));
        assert!(matches("meter-1??", "meter-100"));
    }

    proptest! {
        #[test]
        fn agrees_with_oracle(p in "[ab?*]{0,7}", t in "[abc]{0,9}") {
            prop_assert_eq!(matches(&p, &t), oracle_str(&p, &t));
        }
    }
}

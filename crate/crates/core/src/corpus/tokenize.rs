//! Text normalization shared by every loader.
//!
//! Lowercase, then split on whitespace and at punctuation boundaries. Bracketed
//! tokens such as `[v.name]` and `<eov:restaurant.food>` are kept whole, and
//! apostrophes, hyphens and underscores stay inside words.

pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = lower.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '[' || c == '<' {
            let close = if c == '[' { ']' } else { '>' };
            // only atomic when the bracket closes before any whitespace
            let rest: String = chars.clone().take_while(|&x| !x.is_whitespace()).collect();
            if let Some(end) = rest.find(close) {
                flush(&mut cur, &mut out);
                let mut tok = String::from(c);
                tok.push_str(&rest[..=end]);
                for _ in 0..rest[..=end].chars().count() {
                    chars.next();
                }
                out.push(tok);
                continue;
            }
        }
        if c.is_whitespace() {
            flush(&mut cur, &mut out);
        } else if c.is_alphanumeric() || matches!(c, '\'' | '-' | '_') {
            cur.push(c);
        } else {
            flush(&mut cur, &mut out);
            out.push(c.to_string());
        }
    }
    flush(&mut cur, &mut out);
    out
}

fn flush(cur: &mut String, out: &mut Vec<String>) {
    if !cur.is_empty() {
        out.push(std::mem::take(cur));
    }
}

pub fn join(tokens: &[String]) -> String {
    tokens.join(" ")
}

use super::schema::{placeholder, placeholder_slot, Schema};
use super::tokenize::tokenize;
use crate::kb::Entity;

/// (placeholder token, replaced source span), in left-to-right order.
pub type SpanMap = Vec<(String, Vec<String>)>;

/// Candidate (placeholder, value tokens) pairs: the entity's requestable slot values
/// first, then inventory values of requestable slots, both in schema order.
pub fn candidates(entity: Option<&Entity>, domain: Option<&str>, schema: &Schema) -> Vec<(String, Vec<String>)> {
    let mut out = Vec::new();
    if let Some(e) = entity {
        if let Some(d) = schema.domain(&e.domain) {
            for slot in &d.requestable {
                if let Some(v) = e.fields.get(slot) {
                    let toks = tokenize(v);
                    if !toks.is_empty() {
                        out.push((placeholder(slot), toks));
                    }
                }
            }
        }
    }
    for d in schema.domains() {
        if domain.is_some_and(|name| name != d.name) {
            continue;
        }
        for slot in &d.requestable {
            for v in d.values.get(slot).into_iter().flatten() {
                let toks = tokenize(v);
                if !toks.is_empty() {
                    out.push((placeholder(slot), toks));
                }
            }
        }
    }
    out
}

/// Replace every maximal span matching a candidate value with its placeholder,
/// scanning left to right and taking the longest match at each position (earlier
/// candidates win ties).
pub fn delexicalize(
    response_raw: &[String],
    entity: Option<&Entity>,
    schema: &Schema,
) -> (Vec<String>, SpanMap) {
    let cands = candidates(entity, entity.map(|e| e.domain.as_str()), schema);
    delexicalize_with(response_raw, &cands)
}

pub fn delexicalize_with(response_raw: &[String], cands: &[(String, Vec<String>)]) -> (Vec<String>, SpanMap) {
    let mut out = Vec::with_capacity(response_raw.len());
    let mut spans = SpanMap::new();
    let mut i = 0;
    while i < response_raw.len() {
        let mut best: Option<&(String, Vec<String>)> = None;
        for c in cands {
            let n = c.1.len();
            if i + n <= response_raw.len()
                && response_raw[i..i + n] == c.1[..]
                && best.is_none_or(|b| n > b.1.len())
            {
                best = Some(c);
            }
        }
        match best {
            Some((ph, value)) => {
                out.push(ph.clone());
                spans.push((ph.clone(), value.clone()));
                i += value.len();
            }
            None => {
                out.push(response_raw[i].clone());
                i += 1;
            }
        }
    }
    (out, spans)
}

/// Inverse of [`delexicalize`]: placeholders consume span_map entries in order.
pub fn relexicalize(response_delex: &[String], span_map: &SpanMap) -> Vec<String> {
    let mut out = Vec::with_capacity(response_delex.len());
    let mut next = span_map.iter().peekable();
    for tok in response_delex {
        match next.peek() {
            Some((ph, span)) if ph == tok => {
                out.extend(span.iter().cloned());
                next.next();
            }
            _ => out.push(tok.clone()),
        }
    }
    out
}

/// Fill placeholders from an entity record; unknown placeholders stay as-is.
pub fn fill_from_entity(response_delex: &[String], entity: Option<&Entity>) -> Vec<String> {
    let mut out = Vec::with_capacity(response_delex.len());
    for tok in response_delex {
        match (placeholder_slot(tok), entity) {
            (Some(slot), Some(e)) if e.fields.contains_key(slot) => out.extend(tokenize(&e.fields[slot])),
            _ => out.push(tok.clone()),
        }
    }
    out
}

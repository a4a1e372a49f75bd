//! Scoring rules and metrics.

use thiserror::Error;

use super::dataset::letter;
use crate::combine::normalize_name;
use crate::geometry::{iou, Region};

#[derive(Debug, Error, PartialEq)]
#[error("cyclic evaluation needs at least 2 options (got {0})")]
pub struct TooFewOptions(pub usize);

/// The `N` rotations of `options`. Rotation `r` moves original option `i` to
/// position `(i + r) mod N`; rotation 0 is the original order.
pub fn cyclic_permutations<T: Clone>(options: &[T]) -> Result<Vec<Vec<T>>, TooFewOptions> {
    let n = options.len();
    if n < 2 {
        return Err(TooFewOptions(n));
    }
    Ok((0..n).map(|r| (0..n).map(|pos| options[(pos + n - r) % n].clone()).collect()).collect())
}

/// Position of original option `index` under rotation `r`.
pub fn rotated_position(index: usize, r: usize, n: usize) -> usize {
    (index + r) % n
}

/// Extracts the chosen option letter from a model reply.
///
/// In order: the first standalone option letter (uppercase, or lowercase
/// inside brackets such as `(b)`), then the single option whose text occurs
/// in the reply. Anything else abstains.
pub fn parse_choice(output: &str, options: &[String]) -> Option<char> {
    let n = options.len().min(26);
    let chars: Vec<char> = output.chars().collect();
    let boundary = |i: Option<usize>| i.and_then(|i| chars.get(i)).map_or(true, |c| !c.is_alphanumeric());
    for (i, &c) in chars.iter().enumerate() {
        let upper = c.to_ascii_uppercase();
        if !upper.is_ascii_uppercase() || (upper as u8 - b'A') as usize >= n {
            continue;
        }
        if !boundary(i.checked_sub(1)) || !boundary(Some(i + 1)) {
            continue;
        }
        // a bare lowercase letter is usually the article "a"
        let bracketed = i > 0 && matches!(chars[i - 1], '(' | '[') && matches!(chars.get(i + 1), Some(')' | ']'));
        if c.is_ascii_uppercase() || bracketed {
            return Some(upper);
        }
    }
    let lower = output.to_lowercase();
    let mut matches =
        options.iter().enumerate().filter(|(_, o)| !o.trim().is_empty() && lower.contains(&o.trim().to_lowercase()));
    match (matches.next(), matches.next()) {
        (Some((i, _)), None) => Some(letter(i)),
        _ => None,
    }
}

/// 1 if any target name is among the first `k` distinct hit names.
pub fn recall_at_k(hits: &[String], targets: &[String], k: usize) -> f64 {
    let mut seen: Vec<String> = Vec::new();
    for h in hits {
        let Ok(name) = normalize_name(h) else { continue };
        if !seen.contains(&name) {
            seen.push(name);
        }
        if seen.len() == k {
            break;
        }
    }
    let hit = targets.iter().filter_map(|t| normalize_name(t).ok()).any(|t| seen.contains(&t));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// IoU of `gt` with its best-matching predicted region; 0 without
/// predictions.
pub fn miou(pred: &[Region], gt: &Region) -> f64 {
    pred.iter().map(|p| iou(p, gt)).fold(0.0, f64::max)
}

/// `1 - exp(mean log-probability)`; `None` for an empty sequence.
pub fn uncertainty(token_logprobs: &[f64]) -> Option<f64> {
    if token_logprobs.is_empty() {
        return None;
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Some((1.0 - mean.exp()).clamp(0.0, 1.0))
}

/// Gain from the image: accuracy with it minus accuracy without.
pub fn mg(s_v: f64, s_wv: f64) -> f64 {
    s_v - s_wv
}

/// Leakage: how far the no-image accuracy exceeds the text-only base model.
pub fn ml(s_wv: f64, s_t: f64) -> f64 {
    (s_wv - s_t).max(0.0)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

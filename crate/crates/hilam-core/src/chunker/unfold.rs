//! Pure boundary-pattern operations: chunk selection indices, segment ids,
//! and the two-stage boundary unfolding used for skill extraction.
//!
//! Boundary vectors are 0/1 with the first entry always 1, so every position
//! belongs to exactly one chunk and chunked sequences are never empty.
//! Segment ids are 0-based chunk indices.

use crate::error::{Error, Result};

/// Indices of the chunk starts, in increasing order.
pub fn boundary_indices(b: &[u8]) -> Vec<usize> {
    debug_assert!(b.first() == Some(&1), "boundary vector must start with 1");
    b.iter()
        .enumerate()
        .filter_map(|(t, &v)| (v == 1).then_some(t))
        .collect()
}

/// Cumulative-sum chunk membership: entry t is the 0-based index of the
/// chunk containing position t.
pub fn segment_ids(b: &[u8]) -> Vec<usize> {
    debug_assert!(b.first() == Some(&1), "boundary vector must start with 1");
    let mut ids = Vec::with_capacity(b.len());
    let mut current = 0usize;
    for (t, &v) in b.iter().enumerate() {
        if v == 1 && t > 0 {
            current += 1;
        }
        ids.push(current);
    }
    ids
}

/// Express a stage-2 boundary pattern (defined over stage-1 chunks) at the
/// original resolution: position t starts a stage-2 segment iff it starts a
/// stage-1 chunk whose chunk index starts a stage-2 chunk.
/// Returns (unfolded stage-1, unfolded stage-2); stage 1 unfolds to itself.
pub fn unfold_boundaries(b1: &[u8], b2: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let chunks = b1.iter().filter(|&&v| v == 1).count();
    if b2.len() != chunks {
        return Err(Error::Eval(format!(
            "unfold_boundaries: stage-2 length {} does not match {} stage-1 chunks",
            b2.len(),
            chunks
        )));
    }
    let seg = segment_ids(b1);
    let unfolded2 = b1
        .iter()
        .zip(&seg)
        .map(|(&v, &chunk)| if v == 1 && b2[chunk] == 1 { 1 } else { 0 })
        .collect();
    Ok((b1.to_vec(), unfolded2))
}

/// Repeat chunk-level rows over their segments: out row t = chunks[seg[t]].
/// This is the reference expansion used by both dechunking and skill
/// extraction.
pub fn expand_rows(chunk_rows: &[f64], width: usize, seg: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(seg.len() * width);
    for &s in seg {
        out.extend_from_slice(&chunk_rows[s * width..(s + 1) * width]);
    }
    out
}

//! Tagging metrics: token accuracy, BIO chunk precision/recall/F1, and
//! per-label confusion counts.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Alphabet, Dataset};
use crate::error::Result;
use crate::models::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold_chunks: usize,
    pub pred_chunks: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub token_accuracy: f64,
    pub tokens: usize,
    /// Present only when every label follows the B-/I-/O convention.
    pub chunk: Option<ChunkScores>,
    /// `confusion[gold][pred]` token counts.
    pub confusion: Vec<Vec<u64>>,
    pub decode_seconds: f64,
}

impl EvalResult {
    pub fn table(&self, labels: &Alphabet) -> String {
        let mut out = format!(
            "token accuracy: {:.4} ({} tokens)\n",
            self.token_accuracy, self.tokens
        );
        if let Some(c) = &self.chunk {
            out.push_str(&format!(
                "chunk P/R/F1: {:.4} / {:.4} / {:.4} ({} gold, {} predicted, {} matched)\n",
                c.precision, c.recall, c.f1, c.gold_chunks, c.pred_chunks, c.matched
            ));
        }
        out.push_str("confusion (rows gold, columns predicted):\n");
        for (g, row) in self.confusion.iter().enumerate() {
            let name = labels.string(g as u32).unwrap_or("?");
            out.push_str(&format!("  {:<10}", name));
            for &c in row {
                out.push_str(&format!(" {:>7}", c));
            }
            out.push('\n');
        }
        out
    }
}

/// A typed span `[start, end)` of one tag sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Chunk {
    kind: String,
    start: usize,
    end: usize,
}

/// Maximal B-prefixed runs: a chunk starts at `B-X` and extends over
/// consecutive `I-X` tags; its type comes from the B tag.
fn chunks_of(tags: &[&str]) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut open: Option<Chunk> = None;
    for (k, tag) in tags.iter().enumerate() {
        if let Some(kind) = tag.strip_prefix("B-") {
            if let Some(c) = open.take() {
                chunks.push(c);
            }
            open = Some(Chunk {
                kind: kind.to_string(),
                start: k,
                end: k + 1,
            });
        } else if let Some(kind) = tag.strip_prefix("I-") {
            match &mut open {
                Some(c) if c.kind == kind && c.end == k => c.end = k + 1,
                _ => {
                    if let Some(c) = open.take() {
                        chunks.push(c);
                    }
                }
            }
        } else if let Some(c) = open.take() {
            chunks.push(c);
        }
    }
    if let Some(c) = open {
        chunks.push(c);
    }
    chunks
}

fn follows_bio(labels: &Alphabet) -> bool {
    !labels.is_empty()
        && labels
            .iter()
            .all(|l| l == "O" || l.starts_with("B-") || l.starts_with("I-"))
}

/// Score predicted against gold label-id sequences. Chunk metrics are
/// emitted only when the label alphabet follows the BIO convention.
pub fn score_sequences(
    labels: &Alphabet,
    gold: &[Vec<u32>],
    pred: &[Vec<u32>],
    decode_seconds: f64,
) -> EvalResult {
    let yn = labels.len();
    let mut confusion = vec![vec![0u64; yn]; yn];
    let mut correct = 0usize;
    let mut tokens = 0usize;
    for (g_seq, p_seq) in gold.iter().zip(pred) {
        for (&g, &p) in g_seq.iter().zip(p_seq) {
            confusion[g as usize][p as usize] += 1;
            correct += (g == p) as usize;
            tokens += 1;
        }
    }
    let token_accuracy = if tokens == 0 {
        0.0
    } else {
        correct as f64 / tokens as f64
    };

    let chunk = if follows_bio(labels) {
        let mut gold_total = 0usize;
        let mut pred_total = 0usize;
        let mut matched = 0usize;
        for (g_seq, p_seq) in gold.iter().zip(pred) {
            let name = |ids: &[u32]| -> Vec<&str> {
                ids.iter().map(|&i| labels.string(i).unwrap_or("O")).collect()
            };
            let g_chunks = chunks_of(&name(g_seq));
            let p_chunks = chunks_of(&name(p_seq));
            matched += p_chunks.iter().filter(|c| g_chunks.contains(c)).count();
            gold_total += g_chunks.len();
            pred_total += p_chunks.len();
        }
        let precision = if pred_total > 0 {
            matched as f64 / pred_total as f64
        } else {
            0.0
        };
        let recall = if gold_total > 0 {
            matched as f64 / gold_total as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Some(ChunkScores {
            precision,
            recall,
            f1,
            gold_chunks: gold_total,
            pred_chunks: pred_total,
            matched,
        })
    } else {
        None
    };

    EvalResult {
        token_accuracy,
        tokens,
        chunk,
        confusion,
        decode_seconds,
    }
}

/// Decode the dataset with the model and score against its gold tags.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalResult> {
    let start = Instant::now();
    let mut pred = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        pred.push(model.viterbi(&s.features)?.0);
    }
    let secs = start.elapsed().as_secs_f64();
    let gold: Vec<Vec<u32>> = ds.samples.iter().map(|s| s.gold.clone()).collect();
    Ok(score_sequences(&ds.label_alphabet, &gold, &pred, secs))
}

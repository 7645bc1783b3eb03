//! Batching. Sessions stay whole (the examination branch walks the session
//! in order); shuffling permutes session order only.

use crate::seed::stream_rng;

use super::EncodedSession;

/// Split `sessions` into batches of at most `batch_size` references. With
/// `shuffle` the session order is permuted by a stream seeded from `seed`;
/// otherwise input order is kept.
pub fn batch_iter(
    sessions: &[EncodedSession],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> impl Iterator<Item = Vec<&EncodedSession>> + '_ {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    if shuffle {
        use rand::seq::SliceRandom;
        let mut rng = stream_rng(seed, "batch");
        order.shuffle(&mut rng);
    }
    let mut next = 0usize;
    std::iter::from_fn(move || {
        if next >= order.len() {
            return None;
        }
        let end = (next + batch_size).min(order.len());
        let batch = order[next..end].iter().map(|&i| &sessions[i]).collect();
        next = end;
        Some(batch)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicklog::{EncodedDoc, EncodedQuery};

    fn session(doc_counts: &[usize]) -> EncodedSession {
        EncodedSession {
            queries: doc_counts
                .iter()
                .enumerate()
                .map(|(qi, &n)| EncodedQuery {
                    query: qi + 2,
                    docs: (0..n)
                        .map(|j| EncodedDoc { url: j + 2, pos: j + 1, click: (j % 2) as u8 })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn unshuffled_batches_preserve_input_order_and_sizes() {
        let sessions: Vec<EncodedSession> = (1..=5).map(|n| session(&[n])).collect();
        let batches: Vec<Vec<&EncodedSession>> = batch_iter(&sessions, 2, 0, false).collect();
        assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![2, 2, 1]);
        let doc_counts: Vec<usize> =
            batches.iter().flatten().map(|s| s.doc_count()).collect();
        assert_eq!(doc_counts, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn doc_count_is_conserved_under_shuffle_and_order_is_seeded() {
        let sessions: Vec<EncodedSession> = (0..17).map(|i| session(&[(i % 9) + 1, 3])).collect();
        let total: usize = sessions.iter().map(|s| s.doc_count()).sum();
        let batched: usize =
            batch_iter(&sessions, 4, 42, true).flatten().map(|s| s.doc_count()).sum();
        assert_eq!(batched, total);

        let order = |seed| -> Vec<usize> {
            batch_iter(&sessions, 4, seed, true).flatten().map(|s| s.doc_count()).collect()
        };
        assert_eq!(order(42), order(42));
        assert_ne!(order(42), order(43));
    }
}

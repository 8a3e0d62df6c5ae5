//! Batch construction: shuffled clicked chunks, uniformly drawn unclicked
//! events and independent meta batches.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::datasets::{Event, InteractionDataset};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::config::SampleRatio;
use super::heads::Pair;

pub fn clicked_pair(event: &Event) -> Pair {
    Pair { user: event.user, item: event.item, converted: Some(event.converted) }
}

/// Shuffles `0..len` and cuts it into chunks of `batch_size`.
pub fn epoch_chunks(len: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Number of unclicked events to pair with a clicked chunk.
pub fn unclicked_count(ratio: SampleRatio, chunk_len: usize, dataset: &InteractionDataset) -> usize {
    match ratio {
        SampleRatio::Finite(r) => r as usize * chunk_len,
        SampleRatio::All => {
            let train = dataset.train().len().max(1) as f64;
            let unclicked = (dataset.num_pairs() - dataset.num_clicked()) as f64;
            (unclicked / train * chunk_len as f64).round() as usize
        }
    }
}

/// Draws `count` unclicked pairs uniformly with replacement by rejection
/// against every clicked event (train and validation).
pub fn sample_unclicked(dataset: &InteractionDataset, count: usize, rng: &mut Rng) -> Result<Vec<Pair>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if dataset.num_clicked() >= dataset.num_pairs() {
        return Err(Error::validation("every user-item pair is clicked; cannot sample unclicked events"));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let user = rng.random_range(0..dataset.num_users());
        let item = rng.random_range(0..dataset.num_items());
        if !dataset.is_clicked(user, item) {
            out.push(Pair { user, item, converted: None });
        }
    }
    Ok(out)
}

/// Up to `size` distinct training events, drawn without replacement.
pub fn sample_clicked(train: &[Event], size: usize, rng: &mut Rng) -> Vec<Pair> {
    let amount = size.min(train.len());
    index::sample(rng, train.len(), amount).into_iter().map(|i| clicked_pair(&train[i])).collect()
}

/// Clicked chunk followed by its unclicked companions.
pub fn full_batch(
    dataset: &InteractionDataset,
    clicked: Vec<Pair>,
    ratio: SampleRatio,
    rng: &mut Rng,
) -> Result<Vec<Pair>> {
    let extra = unclicked_count(ratio, clicked.len(), dataset);
    let mut batch = clicked;
    batch.extend(sample_unclicked(dataset, extra, rng)?);
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DatasetKind;
    use crate::rng::{stream_rng, Stream};

    fn toy() -> InteractionDataset {
        let train: Vec<Event> = (0..6).map(|k| Event { user: k % 3, item: k, converted: k % 2 == 0 }).collect();
        let validation = vec![Event { user: 2, item: 7, converted: true }];
        InteractionDataset::new(DatasetKind::Real, 3, 8, train, validation, Vec::new()).unwrap()
    }

    #[test]
    fn chunks_cover_every_index_once() {
        let mut rng = stream_rng(1, Stream::TrainBatches);
        let chunks = epoch_chunks(10, 4, &mut rng);
        assert_eq!(chunks.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = chunks.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn unclicked_samples_avoid_clicked_pairs() {
        let ds = toy();
        let mut rng = stream_rng(2, Stream::TrainBatches);
        let pairs = sample_unclicked(&ds, 500, &mut rng).unwrap();
        assert_eq!(pairs.len(), 500);
        assert!(pairs.iter().all(|p| !ds.is_clicked(p.user, p.item) && p.converted.is_none()));
    }

    #[test]
    fn ratio_sizes() {
        let ds = toy();
        assert_eq!(unclicked_count(SampleRatio::Finite(0), 5, &ds), 0);
        assert_eq!(unclicked_count(SampleRatio::Finite(4), 5, &ds), 20);
        // 24 pairs, 7 clicked, 6 train: 17/6 per clicked event.
        assert_eq!(unclicked_count(SampleRatio::All, 6, &ds), 17);
    }

    #[test]
    fn meta_batch_is_distinct_and_capped() {
        let ds = toy();
        let mut rng = stream_rng(3, Stream::MetaBatches);
        let batch = sample_clicked(ds.train(), 100, &mut rng);
        assert_eq!(batch.len(), 6);
        let mut items: Vec<usize> = batch.iter().map(|p| p.item).collect();
        items.sort_unstable();
        items.dedup();
        assert_eq!(items.len(), 6);
    }

    #[test]
    fn saturated_dataset_is_rejected() {
        let train = vec![Event { user: 0, item: 0, converted: true }];
        let ds = InteractionDataset::new(DatasetKind::Real, 1, 1, train, Vec::new(), Vec::new()).unwrap();
        let mut rng = stream_rng(4, Stream::TrainBatches);
        assert!(sample_unclicked(&ds, 1, &mut rng).is_err());
        assert!(sample_unclicked(&ds, 0, &mut rng).unwrap().is_empty());
    }
}

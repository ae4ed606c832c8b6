//! Class-disjoint client partitions and few-shot client datasets.

use rand::seq::SliceRandom;

use crate::encoders::SyntheticWorld;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSpec {
    pub client_id: usize,
    /// Sorted global class ids, all from the base split.
    pub class_ids: Vec<usize>,
}

/// Training data of one client. Labels are local indices into
/// `class_map`, which lists the client's global class ids in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSet {
    pub features: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_map: Vec<usize>,
}

impl FewShotSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Shuffles `base_ids` with a seeded generator and slices the result
/// into `n_clients` consecutive blocks of `per_client` classes.
pub fn partition_classes(
    base_ids: &[usize],
    n_clients: usize,
    per_client: usize,
    seed_value: u64,
) -> Result<Vec<ClientSpec>> {
    let needed = n_clients
        .checked_mul(per_client)
        .ok_or_else(|| Error::Capacity("client capacity overflows".into()))?;
    if needed > base_ids.len() {
        return Err(Error::Capacity(format!(
            "{n_clients} clients x {per_client} classes = {needed} exceeds {} base classes",
            base_ids.len()
        )));
    }
    if n_clients == 0 || per_client == 0 {
        return Err(Error::contract("need at least one client and one class per client"));
    }
    let mut ids = base_ids.to_vec();
    let mut rng = seed::rng_from(&[seed_value, seed::stream::PARTITION]);
    ids.shuffle(&mut rng);
    Ok(ids
        .chunks(per_client)
        .take(n_clients)
        .enumerate()
        .map(|(client_id, block)| {
            let mut class_ids = block.to_vec();
            class_ids.sort_unstable();
            ClientSpec { client_id, class_ids }
        })
        .collect())
}

/// Draws `shots` image features for each of the client's classes. Each
/// (client, class) pair owns its own stream.
pub fn build_client_dataset(
    world: &SyntheticWorld,
    spec: &ClientSpec,
    shots: usize,
    seed_value: u64,
) -> Result<FewShotSet> {
    if spec.class_ids.is_empty() {
        return Err(Error::contract(format!("client {} has no classes", spec.client_id)));
    }
    if spec.class_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(format!(
            "client {} class ids must be sorted and unique",
            spec.client_id
        )));
    }
    if let Some(c) = spec.class_ids.iter().find(|c| !world.base_ids.contains(c)) {
        return Err(Error::contract(format!(
            "client {} holds class {c}, which is not a base class",
            spec.client_id
        )));
    }
    let k = spec.class_ids.len();
    let mut features = Vec::with_capacity(k * shots);
    let mut labels = Vec::with_capacity(k * shots);
    for (local, &class_id) in spec.class_ids.iter().enumerate() {
        let mut rng = seed::rng_from(&[
            seed_value,
            seed::stream::DATA,
            spec.client_id as u64,
            class_id as u64,
        ]);
        for _ in 0..shots {
            features.push(world.sample_image(class_id, &mut rng)?);
            labels.push(local);
        }
    }
    Ok(FewShotSet {
        features,
        labels,
        class_map: spec.class_ids.clone(),
    })
}

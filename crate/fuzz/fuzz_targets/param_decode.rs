#![no_main]

use arinv::harness::{decode_params, encode_params};
use libfuzzer_sys::fuzz_target;

// First byte: rank (0..=4); then one byte per dimension; the rest is the payload.
fuzz_target!(|data: &[u8]| {
    let Some((&rank, rest)) = data.split_first() else {
        return;
    };
    let rank = (rank % 5) as usize;
    if rest.len() < rank {
        return;
    }
    let (dims, payload) = rest.split_at(rank);
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    match decode_params(payload, &shape, "fuzz") {
        Ok(values) => {
            assert_eq!(values.len(), shape.iter().product::<usize>());
            assert_eq!(encode_params(&values), payload);
        }
        Err(_) => assert_ne!(payload.len(), 4 * shape.iter().product::<usize>()),
    }
});

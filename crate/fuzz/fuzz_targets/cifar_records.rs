#![no_main]

use arinv::data::{cifar_dataset_from_bytes, parse_cifar_records};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((labels, pixels)) = parse_cifar_records(data) else {
        assert!(cifar_dataset_from_bytes(data).is_err());
        return;
    };
    assert_eq!(pixels.len(), labels.len() * 3072);
    assert!(labels.iter().all(|&l| l < 10));
    assert!(pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    if !labels.is_empty() {
        let ds = cifar_dataset_from_bytes(data).expect("parsed records form a dataset");
        assert_eq!(ds.len(), labels.len());
    }
});

#![no_main]

use factlab::io::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ckpt).expect("decoded checkpoint must encode");
        let again = decode_checkpoint(&bytes).expect("encoded checkpoint must decode");
        assert_eq!(encode_checkpoint(&again).unwrap(), bytes);
    }
});

#![no_main]

use factlab::io::{export_dataset, import_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = import_dataset(data, None) {
        let mut out = Vec::new();
        export_dataset(&mut out, &records).expect("export to memory");
        let again = import_dataset(out.as_slice(), None).expect("exported dataset must import");
        assert_eq!(again, records);
    }
});

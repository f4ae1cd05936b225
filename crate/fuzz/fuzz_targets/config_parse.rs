#![no_main]

use factlab_cli::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        let _ = cfg.validate();
        let printed = cfg.to_text();
        let again = ExperimentConfig::parse(&printed).expect("printed config must parse");
        assert_eq!(again.to_text(), printed);
    }
});

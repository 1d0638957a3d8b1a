#![no_main]

use libfuzzer_sys::fuzz_target;
use morseflow::config::LandscapeConfig;

fuzz_target!(|s: &str| {
    if let Ok(cfg) = LandscapeConfig::from_json(s) {
        if let Ok(l) = cfg.build() {
            let x = vec![0.1; l.dim()];
            let _ = l.riemannian_gradient(&x);
            let _ = l.density_at(&x);
        }
    }
});

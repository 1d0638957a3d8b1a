//! Replays the checked-in fuzz seeds through the same entry points the fuzz
//! targets drive, so regressions show up without a fuzzing toolchain.

use std::path::{Path, PathBuf};

use morseflow::config::LandscapeConfig;
use morseflow::field::{parse_expr, ScalarField};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn parse_expr_seeds() {
    let mut parsed = 0;
    for (path, bytes) in seeds("parse_expr") {
        let Ok(s) = std::str::from_utf8(&bytes) else { continue };
        if let Ok(e) = parse_expr(s, 4) {
            let printed = e.to_string();
            assert_eq!(parse_expr(&printed, 4).as_ref(), Ok(&e), "{}", path.display());
            parsed += 1;
        }
    }
    assert!(parsed >= 5);
}

#[test]
fn landscape_config_seeds() {
    let mut built = 0;
    for (_, bytes) in seeds("landscape_config") {
        let Ok(s) = std::str::from_utf8(&bytes) else { continue };
        if let Ok(l) = LandscapeConfig::from_json(s).and_then(|c| c.build()) {
            let x = vec![0.1; l.dim()];
            let _ = l.riemannian_gradient(&x);
            let _ = l.density_at(&x);
            built += 1;
        }
    }
    assert!(built >= 5);
}

#[test]
fn eval_seeds() {
    let mut evaluated = 0;
    for (path, data) in seeds("eval") {
        if data.len() < 24 {
            continue;
        }
        let (head, tail) = data.split_at(24);
        let x: Vec<f64> = head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let Ok(src) = std::str::from_utf8(tail) else { continue };
        let Ok(f) = ScalarField::parse(src, 3) else { continue };
        if let Ok(jet) = f.jet2(&x) {
            assert!(jet.value.is_finite() && jet.gradient.iter().all(|g| g.is_finite()), "{}", path.display());
            evaluated += 1;
        }
    }
    assert!(evaluated >= 3);
}

#![no_main]

use libfuzzer_sys::fuzz_target;
use morseflow::field::parse_expr;

fuzz_target!(|s: &str| {
    if let Ok(e) = parse_expr(s, 4) {
        // the printer's output must parse back to the same tree
        let printed = e.to_string();
        assert_eq!(parse_expr(&printed, 4).as_ref(), Ok(&e), "{printed}");
    }
});
